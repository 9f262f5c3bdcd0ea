use certiflow_core::tag_parser::{scan_source, LineSpan, RequirementDraft, RequirementKind};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::support::Verdict;

const SEEDS: u64 = 1000;

/// Words that stress escaping and comment handling.
const WORDS: &[&str] = &[
    "altitude",
    "shall",
    "hold",
    "{braced}",
    "a\\b",
    "*/",
    "/*",
    "@kind",
    "@req{X}",
    "}",
    "{",
    "\\",
    "50%",
    "naïve",
    "Ünïcødé",
    "x*y",
    "path/to/*",
    "tab-free",
    "\"quoted\"",
    "<tag>",
    "a,b",
    "**",
    "//",
    "#1",
    "é",
];

fn words(rng: &mut ChaCha8Rng, n: usize) -> String {
    (0..n)
        .map(|_| *WORDS.choose(rng).unwrap())
        .collect::<Vec<_>>()
        .join(" ")
}

fn key(rng: &mut ChaCha8Rng, kind: RequirementKind) -> String {
    format!("GEN-{}-{}", kind.id_prefix(), rng.gen_range(1..10_000))
}

fn draft(seed: u64) -> RequirementDraft {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let kind = *RequirementKind::ALL.choose(&mut rng).unwrap();
    let local_key = key(&mut rng, kind);
    let mut parent_keys = Vec::new();
    if let Some(pk) = kind.parent_kind() {
        for _ in 0..rng.gen_range(0..=2) {
            let p = key(&mut rng, pk);
            if !parent_keys.contains(&p) {
                parent_keys.push(p);
            }
        }
    }
    let n = rng.gen_range(1..6);
    let title = words(&mut rng, n);
    let lines: Vec<String> = (0..rng.gen_range(1..5))
        .map(|i| {
            if i > 0 && rng.gen_bool(0.2) {
                return String::new();
            }
            let n = rng.gen_range(1..9);
            words(&mut rng, n)
        })
        .collect();
    // a text never starts or ends with a blank line
    let text = lines.join("\n").trim().to_string();
    let text = if text.is_empty() {
        "shall".to_string()
    } else {
        text
    };
    RequirementDraft {
        local_key,
        kind,
        title,
        text,
        parent_keys,
        source_path: format!("src/gen/f{seed}.c"),
        line_span: LineSpan { start: 1, end: 1 },
    }
}

fn same_but_span(a: &RequirementDraft, b: &RequirementDraft) -> bool {
    a.local_key == b.local_key
        && a.kind == b.kind
        && a.title == b.title
        && a.text == b.text
        && a.parent_keys == b.parent_keys
        && a.source_path == b.source_path
}

pub fn check() -> Verdict {
    let mut failures = Vec::new();
    let mut ok = 0;
    for seed in 0..SEEDS {
        let d = draft(seed);
        let file = format!(
            "#include \"gen.h\"\n\n{}int f{seed}(void) {{ return {seed}; }}\n",
            d.to_tag_block()
        );
        match scan_source(&file, &d.source_path) {
            Ok(back) if back.len() == 1 && same_but_span(&back[0], &d) => ok += 1,
            Ok(back) => failures.push(format!("seed {seed}: {d:?} came back as {back:?}")),
            Err(e) => failures.push(format!("seed {seed}: {d:?} rejected: {e}")),
        }
    }
    Verdict::from_failures(
        format!("{ok} of {SEEDS} seeded drafts equal after to_tag_block and scan_source"),
        failures,
    )
}
