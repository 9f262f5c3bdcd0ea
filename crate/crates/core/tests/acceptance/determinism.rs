use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::Path;

use certiflow_core::scenario::{generate_fixture, FixtureProfile, ScenarioReport, ScenarioScript};
use certiflow_core::workspace::Project;
use walkdir::WalkDir;

use crate::support::{load, parse_manifest, run, Verdict};

fn scripts() -> Vec<(String, ScenarioScript)> {
    let mut out = vec![
        ("mini-fms".to_string(), load("mini-fms.scn")),
        ("mini-fms-broken".to_string(), load("mini-fms-broken.scn")),
    ];
    for ((s, h, l), seed) in [((1, 2, 4), 7), ((2, 3, 6), 11), ((0, 1, 1), 3)] {
        out.push((
            format!("fixture {s}/{h}/{l} seed {seed}"),
            generate_fixture(FixtureProfile::new(s, h, l), seed),
        ));
    }
    out
}

/// Every file under `dir`, relative path to bytes.
fn snapshot(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    WalkDir::new(dir)
        .into_iter()
        .filter_map(Result::ok)
        .filter(|e| e.file_type().is_file())
        .map(|e| {
            let rel = e
                .path()
                .strip_prefix(dir)
                .unwrap()
                .to_string_lossy()
                .into_owned();
            (rel, fs::read(e.path()).unwrap())
        })
        .collect()
}

fn state_dir(report: &ScenarioReport) -> std::path::PathBuf {
    report.workspace.join(".certiflow")
}

fn compare(name: &str, a: &ScenarioReport, b: &ScenarioReport, failures: &mut Vec<String>) {
    let pairs: [(&str, bool); 5] = [
        (
            "store",
            a.store_text == b.store_text && a.store_digest == b.store_digest,
        ),
        ("matrix CSV", a.matrix_csv == b.matrix_csv),
        ("documents", a.documents == b.documents),
        ("manifests", a.manifests == b.manifests),
        ("expectations", a.outcomes == b.outcomes),
    ];
    for (what, same) in pairs {
        if !same {
            failures.push(format!("{name}: {what} differs between runs"));
        }
    }
    // the persisted state is byte-identical too, except the lock file
    let mut sa = snapshot(&state_dir(a));
    let mut sb = snapshot(&state_dir(b));
    sa.retain(|k, _| !k.ends_with(".lock"));
    sb.retain(|k, _| !k.ends_with(".lock"));
    if sa != sb {
        let keys: BTreeSet<&String> = sa
            .keys()
            .chain(sb.keys())
            .filter(|k| sa.get(*k) != sb.get(*k))
            .collect();
        failures.push(format!("{name}: state files differ: {keys:?}"));
    }
}

pub fn check() -> Verdict {
    let mut failures = Vec::new();
    let mut runs = 0;
    for (name, script) in scripts() {
        let (_d1, a) = run(&script);
        let (_d2, b) = run(&script);
        runs += 2;
        compare(&name, &a, &b, &mut failures);

        // a load and save round trip writes the same bytes twice
        let project = Project::load(&state_dir(&a)).unwrap();
        let out = tempfile::tempdir().unwrap();
        let (x, y) = (out.path().join("x"), out.path().join("y"));
        project.save(&x).unwrap();
        Project::load(&x).unwrap().save(&y).unwrap();
        if snapshot(&x) != snapshot(&y) {
            failures.push(format!("{name}: save after load is not byte-stable"));
        }
    }
    Verdict::from_failures(
        format!("{runs} runs of 5 scripts compared on store, matrix CSV, documents, manifests and state files"),
        failures,
    )
}

/// Artifacts of a manifest that its successor neither keeps nor replaces
/// through a chain of `supersedes` entries.
pub fn monotonic_violations(manifests: &[String]) -> Vec<String> {
    let parsed: Vec<_> = manifests.iter().map(|m| parse_manifest(m)).collect();
    let mut out = Vec::new();
    for (i, pair) in parsed.windows(2).enumerate() {
        let (prev, next) = (&pair[0], &pair[1]);
        // walk back from every entry of the successor
        let by_id: BTreeMap<&str, Option<&str>> = parsed[..=i + 1]
            .iter()
            .flatten()
            .map(|e| (e.artifact_id.as_str(), e.supersedes.as_deref()))
            .collect();
        let mut covered: BTreeSet<&str> = BTreeSet::new();
        for e in next {
            let mut cur = Some(e.artifact_id.as_str());
            let mut hops = 0;
            while let Some(id) = cur {
                if !covered.insert(id) || hops > by_id.len() {
                    break;
                }
                cur = by_id.get(id).copied().flatten();
                hops += 1;
            }
        }
        for e in prev {
            if !covered.contains(e.artifact_id.as_str()) {
                out.push(format!("package {} drops {}", i + 2, e.artifact_id));
            }
        }
    }
    out
}

pub fn check_monotonicity() -> Verdict {
    let mut failures = Vec::new();
    let mut pairs = 0;
    let mut chains = 0;
    for (name, script) in scripts() {
        let (_d, report) = run(&script);
        pairs += report.manifests.len().saturating_sub(1);
        chains += report
            .manifests
            .iter()
            .flat_map(|m| parse_manifest(m))
            .filter(|e| e.supersedes.is_some())
            .count();
        for v in monotonic_violations(&report.manifests) {
            failures.push(format!("{name}: {v}"));
        }
        // the last package still accounts for everything ever shipped
        if let (Some(first), Some(last)) = (report.manifests.first(), report.manifests.last()) {
            let ends = [first.clone(), last.clone()];
            let all: String = report.manifests.concat();
            let reach = monotonic_violations(&[all, last.clone()]);
            for v in reach.into_iter().chain(monotonic_violations(&ends)) {
                failures.push(format!("{name} (first to last): {v}"));
            }
        }
        if report.manifests.len() < 2 && name.starts_with("mini-fms") {
            failures.push(format!("{name}: only {} packages", report.manifests.len()));
        }
    }
    if chains == 0 {
        failures.push("no supersedes entries were exercised".into());
    }
    Verdict::from_failures(
        format!("{pairs} consecutive package pairs checked, {chains} supersedes links followed"),
        failures,
    )
}
