use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::time::{Duration, Instant};

use certiflow_core::packager::{DataPackage, PackageKind};
use certiflow_core::scenario::{ScenarioScript, StepKind};
use certiflow_core::workflow::Stage;
use globset::{Glob, GlobSetBuilder};
use walkdir::WalkDir;

use crate::determinism::monotonic_violations;
use crate::support::{load, parse_manifest, run, sha256, Verdict};

const BUDGET: Duration = Duration::from_secs(5);

/// Pull requests that add or change a requirement tag block, read straight
/// off the script.
fn requirement_bearing_prs(script: &ScenarioScript) -> usize {
    let globs = script
        .header
        .config
        .iter()
        .find(|(k, _)| k == "requirement_globs")
        .map_or("**/*.h".to_string(), |(_, v)| v.clone());
    let mut set = GlobSetBuilder::new();
    for g in globs.split(',').map(str::trim).filter(|g| !g.is_empty()) {
        set.add(Glob::new(g).expect("glob"));
    }
    let set = set.build().expect("globset");
    let blocks = |text: &str| -> BTreeSet<String> {
        text.split("@req{")
            .skip(1)
            .map(|b| b.split("*/").next().unwrap_or(b).to_string())
            .collect()
    };

    let mut committed: BTreeMap<String, String> = BTreeMap::new();
    let mut tree = committed.clone();
    let mut count = 0;
    for step in &script.steps {
        match step.kind {
            StepKind::Seed => {
                tree.insert(
                    step.get("path").unwrap().into(),
                    step.get("content").unwrap().into(),
                );
            }
            StepKind::Delete => {
                tree.remove(step.get("path").unwrap());
            }
            StepKind::PullRequest => {
                let paths: BTreeSet<&String> = tree.keys().chain(committed.keys()).collect();
                let changed = paths
                    .into_iter()
                    .filter(|p| set.is_match(p.as_str()))
                    .any(|p| {
                        let now = tree.get(p).map(|t| blocks(t)).unwrap_or_default();
                        let before = committed.get(p).map(|t| blocks(t)).unwrap_or_default();
                        !now.is_empty() && now != before
                    });
                if changed {
                    count += 1;
                }
                committed = tree.clone();
            }
            _ => {}
        }
    }
    count
}

pub fn check() -> Verdict {
    let script = load("mini-fms.scn");
    let start = Instant::now();
    let (_dir, report) = run(&script);
    let elapsed = start.elapsed();
    let mut failures = Vec::new();
    let mut expect = |ok: bool, what: String| {
        if !ok {
            failures.push(what);
        }
    };

    let failed_checks: Vec<String> = report
        .outcomes
        .iter()
        .filter(|o| !o.passed)
        .map(|o| o.to_string())
        .collect();
    expect(
        failed_checks.is_empty(),
        format!("scenario expectations failed: {failed_checks:?}"),
    );
    expect(
        report.findings.as_ref().is_some_and(|f| f.is_empty()),
        format!("hardening findings: {:?}", report.findings),
    );
    expect(
        report.package_kind == Some(PackageKind::CertifiableRelease),
        format!("final package kind {:?}", report.package_kind),
    );
    expect(
        report.documents.contains_key("docs/generated/srd.md"),
        "no SRD on the docs branch".into(),
    );

    let design_docs = report
        .documents
        .keys()
        .filter(|p| p.starts_with("docs/generated/design-"))
        .count();
    let bearing = requirement_bearing_prs(&script);
    expect(
        design_docs == bearing && bearing > 0,
        format!("{design_docs} design artifacts for {bearing} requirement-bearing pull requests"),
    );

    let requirements = report.store_text.lines().count().saturating_sub(1);
    let mut csv = csv::Reader::from_reader(report.matrix_csv.as_bytes());
    let rows = csv.records().count();
    expect(
        rows == 10 && requirements >= 10,
        format!("matrix has {rows} rows"),
    );
    expect(
        report
            .documents
            .contains_key("docs/generated/traceability-matrix.csv"),
        "matrix CSV not published".into(),
    );

    // four packages, one per stage, each merging its predecessor
    let state = report.workspace.join(".certiflow/packages");
    let packages: Vec<DataPackage> = (1..=report.manifests.len())
        .map(|v| {
            DataPackage::parse(
                &fs::read_to_string(state.join(format!("package-{v:04}.txt"))).unwrap(),
            )
            .unwrap()
        })
        .collect();
    expect(packages.len() == 4, format!("{} packages", packages.len()));
    for (i, p) in packages.iter().enumerate() {
        let covered: Vec<Stage> = p.stage_coverage.iter().copied().collect();
        expect(
            covered == Stage::ALL[..=i.min(3)],
            format!("package {} covers {covered:?}", p.package_version),
        );
        expect(
            p.predecessor_version == (i > 0).then_some(i as u32),
            format!(
                "package {} predecessor {:?}",
                p.package_version, p.predecessor_version
            ),
        );
    }
    let mono = monotonic_violations(&report.manifests);
    expect(mono.is_empty(), format!("monotonicity: {mono:?}"));

    // every file in data-package/ hash-verifies against the manifest
    let folder = report.workspace.join("out/data-package");
    let last = report.manifests.last().cloned().unwrap_or_default();
    let entries = parse_manifest(&last);
    let shipped = fs::read_to_string(folder.join("manifest.txt")).unwrap_or_default();
    expect(
        shipped == last,
        "data-package/manifest.txt differs from the final manifest".into(),
    );
    expect(
        folder.join("sci-report.md").is_file(),
        "no SCI report".into(),
    );
    let mut verified = 0;
    for f in WalkDir::new(&folder)
        .into_iter()
        .filter_map(Result::ok)
        .filter(|e| e.file_type().is_file())
    {
        let rel = f
            .path()
            .strip_prefix(&folder)
            .unwrap()
            .to_string_lossy()
            .replace('\\', "/");
        if rel == "manifest.txt" || rel == "sci-report.md" {
            continue;
        }
        let (kind, repo_path) = if let Some(rest) = rel.strip_prefix("artifacts/") {
            let (k, p) = rest.split_once('/').unwrap();
            (Some(k.to_string()), p.to_string())
        } else if let Some(p) = rel
            .strip_prefix("docs/")
            .or_else(|| rel.strip_prefix("matrices/"))
        {
            (None, p.to_string())
        } else {
            expect(false, format!("unexpected file {rel}"));
            continue;
        };
        let digest = sha256(&fs::read(f.path()).unwrap());
        let hit = entries.iter().any(|e| {
            e.path == repo_path && kind.as_ref().is_none_or(|k| *k == e.kind) && e.hash == digest
        });
        expect(hit, format!("{rel} does not hash-verify"));
        verified += 1;
    }
    expect(verified > 0, "data package is empty".into());
    expect(
        elapsed < BUDGET,
        format!("took {:.2}s", elapsed.as_secs_f64()),
    );

    Verdict::from_failures(
        format!(
            "mini-fms in {:.2}s (budget 5s), {} checks, {design_docs} design artifacts, {rows} matrix rows, {} packages, {verified} files hash-verified, final {}",
            elapsed.as_secs_f64(),
            report.outcomes.len(),
            packages.len(),
            report.package_kind.map(|k| k.to_string()).unwrap_or_default()
        ),
        failures,
    )
}
