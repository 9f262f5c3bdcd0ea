use std::path::{Path, PathBuf};

use certiflow_core::scenario::{run_scenario, ScenarioReport, ScenarioScript};
use sha2::{Digest, Sha256};
use tempfile::TempDir;

pub struct Verdict {
    pub passed: bool,
    pub detail: String,
    pub failures: Vec<String>,
}

impl Verdict {
    pub fn fail(detail: String) -> Self {
        Verdict {
            passed: false,
            detail,
            failures: Vec::new(),
        }
    }

    /// Passes iff `failures` is empty; only the first few are listed.
    pub fn from_failures(detail: String, mut failures: Vec<String>) -> Self {
        let total = failures.len();
        failures.truncate(10);
        if total > failures.len() {
            failures.push(format!("... and {} more", total - failures.len()));
        }
        Verdict {
            passed: total == 0,
            detail,
            failures,
        }
    }
}

pub fn scenario_file(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("../../scenarios")
        .join(name)
}

/// Runs a script in a fresh directory; the directory lives as long as the
/// returned guard.
pub fn run(script: &ScenarioScript) -> (TempDir, ScenarioReport) {
    let dir = tempfile::tempdir().expect("temp dir");
    let report = run_scenario(script, &dir.path().join("ws"))
        .unwrap_or_else(|e| panic!("scenario failed: {e}"));
    (dir, report)
}

pub fn load(name: &str) -> ScenarioScript {
    ScenarioScript::load(&scenario_file(name)).unwrap_or_else(|e| panic!("{name}: {e}"))
}

pub fn sha256(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// A manifest line split into its seven fields.
#[derive(Debug, Clone)]
pub struct Entry {
    pub artifact_id: String,
    pub path: String,
    pub kind: String,
    pub hash: String,
    pub supersedes: Option<String>,
}

pub fn parse_manifest(text: &str) -> Vec<Entry> {
    text.lines()
        .map(|l| {
            let f: Vec<&str> = l.split('\t').collect();
            assert_eq!(f.len(), 7, "manifest line `{l}`");
            Entry {
                artifact_id: f[0].into(),
                path: f[1].into(),
                kind: f[2].into(),
                hash: f[3].into(),
                supersedes: (f[6] != "-").then(|| f[6].to_string()),
            }
        })
        .collect()
}
