use std::collections::BTreeMap;

use certiflow_core::gateway::config::ProjectConfig;
use certiflow_core::gateway::event::{ChangedFile, PullRequestEvent};
use certiflow_core::gateway::pipeline::{handle_pull_request, IngestOptions, PipelineStep};
use certiflow_core::scenario::ScenarioScript;
use certiflow_core::trace::ChangeType;
use certiflow_core::workspace::{Project, Workspace};

use crate::support::{run, sha256, Verdict};

const BASE: &str = "\
[scenario]
name = atomicity
repo = demo
author = erin
start = 2025-05-05T08:00:00Z
release = 0.1.0
config.requirement_globs = src/*.c

[ticket]
id = T-1
pbis = PBI-1

[pbi]
id = PBI-1
title = Atomic
stage = SW_IMPLEMENTATION

[seed]
path = src/a.c
content <<END
/* @req{DEMO-LLR-1}
 * @kind{LLR}
 * @title{Add}
 * @text{add() shall return the sum.} */
/* @implements{DEMO-LLR-1} */
int add(int a, int b) { return a + b; }
END

[pull-request]
commit = c1
branch = feature/T-1
";

const A2: &str = "/* @req{DEMO-LLR-1}\n * @kind{LLR}\n * @title{Add}\n * @text{add() shall return a + b.} */\n\
                  /* @req{DEMO-LLR-2}\n * @kind{LLR}\n * @title{Sub}\n * @text{sub() shall return a - b.} */\n\
                  /* @implements{DEMO-LLR-1, DEMO-LLR-2} */\nint add(int a, int b) { return a + b; }\n";
const TEST: &str = "/* @verifies{DEMO-LLR-1} */\nvoid test_add(void) {}\n";

/// Everything a failed ingest must leave alone.
fn fingerprint(p: &Project) -> BTreeMap<&'static str, String> {
    BTreeMap::from([
        ("store digest", sha256(p.store.to_canonical().as_bytes())),
        ("artifact index", p.index.to_canonical()),
        ("links", p.links.to_canonical()),
        ("anomalies", p.anomalies.to_canonical()),
        ("workflow", p.board.log_text()),
        ("ingest log", p.ingest_log_text()),
    ])
}

fn diff(
    a: &BTreeMap<&'static str, String>,
    b: &BTreeMap<&'static str, String>,
) -> Vec<&'static str> {
    a.keys().copied().filter(|k| a[k] != b[k]).collect()
}

fn second_commit(ws: &Workspace) -> PullRequestEvent {
    let mut tree = ws.vcs.tree("demo", "c1").unwrap();
    tree.insert("src/a.c".into(), A2.as_bytes().to_vec());
    tree.insert("tests/unit/test_a.c".into(), TEST.as_bytes().to_vec());
    ws.vcs.write_commit("demo", "c2", &tree).unwrap();
    PullRequestEvent {
        repo: "demo".into(),
        source_branch: "feature/T-1".into(),
        target_branch: "main".into(),
        commit_id: "c2".into(),
        author: "erin".into(),
        timestamp: "2025-05-05T09:00:00Z".parse().unwrap(),
        changed_files: vec![
            ChangedFile {
                path: "src/a.c".into(),
                change_type: ChangeType::Modified,
                blob_hash: None,
            },
            ChangedFile {
                path: "tests/unit/test_a.c".into(),
                change_type: ChangeType::Added,
                blob_hash: None,
            },
        ],
        linked_ticket_ids: vec![],
        title: None,
        delivery_id: Some("atomic-2".into()),
    }
}

pub fn check() -> Verdict {
    let script = ScenarioScript::parse(BASE).expect("base script");
    let mut failures = Vec::new();
    let mut held = 0;
    for step in PipelineStep::ALL {
        let (_dir, report) = run(&script);
        let config = ProjectConfig::load(&report.workspace.join("certiflow.conf")).unwrap();
        let state = config.state_dir.clone();
        let mut ws = Workspace::open(config).unwrap();
        let event = second_commit(&ws);
        let before = fingerprint(&ws.project);
        let on_disk = fingerprint(&Project::load(&state).unwrap());

        match handle_pull_request(
            &mut ws,
            &event,
            &IngestOptions {
                fail_at: Some(step),
            },
        ) {
            Ok(_) => failures.push(format!(
                "{}: injected failure did not surface",
                step.as_str()
            )),
            Err(e) if e.step != step => failures.push(format!(
                "{}: failed at {} instead",
                step.as_str(),
                e.step.as_str()
            )),
            Err(_) => {
                let changed = diff(&before, &fingerprint(&ws.project));
                let disk = diff(&on_disk, &fingerprint(&Project::load(&state).unwrap()));
                if changed.is_empty() && disk.is_empty() {
                    held += 1;
                } else {
                    failures.push(format!(
                        "{}: changed {changed:?} in memory, {disk:?} on disk",
                        step.as_str()
                    ));
                }
            }
        }

        // the same event then goes through cleanly
        match handle_pull_request(&mut ws, &event, &IngestOptions::default()) {
            Ok(r) if !r.duplicate && !diff(&before, &fingerprint(&ws.project)).is_empty() => {}
            Ok(r) => failures.push(format!(
                "{}: retry was a no-op (duplicate {})",
                step.as_str(),
                r.duplicate
            )),
            Err(e) => failures.push(format!("{}: retry failed: {e}", step.as_str())),
        }
    }
    Verdict::from_failures(
        format!(
            "{held} of {} pipeline steps left store digest, index and links unchanged",
            PipelineStep::ALL.len()
        ),
        failures,
    )
}
