use certiflow_core::canonical::{Provenance, Timestamp};
use certiflow_core::req_store::StoreId;
use certiflow_core::tag_parser::RequirementKind;
use certiflow_core::trace::ArtifactKind;
use certiflow_core::workflow::{
    advance, required_tasks, stage_complete, ChecklistVerdict, EvidenceInfo, EvidenceResolver, Pbi,
    Stage, TaskId, TaskState, WorkflowError,
};

use crate::support::Verdict;

/// Task order per stage, as the process describes it.
const ORDER: [(Stage, &[&str]); 4] = [
    (
        Stage::Specification,
        &[
            "DefinePBIs",
            "FunctionalHighLevelAnalysis",
            "SystemSpecification",
            "SystemSpecificationReview",
            "SystemDesign",
            "SystemDesignReview",
            "GenerateIncrementalPackage",
            "ReviewIncrementalPackage",
        ],
    ),
    (
        Stage::SwImplementation,
        &[
            "DefinePBIs",
            "SoftwareSpecificationHLR",
            "SoftwareSpecificationReview",
            "SoftwareDesignLLR",
            "SoftwareDesignPullRequest",
            "SoftwareDesignReview",
            "ImplementSoftware",
            "DeveloperTesting",
            "SoftwareImplementationPullRequest",
            "CodeReview",
            "GenerateIncrementalPackage",
            "ReviewIncrementalPackage",
        ],
    ),
    (
        Stage::SwTesting,
        &[
            "DefinePBIs",
            "UnitTestSpecification",
            "UnitTestReview",
            "ImplementUnitTests",
            "DeveloperTesting",
            "UnitImplementationPullRequest",
            "UnitTestExecution",
            "UnitTestReport",
            "IntegrationTestSpecification",
            "IntegrationTestReview",
            "ImplementIntegrationTests",
            "DeveloperTesting2",
            "IntegrationTestPullRequest",
            "IntegrationTestExecution",
            "IntegrationTestReport",
            "GenerateIncrementalPackage",
            "ReviewIncrementalPackage",
        ],
    ),
    (
        Stage::HsiSystemTesting,
        &[
            "DefinePBIs",
            "HSITestSpecification",
            "HSITestReview",
            "HSITestImplementation",
            "DeveloperTesting",
            "HSITestPullRequest",
            "HSITestExecution",
            "HSITestReport",
            "SystemTestSpecification",
            "SystemTestReview",
            "SystemTestImplementation",
            "DeveloperTesting2",
            "SystemTestPullRequest",
            "SystemTestExecution",
            "SystemTestReport",
            "PackageCertifiableRelease",
            "ReviewCertifiableRelease",
            "ValidateSCICertifiableRelease",
        ],
    ),
];

/// Anything named `checklist-*` is an acceptable checklist, anything else a
/// plain source file.
struct Evidence;

impl EvidenceResolver for Evidence {
    fn resolve(&self, id: &str) -> Option<EvidenceInfo> {
        Some(if id.starts_with("checklist-") {
            EvidenceInfo {
                kind: ArtifactKind::ReviewChecklist,
                checklist: Some(ChecklistVerdict::Acceptable),
            }
        } else {
            EvidenceInfo {
                kind: ArtifactKind::Source,
                checklist: None,
            }
        })
    }
}

fn prov() -> Provenance {
    let at: Timestamp = "2025-01-01T00:00:00Z".parse().unwrap();
    Provenance::new("auditor", at).unwrap()
}

fn evidence_for(task: TaskId) -> Vec<String> {
    if task.is_review() {
        vec![format!("checklist-{task}")]
    } else {
        vec![format!("SOURCE:src/{task}.c@c1")]
    }
}

/// A PBI where exactly the tasks before `done_up_to` are DONE.
fn pbi_with_prefix_done(stage: Stage, done_up_to: usize) -> Pbi {
    let req = StoreId::new(RequirementKind::Hlr, 1);
    let mut pbi = Pbi::new("PBI-1", "ordering", stage, "1.0", "S1", vec![req], &prov()).unwrap();
    for (i, t) in pbi.tasks.iter_mut().enumerate() {
        if i < done_up_to {
            t.state = TaskState::Done;
            t.evidence = evidence_for(t.task_id);
        } else {
            t.state = TaskState::Pending;
            t.evidence.clear();
            t.completed_by = None;
            t.completed_at = None;
        }
    }
    pbi
}

pub fn check() -> Verdict {
    let mut failures = Vec::new();
    let mut illegal = 0;
    let mut legal_steps = 0;
    for (stage, names) in ORDER {
        let tasks = required_tasks(stage);
        let actual: Vec<&str> = tasks.iter().map(|t| t.as_str()).collect();
        if actual != names {
            failures.push(format!("{stage}: task list {actual:?}"));
            continue;
        }
        let n = tasks.len();
        let mut pairs = 0;
        for i in 0..n {
            let pbi = pbi_with_prefix_done(stage, i);
            for j in i + 1..n {
                pairs += 1;
                let want = WorkflowError::OutOfOrder {
                    task: tasks[j],
                    blocking: tasks[i],
                };
                for to in [TaskState::InProgress, TaskState::Done] {
                    let got = advance(
                        &pbi,
                        tasks[j],
                        to,
                        &evidence_for(tasks[j]),
                        &prov(),
                        &Evidence,
                    );
                    if got.as_ref().err() != Some(&want) {
                        failures.push(format!(
                            "{stage}: {} to {to} before {}: {got:?}",
                            tasks[j], tasks[i]
                        ));
                    }
                }
            }
        }
        if pairs != n * (n - 1) / 2 {
            failures.push(format!("{stage}: {pairs} pairs for {n} tasks"));
        }
        illegal += pairs;

        // the documented order goes through, from a fresh PBI
        let mut pbi = pbi_with_prefix_done(stage, 1);
        for &t in &tasks[1..] {
            for to in [TaskState::InProgress, TaskState::Done] {
                match advance(&pbi, t, to, &evidence_for(t), &prov(), &Evidence) {
                    Ok(p) => {
                        pbi = p;
                        legal_steps += 1;
                    }
                    Err(e) => {
                        failures.push(format!("{stage}: legal step {t} to {to} refused: {e}"))
                    }
                }
            }
        }
        if !stage_complete(&pbi) {
            failures.push(format!("{stage}: legal order does not complete the stage"));
        }
    }
    Verdict::from_failures(
        format!("{illegal} illegal pairs refused as OutOfOrder (both transitions), {legal_steps} legal transitions accepted"),
        failures,
    )
}
