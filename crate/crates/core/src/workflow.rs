//! Ordered task state machines for the four development stages.
//!
//! Each PBI carries the mandated task list of its stage. A task may start
//! only once every earlier task is done; `DefinePBIs` is done at creation.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::canonical::{ts, ts_opt, Provenance, Timestamp};
use crate::req_store::StoreId;
use crate::trace::ArtifactKind;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Stage {
    Specification,
    SwImplementation,
    SwTesting,
    HsiSystemTesting,
}

impl Stage {
    pub const ALL: [Stage; 4] = [
        Stage::Specification,
        Stage::SwImplementation,
        Stage::SwTesting,
        Stage::HsiSystemTesting,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Stage::Specification => "SPECIFICATION",
            Stage::SwImplementation => "SW_IMPLEMENTATION",
            Stage::SwTesting => "SW_TESTING",
            Stage::HsiSystemTesting => "HSI_SYSTEM_TESTING",
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Stage {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Stage::ALL
            .into_iter()
            .find(|st| st.as_str() == s)
            .ok_or_else(|| format!("unknown stage `{s}`"))
    }
}

macro_rules! task_ids {
    ($($name:ident),* $(,)?) => {
        #[allow(clippy::upper_case_acronyms)]
        #[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
        pub enum TaskId { $($name),* }

        impl TaskId {
            pub const ALL: &'static [TaskId] = &[$(TaskId::$name),*];

            pub fn as_str(self) -> &'static str {
                match self { $(TaskId::$name => stringify!($name)),* }
            }
        }
    };
}

task_ids!(
    DefinePBIs,
    FunctionalHighLevelAnalysis,
    SystemSpecification,
    SystemSpecificationReview,
    SystemDesign,
    SystemDesignReview,
    GenerateIncrementalPackage,
    ReviewIncrementalPackage,
    SoftwareSpecificationHLR,
    SoftwareSpecificationReview,
    SoftwareDesignLLR,
    SoftwareDesignPullRequest,
    SoftwareDesignReview,
    ImplementSoftware,
    DeveloperTesting,
    SoftwareImplementationPullRequest,
    CodeReview,
    UnitTestSpecification,
    UnitTestReview,
    ImplementUnitTests,
    UnitImplementationPullRequest,
    UnitTestExecution,
    UnitTestReport,
    IntegrationTestSpecification,
    IntegrationTestReview,
    ImplementIntegrationTests,
    DeveloperTesting2,
    IntegrationTestPullRequest,
    IntegrationTestExecution,
    IntegrationTestReport,
    HSITestSpecification,
    HSITestReview,
    HSITestImplementation,
    HSITestPullRequest,
    HSITestExecution,
    HSITestReport,
    SystemTestSpecification,
    SystemTestReview,
    SystemTestImplementation,
    SystemTestPullRequest,
    SystemTestExecution,
    SystemTestReport,
    PackageCertifiableRelease,
    ReviewCertifiableRelease,
    ValidateSCICertifiableRelease,
);

impl TaskId {
    /// Tasks whose completion must be backed by an acceptable checklist.
    pub fn is_review(self) -> bool {
        use TaskId::*;
        matches!(
            self,
            SystemSpecificationReview
                | SystemDesignReview
                | SoftwareSpecificationReview
                | SoftwareDesignReview
                | CodeReview
                | UnitTestReview
                | IntegrationTestReview
                | HSITestReview
                | SystemTestReview
                | ReviewIncrementalPackage
                | ReviewCertifiableRelease
        )
    }

    /// The task that produces the stage's data package.
    pub fn is_packaging(self) -> bool {
        matches!(
            self,
            TaskId::GenerateIncrementalPackage | TaskId::PackageCertifiableRelease
        )
    }
}

impl fmt::Display for TaskId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for TaskId {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        TaskId::ALL
            .iter()
            .copied()
            .find(|t| t.as_str() == s)
            .ok_or_else(|| format!("unknown task `{s}`"))
    }
}

pub fn required_tasks(stage: Stage) -> &'static [TaskId] {
    use TaskId::*;
    match stage {
        Stage::Specification => &[
            DefinePBIs,
            FunctionalHighLevelAnalysis,
            SystemSpecification,
            SystemSpecificationReview,
            SystemDesign,
            SystemDesignReview,
            GenerateIncrementalPackage,
            ReviewIncrementalPackage,
        ],
        Stage::SwImplementation => &[
            DefinePBIs,
            SoftwareSpecificationHLR,
            SoftwareSpecificationReview,
            SoftwareDesignLLR,
            SoftwareDesignPullRequest,
            SoftwareDesignReview,
            ImplementSoftware,
            DeveloperTesting,
            SoftwareImplementationPullRequest,
            CodeReview,
            GenerateIncrementalPackage,
            ReviewIncrementalPackage,
        ],
        Stage::SwTesting => &[
            DefinePBIs,
            UnitTestSpecification,
            UnitTestReview,
            ImplementUnitTests,
            DeveloperTesting,
            UnitImplementationPullRequest,
            UnitTestExecution,
            UnitTestReport,
            IntegrationTestSpecification,
            IntegrationTestReview,
            ImplementIntegrationTests,
            DeveloperTesting2,
            IntegrationTestPullRequest,
            IntegrationTestExecution,
            IntegrationTestReport,
            GenerateIncrementalPackage,
            ReviewIncrementalPackage,
        ],
        Stage::HsiSystemTesting => &[
            DefinePBIs,
            HSITestSpecification,
            HSITestReview,
            HSITestImplementation,
            DeveloperTesting,
            HSITestPullRequest,
            HSITestExecution,
            HSITestReport,
            SystemTestSpecification,
            SystemTestReview,
            SystemTestImplementation,
            DeveloperTesting2,
            SystemTestPullRequest,
            SystemTestExecution,
            SystemTestReport,
            PackageCertifiableRelease,
            ReviewCertifiableRelease,
            ValidateSCICertifiableRelease,
        ],
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum TaskState {
    Pending,
    InProgress,
    Done,
}

impl TaskState {
    pub fn as_str(self) -> &'static str {
        match self {
            TaskState::Pending => "PENDING",
            TaskState::InProgress => "IN_PROGRESS",
            TaskState::Done => "DONE",
        }
    }

    fn next(self) -> Option<TaskState> {
        match self {
            TaskState::Pending => Some(TaskState::InProgress),
            TaskState::InProgress => Some(TaskState::Done),
            TaskState::Done => None,
        }
    }
}

impl fmt::Display for TaskState {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for TaskState {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "PENDING" => Ok(TaskState::Pending),
            "IN_PROGRESS" => Ok(TaskState::InProgress),
            "DONE" => Ok(TaskState::Done),
            other => Err(format!("unknown task state `{other}`")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct WorkflowTaskState {
    pub task_id: TaskId,
    pub state: TaskState,
    pub evidence: Vec<String>,
    pub completed_by: Option<String>,
    #[serde(with = "ts_opt")]
    pub completed_at: Option<Timestamp>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Pbi {
    pub pbi_id: String,
    pub title: String,
    pub stage: Stage,
    pub release_version: String,
    pub sprint: String,
    pub tasks: Vec<WorkflowTaskState>,
    pub linked_requirements: Vec<StoreId>,
}

/// Evidence reference recorded for the auto-completed `DefinePBIs` task.
pub fn creation_evidence(pbi_id: &str) -> String {
    format!("PBI:{pbi_id}")
}

fn valid_pbi_id(id: &str) -> bool {
    let mut chars = id.chars();
    chars.next().is_some_and(|c| c.is_ascii_alphanumeric())
        && chars.all(|c| c.is_ascii_alphanumeric() || matches!(c, '-' | '_' | '.'))
}

impl Pbi {
    pub fn new(
        pbi_id: &str,
        title: &str,
        stage: Stage,
        release_version: &str,
        sprint: &str,
        linked_requirements: Vec<StoreId>,
        prov: &Provenance,
    ) -> Result<Pbi, WorkflowError> {
        if !valid_pbi_id(pbi_id) {
            return Err(WorkflowError::InvalidPbi(format!("bad pbi id `{pbi_id}`")));
        }
        if prov.author.trim().is_empty() {
            return Err(WorkflowError::InvalidPbi("missing author identity".into()));
        }
        let tasks = required_tasks(stage)
            .iter()
            .map(|&task_id| {
                if task_id == TaskId::DefinePBIs {
                    WorkflowTaskState {
                        task_id,
                        state: TaskState::Done,
                        evidence: vec![creation_evidence(pbi_id)],
                        completed_by: Some(prov.author.clone()),
                        completed_at: Some(prov.at),
                    }
                } else {
                    WorkflowTaskState {
                        task_id,
                        state: TaskState::Pending,
                        evidence: Vec::new(),
                        completed_by: None,
                        completed_at: None,
                    }
                }
            })
            .collect();
        let mut linked_requirements = linked_requirements;
        linked_requirements.sort();
        linked_requirements.dedup();
        Ok(Pbi {
            pbi_id: pbi_id.to_string(),
            title: title.to_string(),
            stage,
            release_version: release_version.to_string(),
            sprint: sprint.to_string(),
            tasks,
            linked_requirements,
        })
    }

    pub fn task(&self, task_id: TaskId) -> Option<&WorkflowTaskState> {
        self.tasks.iter().find(|t| t.task_id == task_id)
    }

    pub fn first_review_task(&self) -> Option<TaskId> {
        self.tasks.iter().map(|t| t.task_id).find(|t| t.is_review())
    }

    pub fn done_tasks(&self) -> impl Iterator<Item = &WorkflowTaskState> {
        self.tasks.iter().filter(|t| t.state == TaskState::Done)
    }
}

/// True iff every task is DONE.
pub fn stage_complete(pbi: &Pbi) -> bool {
    pbi.tasks.iter().all(|t| t.state == TaskState::Done)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ChecklistVerdict {
    Incomplete,
    Failed,
    Acceptable,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EvidenceInfo {
    pub kind: ArtifactKind,
    /// Present when the artifact is a recorded checklist.
    pub checklist: Option<ChecklistVerdict>,
}

/// Resolves evidence references against the artifact index.
pub trait EvidenceResolver {
    fn resolve(&self, artifact_id: &str) -> Option<EvidenceInfo>;
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum WorkflowError {
    #[error("task {task} is not part of PBI {pbi}")]
    UnknownTask { pbi: String, task: TaskId },
    #[error("task {task} cannot move before {blocking} is DONE")]
    OutOfOrder { task: TaskId, blocking: TaskId },
    #[error("task {0} needs evidence to be DONE")]
    MissingEvidence(TaskId),
    #[error("task {task} cannot move from {from} to {to}")]
    IllegalTransition {
        task: TaskId,
        from: TaskState,
        to: TaskState,
    },
    #[error("task {task}: evidence `{artifact}` does not resolve")]
    UnresolvedEvidence { task: TaskId, artifact: String },
    #[error("task {task}: evidence `{artifact}` is not acceptable ({reason})")]
    UnacceptableEvidence {
        task: TaskId,
        artifact: String,
        reason: String,
    },
    #[error("review task {0} needs an acceptable review checklist")]
    MissingReviewChecklist(TaskId),
    #[error("task {0} needs linked requirements")]
    NoLinkedRequirements(TaskId),
    #[error("invalid PBI: {0}")]
    InvalidPbi(String),
    #[error("unknown PBI `{0}`")]
    UnknownPbi(String),
    #[error("PBI `{0}` already exists")]
    DuplicatePbi(String),
    #[error("workflow log line {line}: {reason}")]
    Log { line: usize, reason: String },
}

/// Pure: returns the updated PBI, leaving the input untouched.
pub fn advance(
    pbi: &Pbi,
    task: TaskId,
    new_state: TaskState,
    evidence: &[String],
    prov: &Provenance,
    resolver: &dyn EvidenceResolver,
) -> Result<Pbi, WorkflowError> {
    let pos = pbi
        .tasks
        .iter()
        .position(|t| t.task_id == task)
        .ok_or_else(|| WorkflowError::UnknownTask {
            pbi: pbi.pbi_id.clone(),
            task,
        })?;
    if let Some(blocking) = pbi.tasks[..pos].iter().find(|t| t.state != TaskState::Done) {
        return Err(WorkflowError::OutOfOrder {
            task,
            blocking: blocking.task_id,
        });
    }
    let current = pbi.tasks[pos].state;
    if current.next() != Some(new_state) {
        return Err(WorkflowError::IllegalTransition {
            task,
            from: current,
            to: new_state,
        });
    }
    if prov.author.trim().is_empty() {
        return Err(WorkflowError::InvalidPbi("missing author identity".into()));
    }

    let mut next = pbi.clone();
    let slot = &mut next.tasks[pos];
    slot.state = new_state;
    if new_state == TaskState::Done {
        if evidence.is_empty() {
            return Err(WorkflowError::MissingEvidence(task));
        }
        let mut acceptable_checklist = false;
        for artifact in evidence {
            let info =
                resolver
                    .resolve(artifact)
                    .ok_or_else(|| WorkflowError::UnresolvedEvidence {
                        task,
                        artifact: artifact.clone(),
                    })?;
            match info.checklist {
                Some(ChecklistVerdict::Acceptable) => acceptable_checklist = true,
                Some(verdict) if task.is_review() => {
                    let reason = match verdict {
                        ChecklistVerdict::Incomplete => "checklist has unanswered items",
                        _ => "checklist has failed items",
                    };
                    return Err(WorkflowError::UnacceptableEvidence {
                        task,
                        artifact: artifact.clone(),
                        reason: reason.into(),
                    });
                }
                _ => {}
            }
        }
        if task.is_review() && !acceptable_checklist {
            return Err(WorkflowError::MissingReviewChecklist(task));
        }
        if pbi.first_review_task() == Some(task) && pbi.linked_requirements.is_empty() {
            return Err(WorkflowError::NoLinkedRequirements(task));
        }
        let mut refs: Vec<String> = Vec::with_capacity(evidence.len());
        for e in evidence {
            if !refs.contains(e) {
                refs.push(e.clone());
            }
        }
        slot.evidence = refs;
        slot.completed_by = Some(prov.author.clone());
        slot.completed_at = Some(prov.at);
    }
    Ok(next)
}

/// One line of the append-only workflow log.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "lowercase")]
pub enum WorkflowEvent {
    Create {
        pbi_id: String,
        title: String,
        stage: Stage,
        release_version: String,
        sprint: String,
        linked_requirements: Vec<StoreId>,
        author: String,
        #[serde(with = "ts")]
        at: Timestamp,
    },
    Advance {
        pbi_id: String,
        task_id: TaskId,
        new_state: TaskState,
        evidence: Vec<String>,
        author: String,
        #[serde(with = "ts")]
        at: Timestamp,
    },
    Link {
        pbi_id: String,
        requirements: Vec<StoreId>,
        author: String,
        #[serde(with = "ts")]
        at: Timestamp,
    },
}

impl WorkflowEvent {
    pub fn pbi_id(&self) -> &str {
        match self {
            WorkflowEvent::Create { pbi_id, .. }
            | WorkflowEvent::Advance { pbi_id, .. }
            | WorkflowEvent::Link { pbi_id, .. } => pbi_id,
        }
    }
}

/// All PBIs of a project plus the log that produced them.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct WorkflowBoard {
    pbis: BTreeMap<String, Pbi>,
    log: Vec<WorkflowEvent>,
}

impl WorkflowBoard {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn get(&self, pbi_id: &str) -> Option<&Pbi> {
        self.pbis.get(pbi_id)
    }

    pub fn contains(&self, pbi_id: &str) -> bool {
        self.pbis.contains_key(pbi_id)
    }

    pub fn pbis(&self) -> impl Iterator<Item = &Pbi> {
        self.pbis.values()
    }

    pub fn log(&self) -> &[WorkflowEvent] {
        &self.log
    }

    /// Validates and applies one event; the log grows only on success.
    pub fn apply(
        &mut self,
        event: WorkflowEvent,
        resolver: &dyn EvidenceResolver,
    ) -> Result<&Pbi, WorkflowError> {
        let updated = match &event {
            WorkflowEvent::Create {
                pbi_id,
                title,
                stage,
                release_version,
                sprint,
                linked_requirements,
                author,
                at,
            } => {
                if self.pbis.contains_key(pbi_id) {
                    return Err(WorkflowError::DuplicatePbi(pbi_id.clone()));
                }
                let prov = Provenance {
                    author: author.clone(),
                    at: *at,
                };
                Pbi::new(
                    pbi_id,
                    title,
                    *stage,
                    release_version,
                    sprint,
                    linked_requirements.clone(),
                    &prov,
                )?
            }
            WorkflowEvent::Advance {
                pbi_id,
                task_id,
                new_state,
                evidence,
                author,
                at,
            } => {
                let pbi = self
                    .pbis
                    .get(pbi_id)
                    .ok_or_else(|| WorkflowError::UnknownPbi(pbi_id.clone()))?;
                let prov = Provenance {
                    author: author.clone(),
                    at: *at,
                };
                advance(pbi, *task_id, *new_state, evidence, &prov, resolver)?
            }
            WorkflowEvent::Link {
                pbi_id,
                requirements,
                ..
            } => {
                let mut pbi = self
                    .pbis
                    .get(pbi_id)
                    .ok_or_else(|| WorkflowError::UnknownPbi(pbi_id.clone()))?
                    .clone();
                pbi.linked_requirements.extend(requirements.iter().copied());
                pbi.linked_requirements.sort();
                pbi.linked_requirements.dedup();
                pbi
            }
        };
        let id = updated.pbi_id.clone();
        self.pbis.insert(id.clone(), updated);
        self.log.push(event);
        Ok(&self.pbis[&id])
    }

    pub fn replay(
        events: impl IntoIterator<Item = WorkflowEvent>,
        resolver: &dyn EvidenceResolver,
    ) -> Result<Self, WorkflowError> {
        let mut board = WorkflowBoard::new();
        for event in events {
            board.apply(event, resolver)?;
        }
        Ok(board)
    }

    pub fn log_text(&self) -> String {
        let mut out = String::new();
        for e in &self.log {
            out.push_str(&serde_json::to_string(e).expect("event serializes"));
            out.push('\n');
        }
        out
    }

    pub fn parse_log(text: &str) -> Result<Vec<WorkflowEvent>, WorkflowError> {
        text.lines()
            .enumerate()
            .filter(|(_, l)| !l.trim().is_empty())
            .map(|(i, l)| {
                serde_json::from_str(l).map_err(|e| WorkflowError::Log {
                    line: i + 1,
                    reason: e.to_string(),
                })
            })
            .collect()
    }
}
