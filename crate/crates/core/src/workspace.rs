//! Project state, its on-disk layout, the single-writer lock and the
//! [`Workspace`] facade used by the CLI, the service and the scenario runner.
//!
//! State directory layout:
//!
//! ```text
//! store.txt        requirement store
//! artifacts.txt    artifact index event log
//! links.txt        trace links
//! workflow.log     PBI event log
//! anomalies.txt    anomaly log
//! checklists.txt   parsed review checklists by artifact id
//! packages/        one file per data package
//! ingest.log       processed pull-request events
//! lock             single-writer lock file
//! ```

use std::collections::{BTreeMap, BTreeSet};
use std::fs::{self, File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::canonical::{format_ts, ts, Provenance, Timestamp};
use crate::docgen::{
    self, generate_checklist, load_template, Checklist, ChecklistCatalog, DocError,
    DocumentTemplate, ItemResult, Meta, RenderedDocument, ReviewKind,
};
use crate::gateway::adapters::{AdapterError, LocalVcs, LocalWmt, VcsAdapter};
use crate::gateway::config::{ConfigError, ProjectConfig};
use crate::packager::{
    self, assemble_incremental, generate_sci, promote, validate_hardening, verify_data_package,
    DataPackage, HardeningFinding, PackageError, SciInputs, SciReport,
};
use crate::req_store::{RequirementStatus, RequirementStore, StoreError, StoreId};
use crate::tag_parser::RequirementDraft;
use crate::trace::{
    build_matrix, completeness_check, render_matrix_csv, Anomaly, AnomalyLog, ArtifactIndex,
    ArtifactKind, ArtifactRecord, EntityRef, Finding, LinkKind, LinkSet, TraceError, TraceLink,
    TraceabilityMatrix,
};
use crate::workflow::{
    ChecklistVerdict, EvidenceInfo, EvidenceResolver, Pbi, Stage, TaskId, TaskState, WorkflowBoard,
    WorkflowError, WorkflowEvent,
};

/// Writes `bytes` to a sibling temp file, then renames it over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> std::io::Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    let name = path.file_name().and_then(|n| n.to_str()).unwrap_or("file");
    let tmp = path.with_file_name(format!(".{name}.tmp-{}", std::process::id()));
    {
        let mut f = File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)
}

pub const CHECKLISTS_HEADER: &str = "certiflow-checklists v1";
pub const SRD_PATH: &str = "docs/generated/srd.md";
pub const MATRIX_PATH: &str = "docs/generated/traceability-matrix.csv";

/// Public operations of the toolkit, as recorded by [`Project::ops_invoked`].
pub const PUBLIC_OPS: [&str; 26] = [
    "scan_source",
    "diff_requirements",
    "import_requirements",
    "set_status",
    "query",
    "required_tasks",
    "advance",
    "stage_complete",
    "register_artifact",
    "add_link",
    "detect_anomalies",
    "build_matrix",
    "completeness_check",
    "render_matrix_csv",
    "load_template",
    "render_document",
    "generate_srd",
    "generate_design_artifact",
    "generate_checklist",
    "assemble_incremental",
    "generate_sci",
    "validate_hardening",
    "handle_pull_request",
    "fetch_file",
    "stage_commit",
    "resolve_tickets",
];

#[derive(Debug, Error)]
pub enum WorkspaceError {
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error(transparent)]
    Trace(#[from] TraceError),
    #[error(transparent)]
    Workflow(#[from] WorkflowError),
    #[error(transparent)]
    Doc(#[from] DocError),
    #[error(transparent)]
    Package(#[from] PackageError),
    #[error(transparent)]
    Adapter(#[from] AdapterError),
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Ingest(#[from] crate::gateway::pipeline::IngestError),
    #[error("{path}: {reason}")]
    State { path: String, reason: String },
    #[error("{0}")]
    Invalid(String),
}

fn state_err(path: &Path, reason: impl ToString) -> WorkspaceError {
    WorkspaceError::State {
        path: path.display().to_string(),
        reason: reason.to_string(),
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct IngestLogEntry {
    pub event_id: String,
    pub repo: String,
    pub commit_id: String,
    pub author: String,
    #[serde(with = "ts")]
    pub at: Timestamp,
    pub pbi_context: Vec<String>,
    pub created: usize,
    pub updated: usize,
    pub anomalies: usize,
    pub design_artifact: Option<String>,
}

/// Resolves evidence references against the index and recorded checklists.
pub struct EvidenceView<'a> {
    pub index: &'a ArtifactIndex,
    pub checklists: &'a BTreeMap<String, Checklist>,
}

pub fn checklist_verdict(c: &Checklist) -> ChecklistVerdict {
    if !c.is_complete() {
        ChecklistVerdict::Incomplete
    } else if !c.is_acceptable() {
        ChecklistVerdict::Failed
    } else {
        ChecklistVerdict::Acceptable
    }
}

impl EvidenceResolver for EvidenceView<'_> {
    fn resolve(&self, artifact_id: &str) -> Option<EvidenceInfo> {
        let r = self.index.get(artifact_id)?;
        Some(EvidenceInfo {
            kind: r.kind,
            checklist: self.checklists.get(artifact_id).map(checklist_verdict),
        })
    }
}

/// All mutable state of one certification project.
#[derive(Debug, Clone, Default)]
pub struct Project {
    pub store: RequirementStore,
    pub index: ArtifactIndex,
    pub links: LinkSet,
    pub board: WorkflowBoard,
    pub anomalies: AnomalyLog,
    pub checklists: BTreeMap<String, Checklist>,
    pub packages: Vec<DataPackage>,
    pub ingest_log: Vec<IngestLogEntry>,
    ops: BTreeSet<&'static str>,
}

impl Project {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn note(&mut self, op: &'static str) {
        self.ops.insert(op);
    }

    pub fn ops_invoked(&self) -> &BTreeSet<&'static str> {
        &self.ops
    }

    pub fn evidence(&self) -> EvidenceView<'_> {
        EvidenceView {
            index: &self.index,
            checklists: &self.checklists,
        }
    }

    pub fn processed(&self, event_id: &str) -> bool {
        self.ingest_log.iter().any(|e| e.event_id == event_id)
    }

    pub fn import(
        &mut self,
        drafts: &[RequirementDraft],
        prov: &Provenance,
    ) -> Result<crate::req_store::ImportOutcome, StoreError> {
        self.note("import_requirements");
        self.store.import_requirements(drafts, prov)
    }

    pub fn set_status(
        &mut self,
        id: &StoreId,
        to: RequirementStatus,
        evidence: &str,
        prov: &Provenance,
    ) -> Result<(), WorkspaceError> {
        self.note("set_status");
        if !self.index.contains(evidence) {
            return Err(WorkspaceError::Invalid(format!(
                "status evidence `{evidence}` is not a registered artifact"
            )));
        }
        self.store.set_status(id, to, evidence, prov)?;
        Ok(())
    }

    pub fn register(&mut self, record: ArtifactRecord) -> Result<String, TraceError> {
        self.note("register_artifact");
        let board = &self.board;
        self.index.register(record, &|p| board.contains(p))
    }

    /// Adds a link; an identical existing link is not an error.
    pub fn link(&mut self, link: TraceLink) -> Result<bool, TraceError> {
        self.note("add_link");
        match self.links.add_link(link, &self.store, &self.index) {
            Ok(_) => Ok(true),
            Err(TraceError::DuplicateLink(_)) => Ok(false),
            Err(e) => Err(e),
        }
    }

    #[allow(clippy::too_many_arguments)]
    pub fn create_pbi(
        &mut self,
        pbi_id: &str,
        title: &str,
        stage: Stage,
        release_version: &str,
        sprint: &str,
        linked_requirements: Vec<StoreId>,
        prov: &Provenance,
    ) -> Result<(), WorkflowError> {
        self.note("required_tasks");
        let event = WorkflowEvent::Create {
            pbi_id: pbi_id.into(),
            title: title.into(),
            stage,
            release_version: release_version.into(),
            sprint: sprint.into(),
            linked_requirements,
            author: prov.author.clone(),
            at: prov.at,
        };
        let view = EvidenceView {
            index: &self.index,
            checklists: &self.checklists,
        };
        self.board.apply(event, &view)?;
        Ok(())
    }

    pub fn link_pbi(
        &mut self,
        pbi_id: &str,
        requirements: Vec<StoreId>,
        prov: &Provenance,
    ) -> Result<(), WorkflowError> {
        let event = WorkflowEvent::Link {
            pbi_id: pbi_id.into(),
            requirements,
            author: prov.author.clone(),
            at: prov.at,
        };
        let view = EvidenceView {
            index: &self.index,
            checklists: &self.checklists,
        };
        self.board.apply(event, &view)?;
        Ok(())
    }

    /// Advances a task. Completing a review task moves the DRAFT
    /// requirements named by its acceptable checklists to REVIEWED.
    pub fn advance(
        &mut self,
        pbi_id: &str,
        task: TaskId,
        new_state: TaskState,
        evidence: Vec<String>,
        prov: &Provenance,
    ) -> Result<Vec<StoreId>, WorkspaceError> {
        self.note("advance");
        let event = WorkflowEvent::Advance {
            pbi_id: pbi_id.into(),
            task_id: task,
            new_state,
            evidence: evidence.clone(),
            author: prov.author.clone(),
            at: prov.at,
        };
        let view = EvidenceView {
            index: &self.index,
            checklists: &self.checklists,
        };
        self.board.apply(event, &view)?;
        let mut reviewed = Vec::new();
        if new_state == TaskState::Done && task.is_review() {
            for ev in &evidence {
                let Some(c) = self.checklists.get(ev).filter(|c| c.is_acceptable()) else {
                    continue;
                };
                let subjects: Vec<StoreId> =
                    c.subjects.iter().filter_map(|s| s.parse().ok()).collect();
                for id in subjects {
                    if self
                        .store
                        .get(&id)
                        .is_some_and(|r| r.status == RequirementStatus::Draft)
                    {
                        self.set_status(&id, RequirementStatus::Reviewed, ev, prov)?;
                        reviewed.push(id);
                    }
                }
            }
        }
        Ok(reviewed)
    }

    pub fn pbis(&self) -> Vec<&Pbi> {
        self.board.pbis().collect()
    }

    pub fn matrix(&mut self, at: Timestamp) -> Result<TraceabilityMatrix, TraceError> {
        self.note("build_matrix");
        build_matrix(&self.store, &self.index, &self.links, at)
    }

    pub fn completeness(&mut self, at: Timestamp) -> Result<Vec<Finding>, TraceError> {
        let m = self.matrix(at)?;
        self.note("completeness_check");
        Ok(completeness_check(&m))
    }

    pub fn open_anomalies(&self) -> Vec<Anomaly> {
        self.anomalies.open().into_iter().cloned().collect()
    }

    pub fn latest_package(&self) -> Option<&DataPackage> {
        self.packages.last()
    }

    pub fn checklists_text(&self) -> String {
        let mut out = format!("{CHECKLISTS_HEADER}\n");
        for (id, c) in &self.checklists {
            let line = serde_json::json!({ "artifact_id": id, "checklist": c });
            out.push_str(&line.to_string());
            out.push('\n');
        }
        out
    }

    pub fn ingest_log_text(&self) -> String {
        self.ingest_log
            .iter()
            .map(|e| serde_json::to_string(e).expect("log entry serializes") + "\n")
            .collect()
    }

    pub fn save(&self, dir: &Path) -> Result<(), WorkspaceError> {
        fs::create_dir_all(dir).map_err(|e| state_err(dir, e))?;
        let files: [(&str, String); 7] = [
            ("store.txt", self.store.to_canonical()),
            ("artifacts.txt", self.index.to_canonical()),
            ("links.txt", self.links.to_canonical()),
            ("workflow.log", self.board.log_text()),
            ("anomalies.txt", self.anomalies.to_canonical()),
            ("checklists.txt", self.checklists_text()),
            ("ingest.log", self.ingest_log_text()),
        ];
        for (name, body) in files {
            let p = dir.join(name);
            write_atomic(&p, body.as_bytes()).map_err(|e| state_err(&p, e))?;
        }
        for pkg in &self.packages {
            let p = dir
                .join("packages")
                .join(format!("package-{:04}.txt", pkg.package_version));
            write_atomic(&p, pkg.to_canonical().as_bytes()).map_err(|e| state_err(&p, e))?;
        }
        Ok(())
    }

    /// Loads a state directory; missing files mean empty state.
    pub fn load(dir: &Path) -> Result<Self, WorkspaceError> {
        let read = |name: &str| -> Result<Option<String>, WorkspaceError> {
            let p = dir.join(name);
            match fs::read_to_string(&p) {
                Ok(s) => Ok(Some(s)),
                Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(None),
                Err(e) => Err(state_err(&p, e)),
            }
        };
        let mut p = Project::new();
        if let Some(t) = read("store.txt")? {
            p.store = RequirementStore::parse(&t)?;
        }
        if let Some(t) = read("artifacts.txt")? {
            p.index = ArtifactIndex::parse(&t)?;
        }
        if let Some(t) = read("links.txt")? {
            p.links = LinkSet::parse(&t)?;
        }
        if let Some(t) = read("anomalies.txt")? {
            p.anomalies = AnomalyLog::parse(&t)?;
        }
        if let Some(t) = read("checklists.txt")? {
            let path = dir.join("checklists.txt");
            let mut lines = t.lines();
            if lines.next() != Some(CHECKLISTS_HEADER) {
                return Err(state_err(
                    &path,
                    format!("expected header `{CHECKLISTS_HEADER}`"),
                ));
            }
            #[derive(Deserialize)]
            struct Line {
                artifact_id: String,
                checklist: Checklist,
            }
            for line in lines {
                let l: Line = serde_json::from_str(line).map_err(|e| state_err(&path, e))?;
                p.checklists.insert(l.artifact_id, l.checklist);
            }
        }
        if let Some(t) = read("workflow.log")? {
            let events = WorkflowBoard::parse_log(&t)?;
            let view = EvidenceView {
                index: &p.index,
                checklists: &p.checklists,
            };
            p.board = WorkflowBoard::replay(events, &view)?;
        }
        if let Some(t) = read("ingest.log")? {
            let path = dir.join("ingest.log");
            for line in t.lines().filter(|l| !l.trim().is_empty()) {
                p.ingest_log
                    .push(serde_json::from_str(line).map_err(|e| state_err(&path, e))?);
            }
        }
        let pkg_dir = dir.join("packages");
        if pkg_dir.is_dir() {
            let mut names: Vec<PathBuf> = fs::read_dir(&pkg_dir)
                .map_err(|e| state_err(&pkg_dir, e))?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|p| p.extension().is_some_and(|x| x == "txt"))
                .collect();
            names.sort();
            for n in names {
                let text = fs::read_to_string(&n).map_err(|e| state_err(&n, e))?;
                p.packages.push(DataPackage::parse(&text)?);
            }
        }
        Ok(p)
    }
}

/// Exclusive lock on a state directory, released on drop.
#[derive(Debug)]
pub struct WorkspaceLock {
    _file: File,
}

impl WorkspaceLock {
    /// Blocks until the lock is free.
    pub fn acquire(dir: &Path) -> Result<Self, WorkspaceError> {
        fs::create_dir_all(dir).map_err(|e| state_err(dir, e))?;
        let path = dir.join("lock");
        let file = OpenOptions::new()
            .create(true)
            .truncate(false)
            .write(true)
            .open(&path)
            .map_err(|e| state_err(&path, e))?;
        file.lock().map_err(|e| state_err(&path, e))?;
        Ok(WorkspaceLock { _file: file })
    }
}

/// How to fill a checklist when recording a review.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ReviewAnswers {
    pub default: ItemResult,
    /// Zero-based item index, result and comment.
    pub overrides: Vec<(usize, ItemResult, String)>,
}

impl ReviewAnswers {
    pub fn all(result: ItemResult) -> Self {
        ReviewAnswers {
            default: result,
            overrides: Vec::new(),
        }
    }
}

/// Configuration, state and adapters of one project.
pub struct Workspace {
    pub config: ProjectConfig,
    pub project: Project,
    pub vcs: LocalVcs,
    pub wmt: LocalWmt,
    pub catalog: ChecklistCatalog,
    pub srd_template: Option<DocumentTemplate>,
    pub design_template: Option<DocumentTemplate>,
    pub sci_template: Option<DocumentTemplate>,
}

fn read_template(
    id: &str,
    path: &Option<PathBuf>,
) -> Result<Option<DocumentTemplate>, WorkspaceError> {
    match path {
        None => Ok(None),
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| state_err(p, e))?;
            Ok(Some(load_template(id, &text)?))
        }
    }
}

impl Workspace {
    /// Opens the workspace described by `config`, loading any saved state.
    pub fn open(config: ProjectConfig) -> Result<Self, WorkspaceError> {
        config.check_rmt()?;
        let vcs = config.vcs()?;
        let wmt = config.wmt()?;
        let mut catalog = ChecklistCatalog::default();
        if let Some(p) = &config.checklist_catalog {
            let text = fs::read_to_string(p).map_err(|e| state_err(p, e))?;
            catalog = catalog.with_overrides(ChecklistCatalog::parse(&text)?);
        }
        let mut project = Project::load(&config.state_dir)?;
        project.note("load_template");
        Ok(Workspace {
            srd_template: read_template("srd", &config.srd_template)?,
            design_template: read_template("design", &config.design_template)?,
            sci_template: read_template("sci", &config.sci_template)?,
            config,
            project,
            vcs,
            wmt,
            catalog,
        })
    }

    pub fn save(&self) -> Result<(), WorkspaceError> {
        self.project.save(&self.config.state_dir)
    }

    pub fn lock(&self) -> Result<WorkspaceLock, WorkspaceError> {
        WorkspaceLock::acquire(&self.config.state_dir)
    }

    pub fn repo(&self) -> &str {
        &self.config.repo
    }

    /// Commits one file to the docs branch and registers it.
    pub fn publish(
        &mut self,
        path: &str,
        bytes: &[u8],
        kind: ArtifactKind,
        stage: Stage,
        pbi_refs: Vec<String>,
        prov: &Provenance,
    ) -> Result<String, WorkspaceError> {
        self.project.note("stage_commit");
        let commit = self.vcs.stage_commit(
            &self.config.repo,
            &self.config.docs_branch,
            &[(path.to_string(), bytes.to_vec())],
            &format!("Publish {path}"),
            &prov.author,
            None,
        )?;
        let hash = self.config.hash_algorithm.digest_hex(bytes);
        let record = ArtifactRecord::new(kind, path, &commit, &hash, stage, pbi_refs, prov);
        Ok(self.project.register(record)?)
    }

    fn base_meta(&self, prov: &Provenance) -> Meta {
        let mut meta = Meta::new();
        meta.insert("project".into(), self.config.project_name.clone());
        meta.insert(
            "release_version".into(),
            self.config.release_version.clone(),
        );
        meta.insert("generated_at".into(), format_ts(&prov.at));
        meta
    }

    /// Renders the SRD, commits it and registers it as a generated document.
    pub fn generate_srd(
        &mut self,
        stage: Stage,
        pbi_refs: Vec<String>,
        prov: &Provenance,
    ) -> Result<(RenderedDocument, String), WorkspaceError> {
        let matrix = self.project.matrix(prov.at).ok();
        let meta = self.base_meta(prov);
        let template = self
            .srd_template
            .clone()
            .unwrap_or_else(docgen::builtin_srd_template);
        let doc =
            docgen::generate_srd_with(&template, &self.project.store, matrix.as_ref(), &meta)?;
        for op in ["generate_srd", "render_document", "query"] {
            self.project.note(op);
        }
        let id = self.publish(
            SRD_PATH,
            doc.body.as_bytes(),
            ArtifactKind::GeneratedDoc,
            stage,
            pbi_refs,
            prov,
        )?;
        Ok((doc, id))
    }

    /// Builds the matrix, commits its CSV and registers it.
    pub fn publish_matrix(
        &mut self,
        stage: Stage,
        pbi_refs: Vec<String>,
        prov: &Provenance,
    ) -> Result<(String, String), WorkspaceError> {
        let m = self.project.matrix(prov.at)?;
        self.project.note("render_matrix_csv");
        let csv = render_matrix_csv(&m);
        let id = self.publish(
            MATRIX_PATH,
            csv.as_bytes(),
            ArtifactKind::Matrix,
            stage,
            pbi_refs,
            prov,
        )?;
        Ok((csv, id))
    }

    fn resolve_subject(&self, s: &str) -> Option<EntityRef> {
        let r: EntityRef = s.parse().ok()?;
        let known = match &r {
            EntityRef::Requirement(id) => self.project.store.get(id).is_some(),
            EntityRef::Artifact(a) => self.project.index.contains(a),
        };
        known.then_some(r)
    }

    /// Generates, fills, signs, commits and records a review checklist,
    /// linking it to each subject.
    pub fn record_review(
        &mut self,
        kind: ReviewKind,
        subjects: &[String],
        answers: &ReviewAnswers,
        stage: Stage,
        pbi_refs: Vec<String>,
        prov: &Provenance,
    ) -> Result<(Checklist, String), WorkspaceError> {
        self.project.note("generate_checklist");
        let mut checklist = generate_checklist(kind, subjects, &self.catalog, &|s| {
            self.resolve_subject(s).is_some()
        })?;
        checklist.answer_all(answers.default);
        for (i, r, c) in &answers.overrides {
            checklist.answer(*i, *r, c)?;
        }
        checklist.sign(prov);
        let path = format!("docs/reviews/{}.md", checklist.checklist_id);
        let id = self.publish(
            &path,
            checklist.render().as_bytes(),
            ArtifactKind::ReviewChecklist,
            stage,
            pbi_refs,
            prov,
        )?;
        self.project
            .checklists
            .insert(id.clone(), checklist.clone());
        for s in &checklist.subjects {
            let to = self
                .resolve_subject(s)
                .expect("subjects resolved at generation");
            let link = TraceLink::new(
                EntityRef::Artifact(id.clone()),
                to,
                LinkKind::Reviews,
                &id_commit(&id),
                prov,
            );
            self.project.link(link)?;
        }
        Ok((checklist, id))
    }

    /// Assembles the next incremental package and registers its manifest.
    pub fn assemble_package(
        &mut self,
        stage: Stage,
        prov: &Provenance,
    ) -> Result<(DataPackage, String), WorkspaceError> {
        self.project.note("assemble_incremental");
        self.project.note("stage_complete");
        let pkg = {
            let pbis = self.project.pbis();
            assemble_incremental(
                stage,
                &self.project.index,
                &pbis,
                self.project.packages.last(),
                prov,
            )?
        };
        let path = format!("packages/package-{:04}.txt", pkg.package_version);
        let pbi_refs: Vec<String> = self
            .project
            .board
            .pbis()
            .filter(|p| p.stage == stage)
            .map(|p| p.pbi_id.clone())
            .collect();
        let id = self.publish(
            &path,
            pkg.manifest_text().as_bytes(),
            ArtifactKind::PackageManifest,
            stage,
            pbi_refs,
            prov,
        )?;
        self.project.packages.push(pkg.clone());
        Ok((pkg, id))
    }

    /// Writes `data-package/` under `out_dir` for the latest package and
    /// registers the SCI report.
    pub fn generate_sci(
        &mut self,
        tickets: &[String],
        out_dir: &Path,
        prov: &Provenance,
    ) -> Result<(SciReport, String), WorkspaceError> {
        self.project.note("generate_sci");
        self.project.note("resolve_tickets");
        self.project.note("fetch_file");
        let matrix = self.project.matrix(prov.at)?;
        let package = self
            .project
            .packages
            .last()
            .cloned()
            .ok_or_else(|| WorkspaceError::Invalid("no package has been assembled".into()))?;
        let open = self.project.open_anomalies();
        let inputs = SciInputs {
            package: &package,
            lineage: &self.project.packages,
            tickets,
            index: &self.project.index,
            store: &self.project.store,
            matrix: &matrix,
            open_anomalies: &open,
            repo: &self.config.repo,
            hash: self.config.hash_algorithm,
            meta: self.base_meta(prov),
            template: self.sci_template.as_ref(),
        };
        let report = generate_sci(&inputs, &self.wmt, &self.vcs, out_dir)?;
        verify_data_package(&report.folder, &package, self.config.hash_algorithm)?;
        let path = format!(
            "docs/generated/sci-report-v{:04}.md",
            package.package_version
        );
        let pbi_refs: Vec<String> = self
            .project
            .board
            .pbis()
            .map(|p| p.pbi_id.clone())
            .collect();
        let id = self.publish(
            &path,
            report.document.body.as_bytes(),
            ArtifactKind::GeneratedDoc,
            Stage::HsiSystemTesting,
            pbi_refs,
            prov,
        )?;
        Ok((report, id))
    }

    /// Hardening over the latest package; promotes it when clean.
    pub fn validate(
        &mut self,
        prov: &Provenance,
    ) -> Result<(Vec<HardeningFinding>, bool), WorkspaceError> {
        self.project.note("validate_hardening");
        self.project.note("completeness_check");
        let matrix = self.project.matrix(prov.at)?;
        let package = self
            .project
            .packages
            .last()
            .cloned()
            .ok_or_else(|| WorkspaceError::Invalid("no package has been assembled".into()))?;
        let open = self.project.open_anomalies();
        let findings = {
            let pbis = self.project.pbis();
            validate_hardening(&package, &self.project.store, &matrix, &open, &pbis)
        };
        let promoted = findings.is_empty();
        if promoted {
            let p = promote(&package, &findings)?;
            *self.project.packages.last_mut().expect("checked above") = p;
        }
        Ok((findings, promoted))
    }

    /// Data-package folder verification for the latest package.
    pub fn verify_folder(&self, folder: &Path) -> Result<usize, WorkspaceError> {
        let pkg = self
            .project
            .packages
            .last()
            .ok_or_else(|| WorkspaceError::Invalid("no package has been assembled".into()))?;
        Ok(packager::verify_data_package(
            folder,
            pkg,
            self.config.hash_algorithm,
        )?)
    }
}

/// The commit part of an artifact id.
pub fn id_commit(artifact_id: &str) -> String {
    artifact_id
        .rsplit_once('@')
        .map(|(_, c)| c.to_string())
        .unwrap_or_default()
}
