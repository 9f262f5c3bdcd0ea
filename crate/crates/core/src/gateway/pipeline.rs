//! Pull-request ingest. Every step works on a copy of the project; the copy
//! replaces the live state only after the last step succeeds.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use thiserror::Error;

use super::adapters::{AdapterError, VcsAdapter, WmtAdapter};
use super::event::{EventError, PullRequestEvent};
use crate::canonical::Provenance;
use crate::docgen::{generate_design_artifact, CommitContext, DocError};
use crate::req_store::{ImportAction, RequirementRecord, StoreError, StoreId};
use crate::tag_parser::{
    diff_requirements, scan, RequirementDraft, TagError, TraceTag, TraceTagKind,
};
use crate::trace::{
    detect_anomalies, Anomaly, AnomalyInputs, ArtifactKind, ArtifactRecord, ChangeSet, ChangeType,
    EntityRef, FileChange, LinkKind, TraceError, TraceLink,
};
use crate::workflow::{Stage, WorkflowError};
use crate::workspace::{IngestLogEntry, Project, Workspace};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum PipelineStep {
    Select,
    Fetch,
    Scan,
    Import,
    Register,
    Detect,
    Document,
    Log,
}

impl PipelineStep {
    pub const ALL: [PipelineStep; 8] = [
        PipelineStep::Select,
        PipelineStep::Fetch,
        PipelineStep::Scan,
        PipelineStep::Import,
        PipelineStep::Register,
        PipelineStep::Detect,
        PipelineStep::Document,
        PipelineStep::Log,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            PipelineStep::Select => "select",
            PipelineStep::Fetch => "fetch",
            PipelineStep::Scan => "scan",
            PipelineStep::Import => "import",
            PipelineStep::Register => "register",
            PipelineStep::Detect => "detect",
            PipelineStep::Document => "document",
            PipelineStep::Log => "log",
        }
    }
}

impl fmt::Display for PipelineStep {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct IngestOptions {
    /// Abort right after this step, as if it had failed.
    pub fail_at: Option<PipelineStep>,
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum IngestFailure {
    #[error(transparent)]
    Event(#[from] EventError),
    #[error(transparent)]
    Adapter(#[from] AdapterError),
    #[error("{path}: {source}")]
    Tag { path: String, source: TagError },
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error(transparent)]
    Trace(#[from] TraceError),
    #[error(transparent)]
    Workflow(#[from] WorkflowError),
    #[error(transparent)]
    Doc(#[from] DocError),
    #[error("{path} line {line}: trace tag names unknown `{target}`")]
    UnresolvedTraceTag {
        path: String,
        line: u32,
        target: String,
    },
    #[error("injected failure")]
    Injected,
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
#[error("event {event_id} failed at {step}: {failure}")]
pub struct IngestError {
    pub event_id: String,
    pub step: PipelineStep,
    pub failure: IngestFailure,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct IngestResult {
    pub event_id: String,
    /// The event had already been processed; nothing changed.
    pub duplicate: bool,
    pub pbi_context: Vec<String>,
    pub unresolved_tickets: Vec<String>,
    pub imported: Vec<(StoreId, ImportAction)>,
    pub registered: Vec<String>,
    pub links_added: usize,
    pub anomalies: Vec<Anomaly>,
    pub design_artifact: Option<String>,
    pub docs_commit: Option<String>,
    pub committed_paths: Vec<String>,
}

struct Run {
    event_id: String,
    fail_at: Option<PipelineStep>,
}

impl Run {
    fn err(&self, step: PipelineStep, failure: impl Into<IngestFailure>) -> IngestError {
        IngestError {
            event_id: self.event_id.clone(),
            step,
            failure: failure.into(),
        }
    }

    fn checkpoint(&self, step: PipelineStep) -> Result<(), IngestError> {
        if self.fail_at == Some(step) {
            return Err(self.err(step, IngestFailure::Injected));
        }
        Ok(())
    }
}

fn resolve_key(project: &Project, key: &str) -> Option<StoreId> {
    if let Some(r) = project.store.by_local_key(key) {
        return Some(r.store_id);
    }
    key.parse::<StoreId>()
        .ok()
        .filter(|id| project.store.get(id).is_some())
}

/// Processes one pull-request event against the workspace.
pub fn handle_pull_request(
    ws: &mut Workspace,
    event: &PullRequestEvent,
    opts: &IngestOptions,
) -> Result<IngestResult, IngestError> {
    let event_id = event.event_id();
    let run = Run {
        event_id: event_id.clone(),
        fail_at: opts.fail_at,
    };
    event
        .validate()
        .map_err(|e| run.err(PipelineStep::Select, e))?;
    if ws.project.processed(&event_id) {
        return Ok(IngestResult {
            event_id,
            duplicate: true,
            ..Default::default()
        });
    }
    let config = &ws.config;
    let vcs = &ws.vcs;
    let mut work = ws.project.clone();
    work.note("handle_pull_request");
    let prov = Provenance::new(&event.author, event.timestamp).map_err(|_| {
        run.err(
            PipelineStep::Select,
            EventError {
                field: "author".into(),
                reason: "must not be empty".into(),
            },
        )
    })?;
    let mut result = IngestResult {
        event_id: event_id.clone(),
        ..Default::default()
    };

    // Select: work-item context and the files worth reading.
    work.note("resolve_tickets");
    let mut context = BTreeSet::new();
    for ticket in event.tickets(config) {
        match ws.wmt.resolve_tickets(std::slice::from_ref(&ticket)) {
            Ok(map) => {
                for pbi in map.into_values().flatten() {
                    if work.board.contains(&pbi) {
                        context.insert(pbi);
                    }
                }
            }
            Err(AdapterError::UnresolvedTicket(_)) => result.unresolved_tickets.push(ticket),
            Err(e) => return Err(run.err(PipelineStep::Select, e)),
        }
    }
    let context: Vec<String> = context.into_iter().collect();
    result.pbi_context = context.clone();
    let live: Vec<&str> = event
        .changed_files
        .iter()
        .filter(|f| f.change_type != ChangeType::Deleted)
        .map(|f| f.path.as_str())
        .collect();
    let wanted: Vec<&str> = live
        .iter()
        .copied()
        .filter(|p| config.is_requirement_file(p) || config.is_traced(p))
        .collect();
    let deleted_req_files: Vec<&str> = event
        .changed_files
        .iter()
        .filter(|f| f.change_type == ChangeType::Deleted && config.is_requirement_file(&f.path))
        .map(|f| f.path.as_str())
        .collect();
    run.checkpoint(PipelineStep::Select)?;

    // Fetch.
    let mut contents: BTreeMap<&str, Vec<u8>> = BTreeMap::new();
    for path in &wanted {
        work.note("fetch_file");
        let bytes = vcs
            .fetch_file(&event.repo, &event.commit_id, path)
            .map_err(|e| run.err(PipelineStep::Fetch, e))?;
        contents.insert(path, bytes);
    }
    let docs_head = vcs
        .branch_head(&config.repo, &config.docs_branch)
        .map_err(|e| run.err(PipelineStep::Fetch, e))?;
    run.checkpoint(PipelineStep::Fetch)?;

    // Scan and diff.
    let mut batch: Vec<RequirementDraft> = Vec::new();
    let mut removed_keys: BTreeSet<String> = BTreeSet::new();
    let mut tags: BTreeMap<&str, Vec<TraceTag>> = BTreeMap::new();
    for (path, bytes) in &contents {
        let text = String::from_utf8_lossy(bytes);
        work.note("scan_source");
        let tag_err = |source| {
            run.err(
                PipelineStep::Scan,
                IngestFailure::Tag {
                    path: path.to_string(),
                    source,
                },
            )
        };
        let report = scan(&text, path, &config.comment_syntax).map_err(tag_err)?;
        if config.is_traced(path) {
            if let Some(e) = report.trace_errors.first() {
                return Err(tag_err(e.clone()));
            }
            tags.insert(path, report.trace_tags.clone());
        }
        if config.is_requirement_file(path) {
            if let Some(e) = report.errors.first() {
                return Err(tag_err(e.clone()));
            }
            work.note("diff_requirements");
            let diff =
                diff_requirements(&work.store.drafts_in(path), &report.drafts).map_err(tag_err)?;
            removed_keys.extend(diff.removed);
            batch.extend(report.drafts);
        }
    }
    for path in &deleted_req_files {
        removed_keys.extend(work.store.drafts_in(path).into_iter().map(|d| d.local_key));
    }
    for d in &batch {
        removed_keys.remove(&d.local_key);
    }
    let removed_requirements: Vec<StoreId> = removed_keys
        .iter()
        .filter_map(|k| work.store.by_local_key(k).map(|r| r.store_id))
        .collect();
    run.checkpoint(PipelineStep::Scan)?;

    // Import, then tie the batch to the work items in context.
    let mut baseline_resets = Vec::new();
    if !batch.is_empty() {
        let outcome = work
            .import(&batch, &prov)
            .map_err(|e| run.err(PipelineStep::Import, e))?;
        let ids: Vec<StoreId> = outcome.mapping.values().copied().collect();
        for pbi in &context {
            work.link_pbi(pbi, ids.clone(), &prov)
                .map_err(|e| run.err(PipelineStep::Import, e))?;
        }
        baseline_resets = outcome.baseline_resets.clone();
        result.imported = outcome.actions;
    }
    run.checkpoint(PipelineStep::Import)?;

    // Register traced files and turn their trace tags into links.
    let stage_of = |work: &Project, kind: ArtifactKind| -> Stage {
        context
            .iter()
            .filter_map(|p| work.board.get(p).map(|p| p.stage))
            .min()
            .unwrap_or(kind.default_stage())
    };
    let mut by_path: BTreeMap<&str, String> = BTreeMap::new();
    for (path, bytes) in &contents {
        if !config.is_traced(path) {
            continue;
        }
        let kind = config.artifact_kind(path);
        let hash = config.hash_algorithm.digest_hex(bytes);
        let stage = stage_of(&work, kind);
        let record = ArtifactRecord::new(
            kind,
            path,
            &event.commit_id,
            &hash,
            stage,
            context.clone(),
            &prov,
        );
        let id = work
            .register(record)
            .map_err(|e| run.err(PipelineStep::Register, e))?;
        result.registered.push(id.clone());
        by_path.insert(path, id);
    }
    for (path, file_tags) in &tags {
        let me = EntityRef::Artifact(by_path[path].clone());
        for tag in file_tags {
            for target in &tag.targets {
                let unresolved = || {
                    run.err(
                        PipelineStep::Register,
                        IngestFailure::UnresolvedTraceTag {
                            path: path.to_string(),
                            line: tag.line,
                            target: target.clone(),
                        },
                    )
                };
                let (from, to, kind) = match tag.kind {
                    TraceTagKind::Implements => {
                        let id = resolve_key(&work, target).ok_or_else(unresolved)?;
                        (EntityRef::Requirement(id), me.clone(), LinkKind::Implements)
                    }
                    TraceTagKind::Verifies => {
                        let id = resolve_key(&work, target).ok_or_else(unresolved)?;
                        (me.clone(), EntityRef::Requirement(id), LinkKind::Verifies)
                    }
                    TraceTagKind::Reports => {
                        let t = work
                            .index
                            .latest_for_path(target, None)
                            .ok_or_else(unresolved)?;
                        (
                            me.clone(),
                            EntityRef::Artifact(t.artifact_id.clone()),
                            LinkKind::Reports,
                        )
                    }
                };
                let link = TraceLink::new(from, to, kind, &event.commit_id, &prov);
                if work
                    .link(link)
                    .map_err(|e| run.err(PipelineStep::Register, e))?
                {
                    result.links_added += 1;
                }
            }
        }
    }
    // Review checklists committed by hand count as review evidence.
    for (path, id) in &by_path {
        if config.artifact_kind(path) != ArtifactKind::ReviewChecklist {
            continue;
        }
        let text = String::from_utf8_lossy(&contents[path]);
        let Ok(checklist) = crate::docgen::Checklist::parse(&text) else {
            continue;
        };
        for s in &checklist.subjects {
            let Ok(to) = s.parse::<EntityRef>() else {
                continue;
            };
            let known = match &to {
                EntityRef::Requirement(r) => work.store.get(r).is_some(),
                EntityRef::Artifact(a) => work.index.contains(a),
            };
            if known {
                let link = TraceLink::new(
                    EntityRef::Artifact(id.clone()),
                    to,
                    LinkKind::Reviews,
                    &event.commit_id,
                    &prov,
                );
                if work
                    .link(link)
                    .map_err(|e| run.err(PipelineStep::Register, e))?
                {
                    result.links_added += 1;
                }
            }
        }
        work.checklists.insert(id.clone(), checklist);
    }
    run.checkpoint(PipelineStep::Register)?;

    // Detect anomalies, then retire deleted paths.
    let files: Vec<FileChange> = event
        .changed_files
        .iter()
        .map(|f| FileChange {
            path: f.path.clone(),
            change_type: f.change_type,
            new_hash: contents
                .get(f.path.as_str())
                .map(|b| config.hash_algorithm.digest_hex(b))
                .or_else(|| f.blob_hash.clone())
                .unwrap_or_default(),
        })
        .collect();
    let changes = ChangeSet {
        files,
        removed_requirements,
        reset_requirements: baseline_resets,
    };
    work.note("detect_anomalies");
    let anomalies = detect_anomalies(
        &AnomalyInputs {
            store: &work.store,
            index: &work.index,
            links: &work.links,
            board: &work.board,
            traced_prefixes: &config.traced_prefixes,
        },
        &changes,
        &event.commit_id,
        &context,
        event.timestamp,
    );
    for a in &anomalies {
        work.anomalies.record(a.clone());
    }
    result.anomalies = anomalies;
    for f in event
        .changed_files
        .iter()
        .filter(|f| f.change_type == ChangeType::Deleted)
    {
        work.index.mark_deleted(&f.path, &event.commit_id);
    }
    run.checkpoint(PipelineStep::Detect)?;

    // Design artifact for created or updated requirements.
    let touched: Vec<RequirementRecord> = result
        .imported
        .iter()
        .filter(|(_, a)| *a != ImportAction::Unchanged)
        .filter_map(|(id, _)| work.store.get(id).cloned())
        .collect();
    if !touched.is_empty() {
        work.note("generate_design_artifact");
        work.note("render_document");
        let ctx = CommitContext {
            repo: event.repo.clone(),
            commit_id: event.commit_id.clone(),
            branch: event.source_branch.clone(),
            author: event.author.clone(),
            at: event.timestamp,
        };
        let doc = generate_design_artifact(&touched, &ctx, ws.design_template.as_ref())
            .map_err(|e| run.err(PipelineStep::Document, e))?;
        let doc_path = format!("docs/generated/design-{}.md", event.commit_id);
        let mut files = vec![(doc_path.clone(), doc.body.clone().into_bytes())];
        let req_paths: BTreeSet<&str> = touched.iter().map(|r| r.source_path.as_str()).collect();
        for p in req_paths {
            if let Some(b) = contents.get(p) {
                files.push((p.to_string(), b.clone()));
            }
        }
        work.note("stage_commit");
        let message = format!("Design artifact for {} at {}", event.repo, event.commit_id);
        let docs_commit = vcs
            .stage_commit(
                &config.repo,
                &config.docs_branch,
                &files,
                &message,
                &event.author,
                docs_head.as_deref(),
            )
            .map_err(|e| run.err(PipelineStep::Document, e))?;
        let hash = config.hash_algorithm.digest_hex(doc.body.as_bytes());
        let stage = stage_of(&work, ArtifactKind::GeneratedDoc);
        let record = ArtifactRecord::new(
            ArtifactKind::GeneratedDoc,
            &doc_path,
            &docs_commit,
            &hash,
            stage,
            context.clone(),
            &prov,
        );
        let id = work
            .register(record)
            .map_err(|e| run.err(PipelineStep::Document, e))?;
        for r in &touched {
            let link = TraceLink::new(
                EntityRef::Requirement(r.store_id),
                EntityRef::Artifact(id.clone()),
                LinkKind::Implements,
                &docs_commit,
                &prov,
            );
            if work
                .link(link)
                .map_err(|e| run.err(PipelineStep::Document, e))?
            {
                result.links_added += 1;
            }
        }
        result.committed_paths = files.into_iter().map(|(p, _)| p).collect();
        result.design_artifact = Some(id);
        result.docs_commit = Some(docs_commit);
    }
    run.checkpoint(PipelineStep::Document)?;

    work.ingest_log.push(IngestLogEntry {
        event_id: event_id.clone(),
        repo: event.repo.clone(),
        commit_id: event.commit_id.clone(),
        author: event.author.clone(),
        at: event.timestamp,
        pbi_context: context,
        created: result
            .imported
            .iter()
            .filter(|(_, a)| *a == ImportAction::Created)
            .count(),
        updated: result
            .imported
            .iter()
            .filter(|(_, a)| *a == ImportAction::Updated)
            .count(),
        anomalies: result.anomalies.len(),
        design_artifact: result.design_artifact.clone(),
    });
    run.checkpoint(PipelineStep::Log)?;

    ws.project = work;
    Ok(result)
}
