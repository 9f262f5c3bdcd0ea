//! Scripted end-to-end runs against a fresh workspace, and a seeded
//! generator of complete synthetic projects.
//!
//! A script is keyed text: a `[scenario]` header followed by one section per
//! step. Multi-line values use a heredoc, `content <<END` ... `END`.
//!
//! ```text
//! [scenario]
//! name = demo
//! author = alice
//! start = 2025-03-03T09:00:00Z
//!
//! [seed]
//! path = docs/spec/system.req
//! content <<END
//! @req{DEMO-SYS-001} @kind{SYSTEM} @title{Power} @text{The unit shall power up.}
//! END
//!
//! [expect]
//! requirements = 0
//! ```

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use chrono::Duration;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::canonical::{format_ts, parse_ts, sha256_hex, Provenance, Timestamp};
use crate::docgen::{ItemResult, ReviewKind};
use crate::gateway::adapters::VcsAdapter;
use crate::gateway::config::ProjectConfig;
use crate::gateway::event::{ChangedFile, PullRequestEvent};
use crate::gateway::pipeline::{handle_pull_request, IngestOptions, IngestResult, PipelineStep};
use crate::packager::{verify_monotonic, HardeningFinding, PackageKind};
use crate::req_store::{ImportAction, RequirementFilter, StoreId};
use crate::tag_parser::RequirementKind;
use crate::trace::{render_matrix_csv, ArtifactKind, ChangeType};
use crate::workflow::{required_tasks, stage_complete, Stage, TaskId, TaskState};
use crate::workspace::{ReviewAnswers, Workspace, WorkspaceError};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StepKind {
    Seed,
    Delete,
    PullRequest,
    Resend,
    Ticket,
    Pbi,
    Complete,
    Advance,
    Review,
    Srd,
    Matrix,
    Package,
    Sci,
    Validate,
    Expect,
}

impl StepKind {
    const ALL: [StepKind; 15] = [
        StepKind::Seed,
        StepKind::Delete,
        StepKind::PullRequest,
        StepKind::Resend,
        StepKind::Ticket,
        StepKind::Pbi,
        StepKind::Complete,
        StepKind::Advance,
        StepKind::Review,
        StepKind::Srd,
        StepKind::Matrix,
        StepKind::Package,
        StepKind::Sci,
        StepKind::Validate,
        StepKind::Expect,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            StepKind::Seed => "seed",
            StepKind::Delete => "delete",
            StepKind::PullRequest => "pull-request",
            StepKind::Resend => "resend",
            StepKind::Ticket => "ticket",
            StepKind::Pbi => "pbi",
            StepKind::Complete => "complete",
            StepKind::Advance => "advance",
            StepKind::Review => "review",
            StepKind::Srd => "srd",
            StepKind::Matrix => "matrix",
            StepKind::Package => "package",
            StepKind::Sci => "sci",
            StepKind::Validate => "validate",
            StepKind::Expect => "expect",
        }
    }

    fn keys(self) -> (&'static [&'static str], &'static [&'static str]) {
        // (required, optional); `author` and `expect-error` are added for
        // steps that call into the toolkit.
        match self {
            StepKind::Seed => (&["path", "content"], &[]),
            StepKind::Delete => (&["path"], &[]),
            StepKind::PullRequest => (
                &["commit", "branch"],
                &["target", "title", "tickets", "delivery", "fail-at"],
            ),
            StepKind::Resend => (&[], &[]),
            StepKind::Ticket => (&["id", "pbis"], &[]),
            StepKind::Pbi => (
                &["id", "title", "stage"],
                &["sprint", "release", "requirements"],
            ),
            StepKind::Complete => (&["pbi"], &[]),
            StepKind::Advance => (&["pbi", "task", "state"], &["evidence"]),
            StepKind::Review => (
                &["kind", "subjects"],
                &["result", "fail", "unanswered", "as", "stage"],
            ),
            StepKind::Srd | StepKind::Matrix => (&[], &["stage"]),
            StepKind::Package => (&["stage"], &[]),
            StepKind::Sci => (&["tickets"], &[]),
            StepKind::Validate => (&[], &[]),
            StepKind::Expect => (&[], &[]),
        }
    }

    fn acts(self) -> bool {
        !matches!(
            self,
            StepKind::Seed | StepKind::Delete | StepKind::Ticket | StepKind::Expect
        )
    }
}

impl FromStr for StepKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        StepKind::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| format!("unknown step `[{s}]`"))
    }
}

/// Checks an `[expect]` section may carry. Names ending in `.` take a
/// suffix, as in `status.FMS-SYS-001`.
const EXPECT_CHECKS: [&str; 21] = [
    "requirements",
    "requirements.",
    "status.",
    "imported-created",
    "imported-updated",
    "last-anomalies",
    "open-anomalies",
    "anomaly",
    "completeness-findings",
    "hardening-findings",
    "hardening-finding",
    "package-kind",
    "package-version",
    "packages",
    "design-artifacts",
    "monotonic",
    "sci-files",
    "stage-complete.",
    "links",
    "duplicate",
    "processed-events",
];

fn known_check(key: &str) -> bool {
    EXPECT_CHECKS.iter().any(|c| match c.strip_suffix('.') {
        Some(prefix) => key
            .strip_prefix(prefix)
            .and_then(|r| r.strip_prefix('.'))
            .is_some_and(|r| !r.is_empty()),
        None => key == *c,
    })
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ScenarioHeader {
    pub name: String,
    pub repo: String,
    pub author: String,
    pub start: Timestamp,
    pub release: String,
    /// `config.KEY = VALUE` lines, passed through to the project config.
    pub config: Vec<(String, String)>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Step {
    pub kind: StepKind,
    /// In script order; `[complete]` and `[expect]` depend on it.
    pub fields: Vec<(String, String)>,
    pub line: usize,
}

impl Step {
    pub fn new(kind: StepKind, fields: &[(&str, &str)]) -> Self {
        Step {
            kind,
            fields: fields
                .iter()
                .map(|(k, v)| (k.to_string(), v.to_string()))
                .collect(),
            line: 0,
        }
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.fields
            .iter()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v.as_str())
    }

    fn validate(&self) -> Result<(), String> {
        let (required, optional) = self.kind.keys();
        for r in required {
            if self.get(r).is_none() {
                return Err(format!("[{}] needs `{r}`", self.kind.as_str()));
            }
        }
        let mut seen = BTreeSet::new();
        for (k, v) in &self.fields {
            let common = self.kind.acts() && (k == "author" || k == "expect-error");
            let ok = match self.kind {
                StepKind::Expect => known_check(k),
                StepKind::Complete => k == "pbi" || common || TaskId::from_str(k).is_ok(),
                _ => required.contains(&k.as_str()) || optional.contains(&k.as_str()) || common,
            };
            if !ok {
                return Err(format!("[{}] does not take `{k}`", self.kind.as_str()));
            }
            if self.kind != StepKind::Expect && !seen.insert(k.as_str()) {
                return Err(format!("[{}] sets `{k}` twice", self.kind.as_str()));
            }
            if k != "content" && v.contains('\n') {
                return Err(format!("`{k}` must be a single line"));
            }
        }
        match self.kind {
            StepKind::Pbi => {
                self.get("stage").unwrap_or_default().parse::<Stage>()?;
            }
            StepKind::Package => {
                self.get("stage").unwrap_or_default().parse::<Stage>()?;
            }
            StepKind::Srd | StepKind::Matrix => {
                if let Some(s) = self.get("stage") {
                    s.parse::<Stage>()?;
                }
            }
            StepKind::Advance => {
                self.get("task").unwrap_or_default().parse::<TaskId>()?;
                self.get("state").unwrap_or_default().parse::<TaskState>()?;
            }
            StepKind::Review => {
                self.get("kind").unwrap_or_default().parse::<ReviewKind>()?;
                if let Some(r) = self.get("result") {
                    r.parse::<ItemResult>()?;
                }
            }
            StepKind::PullRequest => {
                if let Some(s) = self.get("fail-at") {
                    parse_step(s)?;
                }
            }
            _ => {}
        }
        Ok(())
    }
}

fn parse_step(s: &str) -> Result<PipelineStep, String> {
    PipelineStep::ALL
        .into_iter()
        .find(|p| p.as_str() == s)
        .ok_or_else(|| format!("unknown pipeline step `{s}`"))
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ScenarioScript {
    pub header: ScenarioHeader,
    pub steps: Vec<Step>,
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ScenarioError {
    #[error("script line {line}: {reason}")]
    Parse { line: usize, reason: String },
    /// `step` is 1-based; 0 means workspace setup.
    #[error("step {step} (line {line}): {message}")]
    Step {
        step: usize,
        line: usize,
        message: String,
    },
}

fn list(v: &str) -> Vec<String> {
    v.split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(str::to_string)
        .collect()
}

type Fields = Vec<(String, String)>;

impl ScenarioScript {
    pub fn parse(text: &str) -> Result<Self, ScenarioError> {
        let perr = |line: usize, reason: String| ScenarioError::Parse { line, reason };
        let lines: Vec<&str> = text.lines().collect();
        // (line, section name, fields)
        let mut sections: Vec<(usize, String, Fields)> = Vec::new();
        let mut i = 0;
        while i < lines.len() {
            let raw = lines[i];
            let line = raw.trim();
            i += 1;
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            if let Some(name) = line.strip_prefix('[').and_then(|l| l.strip_suffix(']')) {
                sections.push((i, name.trim().to_string(), Vec::new()));
                continue;
            }
            let Some((_, _, fields)) = sections.last_mut() else {
                return Err(perr(i, "text before the first section".into()));
            };
            if let Some((key, marker)) = line.split_once("<<") {
                let (key, marker) = (key.trim(), marker.trim());
                if marker.is_empty() {
                    return Err(perr(i, "heredoc needs an end marker".into()));
                }
                let start = i;
                let mut body = String::new();
                loop {
                    let Some(l) = lines.get(i) else {
                        return Err(perr(start, format!("heredoc `{marker}` is never closed")));
                    };
                    i += 1;
                    if *l == marker {
                        break;
                    }
                    body.push_str(l);
                    body.push('\n');
                }
                fields.push((key.to_string(), body));
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| perr(i, "expected `key = value`".into()))?;
            fields.push((k.trim().to_string(), v.trim().to_string()));
        }

        let mut iter = sections.into_iter();
        let (hline, hname, hfields) = iter
            .next()
            .ok_or_else(|| perr(1, "missing [scenario] header".into()))?;
        if hname != "scenario" {
            return Err(perr(hline, "the first section must be [scenario]".into()));
        }
        let header = parse_header(hline, hfields)?;
        let mut steps = Vec::new();
        for (line, name, fields) in iter {
            let kind: StepKind = name.parse().map_err(|e| perr(line, e))?;
            let step = Step { kind, fields, line };
            step.validate().map_err(|e| perr(line, e))?;
            steps.push(step);
        }
        Ok(ScenarioScript { header, steps })
    }

    pub fn load(path: &Path) -> Result<Self, ScenarioError> {
        let text = fs::read_to_string(path).map_err(|e| ScenarioError::Parse {
            line: 0,
            reason: format!("{}: {e}", path.display()),
        })?;
        Self::parse(&text)
    }

    pub fn render(&self) -> String {
        let h = &self.header;
        let mut out = format!(
            "[scenario]\nname = {}\nrepo = {}\nauthor = {}\nstart = {}\nrelease = {}\n",
            h.name,
            h.repo,
            h.author,
            format_ts(&h.start),
            h.release
        );
        for (k, v) in &h.config {
            out.push_str(&format!("config.{k} = {v}\n"));
        }
        for step in &self.steps {
            out.push_str(&format!("\n[{}]\n", step.kind.as_str()));
            for (k, v) in &step.fields {
                if k == "content" {
                    let mut marker = String::from("END");
                    while v.lines().any(|l| l == marker) {
                        marker.push('_');
                    }
                    out.push_str(&format!("{k} <<{marker}\n{v}"));
                    if !v.is_empty() && !v.ends_with('\n') {
                        out.push('\n');
                    }
                    out.push_str(&marker);
                    out.push('\n');
                } else {
                    out.push_str(&format!("{k} = {v}\n"));
                }
            }
        }
        out
    }
}

fn parse_header(
    line: usize,
    fields: Vec<(String, String)>,
) -> Result<ScenarioHeader, ScenarioError> {
    let perr = |reason: String| ScenarioError::Parse { line, reason };
    let mut name = None;
    let mut repo = "project".to_string();
    let mut author = None;
    let mut start = None;
    let mut release = "0.0.0".to_string();
    let mut config = Vec::new();
    for (k, v) in fields {
        match k.as_str() {
            "name" => name = Some(v),
            "repo" => repo = v,
            "author" => author = Some(v),
            "start" => start = Some(parse_ts(&v).map_err(|e| perr(e.to_string()))?),
            "release" => release = v,
            other => match other.strip_prefix("config.") {
                Some(key) if !matches!(key, "repo" | "project_name" | "release_version") => {
                    config.push((key.to_string(), v))
                }
                _ => return Err(perr(format!("[scenario] does not take `{other}`"))),
            },
        }
    }
    Ok(ScenarioHeader {
        name: name.ok_or_else(|| perr("[scenario] needs `name`".into()))?,
        repo,
        author: author.ok_or_else(|| perr("[scenario] needs `author`".into()))?,
        start: start.ok_or_else(|| perr("[scenario] needs `start`".into()))?,
        release,
        config,
    })
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ExpectOutcome {
    /// 1-based step index.
    pub step: usize,
    pub check: String,
    pub expected: String,
    pub actual: String,
    pub passed: bool,
}

impl fmt::Display for ExpectOutcome {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{} step {} {}: expected {}, got {}",
            if self.passed { "PASS" } else { "FAIL" },
            self.step,
            self.check,
            self.expected,
            self.actual
        )
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ScenarioReport {
    pub name: String,
    pub outcomes: Vec<ExpectOutcome>,
    pub store_digest: String,
    pub store_text: String,
    pub matrix_csv: String,
    /// Docs-branch path to content digest, at the final docs commit.
    pub documents: BTreeMap<String, String>,
    /// Manifest text of every package, oldest first.
    pub manifests: Vec<String>,
    pub monotonic_violations: Vec<String>,
    pub package_version: Option<u32>,
    pub package_kind: Option<PackageKind>,
    /// Findings of the last `[validate]` step.
    pub findings: Option<Vec<HardeningFinding>>,
    pub sci_files: Option<usize>,
    pub ops_invoked: BTreeSet<String>,
    pub workspace: PathBuf,
}

impl ScenarioReport {
    pub fn passed(&self) -> bool {
        self.outcomes.iter().all(|o| o.passed)
    }

    pub fn manifest_digest(&self) -> Option<String> {
        self.manifests.last().map(sha256_hex)
    }
}

struct Runner {
    header: ScenarioHeader,
    ws: Workspace,
    dir: PathBuf,
    tree: BTreeMap<String, Vec<u8>>,
    committed: BTreeSet<String>,
    pending: BTreeMap<String, ChangeType>,
    aliases: BTreeMap<String, String>,
    last_event: Option<PullRequestEvent>,
    last_ingest: Option<IngestResult>,
    stage: Stage,
    findings: Option<Vec<HardeningFinding>>,
    sci_files: Option<usize>,
    outcomes: Vec<ExpectOutcome>,
}

fn setup(header: &ScenarioHeader, dir: &Path) -> Result<Workspace, String> {
    if dir.exists()
        && fs::read_dir(dir)
            .map_err(|e| e.to_string())?
            .next()
            .is_some()
    {
        return Err(format!("workspace {} is not empty", dir.display()));
    }
    fs::create_dir_all(dir).map_err(|e| e.to_string())?;
    let mut conf = format!(
        "repo = {}\nproject_name = {}\nrelease_version = {}\n",
        header.repo, header.name, header.release
    );
    for (k, v) in &header.config {
        conf.push_str(&format!("{k} = {v}\n"));
    }
    let path = dir.join("certiflow.conf");
    fs::write(&path, conf).map_err(|e| e.to_string())?;
    let config = ProjectConfig::load(&path).map_err(|e| e.to_string())?;
    Workspace::open(config).map_err(|e| e.to_string())
}

/// Runs `script` in `dir`, which must be missing or empty.
pub fn run_scenario(script: &ScenarioScript, dir: &Path) -> Result<ScenarioReport, ScenarioError> {
    let ws = setup(&script.header, dir).map_err(|message| ScenarioError::Step {
        step: 0,
        line: 0,
        message,
    })?;
    let mut r = Runner {
        header: script.header.clone(),
        ws,
        dir: dir.to_path_buf(),
        tree: BTreeMap::new(),
        committed: BTreeSet::new(),
        pending: BTreeMap::new(),
        aliases: BTreeMap::new(),
        last_event: None,
        last_ingest: None,
        stage: Stage::Specification,
        findings: None,
        sci_files: None,
        outcomes: Vec::new(),
    };
    for (i, step) in script.steps.iter().enumerate() {
        let n = i + 1;
        let at = script.header.start + Duration::minutes(n as i64);
        let serr = |message: String| ScenarioError::Step {
            step: n,
            line: step.line,
            message,
        };
        if step.kind == StepKind::Expect {
            r.expect(n, step, at).map_err(serr)?;
            continue;
        }
        let outcome = r.apply(step, at);
        match (outcome, step.get("expect-error")) {
            (Ok(()), None) => {}
            (Err(e), None) => return Err(serr(e)),
            (result, Some(wanted)) => {
                let actual = match result {
                    Ok(()) => "no error".to_string(),
                    Err(e) => e,
                };
                r.outcomes.push(ExpectOutcome {
                    step: n,
                    check: "error".into(),
                    expected: wanted.to_string(),
                    passed: actual != "no error" && actual.contains(wanted),
                    actual,
                });
            }
        }
    }
    let end = script.header.start + Duration::minutes(script.steps.len() as i64 + 1);
    r.finish(end).map_err(|message| ScenarioError::Step {
        step: script.steps.len(),
        line: 0,
        message,
    })
}

fn ws_err(e: WorkspaceError) -> String {
    e.to_string()
}

impl Runner {
    fn prov(&self, step: &Step, at: Timestamp) -> Result<Provenance, String> {
        let author = step.get("author").unwrap_or(&self.header.author);
        Provenance::new(author, at).map_err(|e| e.to_string())
    }

    fn stage_pbis(&self, stage: Stage) -> Vec<String> {
        self.ws
            .project
            .board
            .pbis()
            .filter(|p| p.stage == stage)
            .map(|p| p.pbi_id.clone())
            .collect()
    }

    fn step_stage(&self, step: &Step) -> Result<Stage, String> {
        step.get("stage").map_or(Ok(self.stage), str::parse)
    }

    fn resolve_artifact(&self, token: &str) -> Result<String, String> {
        if let Some(id) = self.aliases.get(token) {
            return Ok(id.clone());
        }
        if self.ws.project.index.contains(token) {
            return Ok(token.to_string());
        }
        match self.ws.project.index.latest_for_path(token, None) {
            Some(r) if self.ws.project.index.is_current(&r.artifact_id) => {
                Ok(r.artifact_id.clone())
            }
            _ => Err(format!("`{token}` names no artifact")),
        }
    }

    fn resolve_requirement(&self, token: &str) -> Option<StoreId> {
        let store = &self.ws.project.store;
        store.by_local_key(token).map(|r| r.store_id).or_else(|| {
            token
                .parse::<StoreId>()
                .ok()
                .filter(|id| store.get(id).is_some())
        })
    }

    fn resolve_subject(&self, token: &str) -> Result<String, String> {
        match self.resolve_requirement(token) {
            Some(id) => Ok(id.to_string()),
            None => self.resolve_artifact(token),
        }
    }

    fn evidence(&self, v: &str) -> Result<Vec<String>, String> {
        list(v).iter().map(|t| self.resolve_artifact(t)).collect()
    }

    fn ingest(
        &mut self,
        event: &PullRequestEvent,
        fail_at: Option<PipelineStep>,
    ) -> Result<(), String> {
        let result = handle_pull_request(&mut self.ws, event, &IngestOptions { fail_at })
            .map_err(|e| e.to_string())?;
        self.last_ingest = Some(result);
        Ok(())
    }

    fn apply(&mut self, step: &Step, at: Timestamp) -> Result<(), String> {
        let g = |k: &str| step.get(k).unwrap_or_default().to_string();
        match step.kind {
            StepKind::Seed => {
                let path = g("path");
                let change = if self.committed.contains(&path) {
                    ChangeType::Modified
                } else {
                    ChangeType::Added
                };
                self.tree.insert(path.clone(), g("content").into_bytes());
                self.pending.insert(path, change);
            }
            StepKind::Delete => {
                let path = g("path");
                if self.tree.remove(&path).is_none() {
                    return Err(format!("`{path}` is not in the working tree"));
                }
                if self.committed.contains(&path) {
                    self.pending.insert(path, ChangeType::Deleted);
                } else {
                    self.pending.remove(&path);
                }
            }
            StepKind::PullRequest => {
                let commit = g("commit");
                self.ws
                    .vcs
                    .write_commit(&self.header.repo, &commit, &self.tree)
                    .map_err(|e| e.to_string())?;
                let changed_files = std::mem::take(&mut self.pending)
                    .into_iter()
                    .map(|(path, change_type)| ChangedFile {
                        path,
                        change_type,
                        blob_hash: None,
                    })
                    .collect();
                self.committed = self.tree.keys().cloned().collect();
                let event = PullRequestEvent {
                    repo: self.header.repo.clone(),
                    source_branch: g("branch"),
                    target_branch: step.get("target").unwrap_or("main").to_string(),
                    commit_id: commit,
                    author: step
                        .get("author")
                        .unwrap_or(&self.header.author)
                        .to_string(),
                    timestamp: at,
                    changed_files,
                    linked_ticket_ids: step.get("tickets").map(list).unwrap_or_default(),
                    title: step.get("title").map(str::to_string),
                    delivery_id: step.get("delivery").map(str::to_string),
                };
                self.last_event = Some(event.clone());
                let fail_at = step.get("fail-at").map(parse_step).transpose()?;
                self.ingest(&event, fail_at)?;
            }
            StepKind::Resend => {
                let event = self.last_event.clone().ok_or("no pull request to resend")?;
                self.ingest(&event, None)?;
            }
            StepKind::Ticket => {
                self.ws.wmt.insert(&g("id"), list(&g("pbis")));
                self.ws
                    .wmt
                    .save(&self.ws.config.wmt_table)
                    .map_err(|e| e.to_string())?;
            }
            StepKind::Pbi => {
                let prov = self.prov(step, at)?;
                let stage: Stage = g("stage").parse()?;
                let reqs = step
                    .get("requirements")
                    .map(list)
                    .unwrap_or_default()
                    .iter()
                    .map(|k| {
                        self.resolve_requirement(k)
                            .ok_or_else(|| format!("unknown requirement `{k}`"))
                    })
                    .collect::<Result<Vec<_>, _>>()?;
                let release = step
                    .get("release")
                    .unwrap_or(&self.header.release)
                    .to_string();
                let sprint = step.get("sprint").unwrap_or("S1").to_string();
                self.ws
                    .project
                    .create_pbi(&g("id"), &g("title"), stage, &release, &sprint, reqs, &prov)
                    .map_err(|e| e.to_string())?;
                self.stage = stage;
            }
            StepKind::Complete => {
                let prov = self.prov(step, at)?;
                let pbi = g("pbi");
                for (k, v) in &step.fields {
                    let Ok(task) = k.parse::<TaskId>() else {
                        continue;
                    };
                    let evidence = self.evidence(v)?;
                    self.ws
                        .project
                        .advance(&pbi, task, TaskState::InProgress, vec![], &prov)
                        .map_err(ws_err)?;
                    self.ws
                        .project
                        .advance(&pbi, task, TaskState::Done, evidence, &prov)
                        .map_err(ws_err)?;
                }
            }
            StepKind::Advance => {
                let prov = self.prov(step, at)?;
                let evidence = step
                    .get("evidence")
                    .map(|v| self.evidence(v))
                    .transpose()?
                    .unwrap_or_default();
                self.ws
                    .project
                    .advance(
                        &g("pbi"),
                        g("task").parse()?,
                        g("state").parse()?,
                        evidence,
                        &prov,
                    )
                    .map_err(ws_err)?;
            }
            StepKind::Review => {
                let prov = self.prov(step, at)?;
                let kind: ReviewKind = g("kind").parse()?;
                let subjects = list(&g("subjects"))
                    .iter()
                    .map(|s| self.resolve_subject(s))
                    .collect::<Result<Vec<_>, _>>()?;
                let mut answers = ReviewAnswers::all(
                    step.get("result")
                        .map_or(Ok(ItemResult::Pass), str::parse)?,
                );
                for (key, result) in [
                    ("fail", ItemResult::Fail),
                    ("unanswered", ItemResult::Unanswered),
                ] {
                    for item in step.get(key).map(list).unwrap_or_default() {
                        let n: usize = item
                            .parse()
                            .map_err(|_| format!("`{key}` takes item numbers"))?;
                        answers.overrides.push((
                            n.saturating_sub(1),
                            result,
                            format!("scripted {key}"),
                        ));
                    }
                }
                let stage = self.step_stage(step)?;
                let pbis = self.stage_pbis(stage);
                let (_, id) = self
                    .ws
                    .record_review(kind, &subjects, &answers, stage, pbis, &prov)
                    .map_err(ws_err)?;
                if let Some(alias) = step.get("as") {
                    self.aliases.insert(alias.to_string(), id);
                }
            }
            StepKind::Srd => {
                let prov = self.prov(step, at)?;
                let stage = self.step_stage(step)?;
                let pbis = self.stage_pbis(stage);
                let (_, id) = self.ws.generate_srd(stage, pbis, &prov).map_err(ws_err)?;
                self.aliases.insert("srd".into(), id);
            }
            StepKind::Matrix => {
                let prov = self.prov(step, at)?;
                let stage = self.step_stage(step)?;
                let pbis = self.stage_pbis(stage);
                let (_, id) = self.ws.publish_matrix(stage, pbis, &prov).map_err(ws_err)?;
                self.aliases.insert("matrix".into(), id);
            }
            StepKind::Package => {
                let prov = self.prov(step, at)?;
                let (pkg, id) = self
                    .ws
                    .assemble_package(g("stage").parse()?, &prov)
                    .map_err(ws_err)?;
                self.aliases.insert("package".into(), id.clone());
                self.aliases
                    .insert(format!("package:{}", pkg.package_version), id);
            }
            StepKind::Sci => {
                let prov = self.prov(step, at)?;
                let out = self.dir.join("out");
                let (report, id) = self
                    .ws
                    .generate_sci(&list(&g("tickets")), &out, &prov)
                    .map_err(ws_err)?;
                self.sci_files = Some(self.ws.verify_folder(&report.folder).map_err(ws_err)?);
                self.aliases.insert("sci".into(), id);
            }
            StepKind::Validate => {
                let prov = self.prov(step, at)?;
                let (findings, _) = self.ws.validate(&prov).map_err(ws_err)?;
                self.findings = Some(findings);
            }
            StepKind::Expect => unreachable!("handled by the caller"),
        }
        Ok(())
    }

    fn expect(&mut self, n: usize, step: &Step, at: Timestamp) -> Result<(), String> {
        for (check, expected) in &step.fields {
            let (actual, passed) = self.evaluate(check, expected, at)?;
            self.outcomes.push(ExpectOutcome {
                step: n,
                check: check.clone(),
                expected: expected.clone(),
                passed: passed.unwrap_or(actual == *expected),
                actual,
            });
        }
        Ok(())
    }

    /// The observed value, and a verdict when plain equality is not the rule.
    fn evaluate(
        &mut self,
        check: &str,
        expected: &str,
        at: Timestamp,
    ) -> Result<(String, Option<bool>), String> {
        let p = &mut self.ws.project;
        let none = || "none".to_string();
        let last = self.last_ingest.as_ref();
        let count_imported = |a: ImportAction| {
            last.map_or_else(none, |r| {
                r.imported
                    .iter()
                    .filter(|(_, x)| *x == a)
                    .count()
                    .to_string()
            })
        };
        let value = match check {
            "requirements" => {
                p.note("query");
                p.store
                    .query(&RequirementFilter::default())
                    .len()
                    .to_string()
            }
            "imported-created" => count_imported(ImportAction::Created),
            "imported-updated" => count_imported(ImportAction::Updated),
            "last-anomalies" => last.map_or_else(none, |r| {
                let kinds: Vec<&str> = r.anomalies.iter().map(|a| a.kind.as_str()).collect();
                if kinds.is_empty() {
                    none()
                } else {
                    kinds.join(",")
                }
            }),
            "open-anomalies" => p.open_anomalies().len().to_string(),
            "anomaly" => {
                let kinds: BTreeSet<&str> = p
                    .anomalies
                    .open()
                    .into_iter()
                    .map(|a| a.kind.as_str())
                    .collect();
                let present = kinds.contains(expected);
                let shown = kinds.into_iter().collect::<Vec<_>>().join(",");
                return Ok((if shown.is_empty() { none() } else { shown }, Some(present)));
            }
            "completeness-findings" => p
                .completeness(at)
                .map_err(|e| e.to_string())?
                .len()
                .to_string(),
            "hardening-findings" => self
                .findings
                .as_ref()
                .map_or_else(none, |f| f.len().to_string()),
            "hardening-finding" => {
                let Some(f) = &self.findings else {
                    return Ok((none(), Some(false)));
                };
                let shown: Vec<String> = f.iter().map(|x| x.to_string()).collect();
                let hit = shown.iter().any(|s| s.contains(expected));
                return Ok((shown.join(" | "), Some(hit)));
            }
            "package-kind" => p.latest_package().map_or_else(none, |x| x.kind.to_string()),
            "package-version" => p
                .latest_package()
                .map_or_else(none, |x| x.package_version.to_string()),
            "packages" => p.packages.len().to_string(),
            "design-artifacts" => p
                .index
                .records()
                .filter(|r| {
                    r.kind == ArtifactKind::GeneratedDoc
                        && r.path.starts_with("docs/generated/design-")
                })
                .count()
                .to_string(),
            "monotonic" => p
                .packages
                .windows(2)
                .all(|w| verify_monotonic(&w[0], &w[1]).is_empty())
                .to_string(),
            "sci-files" => self.sci_files.map_or_else(none, |n| n.to_string()),
            "links" => p.links.len().to_string(),
            "duplicate" => last.map_or_else(none, |r| r.duplicate.to_string()),
            "processed-events" => p.ingest_log.len().to_string(),
            other => {
                if let Some(kind) = other.strip_prefix("requirements.") {
                    p.note("query");
                    let kind: RequirementKind = kind.parse()?;
                    p.store
                        .query(&RequirementFilter::kind(kind))
                        .len()
                        .to_string()
                } else if let Some(key) = other.strip_prefix("status.") {
                    let id = self
                        .resolve_requirement(key)
                        .ok_or_else(|| format!("unknown requirement `{key}`"))?;
                    self.ws
                        .project
                        .store
                        .get(&id)
                        .map(|r| r.status.as_str().to_string())
                        .unwrap_or_else(none)
                } else if let Some(pbi) = other.strip_prefix("stage-complete.") {
                    p.note("stage_complete");
                    p.board
                        .get(pbi)
                        .map(stage_complete)
                        .ok_or_else(|| format!("unknown PBI `{pbi}`"))?
                        .to_string()
                } else {
                    return Err(format!("unknown check `{other}`"));
                }
            }
        };
        Ok((value, None))
    }

    fn finish(mut self, at: Timestamp) -> Result<ScenarioReport, String> {
        self.ws.save().map_err(ws_err)?;
        let matrix = self.ws.project.matrix(at).map_err(|e| e.to_string())?;
        let mut documents = BTreeMap::new();
        if let Some(head) = self
            .ws
            .vcs
            .branch_head(&self.ws.config.repo, &self.ws.config.docs_branch)
            .map_err(|e| e.to_string())?
        {
            for (path, bytes) in self
                .ws
                .vcs
                .tree(&self.ws.config.repo, &head)
                .map_err(|e| e.to_string())?
            {
                documents.insert(path, sha256_hex(&bytes));
            }
        }
        let p = &self.ws.project;
        let monotonic_violations = p
            .packages
            .windows(2)
            .flat_map(|w| verify_monotonic(&w[0], &w[1]))
            .collect();
        Ok(ScenarioReport {
            name: self.header.name.clone(),
            outcomes: self.outcomes,
            store_digest: p.store.content_digest(),
            store_text: p.store.to_canonical(),
            matrix_csv: render_matrix_csv(&matrix),
            documents,
            manifests: p.packages.iter().map(|x| x.manifest_text()).collect(),
            monotonic_violations,
            package_version: p.latest_package().map(|x| x.package_version),
            package_kind: p.latest_package().map(|x| x.kind),
            findings: self.findings,
            sci_files: self.sci_files,
            ops_invoked: p.ops_invoked().iter().map(|s| s.to_string()).collect(),
            workspace: self.dir,
        })
    }
}

/// Requirement counts per kind for [`generate_fixture`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct FixtureProfile {
    pub system: usize,
    pub hlr: usize,
    pub llr: usize,
}

impl FixtureProfile {
    pub fn new(system: usize, hlr: usize, llr: usize) -> Self {
        FixtureProfile { system, hlr, llr }
    }

    pub fn total(&self) -> usize {
        self.system + self.hlr + self.llr.max(self.hlr)
    }
}

const SUBJECTS: [&str; 8] = [
    "autopilot",
    "fuel monitor",
    "nav filter",
    "radio tuner",
    "flap actuator",
    "air data unit",
    "display",
    "datalink",
];
const VERBS: [&str; 8] = [
    "report", "limit", "filter", "compute", "hold", "monitor", "publish", "validate",
];
const OBJECTS: [&str; 8] = [
    "target altitude",
    "fuel flow",
    "ground speed",
    "selected frequency",
    "flap position",
    "static pressure",
    "cabin alert",
    "uplink message",
];

struct GenReq {
    key: String,
    kind: RequirementKind,
    title: String,
    text: String,
    parent: Option<String>,
}

fn tag_lines(r: &GenReq, prefix: &str) -> String {
    let mut out = format!(
        "{prefix}@req{{{}}}\n{prefix}@kind{{{}}}\n{prefix}@title{{{}}}\n",
        r.key, r.kind, r.title
    );
    if let Some(p) = &r.parent {
        out.push_str(&format!("{prefix}@parent{{{p}}}\n"));
    }
    out.push_str(&format!("{prefix}@text{{{}}}\n", r.text));
    out
}

fn stage_slug(stage: Stage) -> &'static str {
    match stage {
        Stage::Specification => "specification",
        Stage::SwImplementation => "implementation",
        Stage::SwTesting => "testing",
        Stage::HsiSystemTesting => "hsi",
    }
}

/// A deterministic, complete four-stage project. The LLR count is raised to
/// the HLR count so every HLR has a refining LLR; an all-zero profile gives
/// a script with no requirement steps.
pub fn generate_fixture(profile: FixtureProfile, seed: u64) -> ScenarioScript {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let header = ScenarioHeader {
        name: format!(
            "generated-{}-{}-{}-seed{seed}",
            profile.system, profile.hlr, profile.llr
        ),
        repo: "gen".into(),
        author: "gen-bot".into(),
        start: parse_ts("2025-01-06T08:00:00Z").expect("fixed start"),
        release: "1.0.0".into(),
        config: vec![(
            "requirement_globs".into(),
            "src/**/*.c, docs/spec/*.req".into(),
        )],
    };
    let mut steps = Vec::new();
    if profile.total() == 0 {
        steps.push(Step::new(StepKind::Expect, &[("requirements", "0")]));
        return ScenarioScript { header, steps };
    }
    let (s, h) = (profile.system, profile.hlr);
    let l = profile.llr.max(h);
    let mut make = |kind: RequirementKind, i: usize, parent: Option<String>| {
        let subject = SUBJECTS.choose(&mut rng).expect("non-empty");
        let verb = VERBS.choose(&mut rng).expect("non-empty");
        let object = OBJECTS.choose(&mut rng).expect("non-empty");
        let ms: u32 = rng.gen_range(5..500);
        GenReq {
            key: format!("GEN-{}-{:03}", kind.id_prefix(), i + 1),
            kind,
            title: format!("{} {verb}s {object}", capitalize(subject)),
            text: format!("The {subject} shall {verb} the {object} within {ms} ms."),
            parent,
        }
    };
    let sys: Vec<GenReq> = (0..s)
        .map(|i| make(RequirementKind::System, i, None))
        .collect();
    let hlr: Vec<GenReq> = (0..h)
        .map(|i| {
            make(
                RequirementKind::Hlr,
                i,
                (s > 0).then(|| sys[i % s].key.clone()),
            )
        })
        .collect();
    let llr: Vec<GenReq> = (0..l)
        .map(|i| {
            make(
                RequirementKind::Llr,
                i,
                (h > 0).then(|| hlr[i % h].key.clone()),
            )
        })
        .collect();

    // The first stage imports the highest non-empty level.
    let first = if s > 0 {
        RequirementKind::System
    } else if h > 0 {
        RequirementKind::Hlr
    } else {
        RequirementKind::Llr
    };
    let mut imported: Vec<String> = Vec::new();

    let seed_step = |path: String, content: String| {
        Step::new(
            StepKind::Seed,
            &[("path", path.as_str()), ("content", content.as_str())],
        )
    };
    let sys_file = || {
        sys.iter()
            .map(|r| tag_lines(r, ""))
            .collect::<Vec<_>>()
            .join("\n")
    };
    let hlr_file = || {
        hlr.iter()
            .map(|r| tag_lines(r, ""))
            .collect::<Vec<_>>()
            .join("\n")
    };
    let llr_files = || -> Vec<(String, String)> {
        llr.iter()
            .enumerate()
            .map(|(i, r)| {
                let body = format!(
                    "/*\n{}*/\n/* @implements{{{}}} */\nint unit_{:03}(int x)\n{{\n    return x + {};\n}}\n",
                    tag_lines(r, " * "),
                    r.key,
                    i + 1,
                    i + 1
                );
                (format!("src/gen/unit_{:03}.c", i + 1), body)
            })
            .collect()
    };

    for (n, stage) in Stage::ALL.into_iter().enumerate() {
        let slug = stage_slug(stage);
        let ticket = format!("GEN-{}", n + 1);
        let pbi = format!("PBI-{}", n + 1);
        let notes = format!("docs/notes/{slug}.md");
        steps.push(Step::new(
            StepKind::Ticket,
            &[("id", &ticket), ("pbis", &pbi)],
        ));
        let reqs = imported.join(", ");
        let mut fields = vec![
            ("id", pbi.as_str()),
            ("title", slug),
            ("stage", stage.as_str()),
            ("sprint", ["S1", "S2", "S3", "S4"][n]),
        ];
        if !reqs.is_empty() {
            fields.push(("requirements", reqs.as_str()));
        }
        steps.push(Step::new(StepKind::Pbi, &fields));
        steps.push(seed_step(
            notes.clone(),
            format!("# {slug} notes\n\nWork log for {pbi}.\n"),
        ));

        // Files for this stage, and the keys they import.
        let mut stage_keys: Vec<String> = Vec::new();
        let add_kind =
            |kind: RequirementKind, steps: &mut Vec<Step>, keys: &mut Vec<String>| match kind {
                RequirementKind::System => {
                    steps.push(seed_step("docs/spec/system.req".into(), sys_file()));
                    keys.extend(sys.iter().map(|r| r.key.clone()));
                }
                RequirementKind::Hlr => {
                    steps.push(seed_step("docs/spec/software.req".into(), hlr_file()));
                    keys.extend(hlr.iter().map(|r| r.key.clone()));
                }
                RequirementKind::Llr => {
                    for (path, body) in llr_files() {
                        steps.push(seed_step(path, body));
                    }
                    keys.extend(llr.iter().map(|r| r.key.clone()));
                }
            };
        match stage {
            Stage::Specification => add_kind(first, &mut steps, &mut stage_keys),
            Stage::SwImplementation => {
                for kind in [RequirementKind::Hlr, RequirementKind::Llr] {
                    let count = if kind == RequirementKind::Hlr { h } else { l };
                    if kind > first && count > 0 {
                        add_kind(kind, &mut steps, &mut stage_keys);
                    }
                }
            }
            Stage::SwTesting => {
                let mut unit_tests = Vec::new();
                for (i, r) in llr.iter().enumerate() {
                    let path = format!("tests/unit/test_unit_{:03}.c", i + 1);
                    steps.push(seed_step(
                        path.clone(),
                        format!(
                            "/* @verifies{{{}}} */\nvoid test_unit_{:03}(void) {{}}\n",
                            r.key,
                            i + 1
                        ),
                    ));
                    unit_tests.push(path);
                }
                let mut integration = Vec::new();
                for (i, r) in hlr.iter().enumerate() {
                    let path = format!("tests/integration/test_hlr_{:03}.c", i + 1);
                    steps.push(seed_step(
                        path.clone(),
                        format!(
                            "/* @verifies{{{}}} */\nvoid test_hlr_{:03}(void) {{}}\n",
                            r.key,
                            i + 1
                        ),
                    ));
                    integration.push(path);
                }
                for (name, tests) in [("unit", &unit_tests), ("integration", &integration)] {
                    if !tests.is_empty() {
                        steps.push(seed_step(
                            format!("tests/reports/{name}-test-report.txt"),
                            format!(
                                "{name} tests: all passed\n@reports{{{}}}\n",
                                tests.join(", ")
                            ),
                        ));
                    }
                }
            }
            Stage::HsiSystemTesting => {
                let mut system = Vec::new();
                for (i, r) in sys.iter().enumerate() {
                    let path = format!("tests/system/test_sys_{:03}.c", i + 1);
                    steps.push(seed_step(
                        path.clone(),
                        format!(
                            "/* @verifies{{{}}} */\nvoid test_sys_{:03}(void) {{}}\n",
                            r.key,
                            i + 1
                        ),
                    ));
                    system.push(path);
                }
                if !system.is_empty() {
                    steps.push(seed_step(
                        "tests/reports/system-test-report.txt".into(),
                        format!(
                            "system tests: all passed\n@reports{{{}}}\n",
                            system.join(", ")
                        ),
                    ));
                }
            }
        }
        steps.push(Step::new(
            StepKind::PullRequest,
            &[
                ("commit", &format!("g{}01", n + 1)),
                ("branch", &format!("feature/{ticket}-{slug}")),
            ],
        ));

        // Reviews: new requirements go to the stage's requirement review,
        // everything else reviews the stage notes.
        let mut aliases: BTreeMap<TaskId, String> = BTreeMap::new();
        for task in required_tasks(stage)
            .iter()
            .filter(|t| t.is_review() && !is_package_review(**t))
        {
            let kind = review_kind(*task);
            let alias = format!("r{}-{}", n + 1, task.as_str().to_ascii_lowercase());
            let requirement_review = matches!(
                task,
                TaskId::SystemSpecificationReview | TaskId::SoftwareSpecificationReview
            );
            let subjects = if requirement_review && !stage_keys.is_empty() {
                stage_keys.join(", ")
            } else {
                notes.clone()
            };
            steps.push(Step::new(
                StepKind::Review,
                &[
                    ("kind", kind.as_str()),
                    ("subjects", &subjects),
                    ("as", &alias),
                ],
            ));
            aliases.insert(*task, alias);
        }
        imported.extend(stage_keys);
        if stage == Stage::HsiSystemTesting {
            steps.push(Step::new(StepKind::Srd, &[]));
            steps.push(Step::new(StepKind::Matrix, &[]));
        }
        let work: Vec<(String, String)> = required_tasks(stage)
            .iter()
            .filter(|t| **t != TaskId::DefinePBIs && !t.is_packaging() && !is_package_review(**t))
            .filter(|t| **t != TaskId::ValidateSCICertifiableRelease)
            .map(|t| {
                (
                    t.as_str().to_string(),
                    aliases.get(t).cloned().unwrap_or_else(|| notes.clone()),
                )
            })
            .collect();
        let mut complete = vec![("pbi".to_string(), pbi.clone())];
        complete.extend(work);
        steps.push(Step {
            kind: StepKind::Complete,
            fields: complete,
            line: 0,
        });
        steps.push(Step::new(StepKind::Package, &[("stage", stage.as_str())]));
        let (pack_task, review_task) = if stage == Stage::HsiSystemTesting {
            (
                TaskId::PackageCertifiableRelease,
                TaskId::ReviewCertifiableRelease,
            )
        } else {
            (
                TaskId::GenerateIncrementalPackage,
                TaskId::ReviewIncrementalPackage,
            )
        };
        let pkg_alias = format!("r{}-package", n + 1);
        steps.push(Step::new(
            StepKind::Complete,
            &[("pbi", &pbi), (pack_task.as_str(), "package")],
        ));
        steps.push(Step::new(
            StepKind::Review,
            &[
                ("kind", ReviewKind::IncrementalPackage.as_str()),
                ("subjects", "package"),
                ("as", &pkg_alias),
            ],
        ));
        steps.push(Step::new(
            StepKind::Complete,
            &[("pbi", &pbi), (review_task.as_str(), &pkg_alias)],
        ));
    }
    steps.push(Step::new(
        StepKind::Sci,
        &[("tickets", "GEN-1, GEN-2, GEN-3, GEN-4")],
    ));
    steps.push(Step::new(StepKind::Validate, &[]));
    steps.push(Step::new(
        StepKind::Complete,
        &[("pbi", "PBI-4"), ("ValidateSCICertifiableRelease", "sci")],
    ));
    let total = (s + h + l).to_string();
    steps.push(Step::new(
        StepKind::Expect,
        &[
            ("requirements", total.as_str()),
            ("completeness-findings", "0"),
            ("hardening-findings", "0"),
            ("package-kind", "CERTIFIABLE_RELEASE"),
            ("packages", "4"),
            ("monotonic", "true"),
            ("stage-complete.PBI-4", "true"),
        ],
    ));
    ScenarioScript { header, steps }
}

fn capitalize(s: &str) -> String {
    let mut c = s.chars();
    c.next()
        .map(|f| f.to_uppercase().collect::<String>() + c.as_str())
        .unwrap_or_default()
}

fn is_package_review(t: TaskId) -> bool {
    matches!(
        t,
        TaskId::ReviewIncrementalPackage | TaskId::ReviewCertifiableRelease
    )
}

/// The checklist kind used to evidence a review task.
pub fn review_kind(task: TaskId) -> ReviewKind {
    match task {
        TaskId::SystemSpecificationReview => ReviewKind::SystemSpec,
        TaskId::SystemDesignReview => ReviewKind::SystemDesign,
        TaskId::SoftwareSpecificationReview => ReviewKind::SwSpec,
        TaskId::SoftwareDesignReview => ReviewKind::SwDesign,
        TaskId::CodeReview => ReviewKind::Code,
        TaskId::UnitTestReview => ReviewKind::UnitTest,
        TaskId::IntegrationTestReview => ReviewKind::IntegrationTest,
        TaskId::HSITestReview => ReviewKind::HsiTest,
        TaskId::SystemTestReview => ReviewKind::SystemTest,
        _ => ReviewKind::IncrementalPackage,
    }
}
