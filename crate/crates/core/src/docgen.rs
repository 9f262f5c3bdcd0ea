//! Deterministic template rendering for the SRD, design artifacts, the SCI
//! and review checklists.
//!
//! Placeholders are `{{query}}` with three query forms: `req.<id>.<field>`,
//! `req.list(kind=..,status=..)`, `matrix.csv` and `meta.<key>`. Queries
//! are validated when the template is loaded.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;
use std::sync::LazyLock;

use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::canonical::{format_ts, parse_ts, sha256_hex, ts_opt, Provenance, Timestamp};
use crate::req_store::{
    RequirementFilter, RequirementRecord, RequirementStatus, RequirementStore, StoreId,
};
use crate::tag_parser::RequirementKind;
use crate::trace::{render_matrix_csv, render_review, TraceabilityMatrix};

pub const SRD_TEMPLATE: &str = include_str!("../templates/srd.md");
pub const DESIGN_TEMPLATE: &str = include_str!("../templates/design.md");
pub const SCI_TEMPLATE: &str = include_str!("../templates/sci.md");
pub const CHECKLIST_CATALOG: &str = include_str!("../templates/checklists.txt");

const MANUAL: &str = "_Manual authoring required._";

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum DocError {
    #[error("bad placeholder at byte {position}: {reason}")]
    BadPlaceholder { position: usize, reason: String },
    #[error("unresolved placeholders: {}", .0.join(", "))]
    UnresolvedPlaceholder(Vec<String>),
    #[error("the store holds no SYSTEM or HLR requirements")]
    EmptyStore,
    #[error("no requirements to document")]
    EmptyInput,
    #[error("unknown checklist subject `{0}`")]
    UnknownSubject(String),
    #[error("a checklist needs at least one subject")]
    NoSubjects,
    #[error("checklist catalog line {line}: {reason}")]
    Catalog { line: usize, reason: String },
    #[error("checklist item {0} does not exist")]
    NoSuchItem(usize),
    #[error("checklist markup line {line}: {reason}")]
    ChecklistFormat { line: usize, reason: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ReqField {
    Title,
    Text,
    Kind,
    Status,
    Revision,
    Parents,
    LocalKey,
    Author,
    Source,
}

impl ReqField {
    const NAMES: [(&'static str, ReqField); 9] = [
        ("title", ReqField::Title),
        ("text", ReqField::Text),
        ("kind", ReqField::Kind),
        ("status", ReqField::Status),
        ("revision", ReqField::Revision),
        ("parents", ReqField::Parents),
        ("local_key", ReqField::LocalKey),
        ("author", ReqField::Author),
        ("source", ReqField::Source),
    ];

    fn extract(self, r: &RequirementRecord) -> String {
        match self {
            ReqField::Title => r.title.clone(),
            ReqField::Text => r.text.clone(),
            ReqField::Kind => r.kind.to_string(),
            ReqField::Status => r.status.to_string(),
            ReqField::Revision => r.revision.to_string(),
            ReqField::Parents => join_ids(&r.parent_ids),
            ReqField::LocalKey => r.local_key.clone(),
            ReqField::Author => r.author.clone(),
            ReqField::Source => format!("{}:{}", r.source_path, r.line_span),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum Query {
    ReqField {
        id: StoreId,
        field: ReqField,
    },
    ReqList {
        kind: Option<RequirementKind>,
        status: Option<RequirementStatus>,
    },
    MatrixCsv,
    Meta(String),
}

impl Query {
    pub fn parse(raw: &str) -> Result<Query, String> {
        static REQ_FIELD: LazyLock<Regex> =
            LazyLock::new(|| Regex::new(r"^req\.([A-Z]+-[0-9]+)\.([a-z_]+)$").unwrap());
        static REQ_LIST: LazyLock<Regex> =
            LazyLock::new(|| Regex::new(r"^req\.list\((.*)\)$").unwrap());
        static META: LazyLock<Regex> =
            LazyLock::new(|| Regex::new(r"^meta\.([a-z][a-z0-9_]*)$").unwrap());

        let q = raw.trim();
        if q == "matrix.csv" {
            return Ok(Query::MatrixCsv);
        }
        if let Some(c) = META.captures(q) {
            return Ok(Query::Meta(c[1].to_string()));
        }
        if let Some(c) = REQ_LIST.captures(q) {
            let (mut kind, mut status) = (None, None);
            for arg in c[1].split(',').map(str::trim).filter(|a| !a.is_empty()) {
                let (k, v) = arg
                    .split_once('=')
                    .ok_or_else(|| format!("list argument `{arg}` is not key=value"))?;
                match k.trim() {
                    "kind" if kind.is_none() => kind = Some(v.trim().parse::<RequirementKind>()?),
                    "status" if status.is_none() => {
                        status = Some(v.trim().parse::<RequirementStatus>()?)
                    }
                    other => {
                        return Err(format!("unsupported or repeated list argument `{other}`"))
                    }
                }
            }
            return Ok(Query::ReqList { kind, status });
        }
        if let Some(c) = REQ_FIELD.captures(q) {
            let id: StoreId = c[1].parse()?;
            let field = ReqField::NAMES
                .iter()
                .find(|(n, _)| *n == &c[2])
                .map(|(_, f)| *f)
                .ok_or_else(|| format!("unknown requirement field `{}`", &c[2]))?;
            return Ok(Query::ReqField { id, field });
        }
        Err(format!("unknown query form `{q}`"))
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
enum Segment {
    Literal(String),
    Placeholder { raw: String, query: Query },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DocumentTemplate {
    pub template_id: String,
    pub body: String,
    segments: Vec<Segment>,
}

impl DocumentTemplate {
    pub fn placeholders(&self) -> impl Iterator<Item = &Query> {
        self.segments.iter().filter_map(|s| match s {
            Segment::Placeholder { query, .. } => Some(query),
            Segment::Literal(_) => None,
        })
    }
}

pub fn load_template(template_id: &str, text: &str) -> Result<DocumentTemplate, DocError> {
    let mut segments = Vec::new();
    let mut rest = text;
    let mut offset = 0;
    while let Some(open) = rest.find("{{") {
        if open > 0 {
            segments.push(Segment::Literal(rest[..open].to_string()));
        }
        let after = &rest[open + 2..];
        let close = after.find("}}").ok_or_else(|| DocError::BadPlaceholder {
            position: offset + open,
            reason: "unterminated placeholder".into(),
        })?;
        let raw = &after[..close];
        if raw.contains("{{") {
            return Err(DocError::BadPlaceholder {
                position: offset + open,
                reason: "nested `{{`".into(),
            });
        }
        let query = Query::parse(raw).map_err(|reason| DocError::BadPlaceholder {
            position: offset + open,
            reason,
        })?;
        segments.push(Segment::Placeholder {
            raw: raw.trim().to_string(),
            query,
        });
        let consumed = open + 2 + close + 2;
        offset += consumed;
        rest = &rest[consumed..];
    }
    if !rest.is_empty() {
        segments.push(Segment::Literal(rest.to_string()));
    }
    Ok(DocumentTemplate {
        template_id: template_id.to_string(),
        body: text.to_string(),
        segments,
    })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RenderedDocument {
    pub document_id: String,
    pub template_id: String,
    pub body: String,
    pub inputs_digest: String,
    #[serde(with = "ts_opt")]
    pub generated_at: Option<Timestamp>,
}

pub type Meta = BTreeMap<String, String>;

fn join_ids(ids: &[StoreId]) -> String {
    if ids.is_empty() {
        "none".into()
    } else {
        ids.iter()
            .map(ToString::to_string)
            .collect::<Vec<_>>()
            .join(", ")
    }
}

fn list_block(records: &[&RequirementRecord]) -> String {
    if records.is_empty() {
        return "_No matching requirements._".into();
    }
    let blocks: Vec<String> = records
        .iter()
        .map(|r| {
            format!(
                "### {}: {}\n\n- Kind: {}\n- Status: {}\n- Revision: {}\n- Parents: {}\n\n{}",
                r.store_id,
                r.title,
                r.kind,
                r.status,
                r.revision,
                join_ids(&r.parent_ids),
                r.text
            )
        })
        .collect();
    blocks.join("\n\n")
}

/// Values never reintroduce a placeholder opener.
fn defuse(mut s: String) -> String {
    while s.contains("{{") {
        s = s.replace("{{", "{ {");
    }
    s
}

fn render_with(
    template: &DocumentTemplate,
    store: Option<&RequirementStore>,
    store_digest: &str,
    matrix: Option<&TraceabilityMatrix>,
    meta: &Meta,
) -> Result<RenderedDocument, DocError> {
    let matrix_csv = matrix.map(render_matrix_csv);
    let mut body = String::new();
    let mut unresolved = BTreeSet::new();
    for seg in &template.segments {
        match seg {
            Segment::Literal(s) => body.push_str(s),
            Segment::Placeholder { raw, query } => {
                let value = match query {
                    Query::Meta(k) => meta.get(k).cloned(),
                    Query::MatrixCsv => matrix_csv.clone(),
                    Query::ReqField { id, field } => {
                        store.and_then(|s| s.get(id)).map(|r| field.extract(r))
                    }
                    Query::ReqList { kind, status } => store.map(|s| {
                        list_block(&s.query(&RequirementFilter {
                            kind: *kind,
                            status: *status,
                            ..Default::default()
                        }))
                    }),
                };
                match value {
                    Some(v) => body.push_str(&v),
                    None => {
                        unresolved.insert(raw.clone());
                    }
                }
            }
        }
    }
    if !unresolved.is_empty() {
        return Err(DocError::UnresolvedPlaceholder(
            unresolved.into_iter().collect(),
        ));
    }
    let body = defuse(body);
    let matrix_digest = matrix_csv
        .as_deref()
        .map(sha256_hex)
        .unwrap_or_else(|| "-".into());
    let inputs = serde_json::json!({
        "template": template.body,
        "store": store_digest,
        "matrix": matrix_digest,
        "meta": meta,
    });
    let inputs_digest = sha256_hex(inputs.to_string());
    Ok(RenderedDocument {
        document_id: format!("{}-{}", template.template_id, &inputs_digest[..12]),
        template_id: template.template_id.clone(),
        body,
        inputs_digest,
        generated_at: meta.get("generated_at").and_then(|t| parse_ts(t).ok()),
    })
}

pub fn render_document(
    template: &DocumentTemplate,
    store: &RequirementStore,
    matrix: Option<&TraceabilityMatrix>,
    meta: &Meta,
) -> Result<RenderedDocument, DocError> {
    render_with(template, Some(store), &store.content_digest(), matrix, meta)
}

/// Renders a template fed only by `meta.*` keys.
pub fn render_meta_only(
    template: &DocumentTemplate,
    meta: &Meta,
) -> Result<RenderedDocument, DocError> {
    render_with(template, None, "-", None, meta)
}

pub fn builtin_srd_template() -> DocumentTemplate {
    load_template("srd", SRD_TEMPLATE).expect("built-in SRD template is valid")
}

pub fn builtin_design_template() -> DocumentTemplate {
    load_template("design", DESIGN_TEMPLATE).expect("built-in design template is valid")
}

pub fn builtin_sci_template() -> DocumentTemplate {
    load_template("sci", SCI_TEMPLATE).expect("built-in SCI template is valid")
}

fn cell(s: &str) -> String {
    s.replace('|', "\\|").replace('\n', " ")
}

/// Pipe table with a header row.
pub fn pipe_table(headers: &[&str], rows: &[Vec<String>]) -> String {
    let mut out = format!(
        "| {} |\n|{}\n",
        headers.join(" | "),
        "---|".repeat(headers.len())
    );
    for r in rows {
        let cells: Vec<String> = r.iter().map(|c| cell(c)).collect();
        out.push_str(&format!("| {} |\n", cells.join(" | ")));
    }
    out.pop();
    out
}

fn srd_body(store: &RequirementStore) -> String {
    let systems = store.query(&RequirementFilter::kind(RequirementKind::System));
    let hlrs = store.query(&RequirementFilter::kind(RequirementKind::Hlr));
    let mut sections = Vec::new();
    let hlr_entry = |number: String, h: &RequirementRecord| {
        let mut s = format!(
            "### {number} {}: {}\n\n- Status: {}\n- Revision: {}\n- Author: {}\n",
            h.store_id, h.title, h.status, h.revision, h.author
        );
        if h.parent_ids.len() > 1 {
            s.push_str(&format!(
                "- Also derives from: {}\n",
                join_ids(&h.parent_ids[1..])
            ));
        }
        s.push('\n');
        s.push_str(&h.text);
        s
    };
    for (i, sys) in systems.iter().enumerate() {
        let mut s = format!(
            "## {} {}: {}\n\n- Status: {}\n- Revision: {}\n\n{}",
            i + 1,
            sys.store_id,
            sys.title,
            sys.status,
            sys.revision,
            sys.text
        );
        let children = hlrs
            .iter()
            .filter(|h| h.parent_ids.first() == Some(&sys.store_id));
        for (j, h) in children.enumerate() {
            s.push_str("\n\n");
            s.push_str(&hlr_entry(format!("{}.{}", i + 1, j + 1), h));
        }
        sections.push(s);
    }
    let unallocated: Vec<_> = hlrs.iter().filter(|h| h.parent_ids.is_empty()).collect();
    if !unallocated.is_empty() {
        let mut s = String::from("## Unallocated high-level requirements");
        for (j, h) in unallocated.iter().enumerate() {
            s.push_str("\n\n");
            s.push_str(&hlr_entry(format!("U.{}", j + 1), h));
        }
        sections.push(s);
    }
    sections.join("\n\n")
}

fn srd_matrix(matrix: Option<&TraceabilityMatrix>) -> String {
    let Some(m) = matrix else {
        return "_Traceability matrix not supplied._".into();
    };
    let rows: Vec<Vec<String>> = m
        .rows
        .iter()
        .filter(|r| r.kind != RequirementKind::Llr)
        .map(|r| {
            vec![
                r.store_id.to_string(),
                r.kind.to_string(),
                r.status.to_string(),
                r.revision.to_string(),
                r.design_artifacts.join("; "),
                r.source_artifacts.join("; "),
                r.tests
                    .iter()
                    .map(|t| t.artifact_id.as_str())
                    .collect::<Vec<_>>()
                    .join("; "),
                r.test_reports().join("; "),
                r.reviews
                    .iter()
                    .map(render_review)
                    .collect::<Vec<_>>()
                    .join("; "),
            ]
        })
        .collect();
    pipe_table(
        &[
            "store_id", "kind", "status", "revision", "design", "source", "tests", "reports",
            "reviews",
        ],
        &rows,
    )
}

pub fn generate_srd(
    store: &RequirementStore,
    matrix: Option<&TraceabilityMatrix>,
    meta: &Meta,
) -> Result<RenderedDocument, DocError> {
    generate_srd_with(&builtin_srd_template(), store, matrix, meta)
}

/// SRD through a project-supplied template using the same `meta` keys.
pub fn generate_srd_with(
    template: &DocumentTemplate,
    store: &RequirementStore,
    matrix: Option<&TraceabilityMatrix>,
    meta: &Meta,
) -> Result<RenderedDocument, DocError> {
    if !store.records().any(|r| r.kind != RequirementKind::Llr) {
        return Err(DocError::EmptyStore);
    }
    let mut m = meta.clone();
    for (k, default) in [
        ("project", "unnamed project"),
        ("release_version", "unversioned"),
        ("generated_at", "unspecified"),
        ("scope", MANUAL),
        ("performance", MANUAL),
        ("interfaces", MANUAL),
        ("constraints", MANUAL),
    ] {
        m.entry(k.to_string())
            .or_insert_with(|| default.to_string());
    }
    m.insert("store_digest".into(), store.content_digest());
    m.insert("srd_body".into(), srd_body(store));
    m.insert("srd_matrix".into(), srd_matrix(matrix));
    render_with(template, Some(store), &store.content_digest(), matrix, &m)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CommitContext {
    pub repo: String,
    pub commit_id: String,
    pub branch: String,
    pub author: String,
    pub at: Timestamp,
}

pub fn generate_design_artifact(
    records: &[RequirementRecord],
    ctx: &CommitContext,
    template: Option<&DocumentTemplate>,
) -> Result<RenderedDocument, DocError> {
    if records.is_empty() {
        return Err(DocError::EmptyInput);
    }
    let mut sorted: Vec<&RequirementRecord> = records.iter().collect();
    sorted.sort_by_key(|r| r.store_id);
    let entries: Vec<String> = sorted
        .iter()
        .map(|r| {
            let table = pipe_table(
                &["Field", "Value"],
                &[
                    vec!["Kind".into(), r.kind.to_string()],
                    vec!["Local key".into(), r.local_key.clone()],
                    vec!["Parents".into(), join_ids(&r.parent_ids)],
                    vec![
                        "Source".into(),
                        format!("{}:{}", r.source_path, r.line_span),
                    ],
                    vec!["Revision".into(), r.revision.to_string()],
                    vec!["Status".into(), r.status.to_string()],
                ],
            );
            format!("## {}: {}\n\n{table}\n\n{}", r.store_id, r.title, r.text)
        })
        .collect();
    let mut meta = Meta::new();
    meta.insert("repo".into(), ctx.repo.clone());
    meta.insert("commit_id".into(), ctx.commit_id.clone());
    meta.insert("branch".into(), ctx.branch.clone());
    meta.insert("author".into(), ctx.author.clone());
    meta.insert("generated_at".into(), format_ts(&ctx.at));
    meta.insert("requirement_count".into(), sorted.len().to_string());
    meta.insert("design_entries".into(), entries.join("\n\n"));
    let records_digest = sha256_hex(serde_json::to_string(&sorted).expect("records serialize"));
    let builtin;
    let template = match template {
        Some(t) => t,
        None => {
            builtin = builtin_design_template();
            &builtin
        }
    };
    render_with(template, None, &records_digest, None, &meta)
}

// ---------------------------------------------------------------------------
// Checklists

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum ReviewKind {
    SystemSpec,
    SystemDesign,
    SwSpec,
    SwDesign,
    Code,
    UnitTest,
    IntegrationTest,
    HsiTest,
    SystemTest,
    IncrementalPackage,
}

impl ReviewKind {
    pub const ALL: [ReviewKind; 10] = [
        ReviewKind::SystemSpec,
        ReviewKind::SystemDesign,
        ReviewKind::SwSpec,
        ReviewKind::SwDesign,
        ReviewKind::Code,
        ReviewKind::UnitTest,
        ReviewKind::IntegrationTest,
        ReviewKind::HsiTest,
        ReviewKind::SystemTest,
        ReviewKind::IncrementalPackage,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            ReviewKind::SystemSpec => "SYSTEM_SPEC",
            ReviewKind::SystemDesign => "SYSTEM_DESIGN",
            ReviewKind::SwSpec => "SW_SPEC",
            ReviewKind::SwDesign => "SW_DESIGN",
            ReviewKind::Code => "CODE",
            ReviewKind::UnitTest => "UNIT_TEST",
            ReviewKind::IntegrationTest => "INTEGRATION_TEST",
            ReviewKind::HsiTest => "HSI_TEST",
            ReviewKind::SystemTest => "SYSTEM_TEST",
            ReviewKind::IncrementalPackage => "INCREMENTAL_PACKAGE",
        }
    }
}

impl fmt::Display for ReviewKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ReviewKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        ReviewKind::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| format!("unknown review kind `{s}`"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ItemResult {
    #[serde(rename = "PASS")]
    Pass,
    #[serde(rename = "FAIL")]
    Fail,
    #[serde(rename = "N/A")]
    NotApplicable,
    #[serde(rename = "UNANSWERED")]
    Unanswered,
}

impl ItemResult {
    pub fn as_str(self) -> &'static str {
        match self {
            ItemResult::Pass => "PASS",
            ItemResult::Fail => "FAIL",
            ItemResult::NotApplicable => "N/A",
            ItemResult::Unanswered => "UNANSWERED",
        }
    }
}

impl FromStr for ItemResult {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "PASS" => Ok(ItemResult::Pass),
            "FAIL" => Ok(ItemResult::Fail),
            "N/A" => Ok(ItemResult::NotApplicable),
            "UNANSWERED" => Ok(ItemResult::Unanswered),
            other => Err(format!("unknown item result `{other}`")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChecklistItem {
    pub text: String,
    pub result: ItemResult,
    pub comment: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Checklist {
    pub checklist_id: String,
    pub review_kind: ReviewKind,
    pub items: Vec<ChecklistItem>,
    pub subjects: Vec<String>,
    pub reviewer: Option<String>,
    #[serde(with = "ts_opt")]
    pub completed_at: Option<Timestamp>,
}

impl Checklist {
    pub fn is_complete(&self) -> bool {
        self.items
            .iter()
            .all(|i| i.result != ItemResult::Unanswered)
    }

    /// Complete with no failed item: usable as review evidence.
    pub fn is_acceptable(&self) -> bool {
        self.is_complete() && self.items.iter().all(|i| i.result != ItemResult::Fail)
    }

    pub fn answer(
        &mut self,
        item: usize,
        result: ItemResult,
        comment: &str,
    ) -> Result<(), DocError> {
        let slot = self.items.get_mut(item).ok_or(DocError::NoSuchItem(item))?;
        slot.result = result;
        slot.comment = comment.replace('\n', " ");
        Ok(())
    }

    pub fn answer_all(&mut self, result: ItemResult) {
        for i in &mut self.items {
            i.result = result;
        }
    }

    pub fn sign(&mut self, prov: &Provenance) {
        self.reviewer = Some(prov.author.clone());
        self.completed_at = Some(prov.at);
    }

    pub fn render(&self) -> String {
        let mut out = format!("# Review checklist {}\n\n", self.checklist_id);
        out.push_str(&format!("- Review kind: {}\n", self.review_kind));
        out.push_str(&format!("- Subjects: {}\n", self.subjects.join("; ")));
        out.push_str(&format!(
            "- Reviewer: {}\n",
            self.reviewer.as_deref().unwrap_or("-")
        ));
        out.push_str(&format!(
            "- Completed at: {}\n\n",
            self.completed_at
                .as_ref()
                .map(format_ts)
                .unwrap_or_else(|| "-".into())
        ));
        let rows: Vec<Vec<String>> = self
            .items
            .iter()
            .enumerate()
            .map(|(i, it)| {
                vec![
                    (i + 1).to_string(),
                    it.text.clone(),
                    it.result.as_str().into(),
                    it.comment.clone(),
                ]
            })
            .collect();
        out.push_str(&pipe_table(&["#", "Item", "Result", "Comment"], &rows));
        out.push('\n');
        out
    }

    pub fn parse(text: &str) -> Result<Checklist, DocError> {
        let err = |line: usize, reason: &str| DocError::ChecklistFormat {
            line,
            reason: reason.into(),
        };
        let lines: Vec<&str> = text.lines().collect();
        let checklist_id = lines
            .first()
            .and_then(|l| l.strip_prefix("# Review checklist "))
            .ok_or_else(|| err(1, "missing title line"))?
            .to_string();
        let mut fields: BTreeMap<&str, &str> = BTreeMap::new();
        let mut items = Vec::new();
        for (i, line) in lines.iter().enumerate().skip(1) {
            if let Some(kv) = line.strip_prefix("- ") {
                let (k, v) = kv
                    .split_once(": ")
                    .ok_or_else(|| err(i + 1, "bad field line"))?;
                fields.insert(k, v);
            } else if line.starts_with("| ") && i > 0 {
                let cells = split_pipe_row(line);
                if cells.first().is_some_and(|c| c == "#") {
                    continue;
                }
                if cells.len() != 4 {
                    return Err(err(i + 1, "item rows have four cells"));
                }
                items.push(ChecklistItem {
                    text: cells[1].clone(),
                    result: cells[2].parse().map_err(|e: String| err(i + 1, &e))?,
                    comment: cells[3].clone(),
                });
            }
        }
        let get = |k: &str| {
            fields
                .get(k)
                .copied()
                .ok_or_else(|| err(0, &format!("missing `{k}`")))
        };
        let review_kind = get("Review kind")?
            .parse()
            .map_err(|e: String| err(0, &e))?;
        let subjects = get("Subjects")?
            .split("; ")
            .filter(|s| !s.is_empty())
            .map(str::to_string)
            .collect();
        let reviewer = Some(get("Reviewer")?)
            .filter(|r| *r != "-")
            .map(str::to_string);
        let completed_at = match get("Completed at")? {
            "-" => None,
            t => Some(parse_ts(t).map_err(|e| err(0, &e.to_string()))?),
        };
        Ok(Checklist {
            checklist_id,
            review_kind,
            items,
            subjects,
            reviewer,
            completed_at,
        })
    }
}

fn split_pipe_row(line: &str) -> Vec<String> {
    let inner = line.trim().trim_start_matches('|').trim_end_matches('|');
    let mut cells = Vec::new();
    let mut cur = String::new();
    let mut chars = inner.chars().peekable();
    while let Some(c) = chars.next() {
        match c {
            '\\' if chars.peek() == Some(&'|') => {
                cur.push('|');
                chars.next();
            }
            '|' => cells.push(std::mem::take(&mut cur)),
            _ => cur.push(c),
        }
    }
    cells.push(cur);
    cells
        .into_iter()
        .map(|c| {
            c.strip_prefix(' ')
                .unwrap_or(&c)
                .strip_suffix(' ')
                .map(str::to_string)
                .unwrap_or(c.clone())
        })
        .collect()
}

/// Item lists per review kind.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ChecklistCatalog {
    items: BTreeMap<ReviewKind, Vec<String>>,
}

impl Default for ChecklistCatalog {
    fn default() -> Self {
        ChecklistCatalog::parse(CHECKLIST_CATALOG).expect("built-in catalog is valid")
    }
}

impl ChecklistCatalog {
    pub fn parse(text: &str) -> Result<Self, DocError> {
        let mut items: BTreeMap<ReviewKind, Vec<String>> = BTreeMap::new();
        let mut current = None;
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            if let Some(name) = line.strip_prefix('[').and_then(|l| l.strip_suffix(']')) {
                let kind: ReviewKind = name.parse().map_err(|reason| DocError::Catalog {
                    line: i + 1,
                    reason,
                })?;
                if items.insert(kind, Vec::new()).is_some() {
                    return Err(DocError::Catalog {
                        line: i + 1,
                        reason: format!("{kind} listed twice"),
                    });
                }
                current = Some(kind);
            } else {
                let kind = current.ok_or_else(|| DocError::Catalog {
                    line: i + 1,
                    reason: "item before any [KIND] header".into(),
                })?;
                items
                    .get_mut(&kind)
                    .expect("header inserted")
                    .push(line.to_string());
            }
        }
        if let Some((kind, _)) = items.iter().find(|(_, v)| v.is_empty()) {
            return Err(DocError::Catalog {
                line: 0,
                reason: format!("{kind} has no items"),
            });
        }
        Ok(ChecklistCatalog { items })
    }

    /// Kinds present in `other` replace the built-in lists.
    pub fn with_overrides(mut self, other: ChecklistCatalog) -> Self {
        self.items.extend(other.items);
        self
    }

    pub fn items(&self, kind: ReviewKind) -> &[String] {
        self.items.get(&kind).map(Vec::as_slice).unwrap_or(&[])
    }
}

pub fn checklist_id(kind: ReviewKind, subjects: &[String]) -> String {
    format!("CHK-{kind}-{}", &sha256_hex(subjects.join("\n"))[..8])
}

/// Fresh checklist with every item UNANSWERED.
pub fn generate_checklist(
    kind: ReviewKind,
    subjects: &[String],
    catalog: &ChecklistCatalog,
    resolves: &dyn Fn(&str) -> bool,
) -> Result<Checklist, DocError> {
    if subjects.is_empty() {
        return Err(DocError::NoSubjects);
    }
    if let Some(bad) = subjects.iter().find(|s| !resolves(s)) {
        return Err(DocError::UnknownSubject(bad.clone()));
    }
    let mut subjects = subjects.to_vec();
    subjects.sort();
    subjects.dedup();
    Ok(Checklist {
        checklist_id: checklist_id(kind, &subjects),
        review_kind: kind,
        items: catalog
            .items(kind)
            .iter()
            .map(|t| ChecklistItem {
                text: t.clone(),
                result: ItemResult::Unanswered,
                comment: String::new(),
            })
            .collect(),
        subjects,
        reviewer: None,
        completed_at: None,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tag_parser::{LineSpan, RequirementDraft};

    fn prov() -> Provenance {
        Provenance::new("dana", parse_ts("2025-05-05T12:00:00Z").unwrap()).unwrap()
    }

    fn store() -> RequirementStore {
        let mk = |key: &str, kind, parents: &[&str], title: &str| RequirementDraft {
            local_key: key.into(),
            kind,
            title: title.into(),
            text: format!("The FMS shall do {title}."),
            parent_keys: parents.iter().map(|s| s.to_string()).collect(),
            source_path: "docs/spec/sys.req".into(),
            line_span: LineSpan { start: 1, end: 4 },
        };
        let mut s = RequirementStore::new();
        s.import_requirements(
            &[
                mk(
                    "FMS-SYS-001",
                    RequirementKind::System,
                    &[],
                    "Vertical guidance",
                ),
                mk(
                    "FMS-HLR-001",
                    RequirementKind::Hlr,
                    &["FMS-SYS-001"],
                    "Altitude capture",
                ),
                mk(
                    "FMS-HLR-002",
                    RequirementKind::Hlr,
                    &["FMS-SYS-001"],
                    "Altitude hold",
                ),
            ],
            &prov(),
        )
        .unwrap();
        s
    }

    #[test]
    fn template_loading() {
        assert_eq!(
            load_template("t", "plain").unwrap().placeholders().count(),
            0
        );
        let t = load_template("t", "x {{req.HLR-0001.text}} y").unwrap();
        let qs: Vec<_> = t.placeholders().collect();
        assert_eq!(
            qs,
            vec![&Query::ReqField {
                id: "HLR-0001".parse().unwrap(),
                field: ReqField::Text
            }]
        );
        assert!(matches!(
            load_template("t", "{{bogus.thing}}"),
            Err(DocError::BadPlaceholder { position: 0, .. })
        ));
        assert!(matches!(
            load_template("t", "ab {{meta.x"),
            Err(DocError::BadPlaceholder { position: 3, .. })
        ));
        assert!(load_template("t", "{{req.list(kind=HLR,status=DRAFT)}}").is_ok());
        assert!(load_template("t", "{{req.list(kind=HLR,kind=LLR)}}").is_err());
        assert!(load_template("t", "{{req.HLR-0001.colour}}").is_err());
    }

    #[test]
    fn rendering_substitutes_and_reports_all_unresolved() {
        let s = store();
        let plain = load_template("t", "no placeholders here").unwrap();
        assert_eq!(
            render_document(&plain, &s, None, &Meta::new())
                .unwrap()
                .body,
            "no placeholders here"
        );
        let t = load_template("t", "{{req.HLR-0001.title}}").unwrap();
        assert_eq!(
            render_document(&t, &s, None, &Meta::new()).unwrap().body,
            "Altitude capture"
        );
        let missing =
            load_template("t", "{{req.HLR-0099.text}} {{meta.a}} {{matrix.csv}}").unwrap();
        assert_eq!(
            render_document(&missing, &s, None, &Meta::new()).unwrap_err(),
            DocError::UnresolvedPlaceholder(vec![
                "matrix.csv".into(),
                "meta.a".into(),
                "req.HLR-0099.text".into()
            ])
        );
    }

    #[test]
    fn substituted_values_cannot_open_placeholders() {
        let mut meta = Meta::new();
        meta.insert("a".into(), "{{{x".into());
        let t = load_template("t", "{{meta.a}}").unwrap();
        let doc = render_document(&t, &RequirementStore::new(), None, &meta).unwrap();
        assert!(!doc.body.contains("{{"));
    }

    #[test]
    fn srd_structure() {
        let s = store();
        let m = crate::trace::build_matrix(&s, &Default::default(), &Default::default(), prov().at)
            .unwrap();
        let doc = generate_srd(&s, Some(&m), &Meta::new()).unwrap();
        let appendix = doc.body.split("# Appendix A").nth(1).unwrap();
        let matrix_rows = appendix
            .lines()
            .filter(|l| l.starts_with("| SYS-") || l.starts_with("| HLR-"))
            .count();
        assert_eq!(matrix_rows, 3);
        let sections = doc
            .body
            .lines()
            .filter(|l| l.starts_with("## 1 SYS-"))
            .count();
        let subsections: Vec<_> = doc.body.lines().filter(|l| l.starts_with("### ")).collect();
        assert_eq!(sections, 1);
        assert_eq!(
            subsections,
            vec![
                "### 1.1 HLR-0001: Altitude capture",
                "### 1.2 HLR-0002: Altitude hold"
            ]
        );
        let again = generate_srd(&s, Some(&m), &Meta::new()).unwrap();
        assert_eq!(doc, again);
        assert_eq!(
            generate_srd(&RequirementStore::new(), None, &Meta::new()).unwrap_err(),
            DocError::EmptyStore
        );
    }

    #[test]
    fn design_artifact_sorts_entries() {
        let s = store();
        let mut recs: Vec<RequirementRecord> = s.records().cloned().collect();
        recs.reverse();
        let ctx = CommitContext {
            repo: "fms".into(),
            commit_id: "c1".into(),
            branch: "feature/x".into(),
            author: "dana".into(),
            at: prov().at,
        };
        let doc = generate_design_artifact(&recs, &ctx, None).unwrap();
        let heads: Vec<_> = doc.body.lines().filter(|l| l.starts_with("## ")).collect();
        assert_eq!(heads[0], "## HLR-0001: Altitude capture");
        assert_eq!(heads[2], "## SYS-0001: Vertical guidance");
        assert_eq!(
            generate_design_artifact(&[], &ctx, None).unwrap_err(),
            DocError::EmptyInput
        );
    }

    #[test]
    fn catalog_sizes_and_code_item() {
        let cat = ChecklistCatalog::default();
        for k in ReviewKind::ALL {
            let n = cat.items(k).len();
            assert!((5..=8).contains(&n), "{k} has {n} items");
        }
        let c = generate_checklist(
            ReviewKind::Code,
            &["SOURCE:src/a.c@c1".into()],
            &cat,
            &|_| true,
        )
        .unwrap();
        assert!(c.items.iter().any(
            |i| i.text == "All LLRs implemented by this change are linked"
                && i.result == ItemResult::Unanswered
        ));
        assert!(!c.is_complete());
        assert_eq!(
            generate_checklist(ReviewKind::Code, &["x".into()], &cat, &|_| false).unwrap_err(),
            DocError::UnknownSubject("x".into())
        );
    }

    #[test]
    fn failed_item_blocks_acceptability() {
        let cat = ChecklistCatalog::default();
        let mut c = generate_checklist(ReviewKind::UnitTest, &["HLR-0001".into()], &cat, &|_| true)
            .unwrap();
        c.answer_all(ItemResult::Pass);
        c.answer(2, ItemResult::Fail, "missing | robustness")
            .unwrap();
        assert!(c.is_complete());
        assert!(!c.is_acceptable());
        c.sign(&prov());
        let parsed = Checklist::parse(&c.render()).unwrap();
        assert_eq!(parsed, c);
    }
}
