//! Artifact index, typed trace links, anomaly detection and the
//! requirement-centred traceability matrix.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::canonical::{format_ts, is_repo_relative, sha256_hex, ts, Provenance, Timestamp};
use crate::req_store::{RequirementStatus, RequirementStore, StoreId};
use crate::tag_parser::RequirementKind;
use crate::workflow::{Stage, WorkflowBoard};

pub const ARTIFACTS_HEADER: &str = "certiflow-artifacts v1";
pub const LINKS_HEADER: &str = "certiflow-links v1";
pub const ANOMALIES_HEADER: &str = "certiflow-anomalies v1";

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum ArtifactKind {
    SpecDoc,
    DesignDoc,
    Source,
    UnitTest,
    IntegrationTest,
    HsiTest,
    SystemTest,
    TestReport,
    ReviewChecklist,
    GeneratedDoc,
    Matrix,
    PackageManifest,
}

impl ArtifactKind {
    pub const ALL: [ArtifactKind; 12] = [
        ArtifactKind::SpecDoc,
        ArtifactKind::DesignDoc,
        ArtifactKind::Source,
        ArtifactKind::UnitTest,
        ArtifactKind::IntegrationTest,
        ArtifactKind::HsiTest,
        ArtifactKind::SystemTest,
        ArtifactKind::TestReport,
        ArtifactKind::ReviewChecklist,
        ArtifactKind::GeneratedDoc,
        ArtifactKind::Matrix,
        ArtifactKind::PackageManifest,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            ArtifactKind::SpecDoc => "SPEC_DOC",
            ArtifactKind::DesignDoc => "DESIGN_DOC",
            ArtifactKind::Source => "SOURCE",
            ArtifactKind::UnitTest => "UNIT_TEST",
            ArtifactKind::IntegrationTest => "INTEGRATION_TEST",
            ArtifactKind::HsiTest => "HSI_TEST",
            ArtifactKind::SystemTest => "SYSTEM_TEST",
            ArtifactKind::TestReport => "TEST_REPORT",
            ArtifactKind::ReviewChecklist => "REVIEW_CHECKLIST",
            ArtifactKind::GeneratedDoc => "GENERATED_DOC",
            ArtifactKind::Matrix => "MATRIX",
            ArtifactKind::PackageManifest => "PACKAGE_MANIFEST",
        }
    }

    pub fn is_test(self) -> bool {
        matches!(
            self,
            ArtifactKind::UnitTest
                | ArtifactKind::IntegrationTest
                | ArtifactKind::HsiTest
                | ArtifactKind::SystemTest
        )
    }

    /// Stage an artifact of this kind belongs to when no PBI says otherwise.
    pub fn default_stage(self) -> Stage {
        match self {
            ArtifactKind::Source => Stage::SwImplementation,
            ArtifactKind::UnitTest | ArtifactKind::IntegrationTest | ArtifactKind::TestReport => {
                Stage::SwTesting
            }
            ArtifactKind::HsiTest | ArtifactKind::SystemTest => Stage::HsiSystemTesting,
            _ => Stage::Specification,
        }
    }
}

impl fmt::Display for ArtifactKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ArtifactKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        ArtifactKind::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| format!("unknown artifact kind `{s}`"))
    }
}

pub fn artifact_id(kind: ArtifactKind, path: &str, commit_id: &str) -> String {
    format!("{kind}:{path}@{commit_id}")
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArtifactRecord {
    pub artifact_id: String,
    pub path: String,
    pub kind: ArtifactKind,
    pub content_hash: String,
    pub commit_id: String,
    pub author: String,
    #[serde(with = "ts")]
    pub timestamp: Timestamp,
    pub stage: Stage,
    pub pbi_refs: Vec<String>,
}

impl ArtifactRecord {
    pub fn new(
        kind: ArtifactKind,
        path: &str,
        commit_id: &str,
        content_hash: &str,
        stage: Stage,
        pbi_refs: Vec<String>,
        prov: &Provenance,
    ) -> Self {
        let mut pbi_refs = pbi_refs;
        pbi_refs.sort();
        pbi_refs.dedup();
        ArtifactRecord {
            artifact_id: artifact_id(kind, path, commit_id),
            path: path.to_string(),
            kind,
            content_hash: content_hash.to_string(),
            commit_id: commit_id.to_string(),
            author: prov.author.clone(),
            timestamp: prov.at,
            stage,
            pbi_refs,
        }
    }

    fn validate(&self) -> Result<(), String> {
        if !is_repo_relative(&self.path) {
            return Err(format!("path `{}` is not repository-relative", self.path));
        }
        if self.commit_id.trim().is_empty() || self.commit_id.contains(char::is_whitespace) {
            return Err("commit id must be a non-empty token".into());
        }
        if self.content_hash.is_empty() {
            return Err("content hash is empty".into());
        }
        if self.author.trim().is_empty() {
            return Err("missing author identity".into());
        }
        if self.artifact_id != artifact_id(self.kind, &self.path, &self.commit_id) {
            return Err("artifact id does not match kind, path and commit".into());
        }
        Ok(())
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum TraceError {
    #[error("artifact `{0}` is already registered")]
    DuplicateArtifact(String),
    #[error("artifact references unknown PBI `{0}`")]
    UnresolvedPbiRef(String),
    #[error("invalid artifact record: {0}")]
    InvalidRecord(String),
    #[error("{link_kind} may not link {from} to {to}")]
    IllegalEndpoints {
        link_kind: LinkKind,
        from: String,
        to: String,
    },
    #[error("link {0} already exists")]
    DuplicateLink(String),
    #[error("link endpoint `{0}` does not exist")]
    DanglingEndpoint(String),
    #[error("referential integrity violated: {}", .0.join("; "))]
    IntegrityViolation(Vec<String>),
    #[error("{what} line {line}: {reason}")]
    Format {
        what: &'static str,
        line: usize,
        reason: String,
    },
    #[error("unknown anomaly `{0}`")]
    UnknownAnomaly(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "lowercase")]
enum IndexEvent {
    Register(ArtifactRecord),
    Delete { path: String, commit_id: String },
}

/// Every registered artifact, in registration order, plus path deletions.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ArtifactIndex {
    records: BTreeMap<String, ArtifactRecord>,
    order: Vec<String>,
    deleted: BTreeMap<String, String>,
    events: Vec<IndexEvent>,
}

impl ArtifactIndex {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn get(&self, id: &str) -> Option<&ArtifactRecord> {
        self.records.get(id)
    }

    pub fn contains(&self, id: &str) -> bool {
        self.records.contains_key(id)
    }

    /// Records in registration order.
    pub fn records(&self) -> impl Iterator<Item = &ArtifactRecord> {
        self.order.iter().map(|id| &self.records[id])
    }

    pub fn register(
        &mut self,
        record: ArtifactRecord,
        known_pbi: &dyn Fn(&str) -> bool,
    ) -> Result<String, TraceError> {
        record.validate().map_err(TraceError::InvalidRecord)?;
        if self.records.contains_key(&record.artifact_id) {
            return Err(TraceError::DuplicateArtifact(record.artifact_id));
        }
        if let Some(missing) = record.pbi_refs.iter().find(|p| !known_pbi(p)) {
            return Err(TraceError::UnresolvedPbiRef(missing.clone()));
        }
        let id = record.artifact_id.clone();
        self.apply(IndexEvent::Register(record));
        Ok(id)
    }

    /// Records that `path` no longer exists as of `commit_id`.
    pub fn mark_deleted(&mut self, path: &str, commit_id: &str) {
        self.apply(IndexEvent::Delete {
            path: path.into(),
            commit_id: commit_id.into(),
        });
    }

    fn apply(&mut self, event: IndexEvent) {
        match &event {
            IndexEvent::Register(r) => {
                self.deleted.remove(&r.path);
                self.order.push(r.artifact_id.clone());
                self.records.insert(r.artifact_id.clone(), r.clone());
            }
            IndexEvent::Delete { path, commit_id } => {
                self.deleted.insert(path.clone(), commit_id.clone());
            }
        }
        self.events.push(event);
    }

    pub fn is_deleted(&self, path: &str) -> bool {
        self.deleted.contains_key(path)
    }

    /// All versions registered for `path`, oldest first.
    pub fn versions(&self, path: &str) -> Vec<&ArtifactRecord> {
        self.records().filter(|r| r.path == path).collect()
    }

    /// Latest record for `path`, ignoring registrations at `except_commit`.
    pub fn latest_for_path(
        &self,
        path: &str,
        except_commit: Option<&str>,
    ) -> Option<&ArtifactRecord> {
        self.records()
            .filter(|r| r.path == path && Some(r.commit_id.as_str()) != except_commit)
            .last()
    }

    /// Latest record per (kind, path), skipping deleted paths.
    pub fn current(&self) -> Vec<&ArtifactRecord> {
        let mut latest: BTreeMap<(ArtifactKind, &str), &ArtifactRecord> = BTreeMap::new();
        for r in self.records() {
            latest.insert((r.kind, r.path.as_str()), r);
        }
        latest
            .into_values()
            .filter(|r| !self.deleted.contains_key(&r.path))
            .collect()
    }

    pub fn is_current(&self, id: &str) -> bool {
        self.get(id).is_some_and(|r| {
            !self.deleted.contains_key(&r.path)
                && self
                    .records()
                    .filter(|o| o.kind == r.kind && o.path == r.path)
                    .last()
                    .is_some_and(|o| o.artifact_id == r.artifact_id)
        })
    }

    pub fn to_canonical(&self) -> String {
        let mut out = format!("{ARTIFACTS_HEADER}\n");
        for e in &self.events {
            out.push_str(&serde_json::to_string(e).expect("event serializes"));
            out.push('\n');
        }
        out
    }

    pub fn parse(text: &str) -> Result<Self, TraceError> {
        let mut index = ArtifactIndex::new();
        for (i, line) in body_lines(text, ARTIFACTS_HEADER, "artifact index")? {
            let event: IndexEvent = serde_json::from_str(line).map_err(|e| TraceError::Format {
                what: "artifact index",
                line: i,
                reason: e.to_string(),
            })?;
            if let IndexEvent::Register(r) = &event {
                r.validate().map_err(|reason| TraceError::Format {
                    what: "artifact index",
                    line: i,
                    reason,
                })?;
                if index.records.contains_key(&r.artifact_id) {
                    return Err(TraceError::DuplicateArtifact(r.artifact_id.clone()));
                }
            }
            index.apply(event);
        }
        Ok(index)
    }

    pub fn digest(&self) -> String {
        sha256_hex(self.to_canonical())
    }
}

fn body_lines<'t>(
    text: &'t str,
    header: &str,
    what: &'static str,
) -> Result<impl Iterator<Item = (usize, &'t str)>, TraceError> {
    let mut lines = text.lines();
    if lines.next() != Some(header) {
        return Err(TraceError::Format {
            what,
            line: 1,
            reason: format!("expected `{header}` header"),
        });
    }
    Ok(lines
        .enumerate()
        .map(|(i, l)| (i + 2, l))
        .filter(|(_, l)| !l.is_empty()))
}

/// Either a requirement (by store id) or an artifact (by artifact id).
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum EntityRef {
    Requirement(StoreId),
    Artifact(String),
}

impl fmt::Display for EntityRef {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            EntityRef::Requirement(id) => write!(f, "{id}"),
            EntityRef::Artifact(id) => f.write_str(id),
        }
    }
}

impl FromStr for EntityRef {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        if s.contains(':') {
            Ok(EntityRef::Artifact(s.to_string()))
        } else {
            s.parse().map(EntityRef::Requirement)
        }
    }
}

impl Serialize for EntityRef {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for EntityRef {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        String::deserialize(d)?
            .parse()
            .map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum LinkKind {
    Derives,
    Implements,
    Verifies,
    Reviews,
    Reports,
}

impl LinkKind {
    pub fn as_str(self) -> &'static str {
        match self {
            LinkKind::Derives => "DERIVES",
            LinkKind::Implements => "IMPLEMENTS",
            LinkKind::Verifies => "VERIFIES",
            LinkKind::Reviews => "REVIEWS",
            LinkKind::Reports => "REPORTS",
        }
    }
}

impl fmt::Display for LinkKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for LinkKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        [
            LinkKind::Derives,
            LinkKind::Implements,
            LinkKind::Verifies,
            LinkKind::Reviews,
            LinkKind::Reports,
        ]
        .into_iter()
        .find(|k| k.as_str() == s)
        .ok_or_else(|| format!("unknown link kind `{s}`"))
    }
}

/// The kind of thing at one end of a link.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EndpointKind {
    Requirement(RequirementKind),
    Artifact(ArtifactKind),
}

impl fmt::Display for EndpointKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            EndpointKind::Requirement(k) => write!(f, "{k}"),
            EndpointKind::Artifact(k) => write!(f, "{k}"),
        }
    }
}

/// The endpoint legality table.
pub fn endpoints_legal(link_kind: LinkKind, from: EndpointKind, to: EndpointKind) -> bool {
    use ArtifactKind as A;
    use EndpointKind::{Artifact as Art, Requirement as Req};
    use RequirementKind as R;
    match link_kind {
        LinkKind::Derives => matches!(
            (from, to),
            (Req(R::System), Req(R::Hlr)) | (Req(R::Hlr), Req(R::Llr))
        ),
        LinkKind::Implements => matches!(
            (from, to),
            (Req(R::Llr), Art(A::Source)) | (Req(_), Art(A::DesignDoc | A::GeneratedDoc))
        ),
        LinkKind::Verifies => matches!(
            (from, to),
            (Art(A::UnitTest), Req(R::Llr))
                | (Art(A::IntegrationTest), Req(R::Hlr | R::Llr))
                | (Art(A::HsiTest | A::SystemTest), Req(R::System | R::Hlr))
        ),
        LinkKind::Reviews => {
            matches!(from, Art(A::ReviewChecklist)) && to != Art(A::ReviewChecklist)
        }
        LinkKind::Reports => {
            matches!(from, Art(A::TestReport)) && matches!(to, Art(k) if k.is_test())
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TraceLink {
    pub from_ref: EntityRef,
    pub to_ref: EntityRef,
    pub link_kind: LinkKind,
    pub created_by: String,
    #[serde(with = "ts")]
    pub created_at: Timestamp,
    pub commit_id: String,
}

impl TraceLink {
    pub fn new(
        from_ref: EntityRef,
        to_ref: EntityRef,
        link_kind: LinkKind,
        commit_id: &str,
        prov: &Provenance,
    ) -> Self {
        TraceLink {
            from_ref,
            to_ref,
            link_kind,
            created_by: prov.author.clone(),
            created_at: prov.at,
            commit_id: commit_id.to_string(),
        }
    }

    pub fn key(&self) -> (EntityRef, EntityRef, LinkKind) {
        (self.from_ref.clone(), self.to_ref.clone(), self.link_kind)
    }

    pub fn describe(&self) -> String {
        format!("{} -{}-> {}", self.from_ref, self.link_kind, self.to_ref)
    }
}

fn endpoint_kind(
    r: &EntityRef,
    store: &RequirementStore,
    index: &ArtifactIndex,
) -> Option<EndpointKind> {
    match r {
        EntityRef::Requirement(id) => store.get(id).map(|rec| EndpointKind::Requirement(rec.kind)),
        EntityRef::Artifact(id) => index.get(id).map(|a| EndpointKind::Artifact(a.kind)),
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct LinkSet {
    links: BTreeMap<(EntityRef, EntityRef, LinkKind), TraceLink>,
}

impl LinkSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.links.len()
    }

    pub fn is_empty(&self) -> bool {
        self.links.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &TraceLink> {
        self.links.values()
    }

    pub fn contains(&self, from: &EntityRef, to: &EntityRef, kind: LinkKind) -> bool {
        self.links.contains_key(&(from.clone(), to.clone(), kind))
    }

    pub fn touching<'a>(&'a self, r: &'a EntityRef) -> impl Iterator<Item = &'a TraceLink> + 'a {
        self.links
            .values()
            .filter(move |l| &l.from_ref == r || &l.to_ref == r)
    }

    pub fn add_link(
        &mut self,
        link: TraceLink,
        store: &RequirementStore,
        index: &ArtifactIndex,
    ) -> Result<&TraceLink, TraceError> {
        let from = endpoint_kind(&link.from_ref, store, index)
            .ok_or_else(|| TraceError::DanglingEndpoint(link.from_ref.to_string()))?;
        let to = endpoint_kind(&link.to_ref, store, index)
            .ok_or_else(|| TraceError::DanglingEndpoint(link.to_ref.to_string()))?;
        if !endpoints_legal(link.link_kind, from, to) {
            return Err(TraceError::IllegalEndpoints {
                link_kind: link.link_kind,
                from: from.to_string(),
                to: to.to_string(),
            });
        }
        let key = link.key();
        if self.links.contains_key(&key) {
            return Err(TraceError::DuplicateLink(link.describe()));
        }
        Ok(self.links.entry(key).or_insert(link))
    }

    pub fn to_canonical(&self) -> String {
        let mut out = format!("{LINKS_HEADER}\n");
        for l in self.links.values() {
            out.push_str(&serde_json::to_string(l).expect("link serializes"));
            out.push('\n');
        }
        out
    }

    pub fn parse(text: &str) -> Result<Self, TraceError> {
        let mut set = LinkSet::new();
        for (i, line) in body_lines(text, LINKS_HEADER, "link set")? {
            let link: TraceLink = serde_json::from_str(line).map_err(|e| TraceError::Format {
                what: "link set",
                line: i,
                reason: e.to_string(),
            })?;
            if set.links.insert(link.key(), link.clone()).is_some() {
                return Err(TraceError::DuplicateLink(link.describe()));
            }
        }
        Ok(set)
    }

    pub fn digest(&self) -> String {
        sha256_hex(self.to_canonical())
    }
}

// ---------------------------------------------------------------------------
// Anomalies

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum ChangeType {
    Added,
    Modified,
    Deleted,
}

impl fmt::Display for ChangeType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ChangeType::Added => "ADDED",
            ChangeType::Modified => "MODIFIED",
            ChangeType::Deleted => "DELETED",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FileChange {
    pub path: String,
    pub change_type: ChangeType,
    /// Digest of the new content; ignored for deletions.
    pub new_hash: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum AnomalyKind {
    BaselinedChanged,
    UnlinkedChange,
    OrphanedLink,
    RemovedTracedRequirement,
}

impl AnomalyKind {
    pub fn as_str(self) -> &'static str {
        match self {
            AnomalyKind::BaselinedChanged => "BASELINED_CHANGED",
            AnomalyKind::UnlinkedChange => "UNLINKED_CHANGE",
            AnomalyKind::OrphanedLink => "ORPHANED_LINK",
            AnomalyKind::RemovedTracedRequirement => "REMOVED_TRACED_REQUIREMENT",
        }
    }
}

impl fmt::Display for AnomalyKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Anomaly {
    pub anomaly_id: String,
    pub kind: AnomalyKind,
    pub subject: String,
    pub commit_id: String,
    #[serde(with = "ts")]
    pub detected_at: Timestamp,
    pub detail: String,
}

impl Anomaly {
    /// The id depends only on what was detected, never on its neighbours.
    pub fn new(
        kind: AnomalyKind,
        subject: &str,
        commit_id: &str,
        detected_at: Timestamp,
        detail: String,
    ) -> Self {
        let digest = sha256_hex(format!("{commit_id}\n{kind}\n{subject}\n{detail}"));
        Anomaly {
            anomaly_id: format!("AN-{}", &digest[..12]),
            kind,
            subject: subject.to_string(),
            commit_id: commit_id.to_string(),
            detected_at,
            detail,
        }
    }
}

/// What changed in one commit, as seen by anomaly detection.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ChangeSet {
    pub files: Vec<FileChange>,
    /// Requirements whose tag blocks vanished from their source.
    pub removed_requirements: Vec<StoreId>,
    /// Requirements knocked out of BASELINED by a content change.
    pub reset_requirements: Vec<StoreId>,
}

pub struct AnomalyInputs<'a> {
    pub store: &'a RequirementStore,
    pub index: &'a ArtifactIndex,
    pub links: &'a LinkSet,
    pub board: &'a WorkflowBoard,
    pub traced_prefixes: &'a [String],
}

pub fn detect_anomalies(
    inputs: &AnomalyInputs<'_>,
    changes: &ChangeSet,
    commit_id: &str,
    pbi_context: &[String],
    detected_at: Timestamp,
) -> Vec<Anomaly> {
    let mut found: BTreeSet<(AnomalyKind, String, String)> = BTreeSet::new();
    let baselined = |id: &StoreId| {
        inputs
            .store
            .get(id)
            .is_some_and(|r| r.status == RequirementStatus::Baselined)
    };

    for change in &changes.files {
        if !is_repo_relative(&change.path) {
            found.insert((
                AnomalyKind::UnlinkedChange,
                change.path.clone(),
                format!("malformed path in {} change", change.change_type),
            ));
            continue;
        }
        let prior = inputs.index.latest_for_path(&change.path, Some(commit_id));

        if let Some(prior) = prior {
            let changed =
                change.change_type == ChangeType::Deleted || change.new_hash != prior.content_hash;
            if changed {
                let mut reasons = Vec::new();
                let me = EntityRef::Artifact(prior.artifact_id.clone());
                for l in inputs.links.touching(&me) {
                    let other = if l.from_ref == me {
                        &l.to_ref
                    } else {
                        &l.from_ref
                    };
                    if let EntityRef::Requirement(id) = other {
                        if baselined(id) {
                            reasons.push(format!("backs BASELINED {id} via {}", l.link_kind));
                        }
                    }
                }
                for rec in inputs.store.records() {
                    if rec.status == RequirementStatus::Baselined
                        && rec
                            .status_history
                            .iter()
                            .any(|c| c.evidence == prior.artifact_id)
                    {
                        reasons.push(format!("status evidence of BASELINED {}", rec.store_id));
                    }
                }
                for pbi in inputs.board.pbis() {
                    if pbi_context.iter().any(|p| p == &pbi.pbi_id) {
                        continue;
                    }
                    for t in pbi.done_tasks() {
                        if t.evidence.contains(&prior.artifact_id) {
                            reasons.push(format!("evidence of DONE {}/{}", pbi.pbi_id, t.task_id));
                        }
                    }
                }
                reasons.sort();
                reasons.dedup();
                if !reasons.is_empty() {
                    found.insert((
                        AnomalyKind::BaselinedChanged,
                        prior.artifact_id.clone(),
                        format!(
                            "{} {}: {}",
                            change.change_type,
                            change.path,
                            reasons.join("; ")
                        ),
                    ));
                }
            }
        }

        let traced = inputs
            .traced_prefixes
            .iter()
            .any(|p| change.path.starts_with(p.as_str()));
        if traced && pbi_context.is_empty() {
            let latest = inputs.index.latest_for_path(&change.path, None);
            if latest.is_none_or(|r| r.pbi_refs.is_empty()) {
                let subject = latest
                    .map(|r| r.artifact_id.clone())
                    .unwrap_or_else(|| change.path.clone());
                found.insert((
                    AnomalyKind::UnlinkedChange,
                    subject,
                    format!(
                        "{} {} under a traced path without a linked work item",
                        change.change_type, change.path
                    ),
                ));
            }
        }

        if change.change_type == ChangeType::Deleted {
            for version in inputs.index.versions(&change.path) {
                let me = EntityRef::Artifact(version.artifact_id.clone());
                for l in inputs.links.touching(&me) {
                    found.insert((
                        AnomalyKind::OrphanedLink,
                        version.artifact_id.clone(),
                        format!("{} lost an endpoint", l.describe()),
                    ));
                }
            }
        }
    }

    for id in &changes.removed_requirements {
        let me = EntityRef::Requirement(*id);
        let linked: Vec<String> = inputs.links.touching(&me).map(|l| l.describe()).collect();
        if !linked.is_empty() {
            found.insert((
                AnomalyKind::RemovedTracedRequirement,
                id.to_string(),
                format!("tag block removed while traced by {}", linked.join("; ")),
            ));
        }
    }

    for id in &changes.reset_requirements {
        found.insert((
            AnomalyKind::BaselinedChanged,
            id.to_string(),
            "content changed while BASELINED; status reset to DRAFT".into(),
        ));
    }

    found
        .into_iter()
        .map(|(kind, subject, detail)| Anomaly::new(kind, &subject, commit_id, detected_at, detail))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Resolution {
    pub by: String,
    #[serde(with = "ts")]
    pub at: Timestamp,
    pub note: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnomalyEntry {
    pub anomaly: Anomaly,
    pub resolution: Option<Resolution>,
}

/// Every anomaly ever detected, keyed by id.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct AnomalyLog {
    entries: BTreeMap<String, AnomalyEntry>,
}

impl AnomalyLog {
    pub fn new() -> Self {
        Self::default()
    }

    /// Returns false when the anomaly was already known.
    pub fn record(&mut self, anomaly: Anomaly) -> bool {
        if self.entries.contains_key(&anomaly.anomaly_id) {
            return false;
        }
        self.entries.insert(
            anomaly.anomaly_id.clone(),
            AnomalyEntry {
                anomaly,
                resolution: None,
            },
        );
        true
    }

    pub fn resolve(
        &mut self,
        anomaly_id: &str,
        prov: &Provenance,
        note: &str,
    ) -> Result<(), TraceError> {
        let entry = self
            .entries
            .get_mut(anomaly_id)
            .ok_or_else(|| TraceError::UnknownAnomaly(anomaly_id.to_string()))?;
        entry.resolution = Some(Resolution {
            by: prov.author.clone(),
            at: prov.at,
            note: note.to_string(),
        });
        Ok(())
    }

    pub fn entries(&self) -> impl Iterator<Item = &AnomalyEntry> {
        self.entries.values()
    }

    pub fn open(&self) -> Vec<&Anomaly> {
        self.entries
            .values()
            .filter(|e| e.resolution.is_none())
            .map(|e| &e.anomaly)
            .collect()
    }

    pub fn to_canonical(&self) -> String {
        let mut out = format!("{ANOMALIES_HEADER}\n");
        for e in self.entries.values() {
            out.push_str(&serde_json::to_string(e).expect("anomaly serializes"));
            out.push('\n');
        }
        out
    }

    pub fn parse(text: &str) -> Result<Self, TraceError> {
        let mut log = AnomalyLog::new();
        for (i, line) in body_lines(text, ANOMALIES_HEADER, "anomaly log")? {
            let entry: AnomalyEntry =
                serde_json::from_str(line).map_err(|e| TraceError::Format {
                    what: "anomaly log",
                    line: i,
                    reason: e.to_string(),
                })?;
            log.entries.insert(entry.anomaly.anomaly_id.clone(), entry);
        }
        Ok(log)
    }
}

// ---------------------------------------------------------------------------
// Matrix

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct TestCell {
    pub artifact_id: String,
    pub kind: ArtifactKind,
    pub reports: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ReviewEntry {
    pub artifact_id: String,
    pub reviewer: String,
    #[serde(with = "ts")]
    pub date: Timestamp,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MatrixRow {
    pub store_id: StoreId,
    pub kind: RequirementKind,
    pub status: RequirementStatus,
    pub revision: u32,
    pub children: Vec<StoreId>,
    pub design_artifacts: Vec<String>,
    pub source_artifacts: Vec<String>,
    pub tests: Vec<TestCell>,
    pub reviews: Vec<ReviewEntry>,
}

impl MatrixRow {
    pub fn test_reports(&self) -> Vec<String> {
        let all: BTreeSet<&String> = self.tests.iter().flat_map(|t| t.reports.iter()).collect();
        all.into_iter().cloned().collect()
    }

    /// Anything downstream of this requirement.
    pub fn traced_downstream(&self) -> bool {
        !self.children.is_empty()
            || !self.design_artifacts.is_empty()
            || !self.source_artifacts.is_empty()
            || !self.tests.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TraceabilityMatrix {
    pub rows: Vec<MatrixRow>,
    pub generated_at: Timestamp,
    pub store_digest: String,
}

impl TraceabilityMatrix {
    pub fn row(&self, id: &StoreId) -> Option<&MatrixRow> {
        self.rows
            .binary_search_by(|r| r.store_id.cmp(id))
            .ok()
            .map(|i| &self.rows[i])
    }
}

/// Every link endpoint, parent id and status evidence must resolve.
pub fn integrity_violations(
    store: &RequirementStore,
    index: &ArtifactIndex,
    links: &LinkSet,
) -> Vec<String> {
    let mut dangling = BTreeSet::new();
    for l in links.iter() {
        for end in [&l.from_ref, &l.to_ref] {
            if endpoint_kind(end, store, index).is_none() {
                dangling.insert(format!("{} (dangling {end})", l.describe()));
            }
        }
    }
    for rec in store.records() {
        for p in &rec.parent_ids {
            if store.get(p).is_none() {
                dangling.insert(format!("{} parent {p}", rec.store_id));
            }
        }
        for c in &rec.status_history {
            if !index.contains(&c.evidence) {
                dangling.insert(format!("{} status evidence {}", rec.store_id, c.evidence));
            }
        }
    }
    dangling.into_iter().collect()
}

pub fn build_matrix(
    store: &RequirementStore,
    index: &ArtifactIndex,
    links: &LinkSet,
    generated_at: Timestamp,
) -> Result<TraceabilityMatrix, TraceError> {
    let violations = integrity_violations(store, index, links);
    if !violations.is_empty() {
        return Err(TraceError::IntegrityViolation(violations));
    }

    let current = |r: &EntityRef| -> Option<&ArtifactRecord> {
        match r {
            EntityRef::Artifact(id) if index.is_current(id) => index.get(id),
            _ => None,
        }
    };

    let mut children: BTreeMap<StoreId, BTreeSet<StoreId>> = BTreeMap::new();
    for rec in store.records() {
        for p in &rec.parent_ids {
            children.entry(*p).or_default().insert(rec.store_id);
        }
    }
    for l in links.iter().filter(|l| l.link_kind == LinkKind::Derives) {
        if let (EntityRef::Requirement(a), EntityRef::Requirement(b)) = (&l.from_ref, &l.to_ref) {
            children.entry(*a).or_default().insert(*b);
        }
    }

    let mut design: BTreeMap<StoreId, BTreeSet<String>> = BTreeMap::new();
    let mut direct_source: BTreeMap<StoreId, BTreeSet<String>> = BTreeMap::new();
    let mut tests: BTreeMap<StoreId, BTreeSet<(String, ArtifactKind)>> = BTreeMap::new();
    let mut reports: BTreeMap<String, BTreeSet<String>> = BTreeMap::new();
    let mut reviews: BTreeMap<StoreId, BTreeSet<ReviewEntry>> = BTreeMap::new();

    for l in links.iter() {
        match (l.link_kind, &l.from_ref, &l.to_ref) {
            (LinkKind::Implements, EntityRef::Requirement(req), to) => {
                if let Some(a) = current(to) {
                    let slot = if a.kind == ArtifactKind::Source {
                        &mut direct_source
                    } else {
                        &mut design
                    };
                    slot.entry(*req).or_default().insert(a.artifact_id.clone());
                }
            }
            (LinkKind::Verifies, from, EntityRef::Requirement(req)) => {
                if let Some(a) = current(from) {
                    tests
                        .entry(*req)
                        .or_default()
                        .insert((a.artifact_id.clone(), a.kind));
                }
            }
            (LinkKind::Reports, from, EntityRef::Artifact(test)) => {
                if let Some(a) = current(from) {
                    reports
                        .entry(test.clone())
                        .or_default()
                        .insert(a.artifact_id.clone());
                }
            }
            (LinkKind::Reviews, from, EntityRef::Requirement(req)) => {
                if let Some(a) = current(from) {
                    reviews.entry(*req).or_default().insert(ReviewEntry {
                        artifact_id: a.artifact_id.clone(),
                        reviewer: a.author.clone(),
                        date: a.timestamp,
                    });
                }
            }
            _ => {}
        }
    }
    for rec in store.records() {
        for c in &rec.status_history {
            reviews
                .entry(rec.store_id)
                .or_default()
                .insert(ReviewEntry {
                    artifact_id: c.evidence.clone(),
                    reviewer: c.author.clone(),
                    date: c.at,
                });
        }
    }

    let mut rows = Vec::with_capacity(store.len());
    for rec in store.records() {
        let mut source = BTreeSet::new();
        let mut stack = vec![rec.store_id];
        let mut seen = BTreeSet::new();
        while let Some(id) = stack.pop() {
            if !seen.insert(id) {
                continue;
            }
            source.extend(direct_source.get(&id).into_iter().flatten().cloned());
            stack.extend(children.get(&id).into_iter().flatten().copied());
        }
        let test_cells = tests
            .get(&rec.store_id)
            .into_iter()
            .flatten()
            .map(|(id, kind)| TestCell {
                artifact_id: id.clone(),
                kind: *kind,
                reports: reports.get(id).into_iter().flatten().cloned().collect(),
            })
            .collect();
        rows.push(MatrixRow {
            store_id: rec.store_id,
            kind: rec.kind,
            status: rec.status,
            revision: rec.revision,
            children: children
                .get(&rec.store_id)
                .into_iter()
                .flatten()
                .copied()
                .collect(),
            design_artifacts: design
                .get(&rec.store_id)
                .into_iter()
                .flatten()
                .cloned()
                .collect(),
            source_artifacts: source.into_iter().collect(),
            tests: test_cells,
            reviews: reviews
                .get(&rec.store_id)
                .into_iter()
                .flatten()
                .cloned()
                .collect(),
        });
    }
    Ok(TraceabilityMatrix {
        rows,
        generated_at,
        store_digest: store.content_digest(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum FindingCategory {
    HlrWithoutLlr,
    LlrWithoutSource,
    LlrWithoutUnitTest,
    HlrWithoutIntegrationTest,
    TestWithoutReport,
    RequirementNotReviewed,
}

impl FindingCategory {
    pub fn as_str(self) -> &'static str {
        match self {
            FindingCategory::HlrWithoutLlr => "HLR_WITHOUT_LLR",
            FindingCategory::LlrWithoutSource => "LLR_WITHOUT_SOURCE",
            FindingCategory::LlrWithoutUnitTest => "LLR_WITHOUT_UNIT_TEST",
            FindingCategory::HlrWithoutIntegrationTest => "HLR_WITHOUT_INTEGRATION_TEST",
            FindingCategory::TestWithoutReport => "TEST_WITHOUT_REPORT",
            FindingCategory::RequirementNotReviewed => "REQUIREMENT_NOT_REVIEWED",
        }
    }
}

impl fmt::Display for FindingCategory {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Finding {
    pub category: FindingCategory,
    pub store_id: StoreId,
    pub detail: String,
}

impl fmt::Display for Finding {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}\t{}\t{}", self.category, self.store_id, self.detail)
    }
}

/// Findings sorted by (category, store_id).
pub fn completeness_check(matrix: &TraceabilityMatrix) -> Vec<Finding> {
    let mut findings = Vec::new();
    let mut push = |category, store_id, detail: String| {
        findings.push(Finding {
            category,
            store_id,
            detail,
        })
    };
    let has_test = |row: &MatrixRow, kind: ArtifactKind| row.tests.iter().any(|t| t.kind == kind);

    for row in &matrix.rows {
        let child_rows = || row.children.iter().filter_map(|c| matrix.row(c));
        match row.kind {
            RequirementKind::Hlr => {
                if !row.children.iter().any(|c| c.kind == RequirementKind::Llr) {
                    push(
                        FindingCategory::HlrWithoutLlr,
                        row.store_id,
                        "no LLR refines this HLR".into(),
                    );
                }
                let integrated = has_test(row, ArtifactKind::IntegrationTest)
                    || child_rows().any(|c| has_test(c, ArtifactKind::IntegrationTest));
                if !integrated {
                    push(
                        FindingCategory::HlrWithoutIntegrationTest,
                        row.store_id,
                        "no integration test covers this HLR or its LLRs".into(),
                    );
                }
            }
            RequirementKind::Llr => {
                if row.source_artifacts.is_empty() {
                    push(
                        FindingCategory::LlrWithoutSource,
                        row.store_id,
                        "no source implements this LLR".into(),
                    );
                }
                if !has_test(row, ArtifactKind::UnitTest) {
                    push(
                        FindingCategory::LlrWithoutUnitTest,
                        row.store_id,
                        "no unit test verifies this LLR".into(),
                    );
                }
            }
            RequirementKind::System => {}
        }
        for t in &row.tests {
            if t.reports.is_empty() {
                push(
                    FindingCategory::TestWithoutReport,
                    row.store_id,
                    format!("{} has no report", t.artifact_id),
                );
            }
        }
        if row.status == RequirementStatus::Draft && row.traced_downstream() {
            push(
                FindingCategory::RequirementNotReviewed,
                row.store_id,
                "DRAFT requirement already traced downstream".into(),
            );
        }
    }
    findings.sort();
    findings
}

pub const MATRIX_COLUMNS: [&str; 9] = [
    "store_id",
    "kind",
    "status",
    "revision",
    "design_artifacts",
    "source_artifacts",
    "tests",
    "test_reports",
    "reviews",
];

fn join_sorted<I: IntoIterator<Item = String>>(items: I) -> String {
    let set: BTreeSet<String> = items.into_iter().collect();
    set.into_iter().collect::<Vec<_>>().join(";")
}

pub fn render_review(r: &ReviewEntry) -> String {
    format!(
        "{} by {} on {}",
        r.artifact_id,
        r.reviewer,
        format_ts(&r.date)
    )
}

/// RFC 4180 quoting, LF line endings, header always present.
pub fn render_matrix_csv(matrix: &TraceabilityMatrix) -> String {
    let mut w = csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .quote_style(csv::QuoteStyle::Necessary)
        .from_writer(Vec::new());
    w.write_record(MATRIX_COLUMNS).expect("in-memory write");
    for row in &matrix.rows {
        w.write_record([
            row.store_id.to_string(),
            row.kind.to_string(),
            row.status.to_string(),
            row.revision.to_string(),
            join_sorted(row.design_artifacts.iter().cloned()),
            join_sorted(row.source_artifacts.iter().cloned()),
            join_sorted(row.tests.iter().map(|t| t.artifact_id.clone())),
            join_sorted(row.test_reports()),
            join_sorted(row.reviews.iter().map(render_review)),
        ])
        .expect("in-memory write");
    }
    String::from_utf8(w.into_inner().expect("in-memory flush")).expect("csv output is utf-8")
}
