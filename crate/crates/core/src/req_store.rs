//! The requirements repository: stable store identifiers, revisioned content,
//! status lifecycle and parent/child lineage.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::ops::Deref;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::Arc;

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

use crate::canonical::{sha256_hex, ts, Provenance, Timestamp};
use crate::tag_parser::{LineSpan, RequirementDraft, RequirementKind};

pub const STORE_HEADER: &str = "certiflow-store v1";

/// `<PREFIX>-<counter>` with the counter zero-padded to four digits.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct StoreId {
    pub kind: RequirementKind,
    pub number: u32,
}

impl StoreId {
    pub fn new(kind: RequirementKind, number: u32) -> Self {
        StoreId { kind, number }
    }
}

impl Ord for StoreId {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        (self.kind.id_prefix(), self.number).cmp(&(other.kind.id_prefix(), other.number))
    }
}

impl PartialOrd for StoreId {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}

impl fmt::Display for StoreId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}-{:04}", self.kind.id_prefix(), self.number)
    }
}

impl FromStr for StoreId {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let bad = || format!("`{s}` is not a store id");
        let (prefix, digits) = s.split_once('-').ok_or_else(bad)?;
        let kind = RequirementKind::from_id_prefix(prefix).ok_or_else(bad)?;
        if digits.len() < 4 || !digits.bytes().all(|b| b.is_ascii_digit()) {
            return Err(bad());
        }
        let number: u32 = digits.parse().map_err(|_| bad())?;
        let id = StoreId { kind, number };
        if number == 0 || id.to_string() != s {
            return Err(bad());
        }
        Ok(id)
    }
}

impl Serialize for StoreId {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for StoreId {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        String::deserialize(d)?
            .parse()
            .map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum RequirementStatus {
    Draft,
    Reviewed,
    Baselined,
}

impl RequirementStatus {
    pub fn as_str(self) -> &'static str {
        match self {
            RequirementStatus::Draft => "DRAFT",
            RequirementStatus::Reviewed => "REVIEWED",
            RequirementStatus::Baselined => "BASELINED",
        }
    }

    /// The single legal forward step, if any.
    pub fn next(self) -> Option<Self> {
        match self {
            RequirementStatus::Draft => Some(RequirementStatus::Reviewed),
            RequirementStatus::Reviewed => Some(RequirementStatus::Baselined),
            RequirementStatus::Baselined => None,
        }
    }
}

impl fmt::Display for RequirementStatus {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for RequirementStatus {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "DRAFT" => Ok(RequirementStatus::Draft),
            "REVIEWED" => Ok(RequirementStatus::Reviewed),
            "BASELINED" => Ok(RequirementStatus::Baselined),
            other => Err(format!("unknown status `{other}`")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StatusChange {
    pub from: RequirementStatus,
    pub to: RequirementStatus,
    pub evidence: String,
    pub author: String,
    #[serde(with = "ts")]
    pub at: Timestamp,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RequirementRecord {
    pub store_id: StoreId,
    pub local_key: String,
    pub kind: RequirementKind,
    pub title: String,
    pub text: String,
    pub parent_ids: Vec<StoreId>,
    pub status: RequirementStatus,
    pub revision: u32,
    pub source_path: String,
    pub line_span: LineSpan,
    pub author: String,
    #[serde(with = "ts")]
    pub created_at: Timestamp,
    #[serde(with = "ts")]
    pub updated_at: Timestamp,
    pub status_history: Vec<StatusChange>,
    /// Set when a content change knocked the record out of BASELINED.
    pub pending_anomaly_review: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum ImportAction {
    Created,
    Updated,
    Unchanged,
}

impl fmt::Display for ImportAction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ImportAction::Created => "CREATED",
            ImportAction::Updated => "UPDATED",
            ImportAction::Unchanged => "UNCHANGED",
        })
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ImportOutcome {
    pub mapping: BTreeMap<String, StoreId>,
    pub actions: Vec<(StoreId, ImportAction)>,
    /// Records whose content changed while BASELINED.
    pub baseline_resets: Vec<StoreId>,
}

impl ImportOutcome {
    pub fn count(&self, action: ImportAction) -> usize {
        self.actions.iter().filter(|(_, a)| *a == action).count()
    }

    pub fn touched(&self) -> impl Iterator<Item = StoreId> + '_ {
        self.actions
            .iter()
            .filter(|(_, a)| *a != ImportAction::Unchanged)
            .map(|(id, _)| *id)
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum StoreError {
    #[error("draft `{key}` is invalid: {reason}")]
    InvalidDraft { key: String, reason: String },
    #[error("key `{0}` appears more than once in the import batch")]
    DuplicateKey(String),
    #[error("`{child}` names unknown parent `{parent}`")]
    UnresolvedParent { child: String, parent: String },
    #[error("`{child}` may not derive from `{parent}`")]
    KindHierarchyViolation { child: String, parent: String },
    #[error("`{key}` cannot change kind from {from} to {to}")]
    KindChanged {
        key: String,
        from: RequirementKind,
        to: RequirementKind,
    },
    #[error("missing author identity")]
    MissingIdentity,
    #[error("illegal status transition {from} -> {to}")]
    IllegalTransition {
        from: RequirementStatus,
        to: RequirementStatus,
    },
    #[error("unknown requirement `{0}`")]
    UnknownId(String),
    #[error("status change requires an evidence reference")]
    MissingEvidence,
    #[error("store file line {line}: {reason}")]
    Format { line: usize, reason: String },
    #[error("store file i/o: {0}")]
    Io(String),
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct RequirementFilter {
    pub kind: Option<RequirementKind>,
    pub status: Option<RequirementStatus>,
    pub parent: Option<StoreId>,
    /// Case-insensitive substring of title or text.
    pub text: Option<String>,
}

impl RequirementFilter {
    pub fn kind(kind: RequirementKind) -> Self {
        RequirementFilter {
            kind: Some(kind),
            ..Default::default()
        }
    }

    pub fn matches(&self, r: &RequirementRecord) -> bool {
        self.kind.is_none_or(|k| r.kind == k)
            && self.status.is_none_or(|s| r.status == s)
            && self.parent.is_none_or(|p| r.parent_ids.contains(&p))
            && self.text.as_ref().is_none_or(|needle| {
                let needle = needle.to_lowercase();
                r.title.to_lowercase().contains(&needle) || r.text.to_lowercase().contains(&needle)
            })
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct RequirementStore {
    records: BTreeMap<StoreId, RequirementRecord>,
    by_key: BTreeMap<String, StoreId>,
    counters: BTreeMap<RequirementKind, u32>,
}

impl RequirementStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn get(&self, id: &StoreId) -> Option<&RequirementRecord> {
        self.records.get(id)
    }

    pub fn by_local_key(&self, key: &str) -> Option<&RequirementRecord> {
        self.by_key.get(key).and_then(|id| self.records.get(id))
    }

    pub fn records(&self) -> impl Iterator<Item = &RequirementRecord> {
        self.records.values()
    }

    pub fn counter(&self, kind: RequirementKind) -> u32 {
        self.counters.get(&kind).copied().unwrap_or(0)
    }

    pub fn children_of(&self, id: &StoreId) -> Vec<StoreId> {
        self.records
            .values()
            .filter(|r| r.parent_ids.contains(id))
            .map(|r| r.store_id)
            .collect()
    }

    /// Pure read, sorted by store id.
    pub fn query(&self, filter: &RequirementFilter) -> Vec<&RequirementRecord> {
        self.records
            .values()
            .filter(|r| filter.matches(r))
            .collect()
    }

    /// Drafts anchored in `path`, as last seen.
    pub fn drafts_in(&self, path: &str) -> Vec<RequirementDraft> {
        self.records
            .values()
            .filter(|r| r.source_path == path)
            .map(|r| RequirementDraft {
                local_key: r.local_key.clone(),
                kind: r.kind,
                title: r.title.clone(),
                text: r.text.clone(),
                parent_keys: r
                    .parent_ids
                    .iter()
                    .filter_map(|p| self.records.get(p).map(|pr| pr.local_key.clone()))
                    .collect(),
                source_path: r.source_path.clone(),
                line_span: r.line_span,
            })
            .collect()
    }

    /// Atomic: on error the store is left untouched.
    pub fn import_requirements(
        &mut self,
        drafts: &[RequirementDraft],
        prov: &Provenance,
    ) -> Result<ImportOutcome, StoreError> {
        if prov.author.trim().is_empty() {
            return Err(StoreError::MissingIdentity);
        }
        let mut sorted: Vec<&RequirementDraft> = drafts.iter().collect();
        sorted.sort_by(|a, b| a.local_key.cmp(&b.local_key));
        for pair in sorted.windows(2) {
            if pair[0].local_key == pair[1].local_key {
                return Err(StoreError::DuplicateKey(pair[0].local_key.clone()));
            }
        }
        for d in &sorted {
            d.validate().map_err(|reason| StoreError::InvalidDraft {
                key: d.local_key.clone(),
                reason,
            })?;
        }

        let mut next = self.clone();
        let mut batch: BTreeMap<&str, (StoreId, bool)> = BTreeMap::new();
        for d in &sorted {
            if let Some(existing) = next.by_local_key(&d.local_key) {
                if existing.kind != d.kind {
                    return Err(StoreError::KindChanged {
                        key: d.local_key.clone(),
                        from: existing.kind,
                        to: d.kind,
                    });
                }
                batch.insert(&d.local_key, (existing.store_id, false));
            } else {
                let counter = next.counters.entry(d.kind).or_insert(0);
                *counter += 1;
                batch.insert(&d.local_key, (StoreId::new(d.kind, *counter), true));
            }
        }

        let mut outcome = ImportOutcome::default();
        for d in &sorted {
            let mut parent_ids = Vec::with_capacity(d.parent_keys.len());
            for p in &d.parent_keys {
                let pid = batch
                    .get(p.as_str())
                    .map(|(id, _)| *id)
                    .or_else(|| next.by_key.get(p).copied())
                    .ok_or_else(|| StoreError::UnresolvedParent {
                        child: d.local_key.clone(),
                        parent: p.clone(),
                    })?;
                if d.kind.parent_kind() != Some(pid.kind) {
                    return Err(StoreError::KindHierarchyViolation {
                        child: d.local_key.clone(),
                        parent: p.clone(),
                    });
                }
                parent_ids.push(pid);
            }
            parent_ids.sort();

            let (id, is_new) = batch[d.local_key.as_str()];
            outcome.mapping.insert(d.local_key.clone(), id);
            if is_new {
                next.records.insert(
                    id,
                    RequirementRecord {
                        store_id: id,
                        local_key: d.local_key.clone(),
                        kind: d.kind,
                        title: d.title.clone(),
                        text: d.text.clone(),
                        parent_ids,
                        status: RequirementStatus::Draft,
                        revision: 1,
                        source_path: d.source_path.clone(),
                        line_span: d.line_span,
                        author: prov.author.clone(),
                        created_at: prov.at,
                        updated_at: prov.at,
                        status_history: Vec::new(),
                        pending_anomaly_review: false,
                    },
                );
                next.by_key.insert(d.local_key.clone(), id);
                outcome.actions.push((id, ImportAction::Created));
                continue;
            }

            let rec = next.records.get_mut(&id).expect("batch id resolves");
            rec.source_path = d.source_path.clone();
            rec.line_span = d.line_span;
            let changed =
                rec.title != d.title || rec.text != d.text || rec.parent_ids != parent_ids;
            if changed {
                rec.title = d.title.clone();
                rec.text = d.text.clone();
                rec.parent_ids = parent_ids;
                rec.revision += 1;
                rec.author = prov.author.clone();
                rec.updated_at = prov.at;
                if rec.status == RequirementStatus::Baselined {
                    rec.status = RequirementStatus::Draft;
                    rec.pending_anomaly_review = true;
                    outcome.baseline_resets.push(id);
                }
                outcome.actions.push((id, ImportAction::Updated));
            } else {
                outcome.actions.push((id, ImportAction::Unchanged));
            }
        }
        outcome.actions.sort();
        *self = next;
        Ok(outcome)
    }

    pub fn set_status(
        &mut self,
        id: &StoreId,
        to: RequirementStatus,
        evidence: &str,
        prov: &Provenance,
    ) -> Result<&RequirementRecord, StoreError> {
        let rec = self
            .records
            .get_mut(id)
            .ok_or_else(|| StoreError::UnknownId(id.to_string()))?;
        if rec.status.next() != Some(to) {
            return Err(StoreError::IllegalTransition {
                from: rec.status,
                to,
            });
        }
        if evidence.trim().is_empty() {
            return Err(StoreError::MissingEvidence);
        }
        if prov.author.trim().is_empty() {
            return Err(StoreError::MissingIdentity);
        }
        rec.status_history.push(StatusChange {
            from: rec.status,
            to,
            evidence: evidence.to_string(),
            author: prov.author.clone(),
            at: prov.at,
        });
        rec.status = to;
        rec.updated_at = prov.at;
        rec.pending_anomaly_review = false;
        Ok(rec)
    }

    /// Header line, counters line, then one JSON record per line in store-id order.
    pub fn to_canonical(&self) -> String {
        let mut out = String::from(STORE_HEADER);
        out.push('\n');
        out.push_str("counters");
        let mut kinds = RequirementKind::ALL.to_vec();
        kinds.sort_by_key(|k| k.id_prefix());
        for k in kinds {
            out.push_str(&format!("\t{}={}", k.id_prefix(), self.counter(k)));
        }
        out.push('\n');
        for rec in self.records.values() {
            out.push_str(&serde_json::to_string(rec).expect("record serializes"));
            out.push('\n');
        }
        out
    }

    pub fn parse(text: &str) -> Result<Self, StoreError> {
        let fmt_err = |line: usize, reason: String| StoreError::Format { line, reason };
        let mut lines = text.lines().enumerate();
        match lines.next() {
            Some((_, STORE_HEADER)) => {}
            _ => return Err(fmt_err(1, format!("expected `{STORE_HEADER}` header"))),
        }
        let (_, counters_line) = lines
            .next()
            .ok_or_else(|| fmt_err(2, "missing counters".into()))?;
        let mut store = RequirementStore::new();
        let mut fields = counters_line.split('\t');
        if fields.next() != Some("counters") {
            return Err(fmt_err(2, "missing counters".into()));
        }
        for f in fields {
            let (prefix, n) = f
                .split_once('=')
                .ok_or_else(|| fmt_err(2, format!("bad counter `{f}`")))?;
            let kind = RequirementKind::from_id_prefix(prefix)
                .ok_or_else(|| fmt_err(2, format!("bad counter `{f}`")))?;
            let n: u32 = n
                .parse()
                .map_err(|_| fmt_err(2, format!("bad counter `{f}`")))?;
            if n > 0 {
                store.counters.insert(kind, n);
            }
        }
        for (idx, line) in lines {
            if line.is_empty() {
                continue;
            }
            let rec: RequirementRecord =
                serde_json::from_str(line).map_err(|e| fmt_err(idx + 1, e.to_string()))?;
            if rec.store_id.number > store.counter(rec.kind) || rec.store_id.kind != rec.kind {
                return Err(fmt_err(
                    idx + 1,
                    format!("{} inconsistent with counters", rec.store_id),
                ));
            }
            if store
                .by_key
                .insert(rec.local_key.clone(), rec.store_id)
                .is_some()
            {
                return Err(fmt_err(
                    idx + 1,
                    format!("duplicate key `{}`", rec.local_key),
                ));
            }
            if store.records.insert(rec.store_id, rec).is_some() {
                return Err(fmt_err(idx + 1, "duplicate store id".into()));
            }
        }
        Ok(store)
    }

    pub fn content_digest(&self) -> String {
        sha256_hex(self.to_canonical())
    }

    pub fn snapshot(&self) -> StoreSnapshot {
        StoreSnapshot {
            digest: self.content_digest(),
            store: Arc::new(self.clone()),
        }
    }

    /// Ids reachable upward from `id` through parent links.
    pub fn ancestors(&self, id: &StoreId) -> BTreeSet<StoreId> {
        let mut seen = BTreeSet::new();
        let mut stack: Vec<StoreId> = self
            .get(id)
            .map(|r| r.parent_ids.clone())
            .unwrap_or_default();
        while let Some(p) = stack.pop() {
            if seen.insert(p) {
                if let Some(r) = self.get(&p) {
                    stack.extend(r.parent_ids.iter().copied());
                }
            }
        }
        seen
    }
}

/// Immutable, shareable view of the store with its content digest.
#[derive(Debug, Clone)]
pub struct StoreSnapshot {
    store: Arc<RequirementStore>,
    digest: String,
}

impl StoreSnapshot {
    pub fn content_digest(&self) -> &str {
        &self.digest
    }

    pub fn next_counters(&self) -> BTreeMap<RequirementKind, u32> {
        RequirementKind::ALL
            .iter()
            .map(|k| (*k, self.store.counter(*k)))
            .collect()
    }
}

impl Deref for StoreSnapshot {
    type Target = RequirementStore;

    fn deref(&self) -> &RequirementStore {
        &self.store
    }
}

impl PartialEq for StoreSnapshot {
    fn eq(&self, other: &Self) -> bool {
        self.digest == other.digest
    }
}

/// Backend for the requirements repository.
pub trait RequirementRepository {
    fn load(&self) -> Result<RequirementStore, StoreError>;
    fn persist(&self, store: &RequirementStore) -> Result<(), StoreError>;
}

/// Single versioned file, written via temp file and rename.
#[derive(Debug, Clone)]
pub struct FileRequirementRepository {
    path: PathBuf,
}

impl FileRequirementRepository {
    pub fn new(path: impl Into<PathBuf>) -> Self {
        FileRequirementRepository { path: path.into() }
    }

    pub fn path(&self) -> &Path {
        &self.path
    }
}

impl RequirementRepository for FileRequirementRepository {
    fn load(&self) -> Result<RequirementStore, StoreError> {
        match std::fs::read_to_string(&self.path) {
            Ok(text) => RequirementStore::parse(&text),
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(RequirementStore::new()),
            Err(e) => Err(StoreError::Io(e.to_string())),
        }
    }

    fn persist(&self, store: &RequirementStore) -> Result<(), StoreError> {
        crate::workspace::write_atomic(&self.path, store.to_canonical().as_bytes())
            .map_err(|e| StoreError::Io(e.to_string()))
    }
}
