//! Merge-forward data packages, the SCI report with its `data-package/`
//! folder, and the hardening validation of a release candidate.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;
use walkdir::WalkDir;

use crate::canonical::{sha256_hex, ts, HashAlgorithm, Provenance, Timestamp};
use crate::docgen::{self, pipe_table, DocError, DocumentTemplate, Meta, RenderedDocument};
use crate::gateway::adapters::{AdapterError, VcsAdapter, WmtAdapter};
use crate::req_store::RequirementStore;
use crate::trace::{
    completeness_check, render_matrix_csv, Anomaly, ArtifactIndex, ArtifactKind, TraceabilityMatrix,
};
use crate::workflow::{Pbi, Stage, TaskState};
use crate::workspace::write_atomic;

pub const PACKAGE_HEADER: &str = "certiflow-package v1";

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum PackageKind {
    Incremental,
    CertifiableRelease,
}

impl fmt::Display for PackageKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            PackageKind::Incremental => "INCREMENTAL",
            PackageKind::CertifiableRelease => "CERTIFIABLE_RELEASE",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub artifact_id: String,
    pub path: String,
    pub kind: ArtifactKind,
    pub content_hash: String,
    pub commit_id: String,
    pub stage: Stage,
    pub supersedes: Option<String>,
}

impl ManifestEntry {
    fn sort_key(&self) -> (ArtifactKind, &str, &str) {
        (self.kind, &self.path, &self.commit_id)
    }

    fn line(&self) -> String {
        [
            self.artifact_id.as_str(),
            &self.path,
            self.kind.as_str(),
            &self.content_hash,
            &self.commit_id,
            self.stage.as_str(),
            self.supersedes.as_deref().unwrap_or("-"),
        ]
        .join("\t")
    }

    fn parse_line(line: &str) -> Result<Self, String> {
        let f: Vec<&str> = line.split('\t').collect();
        let [artifact_id, path, kind, content_hash, commit_id, stage, supersedes] = f[..] else {
            return Err(format!(
                "expected 7 tab-separated fields, found {}",
                f.len()
            ));
        };
        Ok(ManifestEntry {
            artifact_id: artifact_id.into(),
            path: path.into(),
            kind: kind.parse()?,
            content_hash: content_hash.into(),
            commit_id: commit_id.into(),
            stage: stage.parse()?,
            supersedes: (supersedes != "-").then(|| supersedes.to_string()),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DataPackage {
    pub package_version: u32,
    pub kind: PackageKind,
    pub stage_coverage: BTreeSet<Stage>,
    pub predecessor_version: Option<u32>,
    #[serde(skip)]
    pub manifest: Vec<ManifestEntry>,
    #[serde(with = "ts")]
    pub created_at: Timestamp,
    pub creator: String,
}

impl DataPackage {
    /// One tab-separated line per entry, sorted, LF-terminated.
    pub fn manifest_text(&self) -> String {
        self.manifest.iter().map(|e| e.line() + "\n").collect()
    }

    pub fn manifest_digest(&self) -> String {
        sha256_hex(self.manifest_text())
    }

    pub fn entry(&self, artifact_id: &str) -> Option<&ManifestEntry> {
        self.manifest.iter().find(|e| e.artifact_id == artifact_id)
    }

    pub fn covers_all_stages(&self) -> bool {
        Stage::ALL.iter().all(|s| self.stage_coverage.contains(s))
    }

    pub fn missing_stages(&self) -> Vec<Stage> {
        Stage::ALL
            .into_iter()
            .filter(|s| !self.stage_coverage.contains(s))
            .collect()
    }

    pub fn to_canonical(&self) -> String {
        let meta = serde_json::to_string(self).expect("package metadata serializes");
        format!("{PACKAGE_HEADER}\n{meta}\n{}", self.manifest_text())
    }

    pub fn parse(text: &str) -> Result<Self, PackageError> {
        let err = |line: usize, reason: String| PackageError::Format { line, reason };
        let mut lines = text.lines();
        if lines.next() != Some(PACKAGE_HEADER) {
            return Err(err(1, format!("expected header `{PACKAGE_HEADER}`")));
        }
        let meta = lines
            .next()
            .ok_or_else(|| err(2, "missing package metadata".into()))?;
        let mut pkg: DataPackage = serde_json::from_str(meta).map_err(|e| err(2, e.to_string()))?;
        for (i, line) in lines.enumerate() {
            pkg.manifest
                .push(ManifestEntry::parse_line(line).map_err(|r| err(i + 3, r))?);
        }
        Ok(pkg)
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum PackageError {
    #[error("stage incomplete: {}", .0.join(", "))]
    StageIncomplete(Vec<String>),
    #[error("integrity violation: {}", .0.join("; "))]
    IntegrityViolation(Vec<String>),
    #[error("ticket `{0}` resolves to no packaged artifact")]
    UnresolvedTicket(String),
    #[error("retrieved bytes of {0} do not match the recorded hash")]
    HashMismatch(String),
    #[error("package does not cover: {}", .0.iter().map(|s| s.as_str()).collect::<Vec<_>>().join(", "))]
    CoverageGap(Vec<Stage>),
    #[error("package cannot be promoted: {0}")]
    NotPromotable(String),
    #[error(transparent)]
    Adapter(#[from] AdapterError),
    #[error(transparent)]
    Doc(#[from] DocError),
    #[error("package file line {line}: {reason}")]
    Format { line: usize, reason: String },
    #[error("i/o: {0}")]
    Io(String),
}

fn io(e: impl fmt::Display) -> PackageError {
    PackageError::Io(e.to_string())
}

/// Tasks that must be DONE before the stage package can be assembled:
/// everything ahead of the packaging task.
fn gate_blockers(stage: Stage, pbis: &[&Pbi]) -> Vec<String> {
    let scoped: Vec<&&Pbi> = pbis.iter().filter(|p| p.stage == stage).collect();
    if scoped.is_empty() {
        return vec![format!("no PBI for stage {stage}")];
    }
    let mut blockers = Vec::new();
    for pbi in scoped {
        for t in pbi.tasks.iter().take_while(|t| !t.task_id.is_packaging()) {
            if t.state != TaskState::Done {
                blockers.push(format!("{}:{}", pbi.pbi_id, t.task_id));
            }
        }
    }
    blockers
}

pub fn assemble_incremental(
    stage: Stage,
    index: &ArtifactIndex,
    pbis: &[&Pbi],
    predecessor: Option<&DataPackage>,
    prov: &Provenance,
) -> Result<DataPackage, PackageError> {
    let blockers = gate_blockers(stage, pbis);
    if !blockers.is_empty() {
        return Err(PackageError::StageIncomplete(blockers));
    }
    let mut manifest: Vec<ManifestEntry> = Vec::new();
    let mut live: BTreeMap<(ArtifactKind, String), usize> = BTreeMap::new();
    if let Some(pred) = predecessor {
        let mut violations = Vec::new();
        for e in &pred.manifest {
            match index.get(&e.artifact_id) {
                None => violations.push(format!("{} is not registered", e.artifact_id)),
                Some(r)
                    if r.content_hash != e.content_hash || r.path != e.path || r.kind != e.kind =>
                {
                    violations.push(format!(
                        "{} disagrees with its registered record",
                        e.artifact_id
                    ))
                }
                Some(_) => {}
            }
            live.insert((e.kind, e.path.clone()), manifest.len());
            // Chains only point one package back.
            manifest.push(ManifestEntry {
                supersedes: None,
                ..e.clone()
            });
        }
        if !violations.is_empty() {
            return Err(PackageError::IntegrityViolation(violations));
        }
    }
    let known: BTreeSet<String> = manifest.iter().map(|e| e.artifact_id.clone()).collect();
    for r in index.current().into_iter().filter(|r| r.stage <= stage) {
        if known.contains(&r.artifact_id) {
            continue;
        }
        let entry = ManifestEntry {
            artifact_id: r.artifact_id.clone(),
            path: r.path.clone(),
            kind: r.kind,
            content_hash: r.content_hash.clone(),
            commit_id: r.commit_id.clone(),
            stage: r.stage,
            supersedes: None,
        };
        match live.get(&(r.kind, r.path.clone())) {
            // The superseded entry is replaced; the chain keeps it auditable.
            Some(&slot) => {
                let old = std::mem::replace(&mut manifest[slot], entry);
                manifest[slot].supersedes = Some(old.artifact_id);
            }
            None => {
                live.insert((r.kind, r.path.clone()), manifest.len());
                manifest.push(entry);
            }
        }
    }
    manifest.sort_by(|a, b| a.sort_key().cmp(&b.sort_key()));
    let mut stage_coverage = predecessor
        .map(|p| p.stage_coverage.clone())
        .unwrap_or_default();
    stage_coverage.insert(stage);
    Ok(DataPackage {
        package_version: predecessor.map_or(1, |p| p.package_version + 1),
        kind: PackageKind::Incremental,
        stage_coverage,
        predecessor_version: predecessor.map(|p| p.package_version),
        manifest,
        created_at: prov.at,
        creator: prov.author.clone(),
    })
}

/// Violations of merge-forward monotonicity between consecutive packages.
pub fn verify_monotonic(prev: &DataPackage, next: &DataPackage) -> Vec<String> {
    let mut out = Vec::new();
    let ids: BTreeSet<&str> = next
        .manifest
        .iter()
        .map(|e| e.artifact_id.as_str())
        .collect();
    let superseded: BTreeSet<&str> = next
        .manifest
        .iter()
        .filter_map(|e| e.supersedes.as_deref())
        .collect();
    for e in &prev.manifest {
        if !ids.contains(e.artifact_id.as_str()) && !superseded.contains(e.artifact_id.as_str()) {
            out.push(format!("{} dropped", e.artifact_id));
        }
    }
    for e in &next.manifest {
        if let Some(s) = &e.supersedes {
            match prev.entry(s) {
                Some(p) if p.path == e.path && p.kind == e.kind => {}
                Some(_) => out.push(format!(
                    "{} supersedes {s} with a different path or kind",
                    e.artifact_id
                )),
                None => out.push(format!(
                    "{} supersedes {s}, absent from the predecessor",
                    e.artifact_id
                )),
            }
        }
    }
    if next.predecessor_version != Some(prev.package_version) {
        out.push(format!(
            "package {} does not follow {}",
            next.package_version, prev.package_version
        ));
    }
    let mut seen = BTreeSet::new();
    for e in &next.manifest {
        if !seen.insert(&e.artifact_id) {
            out.push(format!("{} listed twice", e.artifact_id));
        }
    }
    out
}

pub fn promote(
    package: &DataPackage,
    findings: &[HardeningFinding],
) -> Result<DataPackage, PackageError> {
    if !findings.is_empty() {
        return Err(PackageError::NotPromotable(format!(
            "{} hardening findings outstanding",
            findings.len()
        )));
    }
    if !package.covers_all_stages() {
        return Err(PackageError::CoverageGap(package.missing_stages()));
    }
    Ok(DataPackage {
        kind: PackageKind::CertifiableRelease,
        ..package.clone()
    })
}

// ---------------------------------------------------------------------------
// SCI

pub struct SciInputs<'a> {
    pub package: &'a DataPackage,
    /// Every package so far, oldest first, ending with `package`.
    pub lineage: &'a [DataPackage],
    pub tickets: &'a [String],
    pub index: &'a ArtifactIndex,
    pub store: &'a RequirementStore,
    pub matrix: &'a TraceabilityMatrix,
    pub open_anomalies: &'a [Anomaly],
    pub repo: &'a str,
    pub hash: HashAlgorithm,
    /// project, release_version, generated_at.
    pub meta: Meta,
    pub template: Option<&'a DocumentTemplate>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SciReport {
    pub document: RenderedDocument,
    pub folder: PathBuf,
    /// Folder-relative path and digest of every file written from the manifest.
    pub written: Vec<(String, String)>,
    pub ticket_artifacts: BTreeMap<String, Vec<String>>,
    pub open_anomaly_count: usize,
}

pub const DATA_PACKAGE_DIR: &str = "data-package";
pub const SCI_REPORT_FILE: &str = "sci-report.md";
pub const MANIFEST_FILE: &str = "manifest.txt";

fn folder_path(e: &ManifestEntry, ticketed: bool) -> Option<String> {
    if ticketed {
        return Some(format!("artifacts/{}/{}", e.kind, e.path));
    }
    match e.kind {
        ArtifactKind::GeneratedDoc => Some(format!("docs/{}", e.path)),
        ArtifactKind::Matrix => Some(format!("matrices/{}", e.path)),
        _ => None,
    }
}

fn sci_meta(inputs: &SciInputs, ticket_artifacts: &BTreeMap<String, Vec<String>>) -> Meta {
    let pkg = inputs.package;
    let mut meta = inputs.meta.clone();
    for (k, d) in [
        ("project", "unnamed project"),
        ("release_version", "unversioned"),
        ("generated_at", "unspecified"),
    ] {
        meta.entry(k.to_string()).or_insert_with(|| d.to_string());
    }
    meta.insert("package_version".into(), pkg.package_version.to_string());
    meta.insert("package_kind".into(), pkg.kind.to_string());
    meta.insert(
        "stage_coverage".into(),
        pkg.stage_coverage
            .iter()
            .map(|s| s.as_str())
            .collect::<Vec<_>>()
            .join(", "),
    );
    let rows: Vec<Vec<String>> = pkg
        .manifest
        .iter()
        .map(|e| {
            vec![
                e.artifact_id.clone(),
                e.kind.to_string(),
                e.stage.to_string(),
                e.content_hash.clone(),
                e.supersedes.clone().unwrap_or_else(|| "-".into()),
            ]
        })
        .collect();
    meta.insert(
        "manifest_table".into(),
        format!(
            "Entries: {}\n\n{}",
            rows.len(),
            pipe_table(
                &["artifact_id", "kind", "stage", "content_hash", "supersedes"],
                &rows
            )
        ),
    );
    meta.insert("store_digest".into(), inputs.store.content_digest());
    let baseline: Vec<Vec<String>> = inputs
        .store
        .records()
        .map(|r| {
            vec![
                r.store_id.to_string(),
                r.revision.to_string(),
                r.status.to_string(),
            ]
        })
        .collect();
    meta.insert(
        "baseline_table".into(),
        pipe_table(&["store_id", "revision", "status"], &baseline),
    );
    let matrices: Vec<String> = pkg
        .manifest
        .iter()
        .filter(|e| e.kind == ArtifactKind::Matrix)
        .map(|e| format!("- {}", e.artifact_id))
        .collect();
    meta.insert(
        "matrix_reference".into(),
        format!(
            "{}\n\nCurrent matrix digest: {}",
            if matrices.is_empty() {
                "_No matrix in the manifest._".to_string()
            } else {
                matrices.join("\n")
            },
            sha256_hex(render_matrix_csv(inputs.matrix))
        ),
    );
    let mut anomalies = format!("Open anomalies: {}", inputs.open_anomalies.len());
    for a in inputs.open_anomalies {
        anomalies.push_str(&format!(
            "\n- {} {} {}: {}",
            a.anomaly_id, a.kind, a.subject, a.detail
        ));
    }
    meta.insert("open_anomalies".into(), anomalies);
    meta.insert(
        "lineage".into(),
        inputs
            .lineage
            .iter()
            .map(|p| {
                format!(
                    "v{} {} [{}] {}",
                    p.package_version,
                    p.kind,
                    p.stage_coverage
                        .iter()
                        .map(|s| s.as_str())
                        .collect::<Vec<_>>()
                        .join(", "),
                    &p.manifest_digest()[..12]
                )
            })
            .collect::<Vec<_>>()
            .join(" -> "),
    );
    let ticket_rows: Vec<Vec<String>> = ticket_artifacts
        .iter()
        .map(|(t, ids)| vec![t.clone(), ids.join("; ")])
        .collect();
    meta.insert(
        "ticket_table".into(),
        pipe_table(&["ticket", "artifacts"], &ticket_rows),
    );
    meta
}

/// Writes `data-package/` under `out_dir` and renders the SCI report.
pub fn generate_sci(
    inputs: &SciInputs,
    wmt: &dyn WmtAdapter,
    vcs: &dyn VcsAdapter,
    out_dir: &Path,
) -> Result<SciReport, PackageError> {
    let pkg = inputs.package;
    if !pkg.covers_all_stages() {
        return Err(PackageError::CoverageGap(pkg.missing_stages()));
    }
    let resolved = wmt.resolve_tickets(inputs.tickets).map_err(|e| match e {
        AdapterError::UnresolvedTicket(t) => PackageError::UnresolvedTicket(t),
        other => PackageError::Adapter(other),
    })?;
    let mut ticket_artifacts = BTreeMap::new();
    let mut ticketed = BTreeSet::new();
    for (ticket, pbis) in &resolved {
        let ids: Vec<String> = pkg
            .manifest
            .iter()
            .filter(|e| {
                inputs
                    .index
                    .get(&e.artifact_id)
                    .is_some_and(|r| r.pbi_refs.iter().any(|p| pbis.contains(p)))
            })
            .map(|e| e.artifact_id.clone())
            .collect();
        if ids.is_empty() {
            return Err(PackageError::UnresolvedTicket(ticket.clone()));
        }
        ticketed.extend(ids.iter().cloned());
        ticket_artifacts.insert(ticket.clone(), ids);
    }

    let mut files: Vec<(String, Vec<u8>, String)> = Vec::new();
    for e in &pkg.manifest {
        let targets: Vec<String> = [
            folder_path(e, false),
            ticketed
                .contains(&e.artifact_id)
                .then(|| folder_path(e, true))
                .flatten(),
        ]
        .into_iter()
        .flatten()
        .collect();
        if targets.is_empty() {
            continue;
        }
        let bytes = vcs.fetch_file(inputs.repo, &e.commit_id, &e.path)?;
        let digest = inputs.hash.digest_hex(&bytes);
        if digest != e.content_hash {
            return Err(PackageError::HashMismatch(e.artifact_id.clone()));
        }
        for t in targets {
            files.push((t, bytes.clone(), digest.clone()));
        }
    }

    let meta = sci_meta(inputs, &ticket_artifacts);
    let template = match inputs.template {
        Some(t) => t.clone(),
        None => docgen::builtin_sci_template(),
    };
    let document = docgen::render_meta_only(&template, &meta)?;

    let final_dir = out_dir.join(DATA_PACKAGE_DIR);
    let tmp = out_dir.join(format!(".{DATA_PACKAGE_DIR}.tmp-{}", std::process::id()));
    let _ = fs::remove_dir_all(&tmp);
    fs::create_dir_all(&tmp).map_err(io)?;
    write_atomic(&tmp.join(MANIFEST_FILE), pkg.manifest_text().as_bytes()).map_err(io)?;
    write_atomic(&tmp.join(SCI_REPORT_FILE), document.body.as_bytes()).map_err(io)?;
    let mut written = Vec::new();
    for (rel, bytes, digest) in files {
        write_atomic(&tmp.join(&rel), &bytes).map_err(io)?;
        written.push((rel, digest));
    }
    if final_dir.exists() {
        let old = out_dir.join(format!(".{DATA_PACKAGE_DIR}.old-{}", std::process::id()));
        let _ = fs::remove_dir_all(&old);
        fs::rename(&final_dir, &old).map_err(io)?;
        fs::rename(&tmp, &final_dir).map_err(io)?;
        fs::remove_dir_all(&old).map_err(io)?;
    } else {
        fs::rename(&tmp, &final_dir).map_err(io)?;
    }
    written.sort();
    Ok(SciReport {
        document,
        folder: final_dir,
        written,
        ticket_artifacts,
        open_anomaly_count: inputs.open_anomalies.len(),
    })
}

/// Re-hashes every file below `docs/`, `matrices/` and `artifacts/` against
/// the manifest and checks `manifest.txt`. Returns the number of files
/// verified.
pub fn verify_data_package(
    folder: &Path,
    package: &DataPackage,
    hash: HashAlgorithm,
) -> Result<usize, PackageError> {
    let manifest = fs::read_to_string(folder.join(MANIFEST_FILE)).map_err(io)?;
    let mut problems = Vec::new();
    if manifest != package.manifest_text() {
        problems.push("manifest.txt differs from the package manifest".to_string());
    }
    let mut verified = 0;
    for entry in WalkDir::new(folder).sort_by_file_name() {
        let entry = entry.map_err(io)?;
        if !entry.file_type().is_file() {
            continue;
        }
        let rel: Vec<String> = entry
            .path()
            .strip_prefix(folder)
            .expect("walk stays under folder")
            .components()
            .map(|c| c.as_os_str().to_string_lossy().into_owned())
            .collect();
        let rel_str = rel.join("/");
        if rel_str == MANIFEST_FILE || rel_str == SCI_REPORT_FILE {
            continue;
        }
        let expected = match rel.first().map(String::as_str) {
            Some("docs") => package
                .manifest
                .iter()
                .find(|e| e.kind == ArtifactKind::GeneratedDoc && e.path == rel[1..].join("/")),
            Some("matrices") => package
                .manifest
                .iter()
                .find(|e| e.kind == ArtifactKind::Matrix && e.path == rel[1..].join("/")),
            Some("artifacts") if rel.len() > 2 => package
                .manifest
                .iter()
                .find(|e| e.kind.as_str() == rel[1] && e.path == rel[2..].join("/")),
            _ => None,
        };
        let Some(e) = expected else {
            problems.push(format!("{rel_str} is not in the manifest"));
            continue;
        };
        let bytes = fs::read(entry.path()).map_err(io)?;
        if hash.digest_hex(&bytes) != e.content_hash {
            return Err(PackageError::HashMismatch(e.artifact_id.clone()));
        }
        verified += 1;
    }
    if problems.is_empty() {
        Ok(verified)
    } else {
        Err(PackageError::IntegrityViolation(problems))
    }
}

// ---------------------------------------------------------------------------
// Hardening

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum HardeningCategory {
    IncompleteTrace,
    OpenAnomaly,
    MissingPackageEvidence,
    MissingDocument,
    CoverageGap,
    StaleMatrix,
}

impl HardeningCategory {
    pub fn as_str(self) -> &'static str {
        match self {
            HardeningCategory::IncompleteTrace => "INCOMPLETE_TRACE",
            HardeningCategory::OpenAnomaly => "OPEN_ANOMALY",
            HardeningCategory::MissingPackageEvidence => "MISSING_PACKAGE_EVIDENCE",
            HardeningCategory::MissingDocument => "MISSING_DOCUMENT",
            HardeningCategory::CoverageGap => "COVERAGE_GAP",
            HardeningCategory::StaleMatrix => "STALE_MATRIX",
        }
    }
}

impl fmt::Display for HardeningCategory {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct HardeningFinding {
    pub category: HardeningCategory,
    pub subject: String,
    pub detail: String,
}

impl fmt::Display for HardeningFinding {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}\t{}\t{}", self.category, self.subject, self.detail)
    }
}

/// The SRD is recognised by its file name.
pub fn is_srd_path(path: &str) -> bool {
    path.rsplit('/')
        .next()
        .is_some_and(|n| n.starts_with("srd"))
}

pub fn validate_hardening(
    package: &DataPackage,
    store: &RequirementStore,
    matrix: &TraceabilityMatrix,
    open_anomalies: &[Anomaly],
    pbis: &[&Pbi],
) -> Vec<HardeningFinding> {
    let mut out = Vec::new();
    let mut push = |category, subject: String, detail: String| {
        out.push(HardeningFinding {
            category,
            subject,
            detail,
        })
    };
    for f in completeness_check(matrix) {
        push(
            HardeningCategory::IncompleteTrace,
            f.store_id.to_string(),
            format!("{}: {}", f.category, f.detail),
        );
    }
    for a in open_anomalies {
        push(
            HardeningCategory::OpenAnomaly,
            a.anomaly_id.clone(),
            format!("{} on {}: {}", a.kind, a.subject, a.detail),
        );
    }
    for stage in Stage::ALL {
        let evidenced = pbis.iter().filter(|p| p.stage == stage).any(|p| {
            p.tasks.iter().any(|t| {
                t.task_id.is_packaging() && t.state == TaskState::Done && !t.evidence.is_empty()
            })
        });
        if !evidenced {
            push(
                HardeningCategory::MissingPackageEvidence,
                stage.to_string(),
                "no completed packaging task with evidence".into(),
            );
        }
    }
    if !package
        .manifest
        .iter()
        .any(|e| e.kind == ArtifactKind::GeneratedDoc && is_srd_path(&e.path))
    {
        push(
            HardeningCategory::MissingDocument,
            "SRD".into(),
            "no SRD in the manifest".into(),
        );
    }
    if !package
        .manifest
        .iter()
        .any(|e| e.kind == ArtifactKind::Matrix)
    {
        push(
            HardeningCategory::MissingDocument,
            "MATRIX".into(),
            "no traceability matrix in the manifest".into(),
        );
    }
    for stage in package.missing_stages() {
        push(
            HardeningCategory::CoverageGap,
            stage.to_string(),
            "stage not covered by the package".into(),
        );
    }
    if matrix.store_digest != store.content_digest() {
        push(
            HardeningCategory::StaleMatrix,
            "MATRIX".into(),
            "matrix was built from a different requirement baseline".into(),
        );
    }
    out.sort();
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::canonical::parse_ts;
    use crate::trace::ArtifactRecord;
    use crate::workflow::TaskId;

    fn prov() -> Provenance {
        Provenance::new("erin", parse_ts("2025-06-01T10:00:00Z").unwrap()).unwrap()
    }

    fn reg(
        index: &mut ArtifactIndex,
        kind: ArtifactKind,
        path: &str,
        commit: &str,
        stage: Stage,
    ) -> String {
        let r = ArtifactRecord::new(
            kind,
            path,
            commit,
            &sha256_hex(format!("{path}@{commit}")),
            stage,
            vec![],
            &prov(),
        );
        index.register(r, &|_| true).unwrap()
    }

    fn ready_pbi(stage: Stage) -> Pbi {
        let mut p = Pbi::new("PBI-1", "t", stage, "1.0", "s1", vec![], &prov()).unwrap();
        for t in p.tasks.iter_mut().take_while(|t| !t.task_id.is_packaging()) {
            t.state = TaskState::Done;
        }
        p
    }

    #[test]
    fn first_package() {
        let mut idx = ArtifactIndex::new();
        for p in ["docs/a.md", "docs/b.md", "docs/c.md"] {
            reg(
                &mut idx,
                ArtifactKind::SpecDoc,
                p,
                "c1",
                Stage::Specification,
            );
        }
        let pbi = ready_pbi(Stage::Specification);
        let pkg = assemble_incremental(Stage::Specification, &idx, &[&pbi], None, &prov()).unwrap();
        assert_eq!(pkg.package_version, 1);
        assert_eq!(pkg.manifest.len(), 3);
        assert_eq!(pkg.predecessor_version, None);
        assert_eq!(DataPackage::parse(&pkg.to_canonical()).unwrap(), pkg);
    }

    #[test]
    fn unfinished_review_blocks_assembly() {
        let idx = ArtifactIndex::new();
        let mut pbi = ready_pbi(Stage::Specification);
        pbi.tasks
            .iter_mut()
            .find(|t| t.task_id == TaskId::SystemDesignReview)
            .unwrap()
            .state = TaskState::InProgress;
        assert_eq!(
            assemble_incremental(Stage::Specification, &idx, &[&pbi], None, &prov()).unwrap_err(),
            PackageError::StageIncomplete(vec!["PBI-1:SystemDesignReview".into()])
        );
        assert!(matches!(
            assemble_incremental(Stage::Specification, &idx, &[], None, &prov()),
            Err(PackageError::StageIncomplete(_))
        ));
    }

    #[test]
    fn second_package_supersedes_changed_entry() {
        let mut idx = ArtifactIndex::new();
        for p in ["docs/a.md", "docs/b.md", "docs/c.md"] {
            reg(
                &mut idx,
                ArtifactKind::SpecDoc,
                p,
                "c1",
                Stage::Specification,
            );
        }
        let spec = ready_pbi(Stage::Specification);
        let p1 = assemble_incremental(Stage::Specification, &idx, &[&spec], None, &prov()).unwrap();
        reg(
            &mut idx,
            ArtifactKind::Source,
            "src/x.c",
            "c2",
            Stage::SwImplementation,
        );
        reg(
            &mut idx,
            ArtifactKind::Source,
            "src/y.c",
            "c2",
            Stage::SwImplementation,
        );
        let changed = reg(
            &mut idx,
            ArtifactKind::SpecDoc,
            "docs/b.md",
            "c2",
            Stage::Specification,
        );
        let imp = ready_pbi(Stage::SwImplementation);
        let p2 = assemble_incremental(Stage::SwImplementation, &idx, &[&imp], Some(&p1), &prov())
            .unwrap();
        assert_eq!(p2.package_version, 2);
        assert_eq!(p2.manifest.len(), 5);
        let chained: Vec<_> = p2
            .manifest
            .iter()
            .filter(|e| e.supersedes.is_some())
            .collect();
        assert_eq!(chained.len(), 1);
        assert_eq!(chained[0].artifact_id, changed);
        assert!(verify_monotonic(&p1, &p2).is_empty());
        let again =
            assemble_incremental(Stage::SwImplementation, &idx, &[&imp], Some(&p1), &prov())
                .unwrap();
        assert_eq!(again.manifest_text(), p2.manifest_text());
        let test = ready_pbi(Stage::SwTesting);
        let p3 =
            assemble_incremental(Stage::SwTesting, &idx, &[&test], Some(&p2), &prov()).unwrap();
        assert!(verify_monotonic(&p2, &p3).is_empty());
    }

    #[test]
    fn predecessor_disagreeing_with_index_is_rejected() {
        let mut idx = ArtifactIndex::new();
        reg(
            &mut idx,
            ArtifactKind::SpecDoc,
            "docs/a.md",
            "c1",
            Stage::Specification,
        );
        let spec = ready_pbi(Stage::Specification);
        let mut p1 =
            assemble_incremental(Stage::Specification, &idx, &[&spec], None, &prov()).unwrap();
        p1.manifest[0].content_hash = "00".into();
        let imp = ready_pbi(Stage::SwImplementation);
        assert!(matches!(
            assemble_incremental(Stage::SwImplementation, &idx, &[&imp], Some(&p1), &prov()),
            Err(PackageError::IntegrityViolation(_))
        ));
    }

    #[test]
    fn dropped_entry_breaks_monotonicity() {
        let mut idx = ArtifactIndex::new();
        reg(
            &mut idx,
            ArtifactKind::SpecDoc,
            "docs/a.md",
            "c1",
            Stage::Specification,
        );
        let spec = ready_pbi(Stage::Specification);
        let p1 = assemble_incremental(Stage::Specification, &idx, &[&spec], None, &prov()).unwrap();
        let mut p2 = p1.clone();
        p2.package_version = 2;
        p2.predecessor_version = Some(1);
        p2.manifest.clear();
        assert_eq!(
            verify_monotonic(&p1, &p2),
            vec!["SPEC_DOC:docs/a.md@c1 dropped".to_string()]
        );
    }
}
