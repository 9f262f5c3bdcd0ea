//! Project configuration: one `key = value` per line, lists comma-separated,
//! `#` comments. Unknown and repeated keys are rejected.

use std::fmt;
use std::path::{Path, PathBuf};

use globset::{Glob, GlobBuilder, GlobMatcher, GlobSet, GlobSetBuilder};
use regex::Regex;
use thiserror::Error;

use super::adapters::{AdapterError, LocalVcs, LocalWmt};
use crate::canonical::HashAlgorithm;
use crate::tag_parser::{CommentSyntax, CommentSyntaxMap};
use crate::trace::ArtifactKind;

pub const CONFIG_ENV: &str = "CERTIFLOW_CONFIG";

const DEFAULT_KIND_RULES: &str = "tests/unit/**:UNIT_TEST, tests/integration/**:INTEGRATION_TEST, \
tests/hsi/**:HSI_TEST, tests/system/**:SYSTEM_TEST, tests/reports/**:TEST_REPORT, \
docs/reviews/**:REVIEW_CHECKLIST, docs/design/**:DESIGN_DOC, docs/generated/**:GENERATED_DOC, \
docs/**:SPEC_DOC, src/**:SOURCE";

const KEYS: [&str; 21] = [
    "repo",
    "traced_prefixes",
    "requirement_globs",
    "comment_syntax",
    "artifact_kinds",
    "srd_template",
    "design_template",
    "sci_template",
    "checklist_catalog",
    "ticket_pattern",
    "docs_branch",
    "hash_algorithm",
    "vcs_adapter",
    "wmt_adapter",
    "rmt_adapter",
    "vcs_root",
    "wmt_table",
    "state_dir",
    "project_name",
    "release_version",
    "signing_hook",
];

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ConfigError {
    #[error("config line {line}: {reason}")]
    Invalid { line: usize, reason: String },
    #[error("cannot read config {path}: {reason}")]
    Io { path: String, reason: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AdapterChoice {
    Local,
    Remote,
}

impl fmt::Display for AdapterChoice {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            AdapterChoice::Local => "local",
            AdapterChoice::Remote => "remote",
        })
    }
}

#[derive(Debug, Clone)]
pub struct KindRule {
    pub pattern: String,
    pub kind: ArtifactKind,
    matcher: GlobMatcher,
}

#[derive(Debug, Clone)]
pub struct ProjectConfig {
    pub base_dir: PathBuf,
    pub traced_prefixes: Vec<String>,
    pub requirement_globs: Vec<String>,
    requirement_set: GlobSet,
    pub comment_syntax: CommentSyntaxMap,
    pub artifact_kinds: Vec<KindRule>,
    pub srd_template: Option<PathBuf>,
    pub design_template: Option<PathBuf>,
    pub sci_template: Option<PathBuf>,
    pub checklist_catalog: Option<PathBuf>,
    pub ticket_pattern: Regex,
    pub docs_branch: String,
    pub hash_algorithm: HashAlgorithm,
    pub vcs_adapter: AdapterChoice,
    pub wmt_adapter: AdapterChoice,
    pub rmt_adapter: AdapterChoice,
    pub vcs_root: PathBuf,
    pub wmt_table: PathBuf,
    pub state_dir: PathBuf,
    /// Repository the docs branch lives in.
    pub repo: String,
    pub project_name: String,
    pub release_version: String,
    /// Command run over a finished package; recorded, never executed here.
    pub signing_hook: Option<String>,
}

fn glob(pattern: &str) -> Result<Glob, String> {
    GlobBuilder::new(pattern)
        .literal_separator(true)
        .build()
        .map_err(|e| format!("bad glob `{pattern}`: {e}"))
}

fn list(value: &str) -> Vec<String> {
    value
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(str::to_string)
        .collect()
}

fn kind_rules(value: &str) -> Result<Vec<KindRule>, String> {
    list(value)
        .into_iter()
        .map(|item| {
            let (pattern, kind) = item
                .rsplit_once(':')
                .ok_or_else(|| format!("kind rule `{item}` is not GLOB:KIND"))?;
            Ok(KindRule {
                pattern: pattern.to_string(),
                kind: kind.trim().parse()?,
                matcher: glob(pattern.trim())?.compile_matcher(),
            })
        })
        .collect()
}

fn adapter(value: &str) -> Result<AdapterChoice, String> {
    match value {
        "local" => Ok(AdapterChoice::Local),
        "remote" => Ok(AdapterChoice::Remote),
        other => Err(format!("adapter must be local or remote, not `{other}`")),
    }
}

impl Default for ProjectConfig {
    fn default() -> Self {
        ProjectConfig::parse("", Path::new(".")).expect("defaults are valid")
    }
}

impl ProjectConfig {
    pub fn parse(text: &str, base_dir: &Path) -> Result<Self, ConfigError> {
        let mut values: Vec<(usize, &str, &str)> = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let invalid = |reason: String| ConfigError::Invalid {
                line: i + 1,
                reason,
            };
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| invalid("expected `key = value`".into()))?;
            let k = k.trim();
            if !KEYS.contains(&k) {
                return Err(invalid(format!("unknown key `{k}`")));
            }
            if values.iter().any(|(_, seen, _)| *seen == k) {
                return Err(invalid(format!("key `{k}` set twice")));
            }
            values.push((i + 1, k, v.trim()));
        }
        let get = |k: &str| {
            values
                .iter()
                .find(|(_, key, _)| *key == k)
                .map(|(l, _, v)| (*l, *v))
        };
        let text_or = |k: &str, d: &str| get(k).map_or(d.to_string(), |(_, v)| v.to_string());
        let at = |k: &str| get(k).map_or(0, |(l, _)| l);
        let wrap = |k: &str| {
            let line = at(k);
            move |reason: String| ConfigError::Invalid { line, reason }
        };
        let path_or = |k: &str, d: &str| base_dir.join(text_or(k, d));
        let opt_path = |k: &str| {
            get(k)
                .filter(|(_, v)| !v.is_empty())
                .map(|(_, v)| base_dir.join(v))
        };

        let traced_prefixes = list(&text_or("traced_prefixes", "src/, tests/, docs/"));
        let requirement_globs = list(&text_or("requirement_globs", "**/*.h"));
        let mut set = GlobSetBuilder::new();
        for g in &requirement_globs {
            set.add(glob(g).map_err(wrap("requirement_globs"))?);
        }
        let requirement_set = set
            .build()
            .map_err(|e| wrap("requirement_globs")(e.to_string()))?;

        let mut comment_syntax = CommentSyntaxMap::default();
        for item in list(&text_or("comment_syntax", "")) {
            let (ext, syntax) = item
                .split_once(':')
                .ok_or_else(|| wrap("comment_syntax")(format!("`{item}` is not EXT:SYNTAX")))?;
            let syntax: CommentSyntax = syntax.parse().map_err(wrap("comment_syntax"))?;
            comment_syntax.insert(ext, syntax);
        }

        let artifact_kinds = kind_rules(&text_or("artifact_kinds", DEFAULT_KIND_RULES))
            .map_err(wrap("artifact_kinds"))?;
        let ticket_pattern = Regex::new(&text_or("ticket_pattern", r"([A-Z]+-\d+)"))
            .map_err(|e| wrap("ticket_pattern")(e.to_string()))?;
        let hash_algorithm: HashAlgorithm = text_or("hash_algorithm", "sha256")
            .parse()
            .map_err(|e: crate::canonical::CanonicalError| wrap("hash_algorithm")(e.to_string()))?;
        let repo = text_or("repo", "project");
        if repo.is_empty() || repo.contains(|c: char| c.is_whitespace() || c == '/') {
            return Err(wrap("repo")(
                "repository name must be a single token".into(),
            ));
        }
        let docs_branch = text_or("docs_branch", "certification-docs");
        if docs_branch.is_empty() || docs_branch.contains(char::is_whitespace) {
            return Err(wrap("docs_branch")(
                "branch name must be a non-empty token".into(),
            ));
        }

        Ok(ProjectConfig {
            base_dir: base_dir.to_path_buf(),
            traced_prefixes,
            requirement_globs,
            requirement_set,
            comment_syntax,
            artifact_kinds,
            srd_template: opt_path("srd_template"),
            design_template: opt_path("design_template"),
            sci_template: opt_path("sci_template"),
            checklist_catalog: opt_path("checklist_catalog"),
            ticket_pattern,
            docs_branch,
            hash_algorithm,
            vcs_adapter: adapter(&text_or("vcs_adapter", "local")).map_err(wrap("vcs_adapter"))?,
            wmt_adapter: adapter(&text_or("wmt_adapter", "local")).map_err(wrap("wmt_adapter"))?,
            rmt_adapter: adapter(&text_or("rmt_adapter", "local")).map_err(wrap("rmt_adapter"))?,
            vcs_root: path_or("vcs_root", "vcs"),
            wmt_table: path_or("wmt_table", "tickets.txt"),
            state_dir: path_or("state_dir", ".certiflow"),
            repo,
            project_name: text_or("project_name", "unnamed project"),
            release_version: text_or("release_version", "0.0.0"),
            signing_hook: get("signing_hook")
                .map(|(_, v)| v.to_string())
                .filter(|v| !v.is_empty()),
        })
    }

    /// Reads `path`; relative paths inside resolve against its directory.
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|e| ConfigError::Io {
            path: path.display().to_string(),
            reason: e.to_string(),
        })?;
        let base = path
            .parent()
            .filter(|p| !p.as_os_str().is_empty())
            .unwrap_or(Path::new("."));
        Self::parse(&text, base)
    }

    pub fn is_traced(&self, path: &str) -> bool {
        self.traced_prefixes
            .iter()
            .any(|p| path.starts_with(p.as_str()))
    }

    pub fn is_requirement_file(&self, path: &str) -> bool {
        self.requirement_set.is_match(path)
    }

    /// First matching kind rule; SOURCE when none matches.
    pub fn artifact_kind(&self, path: &str) -> ArtifactKind {
        self.artifact_kinds
            .iter()
            .find(|r| r.matcher.is_match(path))
            .map_or(ArtifactKind::Source, |r| r.kind)
    }

    /// Ticket ids found in `texts`, sorted and deduplicated. The first
    /// capture group is used when the pattern has one.
    pub fn extract_tickets(&self, texts: &[&str]) -> Vec<String> {
        let mut out: Vec<String> = texts
            .iter()
            .flat_map(|t| self.ticket_pattern.captures_iter(t))
            .map(|c| {
                c.get(1)
                    .unwrap_or_else(|| c.get(0).expect("match"))
                    .as_str()
                    .to_string()
            })
            .collect();
        out.sort();
        out.dedup();
        out
    }

    pub fn vcs(&self) -> Result<LocalVcs, AdapterError> {
        match self.vcs_adapter {
            AdapterChoice::Local => Ok(LocalVcs::new(&self.vcs_root)),
            AdapterChoice::Remote => Err(AdapterError::AdapterUnavailable("vcs".into())),
        }
    }

    pub fn wmt(&self) -> Result<LocalWmt, AdapterError> {
        match self.wmt_adapter {
            AdapterChoice::Local => LocalWmt::load(&self.wmt_table),
            AdapterChoice::Remote => Err(AdapterError::AdapterUnavailable("wmt".into())),
        }
    }

    pub fn check_rmt(&self) -> Result<(), AdapterError> {
        match self.rmt_adapter {
            AdapterChoice::Local => Ok(()),
            AdapterChoice::Remote => Err(AdapterError::AdapterUnavailable("rmt".into())),
        }
    }
}
