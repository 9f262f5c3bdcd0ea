//! Version-control and work-management adapters with file-backed local
//! backends.
//!
//! Local VCS layout under its root:
//!
//! ```text
//! <repo>/commits/<commit_id>/<path>   full tree snapshot per commit
//! <repo>/branches/<branch>            head commit id
//! <repo>/meta/<commit_id>.json        message, author, parent
//! <repo>/counter                      last synthetic commit number
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;
use thiserror::Error;
use walkdir::WalkDir;

use crate::canonical::is_repo_relative;
use crate::workspace::write_atomic;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum AdapterError {
    #[error("cannot fetch `{path}`: {reason}")]
    FetchFailure { path: String, reason: String },
    #[error("branch `{branch}` moved: expected {expected}, found {actual}")]
    CommitConflict {
        branch: String,
        expected: String,
        actual: String,
    },
    #[error("ticket `{0}` is unknown")]
    UnresolvedTicket(String),
    #[error("{0} adapter backend is not available in this build")]
    AdapterUnavailable(String),
    #[error("ticket table line {line}: {reason}")]
    Table { line: usize, reason: String },
    #[error("adapter i/o: {0}")]
    Io(String),
}

fn io(e: std::io::Error) -> AdapterError {
    AdapterError::Io(e.to_string())
}

pub trait VcsAdapter {
    fn fetch_file(&self, repo: &str, commit_id: &str, path: &str) -> Result<Vec<u8>, AdapterError>;

    /// Commits `files` on top of the branch head and returns the new commit
    /// id. With `expected_head`, fails if the branch has moved.
    fn stage_commit(
        &self,
        repo: &str,
        branch: &str,
        files: &[(String, Vec<u8>)],
        message: &str,
        author: &str,
        expected_head: Option<&str>,
    ) -> Result<String, AdapterError>;

    fn branch_head(&self, repo: &str, branch: &str) -> Result<Option<String>, AdapterError>;
}

pub trait WmtAdapter {
    /// Ticket id to PBI ids, total over `ids` or an error naming the first
    /// unknown ticket.
    fn resolve_tickets(
        &self,
        ids: &[String],
    ) -> Result<BTreeMap<String, Vec<String>>, AdapterError>;
}

#[derive(Debug, Clone)]
pub struct LocalVcs {
    root: PathBuf,
}

#[derive(Serialize)]
struct CommitMeta<'a> {
    branch: &'a str,
    parent: Option<&'a str>,
    message: &'a str,
    author: &'a str,
    paths: Vec<&'a str>,
}

fn check_segment(what: &str, s: &str) -> Result<(), AdapterError> {
    if is_repo_relative(s) && !s.contains('/') {
        Ok(())
    } else {
        Err(AdapterError::Io(format!("invalid {what} `{s}`")))
    }
}

impl LocalVcs {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        LocalVcs { root: root.into() }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    fn commit_dir(&self, repo: &str, commit_id: &str) -> PathBuf {
        self.root.join(repo).join("commits").join(commit_id)
    }

    fn branch_file(&self, repo: &str, branch: &str) -> PathBuf {
        self.root.join(repo).join("branches").join(branch)
    }

    /// Writes a fixture commit holding exactly `files`.
    pub fn write_commit(
        &self,
        repo: &str,
        commit_id: &str,
        files: &BTreeMap<String, Vec<u8>>,
    ) -> Result<(), AdapterError> {
        check_segment("repository", repo)?;
        check_segment("commit id", commit_id)?;
        let dir = self.commit_dir(repo, commit_id);
        if dir.exists() {
            return Err(AdapterError::Io(format!(
                "commit `{commit_id}` already exists"
            )));
        }
        let tmp = dir.with_file_name(format!(".tmp-{commit_id}"));
        let _ = fs::remove_dir_all(&tmp);
        for (path, bytes) in files {
            if !is_repo_relative(path) {
                return Err(AdapterError::Io(format!("invalid path `{path}`")));
            }
            let target = tmp.join(path);
            fs::create_dir_all(target.parent().expect("joined path has a parent")).map_err(io)?;
            fs::write(&target, bytes).map_err(io)?;
        }
        fs::create_dir_all(&tmp).map_err(io)?;
        fs::rename(&tmp, &dir).map_err(io)
    }

    /// Every file of a commit, keyed by repository path.
    pub fn tree(
        &self,
        repo: &str,
        commit_id: &str,
    ) -> Result<BTreeMap<String, Vec<u8>>, AdapterError> {
        let dir = self.commit_dir(repo, commit_id);
        if !dir.is_dir() {
            return Err(AdapterError::Io(format!("unknown commit `{commit_id}`")));
        }
        let mut out = BTreeMap::new();
        for entry in WalkDir::new(&dir).sort_by_file_name() {
            let entry = entry.map_err(|e| AdapterError::Io(e.to_string()))?;
            if entry.file_type().is_file() {
                let rel = entry
                    .path()
                    .strip_prefix(&dir)
                    .expect("walk stays under dir");
                let key = rel
                    .components()
                    .map(|c| c.as_os_str().to_string_lossy())
                    .collect::<Vec<_>>()
                    .join("/");
                out.insert(key, fs::read(entry.path()).map_err(io)?);
            }
        }
        Ok(out)
    }

    fn next_commit_id(&self, repo: &str) -> Result<String, AdapterError> {
        let counter = self.root.join(repo).join("counter");
        let last: u64 = match fs::read_to_string(&counter) {
            Ok(s) => s
                .trim()
                .parse()
                .map_err(|_| AdapterError::Io("corrupt commit counter".into()))?,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => 0,
            Err(e) => return Err(io(e)),
        };
        let next = last + 1;
        write_atomic(&counter, format!("{next}\n").as_bytes()).map_err(io)?;
        Ok(format!("L{next:06}"))
    }
}

impl VcsAdapter for LocalVcs {
    fn fetch_file(&self, repo: &str, commit_id: &str, path: &str) -> Result<Vec<u8>, AdapterError> {
        let fail = |reason: String| AdapterError::FetchFailure {
            path: path.to_string(),
            reason,
        };
        if !is_repo_relative(path) {
            return Err(fail("not a repository-relative path".into()));
        }
        check_segment("repository", repo).map_err(|e| fail(e.to_string()))?;
        check_segment("commit id", commit_id).map_err(|e| fail(e.to_string()))?;
        let dir = self.commit_dir(repo, commit_id);
        if !dir.is_dir() {
            return Err(fail(format!("unknown commit `{commit_id}`")));
        }
        fs::read(dir.join(path)).map_err(|e| fail(e.to_string()))
    }

    fn stage_commit(
        &self,
        repo: &str,
        branch: &str,
        files: &[(String, Vec<u8>)],
        message: &str,
        author: &str,
        expected_head: Option<&str>,
    ) -> Result<String, AdapterError> {
        check_segment("repository", repo)?;
        if !is_repo_relative(branch) {
            return Err(AdapterError::Io(format!("invalid branch `{branch}`")));
        }
        let head = self.branch_head(repo, branch)?;
        if let Some(expected) = expected_head {
            if head.as_deref() != Some(expected) {
                return Err(AdapterError::CommitConflict {
                    branch: branch.to_string(),
                    expected: expected.to_string(),
                    actual: head.unwrap_or_else(|| "-".into()),
                });
            }
        }
        let mut tree = match &head {
            Some(h) => self.tree(repo, h)?,
            None => BTreeMap::new(),
        };
        for (path, bytes) in files {
            tree.insert(path.clone(), bytes.clone());
        }
        let id = self.next_commit_id(repo)?;
        self.write_commit(repo, &id, &tree)?;
        let meta = CommitMeta {
            branch,
            parent: head.as_deref(),
            message,
            author,
            paths: files.iter().map(|(p, _)| p.as_str()).collect(),
        };
        let meta_json = serde_json::to_string(&meta).expect("commit meta serializes");
        write_atomic(
            &self.root.join(repo).join("meta").join(format!("{id}.json")),
            meta_json.as_bytes(),
        )
        .map_err(io)?;
        write_atomic(
            &self.branch_file(repo, branch),
            format!("{id}\n").as_bytes(),
        )
        .map_err(io)?;
        Ok(id)
    }

    fn branch_head(&self, repo: &str, branch: &str) -> Result<Option<String>, AdapterError> {
        match fs::read_to_string(self.branch_file(repo, branch)) {
            Ok(s) => Ok(Some(s.trim().to_string())),
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(None),
            Err(e) => Err(io(e)),
        }
    }
}

/// Ticket table: one `TICKET = PBI-1, PBI-2` line per ticket.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct LocalWmt {
    table: BTreeMap<String, Vec<String>>,
}

impl LocalWmt {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn parse(text: &str) -> Result<Self, AdapterError> {
        let mut table = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let err = |reason: &str| AdapterError::Table {
                line: i + 1,
                reason: reason.into(),
            };
            let (ticket, pbis) = line
                .split_once('=')
                .ok_or_else(|| err("expected `TICKET = PBI, ...`"))?;
            let ticket = ticket.trim();
            if ticket.is_empty() {
                return Err(err("empty ticket id"));
            }
            let pbis: Vec<String> = pbis
                .split(',')
                .map(str::trim)
                .filter(|p| !p.is_empty())
                .map(str::to_string)
                .collect();
            if table.insert(ticket.to_string(), pbis).is_some() {
                return Err(err("ticket listed twice"));
            }
        }
        Ok(LocalWmt { table })
    }

    /// A missing table file is an empty table.
    pub fn load(path: &Path) -> Result<Self, AdapterError> {
        match fs::read_to_string(path) {
            Ok(text) => Self::parse(&text),
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(Self::new()),
            Err(e) => Err(io(e)),
        }
    }

    pub fn insert(&mut self, ticket: &str, pbis: Vec<String>) {
        self.table.insert(ticket.to_string(), pbis);
    }

    pub fn to_text(&self) -> String {
        self.table
            .iter()
            .map(|(t, p)| format!("{t} = {}\n", p.join(", ")))
            .collect()
    }

    pub fn save(&self, path: &Path) -> Result<(), AdapterError> {
        write_atomic(path, self.to_text().as_bytes()).map_err(io)
    }
}

impl WmtAdapter for LocalWmt {
    fn resolve_tickets(
        &self,
        ids: &[String],
    ) -> Result<BTreeMap<String, Vec<String>>, AdapterError> {
        ids.iter()
            .map(|id| {
                self.table
                    .get(id)
                    .map(|p| (id.clone(), p.clone()))
                    .ok_or_else(|| AdapterError::UnresolvedTicket(id.clone()))
            })
            .collect()
    }
}
