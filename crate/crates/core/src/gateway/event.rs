//! The neutral pull-request webhook payload.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::config::ProjectConfig;
use crate::canonical::{is_repo_relative, sha256_hex, ts, Timestamp};
use crate::trace::ChangeType;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChangedFile {
    pub path: String,
    pub change_type: ChangeType,
    #[serde(default)]
    pub blob_hash: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PullRequestEvent {
    pub repo: String,
    pub source_branch: String,
    pub target_branch: String,
    pub commit_id: String,
    pub author: String,
    #[serde(with = "ts")]
    pub timestamp: Timestamp,
    pub changed_files: Vec<ChangedFile>,
    #[serde(default)]
    pub linked_ticket_ids: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub title: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub delivery_id: Option<String>,
}

/// A rejected payload, naming the offending field.
#[derive(Debug, Error, Clone, PartialEq, Eq)]
#[error("{field}: {reason}")]
pub struct EventError {
    pub field: String,
    pub reason: String,
}

fn field_err(field: &str, reason: &str) -> EventError {
    EventError {
        field: field.into(),
        reason: reason.into(),
    }
}

impl PullRequestEvent {
    pub fn from_json(bytes: &[u8]) -> Result<Self, EventError> {
        let de = &mut serde_json::Deserializer::from_slice(bytes);
        let event: PullRequestEvent = serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            let message = e.inner().to_string();
            let missing = message
                .strip_prefix("missing field `")
                .and_then(|rest| rest.split_once('`'))
                .map(|(name, _)| name.to_string());
            let field = match (missing, path.as_str()) {
                (Some(name), "." | "") => name,
                (Some(name), p) => format!("{p}.{name}"),
                (None, p) if p == "." || p.is_empty() => "body".into(),
                (None, p) => p.to_string(),
            };
            EventError {
                field,
                reason: message,
            }
        })?;
        event.validate()?;
        Ok(event)
    }

    pub fn validate(&self) -> Result<(), EventError> {
        for (name, value) in [
            ("repo", &self.repo),
            ("commit_id", &self.commit_id),
            ("author", &self.author),
            ("source_branch", &self.source_branch),
            ("target_branch", &self.target_branch),
        ] {
            if value.trim().is_empty() {
                return Err(field_err(name, "must not be empty"));
            }
        }
        if self
            .commit_id
            .contains(|c: char| c.is_whitespace() || c == '/')
        {
            return Err(field_err("commit_id", "must be a single token"));
        }
        if self.repo.contains(|c: char| c.is_whitespace() || c == '/') {
            return Err(field_err("repo", "must be a single token"));
        }
        let mut seen = BTreeSet::new();
        for (i, f) in self.changed_files.iter().enumerate() {
            if !is_repo_relative(&f.path) {
                return Err(field_err(
                    &format!("changed_files[{i}].path"),
                    "not a repository-relative path",
                ));
            }
            if !seen.insert(f.path.as_str()) {
                return Err(field_err(
                    &format!("changed_files[{i}].path"),
                    "listed twice",
                ));
            }
        }
        Ok(())
    }

    /// The delivery id when supplied, otherwise a digest of the payload.
    pub fn event_id(&self) -> String {
        match &self.delivery_id {
            Some(d) if !d.trim().is_empty() => d.trim().to_string(),
            _ => {
                let json = serde_json::to_string(self).expect("event serializes");
                format!("EV-{}", &sha256_hex(json)[..16])
            }
        }
    }

    /// Explicit ticket ids, or those found in the branch name and title.
    pub fn tickets(&self, config: &ProjectConfig) -> Vec<String> {
        if !self.linked_ticket_ids.is_empty() {
            let mut t = self.linked_ticket_ids.clone();
            t.sort();
            t.dedup();
            return t;
        }
        let mut texts = vec![self.source_branch.as_str()];
        if let Some(title) = &self.title {
            texts.push(title);
        }
        config.extract_tickets(&texts)
    }
}
