//! Shared primitives for byte-stable output: timestamps, digests, provenance
//! and repository-relative path checks.

use std::fmt;
use std::str::FromStr;

use chrono::{DateTime, SecondsFormat, Utc};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256, Sha512};
use thiserror::Error;

pub type Timestamp = DateTime<Utc>;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum CanonicalError {
    #[error("invalid timestamp `{0}` (expected RFC 3339, UTC)")]
    BadTimestamp(String),
    #[error("unknown hash algorithm `{0}`")]
    UnknownHashAlgorithm(String),
    #[error("missing author identity")]
    MissingIdentity,
}

/// Formats a timestamp with second precision and a `Z` suffix.
pub fn format_ts(ts: &Timestamp) -> String {
    ts.to_rfc3339_opts(SecondsFormat::Secs, true)
}

pub fn parse_ts(s: &str) -> Result<Timestamp, CanonicalError> {
    DateTime::parse_from_rfc3339(s.trim())
        .map(|t| t.with_timezone(&Utc))
        .map_err(|_| CanonicalError::BadTimestamp(s.to_string()))
}

/// Serde adapter keeping timestamps at second precision.
pub mod ts {
    use super::*;
    use serde::{Deserializer, Serializer};

    pub fn serialize<S: Serializer>(ts: &Timestamp, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&format_ts(ts))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Timestamp, D::Error> {
        let raw = String::deserialize(d)?;
        parse_ts(&raw).map_err(serde::de::Error::custom)
    }
}

/// Same as [`ts`] for optional fields.
pub mod ts_opt {
    use super::*;
    use serde::{Deserializer, Serializer};

    pub fn serialize<S: Serializer>(ts: &Option<Timestamp>, s: S) -> Result<S::Ok, S::Error> {
        match ts {
            Some(t) => s.serialize_some(&format_ts(t)),
            None => s.serialize_none(),
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Option<Timestamp>, D::Error> {
        let raw = Option::<String>::deserialize(d)?;
        raw.map(|r| parse_ts(&r).map_err(serde::de::Error::custom))
            .transpose()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub enum HashAlgorithm {
    #[default]
    Sha256,
    Sha512,
}

impl HashAlgorithm {
    pub fn id(self) -> &'static str {
        match self {
            HashAlgorithm::Sha256 => "sha256",
            HashAlgorithm::Sha512 => "sha512",
        }
    }

    /// Lowercase hex digest of `bytes`.
    pub fn digest_hex(self, bytes: &[u8]) -> String {
        match self {
            HashAlgorithm::Sha256 => hex::encode(Sha256::digest(bytes)),
            HashAlgorithm::Sha512 => hex::encode(Sha512::digest(bytes)),
        }
    }
}

impl FromStr for HashAlgorithm {
    type Err = CanonicalError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim() {
            "sha256" => Ok(HashAlgorithm::Sha256),
            "sha512" => Ok(HashAlgorithm::Sha512),
            other => Err(CanonicalError::UnknownHashAlgorithm(other.to_string())),
        }
    }
}

impl fmt::Display for HashAlgorithm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.id())
    }
}

pub fn sha256_hex(bytes: impl AsRef<[u8]>) -> String {
    HashAlgorithm::Sha256.digest_hex(bytes.as_ref())
}

/// Who did something, and when.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    pub author: String,
    #[serde(with = "ts")]
    pub at: Timestamp,
}

impl Provenance {
    pub fn new(author: impl Into<String>, at: Timestamp) -> Result<Self, CanonicalError> {
        let author = author.into();
        if author.trim().is_empty() {
            return Err(CanonicalError::MissingIdentity);
        }
        Ok(Provenance { author, at })
    }
}

/// True for non-empty, `/`-separated relative paths without `..`, `.`,
/// empty segments or control characters.
pub fn is_repo_relative(path: &str) -> bool {
    if path.is_empty()
        || path.starts_with('/')
        || path.contains('\\')
        || path.chars().any(char::is_control)
    {
        return false;
    }
    path.split('/')
        .all(|seg| !seg.is_empty() && seg != ".." && seg != ".")
}
