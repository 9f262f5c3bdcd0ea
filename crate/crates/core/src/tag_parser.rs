//! Extraction of requirement declarations from comment blocks in source files.
//!
//! A declaration lives inside a comment and opens with `@req{KEY}`. It must
//! carry `@kind{SYSTEM|HLR|LLR}`, `@title{...}` and `@text{...}`, and may carry
//! `@parent{K1,K2}`. Inside a field body a backslash takes the next character
//! literally, so `\{`, `\}` and `\\` survive extraction. A declaration runs
//! until the next `@req{` or the end of the comment block.
//!
//! Files may also carry trace tags (`@implements{KEYS}`, `@verifies{KEYS}`,
//! `@reports{PATHS}`) that declare links from the file itself.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;
use std::sync::LazyLock;

use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::canonical::is_repo_relative;

static KEY_PATTERN: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r"^[A-Z][A-Z0-9]*(-[A-Z0-9]+)+$").expect("key pattern"));

pub fn is_valid_local_key(key: &str) -> bool {
    KEY_PATTERN.is_match(key)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum RequirementKind {
    System,
    Hlr,
    Llr,
}

impl RequirementKind {
    pub const ALL: [RequirementKind; 3] = [
        RequirementKind::System,
        RequirementKind::Hlr,
        RequirementKind::Llr,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            RequirementKind::System => "SYSTEM",
            RequirementKind::Hlr => "HLR",
            RequirementKind::Llr => "LLR",
        }
    }

    /// Prefix used for store identifiers.
    pub fn id_prefix(self) -> &'static str {
        match self {
            RequirementKind::System => "SYS",
            RequirementKind::Hlr => "HLR",
            RequirementKind::Llr => "LLR",
        }
    }

    pub fn from_id_prefix(prefix: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|k| k.id_prefix() == prefix)
    }

    /// The only kind a requirement of this kind may derive from.
    pub fn parent_kind(self) -> Option<RequirementKind> {
        match self {
            RequirementKind::System => None,
            RequirementKind::Hlr => Some(RequirementKind::System),
            RequirementKind::Llr => Some(RequirementKind::Hlr),
        }
    }
}

impl fmt::Display for RequirementKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for RequirementKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| format!("unknown requirement kind `{s}`"))
    }
}

/// Inclusive, 1-based line range.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct LineSpan {
    pub start: u32,
    pub end: u32,
}

impl fmt::Display for LineSpan {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}-{}", self.start, self.end)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RequirementDraft {
    pub local_key: String,
    pub kind: RequirementKind,
    pub title: String,
    pub text: String,
    pub parent_keys: Vec<String>,
    pub source_path: String,
    pub line_span: LineSpan,
}

impl RequirementDraft {
    pub fn validate(&self) -> Result<(), String> {
        if !is_valid_local_key(&self.local_key) {
            return Err(format!("invalid requirement key `{}`", self.local_key));
        }
        if self.line_span.start == 0 || self.line_span.start > self.line_span.end {
            return Err(format!("invalid line span {}", self.line_span));
        }
        if !is_repo_relative(&self.source_path) {
            return Err(format!(
                "source path `{}` is not repository-relative",
                self.source_path
            ));
        }
        let mut seen = BTreeSet::new();
        for parent in &self.parent_keys {
            if !is_valid_local_key(parent) {
                return Err(format!("invalid parent key `{parent}`"));
            }
            if parent == &self.local_key {
                return Err(format!("`{parent}` lists itself as parent"));
            }
            if !seen.insert(parent) {
                return Err(format!("duplicate parent `{parent}`"));
            }
        }
        Ok(())
    }

    /// Content fields only; location is ignored.
    pub fn same_content(&self, other: &RequirementDraft) -> bool {
        let mut a = self.parent_keys.clone();
        let mut b = other.parent_keys.clone();
        a.sort();
        b.sort();
        self.kind == other.kind && self.title == other.title && self.text == other.text && a == b
    }

    /// Renders the draft as a C-style comment block that scans back to an
    /// equal draft (apart from `line_span`).
    pub fn to_tag_block(&self) -> String {
        let mut out = String::from("/**\n");
        out.push_str(&format!(" * @req{{{}}}\n", self.local_key));
        out.push_str(&format!(" * @kind{{{}}}\n", self.kind));
        out.push_str(&format!(" * @title{{{}}}\n", escape_body(&self.title)));
        if !self.parent_keys.is_empty() {
            out.push_str(&format!(" * @parent{{{}}}\n", self.parent_keys.join(",")));
        }
        let text = format!("@text{{{}}}", escape_body(&self.text));
        for line in text.split('\n') {
            if line.is_empty() {
                out.push_str(" *\n");
            } else {
                out.push_str(" * ");
                out.push_str(line);
                out.push('\n');
            }
        }
        out.push_str(" */\n");
        out
    }
}

fn escape_body(s: &str) -> String {
    let mut out = String::with_capacity(s.len());
    let mut prev = '\0';
    for c in s.chars() {
        match c {
            '\\' | '{' | '}' => {
                out.push('\\');
                out.push(c);
            }
            // keeps `*/` from closing the surrounding comment
            '/' if prev == '*' => out.push_str("\\/"),
            _ => out.push(c),
        }
        prev = c;
    }
    out
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum TagError {
    #[error("{path}:{line}: malformed tag block: {reason}")]
    MalformedTagBlock {
        path: String,
        line: u32,
        reason: String,
    },
    #[error("{path}: requirement key `{key}` declared more than once")]
    DuplicateKeyInFile { path: String, key: String },
    #[error("duplicate key `{key}` in {list} list")]
    DuplicateKey { list: &'static str, key: String },
    #[error("`{0}` is not a repository-relative path")]
    InvalidPath(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CommentSyntax {
    /// `/* ... */` blocks and runs of `//` lines.
    C,
    /// Runs of `#` lines.
    Hash,
    /// Every line may carry tags.
    Raw,
}

impl FromStr for CommentSyntax {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim() {
            "c" => Ok(CommentSyntax::C),
            "hash" => Ok(CommentSyntax::Hash),
            "raw" => Ok(CommentSyntax::Raw),
            other => Err(format!("unknown comment syntax `{other}`")),
        }
    }
}

impl fmt::Display for CommentSyntax {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            CommentSyntax::C => "c",
            CommentSyntax::Hash => "hash",
            CommentSyntax::Raw => "raw",
        })
    }
}

/// Comment syntax per file extension. Unknown extensions scan as [`CommentSyntax::Raw`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CommentSyntaxMap {
    by_extension: BTreeMap<String, CommentSyntax>,
}

impl Default for CommentSyntaxMap {
    fn default() -> Self {
        let mut map = CommentSyntaxMap {
            by_extension: BTreeMap::new(),
        };
        for ext in ["h", "c", "cpp", "hpp", "cc"] {
            map.insert(ext, CommentSyntax::C);
        }
        for ext in ["py", "sh"] {
            map.insert(ext, CommentSyntax::Hash);
        }
        map
    }
}

impl CommentSyntaxMap {
    pub fn empty() -> Self {
        CommentSyntaxMap {
            by_extension: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, extension: &str, syntax: CommentSyntax) {
        let ext = extension
            .trim()
            .trim_start_matches('.')
            .to_ascii_lowercase();
        self.by_extension.insert(ext, syntax);
    }

    pub fn for_path(&self, path: &str) -> CommentSyntax {
        let file = path.rsplit('/').next().unwrap_or(path);
        match file.rsplit_once('.') {
            Some((stem, ext)) if !stem.is_empty() => self
                .by_extension
                .get(&ext.to_ascii_lowercase())
                .copied()
                .unwrap_or(CommentSyntax::Raw),
            _ => CommentSyntax::Raw,
        }
    }

    pub fn entries(&self) -> impl Iterator<Item = (&str, CommentSyntax)> {
        self.by_extension.iter().map(|(k, v)| (k.as_str(), *v))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TraceTagKind {
    Implements,
    Verifies,
    Reports,
}

/// A link declaration carried by a file: `@implements{KEYS}` and
/// `@verifies{KEYS}` name requirement keys, `@reports{PATHS}` names test files.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TraceTag {
    pub kind: TraceTagKind,
    pub targets: Vec<String>,
    pub line: u32,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ScanReport {
    pub drafts: Vec<RequirementDraft>,
    /// One entry per rejected `@req` opener.
    pub errors: Vec<TagError>,
    pub trace_tags: Vec<TraceTag>,
    pub trace_errors: Vec<TagError>,
}

/// Scans `content` with the default comment-syntax map and fails on the
/// first rejected declaration.
pub fn scan_source(content: &str, path: &str) -> Result<Vec<RequirementDraft>, TagError> {
    scan_source_with(content, path, &CommentSyntaxMap::default())
}

pub fn scan_source_with(
    content: &str,
    path: &str,
    syntax: &CommentSyntaxMap,
) -> Result<Vec<RequirementDraft>, TagError> {
    let mut report = scan(content, path, syntax)?;
    if !report.errors.is_empty() {
        return Err(report.errors.swap_remove(0));
    }
    Ok(report.drafts)
}

/// Lenient scan: every `@req` opener ends up as exactly one draft or one error.
pub fn scan(content: &str, path: &str, syntax: &CommentSyntaxMap) -> Result<ScanReport, TagError> {
    if !is_repo_relative(path) {
        return Err(TagError::InvalidPath(path.to_string()));
    }
    let content = content.replace("\r\n", "\n");
    let blocks = match syntax.for_path(path) {
        CommentSyntax::C => c_style_blocks(&content),
        CommentSyntax::Hash => hash_blocks(&content),
        CommentSyntax::Raw => raw_blocks(&content),
    };

    let mut report = ScanReport::default();
    for block in &blocks {
        parse_block(block, path, &mut report);
    }

    // second and later declarations of a key become errors
    let mut seen = BTreeSet::new();
    let mut drafts = Vec::with_capacity(report.drafts.len());
    for draft in report.drafts.drain(..) {
        if seen.insert(draft.local_key.clone()) {
            drafts.push(draft);
        } else {
            report.errors.push(TagError::DuplicateKeyInFile {
                path: path.to_string(),
                key: draft.local_key,
            });
        }
    }
    report.drafts = drafts;
    Ok(report)
}

#[derive(Debug)]
struct CommentLine {
    line: u32,
    text: String,
}

type CommentBlock = Vec<CommentLine>;

fn strip_one_space(s: &str) -> &str {
    s.strip_prefix(' ').unwrap_or(s)
}

fn c_style_blocks(src: &str) -> Vec<CommentBlock> {
    let chars: Vec<char> = src.chars().collect();
    let len = chars.len();
    let mut blocks: Vec<CommentBlock> = Vec::new();
    let mut last_line_comment: Option<u32> = None;
    let mut line = 1u32;
    let mut i = 0;
    while i < len {
        let c = chars[i];
        let next = chars.get(i + 1).copied();
        match c {
            '\n' => {
                line += 1;
                i += 1;
            }
            '"' | '\'' => {
                i += 1;
                while i < len && chars[i] != c && chars[i] != '\n' {
                    if chars[i] == '\\' {
                        i += 1;
                        if i < len && chars[i] == '\n' {
                            line += 1;
                        }
                    }
                    i += 1;
                }
                if i < len && chars[i] == c {
                    i += 1;
                }
            }
            '/' if next == Some('/') => {
                i += 2;
                let mut text = String::new();
                while i < len && chars[i] != '\n' {
                    text.push(chars[i]);
                    i += 1;
                }
                let text = strip_one_space(text.trim_start_matches(['/', '!'])).to_string();
                let entry = CommentLine { line, text };
                match (last_line_comment, blocks.last_mut()) {
                    (Some(prev), Some(block)) if prev + 1 == line => block.push(entry),
                    _ => blocks.push(vec![entry]),
                }
                last_line_comment = Some(line);
            }
            '/' if next == Some('*') => {
                i += 2;
                let start = line;
                let mut raw = String::new();
                while i < len {
                    if chars[i] == '*' && chars.get(i + 1) == Some(&'/') {
                        i += 2;
                        break;
                    }
                    if chars[i] == '\n' {
                        line += 1;
                    }
                    raw.push(chars[i]);
                    i += 1;
                }
                blocks.push(block_comment_lines(&raw, start));
                last_line_comment = None;
            }
            _ => i += 1,
        }
    }
    blocks
}

fn block_comment_lines(raw: &str, start: u32) -> CommentBlock {
    raw.split('\n')
        .enumerate()
        .map(|(idx, l)| {
            let text = if idx == 0 {
                strip_one_space(l.trim_start_matches(['*', '!']))
            } else {
                let t = l.trim_start();
                match t.strip_prefix('*') {
                    Some(rest) => strip_one_space(rest),
                    None => t,
                }
            };
            CommentLine {
                line: start + idx as u32,
                text: text.to_string(),
            }
        })
        .collect()
}

fn hash_blocks(src: &str) -> Vec<CommentBlock> {
    let mut blocks: Vec<CommentBlock> = Vec::new();
    let mut prev: Option<u32> = None;
    for (idx, l) in src.split('\n').enumerate() {
        let line = idx as u32 + 1;
        let t = l.trim_start();
        if let Some(rest) = t.strip_prefix('#') {
            let text = strip_one_space(rest.trim_start_matches('#')).to_string();
            let entry = CommentLine { line, text };
            match (prev, blocks.last_mut()) {
                (Some(p), Some(block)) if p + 1 == line => block.push(entry),
                _ => blocks.push(vec![entry]),
            }
            prev = Some(line);
        }
    }
    blocks
}

fn raw_blocks(src: &str) -> Vec<CommentBlock> {
    vec![src
        .split('\n')
        .enumerate()
        .map(|(idx, l)| CommentLine {
            line: idx as u32 + 1,
            text: l.to_string(),
        })
        .collect()]
}

const FIELD_NAMES: [&str; 4] = ["kind", "title", "text", "parent"];

fn trace_tag_kind(name: &str) -> Option<TraceTagKind> {
    match name {
        "implements" => Some(TraceTagKind::Implements),
        "verifies" => Some(TraceTagKind::Verifies),
        "reports" => Some(TraceTagKind::Reports),
        _ => None,
    }
}

struct PendingBlock {
    key: String,
    line: u32,
    end_line: u32,
    fields: Vec<(String, String)>,
    error: Option<String>,
}

/// Reads a braced body starting just after `{`. Returns the unescaped body
/// and the byte offset just past the closing brace.
fn read_body(text: &str, start: usize) -> Option<(String, usize)> {
    let mut body = String::new();
    let mut depth = 1usize;
    let mut iter = text[start..].char_indices();
    while let Some((off, c)) = iter.next() {
        match c {
            '\\' => match iter.next() {
                Some((_, escaped)) => body.push(escaped),
                None => body.push('\\'),
            },
            '{' => {
                depth += 1;
                body.push(c);
            }
            '}' => {
                depth -= 1;
                if depth == 0 {
                    return Some((body, start + off + 1));
                }
                body.push(c);
            }
            _ => body.push(c),
        }
    }
    None
}

fn parse_block(block: &CommentBlock, path: &str, report: &mut ScanReport) {
    let mut text = String::new();
    let mut starts = Vec::with_capacity(block.len());
    for (idx, l) in block.iter().enumerate() {
        if idx > 0 {
            text.push('\n');
        }
        starts.push(text.len());
        text.push_str(&l.text);
    }
    let line_at = |offset: usize| -> u32 {
        let idx = starts.partition_point(|&s| s <= offset).saturating_sub(1);
        block[idx].line
    };

    let mut current: Option<PendingBlock> = None;
    let mut pos = 0;
    while let Some(rel) = text[pos..].find('@') {
        let at = pos + rel;
        let name_start = at + 1;
        let name_end = text[name_start..]
            .find(|c: char| !c.is_ascii_alphabetic())
            .map_or(text.len(), |n| name_start + n);
        let name = &text[name_start..name_end];
        let known = name == "req" || FIELD_NAMES.contains(&name) || trace_tag_kind(name).is_some();
        if !known || !text[name_end..].starts_with('{') {
            pos = name_start;
            continue;
        }
        let line = line_at(at);
        let body = read_body(&text, name_end + 1);
        if name == "req" {
            if let Some(done) = current.take() {
                finish(done, path, report);
            }
            match body {
                Some((key, end)) => {
                    current = Some(PendingBlock {
                        key,
                        line,
                        end_line: line_at(end - 1),
                        fields: Vec::new(),
                        error: None,
                    });
                    pos = end;
                }
                None => {
                    report.errors.push(TagError::MalformedTagBlock {
                        path: path.to_string(),
                        line,
                        reason: "unbalanced braces in @req".into(),
                    });
                    pos = name_end + 1;
                }
            }
        } else if let Some(kind) = trace_tag_kind(name) {
            match body {
                Some((targets, end)) => {
                    report.trace_tags.push(TraceTag {
                        kind,
                        targets: split_list(&targets),
                        line,
                    });
                    pos = end;
                }
                None => {
                    report.trace_errors.push(TagError::MalformedTagBlock {
                        path: path.to_string(),
                        line,
                        reason: format!("unbalanced braces in @{name}"),
                    });
                    pos = name_end + 1;
                }
            }
        } else {
            match (body, current.as_mut()) {
                (Some((value, end)), Some(pending)) => {
                    pending.fields.push((name.to_string(), value));
                    pending.end_line = line_at(end - 1);
                    pos = end;
                }
                (Some((_, end)), None) => pos = end,
                (None, Some(pending)) => {
                    pending
                        .error
                        .get_or_insert(format!("unbalanced braces in @{name}"));
                    pos = name_end + 1;
                }
                (None, None) => pos = name_end + 1,
            }
        }
    }
    if let Some(done) = current.take() {
        finish(done, path, report);
    }
}

fn split_list(s: &str) -> Vec<String> {
    s.split(',')
        .map(str::trim)
        .filter(|t| !t.is_empty())
        .map(str::to_string)
        .collect()
}

fn finish(block: PendingBlock, path: &str, report: &mut ScanReport) {
    let line = block.line;
    match build_draft(block, path) {
        Ok(draft) => report.drafts.push(draft),
        Err(reason) => report.errors.push(TagError::MalformedTagBlock {
            path: path.to_string(),
            line,
            reason,
        }),
    }
}

fn build_draft(block: PendingBlock, path: &str) -> Result<RequirementDraft, String> {
    if let Some(err) = block.error {
        return Err(err);
    }
    let key = block.key.trim().to_string();
    if !is_valid_local_key(&key) {
        return Err(format!("invalid requirement key `{key}`"));
    }
    let mut fields: BTreeMap<&str, &str> = BTreeMap::new();
    for (name, value) in &block.fields {
        if fields.insert(name.as_str(), value.as_str()).is_some() {
            return Err(format!("duplicate @{name}"));
        }
    }
    let field = |name: &str| {
        fields
            .get(name)
            .copied()
            .ok_or_else(|| format!("missing @{name}"))
    };
    let kind_raw = field("kind")?;
    let title_raw = field("title")?;
    let text_raw = field("text")?;
    let kind = kind_raw.trim().parse::<RequirementKind>()?;
    let title = normalize_title(title_raw);
    if title.is_empty() {
        return Err("empty @title".into());
    }
    let text = normalize_text(text_raw);
    if text.is_empty() {
        return Err("empty @text".into());
    }
    let parent_keys = fields
        .get("parent")
        .map(|p| split_list(p))
        .unwrap_or_default();
    let draft = RequirementDraft {
        local_key: key,
        kind,
        title,
        text,
        parent_keys,
        source_path: path.to_string(),
        line_span: LineSpan {
            start: block.line,
            end: block.end_line,
        },
    };
    draft.validate()?;
    Ok(draft)
}

/// Trims and collapses internal whitespace runs to one space.
pub fn normalize_title(raw: &str) -> String {
    raw.split_whitespace().collect::<Vec<_>>().join(" ")
}

/// Trims surrounding whitespace; line breaks are preserved.
pub fn normalize_text(raw: &str) -> String {
    raw.trim().to_string()
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RequirementChange {
    pub local_key: String,
    pub old: RequirementDraft,
    pub new: RequirementDraft,
    pub content_changed: bool,
    pub relocated: bool,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct RequirementDiff {
    pub added: Vec<RequirementDraft>,
    pub changed: Vec<RequirementChange>,
    pub removed: Vec<String>,
}

impl RequirementDiff {
    pub fn is_empty(&self) -> bool {
        self.added.is_empty() && self.changed.is_empty() && self.removed.is_empty()
    }
}

fn index_by_key<'a>(
    drafts: &'a [RequirementDraft],
    list: &'static str,
) -> Result<BTreeMap<&'a str, &'a RequirementDraft>, TagError> {
    let mut map = BTreeMap::new();
    for d in drafts {
        if map.insert(d.local_key.as_str(), d).is_some() {
            return Err(TagError::DuplicateKey {
                list,
                key: d.local_key.clone(),
            });
        }
    }
    Ok(map)
}

/// Set difference by `local_key`; all output lists are sorted by key.
pub fn diff_requirements(
    before: &[RequirementDraft],
    after: &[RequirementDraft],
) -> Result<RequirementDiff, TagError> {
    let old = index_by_key(before, "before")?;
    let new = index_by_key(after, "after")?;
    let mut diff = RequirementDiff::default();
    for (key, n) in &new {
        match old.get(key) {
            None => diff.added.push((*n).clone()),
            Some(o) => {
                let content_changed = !o.same_content(n);
                let relocated = o.source_path != n.source_path || o.line_span != n.line_span;
                if content_changed || relocated {
                    diff.changed.push(RequirementChange {
                        local_key: key.to_string(),
                        old: (*o).clone(),
                        new: (*n).clone(),
                        content_changed,
                        relocated,
                    });
                }
            }
        }
    }
    diff.removed = old
        .keys()
        .filter(|k| !new.contains_key(*k))
        .map(|k| k.to_string())
        .collect();
    Ok(diff)
}
