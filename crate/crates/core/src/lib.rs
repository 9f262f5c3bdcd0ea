//! Certification evidence toolkit for iterative DO-178C development.
//!
//! Requirements are extracted from tagged comments, stored with stable ids,
//! traced to artifacts, rendered into documents and bundled into
//! merge-forward data packages.

pub mod canonical;
pub mod docgen;
pub mod gateway;
pub mod packager;
pub mod req_store;
pub mod scenario;
pub mod tag_parser;
pub mod trace;
pub mod workflow;
pub mod workspace;
