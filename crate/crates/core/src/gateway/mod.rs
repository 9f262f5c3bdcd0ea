//! The system boundary: configuration, pull-request events, adapters and
//! the ingest pipeline.

pub mod adapters;
pub mod config;
pub mod event;
pub mod pipeline;
