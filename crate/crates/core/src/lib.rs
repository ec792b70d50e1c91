//! Workflow engine for hybrid execution environments.
//!
//! Steps of a DAG are bound to services of independently deployed models
//! that share no data space. Models are deployed lazily, tasks are placed by
//! a pluggable policy and data moves between models through the management
//! node.

pub mod config;
pub mod connector;
pub mod datamgr;
pub mod deployment;
pub mod events;
pub mod report;
pub mod runtime;
pub mod scheduler;
pub mod wfmodel;
mod yaml;
