use std::collections::BTreeMap;

use super::{JobAllocation, JobId, JobStatus, ResourceAllocation, TaskDescription};
use crate::connector::Resource;
use crate::wfmodel::{Requirements, TokenId};

/// Read-only view of where data tokens currently live.
pub trait RemotePaths {
    /// Whether `resource` holds a valid replica of `token`.
    fn holds(&self, token: TokenId, resource: &Resource) -> bool;
}

/// No token is held anywhere.
pub struct NoRemotePaths;

impl RemotePaths for NoRemotePaths {
    fn holds(&self, _token: TokenId, _resource: &Resource) -> bool {
        false
    }
}

/// Everything a policy may look at when placing one task.
pub struct PolicyInput<'a> {
    pub task: &'a TaskDescription,
    /// Live resources of the task's target service, minus any already
    /// chosen for the same job.
    pub available: &'a [Resource],
    pub remote_paths: &'a dyn RemotePaths,
    pub jobs: &'a BTreeMap<JobId, JobAllocation>,
    pub resources: &'a BTreeMap<String, ResourceAllocation>,
}

impl PolicyInput<'_> {
    /// Whether `resource` currently hosts a job in running status.
    pub fn is_busy(&self, resource: &Resource) -> bool {
        self.resources.get(&resource.key()).is_some_and(|alloc| {
            alloc.jobs.iter().any(|j| {
                self.jobs
                    .get(j)
                    .is_some_and(|job| job.status == JobStatus::Running)
            })
        })
    }

    pub fn holds_dependency(&self, resource: &Resource) -> bool {
        self.task
            .dependencies
            .iter()
            .any(|t| self.remote_paths.holds(*t, resource))
    }
}

/// Placement strategy. Called once per resource needed; returning `None`
/// makes the task wait for the next completion.
pub trait Policy: Send + Sync {
    fn name(&self) -> &'static str;
    fn get_resource(&self, input: &PolicyInput<'_>) -> Option<Resource>;
}

/// Whether `resource` has the declared capacity `req` asks for. Undeclared
/// capacity on either side never blocks.
pub fn satisfies(resource: &Resource, req: &Requirements) -> bool {
    let cores = match (req.cores, resource.cores) {
        (Some(need), Some(have)) => have >= need,
        _ => true,
    };
    let memory = match (req.memory, resource.memory) {
        (Some(need), Some(have)) => have >= need,
        _ => true,
    };
    cores && memory
}

/// Prefers resources already holding one of the task's inputs, then takes
/// the first free one. Ties are broken by resource id.
#[derive(Debug, Default, Clone, Copy)]
pub struct DataLocalityPolicy;

impl DataLocalityPolicy {
    /// Candidates in the order they are tried.
    pub fn candidate_order(input: &PolicyInput<'_>) -> Vec<Resource> {
        let mut candidates: Vec<(bool, &Resource)> = input
            .available
            .iter()
            .map(|r| (!input.holds_dependency(r), r))
            .collect();
        candidates.sort_by(|a, b| a.0.cmp(&b.0).then_with(|| a.1.id.cmp(&b.1.id)));
        candidates.into_iter().map(|(_, r)| r.clone()).collect()
    }
}

impl Policy for DataLocalityPolicy {
    fn name(&self) -> &'static str {
        "data-locality"
    }

    fn get_resource(&self, input: &PolicyInput<'_>) -> Option<Resource> {
        Self::candidate_order(input)
            .into_iter()
            .find(|r| !input.is_busy(r) && satisfies(r, &input.task.requirements))
    }
}

/// Policy by configuration name.
pub fn policy_by_name(name: &str) -> Option<Box<dyn Policy>> {
    match name {
        "data-locality" => Some(Box::new(DataLocalityPolicy)),
        _ => None,
    }
}

pub fn policy_names() -> Vec<&'static str> {
    vec!["data-locality"]
}
