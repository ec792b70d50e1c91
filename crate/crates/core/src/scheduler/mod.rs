//! First-come-first-served, non-preemptive placement of jobs on resources.
//!
//! The scheduler only does bookkeeping: the runtime tells it which resources
//! each service currently has, submits jobs, and reports completions. All
//! calls are expected to happen under one lock, which makes every policy
//! invocation part of a single critical section.

mod policy;

use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use policy::{
    policy_by_name, policy_names, satisfies, DataLocalityPolicy, NoRemotePaths, Policy,
    PolicyInput, RemotePaths,
};

use crate::connector::Resource;
use crate::events::{EventKind, EventLog};
use crate::wfmodel::{Requirements, StepPath, TokenId};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct JobId(pub u64);

impl fmt::Display for JobId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "j{:04}", self.0)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TaskDescription {
    pub step: StepPath,
    pub requirements: Requirements,
    /// Input tokens the task consumes.
    pub dependencies: Vec<TokenId>,
    pub model: String,
    pub service: String,
    /// Number of distinct resources the job occupies; at least 1.
    pub replicas: u32,
    /// The whole service is redeployed before the job runs.
    pub recycle: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum JobStatus {
    Pending,
    Running,
    Completed,
    Failed,
}

impl fmt::Display for JobStatus {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            JobStatus::Pending => "pending",
            JobStatus::Running => "running",
            JobStatus::Completed => "completed",
            JobStatus::Failed => "failed",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct JobAllocation {
    pub job: JobId,
    pub task: TaskDescription,
    /// Set once when the job starts running and never changed afterwards.
    pub resources: Vec<Resource>,
    pub status: JobStatus,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ResourceAllocation {
    pub resource: Resource,
    pub model: String,
    pub service: String,
    /// Non-terminal jobs placed on the resource.
    pub jobs: Vec<JobId>,
}

/// Outcome of a placement attempt.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Decision {
    /// The job is running on these resources, in rank order.
    Scheduled(Vec<Resource>),
    /// The job waits for a completion.
    Queued,
    /// The target service is idle and reserved for this job; redeploy it,
    /// register the fresh resources and call [`Scheduler::complete_redeploy`].
    Redeploy,
    /// The service can never satisfy the job; it has been marked failed.
    Unschedulable(String),
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum SchedulerError {
    #[error("unknown job {0}")]
    UnknownJob(JobId),
    #[error("job {0} was already submitted")]
    DuplicateJob(JobId),
    #[error("job {0} asks for zero replicas")]
    ZeroReplicas(JobId),
    #[error("job {job}: illegal transition {from} -> {to}")]
    IllegalTransition {
        job: JobId,
        from: JobStatus,
        to: JobStatus,
    },
    #[error("job {0} is not waiting for a redeployment")]
    NotRedeploying(JobId),
}

type ServiceKey = (String, String);

enum Attempt {
    Placed(Vec<Resource>, Vec<String>),
    Wait,
    Redeploy,
    Never(String),
}

pub struct Scheduler {
    policy: Box<dyn Policy>,
    jobs: BTreeMap<JobId, JobAllocation>,
    resources: BTreeMap<String, ResourceAllocation>,
    services: BTreeMap<ServiceKey, Vec<Resource>>,
    queue: VecDeque<JobId>,
    /// Services held idle for a recycling job.
    draining: BTreeMap<ServiceKey, JobId>,
    redeploying: BTreeSet<JobId>,
    events: EventLog,
}

impl Scheduler {
    pub fn new(policy: Box<dyn Policy>, events: EventLog) -> Self {
        Scheduler {
            policy,
            jobs: BTreeMap::new(),
            resources: BTreeMap::new(),
            services: BTreeMap::new(),
            queue: VecDeque::new(),
            draining: BTreeMap::new(),
            redeploying: BTreeSet::new(),
            events,
        }
    }

    pub fn policy_name(&self) -> &'static str {
        self.policy.name()
    }

    /// Replaces the known resource set of a service, e.g. after deployment
    /// or redeployment.
    pub fn register_resources(&mut self, model: &str, service: &str, resources: Vec<Resource>) {
        let key = (model.to_string(), service.to_string());
        if let Some(old) = self.services.get(&key) {
            for r in old {
                if !resources.contains(r) {
                    self.resources.remove(&r.key());
                }
            }
        }
        for r in &resources {
            self.resources
                .entry(r.key())
                .or_insert_with(|| ResourceAllocation {
                    resource: r.clone(),
                    model: model.to_string(),
                    service: service.to_string(),
                    jobs: Vec::new(),
                });
        }
        self.services.insert(key, resources);
    }

    pub fn job(&self, job: JobId) -> Option<&JobAllocation> {
        self.jobs.get(&job)
    }

    pub fn jobs(&self) -> &BTreeMap<JobId, JobAllocation> {
        &self.jobs
    }

    pub fn resource_allocations(&self) -> &BTreeMap<String, ResourceAllocation> {
        &self.resources
    }

    /// Waiting jobs, oldest first.
    pub fn queue(&self) -> Vec<JobId> {
        self.queue.iter().copied().collect()
    }

    pub fn running(&self) -> usize {
        self.jobs
            .values()
            .filter(|j| j.status == JobStatus::Running)
            .count()
    }

    /// Submits a fireable task. Jobs that cannot be placed right away join
    /// the waiting queue behind every earlier one.
    pub fn schedule(
        &mut self,
        job: JobId,
        task: TaskDescription,
        paths: &dyn RemotePaths,
    ) -> Result<Decision, SchedulerError> {
        if self.jobs.contains_key(&job) {
            return Err(SchedulerError::DuplicateJob(job));
        }
        if task.replicas == 0 {
            return Err(SchedulerError::ZeroReplicas(job));
        }
        self.events.emit(EventKind::JobQueued {
            job: job.to_string(),
            step: task.step.to_string(),
            model: task.model.clone(),
            service: task.service.clone(),
        });
        self.jobs.insert(
            job,
            JobAllocation {
                job,
                task,
                resources: Vec::new(),
                status: JobStatus::Pending,
            },
        );
        // Jobs already waiting go first.
        let blocked = self.queue.iter().any(|q| {
            let (a, b) = (&self.jobs[q].task, &self.jobs[&job].task);
            a.model == b.model && a.service == b.service
        });
        let decision = if blocked {
            None
        } else {
            self.attempt(job, paths, false)
        };
        Ok(match decision {
            Some(d) => d,
            None => {
                self.queue.push_back(job);
                self.events.emit(EventKind::JobWaiting {
                    job: job.to_string(),
                    step: self.jobs[&job].task.step.to_string(),
                    queue_length: self.queue.len(),
                });
                Decision::Queued
            }
        })
    }

    /// Records the end of a running job and offers freed resources to the
    /// waiting queue in arrival order. Returns the decisions taken for
    /// waiting jobs.
    pub fn notify_completion(
        &mut self,
        job: JobId,
        status: JobStatus,
        paths: &dyn RemotePaths,
    ) -> Result<Vec<(JobId, Decision)>, SchedulerError> {
        let alloc = self.jobs.get_mut(&job).ok_or(SchedulerError::UnknownJob(job))?;
        if alloc.status != JobStatus::Running
            || !matches!(status, JobStatus::Completed | JobStatus::Failed)
        {
            return Err(SchedulerError::IllegalTransition {
                job,
                from: alloc.status,
                to: status,
            });
        }
        alloc.status = status;
        for r in &alloc.resources {
            if let Some(ra) = self.resources.get_mut(&r.key()) {
                ra.jobs.retain(|j| *j != job);
            }
        }
        Ok(self.rescan(paths))
    }

    /// Places the job that triggered a redeployment on the fresh resources.
    pub fn complete_redeploy(
        &mut self,
        job: JobId,
        paths: &dyn RemotePaths,
    ) -> Result<Decision, SchedulerError> {
        if !self.redeploying.remove(&job) {
            return Err(SchedulerError::NotRedeploying(job));
        }
        let task = &self.jobs[&job].task;
        self.draining
            .remove(&(task.model.clone(), task.service.clone()));
        match self.attempt(job, paths, true) {
            Some(d) => Ok(d),
            None => {
                self.queue.push_front(job);
                Ok(Decision::Queued)
            }
        }
    }

    /// Marks a job that never ran (or whose redeployment failed) as failed
    /// and releases whatever it held.
    pub fn abort(
        &mut self,
        job: JobId,
        paths: &dyn RemotePaths,
    ) -> Result<Vec<(JobId, Decision)>, SchedulerError> {
        let alloc = self.jobs.get_mut(&job).ok_or(SchedulerError::UnknownJob(job))?;
        if alloc.status != JobStatus::Pending {
            return Err(SchedulerError::IllegalTransition {
                job,
                from: alloc.status,
                to: JobStatus::Failed,
            });
        }
        alloc.status = JobStatus::Failed;
        self.queue.retain(|j| *j != job);
        self.redeploying.remove(&job);
        self.draining.retain(|_, j| *j != job);
        Ok(self.rescan(paths))
    }

    /// Offers resources to waiting jobs in arrival order.
    pub fn rescan(&mut self, paths: &dyn RemotePaths) -> Vec<(JobId, Decision)> {
        let mut decisions = Vec::new();
        let waiting: Vec<JobId> = self.queue.iter().copied().collect();
        // A job still waiting holds back every later job on its service.
        let mut blocked: BTreeSet<ServiceKey> = BTreeSet::new();
        for job in waiting {
            let task = &self.jobs[&job].task;
            let key = (task.model.clone(), task.service.clone());
            if blocked.contains(&key) {
                continue;
            }
            match self.attempt(job, paths, false) {
                Some(d) => {
                    self.queue.retain(|j| *j != job);
                    decisions.push((job, d));
                }
                None => {
                    blocked.insert(key);
                }
            }
        }
        decisions
    }

    /// One placement attempt; `None` means keep waiting.
    fn attempt(&mut self, job: JobId, paths: &dyn RemotePaths, fresh: bool) -> Option<Decision> {
        match self.try_place(job, paths, fresh) {
            Attempt::Wait => None,
            Attempt::Redeploy => Some(Decision::Redeploy),
            Attempt::Never(reason) => {
                let alloc = self.jobs.get_mut(&job).unwrap();
                alloc.status = JobStatus::Failed;
                self.events.emit(EventKind::Warning {
                    message: format!("{} ({job}) cannot be scheduled: {reason}", alloc.task.step),
                });
                Some(Decision::Unschedulable(reason))
            }
            Attempt::Placed(chosen, candidates) => {
                let alloc = self.jobs.get_mut(&job).unwrap();
                alloc.resources = chosen.clone();
                alloc.status = JobStatus::Running;
                for r in &chosen {
                    if let Some(ra) = self.resources.get_mut(&r.key()) {
                        ra.jobs.push(job);
                    }
                }
                self.events.emit(EventKind::JobScheduled {
                    job: job.to_string(),
                    step: alloc.task.step.to_string(),
                    candidates,
                    resources: chosen.iter().map(|r| r.id.clone()).collect(),
                    queue_length: self.queue.iter().filter(|j| **j != job).count(),
                });
                Some(Decision::Scheduled(chosen))
            }
        }
    }

    fn try_place(&mut self, job: JobId, paths: &dyn RemotePaths, fresh: bool) -> Attempt {
        let task = self.jobs[&job].task.clone();
        let key = (task.model.clone(), task.service.clone());
        let Some(service) = self.services.get(&key) else {
            return Attempt::Wait;
        };
        if self.redeploying.contains(&job) {
            return Attempt::Wait;
        }
        if let Some(holder) = self.draining.get(&key) {
            if *holder != job {
                return Attempt::Wait;
            }
        }
        let capable = service
            .iter()
            .filter(|r| satisfies(r, &task.requirements))
            .count();
        if capable < task.replicas as usize {
            return Attempt::Never(format!(
                "needs {} resource(s) of {}/{} but only {capable} qualify",
                task.replicas, task.model, task.service
            ));
        }

        if task.recycle && !fresh {
            let busy = service.iter().any(|r| {
                self.resources
                    .get(&r.key())
                    .is_some_and(|ra| !ra.jobs.is_empty())
            });
            self.draining.insert(key, job);
            if busy {
                return Attempt::Wait;
            }
            self.redeploying.insert(job);
            return Attempt::Redeploy;
        }

        let candidates: Vec<String> = service.iter().map(|r| r.id.clone()).collect();
        let mut chosen: Vec<Resource> = Vec::new();
        while chosen.len() < task.replicas as usize {
            let available: Vec<Resource> = service
                .iter()
                .filter(|r| !chosen.contains(r))
                .cloned()
                .collect();
            let input = PolicyInput {
                task: &task,
                available: &available,
                remote_paths: paths,
                jobs: &self.jobs,
                resources: &self.resources,
            };
            match self.policy.get_resource(&input) {
                Some(r) if available.contains(&r) => chosen.push(r),
                // Not enough resources right now: nothing was reserved yet,
                // so dropping the partial choice is the rollback.
                _ => return Attempt::Wait,
            }
        }
        Attempt::Placed(chosen, candidates)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn resource(model: &str, service: &str, id: &str) -> Resource {
        Resource {
            id: id.to_string(),
            model: model.to_string(),
            service: service.to_string(),
            hostname: format!("{model}-{id}"),
            root: format!("/tmp/{model}/{id}"),
            cores: None,
            memory: None,
        }
    }

    fn task(step: &str, replicas: u32, recycle: bool) -> TaskDescription {
        TaskDescription {
            step: StepPath::parse(step).unwrap(),
            requirements: Requirements::default(),
            dependencies: vec![TokenId(1)],
            model: "M".into(),
            service: "s".into(),
            replicas,
            recycle,
        }
    }

    fn scheduler(n: usize) -> Scheduler {
        let mut s = Scheduler::new(Box::new(DataLocalityPolicy), EventLog::new());
        s.register_resources(
            "M",
            "s",
            (0..n).map(|i| resource("M", "s", &format!("r{i}"))).collect(),
        );
        s
    }

    struct Held(Vec<(TokenId, String)>);

    impl RemotePaths for Held {
        fn holds(&self, token: TokenId, resource: &Resource) -> bool {
            self.0.iter().any(|(t, id)| *t == token && *id == resource.id)
        }
    }

    fn ids(d: &Decision) -> Vec<String> {
        match d {
            Decision::Scheduled(rs) => rs.iter().map(|r| r.id.clone()).collect(),
            other => panic!("not scheduled: {other:?}"),
        }
    }

    #[test]
    fn single_free_resource() {
        let mut s = scheduler(1);
        let d = s.schedule(JobId(1), task("/a", 1, false), &NoRemotePaths).unwrap();
        assert_eq!(ids(&d), ["r0"]);
    }

    #[test]
    fn one_replica_service_serializes_jobs() {
        let mut s = scheduler(1);
        s.schedule(JobId(1), task("/a", 1, false), &NoRemotePaths).unwrap();
        let d = s.schedule(JobId(2), task("/b", 1, false), &NoRemotePaths).unwrap();
        assert_eq!(d, Decision::Queued);
        let next = s
            .notify_completion(JobId(1), JobStatus::Completed, &NoRemotePaths)
            .unwrap();
        assert_eq!(next.len(), 1);
        assert_eq!(next[0].0, JobId(2));
        assert_eq!(ids(&next[0].1), ["r0"]);
    }

    #[test]
    fn replicas_take_distinct_resources() {
        let mut s = scheduler(6);
        let d = s.schedule(JobId(1), task("/a", 3, false), &NoRemotePaths).unwrap();
        let chosen = ids(&d);
        assert_eq!(chosen, ["r0", "r1", "r2"]);
        let d = s.schedule(JobId(2), task("/b", 3, false), &NoRemotePaths).unwrap();
        assert_eq!(ids(&d), ["r3", "r4", "r5"]);
    }

    #[test]
    fn partial_gathers_are_rolled_back() {
        let mut s = scheduler(2);
        s.schedule(JobId(1), task("/a", 1, false), &NoRemotePaths).unwrap();
        assert_eq!(
            s.schedule(JobId(2), task("/b", 2, false), &NoRemotePaths).unwrap(),
            Decision::Queued
        );
        assert!(s.resource_allocations()["M/r1"].jobs.is_empty());
        let next = s
            .notify_completion(JobId(1), JobStatus::Completed, &NoRemotePaths)
            .unwrap();
        assert_eq!(ids(&next[0].1), ["r0", "r1"]);
    }

    #[test]
    fn more_replicas_than_the_service_has() {
        let mut s = scheduler(2);
        let d = s.schedule(JobId(1), task("/a", 3, false), &NoRemotePaths).unwrap();
        assert!(matches!(d, Decision::Unschedulable(_)));
        assert_eq!(s.job(JobId(1)).unwrap().status, JobStatus::Failed);
    }

    #[test]
    fn requirements_filter_resources() {
        let mut s = Scheduler::new(Box::new(DataLocalityPolicy), EventLog::new());
        let mut small = resource("M", "s", "a");
        small.cores = Some(1);
        let mut big = resource("M", "s", "b");
        big.cores = Some(8);
        s.register_resources("M", "s", vec![small, big]);
        let mut t = task("/a", 1, false);
        t.requirements.cores = Some(4);
        assert_eq!(ids(&s.schedule(JobId(1), t, &NoRemotePaths).unwrap()), ["b"]);
    }

    #[test]
    fn locality_examples() {
        // Dependency on r1 only: r1 wins over the lexicographically first r0.
        let mut s = scheduler(2);
        let held = Held(vec![(TokenId(1), "r1".into())]);
        assert_eq!(ids(&s.schedule(JobId(1), task("/a", 1, false), &held).unwrap()), ["r1"]);
        // Dependency holder busy: locality is only a preference.
        assert_eq!(ids(&s.schedule(JobId(2), task("/b", 1, false), &held).unwrap()), ["r0"]);
    }

    #[test]
    fn fcfs_order_with_three_waiting() {
        let mut s = scheduler(1);
        s.schedule(JobId(0), task("/x", 1, false), &NoRemotePaths).unwrap();
        for i in 1..=3 {
            s.schedule(JobId(i), task(&format!("/t{i}"), 1, false), &NoRemotePaths)
                .unwrap();
        }
        assert_eq!(s.queue(), [JobId(1), JobId(2), JobId(3)]);
        let mut order = Vec::new();
        let mut current = JobId(0);
        for _ in 0..3 {
            let next = s
                .notify_completion(current, JobStatus::Completed, &NoRemotePaths)
                .unwrap();
            assert_eq!(next.len(), 1);
            current = next[0].0;
            order.push(current);
        }
        assert_eq!(order, [JobId(1), JobId(2), JobId(3)]);
    }

    #[test]
    fn later_arrivals_do_not_overtake_waiting_jobs() {
        let mut s = scheduler(2);
        s.schedule(JobId(0), task("/x", 1, false), &NoRemotePaths).unwrap();
        // Needs both resources, waits.
        s.schedule(JobId(1), task("/big", 2, false), &NoRemotePaths).unwrap();
        // r1 is free but an earlier job is waiting on this service.
        assert_eq!(
            s.schedule(JobId(2), task("/small", 1, false), &NoRemotePaths).unwrap(),
            Decision::Queued
        );
        let next = s
            .notify_completion(JobId(0), JobStatus::Completed, &NoRemotePaths)
            .unwrap();
        assert_eq!(next[0].0, JobId(1));
        assert_eq!(next.len(), 1);
    }

    #[test]
    fn completion_errors() {
        let mut s = scheduler(1);
        s.schedule(JobId(1), task("/a", 1, false), &NoRemotePaths).unwrap();
        s.notify_completion(JobId(1), JobStatus::Failed, &NoRemotePaths)
            .unwrap();
        assert!(matches!(
            s.notify_completion(JobId(1), JobStatus::Completed, &NoRemotePaths),
            Err(SchedulerError::IllegalTransition { .. })
        ));
        assert_eq!(
            s.notify_completion(JobId(9), JobStatus::Completed, &NoRemotePaths),
            Err(SchedulerError::UnknownJob(JobId(9)))
        );
        assert_eq!(
            s.schedule(JobId(1), task("/a", 1, false), &NoRemotePaths),
            Err(SchedulerError::DuplicateJob(JobId(1)))
        );
    }

    #[test]
    fn recycle_drains_then_redeploys() {
        let mut s = scheduler(2);
        s.schedule(JobId(1), task("/a", 1, false), &NoRemotePaths).unwrap();
        assert_eq!(
            s.schedule(JobId(2), task("/r", 1, true), &NoRemotePaths).unwrap(),
            Decision::Queued
        );
        // Service is held for the recycling job.
        assert_eq!(
            s.schedule(JobId(3), task("/c", 1, false), &NoRemotePaths).unwrap(),
            Decision::Queued
        );
        let next = s
            .notify_completion(JobId(1), JobStatus::Completed, &NoRemotePaths)
            .unwrap();
        assert_eq!(next, vec![(JobId(2), Decision::Redeploy)]);
        s.register_resources(
            "M",
            "s",
            vec![resource("M", "s", "g1-r0"), resource("M", "s", "g1-r1")],
        );
        let d = s.complete_redeploy(JobId(2), &NoRemotePaths).unwrap();
        assert_eq!(ids(&d), ["g1-r0"]);
        let next = s.rescan(&NoRemotePaths);
        assert_eq!(next.len(), 1);
        assert_eq!(ids(&next[0].1), ["g1-r1"]);
        assert!(!s.resource_allocations().contains_key("M/r0"));
    }

    #[test]
    fn idle_recycle_redeploys_immediately() {
        let mut s = scheduler(1);
        assert_eq!(
            s.schedule(JobId(1), task("/r", 1, true), &NoRemotePaths).unwrap(),
            Decision::Redeploy
        );
        assert_eq!(
            s.complete_redeploy(JobId(2), &NoRemotePaths),
            Err(SchedulerError::NotRedeploying(JobId(2)))
        );
    }
}
