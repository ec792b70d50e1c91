//! Structured run log shared by every engine component.

use std::sync::{Arc, Mutex};
use std::time::Instant;

use serde::{Deserialize, Serialize};

/// One record of the run log. Totally ordered by `(t, seq)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Event {
    pub seq: u64,
    /// Seconds since the run started.
    pub t: f64,
    #[serde(flatten)]
    pub kind: EventKind,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum EventKind {
    ScatterExpanded {
        step: String,
        cardinality: usize,
    },
    TaskFireable {
        step: String,
    },
    DeployStarted {
        model: String,
    },
    DeployFinished {
        model: String,
        resources: Vec<String>,
    },
    DeployFailed {
        model: String,
        error: String,
    },
    ExternalAttached {
        model: String,
        resources: Vec<String>,
    },
    /// Every task bound to the model has finished; the model stays up until
    /// the end of the run.
    ModelIdle {
        model: String,
    },
    RedeployStarted {
        model: String,
        service: String,
        resources: Vec<String>,
    },
    RedeployFinished {
        model: String,
        service: String,
        resources: Vec<String>,
    },
    UndeployStarted {
        model: String,
    },
    UndeployFinished {
        model: String,
    },
    UndeployFailed {
        model: String,
        error: String,
    },
    JobQueued {
        job: String,
        step: String,
        model: String,
        service: String,
    },
    JobScheduled {
        job: String,
        step: String,
        candidates: Vec<String>,
        resources: Vec<String>,
        queue_length: usize,
    },
    JobWaiting {
        job: String,
        step: String,
        queue_length: usize,
    },
    InputsStaged {
        job: String,
    },
    JobStarted {
        job: String,
    },
    JobFinished {
        job: String,
        step: String,
        status: String,
        exit_codes: Vec<i32>,
    },
    StepFailed {
        step: String,
        reason: String,
    },
    Copy {
        token: String,
        plan: String,
        leg: u8,
        source: String,
        destination: String,
        kind: String,
        bytes: u64,
        duration_s: f64,
    },
    TransferSkipped {
        token: String,
        destination: String,
        reason: String,
    },
    OutputCollected {
        token: String,
        path: String,
    },
    Warning {
        message: String,
    },
}

#[derive(Debug)]
struct Inner {
    start: Instant,
    events: Vec<Event>,
}

/// Append-only, thread-safe event log.
#[derive(Debug, Clone)]
pub struct EventLog {
    inner: Arc<Mutex<Inner>>,
}

impl Default for EventLog {
    fn default() -> Self {
        Self::new()
    }
}

impl EventLog {
    pub fn new() -> Self {
        EventLog {
            inner: Arc::new(Mutex::new(Inner {
                start: Instant::now(),
                events: Vec::new(),
            })),
        }
    }

    pub fn emit(&self, kind: EventKind) -> f64 {
        let mut inner = self.inner.lock().unwrap();
        let t = inner.start.elapsed().as_secs_f64();
        let seq = inner.events.len() as u64;
        log::debug!("{seq} {t:.3} {kind:?}");
        inner.events.push(Event { seq, t, kind });
        t
    }

    /// Seconds since the log was created.
    pub fn now(&self) -> f64 {
        self.inner.lock().unwrap().start.elapsed().as_secs_f64()
    }

    pub fn snapshot(&self) -> Vec<Event> {
        self.inner.lock().unwrap().events.clone()
    }

    pub fn len(&self) -> usize {
        self.inner.lock().unwrap().events.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl EventKind {
    pub fn name(&self) -> &'static str {
        match self {
            EventKind::ScatterExpanded { .. } => "scatter_expanded",
            EventKind::TaskFireable { .. } => "task_fireable",
            EventKind::DeployStarted { .. } => "deploy_started",
            EventKind::DeployFinished { .. } => "deploy_finished",
            EventKind::DeployFailed { .. } => "deploy_failed",
            EventKind::ExternalAttached { .. } => "external_attached",
            EventKind::ModelIdle { .. } => "model_idle",
            EventKind::RedeployStarted { .. } => "redeploy_started",
            EventKind::RedeployFinished { .. } => "redeploy_finished",
            EventKind::UndeployStarted { .. } => "undeploy_started",
            EventKind::UndeployFinished { .. } => "undeploy_finished",
            EventKind::UndeployFailed { .. } => "undeploy_failed",
            EventKind::JobQueued { .. } => "job_queued",
            EventKind::JobScheduled { .. } => "job_scheduled",
            EventKind::JobWaiting { .. } => "job_waiting",
            EventKind::InputsStaged { .. } => "inputs_staged",
            EventKind::JobStarted { .. } => "job_started",
            EventKind::JobFinished { .. } => "job_finished",
            EventKind::StepFailed { .. } => "step_failed",
            EventKind::Copy { .. } => "copy",
            EventKind::TransferSkipped { .. } => "transfer_skipped",
            EventKind::OutputCollected { .. } => "output_collected",
            EventKind::Warning { .. } => "warning",
        }
    }

    /// The event with timing measurements zeroed, for order comparisons.
    pub fn without_timing(&self) -> EventKind {
        let mut k = self.clone();
        if let EventKind::Copy { duration_s, .. } = &mut k {
            *duration_s = 0.0;
        }
        k
    }
}
