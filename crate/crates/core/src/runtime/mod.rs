//! Workflow execution loop.
//!
//! A single control thread owns the workflow state. It fires tasks whose
//! predecessors completed, deploys models the first time one of their tasks
//! fires, submits jobs to the scheduler and hands placed jobs to workers.
//! Workers report back through a channel, so every state change happens on
//! the control thread in message order. In serial mode the work is done
//! inline, one item at a time, which makes the event order reproducible.

mod job;

use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::path::{Path, PathBuf};
use std::sync::mpsc;
use std::sync::Arc;
use std::time::{SystemTime, UNIX_EPOCH};

use thiserror::Error;

pub use job::{staging_path, workdir, HOSTS_VAR, RANK_VAR};
use job::{BoundInput, JobPlan, JobResult};

use crate::config::{resolve_bindings, BindingTable, ConfigError, ModelEntry, StreamflowFile};
use crate::connector::{ConnectorContext, ConnectorRegistry, Resource};
use crate::datamgr::{DataManager, Site};
use crate::deployment::DeploymentManager;
use crate::events::{EventKind, EventLog};
use crate::report::{OutputRecord, RunReport};
use crate::scheduler::{policy_by_name, Decision, JobId, JobStatus, Scheduler, TaskDescription};
use crate::wfmodel::{
    expand_scatter, load_workflow, transform_graph, DataKind, InputValue, Source, StepPath,
    TokenId, TransformedGraph, WorkflowError, WorkflowGraph,
};

#[derive(Debug, Clone)]
pub struct EngineOptions {
    /// Run one job at a time, inline, for reproducible event orders.
    pub serial: bool,
    /// Deploy every model at start instead of on first use.
    pub eager: bool,
    /// Scheduling policy name.
    pub policy: String,
    /// Compare content digests when probing for pre-existing inputs.
    pub verify_checksum: bool,
}

impl Default for EngineOptions {
    fn default() -> Self {
        EngineOptions {
            serial: false,
            eager: false,
            policy: "data-locality".into(),
            verify_checksum: false,
        }
    }
}

/// Everything a run needs, already validated.
pub struct RunSetup {
    pub workflow: String,
    pub graph: WorkflowGraph,
    pub bindings: BindingTable,
    pub models: BTreeMap<String, ModelEntry>,
    pub registry: ConnectorRegistry,
    pub context: ConnectorContext,
    pub outdir: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RunStatus {
    Completed,
    /// At least one task failed; teardown succeeded.
    Failed,
    /// Undeploying at least one model failed.
    TeardownFailed,
}

impl RunStatus {
    pub fn as_str(&self) -> &'static str {
        match self {
            RunStatus::Completed => "completed",
            RunStatus::Failed => "failed",
            RunStatus::TeardownFailed => "teardown_failed",
        }
    }
}

pub struct RunOutcome {
    pub status: RunStatus,
    pub report: RunReport,
}

#[derive(Debug, Error)]
pub enum EngineError {
    #[error("unknown scheduling policy `{0}`")]
    UnknownPolicy(String),
    #[error("{0}")]
    Workflow(#[from] crate::wfmodel::WorkflowError),
    #[error("cannot create output directory {path}: {source}")]
    Outdir {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Error)]
pub enum SetupError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("workflow `{workflow}`: {source}")]
    Workflow {
        workflow: String,
        #[source]
        source: WorkflowError,
    },
}

/// Loads workflow `name` of a validated streamflow-file and resolves the
/// binding of every step. Nothing is deployed.
pub fn prepare(file: &StreamflowFile, name: &str) -> Result<(WorkflowGraph, BindingTable), SetupError> {
    let path = file
        .workflow_path(name)
        .ok_or_else(|| ConfigError::UnknownWorkflow(name.to_string()))?;
    let graph = load_workflow(&path).map_err(|source| SetupError::Workflow {
        workflow: name.to_string(),
        source,
    })?;
    let bindings = resolve_bindings(file, name, &graph)?;
    transform_graph(&graph, &bindings).map_err(|source| SetupError::Workflow {
        workflow: name.to_string(),
        source,
    })?;
    Ok((graph, bindings))
}

impl RunSetup {
    /// Run setup for workflow `name`, with sandboxes under
    /// `<outdir>/.sandbox` unless overridden through the environment.
    pub fn from_file(
        file: &StreamflowFile,
        name: &str,
        registry: ConnectorRegistry,
        outdir: &Path,
    ) -> Result<RunSetup, SetupError> {
        let (graph, bindings) = prepare(file, name)?;
        Ok(RunSetup {
            workflow: name.to_string(),
            graph,
            bindings,
            models: file.models.clone(),
            registry,
            context: ConnectorContext::from_env(outdir.join(".sandbox")),
            outdir: outdir.to_path_buf(),
        })
    }
}

/// State shared with worker threads.
pub(crate) struct Shared {
    pub deployment: Arc<DeploymentManager>,
    pub data: DataManager,
    pub events: EventLog,
    pub serial: bool,
}

enum Work {
    Deploy(String),
    Run(Box<JobPlan>),
    Redeploy {
        job: JobId,
        model: String,
        service: String,
    },
}

enum Msg {
    Deployed {
        model: String,
        result: Result<(), String>,
    },
    JobDone(JobResult),
    Redeployed {
        job: JobId,
        model: String,
        service: String,
        result: Result<Vec<Resource>, String>,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum StepState {
    Waiting,
    /// Fired; waiting for its model or for the scheduler.
    Submitted,
    Running,
    Completed,
    Failed,
}

#[derive(Debug, Clone, PartialEq)]
enum ModelPhase {
    Deploying,
    Ready,
    Failed(String),
}

struct Engine {
    shared: Arc<Shared>,
    serial: bool,
    graph: WorkflowGraph,
    bindings: BindingTable,
    transformed: TransformedGraph,
    scheduler: Scheduler,
    steps: BTreeMap<StepPath, StepState>,
    outputs: BTreeMap<(StepPath, String), Vec<TokenId>>,
    inputs: BTreeMap<String, Vec<TokenId>>,
    plans: BTreeMap<JobId, JobPlan>,
    next_job: u64,
    models: BTreeMap<String, ModelPhase>,
    awaiting_model: BTreeMap<String, Vec<StepPath>>,
    idle: BTreeSet<String>,
    outstanding: usize,
    tx: mpsc::Sender<Msg>,
    rx: mpsc::Receiver<Msg>,
    inline: VecDeque<Msg>,
    errors: Vec<String>,
}

/// Runs one workflow to the end and tears every model down.
pub fn execute_workflow(setup: RunSetup, options: &EngineOptions) -> Result<RunOutcome, EngineError> {
    let policy =
        policy_by_name(&options.policy).ok_or_else(|| EngineError::UnknownPolicy(options.policy.clone()))?;
    std::fs::create_dir_all(&setup.outdir).map_err(|source| EngineError::Outdir {
        path: setup.outdir.display().to_string(),
        source,
    })?;
    let outdir = setup.outdir.canonicalize().unwrap_or(setup.outdir.clone());
    let started_at = SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs_f64())
        .unwrap_or(0.0);
    let events = EventLog::new();
    let deployment = Arc::new(DeploymentManager::new(
        setup.models.clone(),
        setup.registry,
        setup.context,
        events.clone(),
    ));
    let data = DataManager::new(&outdir, deployment.clone(), events.clone())
        .with_checksum_verification(options.verify_checksum);
    let shared = Arc::new(Shared {
        deployment,
        data,
        events: events.clone(),
        serial: options.serial,
    });
    let transformed = transform_graph(&setup.graph, &setup.bindings)?;
    let (tx, rx) = mpsc::channel();
    let mut engine = Engine {
        shared: shared.clone(),
        serial: options.serial,
        steps: setup.graph.steps.keys().map(|s| (s.clone(), StepState::Waiting)).collect(),
        graph: setup.graph,
        bindings: setup.bindings,
        transformed,
        scheduler: Scheduler::new(policy, events.clone()),
        outputs: BTreeMap::new(),
        inputs: BTreeMap::new(),
        plans: BTreeMap::new(),
        next_job: 0,
        models: BTreeMap::new(),
        awaiting_model: BTreeMap::new(),
        idle: BTreeSet::new(),
        outstanding: 0,
        tx,
        rx,
        inline: VecDeque::new(),
        errors: Vec::new(),
    };

    engine.register_workflow_inputs();
    if options.eager {
        for model in engine.transformed.models() {
            engine.request_deploy(&model);
        }
    }
    engine.advance();
    while engine.outstanding > 0 {
        let msg = match engine.inline.pop_front() {
            Some(m) => m,
            None => match engine.rx.recv() {
                Ok(m) => m,
                Err(_) => break,
            },
        };
        engine.outstanding -= 1;
        engine.handle(msg);
        engine.advance();
    }
    engine.finish_stalled();
    let outputs = engine.collect_outputs();

    let mut status = if engine.steps.values().all(|s| *s == StepState::Completed) && engine.errors.is_empty() {
        RunStatus::Completed
    } else {
        RunStatus::Failed
    };
    if let Err(e) = shared.deployment.undeploy_all() {
        engine.errors.push(e.to_string());
        status = RunStatus::TeardownFailed;
    }

    let run_id = format!("{}-{}", setup.workflow, started_at as u64);
    let mut report = RunReport::from_events(&run_id, &setup.workflow, status.as_str(), started_at, events.snapshot());
    report.errors = engine.errors;
    report.outputs = outputs;
    Ok(RunOutcome { status, report })
}

fn relative(outdir: &Path, path: &Path) -> String {
    path.strip_prefix(outdir).unwrap_or(path).to_string_lossy().into_owned()
}

impl Engine {
    fn register_workflow_inputs(&mut self) {
        let data = &self.shared.data;
        for (name, input) in &self.graph.inputs {
            let values = match &input.value {
                InputValue::Single(v) => vec![v.clone()],
                InputValue::List(vs) => vs.clone(),
            };
            let mut tokens = Vec::new();
            for v in values {
                let token = match input.kind {
                    DataKind::Value => data.register_token(DataKind::Value, name, Some(v)),
                    kind => {
                        let path = Path::new(&v);
                        let base = path
                            .file_name()
                            .map(|s| s.to_string_lossy().into_owned())
                            .unwrap_or_else(|| name.clone());
                        let t = data.register_token(kind, &base, None);
                        if path.exists() {
                            data.add_remote_path_mapping(t.id, Site::Management, &v)
                                .expect("token just registered");
                        } else {
                            self.errors.push(format!("workflow input `{name}`: {v} does not exist"));
                        }
                        t
                    }
                };
                tokens.push(token.id);
            }
            self.inputs.insert(name.clone(), tokens);
        }
    }

    fn dispatch(&mut self, work: Work) {
        self.outstanding += 1;
        let shared = self.shared.clone();
        let perform = move || -> Msg {
            match work {
                Work::Deploy(model) => Msg::Deployed {
                    result: shared.deployment.ensure_deployed(&model).map(|_| ()).map_err(|e| e.to_string()),
                    model,
                },
                Work::Run(plan) => Msg::JobDone(job::run_job(&shared, *plan)),
                Work::Redeploy { job, model, service } => {
                    let result = (|| {
                        let old = shared
                            .deployment
                            .available_resources(&model, &service)
                            .map_err(|e| e.to_string())?;
                        shared.data.secure_outputs(&old).map_err(|e| e.to_string())?;
                        let fresh = shared
                            .deployment
                            .redeploy_service(&model, &service)
                            .map_err(|e| e.to_string())?;
                        shared.data.invalidate_resources(&old);
                        Ok(fresh)
                    })();
                    Msg::Redeployed {
                        job,
                        model,
                        service,
                        result,
                    }
                }
            }
        };
        if self.serial {
            let msg = perform();
            self.inline.push_back(msg);
        } else {
            let tx = self.tx.clone();
            std::thread::spawn(move || {
                let _ = tx.send(perform());
            });
        }
    }

    fn request_deploy(&mut self, model: &str) {
        if self.models.contains_key(model) {
            return;
        }
        self.models.insert(model.to_string(), ModelPhase::Deploying);
        self.dispatch(Work::Deploy(model.to_string()));
    }

    /// Repeats failure propagation, scatter expansion and firing until
    /// nothing changes.
    fn advance(&mut self) {
        loop {
            let mut changed = false;
            let waiting: Vec<StepPath> = self
                .steps
                .iter()
                .filter(|(_, s)| **s == StepState::Waiting)
                .map(|(p, _)| p.clone())
                .collect();
            for step in waiting {
                if self.steps.get(&step) != Some(&StepState::Waiting) {
                    continue;
                }
                let preds = self.graph.predecessors(&step);
                let states: Vec<StepState> = preds.iter().map(|p| self.steps[p]).collect();
                if states.contains(&StepState::Failed) {
                    self.fail_step(&step, "an upstream step failed".into());
                    changed = true;
                } else if states.iter().all(|s| *s == StepState::Completed) {
                    if self.graph.steps[&step].scatter.is_some() {
                        self.expand(&step);
                        changed = true;
                        break;
                    }
                    self.fire(&step);
                    changed = true;
                }
            }
            if !changed {
                break;
            }
        }
    }

    /// Tokens feeding `source`, i.e. a workflow input or a step output.
    fn source_tokens(&self, source: &Source) -> Vec<TokenId> {
        match source {
            Source::Workflow(name) => self.inputs.get(name).cloned().unwrap_or_default(),
            Source::Step { step, output } => self
                .outputs
                .get(&(step.clone(), output.clone()))
                .cloned()
                .unwrap_or_default(),
        }
    }

    fn expand(&mut self, step: &StepPath) {
        let spec = &self.graph.steps[step];
        let scatter = spec.scatter.clone().expect("scatter step");
        let port = spec.input(&scatter.input).expect("validated scatter input");
        let n = self.source_tokens(&port.source).len();
        if let Some(c) = scatter.cardinality {
            if c != n {
                self.fail_step(step, format!("declared scatter cardinality {c} but the list has {n} elements"));
                return;
            }
        }
        let expanded = expand_scatter(&self.graph, step, n).and_then(|g| {
            let mut bindings = self.bindings.clone();
            bindings
                .refresh(&g)
                .map_err(|_| crate::wfmodel::WorkflowError::UnboundStep(step.clone()))?;
            let t = transform_graph(&g, &bindings)?;
            Ok((g, bindings, t))
        });
        match expanded {
            Ok((graph, bindings, transformed)) => {
                self.shared.events.emit(EventKind::ScatterExpanded {
                    step: step.to_string(),
                    cardinality: n,
                });
                let mut steps = BTreeMap::new();
                for p in graph.steps.keys() {
                    steps.insert(p.clone(), self.steps.get(p).copied().unwrap_or(StepState::Waiting));
                }
                self.steps = steps;
                self.graph = graph;
                self.bindings = bindings;
                self.transformed = transformed;
            }
            Err(e) => self.fail_step(step, e.to_string()),
        }
    }

    fn fire(&mut self, step: &StepPath) {
        self.shared.events.emit(EventKind::TaskFireable { step: step.to_string() });
        self.steps.insert(step.clone(), StepState::Submitted);
        let model = self.transformed.task_models[step].clone();
        match self.models.get(&model).cloned() {
            Some(ModelPhase::Ready) => self.submit(step),
            Some(ModelPhase::Failed(e)) => self.fail_step(step, format!("model `{model}` failed to deploy: {e}")),
            Some(ModelPhase::Deploying) => self.awaiting_model.entry(model).or_default().push(step.clone()),
            None => {
                self.awaiting_model.entry(model.clone()).or_default().push(step.clone());
                self.request_deploy(&model);
            }
        }
    }

    fn bind_inputs(&self, step: &StepPath) -> Result<Vec<BoundInput>, String> {
        let spec = &self.graph.steps[step];
        let data = &self.shared.data;
        let mut bound = Vec::new();
        for port in &spec.inputs {
            let tokens = self.source_tokens(&port.source);
            let selected = match port.element {
                Some(i) => vec![*tokens.get(i).ok_or_else(|| {
                    format!("input `{}` wants element {i} of a {}-element list", port.name, tokens.len())
                })?],
                None => tokens,
            };
            let list = port.element.is_none() && self.graph.input_is_list(step, &port.name);
            if !list && selected.len() != 1 {
                return Err(format!("input `{}` has {} tokens, expected one", port.name, selected.len()));
            }
            bound.push(BoundInput {
                name: port.name.clone(),
                list,
                tokens: selected
                    .into_iter()
                    .map(|t| data.token(t).expect("registered token"))
                    .collect(),
            });
        }
        Ok(bound)
    }

    fn submit(&mut self, step: &StepPath) {
        let inputs = match self.bind_inputs(step) {
            Ok(i) => i,
            Err(e) => return self.fail_step(step, e),
        };
        let binding = self.bindings.get(step).expect("bound step").clone();
        self.next_job += 1;
        let job = JobId(self.next_job);
        let spec = self.graph.steps[step].clone();
        let task = TaskDescription {
            step: step.clone(),
            requirements: spec.requirements,
            dependencies: inputs
                .iter()
                .flat_map(|i| i.tokens.iter())
                .filter(|t| t.kind != DataKind::Value)
                .map(|t| t.id)
                .collect(),
            model: binding.target.model.clone(),
            service: binding.target.service.clone(),
            replicas: binding.replicas(),
            recycle: binding.recycle,
        };
        self.plans.insert(
            job,
            JobPlan {
                job,
                step: step.clone(),
                spec,
                model: binding.target.model.clone(),
                resources: Vec::new(),
                ranked: binding.replicas.is_some(),
                inputs,
            },
        );
        let decision = self.scheduler.schedule(job, task, &self.shared.data);
        match decision {
            Ok(d) => self.apply(job, d),
            Err(e) => self.fail_step(step, e.to_string()),
        }
    }

    fn apply(&mut self, job: JobId, decision: Decision) {
        let step = self.plans[&job].step.clone();
        match decision {
            Decision::Queued => {}
            Decision::Scheduled(resources) => {
                self.steps.insert(step, StepState::Running);
                let mut plan = self.plans[&job].clone();
                plan.resources = resources;
                self.dispatch(Work::Run(Box::new(plan)));
            }
            Decision::Redeploy => {
                let task = self.scheduler.job(job).expect("submitted").task.clone();
                self.dispatch(Work::Redeploy {
                    job,
                    model: task.model,
                    service: task.service,
                });
            }
            Decision::Unschedulable(reason) => self.fail_step(&step, reason),
        }
    }

    fn handle(&mut self, msg: Msg) {
        match msg {
            Msg::Deployed { model, result } => {
                let waiting = self.awaiting_model.remove(&model).unwrap_or_default();
                match result {
                    Ok(()) => {
                        if let Err(e) = self.register_model_resources(&model) {
                            self.models.insert(model.clone(), ModelPhase::Failed(e.clone()));
                            for s in waiting {
                                self.fail_step(&s, format!("model `{model}`: {e}"));
                            }
                            return;
                        }
                        self.models.insert(model.clone(), ModelPhase::Ready);
                        for s in waiting {
                            self.submit(&s);
                        }
                    }
                    Err(e) => {
                        self.models.insert(model.clone(), ModelPhase::Failed(e.clone()));
                        for s in waiting {
                            self.fail_step(&s, format!("model `{model}` failed to deploy: {e}"));
                        }
                    }
                }
            }
            Msg::JobDone(result) => {
                let status = result.status;
                if status == JobStatus::Completed {
                    for (port, tokens) in result.outputs {
                        self.outputs.insert((result.step.clone(), port), tokens);
                    }
                    self.steps.insert(result.step.clone(), StepState::Completed);
                    self.check_idle(&result.step);
                } else {
                    let reason = result.error.unwrap_or_else(|| "job failed".into());
                    self.fail_step(&result.step, reason);
                }
                match self.scheduler.notify_completion(result.job, status, &self.shared.data) {
                    Ok(decisions) => {
                        for (j, d) in decisions {
                            self.apply(j, d);
                        }
                    }
                    Err(e) => self.errors.push(e.to_string()),
                }
            }
            Msg::Redeployed {
                job,
                model,
                service,
                result,
            } => {
                let decisions = match result {
                    Ok(fresh) => {
                        self.scheduler.register_resources(&model, &service, fresh);
                        match self.scheduler.complete_redeploy(job, &self.shared.data) {
                            Ok(d) => {
                                self.apply(job, d);
                                Ok(self.scheduler.rescan(&self.shared.data))
                            }
                            Err(e) => Err(e),
                        }
                    }
                    Err(e) => {
                        let step = self.plans[&job].step.clone();
                        self.fail_step(&step, format!("redeploying {model}/{service}: {e}"));
                        self.scheduler.abort(job, &self.shared.data)
                    }
                };
                match decisions {
                    Ok(ds) => {
                        for (j, d) in ds {
                            self.apply(j, d);
                        }
                    }
                    Err(e) => self.errors.push(e.to_string()),
                }
            }
        }
    }

    fn register_model_resources(&mut self, model: &str) -> Result<(), String> {
        let connector = self.shared.deployment.connector(model).map_err(|e| e.to_string())?;
        let services: BTreeSet<String> = connector.service_names().into_iter().collect();
        for service in services {
            let rs = self
                .shared
                .deployment
                .available_resources(model, &service)
                .map_err(|e| e.to_string())?;
            self.scheduler.register_resources(model, &service, rs);
        }
        Ok(())
    }

    fn fail_step(&mut self, step: &StepPath, reason: String) {
        self.shared.events.emit(EventKind::StepFailed {
            step: step.to_string(),
            reason: reason.clone(),
        });
        log::warn!("step {step} failed: {reason}");
        self.steps.insert(step.clone(), StepState::Failed);
        self.check_idle(step);
    }

    fn check_idle(&mut self, step: &StepPath) {
        let Some(model) = self.transformed.task_models.get(step).cloned() else {
            return;
        };
        if self.idle.contains(&model) || !self.models.contains_key(&model) {
            return;
        }
        let done = self
            .transformed
            .tasks_of(&model)
            .iter()
            .all(|t| matches!(self.steps.get(t), Some(StepState::Completed | StepState::Failed)));
        if done {
            self.idle.insert(model.clone());
            self.shared.events.emit(EventKind::ModelIdle { model });
        }
    }

    /// Anything not finished once no work is outstanding can never run.
    fn finish_stalled(&mut self) {
        let stuck: Vec<StepPath> = self
            .steps
            .iter()
            .filter(|(_, s)| !matches!(s, StepState::Completed | StepState::Failed))
            .map(|(p, _)| p.clone())
            .collect();
        if stuck.is_empty() {
            return;
        }
        let message = format!(
            "run stalled with {} unfinished step(s): {}",
            stuck.len(),
            stuck.iter().map(|s| s.to_string()).collect::<Vec<_>>().join(", ")
        );
        self.shared.events.emit(EventKind::Warning { message: message.clone() });
        self.errors.push(message);
        for s in stuck {
            self.fail_step(&s, "stalled".into());
        }
    }

    /// Brings every terminal output of a completed step to the management node.
    fn collect_outputs(&mut self) -> BTreeMap<String, Vec<OutputRecord>> {
        let mut out = BTreeMap::new();
        let data = &self.shared.data;
        for (step, port) in self.graph.terminal_outputs() {
            if self.steps.get(&step) != Some(&StepState::Completed) {
                continue;
            }
            let key = Source::Step {
                step: step.clone(),
                output: port.clone(),
            }
            .to_string();
            let mut records = Vec::new();
            for id in self.outputs.get(&(step.clone(), port.clone())).cloned().unwrap_or_default() {
                let token = data.token(id).expect("registered token");
                let mut record = OutputRecord {
                    token: id.to_string(),
                    kind: token.kind.to_string(),
                    path: None,
                    value: None,
                };
                if token.kind == DataKind::Value {
                    record.value = token.value.clone();
                } else {
                    match data.collect_output(id) {
                        Ok(p) => record.path = Some(relative(data.outdir(), &p)),
                        Err(e) => self.errors.push(format!("collecting {key}: {e}")),
                    }
                }
                records.push(record);
            }
            out.insert(key, records);
        }
        out
    }
}
