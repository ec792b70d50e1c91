//! Workflow graph model: step paths, data ports, scatter expansion and the
//! deployment-aware graph transformation.

mod document;
mod path;
mod scatter;
mod transform;

use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::fmt;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use document::{load_workflow, parse_workflow, NATIVE_FORMAT};
pub use path::StepPath;
pub use scatter::expand_scatter;
pub use transform::{fireable_set, transform_graph, Node, TransformedGraph};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum WorkflowError {
    #[error("invalid workflow document: {0}")]
    Syntax(String),
    #[error("invalid step path `{0}`")]
    InvalidPath(String),
    #[error("duplicate step path `{0}`")]
    DuplicateStep(StepPath),
    #[error("step `{0}` is both a task and a sub-workflow")]
    TaskIsFolder(StepPath),
    #[error("dependency cycle through {}", join_paths(.0))]
    Cycle(Vec<StepPath>),
    #[error("step `{step}` input `{input}` references undeclared source `{source_ref}`")]
    Dangling {
        step: StepPath,
        input: String,
        source_ref: String,
    },
    #[error("step `{step}` input `{input}` expects {expected} but its source produces {found}")]
    KindMismatch {
        step: StepPath,
        input: String,
        expected: DataKind,
        found: DataKind,
    },
    #[error("step `{step}` scatters over `{input}`, which is not a declared input")]
    ScatterUnknownInput { step: StepPath, input: String },
    #[error("step `{step}` scatters over `{input}`, which is not a list")]
    ScatterNotList { step: StepPath, input: String },
    #[error("step `{0}` does not declare a scatter input")]
    NotScattered(StepPath),
    #[error("scatter of step `{0}` has cardinality 0")]
    EmptyScatter(StepPath),
    #[error("scatter branches rejoin at step `{step}` (branches of `{first}` and `{second}`)")]
    Rejoin {
        step: StepPath,
        first: StepPath,
        second: StepPath,
    },
    #[error("step `{step}` output `{output}` has invalid path pattern `{pattern}`")]
    InvalidOutputPattern {
        step: StepPath,
        output: String,
        pattern: String,
    },
    #[error("step `{step}` command uses unknown placeholder `{{{name}}}`")]
    UnknownPlaceholder { step: StepPath, name: String },
    #[error("unknown step `{0}`")]
    UnknownStep(StepPath),
    #[error("step `{0}` has no binding")]
    UnboundStep(StepPath),
}

fn join_paths(paths: &[StepPath]) -> String {
    paths
        .iter()
        .map(|p| format!("`{p}`"))
        .collect::<Vec<_>>()
        .join(" -> ")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DataKind {
    File,
    Directory,
    Value,
}

impl fmt::Display for DataKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            DataKind::File => "file",
            DataKind::Directory => "directory",
            DataKind::Value => "value",
        })
    }
}

/// Where an input port takes its data from.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Source {
    Workflow(String),
    Step { step: StepPath, output: String },
}

impl fmt::Display for Source {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Source::Workflow(name) => f.write_str(name),
            Source::Step { step, output } => {
                if step.is_root() {
                    write!(f, "/{output}")
                } else {
                    write!(f, "{step}/{output}")
                }
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InputPort {
    pub name: String,
    pub kind: DataKind,
    pub source: Source,
    /// Set on scatter replicas: the element of the source list this port consumes.
    pub element: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OutputCapture {
    /// Path pattern relative to the job working directory.
    Glob(String),
    Stdout,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct OutputPort {
    pub name: String,
    pub kind: DataKind,
    pub list: bool,
    pub capture: OutputCapture,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Requirements {
    pub cores: Option<u32>,
    /// Bytes.
    pub memory: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Scatter {
    pub input: String,
    /// Static cardinality override; otherwise resolved when the list materializes.
    pub cardinality: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StepSpec {
    pub command: String,
    pub inputs: Vec<InputPort>,
    pub outputs: Vec<OutputPort>,
    pub scatter: Option<Scatter>,
    pub requirements: Requirements,
    pub timeout: Option<Duration>,
    /// The scatter step whose expansion produced this step, if any.
    pub scatter_origin: Option<StepPath>,
}

impl StepSpec {
    pub fn input(&self, name: &str) -> Option<&InputPort> {
        self.inputs.iter().find(|i| i.name == name)
    }

    pub fn output(&self, name: &str) -> Option<&OutputPort> {
        self.outputs.iter().find(|o| o.name == name)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum InputValue {
    Single(String),
    List(Vec<String>),
}

/// A workflow-level input. File and directory values are paths on the
/// management node; value inputs carry their content.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct WorkflowInput {
    pub kind: DataKind,
    pub value: InputValue,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct TokenId(pub u64);

impl fmt::Display for TokenId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "t{}", self.0)
    }
}

/// Logical data item exchanged between steps. File and directory tokens
/// only carry a name; their replicas are tracked by the data manager.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DataToken {
    pub id: TokenId,
    pub kind: DataKind,
    pub name: String,
    pub value: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
pub struct Edge {
    pub producer: StepPath,
    pub output: String,
    pub consumer: StepPath,
    pub input: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct WorkflowGraph {
    pub steps: BTreeMap<StepPath, StepSpec>,
    pub inputs: BTreeMap<String, WorkflowInput>,
}

impl WorkflowGraph {
    /// Builds and validates a graph.
    pub fn new(
        inputs: BTreeMap<String, WorkflowInput>,
        steps: BTreeMap<StepPath, StepSpec>,
    ) -> Result<Self, WorkflowError> {
        let g = WorkflowGraph { steps, inputs };
        g.validate()?;
        Ok(g)
    }

    pub fn validate(&self) -> Result<(), WorkflowError> {
        self.check_hierarchy()?;
        for (path, spec) in &self.steps {
            for input in &spec.inputs {
                let (kind, _) = self.source_shape(path, input)?;
                if kind != input.kind {
                    return Err(WorkflowError::KindMismatch {
                        step: path.clone(),
                        input: input.name.clone(),
                        expected: input.kind,
                        found: kind,
                    });
                }
            }
            for output in &spec.outputs {
                if let OutputCapture::Glob(pattern) = &output.capture {
                    if !valid_output_pattern(pattern) {
                        return Err(WorkflowError::InvalidOutputPattern {
                            step: path.clone(),
                            output: output.name.clone(),
                            pattern: pattern.clone(),
                        });
                    }
                }
            }
            if let Some(scatter) = &spec.scatter {
                let Some(input) = spec.input(&scatter.input) else {
                    return Err(WorkflowError::ScatterUnknownInput {
                        step: path.clone(),
                        input: scatter.input.clone(),
                    });
                };
                if !self.source_shape(path, input)?.1 {
                    return Err(WorkflowError::ScatterNotList {
                        step: path.clone(),
                        input: scatter.input.clone(),
                    });
                }
            }
        }
        self.topo_order().map(|_| ())
    }

    fn check_hierarchy(&self) -> Result<(), WorkflowError> {
        for path in self.steps.keys() {
            if path.is_root() {
                return Err(WorkflowError::TaskIsFolder(path.clone()));
            }
            let mut parent = path.parent();
            while let Some(p) = parent {
                if self.steps.contains_key(&p) {
                    return Err(WorkflowError::TaskIsFolder(p));
                }
                parent = p.parent();
            }
        }
        Ok(())
    }

    /// Kind and list-ness of the data an input port receives.
    fn source_shape(
        &self,
        step: &StepPath,
        input: &InputPort,
    ) -> Result<(DataKind, bool), WorkflowError> {
        let dangling = || WorkflowError::Dangling {
            step: step.clone(),
            input: input.name.clone(),
            source_ref: input.source.to_string(),
        };
        let (kind, list) = match &input.source {
            Source::Workflow(name) => {
                let wi = self.inputs.get(name).ok_or_else(dangling)?;
                (wi.kind, matches!(wi.value, InputValue::List(_)))
            }
            Source::Step { step: producer, output } => {
                let out = self
                    .steps
                    .get(producer)
                    .and_then(|s| s.output(output))
                    .ok_or_else(dangling)?;
                (out.kind, out.list)
            }
        };
        if input.element.is_some() {
            if !list {
                return Err(dangling());
            }
            Ok((kind, false))
        } else {
            Ok((kind, list))
        }
    }

    /// Whether the port receives a list of tokens.
    pub fn input_is_list(&self, step: &StepPath, input: &str) -> bool {
        self.steps
            .get(step)
            .and_then(|s| s.input(input))
            .and_then(|i| self.source_shape(step, i).ok())
            .map(|(_, list)| list)
            .unwrap_or(false)
    }

    pub fn edges(&self) -> BTreeSet<Edge> {
        let mut edges = BTreeSet::new();
        for (path, spec) in &self.steps {
            for input in &spec.inputs {
                if let Source::Step { step, output } = &input.source {
                    edges.insert(Edge {
                        producer: step.clone(),
                        output: output.clone(),
                        consumer: path.clone(),
                        input: input.name.clone(),
                    });
                }
            }
        }
        edges
    }

    pub fn predecessors(&self, step: &StepPath) -> BTreeSet<StepPath> {
        self.steps
            .get(step)
            .map(|s| {
                s.inputs
                    .iter()
                    .filter_map(|i| match &i.source {
                        Source::Step { step, .. } => Some(step.clone()),
                        Source::Workflow(_) => None,
                    })
                    .collect()
            })
            .unwrap_or_default()
    }

    pub fn successors(&self, step: &StepPath) -> BTreeSet<StepPath> {
        self.steps
            .iter()
            .filter(|(_, spec)| {
                spec.inputs
                    .iter()
                    .any(|i| matches!(&i.source, Source::Step { step: p, .. } if p == step))
            })
            .map(|(p, _)| p.clone())
            .collect()
    }

    /// Transitive successors, excluding `step` itself.
    pub fn descendants(&self, step: &StepPath) -> BTreeSet<StepPath> {
        let mut seen = BTreeSet::new();
        let mut queue: VecDeque<StepPath> = self.successors(step).into_iter().collect();
        while let Some(s) = queue.pop_front() {
            if seen.insert(s.clone()) {
                queue.extend(self.successors(&s));
            }
        }
        seen
    }

    /// Kahn's algorithm; ties broken by path order.
    pub fn topo_order(&self) -> Result<Vec<StepPath>, WorkflowError> {
        let mut indegree: BTreeMap<&StepPath, usize> =
            self.steps.keys().map(|k| (k, 0)).collect();
        let mut succ: BTreeMap<&StepPath, BTreeSet<&StepPath>> = BTreeMap::new();
        for (path, spec) in &self.steps {
            let preds: BTreeSet<&StepPath> = spec
                .inputs
                .iter()
                .filter_map(|i| match &i.source {
                    Source::Step { step, .. } => self.steps.get_key_value(step).map(|(k, _)| k),
                    Source::Workflow(_) => None,
                })
                .collect();
            *indegree.get_mut(path).unwrap() = preds.len();
            for p in preds {
                succ.entry(p).or_default().insert(path);
            }
        }
        let mut ready: BTreeSet<&StepPath> = indegree
            .iter()
            .filter(|(_, d)| **d == 0)
            .map(|(k, _)| *k)
            .collect();
        let mut order = Vec::with_capacity(self.steps.len());
        while let Some(next) = ready.pop_first() {
            order.push(next.clone());
            for s in succ.get(next).into_iter().flatten() {
                let d = indegree.get_mut(s).unwrap();
                *d -= 1;
                if *d == 0 {
                    ready.insert(s);
                }
            }
        }
        if order.len() == self.steps.len() {
            return Ok(order);
        }
        let stuck: Vec<StepPath> = indegree
            .into_iter()
            .filter(|(_, d)| *d > 0)
            .map(|(k, _)| k.clone())
            .collect();
        Err(WorkflowError::Cycle(stuck))
    }

    /// Outputs no step consumes; these are gathered on the management node at
    /// the end of a run.
    pub fn terminal_outputs(&self) -> Vec<(StepPath, String)> {
        let consumed: BTreeSet<(StepPath, String)> = self
            .edges()
            .into_iter()
            .map(|e| (e.producer, e.output))
            .collect();
        self.steps
            .iter()
            .flat_map(|(p, s)| s.outputs.iter().map(move |o| (p.clone(), o.name.clone())))
            .filter(|k| !consumed.contains(k))
            .collect()
    }
}

fn valid_output_pattern(pattern: &str) -> bool {
    !pattern.is_empty()
        && !pattern.starts_with('/')
        && pattern.split('/').all(|c| c != ".." && !c.is_empty())
}

/// Names of `{placeholder}` references in a command template. A `{` preceded
/// by `$` belongs to shell parameter expansion and is skipped.
pub fn placeholders(command: &str) -> Vec<String> {
    let mut out = Vec::new();
    let bytes = command.as_bytes();
    let mut i = 0;
    while i < bytes.len() {
        if bytes[i] == b'{' && (i == 0 || bytes[i - 1] != b'$') {
            if let Some(len) = command[i + 1..].find('}') {
                let name = &command[i + 1..i + 1 + len];
                if is_identifier(name) {
                    out.push(name.to_string());
                    i += len + 2;
                    continue;
                }
            }
        }
        i += 1;
    }
    out
}

/// Replaces each `{name}` placeholder with `lookup(name)`.
pub fn substitute(command: &str, mut lookup: impl FnMut(&str) -> Option<String>) -> String {
    let mut out = String::with_capacity(command.len());
    let bytes = command.as_bytes();
    let mut i = 0;
    let mut last = 0;
    while i < bytes.len() {
        if bytes[i] == b'{' && (i == 0 || bytes[i - 1] != b'$') {
            if let Some(len) = command[i + 1..].find('}') {
                let name = &command[i + 1..i + 1 + len];
                if is_identifier(name) {
                    if let Some(value) = lookup(name) {
                        out.push_str(&command[last..i]);
                        out.push_str(&value);
                        i += len + 2;
                        last = i;
                        continue;
                    }
                }
            }
        }
        i += 1;
    }
    out.push_str(&command[last..]);
    out
}

fn is_identifier(s: &str) -> bool {
    let mut chars = s.chars();
    matches!(chars.next(), Some(c) if c.is_ascii_alphabetic() || c == '_')
        && chars.all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '-')
}
