use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;
use std::time::Duration;

use serde::Deserialize;

use super::{
    placeholders, DataKind, InputPort, InputValue, OutputCapture, OutputPort, Requirements,
    Scatter, Source, StepPath, StepSpec, WorkflowError, WorkflowGraph, WorkflowInput,
};
use crate::yaml::Entries;

/// Identifier of the native workflow format in a streamflow-file `type` field.
pub const NATIVE_FORMAT: &str = "native";

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawWorkflow {
    #[serde(default)]
    inputs: Entries<RawInput>,
    #[serde(default)]
    steps: Entries<RawStep>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawInput {
    #[serde(rename = "type")]
    kind: DataKind,
    path: Option<OneOrMany<String>>,
    value: Option<OneOrMany<serde_yaml::Value>>,
}

#[derive(Deserialize)]
#[serde(untagged)]
enum OneOrMany<T> {
    Many(Vec<T>),
    One(T),
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawStep {
    command: Option<String>,
    #[serde(rename = "in", default)]
    inputs: Entries<RawIn>,
    #[serde(rename = "out", default)]
    outputs: Entries<RawOut>,
    scatter: Option<RawScatter>,
    requirements: Option<Requirements>,
    /// Seconds.
    timeout: Option<f64>,
    steps: Option<Entries<RawStep>>,
}

#[derive(Deserialize)]
#[serde(untagged)]
enum RawIn {
    Source(String),
    Full(RawInFull),
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawInFull {
    source: String,
    #[serde(rename = "type")]
    kind: Option<DataKind>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawOut {
    #[serde(rename = "type", default = "default_kind")]
    kind: DataKind,
    glob: Option<String>,
    from: Option<String>,
    #[serde(default)]
    list: bool,
}

fn default_kind() -> DataKind {
    DataKind::File
}

#[derive(Deserialize)]
#[serde(untagged)]
enum RawScatter {
    Input(String),
    Full(RawScatterFull),
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawScatterFull {
    input: String,
    cardinality: Option<usize>,
}

/// Parses a native workflow document. Relative input paths are kept as
/// written; see [`load_workflow`] for resolution against the file location.
pub fn parse_workflow(document: &str) -> Result<WorkflowGraph, WorkflowError> {
    let raw: RawWorkflow =
        serde_yaml::from_str(document).map_err(|e| WorkflowError::Syntax(e.to_string()))?;

    let mut inputs = BTreeMap::new();
    for (name, input) in raw.inputs.0 {
        if inputs.contains_key(&name) {
            return Err(WorkflowError::Syntax(format!("duplicate input `{name}`")));
        }
        inputs.insert(name.clone(), convert_input(&name, input)?);
    }

    let mut steps = BTreeMap::new();
    let mut pending = Vec::new();
    collect_steps(&StepPath::root(), raw.steps, &mut steps, &mut pending)?;
    for (path, raw_inputs) in pending {
        let mut ports = Vec::new();
        let mut seen = BTreeSet::new();
        for (name, raw_in) in raw_inputs {
            if !seen.insert(name.clone()) {
                return Err(WorkflowError::Syntax(format!(
                    "step `{path}` declares input `{name}` twice"
                )));
            }
            let (source_text, kind) = match raw_in {
                RawIn::Source(s) => (s, None),
                RawIn::Full(f) => (f.source, f.kind),
            };
            let source = resolve_source(&path, &source_text)?;
            let inferred = match &source {
                Source::Workflow(n) => inputs.get(n).map(|i: &WorkflowInput| i.kind),
                Source::Step { step, output } => steps
                    .get(step)
                    .and_then(|s: &StepSpec| s.output(output))
                    .map(|o| o.kind),
            };
            let Some(kind) = kind.or(inferred) else {
                return Err(WorkflowError::Dangling {
                    step: path.clone(),
                    input: name,
                    source_ref: source_text,
                });
            };
            ports.push(InputPort {
                name,
                kind,
                source,
                element: None,
            });
        }
        let spec = steps.get_mut(&path).expect("collected above");
        spec.inputs = ports;
        for name in placeholders(&spec.command) {
            if spec.input(&name).is_none() {
                return Err(WorkflowError::UnknownPlaceholder {
                    step: path.clone(),
                    name,
                });
            }
        }
    }

    WorkflowGraph::new(inputs, steps)
}

/// Reads and parses a workflow file, resolving relative file and directory
/// input paths against the file's directory.
pub fn load_workflow(path: &Path) -> Result<WorkflowGraph, WorkflowError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| WorkflowError::Syntax(format!("{}: {e}", path.display())))?;
    let mut graph = parse_workflow(&text)?;
    let base = path
        .parent()
        .map(Path::to_path_buf)
        .unwrap_or_default();
    let base = std::fs::canonicalize(&base).unwrap_or(base);
    for input in graph.inputs.values_mut() {
        if input.kind == DataKind::Value {
            continue;
        }
        let resolve = |p: &mut String| {
            if Path::new(p.as_str()).is_relative() {
                *p = base.join(p.as_str()).to_string_lossy().into_owned();
            }
        };
        match &mut input.value {
            InputValue::Single(p) => resolve(p),
            InputValue::List(ps) => ps.iter_mut().for_each(resolve),
        }
    }
    Ok(graph)
}

fn convert_input(name: &str, raw: RawInput) -> Result<WorkflowInput, WorkflowError> {
    let value = match (raw.kind, raw.path, raw.value) {
        (DataKind::Value, None, Some(v)) => match v {
            OneOrMany::One(v) => InputValue::Single(scalar_text(name, v)?),
            OneOrMany::Many(vs) => InputValue::List(
                vs.into_iter()
                    .map(|v| scalar_text(name, v))
                    .collect::<Result<_, _>>()?,
            ),
        },
        (DataKind::File | DataKind::Directory, Some(p), None) => match p {
            OneOrMany::One(p) => InputValue::Single(p),
            OneOrMany::Many(ps) => InputValue::List(ps),
        },
        (kind, _, _) => {
            let want = if kind == DataKind::Value { "value" } else { "path" };
            return Err(WorkflowError::Syntax(format!(
                "input `{name}` of type {kind} needs exactly the `{want}` field"
            )));
        }
    };
    Ok(WorkflowInput {
        kind: raw.kind,
        value,
    })
}

fn scalar_text(name: &str, v: serde_yaml::Value) -> Result<String, WorkflowError> {
    match v {
        serde_yaml::Value::String(s) => Ok(s),
        serde_yaml::Value::Number(n) => Ok(n.to_string()),
        serde_yaml::Value::Bool(b) => Ok(b.to_string()),
        _ => Err(WorkflowError::Syntax(format!(
            "input `{name}` values must be scalars"
        ))),
    }
}

type PendingInputs = Vec<(StepPath, Vec<(String, RawIn)>)>;

fn collect_steps(
    folder: &StepPath,
    raw: Entries<RawStep>,
    steps: &mut BTreeMap<StepPath, StepSpec>,
    pending: &mut PendingInputs,
) -> Result<(), WorkflowError> {
    let mut local = BTreeSet::new();
    for (name, step) in raw.0 {
        let path = folder.join(&name)?;
        if !local.insert(name) {
            return Err(WorkflowError::DuplicateStep(path));
        }
        match (step.command, step.steps) {
            (Some(command), None) => {
                let mut outputs = Vec::new();
                let mut seen = BTreeSet::new();
                for (out_name, out) in step.outputs.0 {
                    if !seen.insert(out_name.clone()) {
                        return Err(WorkflowError::Syntax(format!(
                            "step `{path}` declares output `{out_name}` twice"
                        )));
                    }
                    outputs.push(convert_output(&path, out_name, out)?);
                }
                let scatter = step.scatter.map(|s| match s {
                    RawScatter::Input(input) => Scatter {
                        input,
                        cardinality: None,
                    },
                    RawScatter::Full(f) => Scatter {
                        input: f.input,
                        cardinality: f.cardinality,
                    },
                });
                if let Some(Scatter {
                    cardinality: Some(0),
                    ..
                }) = scatter
                {
                    return Err(WorkflowError::EmptyScatter(path));
                }
                let timeout = match step.timeout {
                    Some(t) if t.is_finite() && t > 0.0 => Some(Duration::from_secs_f64(t)),
                    Some(t) => {
                        return Err(WorkflowError::Syntax(format!(
                            "step `{path}` has invalid timeout {t}"
                        )))
                    }
                    None => None,
                };
                pending.push((path.clone(), step.inputs.0));
                steps.insert(
                    path,
                    StepSpec {
                        command,
                        inputs: Vec::new(),
                        outputs,
                        scatter,
                        requirements: step.requirements.unwrap_or_default(),
                        timeout,
                        scatter_origin: None,
                    },
                );
            }
            (None, Some(children)) => {
                if !step.inputs.0.is_empty() || !step.outputs.0.is_empty() || step.scatter.is_some()
                {
                    return Err(WorkflowError::Syntax(format!(
                        "sub-workflow `{path}` may only contain `steps`"
                    )));
                }
                collect_steps(&path, children, steps, pending)?;
            }
            (Some(_), Some(_)) => return Err(WorkflowError::TaskIsFolder(path)),
            (None, None) => {
                return Err(WorkflowError::Syntax(format!(
                    "step `{path}` needs either `command` or `steps`"
                )))
            }
        }
    }
    Ok(())
}

fn convert_output(
    step: &StepPath,
    name: String,
    raw: RawOut,
) -> Result<OutputPort, WorkflowError> {
    let capture = match (raw.glob, raw.from.as_deref()) {
        (Some(g), None) => OutputCapture::Glob(g),
        (None, Some("stdout")) if raw.kind == DataKind::Value && !raw.list => OutputCapture::Stdout,
        _ => {
            return Err(WorkflowError::Syntax(format!(
                "step `{step}` output `{name}` needs `glob`, or `from: stdout` on a single value output"
            )))
        }
    };
    if raw.kind == DataKind::Value && matches!(capture, OutputCapture::Glob(_)) {
        return Err(WorkflowError::Syntax(format!(
            "step `{step}` output `{name}`: value outputs are captured with `from: stdout`"
        )));
    }
    Ok(OutputPort {
        name,
        kind: raw.kind,
        list: raw.list,
        capture,
    })
}

/// `name` → workflow input; `path/output` → step output, relative paths
/// resolved inside the enclosing sub-workflow.
fn resolve_source(step: &StepPath, text: &str) -> Result<Source, WorkflowError> {
    let Some((producer, output)) = text.rsplit_once('/') else {
        return Ok(Source::Workflow(text.to_string()));
    };
    let dangling = || WorkflowError::Dangling {
        step: step.clone(),
        input: String::new(),
        source_ref: text.to_string(),
    };
    if output.is_empty() || producer.is_empty() {
        return Err(dangling());
    }
    let producer = if producer.starts_with('/') {
        StepPath::parse(producer).map_err(|_| dangling())?
    } else {
        let mut p = step.parent().unwrap_or_else(StepPath::root);
        for c in producer.split('/') {
            p = p.join(c).map_err(|_| dangling())?;
        }
        p
    };
    Ok(Source::Step {
        step: producer,
        output: output.to_string(),
    })
}
