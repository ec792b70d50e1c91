//! The streamflow-file: entry point of a run, binding workflow steps to
//! services of deployable models.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::connector::{ConnectorContext, ConnectorRegistry};
use crate::wfmodel::{StepPath, WorkflowGraph, NATIVE_FORMAT};
use crate::yaml;

/// JSON Schema of the streamflow-file. Validation errors cite paths into it.
pub const SCHEMA: &str = include_str!("../schema/streamflow.schema.json");

pub const SUPPORTED_VERSION: &str = "v1.0";

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read `{path}`: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed streamflow-file: {0}")]
    Syntax(String),
    #[error("{0}")]
    DuplicateKey(yaml::DuplicateKey),
    #[error("unknown version `{0}` at `version` (supported: v1.0)")]
    UnknownVersion(String),
    #[error("schema violation at `{instance_path}` (schema `{schema_path}`): {message}")]
    Schema {
        instance_path: String,
        schema_path: String,
        message: String,
    },
    #[error("model `{model}` has unknown connector type `{kind}`")]
    UnknownConnector { model: String, kind: String },
    #[error("invalid connector configuration: {0}")]
    Connector(#[from] crate::connector::ConnectorError),
    #[error("model `{model}` declares service `{service}` more than once")]
    DuplicateService { model: String, service: String },
    #[error("workflow `{workflow}` binds step `{step}` more than once")]
    DuplicateBinding { workflow: String, step: StepPath },
    #[error("binding for `{step}` targets undeclared model `{model}`")]
    UnknownModel { step: StepPath, model: String },
    #[error("binding for `{step}` targets unknown service `{service}` of model `{model}`")]
    UnknownService {
        step: StepPath,
        model: String,
        service: String,
    },
    #[error("binding for `{step}` sets recycle on external model `{model}`")]
    RecycleOnExternal { step: StepPath, model: String },
    #[error("binding for `{step}` has replicas 0")]
    ZeroReplicas { step: StepPath },
    #[error("unknown workflow `{0}`")]
    UnknownWorkflow(String),
    #[error("step `{0}` matches no binding")]
    UnboundStep(StepPath),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StreamflowFile {
    pub version: String,
    pub workflows: BTreeMap<String, WorkflowEntry>,
    pub models: BTreeMap<String, ModelEntry>,
    /// Directory relative workflow paths are resolved against.
    #[serde(skip)]
    pub base_dir: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WorkflowEntry {
    #[serde(rename = "type")]
    pub kind: String,
    pub config: WorkflowConfig,
    pub bindings: Vec<Binding>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WorkflowConfig {
    pub file: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelEntry {
    #[serde(rename = "type")]
    pub kind: String,
    #[serde(default = "empty_object")]
    pub config: serde_json::Value,
    #[serde(default)]
    pub external: bool,
}

fn empty_object() -> serde_json::Value {
    serde_json::Value::Object(Default::default())
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Target {
    pub model: String,
    pub service: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Binding {
    pub step: StepPath,
    pub target: Target,
    #[serde(default)]
    pub recycle: bool,
    /// Explicit `replicas` directive. Absent means one resource and no rank
    /// variables.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub replicas: Option<u32>,
}

impl Binding {
    pub fn replicas(&self) -> u32 {
        self.replicas.unwrap_or(1)
    }
}

impl StreamflowFile {
    pub fn workflow_path(&self, name: &str) -> Option<PathBuf> {
        self.workflows
            .get(name)
            .map(|w| self.base_dir.join(&w.config.file))
    }

    pub fn to_yaml(&self) -> String {
        serde_yaml::to_string(self).expect("streamflow-file serializes")
    }
}

/// Reads, schema-validates and checks a streamflow-file with the default
/// connector registry.
pub fn load_streamflow_file(path: &Path) -> Result<StreamflowFile, ConfigError> {
    load_with_registry(path, &ConnectorRegistry::default())
}

pub fn load_with_registry(
    path: &Path,
    registry: &ConnectorRegistry,
) -> Result<StreamflowFile, ConfigError> {
    let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
    parse_streamflow_file(&text, &base, registry)
}

pub fn parse_streamflow_file(
    text: &str,
    base_dir: &Path,
    registry: &ConnectorRegistry,
) -> Result<StreamflowFile, ConfigError> {
    let dups = yaml::find_duplicate_keys(text).map_err(|e| ConfigError::Syntax(e.to_string()))?;
    if let Some(d) = dups.into_iter().next() {
        return Err(ConfigError::DuplicateKey(d));
    }
    let value: serde_json::Value =
        serde_yaml::from_str(text).map_err(|e| ConfigError::Syntax(e.to_string()))?;
    if let Some(v) = value.get("version") {
        let version = v.as_str().map(str::to_string).unwrap_or_else(|| v.to_string());
        if version != SUPPORTED_VERSION {
            return Err(ConfigError::UnknownVersion(version));
        }
    }
    check_schema(&value)?;

    let mut file: StreamflowFile = serde_path_to_error::deserialize(&value).map_err(|e| {
        ConfigError::Schema {
            instance_path: e.path().to_string(),
            schema_path: String::new(),
            message: e.inner().to_string(),
        }
    })?;
    file.base_dir = base_dir.to_path_buf();
    check_semantics(&file, registry)?;
    Ok(file)
}

fn check_schema(value: &serde_json::Value) -> Result<(), ConfigError> {
    let schema: serde_json::Value = serde_json::from_str(SCHEMA).expect("bundled schema is JSON");
    let validator = jsonschema::validator_for(&schema).expect("bundled schema compiles");
    if let Some(err) = validator.iter_errors(value).next() {
        let instance_path = err.instance_path().to_string();
        return Err(ConfigError::Schema {
            instance_path: if instance_path.is_empty() { "/".into() } else { instance_path },
            schema_path: err.schema_path().to_string(),
            message: err.to_string(),
        });
    }
    Ok(())
}

fn check_semantics(file: &StreamflowFile, registry: &ConnectorRegistry) -> Result<(), ConfigError> {
    let ctx = ConnectorContext {
        sandbox_root: std::env::temp_dir(),
    };
    let mut services: BTreeMap<&str, Vec<String>> = BTreeMap::new();
    for (name, model) in &file.models {
        if !registry.contains(&model.kind) {
            return Err(ConfigError::UnknownConnector {
                model: name.clone(),
                kind: model.kind.clone(),
            });
        }
        services.insert(name, service_names_with(name, model, registry, &ctx)?);
    }
    for (wf_name, wf) in &file.workflows {
        if wf.kind != NATIVE_FORMAT {
            return Err(ConfigError::Schema {
                instance_path: format!("/workflows/{wf_name}/type"),
                schema_path: String::new(),
                message: format!("unsupported workflow type `{}`", wf.kind),
            });
        }
        let mut steps = BTreeSet::new();
        for b in &wf.bindings {
            if !steps.insert(&b.step) {
                return Err(ConfigError::DuplicateBinding {
                    workflow: wf_name.clone(),
                    step: b.step.clone(),
                });
            }
            if b.replicas == Some(0) {
                return Err(ConfigError::ZeroReplicas {
                    step: b.step.clone(),
                });
            }
            let Some(model) = file.models.get(&b.target.model) else {
                return Err(ConfigError::UnknownModel {
                    step: b.step.clone(),
                    model: b.target.model.clone(),
                });
            };
            if !services[b.target.model.as_str()].contains(&b.target.service) {
                return Err(ConfigError::UnknownService {
                    step: b.step.clone(),
                    model: b.target.model.clone(),
                    service: b.target.service.clone(),
                });
            }
            if b.recycle && model.external {
                return Err(ConfigError::RecycleOnExternal {
                    step: b.step.clone(),
                    model: b.target.model.clone(),
                });
            }
        }
    }
    Ok(())
}

/// Unique service identifiers exposed by a model's connector configuration.
pub fn validate_service_names(name: &str, model: &ModelEntry) -> Result<Vec<String>, ConfigError> {
    let ctx = ConnectorContext {
        sandbox_root: std::env::temp_dir(),
    };
    service_names_with(name, model, &ConnectorRegistry::default(), &ctx)
}

fn service_names_with(
    name: &str,
    model: &ModelEntry,
    registry: &ConnectorRegistry,
    ctx: &ConnectorContext,
) -> Result<Vec<String>, ConfigError> {
    if !registry.contains(&model.kind) {
        return Err(ConfigError::UnknownConnector {
            model: name.to_string(),
            kind: model.kind.clone(),
        });
    }
    let connector = registry.create(&model.kind, name, &model.config, ctx)?;
    let names = connector.service_names();
    let mut seen = BTreeSet::new();
    for n in &names {
        if !seen.insert(n) {
            return Err(ConfigError::DuplicateService {
                model: name.to_string(),
                service: n.clone(),
            });
        }
    }
    Ok(names)
}

/// Effective binding of every task in one workflow.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct BindingTable {
    table: BTreeMap<StepPath, Binding>,
    declared: Vec<Binding>,
}

impl BindingTable {
    /// A table whose declared bindings are exactly the given entries.
    pub fn from_map(table: BTreeMap<StepPath, Binding>) -> Self {
        let declared = table.values().cloned().collect();
        BindingTable { table, declared }
    }

    pub fn get(&self, step: &StepPath) -> Option<&Binding> {
        self.table.get(step)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&StepPath, &Binding)> {
        self.table.iter()
    }

    pub fn len(&self) -> usize {
        self.table.len()
    }

    pub fn is_empty(&self) -> bool {
        self.table.is_empty()
    }

    /// Re-resolves against the declared bindings, e.g. after scatter
    /// expansion introduced new task paths.
    pub fn refresh(&mut self, graph: &WorkflowGraph) -> Result<(), ConfigError> {
        self.table = resolve_all(&self.declared, graph)?;
        Ok(())
    }
}

/// Binding whose step path is the deepest prefix of `step`.
pub fn longest_prefix<'a>(bindings: &'a [Binding], step: &StepPath) -> Option<&'a Binding> {
    bindings
        .iter()
        .filter(|b| b.step.is_prefix_of(step))
        .max_by_key(|b| b.step.depth())
}

fn resolve_all(
    bindings: &[Binding],
    graph: &WorkflowGraph,
) -> Result<BTreeMap<StepPath, Binding>, ConfigError> {
    graph
        .steps
        .keys()
        .map(|step| {
            longest_prefix(bindings, step)
                .map(|b| (step.clone(), b.clone()))
                .ok_or_else(|| ConfigError::UnboundStep(step.clone()))
        })
        .collect()
}

pub fn resolve_bindings(
    file: &StreamflowFile,
    workflow: &str,
    graph: &WorkflowGraph,
) -> Result<BindingTable, ConfigError> {
    let entry = file
        .workflows
        .get(workflow)
        .ok_or_else(|| ConfigError::UnknownWorkflow(workflow.to_string()))?;
    resolve_entry_bindings(workflow, &entry.bindings, graph)
}

pub fn resolve_entry_bindings(
    workflow: &str,
    bindings: &[Binding],
    graph: &WorkflowGraph,
) -> Result<BindingTable, ConfigError> {
    let mut seen = BTreeSet::new();
    for b in bindings {
        if !seen.insert(&b.step) {
            return Err(ConfigError::DuplicateBinding {
                workflow: workflow.to_string(),
                step: b.step.clone(),
            });
        }
    }
    Ok(BindingTable {
        table: resolve_all(bindings, graph)?,
        declared: bindings.to_vec(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::wfmodel::parse_workflow;

    pub(crate) const BASIC: &str = r#"
version: v1.0
workflows:
  main:
    type: native
    config: {file: wf.yml}
    bindings:
      - step: /
        target: {model: m, service: s1}
models:
  m:
    type: sandbox
    config:
      services:
        s1: {replicas: 2}
        s2: {}
"#;

    fn parse(text: &str) -> Result<StreamflowFile, ConfigError> {
        parse_streamflow_file(text, Path::new("."), &ConnectorRegistry::default())
    }

    #[test]
    fn loads_and_applies_defaults() {
        let f = parse(BASIC).unwrap();
        let b = &f.workflows["main"].bindings[0];
        assert_eq!((b.recycle, b.replicas()), (false, 1));
        assert!(!f.models["m"].external);
        assert_eq!(f.workflow_path("main"), Some(PathBuf::from("./wf.yml")));
    }

    #[test]
    fn unknown_version() {
        let err = parse(&BASIC.replace("v1.0", "v2.0")).unwrap_err();
        assert!(matches!(err, ConfigError::UnknownVersion(v) if v == "v2.0"));
    }

    #[test]
    fn zero_replicas_rejected_with_field_path() {
        let text = BASIC.replace("service: s1}", "service: s1}\n        replicas: 0");
        match parse(&text).unwrap_err() {
            ConfigError::Schema { instance_path, .. } => {
                assert_eq!(instance_path, "/workflows/main/bindings/0/replicas")
            }
            other => panic!("unexpected {other}"),
        }
    }

    #[test]
    fn unknown_connector_type() {
        let err = parse(&BASIC.replace("type: sandbox", "type: helm")).unwrap_err();
        assert!(matches!(err, ConfigError::UnknownConnector { .. }));
    }

    #[test]
    fn duplicate_binding_step() {
        let text = BASIC.replace(
            "      - step: /\n",
            "      - step: /\n        target: {model: m, service: s2}\n      - step: /\n",
        );
        assert!(matches!(parse(&text).unwrap_err(), ConfigError::DuplicateBinding { .. }));
    }

    #[test]
    fn recycle_on_external_rejected() {
        let text = BASIC
            .replace("service: s1}", "service: s1}\n        recycle: true")
            .replace("    type: sandbox\n", "    type: sandbox\n    external: true\n");
        assert!(matches!(parse(&text).unwrap_err(), ConfigError::RecycleOnExternal { .. }));
    }

    #[test]
    fn unknown_service_in_binding() {
        let text = BASIC.replace("service: s1", "service: nope");
        assert!(matches!(parse(&text).unwrap_err(), ConfigError::UnknownService { .. }));
    }

    #[test]
    fn round_trip_is_stable() {
        let f = parse(BASIC).unwrap();
        let again = parse(&f.to_yaml()).unwrap();
        assert_eq!(f, again);
    }

    fn model(config: serde_json::Value) -> ModelEntry {
        ModelEntry {
            kind: "sandbox".into(),
            config,
            external: false,
        }
    }

    #[test]
    fn service_names() {
        let m = model(serde_json::json!({"services": {"cellranger": {}, "renv": {}}}));
        assert_eq!(validate_service_names("m", &m).unwrap(), vec!["cellranger", "renv"]);
        let dup = model(serde_json::json!({"services": [{"name": "w"}, {"name": "w"}]}));
        assert!(matches!(
            validate_service_names("m", &dup),
            Err(ConfigError::DuplicateService { service, .. }) if service == "w"
        ));
        let empty = model(serde_json::json!({"services": {}}));
        assert!(validate_service_names("m", &empty).unwrap().is_empty());
    }

    fn binding(step: &str, service: &str) -> Binding {
        Binding {
            step: StepPath::parse(step).unwrap(),
            target: Target {
                model: "M".into(),
                service: service.into(),
            },
            recycle: false,
            replicas: None,
        }
    }

    const NESTED: &str = "steps:\n  a: {command: x}\n  sub:\n    steps:\n      b: {command: y}\n";

    #[test]
    fn longest_prefix_wins() {
        let g = parse_workflow(NESTED).unwrap();
        let t = resolve_entry_bindings("w", &[binding("/", "s1"), binding("/sub", "s2")], &g).unwrap();
        let got: Vec<(String, String)> = t
            .iter()
            .map(|(p, b)| (p.to_string(), b.target.service.clone()))
            .collect();
        assert_eq!(
            got,
            vec![("/a".into(), "s1".into()), ("/sub/b".into(), "s2".into())]
        );
    }

    #[test]
    fn root_catch_all_and_unbound() {
        let g = parse_workflow(NESTED).unwrap();
        let t = resolve_entry_bindings("w", &[binding("/", "s")], &g).unwrap();
        assert_eq!(t.len(), 2);
        let g = parse_workflow("steps:\n  y: {command: x}\n").unwrap();
        assert!(matches!(
            resolve_entry_bindings("w", &[binding("/x", "s")], &g),
            Err(ConfigError::UnboundStep(p)) if p.as_str() == "/y"
        ));
    }
}
