//! Execution-environment abstraction.
//!
//! A [`Connector`] owns one model: it deploys and undeploys it, lists the
//! live replicas of each service, moves data in and out of resources and runs
//! commands on them. Two sandbox implementations are registered by default;
//! real orchestrator backends plug in through [`ConnectorRegistry::register`].

mod sandbox;

use std::collections::BTreeMap;
use std::fmt;
use std::path::PathBuf;
use std::sync::Arc;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use sandbox::{Latency, SandboxConfig, SandboxConnector, ServiceSpec};
pub(crate) use sandbox::{tree_digest, tree_size};

/// Environment variable overriding where sandbox resources are created.
pub const SANDBOX_ROOT_ENV: &str = "HYBRIDFLOW_SANDBOX_ROOT";

/// One live replica of a service.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Resource {
    pub id: String,
    pub model: String,
    pub service: String,
    pub hostname: String,
    /// Private working area of the replica.
    pub root: String,
    pub cores: Option<u32>,
    pub memory: Option<u64>,
}

impl Resource {
    /// `model/id`, unique during a run.
    pub fn key(&self) -> String {
        format!("{}/{}", self.model, self.id)
    }
}

impl fmt::Display for Resource {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}/{}", self.model, self.id)
    }
}

/// Direction of a copy. Local paths live on the management node.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CopyKind {
    LocalToRemote,
    RemoteToLocal,
    /// Between two resources of the same model.
    RemoteToRemote,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RunOutput {
    pub exit_code: i32,
    pub stdout: Vec<u8>,
    pub stderr: Vec<u8>,
}

#[derive(Debug, Error)]
pub enum ConnectorError {
    #[error("invalid configuration for model `{model}`: {message}")]
    InvalidConfig { model: String, message: String },
    #[error("model `{0}` is already deployed")]
    AlreadyDeployed(String),
    #[error("model `{0}` is not deployed")]
    NotDeployed(String),
    #[error("failed to deploy model `{model}`: {message}")]
    Deploy { model: String, message: String },
    #[error("model `{model}` has no service `{service}`")]
    UnknownService { model: String, service: String },
    #[error("resource `{0}` is not live")]
    UnknownResource(String),
    #[error("copy source `{0}` does not exist")]
    MissingSource(String),
    #[error("invalid copy: {0}")]
    InvalidCopy(String),
    #[error("invalid path `{0}`")]
    InvalidPath(String),
    #[error("I/O error on `{path}`: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("failed to spawn command on `{resource}`: {message}")]
    Spawn { resource: String, message: String },
    #[error("command on `{resource}` timed out after {timeout:?}")]
    Timeout { resource: String, timeout: Duration },
    #[error("operation not supported by connector: {0}")]
    Unsupported(&'static str),
}

impl ConnectorError {
    pub(crate) fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        ConnectorError::Io {
            path: path.into(),
            source,
        }
    }
}

/// The environment abstraction every model is driven through.
///
/// Remote paths are absolute paths in the resource's own view of its
/// filesystem. Local paths are paths on the management node.
pub trait Connector: Send + Sync {
    fn model(&self) -> &str;

    /// Service identifiers declared by the model configuration, in
    /// declaration order. May contain duplicates; see
    /// [`crate::config::validate_service_names`].
    fn service_names(&self) -> Vec<String>;

    fn deploy(&self) -> Result<Vec<Resource>, ConnectorError>;

    fn undeploy(&self) -> Result<(), ConnectorError>;

    fn get_available_resources(&self, service: &str) -> Result<Vec<Resource>, ConnectorError>;

    /// Copies `src` to `dst` and returns the number of bytes moved.
    /// `resource` is the remote end; for [`CopyKind::RemoteToRemote`] it is
    /// the destination and `source` is the resource holding `src`.
    fn copy(
        &self,
        src: &str,
        dst: &str,
        resource: &Resource,
        kind: CopyKind,
        source: Option<&Resource>,
    ) -> Result<u64, ConnectorError>;

    fn run(
        &self,
        resource: &Resource,
        command: &str,
        environment: &BTreeMap<String, String>,
        workdir: &str,
        timeout: Option<Duration>,
    ) -> Result<RunOutput, ConnectorError>;

    /// Total byte size of the file or directory tree at `path`, or `None` if
    /// nothing exists there.
    fn size(&self, resource: &Resource, path: &str) -> Result<Option<u64>, ConnectorError>;

    /// Content digest of `path`, when the backend can compute one.
    fn checksum(&self, _resource: &Resource, _path: &str) -> Result<Option<String>, ConnectorError> {
        Ok(None)
    }

    /// Destroys and recreates every replica of `service` with clean state.
    fn redeploy_service(&self, _service: &str) -> Result<Vec<Resource>, ConnectorError> {
        Err(ConnectorError::Unsupported("redeploy_service"))
    }

    /// The form of `path` a command running on `resource` must use.
    fn command_path(&self, _resource: &Resource, path: &str) -> String {
        path.to_string()
    }

    /// Whether `path` on `holder` can be read in place from `reader`.
    fn visible_from(&self, holder: &Resource, _path: &str, reader: &Resource) -> bool {
        holder.model == reader.model && holder.id == reader.id
    }
}

/// Settings shared by every connector created for one run.
#[derive(Debug, Clone)]
pub struct ConnectorContext {
    pub sandbox_root: PathBuf,
}

impl ConnectorContext {
    /// Uses [`SANDBOX_ROOT_ENV`] when set, `default_root` otherwise.
    pub fn from_env(default_root: PathBuf) -> Self {
        let sandbox_root = std::env::var_os(SANDBOX_ROOT_ENV)
            .map(PathBuf::from)
            .unwrap_or(default_root);
        ConnectorContext { sandbox_root }
    }
}

pub type ConnectorFactory = Arc<
    dyn Fn(&str, &serde_json::Value, &ConnectorContext) -> Result<Arc<dyn Connector>, ConnectorError>
        + Send
        + Sync,
>;

/// Connector implementations by type name.
#[derive(Clone)]
pub struct ConnectorRegistry {
    factories: BTreeMap<String, ConnectorFactory>,
}

impl Default for ConnectorRegistry {
    fn default() -> Self {
        let mut r = ConnectorRegistry::empty();
        r.register("sandbox", |model, config, ctx| {
            let config = SandboxConfig::from_value(model, config)?;
            if !config.shared_mounts.is_empty() {
                return Err(ConnectorError::InvalidConfig {
                    model: model.to_string(),
                    message: "`sandbox` models have disjoint data spaces; use `sandbox-shared` for shared_mounts".into(),
                });
            }
            Ok(Arc::new(SandboxConnector::new(model, config, &ctx.sandbox_root)))
        });
        r.register("sandbox-shared", |model, config, ctx| {
            let config = SandboxConfig::from_value(model, config)?;
            Ok(Arc::new(SandboxConnector::new(model, config, &ctx.sandbox_root)))
        });
        r
    }
}

impl ConnectorRegistry {
    pub fn empty() -> Self {
        ConnectorRegistry {
            factories: BTreeMap::new(),
        }
    }

    pub fn register<F>(&mut self, name: &str, factory: F)
    where
        F: Fn(&str, &serde_json::Value, &ConnectorContext) -> Result<Arc<dyn Connector>, ConnectorError>
            + Send
            + Sync
            + 'static,
    {
        self.factories.insert(name.to_string(), Arc::new(factory));
    }

    pub fn contains(&self, name: &str) -> bool {
        self.factories.contains_key(name)
    }

    pub fn names(&self) -> Vec<String> {
        self.factories.keys().cloned().collect()
    }

    pub fn create(
        &self,
        kind: &str,
        model: &str,
        config: &serde_json::Value,
        ctx: &ConnectorContext,
    ) -> Result<Arc<dyn Connector>, ConnectorError> {
        let factory = self
            .factories
            .get(kind)
            .ok_or_else(|| ConnectorError::InvalidConfig {
                model: model.to_string(),
                message: format!("unknown connector type `{kind}`"),
            })?;
        factory(model, config, ctx)
    }
}

impl fmt::Debug for ConnectorRegistry {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_list().entries(self.factories.keys()).finish()
    }
}
