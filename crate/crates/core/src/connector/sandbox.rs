//! Sandbox connector: every resource is a private directory tree on the
//! management node and commands run as local subprocesses rooted in it.
//! Paths under a `shared_mounts` prefix resolve to one tree per model, which
//! every replica of that model sees identically.

use std::collections::BTreeMap;
use std::fs;
use std::io::Read;
use std::path::{Component, Path, PathBuf};
use std::process::{Command, Stdio};
use std::sync::Mutex;
use std::thread;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use walkdir::WalkDir;

use super::{Connector, ConnectorError, CopyKind, Resource, RunOutput};

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Latency {
    #[serde(default)]
    pub deploy_ms: f64,
    #[serde(default)]
    pub copy_fixed_ms: f64,
    /// Milliseconds per 10^6 bytes.
    #[serde(default)]
    pub copy_ms_per_mb: f64,
}

impl Latency {
    pub fn copy_delay(&self, bytes: u64) -> Duration {
        let ms = self.copy_fixed_ms + self.copy_ms_per_mb * bytes as f64 / 1e6;
        Duration::from_secs_f64(ms.max(0.0) / 1e3)
    }

    pub fn deploy_delay(&self) -> Duration {
        Duration::from_secs_f64(self.deploy_ms.max(0.0) / 1e3)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ServiceSpec {
    pub name: String,
    #[serde(default = "one")]
    pub replicas: u32,
    #[serde(default)]
    pub environment: BTreeMap<String, String>,
    pub cores: Option<u32>,
    pub memory: Option<u64>,
}

fn one() -> u32 {
    1
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct ServiceBody {
    #[serde(default = "one")]
    replicas: u32,
    #[serde(default)]
    environment: BTreeMap<String, String>,
    cores: Option<u32>,
    memory: Option<u64>,
}

#[derive(Deserialize)]
#[serde(untagged)]
enum RawServices {
    List(Vec<ServiceSpec>),
    Map(crate::yaml::Entries<ServiceBody>),
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawSandboxConfig {
    #[serde(default)]
    services: Option<RawServices>,
    #[serde(default)]
    shared_mounts: Vec<String>,
    #[serde(default)]
    latency: Latency,
    #[serde(default)]
    keep_on_undeploy: bool,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct SandboxConfig {
    pub services: Vec<ServiceSpec>,
    /// Absolute path prefixes visible identically from every resource.
    pub shared_mounts: Vec<String>,
    pub latency: Latency,
    /// Leave resource directories in place after undeploy.
    pub keep_on_undeploy: bool,
}

impl SandboxConfig {
    pub fn from_value(model: &str, value: &serde_json::Value) -> Result<Self, ConnectorError> {
        let invalid = |message: String| ConnectorError::InvalidConfig {
            model: model.to_string(),
            message,
        };
        let raw: RawSandboxConfig = serde_path_to_error::deserialize(value)
            .map_err(|e| invalid(format!("at `{}`: {}", e.path(), e.inner())))?;
        let services = match raw.services {
            None => Vec::new(),
            Some(RawServices::List(l)) => l,
            Some(RawServices::Map(m)) => m
                .0
                .into_iter()
                .map(|(name, b)| ServiceSpec {
                    name,
                    replicas: b.replicas,
                    environment: b.environment,
                    cores: b.cores,
                    memory: b.memory,
                })
                .collect(),
        };
        for s in &services {
            if s.name.is_empty() || s.name.contains('/') {
                return Err(invalid(format!("invalid service name `{}`", s.name)));
            }
            if s.replicas == 0 {
                return Err(invalid(format!("service `{}` needs at least one replica", s.name)));
            }
        }
        for m in &raw.shared_mounts {
            if normalize(m).is_none() || m == "/" {
                return Err(invalid(format!(
                    "shared mount `{m}` must be an absolute path prefix below `/`"
                )));
            }
        }
        Ok(SandboxConfig {
            services,
            shared_mounts: raw.shared_mounts.iter().filter_map(|m| normalize(m)).collect(),
            latency: raw.latency,
            keep_on_undeploy: raw.keep_on_undeploy,
        })
    }
}

/// Absolute, `..`-free path with redundant separators removed.
fn normalize(path: &str) -> Option<String> {
    let p = Path::new(path);
    if !p.is_absolute() {
        return None;
    }
    let mut parts = Vec::new();
    for c in p.components() {
        match c {
            Component::RootDir => {}
            Component::CurDir => {}
            Component::Normal(s) => parts.push(s.to_str()?.to_string()),
            Component::ParentDir | Component::Prefix(_) => return None,
        }
    }
    Some(format!("/{}", parts.join("/")))
}

fn strip_prefix<'a>(path: &'a str, prefix: &str) -> Option<&'a str> {
    if path == prefix {
        Some("")
    } else {
        path.strip_prefix(prefix)
            .and_then(|rest| rest.strip_prefix('/'))
    }
}

/// Subdirectories of every replica root.
const RESOURCE_DIRS: [&str; 4] = ["home", "tmp", "work", "staging"];

#[derive(Default)]
struct State {
    deployed: bool,
    resources: BTreeMap<String, Vec<Resource>>,
    generation: BTreeMap<String, u32>,
}

pub struct SandboxConnector {
    model: String,
    config: SandboxConfig,
    base: PathBuf,
    state: Mutex<State>,
}

impl SandboxConnector {
    /// A relative `sandbox_root` is resolved against the current directory,
    /// since commands run from their own working directories.
    pub fn new(model: &str, config: SandboxConfig, sandbox_root: &Path) -> Self {
        let sandbox_root = std::path::absolute(sandbox_root).unwrap_or_else(|_| sandbox_root.to_path_buf());
        SandboxConnector {
            model: model.to_string(),
            config,
            base: sandbox_root.join(model),
            state: Mutex::new(State::default()),
        }
    }

    pub fn config(&self) -> &SandboxConfig {
        &self.config
    }

    fn shared_root(&self) -> PathBuf {
        self.base.join(".shared")
    }

    fn is_shared(&self, view: &str) -> bool {
        self.config
            .shared_mounts
            .iter()
            .any(|m| strip_prefix(view, m).is_some())
    }

    /// Host location of `view` as seen from `resource`.
    pub fn host_path(&self, resource: &Resource, view: &str) -> Result<PathBuf, ConnectorError> {
        let view = normalize(view).ok_or_else(|| ConnectorError::InvalidPath(view.to_string()))?;
        for m in &self.config.shared_mounts {
            if strip_prefix(&view, m).is_some() {
                return Ok(self.shared_root().join(&view[1..]));
            }
        }
        Ok(PathBuf::from(&resource.root).join(&view[1..]))
    }

    fn create_replicas(
        &self,
        spec: &ServiceSpec,
        generation: u32,
    ) -> Result<Vec<Resource>, ConnectorError> {
        let mut out = Vec::new();
        for i in 0..spec.replicas {
            let id = if generation == 0 {
                format!("{}-{i:03}", spec.name)
            } else {
                format!("{}-g{generation}-{i:03}", spec.name)
            };
            let root = self.base.join(&id);
            if root.exists() {
                fs::remove_dir_all(&root).map_err(|e| ConnectorError::io(root.display().to_string(), e))?;
            }
            for sub in RESOURCE_DIRS {
                let d = root.join(sub);
                fs::create_dir_all(&d).map_err(|e| ConnectorError::io(d.display().to_string(), e))?;
            }
            out.push(self.replica(spec, id));
        }
        Ok(out)
    }

    fn replica(&self, spec: &ServiceSpec, id: String) -> Resource {
        Resource {
            hostname: format!("{}-{id}", self.model),
            root: self.base.join(&id).to_string_lossy().into_owned(),
            id,
            model: self.model.clone(),
            service: spec.name.clone(),
            cores: spec.cores,
            memory: spec.memory,
        }
    }

    /// Adopts replica directories created outside this connector, which is
    /// how an externally managed sandbox model is used. Nothing is created
    /// or wiped; every configured replica must already exist.
    fn attach(&self, state: &mut State) -> Result<(), ConnectorError> {
        let mut resources = BTreeMap::new();
        for spec in &self.config.services {
            let mut replicas = Vec::new();
            for i in 0..spec.replicas {
                let r = self.replica(spec, format!("{}-{i:03}", spec.name));
                if !Path::new(&r.root).is_dir() {
                    return Err(ConnectorError::NotDeployed(self.model.clone()));
                }
                replicas.push(r);
            }
            resources.insert(spec.name.clone(), replicas);
        }
        state.resources = resources;
        state.deployed = true;
        Ok(())
    }

    fn check_live(&self, resource: &Resource) -> Result<(), ConnectorError> {
        let state = self.state.lock().unwrap();
        let live = state.deployed
            && resource.model == self.model
            && state
                .resources
                .get(&resource.service)
                .is_some_and(|rs| rs.iter().any(|r| r.id == resource.id));
        if live {
            Ok(())
        } else {
            Err(ConnectorError::UnknownResource(resource.key()))
        }
    }

    fn service_spec(&self, service: &str) -> Result<&ServiceSpec, ConnectorError> {
        self.config
            .services
            .iter()
            .find(|s| s.name == service)
            .ok_or_else(|| ConnectorError::UnknownService {
                model: self.model.clone(),
                service: service.to_string(),
            })
    }
}

impl Connector for SandboxConnector {
    fn model(&self) -> &str {
        &self.model
    }

    fn service_names(&self) -> Vec<String> {
        self.config.services.iter().map(|s| s.name.clone()).collect()
    }

    fn deploy(&self) -> Result<Vec<Resource>, ConnectorError> {
        let mut state = self.state.lock().unwrap();
        if state.deployed {
            return Err(ConnectorError::AlreadyDeployed(self.model.clone()));
        }
        thread::sleep(self.config.latency.deploy_delay());
        let deploy_err = |e: ConnectorError| ConnectorError::Deploy {
            model: self.model.clone(),
            message: e.to_string(),
        };
        if self.base.exists() {
            fs::remove_dir_all(&self.base)
                .map_err(|e| deploy_err(ConnectorError::io(self.base.display().to_string(), e)))?;
        }
        let shared = self.shared_root();
        fs::create_dir_all(&shared)
            .map_err(|e| deploy_err(ConnectorError::io(shared.display().to_string(), e)))?;
        let mut resources = BTreeMap::new();
        for spec in &self.config.services {
            resources.insert(spec.name.clone(), self.create_replicas(spec, 0).map_err(deploy_err)?);
        }
        let all = resources.values().flatten().cloned().collect();
        state.resources = resources;
        state.generation.clear();
        state.deployed = true;
        Ok(all)
    }

    fn undeploy(&self) -> Result<(), ConnectorError> {
        let mut state = self.state.lock().unwrap();
        if !state.deployed {
            return Err(ConnectorError::NotDeployed(self.model.clone()));
        }
        state.deployed = false;
        state.resources.clear();
        if !self.config.keep_on_undeploy && self.base.exists() {
            fs::remove_dir_all(&self.base)
                .map_err(|e| ConnectorError::io(self.base.display().to_string(), e))?;
        }
        Ok(())
    }

    fn get_available_resources(&self, service: &str) -> Result<Vec<Resource>, ConnectorError> {
        let mut state = self.state.lock().unwrap();
        if !state.deployed {
            self.attach(&mut state)?;
        }
        state
            .resources
            .get(service)
            .cloned()
            .ok_or_else(|| ConnectorError::UnknownService {
                model: self.model.clone(),
                service: service.to_string(),
            })
    }

    fn copy(
        &self,
        src: &str,
        dst: &str,
        resource: &Resource,
        kind: CopyKind,
        source: Option<&Resource>,
    ) -> Result<u64, ConnectorError> {
        self.check_live(resource)?;
        let (from, to, networked) = match kind {
            CopyKind::LocalToRemote => (PathBuf::from(src), self.host_path(resource, dst)?, true),
            CopyKind::RemoteToLocal => (self.host_path(resource, src)?, PathBuf::from(dst), true),
            CopyKind::RemoteToRemote => {
                let source = source.ok_or_else(|| {
                    ConnectorError::InvalidCopy("remote_to_remote needs a source resource".into())
                })?;
                if source.model != self.model {
                    return Err(ConnectorError::InvalidCopy(format!(
                        "`{}` and `{}` belong to different models",
                        source.key(),
                        resource.key()
                    )));
                }
                self.check_live(source)?;
                // A source under a shared mount is already reachable from the
                // destination, so the transfer is a local copy there.
                let local = self.is_shared(src) || source.id == resource.id;
                (self.host_path(source, src)?, self.host_path(resource, dst)?, !local)
            }
        };
        if !from.exists() {
            return Err(ConnectorError::MissingSource(src.to_string()));
        }
        let bytes = if from == to {
            tree_size(&from)
        } else {
            copy_tree(&from, &to)?
        };
        if networked {
            thread::sleep(self.config.latency.copy_delay(bytes));
        }
        Ok(bytes)
    }

    fn run(
        &self,
        resource: &Resource,
        command: &str,
        environment: &BTreeMap<String, String>,
        workdir: &str,
        timeout: Option<Duration>,
    ) -> Result<RunOutput, ConnectorError> {
        self.check_live(resource)?;
        let spec = self.service_spec(&resource.service)?;
        let cwd = self.host_path(resource, workdir)?;
        fs::create_dir_all(&cwd).map_err(|e| ConnectorError::io(cwd.display().to_string(), e))?;
        let root = PathBuf::from(&resource.root);

        let mut cmd = Command::new("/bin/sh");
        cmd.arg("-c")
            .arg(command)
            .current_dir(&cwd)
            .env_clear()
            .env("PATH", std::env::var_os("PATH").unwrap_or_else(|| "/usr/bin:/bin".into()))
            .env("HOME", root.join("home"))
            .env("TMPDIR", root.join("tmp"))
            .env("HOSTNAME", &resource.hostname)
            .envs(&spec.environment)
            .envs(environment)
            .stdin(Stdio::null())
            .stdout(Stdio::piped())
            .stderr(Stdio::piped());
        let spawn_err = |message: String| ConnectorError::Spawn {
            resource: resource.key(),
            message,
        };
        let mut child = cmd.spawn().map_err(|e| spawn_err(e.to_string()))?;
        let mut stdout = child.stdout.take().expect("piped");
        let mut stderr = child.stderr.take().expect("piped");
        let out_reader = thread::spawn(move || {
            let mut buf = Vec::new();
            stdout.read_to_end(&mut buf).map(|_| buf)
        });
        let err_reader = thread::spawn(move || {
            let mut buf = Vec::new();
            stderr.read_to_end(&mut buf).map(|_| buf)
        });

        let status = match timeout {
            None => child.wait().map_err(|e| spawn_err(e.to_string()))?,
            Some(limit) => {
                let start = Instant::now();
                loop {
                    if let Some(status) = child.try_wait().map_err(|e| spawn_err(e.to_string()))? {
                        break status;
                    }
                    if start.elapsed() >= limit {
                        let _ = child.kill();
                        let _ = child.wait();
                        return Err(ConnectorError::Timeout {
                            resource: resource.key(),
                            timeout: limit,
                        });
                    }
                    thread::sleep(Duration::from_millis(5));
                }
            }
        };
        let stdout = out_reader
            .join()
            .expect("reader thread")
            .map_err(|e| spawn_err(e.to_string()))?;
        let stderr = err_reader
            .join()
            .expect("reader thread")
            .map_err(|e| spawn_err(e.to_string()))?;
        Ok(RunOutput {
            exit_code: exit_code(status),
            stdout,
            stderr,
        })
    }

    fn size(&self, resource: &Resource, path: &str) -> Result<Option<u64>, ConnectorError> {
        self.check_live(resource)?;
        let host = self.host_path(resource, path)?;
        Ok(host.exists().then(|| tree_size(&host)))
    }

    fn checksum(&self, resource: &Resource, path: &str) -> Result<Option<String>, ConnectorError> {
        self.check_live(resource)?;
        let host = self.host_path(resource, path)?;
        if !host.exists() {
            return Ok(None);
        }
        tree_digest(&host).map(Some)
    }

    fn redeploy_service(&self, service: &str) -> Result<Vec<Resource>, ConnectorError> {
        let spec = self.service_spec(service)?.clone();
        let mut state = self.state.lock().unwrap();
        if !state.deployed {
            return Err(ConnectorError::NotDeployed(self.model.clone()));
        }
        thread::sleep(self.config.latency.deploy_delay());
        for old in state.resources.remove(service).unwrap_or_default() {
            let root = PathBuf::from(&old.root);
            if root.exists() {
                fs::remove_dir_all(&root).map_err(|e| ConnectorError::io(old.root.clone(), e))?;
            }
        }
        let generation = {
            let g = state.generation.entry(service.to_string()).or_insert(0);
            *g += 1;
            *g
        };
        let fresh = self.create_replicas(&spec, generation)?;
        state.resources.insert(service.to_string(), fresh.clone());
        Ok(fresh)
    }

    fn command_path(&self, resource: &Resource, path: &str) -> String {
        self.host_path(resource, path)
            .map(|p| p.to_string_lossy().into_owned())
            .unwrap_or_else(|_| path.to_string())
    }

    fn visible_from(&self, holder: &Resource, path: &str, reader: &Resource) -> bool {
        holder.model == reader.model
            && reader.model == self.model
            && (holder.id == reader.id || self.is_shared(path))
    }
}

#[cfg(unix)]
fn exit_code(status: std::process::ExitStatus) -> i32 {
    use std::os::unix::process::ExitStatusExt;
    status
        .code()
        .or_else(|| status.signal().map(|s| 128 + s))
        .unwrap_or(-1)
}

#[cfg(not(unix))]
fn exit_code(status: std::process::ExitStatus) -> i32 {
    status.code().unwrap_or(-1)
}

/// Sum of file sizes under `path` (the file's own size for a file).
pub(crate) fn tree_size(path: &Path) -> u64 {
    if path.is_file() {
        return path.metadata().map(|m| m.len()).unwrap_or(0);
    }
    WalkDir::new(path)
        .into_iter()
        .filter_map(Result::ok)
        .filter(|e| e.file_type().is_file())
        .filter_map(|e| e.metadata().ok())
        .map(|m| m.len())
        .sum()
}

/// Recursive copy; returns bytes copied.
pub(crate) fn copy_tree(from: &Path, to: &Path) -> Result<u64, ConnectorError> {
    let io = |p: &Path, e| ConnectorError::io(p.display().to_string(), e);
    if from.is_file() {
        if let Some(parent) = to.parent() {
            fs::create_dir_all(parent).map_err(|e| io(parent, e))?;
        }
        return fs::copy(from, to).map_err(|e| io(to, e));
    }
    let mut bytes = 0;
    for entry in WalkDir::new(from).sort_by_file_name() {
        let entry = entry.map_err(|e| ConnectorError::io(from.display().to_string(), e.into()))?;
        let rel = entry.path().strip_prefix(from).expect("walk stays under root");
        let target = to.join(rel);
        if entry.file_type().is_dir() {
            fs::create_dir_all(&target).map_err(|e| io(&target, e))?;
        } else {
            if let Some(parent) = target.parent() {
                fs::create_dir_all(parent).map_err(|e| io(parent, e))?;
            }
            bytes += fs::copy(entry.path(), &target).map_err(|e| io(&target, e))?;
        }
    }
    Ok(bytes)
}

/// SHA-256 over the sorted relative entries and file contents of a tree.
pub(crate) fn tree_digest(path: &Path) -> Result<String, ConnectorError> {
    let mut hasher = Sha256::new();
    let io = |p: &Path, e| ConnectorError::io(p.display().to_string(), e);
    if path.is_file() {
        hasher.update(fs::read(path).map_err(|e| io(path, e))?);
    } else {
        for entry in WalkDir::new(path).sort_by_file_name() {
            let entry = entry.map_err(|e| ConnectorError::io(path.display().to_string(), e.into()))?;
            let rel = entry.path().strip_prefix(path).expect("walk stays under root");
            let rel = rel.to_string_lossy();
            if entry.file_type().is_dir() {
                hasher.update(format!("D {rel}\0").as_bytes());
            } else {
                let data = fs::read(entry.path()).map_err(|e| io(entry.path(), e))?;
                hasher.update(format!("F {rel}\0{}\0", data.len()).as_bytes());
                hasher.update(&data);
            }
        }
    }
    Ok(hasher
        .finalize()
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    fn connector(dir: &Path, config: serde_json::Value) -> SandboxConnector {
        SandboxConnector::new("m", SandboxConfig::from_value("m", &config).unwrap(), dir)
    }

    #[test]
    fn services_accept_map_and_list_forms() {
        let map = SandboxConfig::from_value("m", &json!({"services": {"a": {"replicas": 2}, "b": {}}})).unwrap();
        assert_eq!(map.services.len(), 2);
        assert_eq!(map.services[0].replicas, 2);
        let list = SandboxConfig::from_value("m", &json!({"services": [{"name": "w"}, {"name": "w"}]})).unwrap();
        assert_eq!(list.services.len(), 2);
    }

    #[test]
    fn rejects_zero_replicas_and_relative_mounts() {
        assert!(SandboxConfig::from_value("m", &json!({"services": {"a": {"replicas": 0}}})).is_err());
        assert!(SandboxConfig::from_value("m", &json!({"shared_mounts": ["scratch"]})).is_err());
        assert!(SandboxConfig::from_value("m", &json!({"bogus": 1})).is_err());
    }

    #[test]
    fn deploy_creates_replicas_and_refuses_double_deploy() {
        let dir = tempfile::tempdir().unwrap();
        let c = connector(dir.path(), json!({"services": {"a": {"replicas": 2}}}));
        let rs = c.deploy().unwrap();
        assert_eq!(rs.len(), 2);
        assert_eq!(rs[0].id, "a-000");
        assert!(matches!(c.deploy(), Err(ConnectorError::AlreadyDeployed(_))));
        c.undeploy().unwrap();
        assert!(matches!(c.undeploy(), Err(ConnectorError::NotDeployed(_))));
    }

    #[test]
    fn attaches_to_replicas_left_by_someone_else() {
        let dir = tempfile::tempdir().unwrap();
        let config = json!({"services": {"a": {"replicas": 2}}, "keep_on_undeploy": true});
        let fresh = connector(dir.path(), config.clone());
        assert!(matches!(
            fresh.get_available_resources("a"),
            Err(ConnectorError::NotDeployed(_))
        ));
        let owner = connector(dir.path(), config.clone());
        let r = owner.deploy().unwrap().remove(0);
        owner.run(&r, "echo kept > $HOME/mark", &BTreeMap::new(), "/work/j", None).unwrap();
        owner.undeploy().unwrap();

        let attached = fresh.get_available_resources("a").unwrap();
        assert_eq!(attached.len(), 2);
        assert_eq!(attached[0], r);
        let out = attached[0].clone();
        let seen = fresh.run(&out, "cat $HOME/mark", &BTreeMap::new(), "/work/k", None).unwrap();
        assert_eq!(seen.stdout, b"kept\n");
    }

    #[test]
    fn deploy_delay_is_applied() {
        let dir = tempfile::tempdir().unwrap();
        let c = connector(dir.path(), json!({"services": {"a": {}}, "latency": {"deploy_ms": 200}}));
        let start = Instant::now();
        c.deploy().unwrap();
        assert!(start.elapsed() >= Duration::from_millis(200));
    }

    #[test]
    fn run_captures_stdout_and_exit_code() {
        let dir = tempfile::tempdir().unwrap();
        let c = connector(dir.path(), json!({"services": {"a": {}}}));
        let r = c.deploy().unwrap().remove(0);
        let env = BTreeMap::new();
        let out = c.run(&r, "echo hi", &env, "/work/j", None).unwrap();
        assert_eq!((out.exit_code, out.stdout.as_slice()), (0, b"hi\n".as_slice()));
        let out = c.run(&r, "exit 3", &env, "/work/j", None).unwrap();
        assert_eq!((out.exit_code, out.stdout.len()), (3, 0));
    }

    #[test]
    fn run_timeout() {
        let dir = tempfile::tempdir().unwrap();
        let c = connector(dir.path(), json!({"services": {"a": {}}}));
        let r = c.deploy().unwrap().remove(0);
        let err = c
            .run(&r, "sleep 5", &BTreeMap::new(), "/work", Some(Duration::from_millis(100)))
            .unwrap_err();
        assert!(matches!(err, ConnectorError::Timeout { .. }));
    }

    #[test]
    fn run_on_undeployed_resource_fails() {
        let dir = tempfile::tempdir().unwrap();
        let c = connector(dir.path(), json!({"services": {"a": {}}}));
        let r = c.deploy().unwrap().remove(0);
        c.undeploy().unwrap();
        assert!(matches!(
            c.run(&r, "true", &BTreeMap::new(), "/work", None),
            Err(ConnectorError::UnknownResource(_))
        ));
    }

    #[test]
    fn view_paths_cannot_escape() {
        let dir = tempfile::tempdir().unwrap();
        let c = connector(dir.path(), json!({"services": {"a": {}}}));
        let r = c.deploy().unwrap().remove(0);
        assert!(c.host_path(&r, "/work/../../etc").is_err());
        assert!(c.host_path(&r, "relative").is_err());
    }
}
