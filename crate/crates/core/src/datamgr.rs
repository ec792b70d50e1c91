//! Registry of data-token replicas and the transfers between them.
//!
//! Every file or directory token can live on several resources and on the
//! management node at once. Before a job runs, each input is made readable
//! from the job's resource with as few copies as possible: none if a
//! readable replica already exists, one connector copy inside a model, and
//! otherwise a two-step copy through the management node whose intermediate
//! replica is kept for later consumers.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex, RwLock};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::connector::{tree_digest, tree_size, Connector, ConnectorError, CopyKind, Resource};
use crate::events::{EventKind, EventLog};
use crate::scheduler::RemotePaths;
use crate::wfmodel::{DataKind, DataToken, TokenId};

/// Resolves the connector driving a model.
pub trait ConnectorLookup: Send + Sync {
    fn connector(&self, model: &str) -> Option<Arc<dyn Connector>>;
}

impl ConnectorLookup for BTreeMap<String, Arc<dyn Connector>> {
    fn connector(&self, model: &str) -> Option<Arc<dyn Connector>> {
        self.get(model).cloned()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Site {
    /// The machine running the engine.
    Management,
    Remote(Resource),
}

impl fmt::Display for Site {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Site::Management => f.write_str("management"),
            Site::Remote(r) => write!(f, "{r}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DataLocation {
    pub token: TokenId,
    pub site: Site,
    /// Absolute path in the site's own view.
    pub path: String,
    pub valid: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PlanKind {
    /// The destination can already read the token.
    None,
    IntraModelCopy,
    /// Only the second leg is needed: the management node already has it.
    FromManagement,
    TwoStepViaManagement,
    /// A single copy back to the management node: final output collection,
    /// or saving data that lives only on resources about to disappear.
    ToManagement,
}

impl PlanKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            PlanKind::None => "none",
            PlanKind::IntraModelCopy => "intra_model_copy",
            PlanKind::FromManagement => "from_management",
            PlanKind::TwoStepViaManagement => "two_step_via_management",
            PlanKind::ToManagement => "to_management",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum TransferAction {
    IntraModelCopy { from: Resource, from_path: String },
    ToManagement { from: Resource, from_path: String, staging: PathBuf },
    FromManagement { staging: PathBuf },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TransferPlan {
    pub token: TokenId,
    pub kind: PlanKind,
    /// Replica the data is read from.
    pub source: DataLocation,
    pub destination: Resource,
    pub dest_path: String,
    pub steps: Vec<TransferAction>,
    /// Where a job on the destination finds the token once the plan has run.
    pub read_path: String,
}

#[derive(Debug, Error)]
pub enum DataError {
    #[error("unknown token {0}")]
    UnknownToken(TokenId),
    #[error("token {0} has no valid replica")]
    NoValidLocation(TokenId),
    #[error("no connector for model `{0}`")]
    UnknownModel(String),
    #[error("token {0} carries a value, not data")]
    ValueToken(TokenId),
    #[error("copy of token {token} failed: {source}")]
    Copy {
        token: TokenId,
        #[source]
        source: ConnectorError,
    },
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

struct Record {
    token: DataToken,
    locations: Vec<DataLocation>,
}

#[derive(Default)]
struct Registry {
    next: u64,
    records: BTreeMap<TokenId, Record>,
}

pub struct DataManager {
    outdir: PathBuf,
    connectors: Arc<dyn ConnectorLookup>,
    events: EventLog,
    verify_checksum: bool,
    registry: RwLock<Registry>,
    locks: Mutex<BTreeMap<String, Arc<Mutex<()>>>>,
}

impl DataManager {
    pub fn new(outdir: &Path, connectors: Arc<dyn ConnectorLookup>, events: EventLog) -> Self {
        DataManager {
            outdir: outdir.to_path_buf(),
            connectors,
            events,
            verify_checksum: false,
            registry: RwLock::new(Registry::default()),
            locks: Mutex::new(BTreeMap::new()),
        }
    }

    /// Also compare content digests, not only sizes, before trusting a
    /// pre-existing destination.
    pub fn with_checksum_verification(mut self, on: bool) -> Self {
        self.verify_checksum = on;
        self
    }

    pub fn outdir(&self) -> &Path {
        &self.outdir
    }

    /// Mints a new token. Tokens are immutable; new data means a new token.
    pub fn register_token(&self, kind: DataKind, name: &str, value: Option<String>) -> DataToken {
        let mut reg = self.registry.write().unwrap();
        reg.next += 1;
        let token = DataToken {
            id: TokenId(reg.next),
            kind,
            name: name.to_string(),
            value,
        };
        reg.records.insert(
            token.id,
            Record {
                token: token.clone(),
                locations: Vec::new(),
            },
        );
        token
    }

    pub fn token(&self, id: TokenId) -> Option<DataToken> {
        self.registry
            .read()
            .unwrap()
            .records
            .get(&id)
            .map(|r| r.token.clone())
    }

    pub fn locations(&self, id: TokenId) -> Result<Vec<DataLocation>, DataError> {
        self.registry
            .read()
            .unwrap()
            .records
            .get(&id)
            .map(|r| r.locations.clone())
            .ok_or(DataError::UnknownToken(id))
    }

    pub fn valid_locations(&self, id: TokenId) -> Result<Vec<DataLocation>, DataError> {
        let mut ls: Vec<_> = self.locations(id)?.into_iter().filter(|l| l.valid).collect();
        ls.sort_by(|a, b| a.site.cmp(&b.site).then_with(|| a.path.cmp(&b.path)));
        Ok(ls)
    }

    /// Records that `site` holds `token` at `path`.
    pub fn add_remote_path_mapping(
        &self,
        token: TokenId,
        site: Site,
        path: &str,
    ) -> Result<(), DataError> {
        let mut reg = self.registry.write().unwrap();
        let record = reg
            .records
            .get_mut(&token)
            .ok_or(DataError::UnknownToken(token))?;
        if let Some(existing) = record
            .locations
            .iter_mut()
            .find(|l| l.site == site && l.path == path)
        {
            existing.valid = true;
        } else {
            record.locations.push(DataLocation {
                token,
                site,
                path: path.to_string(),
                valid: true,
            });
        }
        Ok(())
    }

    /// Management-node directory reserved for `token`.
    pub fn management_path(&self, token: &DataToken) -> PathBuf {
        self.outdir.join("data").join(token.id.to_string()).join(&token.name)
    }

    fn connector(&self, model: &str) -> Result<Arc<dyn Connector>, DataError> {
        self.connectors
            .connector(model)
            .ok_or_else(|| DataError::UnknownModel(model.to_string()))
    }

    fn copy_err(token: TokenId) -> impl Fn(ConnectorError) -> DataError {
        move |source| DataError::Copy { token, source }
    }

    /// Byte size of the token, measured on its first valid replica.
    pub fn token_size(&self, id: TokenId) -> Result<Option<u64>, DataError> {
        let Some(loc) = self.valid_locations(id)?.into_iter().next() else {
            return Ok(None);
        };
        Ok(match &loc.site {
            Site::Management => {
                let p = Path::new(&loc.path);
                p.exists().then(|| tree_size(p))
            }
            Site::Remote(r) => self
                .connector(&r.model)?
                .size(r, &loc.path)
                .map_err(Self::copy_err(id))?,
        })
    }

    fn token_digest(&self, id: TokenId) -> Result<Option<String>, DataError> {
        let Some(loc) = self.valid_locations(id)?.into_iter().next() else {
            return Ok(None);
        };
        match &loc.site {
            Site::Management => tree_digest(Path::new(&loc.path))
                .map(Some)
                .map_err(Self::copy_err(id)),
            Site::Remote(r) => self
                .connector(&r.model)?
                .checksum(r, &loc.path)
                .map_err(Self::copy_err(id)),
        }
    }

    /// Whether `dest_path` on `dest` already holds an identical replica.
    fn destination_holds(
        &self,
        id: TokenId,
        dest: &Resource,
        dest_path: &str,
    ) -> Result<bool, DataError> {
        let conn = self.connector(&dest.model)?;
        let Some(found) = conn.size(dest, dest_path).map_err(Self::copy_err(id))? else {
            return Ok(false);
        };
        if self.token_size(id)? != Some(found) {
            return Ok(false);
        }
        if self.verify_checksum {
            let there = conn.checksum(dest, dest_path).map_err(Self::copy_err(id))?;
            if there.is_some() && there != self.token_digest(id)? {
                return Ok(false);
            }
        }
        Ok(true)
    }

    /// Decides how `token` becomes readable at `dest_path` on `dest`.
    pub fn plan_transfer(
        &self,
        id: TokenId,
        dest: &Resource,
        dest_path: &str,
    ) -> Result<TransferPlan, DataError> {
        let token = self.token(id).ok_or(DataError::UnknownToken(id))?;
        if token.kind == DataKind::Value {
            return Err(DataError::ValueToken(id));
        }
        let valid = self.valid_locations(id)?;
        if valid.is_empty() {
            return Err(DataError::NoValidLocation(id));
        }
        let plan = |kind, source: &DataLocation, steps, read_path: &str| TransferPlan {
            token: id,
            kind,
            source: source.clone(),
            destination: dest.clone(),
            dest_path: dest_path.to_string(),
            steps,
            read_path: read_path.to_string(),
        };

        // A replica the destination can read in place; the requested path
        // itself wins over any other.
        let mut readable: Vec<&DataLocation> = Vec::new();
        for loc in &valid {
            if let Site::Remote(holder) = &loc.site {
                if self.connector(&holder.model)?.visible_from(holder, &loc.path, dest) {
                    readable.push(loc);
                }
            }
        }
        readable.sort_by_key(|l| l.path != dest_path);
        if let Some(loc) = readable.first() {
            return Ok(plan(PlanKind::None, loc, vec![], &loc.path));
        }

        // Someone put it there already, e.g. the producing task itself.
        if self.destination_holds(id, dest, dest_path)? {
            return Ok(plan(PlanKind::None, &valid[0], vec![], dest_path));
        }

        let remote = |same_model: bool| {
            valid.iter().find(|l| match &l.site {
                Site::Remote(r) => (r.model == dest.model) == same_model,
                Site::Management => false,
            })
        };
        if let Some(loc) = remote(true) {
            let Site::Remote(from) = &loc.site else { unreachable!() };
            return Ok(plan(
                PlanKind::IntraModelCopy,
                loc,
                vec![TransferAction::IntraModelCopy {
                    from: from.clone(),
                    from_path: loc.path.clone(),
                }],
                dest_path,
            ));
        }
        if let Some(loc) = valid.iter().find(|l| l.site == Site::Management) {
            return Ok(plan(
                PlanKind::FromManagement,
                loc,
                vec![TransferAction::FromManagement {
                    staging: PathBuf::from(&loc.path),
                }],
                dest_path,
            ));
        }
        let loc = remote(false).expect("a valid location exists");
        let Site::Remote(from) = &loc.site else { unreachable!() };
        let staging = self.management_path(&token);
        Ok(plan(
            PlanKind::TwoStepViaManagement,
            loc,
            vec![
                TransferAction::ToManagement {
                    from: from.clone(),
                    from_path: loc.path.clone(),
                    staging: staging.clone(),
                },
                TransferAction::FromManagement { staging },
            ],
            dest_path,
        ))
    }

    fn lock(&self, key: String) -> Arc<Mutex<()>> {
        self.locks.lock().unwrap().entry(key).or_default().clone()
    }

    fn label(&self, site: &Site, path: &str) -> String {
        match site {
            Site::Management => {
                let p = Path::new(path);
                let shown = p.strip_prefix(&self.outdir).unwrap_or(p);
                format!("management:{}", shown.display())
            }
            Site::Remote(r) => format!("{r}:{path}"),
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn audit(
        &self,
        plan: &PlanKind,
        token: TokenId,
        leg: u8,
        from: (&Site, &str),
        to: (&Site, &str),
        kind: CopyKind,
        bytes: u64,
        started: Instant,
    ) {
        self.events.emit(EventKind::Copy {
            token: token.to_string(),
            plan: plan.as_str().to_string(),
            leg,
            source: self.label(from.0, from.1),
            destination: self.label(to.0, to.1),
            kind: serde_json::to_value(kind)
                .ok()
                .and_then(|v| v.as_str().map(str::to_string))
                .unwrap_or_default(),
            bytes,
            duration_s: started.elapsed().as_secs_f64(),
        });
    }

    /// Copies `from_path` on `from` to the token's management directory,
    /// unless a valid management replica exists already.
    fn to_management(
        &self,
        plan: &PlanKind,
        token: TokenId,
        from: &Resource,
        from_path: &str,
        staging: &Path,
    ) -> Result<(), DataError> {
        let lock = self.lock(format!("{token}@management"));
        let _held = lock.lock().unwrap();
        let staged = staging.to_string_lossy().into_owned();
        if self
            .valid_locations(token)?
            .iter()
            .any(|l| l.site == Site::Management)
        {
            return Ok(());
        }
        if staging.exists() {
            let io = |e| DataError::Io {
                path: staged.clone(),
                source: e,
            };
            if staging.is_dir() {
                std::fs::remove_dir_all(staging).map_err(io)?;
            } else {
                std::fs::remove_file(staging).map_err(io)?;
            }
        }
        let started = Instant::now();
        let bytes = self
            .connector(&from.model)?
            .copy(from_path, &staged, from, CopyKind::RemoteToLocal, None)
            .map_err(Self::copy_err(token))?;
        self.add_remote_path_mapping(token, Site::Management, &staged)?;
        self.audit(
            plan,
            token,
            1,
            (&Site::Remote(from.clone()), from_path),
            (&Site::Management, &staged),
            CopyKind::RemoteToLocal,
            bytes,
            started,
        );
        Ok(())
    }

    /// Runs `plan`; afterwards the destination holds a valid replica.
    pub fn execute_transfer(&self, plan: &TransferPlan) -> Result<(), DataError> {
        let dest = &plan.destination;
        let dest_site = Site::Remote(dest.clone());
        if plan.kind == PlanKind::None {
            if plan.read_path == plan.dest_path && plan.source.site != dest_site {
                self.add_remote_path_mapping(plan.token, dest_site, &plan.dest_path)?;
            }
            return Ok(());
        }
        let lock = self.lock(format!("{}@{}:{}", plan.token, dest.key(), plan.dest_path));
        let _held = lock.lock().unwrap();
        let already = self
            .valid_locations(plan.token)?
            .iter()
            .any(|l| l.site == dest_site && l.path == plan.dest_path);
        if already {
            return Ok(());
        }
        let conn = self.connector(&dest.model)?;
        for action in &plan.steps {
            match action {
                TransferAction::IntraModelCopy { from, from_path } => {
                    let started = Instant::now();
                    let bytes = conn
                        .copy(
                            from_path,
                            &plan.dest_path,
                            dest,
                            CopyKind::RemoteToRemote,
                            Some(from),
                        )
                        .map_err(Self::copy_err(plan.token))?;
                    self.audit(
                        &plan.kind,
                        plan.token,
                        1,
                        (&Site::Remote(from.clone()), from_path),
                        (&dest_site, &plan.dest_path),
                        CopyKind::RemoteToRemote,
                        bytes,
                        started,
                    );
                }
                TransferAction::ToManagement {
                    from,
                    from_path,
                    staging,
                } => self.to_management(&plan.kind, plan.token, from, from_path, staging)?,
                TransferAction::FromManagement { staging } => {
                    let staged = staging.to_string_lossy().into_owned();
                    let started = Instant::now();
                    let bytes = conn
                        .copy(&staged, &plan.dest_path, dest, CopyKind::LocalToRemote, None)
                        .map_err(Self::copy_err(plan.token))?;
                    let leg = if plan.kind == PlanKind::TwoStepViaManagement { 2 } else { 1 };
                    self.audit(
                        &plan.kind,
                        plan.token,
                        leg,
                        (&Site::Management, &staged),
                        (&dest_site, &plan.dest_path),
                        CopyKind::LocalToRemote,
                        bytes,
                        started,
                    );
                }
            }
        }
        self.add_remote_path_mapping(plan.token, dest_site, &plan.dest_path)
    }

    /// Plans and executes in one go; returns the plan that was carried out.
    pub fn stage(
        &self,
        id: TokenId,
        dest: &Resource,
        dest_path: &str,
    ) -> Result<TransferPlan, DataError> {
        let lock = self.lock(format!("{id}@{}:{dest_path}#plan", dest.key()));
        let _held = lock.lock().unwrap();
        let plan = self.plan_transfer(id, dest, dest_path)?;
        if plan.kind == PlanKind::None {
            self.events.emit(EventKind::TransferSkipped {
                token: id.to_string(),
                destination: format!("{dest}:{dest_path}"),
                reason: if plan.read_path == dest_path {
                    "present at destination".into()
                } else {
                    format!("readable in place at {}", plan.read_path)
                },
            });
        }
        self.execute_transfer(&plan)?;
        Ok(plan)
    }

    /// Makes sure the token exists on the management node and returns the
    /// local path.
    pub fn collect_output(&self, id: TokenId) -> Result<PathBuf, DataError> {
        let token = self.token(id).ok_or(DataError::UnknownToken(id))?;
        if token.kind == DataKind::Value {
            return Err(DataError::ValueToken(id));
        }
        let valid = self.valid_locations(id)?;
        if let Some(loc) = valid.iter().find(|l| l.site == Site::Management) {
            return Ok(PathBuf::from(&loc.path));
        }
        let loc = valid.first().ok_or(DataError::NoValidLocation(id))?;
        let Site::Remote(from) = &loc.site else { unreachable!() };
        let target = self.management_path(&token);
        self.to_management(&PlanKind::ToManagement, id, from, &loc.path, &target)?;
        let path = self
            .valid_locations(id)?
            .into_iter()
            .find(|l| l.site == Site::Management)
            .map(|l| PathBuf::from(l.path))
            .unwrap_or(target);
        self.events.emit(EventKind::OutputCollected {
            token: id.to_string(),
            path: self.label(&Site::Management, &path.to_string_lossy()),
        });
        Ok(path)
    }

    /// Copies to the management node every token whose only valid replicas
    /// live on `resources`, so that they survive the resources' removal.
    pub fn secure_outputs(&self, resources: &[Resource]) -> Result<Vec<TokenId>, DataError> {
        let keys: Vec<String> = resources.iter().map(Resource::key).collect();
        let on_doomed = |l: &DataLocation| match &l.site {
            Site::Remote(r) => keys.contains(&r.key()),
            Site::Management => false,
        };
        let at_risk: Vec<TokenId> = {
            let reg = self.registry.read().unwrap();
            reg.records
                .iter()
                .filter(|(_, rec)| {
                    let valid: Vec<_> = rec.locations.iter().filter(|l| l.valid).collect();
                    !valid.is_empty() && valid.iter().all(|l| on_doomed(l))
                })
                .map(|(id, _)| *id)
                .collect()
        };
        for id in &at_risk {
            self.collect_output(*id)?;
        }
        Ok(at_risk)
    }

    /// Marks every replica on `resources` invalid.
    pub fn invalidate_resources(&self, resources: &[Resource]) {
        let keys: Vec<String> = resources.iter().map(Resource::key).collect();
        let mut reg = self.registry.write().unwrap();
        for rec in reg.records.values_mut() {
            for l in &mut rec.locations {
                if let Site::Remote(r) = &l.site {
                    if keys.contains(&r.key()) {
                        l.valid = false;
                    }
                }
            }
        }
    }
}

impl RemotePaths for DataManager {
    fn holds(&self, token: TokenId, resource: &Resource) -> bool {
        self.registry
            .read()
            .unwrap()
            .records
            .get(&token)
            .is_some_and(|rec| {
                rec.locations.iter().any(|l| {
                    l.valid && matches!(&l.site, Site::Remote(r) if r.key() == resource.key())
                })
            })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::connector::{ConnectorContext, ConnectorRegistry};
    use serde_json::json;
    use std::fs;

    struct World {
        dm: DataManager,
        conns: BTreeMap<String, Arc<dyn Connector>>,
        events: EventLog,
        dir: tempfile::TempDir,
    }

    impl World {
        fn new(models: &[(&str, serde_json::Value)]) -> World {
            let dir = tempfile::tempdir().unwrap();
            let ctx = ConnectorContext {
                sandbox_root: dir.path().join("sandbox"),
            };
            let registry = ConnectorRegistry::default();
            let mut conns: BTreeMap<String, Arc<dyn Connector>> = BTreeMap::new();
            for (name, config) in models {
                let c = registry.create("sandbox-shared", name, config, &ctx).unwrap();
                c.deploy().unwrap();
                conns.insert(name.to_string(), c);
            }
            let events = EventLog::new();
            let dm = DataManager::new(&dir.path().join("out"), Arc::new(conns.clone()), events.clone());
            World {
                dm,
                conns,
                events,
                dir,
            }
        }

        fn res(&self, model: &str, i: usize) -> Resource {
            self.conns[model].get_available_resources("w").unwrap()[i].clone()
        }

        fn write(&self, r: &Resource, path: &str, body: &str) {
            let env = BTreeMap::new();
            let path = self.conns[&r.model].command_path(r, path);
            let out = self.conns[&r.model]
                .run(r, &format!("mkdir -p $(dirname {path}) && printf '{body}' > {path}"), &env, "/work", None)
                .unwrap();
            assert_eq!(out.exit_code, 0);
        }

        fn read(&self, r: &Resource, path: &str) -> String {
            let path = self.conns[&r.model].command_path(r, path);
            let out = self.conns[&r.model]
                .run(r, &format!("cat {path}"), &BTreeMap::new(), "/work", None)
                .unwrap();
            String::from_utf8(out.stdout).unwrap()
        }

        fn copies(&self) -> Vec<(String, u8)> {
            self.events
                .snapshot()
                .into_iter()
                .filter_map(|e| match e.kind {
                    EventKind::Copy { plan, leg, .. } => Some((plan, leg)),
                    _ => None,
                })
                .collect()
        }

        fn produce(&self, r: &Resource, path: &str, body: &str) -> TokenId {
            self.write(r, path, body);
            let t = self.dm.register_token(DataKind::File, "f.txt", None);
            self.dm
                .add_remote_path_mapping(t.id, Site::Remote(r.clone()), path)
                .unwrap();
            t.id
        }
    }

    fn two() -> serde_json::Value {
        json!({"services": {"w": {"replicas": 2}}})
    }

    #[test]
    fn mappings_accumulate() {
        let w = World::new(&[("A", two())]);
        let t = w.dm.register_token(DataKind::File, "x", None);
        w.dm.add_remote_path_mapping(t.id, Site::Remote(w.res("A", 0)), "/p").unwrap();
        w.dm.add_remote_path_mapping(t.id, Site::Remote(w.res("A", 1)), "/p").unwrap();
        assert_eq!(w.dm.valid_locations(t.id).unwrap().len(), 2);
        assert!(w.dm.holds(t.id, &w.res("A", 1)));
        assert!(matches!(
            w.dm.add_remote_path_mapping(TokenId(99), Site::Management, "/p"),
            Err(DataError::UnknownToken(_))
        ));
    }

    #[test]
    fn same_resource_needs_no_copy() {
        let w = World::new(&[("A", two())]);
        let r = w.res("A", 0);
        let t = w.produce(&r, "/work/j1/f.txt", "hi");
        let plan = w.dm.stage(t, &r, "/staging/j2/in/f.txt").unwrap();
        assert_eq!(plan.kind, PlanKind::None);
        assert_eq!(plan.read_path, "/work/j1/f.txt");
        assert!(w.copies().is_empty());
    }

    #[test]
    fn cross_model_is_two_steps_then_one() {
        let w = World::new(&[("A", two()), ("B", two())]);
        let t = w.produce(&w.res("A", 0), "/work/j1/f.txt", "payload");
        let b0 = w.res("B", 0);
        let plan = w.dm.stage(t, &b0, "/staging/j2/in/f.txt").unwrap();
        assert_eq!(plan.kind, PlanKind::TwoStepViaManagement);
        assert_eq!(plan.steps.len(), 2);
        assert_eq!(w.read(&b0, "/staging/j2/in/f.txt"), "payload");
        assert_eq!(
            w.copies(),
            [
                ("two_step_via_management".to_string(), 1),
                ("two_step_via_management".to_string(), 2)
            ]
        );
        // Later consumers in B pay at most one copy: from a replica in B...
        let plan = w.dm.stage(t, &w.res("B", 1), "/staging/j3/in/f.txt").unwrap();
        assert_eq!(plan.kind, PlanKind::IntraModelCopy);
        assert_eq!(w.copies().len(), 3);
        // And nothing moves for a repeat on the same destination.
        let plan = w.dm.stage(t, &b0, "/staging/j2/in/f.txt").unwrap();
        assert_eq!(plan.kind, PlanKind::None);
        assert_eq!(w.copies().len(), 3);
        // ...or, with B's replicas gone, from the kept management replica.
        w.dm.invalidate_resources(&[b0.clone(), w.res("B", 1)]);
        let plan = w.dm.stage(t, &w.res("B", 1), "/staging/j4/in/f.txt").unwrap();
        assert_eq!(plan.kind, PlanKind::FromManagement);
        assert_eq!(w.copies().len(), 4);
    }

    #[test]
    fn intra_model_copy_between_replicas() {
        let w = World::new(&[("A", two())]);
        let t = w.produce(&w.res("A", 0), "/work/j1/f.txt", "abc");
        let a1 = w.res("A", 1);
        let plan = w.dm.stage(t, &a1, "/staging/j2/in/f.txt").unwrap();
        assert_eq!(plan.kind, PlanKind::IntraModelCopy);
        assert_eq!(w.read(&a1, "/staging/j2/in/f.txt"), "abc");
        assert_eq!(w.copies(), [("intra_model_copy".to_string(), 1)]);
    }

    #[test]
    fn shared_mount_is_read_in_place() {
        let w = World::new(&[(
            "A",
            json!({"services": {"w": {"replicas": 2}}, "shared_mounts": ["/shared"]}),
        )]);
        let t = w.produce(&w.res("A", 0), "/shared/f.txt", "s");
        let plan = w.dm.stage(t, &w.res("A", 1), "/staging/j2/in/f.txt").unwrap();
        assert_eq!(plan.kind, PlanKind::None);
        assert_eq!(plan.read_path, "/shared/f.txt");
        assert!(w.copies().is_empty());
    }

    #[test]
    fn existing_destination_is_detected_by_probe() {
        let w = World::new(&[("A", two()), ("B", two())]);
        let t = w.produce(&w.res("A", 0), "/work/j1/f.txt", "same");
        let b0 = w.res("B", 0);
        w.write(&b0, "/staging/j2/in/f.txt", "same");
        let plan = w.dm.plan_transfer(t, &b0, "/staging/j2/in/f.txt").unwrap();
        assert_eq!(plan.kind, PlanKind::None);
        // A different size is not the same data.
        w.write(&b0, "/staging/j3/in/f.txt", "other!");
        let plan = w.dm.plan_transfer(t, &b0, "/staging/j3/in/f.txt").unwrap();
        assert_eq!(plan.kind, PlanKind::TwoStepViaManagement);
    }

    #[test]
    fn failed_first_leg_registers_nothing() {
        let w = World::new(&[("A", two()), ("B", two())]);
        let a0 = w.res("A", 0);
        let t = w.produce(&a0, "/work/j1/f.txt", "x");
        let plan = w.dm.plan_transfer(t, &w.res("B", 0), "/staging/j2/f.txt").unwrap();
        fs::remove_file(w.conns["A"].command_path(&a0, "/work/j1/f.txt")).unwrap();
        assert!(matches!(w.dm.execute_transfer(&plan), Err(DataError::Copy { .. })));
        assert_eq!(w.dm.valid_locations(t).unwrap().len(), 1);
        assert!(w.copies().is_empty());
    }

    #[test]
    fn collect_output_copies_once() {
        let w = World::new(&[("A", two())]);
        let r = w.res("A", 0);
        w.write(&r, "/work/j1/d/sub/x", "1");
        w.write(&r, "/work/j1/d/y", "22");
        let t = w.dm.register_token(DataKind::Directory, "d", None);
        w.dm.add_remote_path_mapping(t.id, Site::Remote(r.clone()), "/work/j1/d").unwrap();
        let p = w.dm.collect_output(t.id).unwrap();
        assert!(p.starts_with(w.dir.path().join("out")));
        assert_eq!(fs::read_to_string(p.join("sub/x")).unwrap(), "1");
        assert_eq!(fs::read_to_string(p.join("y")).unwrap(), "22");
        assert_eq!(w.dm.collect_output(t.id).unwrap(), p);
        assert_eq!(w.copies().len(), 1);
    }

    #[test]
    fn secure_then_invalidate() {
        let w = World::new(&[("A", two())]);
        let a0 = w.res("A", 0);
        let only_here = w.produce(&a0, "/work/j1/f.txt", "a");
        let elsewhere = w.produce(&a0, "/work/j1/g.txt", "b");
        w.dm.add_remote_path_mapping(elsewhere, Site::Remote(w.res("A", 1)), "/x").unwrap();
        let secured = w.dm.secure_outputs(std::slice::from_ref(&a0)).unwrap();
        assert_eq!(secured, [only_here]);
        w.dm.invalidate_resources(std::slice::from_ref(&a0));
        assert!(!w.dm.holds(only_here, &a0));
        let locs = w.dm.valid_locations(only_here).unwrap();
        assert_eq!(locs.len(), 1);
        assert_eq!(locs[0].site, Site::Management);
    }

    #[test]
    fn value_tokens_have_no_transfers() {
        let w = World::new(&[("A", two())]);
        let t = w.dm.register_token(DataKind::Value, "v", Some("3".into()));
        assert!(matches!(
            w.dm.plan_transfer(t.id, &w.res("A", 0), "/x"),
            Err(DataError::ValueToken(_))
        ));
    }
}
