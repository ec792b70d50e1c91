//! Model lifecycle: lazy, exactly-once deployment per model, service
//! recycling and final teardown.

use std::collections::BTreeMap;
use std::sync::{Arc, Mutex, TryLockError};

use thiserror::Error;

use crate::config::ModelEntry;
use crate::connector::{Connector, ConnectorContext, ConnectorError, ConnectorRegistry, Resource};
use crate::events::{EventKind, EventLog};

#[derive(Debug, Error)]
pub enum DeploymentError {
    #[error("model `{0}` is not declared")]
    UnknownModel(String),
    #[error("connector for model `{model}`: {source}")]
    Connector {
        model: String,
        #[source]
        source: ConnectorError,
    },
    #[error("deployment of model `{model}` failed: {message}")]
    DeployFailed { model: String, message: String },
    #[error("model `{0}` is not deployed")]
    NotDeployed(String),
    #[error("model `{0}` has already been undeployed")]
    Undeployed(String),
    #[error("model `{0}` is externally managed")]
    External(String),
    #[error("teardown failed for {}", .0.iter().map(|(m, e)| format!("`{m}` ({e})")).collect::<Vec<_>>().join(", "))]
    Teardown(Vec<(String, String)>),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ModelState {
    NotDeployed,
    Deploying,
    Deployed(Vec<Resource>),
    Failed(String),
    Undeployed,
}

struct Slot {
    connector: Arc<dyn Connector>,
    external: bool,
    state: Mutex<ModelState>,
}

/// Owns one connector instance per declared model.
pub struct DeploymentManager {
    models: BTreeMap<String, ModelEntry>,
    registry: ConnectorRegistry,
    ctx: ConnectorContext,
    slots: Mutex<BTreeMap<String, Arc<Slot>>>,
    events: EventLog,
}

impl DeploymentManager {
    pub fn new(
        models: BTreeMap<String, ModelEntry>,
        registry: ConnectorRegistry,
        ctx: ConnectorContext,
        events: EventLog,
    ) -> Self {
        DeploymentManager {
            models,
            registry,
            ctx,
            slots: Mutex::new(BTreeMap::new()),
            events,
        }
    }

    fn slot(&self, model: &str) -> Result<Arc<Slot>, DeploymentError> {
        let mut slots = self.slots.lock().unwrap();
        if let Some(s) = slots.get(model) {
            return Ok(s.clone());
        }
        let entry = self
            .models
            .get(model)
            .ok_or_else(|| DeploymentError::UnknownModel(model.to_string()))?;
        let connector = self
            .registry
            .create(&entry.kind, model, &entry.config, &self.ctx)
            .map_err(|source| DeploymentError::Connector {
                model: model.to_string(),
                source,
            })?;
        let slot = Arc::new(Slot {
            connector,
            external: entry.external,
            state: Mutex::new(ModelState::NotDeployed),
        });
        slots.insert(model.to_string(), slot.clone());
        Ok(slot)
    }

    pub fn connector(&self, model: &str) -> Result<Arc<dyn Connector>, DeploymentError> {
        Ok(self.slot(model)?.connector.clone())
    }

    pub fn is_external(&self, model: &str) -> bool {
        self.models.get(model).is_some_and(|m| m.external)
    }

    pub fn state(&self, model: &str) -> ModelState {
        let Some(slot) = self.slots.lock().unwrap().get(model).cloned() else {
            return ModelState::NotDeployed;
        };
        let state = match slot.state.try_lock() {
            Ok(s) => s.clone(),
            Err(TryLockError::WouldBlock) => ModelState::Deploying,
            Err(TryLockError::Poisoned(p)) => p.into_inner().clone(),
        };
        state
    }

    /// Deploys `model` on first use and returns its resources. Concurrent
    /// callers for the same model wait on one deployment.
    pub fn ensure_deployed(&self, model: &str) -> Result<Vec<Resource>, DeploymentError> {
        let slot = self.slot(model)?;
        let mut state = slot.state.lock().unwrap();
        match &*state {
            ModelState::Deployed(rs) => return Ok(rs.clone()),
            ModelState::Failed(message) => {
                return Err(DeploymentError::DeployFailed {
                    model: model.to_string(),
                    message: message.clone(),
                })
            }
            ModelState::Undeployed => return Err(DeploymentError::Undeployed(model.to_string())),
            ModelState::NotDeployed | ModelState::Deploying => {}
        }

        if slot.external {
            let mut resources = Vec::new();
            for service in slot.connector.service_names() {
                match slot.connector.get_available_resources(&service) {
                    Ok(rs) => resources.extend(rs),
                    Err(e) => {
                        *state = ModelState::Failed(e.to_string());
                        self.events.emit(EventKind::DeployFailed {
                            model: model.to_string(),
                            error: e.to_string(),
                        });
                        return Err(DeploymentError::DeployFailed {
                            model: model.to_string(),
                            message: e.to_string(),
                        });
                    }
                }
            }
            self.events.emit(EventKind::ExternalAttached {
                model: model.to_string(),
                resources: ids(&resources),
            });
            *state = ModelState::Deployed(resources.clone());
            return Ok(resources);
        }

        self.events.emit(EventKind::DeployStarted {
            model: model.to_string(),
        });
        match slot.connector.deploy() {
            Ok(resources) => {
                self.events.emit(EventKind::DeployFinished {
                    model: model.to_string(),
                    resources: ids(&resources),
                });
                *state = ModelState::Deployed(resources.clone());
                Ok(resources)
            }
            Err(e) => {
                self.events.emit(EventKind::DeployFailed {
                    model: model.to_string(),
                    error: e.to_string(),
                });
                *state = ModelState::Failed(e.to_string());
                Err(DeploymentError::DeployFailed {
                    model: model.to_string(),
                    message: e.to_string(),
                })
            }
        }
    }

    /// Current replicas of `service`; the model must be deployed.
    pub fn available_resources(
        &self,
        model: &str,
        service: &str,
    ) -> Result<Vec<Resource>, DeploymentError> {
        let slot = self.slot(model)?;
        if !matches!(*slot.state.lock().unwrap(), ModelState::Deployed(_)) {
            return Err(DeploymentError::NotDeployed(model.to_string()));
        }
        let mut rs = slot
            .connector
            .get_available_resources(service)
            .map_err(|source| DeploymentError::Connector {
                model: model.to_string(),
                source,
            })?;
        rs.sort_by(|a, b| a.id.cmp(&b.id));
        Ok(rs)
    }

    /// Destroys and recreates every replica of `service`. Callers must have
    /// secured any data living only on those replicas.
    pub fn redeploy_service(
        &self,
        model: &str,
        service: &str,
    ) -> Result<Vec<Resource>, DeploymentError> {
        let slot = self.slot(model)?;
        if slot.external {
            return Err(DeploymentError::External(model.to_string()));
        }
        let mut state = slot.state.lock().unwrap();
        let ModelState::Deployed(current) = &*state else {
            return Err(DeploymentError::NotDeployed(model.to_string()));
        };
        let old: Vec<Resource> = current.iter().filter(|r| r.service == service).cloned().collect();
        self.events.emit(EventKind::RedeployStarted {
            model: model.to_string(),
            service: service.to_string(),
            resources: ids(&old),
        });
        let fresh = slot
            .connector
            .redeploy_service(service)
            .map_err(|source| DeploymentError::Connector {
                model: model.to_string(),
                source,
            })?;
        let mut all: Vec<Resource> = current.iter().filter(|r| r.service != service).cloned().collect();
        all.extend(fresh.iter().cloned());
        *state = ModelState::Deployed(all);
        self.events.emit(EventKind::RedeployFinished {
            model: model.to_string(),
            service: service.to_string(),
            resources: ids(&fresh),
        });
        Ok(fresh)
    }

    /// Undeploys every deployed, non-external model. All models are attempted;
    /// failures are reported together afterwards.
    pub fn undeploy_all(&self) -> Result<(), DeploymentError> {
        let slots: Vec<(String, Arc<Slot>)> = self
            .slots
            .lock()
            .unwrap()
            .iter()
            .map(|(k, v)| (k.clone(), v.clone()))
            .collect();
        let mut failures = Vec::new();
        for (model, slot) in slots {
            let mut state = slot.state.lock().unwrap();
            if !matches!(*state, ModelState::Deployed(_)) {
                continue;
            }
            *state = ModelState::Undeployed;
            if slot.external {
                continue;
            }
            self.events.emit(EventKind::UndeployStarted {
                model: model.clone(),
            });
            match slot.connector.undeploy() {
                Ok(()) => {
                    self.events.emit(EventKind::UndeployFinished {
                        model: model.clone(),
                    });
                }
                Err(e) => {
                    self.events.emit(EventKind::UndeployFailed {
                        model: model.clone(),
                        error: e.to_string(),
                    });
                    failures.push((model, e.to_string()));
                }
            }
        }
        if failures.is_empty() {
            Ok(())
        } else {
            Err(DeploymentError::Teardown(failures))
        }
    }
}

impl crate::datamgr::ConnectorLookup for DeploymentManager {
    fn connector(&self, model: &str) -> Option<Arc<dyn Connector>> {
        DeploymentManager::connector(self, model).ok()
    }
}

fn ids(resources: &[Resource]) -> Vec<String> {
    resources.iter().map(|r| r.id.clone()).collect()
}
