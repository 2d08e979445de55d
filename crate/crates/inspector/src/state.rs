//! Loaded model and dataset, plus the mutable exclusion session.

use std::collections::BTreeSet;
use std::path::Path;
use std::sync::{Arc, RwLock};

use nwhead::checkpoint::Checkpoint;
use nwhead::data::{load_csv, Dataset, Split};
use nwhead::report::EmbeddedDataset;
use nwhead::trainer::TrainedModel;
use nwhead::{Error, InferenceMode, Result, SupportSet};
use serde::Serialize;

/// Everything fixed for the lifetime of the service: the model, the dataset
/// with its embeddings computed once, and the Full-mode base support.
#[derive(Debug)]
pub struct Workspace {
    pub model: TrainedModel,
    pub data: EmbeddedDataset,
    pub base: SupportSet,
    pub checkpoint: Option<String>,
    pub dataset: Option<String>,
}

impl Workspace {
    pub fn new(model: TrainedModel, raw: Dataset) -> Result<Self> {
        let data = EmbeddedDataset::new(&model, raw)?;
        let base = data.support(&InferenceMode::Full)?;
        data.require(Split::Test)?;
        Ok(Self {
            model,
            data,
            base,
            checkpoint: None,
            dataset: None,
        })
    }

    pub fn load(checkpoint: impl AsRef<Path>, dataset: impl AsRef<Path>) -> Result<Self> {
        let model = Checkpoint::load(checkpoint.as_ref())?.to_model()?;
        let raw = load_csv(dataset.as_ref())?;
        let mut ws = Self::new(model, raw)?;
        ws.checkpoint = Some(checkpoint.as_ref().display().to_string());
        ws.dataset = Some(dataset.as_ref().display().to_string());
        Ok(ws)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Session {
    pub exclusions: BTreeSet<String>,
    pub tau: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SessionView {
    pub tau: f64,
    pub exclusions: Vec<String>,
    pub exclusion_count: usize,
    pub support_size: usize,
}

impl Session {
    pub fn view(&self, base: &SupportSet) -> SessionView {
        SessionView {
            tau: self.tau,
            exclusions: self.exclusions.iter().cloned().collect(),
            exclusion_count: self.exclusions.len(),
            support_size: base.len() - self.exclusions.len(),
        }
    }
}

/// `base` without the excluded ids, in base order.
pub fn effective_support(base: &SupportSet, exclusions: &BTreeSet<String>) -> Result<SupportSet> {
    if exclusions.is_empty() {
        return Ok(base.clone());
    }
    let entries = base
        .entries()
        .iter()
        .filter(|e| !exclusions.contains(&e.id))
        .cloned()
        .collect::<Vec<_>>();
    if entries.is_empty() {
        return Err(Error::EmptySupport);
    }
    SupportSet::new(entries, base.class_count())
}

struct Inner {
    workspace: RwLock<Option<Arc<Workspace>>>,
    session: RwLock<Session>,
}

/// Shared service state. Reads take a snapshot of the workspace and session;
/// exclusion updates hold the session lock exclusively.
#[derive(Clone)]
pub struct AppState {
    inner: Arc<Inner>,
}

impl AppState {
    /// A service with nothing loaded yet; every endpoint answers 503.
    pub fn empty(tau: f64) -> Self {
        Self {
            inner: Arc::new(Inner {
                workspace: RwLock::new(None),
                session: RwLock::new(Session {
                    exclusions: BTreeSet::new(),
                    tau,
                }),
            }),
        }
    }

    pub fn with_workspace(workspace: Workspace, tau: f64) -> Self {
        let state = Self::empty(tau);
        state.install(workspace);
        state
    }

    pub fn install(&self, workspace: Workspace) {
        *self.inner.workspace.write().expect("workspace lock") = Some(Arc::new(workspace));
        self.inner.session.write().expect("session lock").exclusions.clear();
    }

    pub fn workspace(&self) -> Option<Arc<Workspace>> {
        self.inner.workspace.read().expect("workspace lock").clone()
    }

    pub fn session(&self) -> Session {
        self.inner.session.read().expect("session lock").clone()
    }

    /// Applies `f` to the session under the exclusive lock; the session is
    /// only replaced when `f` succeeds.
    pub fn update_session<T>(&self, f: impl FnOnce(&Session) -> Result<(Session, T)>) -> Result<T> {
        let mut guard = self.inner.session.write().expect("session lock");
        let (next, out) = f(&guard)?;
        *guard = next;
        Ok(out)
    }
}
