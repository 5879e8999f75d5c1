use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fsd::{FsdConfig, FsdDims, FsdModel};
use crate::graph::SensorGraph;
use crate::numerics::{Adam, ParamStore, RngStream};
use crate::resfusion::PriorMode;
use crate::scalar::Scalar;
use crate::schedule::ScheduleConfig;

pub const CHECKPOINT_FORMAT: &str = "ddiff-checkpoint/1";

/// Trained denoiser plus everything needed to resume or sample from it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar", deny_unknown_fields)]
pub struct Checkpoint<T> {
    pub format: String,
    pub schedule: ScheduleConfig,
    pub model: FsdConfig,
    pub dims: FsdDims,
    pub prior: PriorMode,
    pub graph_fingerprint: String,
    /// Number of completed epochs.
    pub epoch: usize,
    pub loss_history: Vec<f64>,
    pub params: ParamStore<T>,
    pub optimizer: Adam<T>,
}

impl<T: Scalar> Checkpoint<T> {
    pub fn capture(
        model: &FsdModel<T>,
        optimizer: &Adam<T>,
        schedule: ScheduleConfig,
        prior: PriorMode,
        epoch: usize,
        loss_history: Vec<f64>,
    ) -> Self {
        Checkpoint {
            format: CHECKPOINT_FORMAT.to_string(),
            schedule,
            model: model.config(),
            dims: model.dims(),
            prior,
            graph_fingerprint: model.graph_fingerprint().to_string(),
            epoch,
            loss_history,
            params: model.params.clone(),
            optimizer: optimizer.clone(),
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string(self)?;
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let ck: Self = serde_json::from_str(&text)
            .map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
        if ck.format != CHECKPOINT_FORMAT {
            return Err(Error::Checkpoint(format!(
                "unsupported format `{}` (expected `{CHECKPOINT_FORMAT}`)",
                ck.format
            )));
        }
        Ok(ck)
    }

    /// Rebuilds the model, checking the graph and the parameter manifest.
    pub fn restore(&self, graph: &SensorGraph<T>) -> Result<FsdModel<T>> {
        let fp = graph.fingerprint();
        if fp != self.graph_fingerprint {
            return Err(Error::Checkpoint(format!(
                "graph fingerprint {fp} does not match checkpoint {}",
                self.graph_fingerprint
            )));
        }
        let reference = FsdModel::new(self.model, self.dims, graph, &mut RngStream::new(0, 0))?;
        let want = reference.params.manifest();
        let got = self.params.manifest();
        if want != got {
            let first = want
                .iter()
                .zip(&got)
                .find(|(a, b)| a != b)
                .map(|(a, b)| format!("{} {:?} vs {} {:?}", a.0, a.1, b.0, b.1))
                .unwrap_or_else(|| format!("{} entries vs {}", want.len(), got.len()));
            return Err(Error::Checkpoint(format!(
                "parameter manifest mismatch: {first}"
            )));
        }
        FsdModel::with_params(self.model, self.dims, graph, self.params.clone())
    }
}
