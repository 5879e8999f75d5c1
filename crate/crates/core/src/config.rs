//! Run configuration: one JSON document, validated before any compute.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::datasets::{SeriesFormat, SynthConfig, WindowSpec};
use crate::error::{Error, Result};
use crate::fsd::FsdConfig;
use crate::graph::DistanceMetric;
use crate::ode_prior::OdeConfig;
use crate::resfusion::{PriorMode, SamplerConfig, TrainConfig};
use crate::schedule::ScheduleConfig;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Precision {
    F32,
    #[default]
    F64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    /// Series file; when absent the synthetic generator is used.
    pub path: Option<PathBuf>,
    pub format: SeriesFormat,
    pub synth: SynthConfig,
    pub windows: WindowSpec,
    /// Window stride for validation and test windows (defaults to `windows.stride`).
    pub eval_stride: Option<usize>,
    pub impute_window_hours: f64,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            path: None,
            format: SeriesFormat::Long,
            synth: SynthConfig::default(),
            windows: WindowSpec::default(),
            eval_stride: None,
            impute_window_hours: 24.0,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GraphConfig {
    /// `node_id,x,y` or `node_id,lat,lon` file.
    pub coords: Option<PathBuf>,
    /// Headerless dense adjacency, rows in node order.
    pub adjacency: Option<PathBuf>,
    pub metric: Option<DistanceMetric>,
    pub kernel_width: Option<f64>,
    pub threshold: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub precision: Precision,
    pub data: DataConfig,
    pub graph: GraphConfig,
    pub schedule: ScheduleConfig,
    pub ode: OdeConfig,
    pub model: FsdConfig,
    pub train: TrainConfig,
    pub sampling: SamplerConfig,
    /// Source of the preliminary forecast fed to the denoiser.
    pub prior: PriorMode,
    pub output_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            precision: Precision::F64,
            data: DataConfig::default(),
            graph: GraphConfig::default(),
            schedule: ScheduleConfig::default(),
            ode: OdeConfig::default(),
            model: FsdConfig::default(),
            train: TrainConfig::default(),
            sampling: SamplerConfig::default(),
            prior: PriorMode::Ode,
            output_dir: PathBuf::from("runs"),
        }
    }
}

fn config_error(e: serde_json::Error) -> Error {
    Error::config("<document>", e.to_string())
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        Self::from_value(serde_json::from_str(text).map_err(config_error)?)
    }

    pub fn from_value(v: Value) -> Result<Self> {
        let cfg: RunConfig = serde_json::from_value(v).map_err(config_error)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::config(path.display().to_string(), e.to_string()))?;
        Self::from_json(&text)
    }

    /// Loads an optional file, then applies `key=value` overrides on dotted paths.
    /// Values parse as JSON when possible and fall back to plain strings.
    pub fn resolve(path: Option<&Path>, overrides: &[String], seed: Option<u64>) -> Result<Self> {
        let mut v = match path {
            Some(p) => {
                let text = fs::read_to_string(p)
                    .map_err(|e| Error::config(p.display().to_string(), e.to_string()))?;
                serde_json::from_str(&text).map_err(config_error)?
            }
            None => serde_json::to_value(RunConfig::default())?,
        };
        for o in overrides {
            apply_override(&mut v, o)?;
        }
        if let Some(s) = seed {
            v["seed"] = Value::from(s);
        }
        Self::from_value(v)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }

    pub fn eval_windows(&self) -> WindowSpec {
        WindowSpec {
            stride: self.data.eval_stride.unwrap_or(self.data.windows.stride),
            ..self.data.windows
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.data.windows.validate()?;
        if self.data.eval_stride == Some(0) {
            return Err(Error::config("data.eval_stride", "must be at least 1"));
        }
        if !(self.data.impute_window_hours > 0.0) {
            return Err(Error::config(
                "data.impute_window_hours",
                "must be positive",
            ));
        }
        if self.data.path.is_none() {
            self.data.synth.validate()?;
        }
        if self.graph.coords.is_some() && self.graph.adjacency.is_some() {
            return Err(Error::config(
                "graph",
                "give either coords or adjacency, not both",
            ));
        }
        if self.data.path.is_some() && self.graph.coords.is_none() && self.graph.adjacency.is_none()
        {
            return Err(Error::config(
                "graph",
                "a series file needs graph.coords or graph.adjacency",
            ));
        }
        if let Some(w) = self.graph.kernel_width {
            if !(w > 0.0) {
                return Err(Error::config("graph.kernel_width", "must be positive"));
            }
        }
        if let Some(t) = self.graph.threshold {
            if !(0.0..=1.0).contains(&t) {
                return Err(Error::config("graph.threshold", "must lie in [0, 1]"));
            }
        }
        self.schedule.build::<f64>()?;
        self.ode.validate()?;
        self.model.validate()?;
        self.train.validate()?;
        self.sampling.validate()?;
        Ok(())
    }
}

fn apply_override(root: &mut Value, assignment: &str) -> Result<()> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| Error::config(assignment, "override must look like key=value"))?;
    let key = key.trim();
    if key.is_empty() {
        return Err(Error::config(assignment, "empty key"));
    }
    let value =
        serde_json::from_str::<Value>(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    let mut node = root;
    let parts: Vec<&str> = key.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        let obj = node.as_object_mut().ok_or_else(|| {
            Error::config(key, format!("`{}` is not an object", parts[..i].join(".")))
        })?;
        if i + 1 == parts.len() {
            obj.insert(part.to_string(), value);
            return Ok(());
        }
        node = obj
            .entry(part.to_string())
            .or_insert_with(|| Value::Object(Default::default()));
        if node.is_null() {
            *node = Value::Object(Default::default());
        }
    }
    Ok(())
}
