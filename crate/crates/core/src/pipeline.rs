//! End-to-end commands: data preparation, training, sampling, evaluation,
//! schedule analysis, synthetic data export and the diffusion-only forecast.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};

use crate::config::{Precision, RunConfig};
use crate::datasets::{
    format_timestamp, impute_rolling_mean, normalize, read_series, split_windows, synth_generate,
    windows, write_series, NormStats, SeriesStore, Split, Splits, WindowSpec,
};
use crate::error::{Error, Result};
use crate::fsd::{FsdDims, FsdModel};
use crate::graph::{
    read_coords_csv, read_matrix_csv, write_matrix_csv, DistanceMetric, SensorGraph,
};
use crate::metrics::ScoreReport;
use crate::numerics::{Adam, RngStream, Tensor};
use crate::ode_prior::{horizon_times, solve_dopri5};
use crate::resfusion::{
    conditioning_input, sample_ensemble, train_epoch, Checkpoint, PriorMode, TrainingWindows,
};
use crate::scalar::Scalar;
use crate::schedule::{accelerated_step_grid, approx_step, NoiseSchedule};

// Independent child streams of the run seed.
const STREAM_DATA: u64 = 1;
const STREAM_INIT: u64 = 2;
const STREAM_TRAIN: u64 = 3;
const STREAM_SAMPLE: u64 = 4;

fn root_stream(cfg: &RunConfig) -> RngStream {
    RngStream::new(cfg.seed, 0)
}

/// Point forecasts evaluated without the denoiser.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Baseline {
    /// Graph diffusion forecast from the last observation.
    Ode,
    /// Last observation repeated over the horizon.
    Persistence,
}

/// Creates `<output_dir>/<command>-<UTC timestamp>[-n]` and copies the resolved config into it.
pub fn create_run_dir(cfg: &RunConfig, command: &str) -> Result<PathBuf> {
    let secs = SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs() as i64)
        .unwrap_or(0);
    let stamp: String = format_timestamp(secs)
        .chars()
        .filter_map(|c| match c {
            '-' | ':' => None,
            ' ' => Some('T'),
            c => Some(c),
        })
        .collect();
    let base = cfg.output_dir.join(format!("{command}-{stamp}"));
    let mut dir = base.clone();
    let mut n = 1;
    while dir.exists() {
        dir = PathBuf::from(format!("{}-{n}", base.display()));
        n += 1;
    }
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    write_text(&dir.join("config.json"), &cfg.to_json()?)?;
    Ok(dir)
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn write_json<S: Serialize>(path: &Path, value: &S) -> Result<()> {
    write_text(path, &(serde_json::to_string_pretty(value)? + "\n"))
}

/// Imputed series in physical units, its normalized copy and the graph.
#[derive(Clone, Debug)]
pub struct Dataset<T> {
    pub raw: SeriesStore<T>,
    pub normalized: SeriesStore<T>,
    pub stats: NormStats,
    pub graph: SensorGraph<T>,
    pub splits: Splits,
}

fn file_graph<T: Scalar>(cfg: &RunConfig, store: &SeriesStore<T>) -> Result<SensorGraph<T>> {
    if let Some(path) = &cfg.graph.adjacency {
        let adj = read_matrix_csv::<T>(path)?;
        if adj.shape() != [store.n_nodes(), store.n_nodes()] {
            return Err(Error::Shape {
                expected: vec![store.n_nodes(), store.n_nodes()],
                actual: adj.shape().to_vec(),
            });
        }
        return SensorGraph::from_adjacency(adj);
    }
    let path = cfg.graph.coords.as_ref().ok_or_else(|| {
        Error::config(
            "graph",
            "a series file needs graph.coords or graph.adjacency",
        )
    })?;
    let nc = read_coords_csv(path)?;
    let coords = store
        .node_ids
        .iter()
        .map(|id| {
            nc.ids
                .iter()
                .position(|x| x == id)
                .map(|i| nc.coords[i])
                .ok_or_else(|| {
                    Error::Parse(format!(
                        "{}: no coordinates for node `{id}`",
                        path.display()
                    ))
                })
        })
        .collect::<Result<Vec<_>>>()?;
    let metric = cfg.graph.metric.unwrap_or(if nc.geographic {
        DistanceMetric::Haversine
    } else {
        DistanceMetric::Euclidean
    });
    SensorGraph::from_coords(
        &coords,
        metric,
        cfg.graph.kernel_width.map(T::lit),
        T::lit(cfg.graph.threshold.unwrap_or(0.1)),
    )
}

/// Loads (or generates) the series, fills gaps and normalizes with train statistics.
pub fn load_dataset<T: Scalar>(cfg: &RunConfig) -> Result<Dataset<T>> {
    let (store, graph) = match &cfg.data.path {
        Some(path) => {
            let store = read_series::<T>(path, cfg.data.format)?;
            let graph = file_graph(cfg, &store)?;
            (store, graph)
        }
        None => {
            let d = synth_generate::<T>(&cfg.data.synth, &root_stream(cfg).fork(STREAM_DATA))?;
            (d.store, d.graph)
        }
    };
    let splits = Splits::new(store.len(), &cfg.data.windows);
    let raw = if store.missing_count() > 0 {
        impute_rolling_mean(&store, cfg.data.impute_window_hours, splits.train_end)
    } else {
        store
    };
    let (normalized, stats) = normalize(&raw, splits.train_end)?;
    Ok(Dataset {
        raw,
        normalized,
        stats,
        graph,
        splits,
    })
}

/// Windows of one split in the layout the denoiser consumes.
#[derive(Clone, Debug)]
pub struct WindowSet<T> {
    pub starts: Vec<usize>,
    /// Normalized clean windows `[W, T, N, C]`.
    pub x0: Tensor<T>,
    /// Normalized conditioning inputs `[W, T, N, C]`.
    pub x_a: Tensor<T>,
    /// Future values in physical units, one `[H′, N, C]` per window.
    pub truth: Vec<Tensor<T>>,
    /// Diffusion forecasts in physical units.
    pub ode: Vec<Tensor<T>>,
    /// Last observed state in physical units, `[N, C]`.
    pub last: Vec<Tensor<T>>,
}

impl<T: Scalar> WindowSet<T> {
    pub fn len(&self) -> usize {
        self.starts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.starts.is_empty()
    }
}

/// The diffusion prior runs on normalized values from the last observed step.
pub fn build_windows<T: Scalar>(
    ds: &Dataset<T>,
    cfg: &RunConfig,
    split: Split,
    spec: &WindowSpec,
    prior: PriorMode,
) -> Result<WindowSet<T>> {
    let starts = split_windows(&ds.splits, split, spec)?;
    let times = horizon_times::<T>(spec.horizon);
    let pairs = windows(&ds.normalized, &starts, spec)?;
    let (mut x0, mut xa) = (Vec::new(), Vec::new());
    let (mut truth, mut ode, mut last) = (Vec::new(), Vec::new(), Vec::new());
    for (&start, (hist, fut)) in starts.iter().zip(&pairs) {
        let forecast =
            solve_dopri5(&hist.index0(spec.history - 1), &ds.graph, &cfg.ode, &times)?.values;
        let prior_future = match prior {
            PriorMode::Ode => forecast.clone(),
            PriorMode::Zeros => Tensor::zeros(fut.shape()),
        };
        let (x_a, _) = conditioning_input(hist, &prior_future)?;
        x0.push(Tensor::concat(&[hist, fut], 0)?);
        xa.push(x_a);
        truth.push(ds.raw.slice(start + spec.history, spec.horizon)?);
        ode.push(ds.stats.denormalize(&forecast)?);
        last.push(ds.raw.values.index0(start + spec.history - 1));
    }
    let stack = |v: &[Tensor<T>]| Tensor::stack(&v.iter().collect::<Vec<_>>());
    Ok(WindowSet {
        x0: stack(&x0)?,
        x_a: stack(&xa)?,
        starts,
        truth,
        ode,
        last,
    })
}

fn dims(cfg: &RunConfig, ds_nodes: usize, ds_channels: usize) -> FsdDims {
    FsdDims {
        window: cfg.data.windows.window_len(),
        history: cfg.data.windows.history,
        nodes: ds_nodes,
        channels: ds_channels,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainOutcome {
    pub checkpoint: PathBuf,
    pub losses: Vec<f64>,
    pub windows: usize,
}

/// Trains for `train.epochs` epochs (continuing from `resume` when given) and
/// writes `checkpoint.json` and `losses.csv` into `run_dir`.
pub fn cmd_train(cfg: &RunConfig, resume: Option<&Path>, run_dir: &Path) -> Result<TrainOutcome> {
    match cfg.precision {
        Precision::F32 => train_impl::<f32>(cfg, resume, run_dir),
        Precision::F64 => train_impl::<f64>(cfg, resume, run_dir),
    }
}

fn train_impl<T: Scalar>(
    cfg: &RunConfig,
    resume: Option<&Path>,
    run_dir: &Path,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let ds = load_dataset::<T>(cfg)?;
    let schedule: NoiseSchedule<T> = cfg.schedule.build()?;
    let (mut model, mut opt, mut losses, prior) = match resume {
        Some(path) => {
            let ck = Checkpoint::<T>::load(path)?;
            if ck.schedule != cfg.schedule || ck.model != cfg.model {
                return Err(Error::Checkpoint(
                    "schedule or model settings differ from the run config".into(),
                ));
            }
            let model = ck.restore(&ds.graph)?;
            (model, ck.optimizer, ck.loss_history, ck.prior)
        }
        None => {
            let d = dims(cfg, ds.raw.n_nodes(), ds.raw.n_channels());
            let model = FsdModel::new(
                cfg.model,
                d,
                &ds.graph,
                &mut root_stream(cfg).fork(STREAM_INIT),
            )?;
            let opt = Adam::new(cfg.train.optimizer, &model.params);
            (model, opt, Vec::new(), cfg.prior)
        }
    };
    let ws = build_windows(&ds, cfg, Split::Train, &cfg.data.windows, prior)?;
    let data = TrainingWindows::new(ws.x0, ws.x_a, cfg.data.windows.history)?;
    let stream = root_stream(cfg).fork(STREAM_TRAIN);
    for epoch in losses.len()..cfg.train.epochs {
        let loss = train_epoch(
            &mut model, &mut opt, &data, &schedule, prior, &cfg.train, epoch, &stream,
        )?;
        log::info!("epoch {:>4}  loss {loss:.6}", epoch + 1);
        losses.push(loss);
    }
    let ck = Checkpoint::capture(
        &model,
        &opt,
        cfg.schedule,
        prior,
        losses.len(),
        losses.clone(),
    );
    let path = run_dir.join("checkpoint.json");
    ck.save(&path)?;
    let mut w = csv::Writer::from_path(run_dir.join("losses.csv"))?;
    w.write_record(["epoch", "loss"])?;
    for (e, l) in losses.iter().enumerate() {
        w.write_record([(e + 1).to_string(), l.to_string()])?;
    }
    w.flush().map_err(|e| Error::io(run_dir, e))?;
    Ok(TrainOutcome {
        checkpoint: path,
        losses,
        windows: data.len(),
    })
}

/// Bookkeeping from one sampling pass.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleSummary {
    pub windows: usize,
    pub samples: usize,
    pub start_step: usize,
    pub accelerated_step: usize,
    pub denoiser_invocations: usize,
    pub invocations_per_window: usize,
}

struct Ensembles<T> {
    /// `[K, H′, N, C]` in physical units, one per window.
    samples: Vec<Tensor<T>>,
    windows: WindowSet<T>,
    summary: SampleSummary,
}

fn sample_windows<T: Scalar>(
    cfg: &RunConfig,
    checkpoint: &Path,
) -> Result<(Dataset<T>, Ensembles<T>)> {
    cfg.validate()?;
    let ds = load_dataset::<T>(cfg)?;
    let ck = Checkpoint::<T>::load(checkpoint)?;
    let model = ck.restore(&ds.graph)?;
    let d = dims(cfg, ds.raw.n_nodes(), ds.raw.n_channels());
    if model.dims() != d {
        return Err(Error::Checkpoint(format!(
            "checkpoint dims {:?} do not match data {d:?}",
            model.dims()
        )));
    }
    let schedule: NoiseSchedule<T> = ck.schedule.build()?;
    let spec = cfg.eval_windows();
    let ws = build_windows(&ds, cfg, Split::Test, &spec, ck.prior)?;
    let stream = root_stream(cfg).fork(STREAM_SAMPLE);
    let ens = sample_ensemble(
        &model,
        &ws.x_a,
        spec.history,
        &schedule,
        ck.prior,
        &cfg.sampling,
        &stream,
    )?;
    let samples = ens
        .iter()
        .map(|e| ds.stats.denormalize(&e.samples))
        .collect::<Result<Vec<_>>>()?;
    let per_window = ens.first().map(|e| e.denoiser_invocations).unwrap_or(0);
    let summary = SampleSummary {
        windows: ens.len(),
        samples: cfg.sampling.samples,
        start_step: ens.first().map(|e| e.start_step).unwrap_or(0),
        accelerated_step: schedule.accelerated_step(),
        denoiser_invocations: ens.iter().map(|e| e.denoiser_invocations).sum(),
        invocations_per_window: per_window,
    };
    Ok((
        ds,
        Ensembles {
            samples,
            windows: ws,
            summary,
        },
    ))
}

fn write_ensembles<T: Scalar>(
    path: &Path,
    starts: &[usize],
    samples: &[Tensor<T>],
    ds: &Dataset<T>,
) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record([
        "window_start",
        "sample",
        "horizon",
        "node_id",
        "channel",
        "value",
    ])?;
    for (&start, ens) in starts.iter().zip(samples) {
        let s = ens.shape();
        let (k, hp, n, c) = (s[0], s[1], s[2], s[3]);
        for kk in 0..k {
            for h in 0..hp {
                for node in 0..n {
                    for ch in 0..c {
                        w.write_record([
                            start.to_string(),
                            kk.to_string(),
                            (h + 1).to_string(),
                            ds.raw.node_ids[node].clone(),
                            ds.raw.channels[ch].clone(),
                            ens.get(&[kk, h, node, ch]).to_string(),
                        ])?;
                    }
                }
            }
        }
    }
    w.flush().map_err(|e| Error::io(path, e))
}

fn write_points<T: Scalar>(
    path: &Path,
    starts: &[usize],
    points: &[Tensor<T>],
    ds: &Dataset<T>,
) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["window_start", "horizon", "node_id", "channel", "value"])?;
    for (&start, p) in starts.iter().zip(points) {
        let s = p.shape();
        for h in 0..s[0] {
            for node in 0..s[1] {
                for ch in 0..s[2] {
                    w.write_record([
                        start.to_string(),
                        (h + 1).to_string(),
                        ds.raw.node_ids[node].clone(),
                        ds.raw.channels[ch].clone(),
                        p.get(&[h, node, ch]).to_string(),
                    ])?;
                }
            }
        }
    }
    w.flush().map_err(|e| Error::io(path, e))
}

fn ensemble_mean<T: Scalar>(ens: &Tensor<T>) -> Tensor<T> {
    let k = ens.shape()[0];
    let inner = ens.len() / k;
    let mut acc = Tensor::zeros(&ens.shape()[1..]);
    for kk in 0..k {
        for (a, &v) in acc
            .data_mut()
            .iter_mut()
            .zip(&ens.data()[kk * inner..(kk + 1) * inner])
        {
            *a += v;
        }
    }
    acc.scale(T::one() / T::from_usize_lossy(k))
}

/// Samples K forecasts for every test window; writes `samples.csv`, `mean.csv`
/// and `sampling.json`.
pub fn cmd_sample(cfg: &RunConfig, checkpoint: &Path, run_dir: &Path) -> Result<SampleSummary> {
    match cfg.precision {
        Precision::F32 => sample_impl::<f32>(cfg, checkpoint, run_dir),
        Precision::F64 => sample_impl::<f64>(cfg, checkpoint, run_dir),
    }
}

fn sample_impl<T: Scalar>(
    cfg: &RunConfig,
    checkpoint: &Path,
    run_dir: &Path,
) -> Result<SampleSummary> {
    let (ds, e) = sample_windows::<T>(cfg, checkpoint)?;
    write_ensembles(
        &run_dir.join("samples.csv"),
        &e.windows.starts,
        &e.samples,
        &ds,
    )?;
    let means: Vec<Tensor<T>> = e.samples.iter().map(ensemble_mean).collect();
    write_points(&run_dir.join("mean.csv"), &e.windows.starts, &means, &ds)?;
    write_json(&run_dir.join("sampling.json"), &e.summary)?;
    log::info!(
        "start step {} (accelerated {}), {} denoiser invocations over {} windows",
        e.summary.start_step,
        e.summary.accelerated_step,
        e.summary.denoiser_invocations,
        e.summary.windows
    );
    Ok(e.summary)
}

fn baseline_points<T: Scalar>(ws: &WindowSet<T>, baseline: Baseline) -> Vec<Tensor<T>> {
    match baseline {
        Baseline::Ode => ws.ode.clone(),
        Baseline::Persistence => ws
            .truth
            .iter()
            .zip(&ws.last)
            .map(|(y, last)| {
                let copies: Vec<&Tensor<T>> = (0..y.shape()[0]).map(|_| last).collect();
                Tensor::stack(&copies).expect("equal shapes")
            })
            .collect(),
    }
}

/// Scores the trained model (or a point baseline) on the test windows and
/// writes `scores.json` and `scores.csv`; `horizon_plot.csv` with `emit_plots`.
pub fn cmd_evaluate(
    cfg: &RunConfig,
    checkpoint: Option<&Path>,
    baseline: Option<Baseline>,
    emit_plots: bool,
    run_dir: &Path,
) -> Result<ScoreReport> {
    match cfg.precision {
        Precision::F32 => evaluate_impl::<f32>(cfg, checkpoint, baseline, emit_plots, run_dir),
        Precision::F64 => evaluate_impl::<f64>(cfg, checkpoint, baseline, emit_plots, run_dir),
    }
}

fn evaluate_impl<T: Scalar>(
    cfg: &RunConfig,
    checkpoint: Option<&Path>,
    baseline: Option<Baseline>,
    emit_plots: bool,
    run_dir: &Path,
) -> Result<ScoreReport> {
    let (ds, samples, truth) = match (baseline, checkpoint) {
        (Some(b), _) => {
            cfg.validate()?;
            let ds = load_dataset::<T>(cfg)?;
            let ws = build_windows(&ds, cfg, Split::Test, &cfg.eval_windows(), cfg.prior)?;
            let points = baseline_points(&ws, b);
            let samples = points
                .iter()
                .map(|p| Tensor::stack(&[p]))
                .collect::<Result<Vec<_>>>()?;
            (ds, samples, ws.truth)
        }
        (None, Some(ck)) => {
            let (ds, e) = sample_windows::<T>(cfg, ck)?;
            write_json(&run_dir.join("sampling.json"), &e.summary)?;
            (ds, e.samples, e.windows.truth)
        }
        (None, None) => {
            return Err(Error::config(
                "checkpoint",
                "evaluate needs a checkpoint or a baseline",
            ))
        }
    };
    let report = ScoreReport::from_ensembles(&samples, &truth, &ds.raw.channels)?;
    report.validate()?;
    report.write_json(&run_dir.join("scores.json"))?;
    report.write_csv(&run_dir.join("scores.csv"))?;
    if emit_plots {
        report.write_horizon_plot(&run_dir.join("horizon_plot.csv"))?;
    }
    Ok(report)
}

/// Writes the accelerated-step grid (`accelerated_steps.csv`) and the
/// closed-form approximation error (`approximation.csv`).
pub fn cmd_schedule(
    steps: &[usize],
    betas: &[f64],
    beta_start: f64,
    run_dir: &Path,
) -> Result<Vec<Vec<usize>>> {
    let grid = accelerated_step_grid(betas, steps, beta_start)?;
    let mut w = csv::Writer::from_path(run_dir.join("accelerated_steps.csv"))?;
    let mut header = vec!["beta_end".to_string()];
    header.extend(steps.iter().map(|s| s.to_string()));
    w.write_record(&header)?;
    for (b, row) in betas.iter().zip(&grid) {
        let mut rec = vec![b.to_string()];
        rec.extend(row.iter().map(|s| s.to_string()));
        w.write_record(&rec)?;
    }
    w.flush().map_err(|e| Error::io(run_dir, e))?;

    let mut w = csv::Writer::from_path(run_dir.join("approximation.csv"))?;
    w.write_record(["steps", "beta_end", "exact", "approx", "rel_error"])?;
    for (b, row) in betas.iter().zip(&grid) {
        for (&s, &exact) in steps.iter().zip(row) {
            let a = approx_step(s, *b);
            w.write_record([
                s.to_string(),
                b.to_string(),
                exact.to_string(),
                format!("{a:.4}"),
                format!("{:.6}", (a - exact as f64).abs() / exact as f64),
            ])?;
        }
    }
    w.flush().map_err(|e| Error::io(run_dir, e))?;
    Ok(grid)
}

/// Exports the synthetic series, node coordinates, adjacency and generator settings.
pub fn cmd_synth(cfg: &RunConfig, run_dir: &Path) -> Result<PathBuf> {
    cfg.data.synth.validate()?;
    let d = synth_generate::<f64>(&cfg.data.synth, &root_stream(cfg).fork(STREAM_DATA))?;
    let series = run_dir.join("series.csv");
    write_series(&d.store, &series, cfg.data.format)?;
    let mut w = csv::Writer::from_path(run_dir.join("coords.csv"))?;
    w.write_record(["node_id", "x", "y"])?;
    for (id, (x, y)) in d.store.node_ids.iter().zip(&d.coords) {
        w.write_record([id.clone(), x.to_string(), y.to_string()])?;
    }
    w.flush().map_err(|e| Error::io(run_dir, e))?;
    write_matrix_csv(&run_dir.join("adjacency.csv"), d.graph.adjacency())?;
    write_json(&run_dir.join("synth.json"), &cfg.data.synth)?;
    Ok(series)
}

/// Diffusion-only forecasts for the test windows (`ode_forecast.csv`) with their scores.
pub fn cmd_forecast_ode(cfg: &RunConfig, run_dir: &Path) -> Result<ScoreReport> {
    cfg.validate()?;
    let ds = load_dataset::<f64>(cfg)?;
    let ws = build_windows(&ds, cfg, Split::Test, &cfg.eval_windows(), PriorMode::Ode)?;
    write_points(&run_dir.join("ode_forecast.csv"), &ws.starts, &ws.ode, &ds)?;
    let samples = ws
        .ode
        .iter()
        .map(|p| Tensor::stack(&[p]))
        .collect::<Result<Vec<_>>>()?;
    let report = ScoreReport::from_ensembles(&samples, &ws.truth, &ds.raw.channels)?;
    report.write_json(&run_dir.join("scores.json"))?;
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_config() -> RunConfig {
        RunConfig::resolve(
            None,
            &[
                "data.synth.nodes=4".into(),
                "data.synth.steps=160".into(),
                "data.windows.history=4".into(),
                "data.windows.horizon=4".into(),
                "data.windows.stride=4".into(),
                "data.eval_stride=8".into(),
                "model.blocks=1".into(),
                "model.hidden=8".into(),
                "model.heads=2".into(),
                "schedule.steps=20".into(),
                "train.epochs=3".into(),
                "train.batch_size=8".into(),
                "sampling.samples=2".into(),
            ],
            Some(5),
        )
        .unwrap()
    }

    #[test]
    fn windows_split_and_prior() {
        let cfg = tiny_config();
        let ds = load_dataset::<f64>(&cfg).unwrap();
        let ws =
            build_windows(&ds, &cfg, Split::Test, &cfg.eval_windows(), PriorMode::Ode).unwrap();
        let (b, e) = ds.splits.range(Split::Test);
        assert!(ws.starts.iter().all(|&s| s >= b && s + 8 <= e));
        // history of x_a equals history of x0, future holds the normalized forecast
        let w0 = ws.x_a.index0(0);
        assert_eq!(
            w0.narrow(0, 0, 4).unwrap(),
            ws.x0.index0(0).narrow(0, 0, 4).unwrap()
        );
        let fut = ds.stats.normalize(&ws.ode[0]).unwrap();
        assert!(w0.narrow(0, 4, 4).unwrap().sub(&fut).unwrap().max_abs() < 1e-12);
        let wz = build_windows(
            &ds,
            &cfg,
            Split::Test,
            &cfg.eval_windows(),
            PriorMode::Zeros,
        )
        .unwrap();
        assert_eq!(wz.x_a.index0(0).narrow(0, 4, 4).unwrap().max_abs(), 0.0);
    }

    #[test]
    fn resume_reproduces_next_epoch() {
        let dir = tempfile::tempdir().unwrap();
        let (a, b, c) = (
            dir.path().join("a"),
            dir.path().join("b"),
            dir.path().join("c"),
        );
        for d in [&a, &b, &c] {
            fs::create_dir_all(d).unwrap();
        }
        let mut two = tiny_config();
        two.train.epochs = 2;
        let full = cmd_train(&tiny_config(), None, &a).unwrap();
        let partial = cmd_train(&two, None, &b).unwrap();
        let resumed = cmd_train(&tiny_config(), Some(&partial.checkpoint), &c).unwrap();
        assert_eq!(full.losses, resumed.losses);
        assert_eq!(
            fs::read(&full.checkpoint).unwrap(),
            fs::read(&resumed.checkpoint).unwrap()
        );
    }

    #[test]
    fn sample_and_evaluate_outputs() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = tiny_config();
        let out = cmd_train(&cfg, None, dir.path()).unwrap();
        let s = cmd_sample(&cfg, &out.checkpoint, dir.path()).unwrap();
        let sch = cfg.schedule.build::<f64>().unwrap();
        assert_eq!(s.start_step, sch.accelerated_step());
        assert_eq!(
            s.invocations_per_window,
            s.start_step * cfg.sampling.samples
        );
        let r = cmd_evaluate(&cfg, Some(&out.checkpoint), None, true, dir.path()).unwrap();
        assert!(r.crps >= 0.0 && r.crps.is_finite());
        for f in [
            "samples.csv",
            "mean.csv",
            "sampling.json",
            "scores.json",
            "scores.csv",
            "horizon_plot.csv",
        ] {
            assert!(dir.path().join(f).exists(), "{f}");
        }
        let p = cmd_evaluate(&cfg, None, Some(Baseline::Persistence), false, dir.path()).unwrap();
        assert_eq!(p.samples, 1);
        assert!((p.crps - p.mae).abs() < 1e-12);
    }

    #[test]
    fn synth_export_reloads() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = tiny_config();
        let series = cmd_synth(&cfg, dir.path()).unwrap();
        let mut file_cfg = cfg.clone();
        file_cfg.data.path = Some(series);
        file_cfg.graph.coords = Some(dir.path().join("coords.csv"));
        let a = load_dataset::<f64>(&cfg).unwrap();
        let b = load_dataset::<f64>(&file_cfg).unwrap();
        assert_eq!(a.graph.fingerprint(), b.graph.fingerprint());
        assert!(a.raw.values.sub(&b.raw.values).unwrap().max_abs() < 1e-12);
        let ode = cmd_forecast_ode(&file_cfg, dir.path()).unwrap();
        assert!(ode.mae > 0.0);
    }

    #[test]
    fn schedule_files() {
        let dir = tempfile::tempdir().unwrap();
        let grid = cmd_schedule(&[200], &[0.2], 1e-4, dir.path()).unwrap();
        assert_eq!(grid, vec![vec![52]]);
        let text = fs::read_to_string(dir.path().join("accelerated_steps.csv")).unwrap();
        assert_eq!(text, "beta_end,200\n0.2,52\n");
    }
}
