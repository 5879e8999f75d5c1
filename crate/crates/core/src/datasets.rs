//! Series ingestion, gap filling, normalization, windowing and a synthetic
//! generator driven by graph diffusion.

use std::collections::HashMap;
use std::path::Path;

use chrono::{DateTime, Datelike, NaiveDateTime, Timelike};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{DistanceMetric, SensorGraph};
use crate::numerics::{RngStream, Tensor};
use crate::ode_prior::closed_form_oracle;
use crate::scalar::Scalar;

/// A `[Ttotal, N, C]` panel of readings with missing markers.
#[derive(Clone, Debug, PartialEq)]
pub struct SeriesStore<T> {
    pub values: Tensor<T>,
    /// `true` where the reading is absent; same layout as `values`.
    pub missing: Vec<bool>,
    /// Seconds since the epoch (or raw integer ticks).
    pub timestamps: Vec<i64>,
    pub node_ids: Vec<String>,
    pub channels: Vec<String>,
}

impl<T: Scalar> SeriesStore<T> {
    pub fn new(
        values: Tensor<T>,
        missing: Vec<bool>,
        timestamps: Vec<i64>,
        node_ids: Vec<String>,
        channels: Vec<String>,
    ) -> Result<Self> {
        let s = values.shape();
        if s.len() != 3
            || s[0] != timestamps.len()
            || s[1] != node_ids.len()
            || s[2] != channels.len()
        {
            return Err(Error::Shape {
                expected: vec![timestamps.len(), node_ids.len(), channels.len()],
                actual: s.to_vec(),
            });
        }
        if missing.len() != values.len() {
            return Err(Error::contract("missing mask does not match values"));
        }
        if timestamps.len() >= 2 {
            let step = timestamps[1] - timestamps[0];
            if step <= 0 || timestamps.windows(2).any(|w| w[1] - w[0] != step) {
                return Err(Error::Parse(
                    "timestamps must be strictly increasing with a uniform interval".into(),
                ));
            }
        }
        Ok(SeriesStore {
            values,
            missing,
            timestamps,
            node_ids,
            channels,
        })
    }

    pub fn len(&self) -> usize {
        self.timestamps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.timestamps.is_empty()
    }

    pub fn n_nodes(&self) -> usize {
        self.node_ids.len()
    }

    pub fn n_channels(&self) -> usize {
        self.channels.len()
    }

    /// Sampling interval in timestamp units (seconds for dated input).
    pub fn interval(&self) -> i64 {
        if self.timestamps.len() >= 2 {
            self.timestamps[1] - self.timestamps[0]
        } else {
            3600
        }
    }

    pub fn missing_count(&self) -> usize {
        self.missing.iter().filter(|&&m| m).count()
    }

    /// Time steps `[start, start+len)` as a `[len, N, C]` tensor.
    pub fn slice(&self, start: usize, len: usize) -> Result<Tensor<T>> {
        self.values.narrow(0, start, len)
    }
}

/// Window lengths and chronological split ratios.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct WindowSpec {
    pub history: usize,
    pub horizon: usize,
    pub stride: usize,
    pub train_ratio: f64,
    pub val_ratio: f64,
    pub test_ratio: f64,
}

impl Default for WindowSpec {
    fn default() -> Self {
        WindowSpec {
            history: 12,
            horizon: 12,
            stride: 1,
            train_ratio: 0.6,
            val_ratio: 0.2,
            test_ratio: 0.2,
        }
    }
}

impl WindowSpec {
    pub fn validate(&self) -> Result<()> {
        if self.history == 0 || self.horizon == 0 {
            return Err(Error::config(
                "windows.history",
                "history and horizon must be at least 1",
            ));
        }
        if self.stride == 0 {
            return Err(Error::config("windows.stride", "must be at least 1"));
        }
        let r = [self.train_ratio, self.val_ratio, self.test_ratio];
        if r.iter().any(|&x| !(x >= 0.0))
            || (r.iter().sum::<f64>() - 1.0).abs() > 1e-9
            || self.train_ratio == 0.0
        {
            return Err(Error::config(
                "windows.train_ratio",
                "split ratios must be non-negative and sum to 1",
            ));
        }
        Ok(())
    }

    pub fn window_len(&self) -> usize {
        self.history + self.horizon
    }
}

/// Chronological split boundaries `[0, train_end) [train_end, val_end) [val_end, total)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Splits {
    pub train_end: usize,
    pub val_end: usize,
    pub total: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Splits {
    pub fn new(total: usize, spec: &WindowSpec) -> Self {
        let train_end = ((total as f64) * spec.train_ratio).floor() as usize;
        let val_end = ((total as f64) * (spec.train_ratio + spec.val_ratio)).floor() as usize;
        Splits {
            train_end,
            val_end: val_end.min(total),
            total,
        }
    }

    pub fn range(&self, split: Split) -> (usize, usize) {
        match split {
            Split::Train => (0, self.train_end),
            Split::Val => (self.train_end, self.val_end),
            Split::Test => (self.val_end, self.total),
        }
    }
}

/// Number of windows of length `window` with the given stride in a segment of `len`.
pub fn window_count(len: usize, window: usize, stride: usize) -> usize {
    if len < window || stride == 0 {
        0
    } else {
        (len - window) / stride + 1
    }
}

/// Start indices of all windows in `[begin, end)`; a window never crosses `end`.
pub fn window_starts(begin: usize, end: usize, spec: &WindowSpec) -> Result<Vec<usize>> {
    spec.validate()?;
    let len = end.saturating_sub(begin);
    let l = spec.window_len();
    if len < l {
        return Err(Error::contract(format!(
            "segment of {len} steps is shorter than one window ({} + {})",
            spec.history, spec.horizon
        )));
    }
    Ok((0..window_count(len, l, spec.stride))
        .map(|i| begin + i * spec.stride)
        .collect())
}

/// Windows of one split.
pub fn split_windows(splits: &Splits, split: Split, spec: &WindowSpec) -> Result<Vec<usize>> {
    let (b, e) = splits.range(split);
    window_starts(b, e, spec)
}

/// `(history [H,N,C], future [H′,N,C])` for each window start.
pub fn windows<T: Scalar>(
    store: &SeriesStore<T>,
    starts: &[usize],
    spec: &WindowSpec,
) -> Result<Vec<(Tensor<T>, Tensor<T>)>> {
    starts
        .iter()
        .map(|&s| {
            if s + spec.window_len() > store.len() {
                return Err(Error::contract(format!(
                    "window at {s} runs past the series end"
                )));
            }
            Ok((
                store.slice(s, spec.history)?,
                store.slice(s + spec.history, spec.horizon)?,
            ))
        })
        .collect()
}

/// Mean of observed train-split readings per channel.
pub fn train_channel_means<T: Scalar>(store: &SeriesStore<T>, train_end: usize) -> Vec<f64> {
    let (n, c) = (store.n_nodes(), store.n_channels());
    let mut sum = vec![0.0; c];
    let mut cnt = vec![0usize; c];
    for t in 0..train_end.min(store.len()) {
        for node in 0..n {
            for ch in 0..c {
                let i = (t * n + node) * c + ch;
                if !store.missing[i] {
                    sum[ch] += store.values.data()[i].to_f64_lossy();
                    cnt[ch] += 1;
                }
            }
        }
    }
    sum.iter()
        .zip(&cnt)
        .map(|(&s, &k)| if k > 0 { s / k as f64 } else { 0.0 })
        .collect()
}

/// Fills each gap with the mean of observed readings within ±`window_hours/2`
/// of it (the gap itself excluded). Gaps with no observed neighbour take the
/// train-split channel mean. Only originally observed readings are averaged.
pub fn impute_rolling_mean<T: Scalar>(
    store: &SeriesStore<T>,
    window_hours: f64,
    train_end: usize,
) -> SeriesStore<T> {
    let half = ((window_hours * 3600.0 / 2.0) / store.interval() as f64)
        .round()
        .max(1.0) as usize;
    let fallback = train_channel_means(store, train_end);
    let (tt, n, c) = (store.len(), store.n_nodes(), store.n_channels());
    let mut out = store.clone();
    for node in 0..n {
        for ch in 0..c {
            let idx = |t: usize| (t * n + node) * c + ch;
            // prefix sums over observed readings for O(1) window means
            let mut sum = vec![0.0; tt + 1];
            let mut cnt = vec![0usize; tt + 1];
            for t in 0..tt {
                let i = idx(t);
                let obs = !store.missing[i];
                sum[t + 1] = sum[t]
                    + if obs {
                        store.values.data()[i].to_f64_lossy()
                    } else {
                        0.0
                    };
                cnt[t + 1] = cnt[t] + usize::from(obs);
            }
            for t in 0..tt {
                let i = idx(t);
                if !store.missing[i] {
                    continue;
                }
                let lo = t.saturating_sub(half);
                let hi = (t + half + 1).min(tt);
                let k = cnt[hi] - cnt[lo];
                let v = if k > 0 {
                    (sum[hi] - sum[lo]) / k as f64
                } else {
                    fallback[ch]
                };
                out.values.data_mut()[i] = T::lit(v);
                out.missing[i] = false;
            }
        }
    }
    out
}

/// Per-channel statistics fitted on the train split.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl NormStats {
    /// Population mean and standard deviation over time `[0, train_end)` and all nodes.
    pub fn fit<T: Scalar>(values: &Tensor<T>, train_end: usize) -> Result<Self> {
        let s = values.shape();
        let c = s[2];
        let rows = train_end.min(s[0]) * s[1];
        if rows == 0 {
            return Err(Error::contract("empty train split"));
        }
        let mut mean = vec![0.0; c];
        for r in 0..rows {
            for ch in 0..c {
                mean[ch] += values.data()[r * c + ch].to_f64_lossy();
            }
        }
        mean.iter_mut().for_each(|m| *m /= rows as f64);
        let mut var = vec![0.0; c];
        for r in 0..rows {
            for ch in 0..c {
                let d = values.data()[r * c + ch].to_f64_lossy() - mean[ch];
                var[ch] += d * d;
            }
        }
        let std: Vec<f64> = var.iter().map(|v| (v / rows as f64).sqrt()).collect();
        if let Some(ch) = std.iter().position(|&s| s < 1e-8) {
            return Err(Error::Degenerate(format!(
                "channel {ch} is constant on the train split"
            )));
        }
        Ok(NormStats { mean, std })
    }

    fn apply<T: Scalar>(&self, x: &Tensor<T>, forward: bool) -> Result<Tensor<T>> {
        let c = *x.shape().last().unwrap_or(&0);
        if c != self.mean.len() {
            return Err(Error::Shape {
                expected: vec![self.mean.len()],
                actual: x.shape().to_vec(),
            });
        }
        let mut out = x.clone();
        for (i, v) in out.data_mut().iter_mut().enumerate() {
            let ch = i % c;
            let (m, s) = (T::lit(self.mean[ch]), T::lit(self.std[ch]));
            *v = if forward { (*v - m) / s } else { *v * s + m };
        }
        Ok(out)
    }

    /// `(x − μ_c)/σ_c` along the trailing channel axis.
    pub fn normalize<T: Scalar>(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        self.apply(x, true)
    }

    pub fn denormalize<T: Scalar>(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        self.apply(x, false)
    }
}

/// Normalizes a gap-free store with train-split statistics.
pub fn normalize<T: Scalar>(
    store: &SeriesStore<T>,
    train_end: usize,
) -> Result<(SeriesStore<T>, NormStats)> {
    if store.missing.iter().any(|&m| m) {
        return Err(Error::contract("normalize needs an imputed store"));
    }
    let stats = NormStats::fit(&store.values, train_end)?;
    let mut out = store.clone();
    out.values = stats.normalize(&store.values)?;
    Ok((out, stats))
}

/// Parameters of the synthetic generator.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub nodes: usize,
    pub channels: usize,
    pub steps: usize,
    /// Diffusion coefficient of the latent dynamics.
    pub k_true: f64,
    /// Seasonal amplitude per channel (cycled when shorter than `channels`).
    pub seasonal_amplitude: Vec<f64>,
    pub seasonal_period: f64,
    pub noise_std: f64,
    /// Steps between random re-excitations of the latent state; 0 disables them.
    pub shock_interval: usize,
    pub shock_std: f64,
    /// Gaussian-kernel threshold for the generated graph.
    pub graph_threshold: f64,
    /// Interval between samples in seconds.
    pub interval_seconds: i64,
    pub start_timestamp: i64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            nodes: 12,
            channels: 2,
            steps: 2000,
            k_true: 0.1,
            seasonal_amplitude: vec![1.0, 0.6],
            seasonal_period: 24.0,
            noise_std: 0.1,
            shock_interval: 24,
            shock_std: 1.0,
            graph_threshold: 0.1,
            interval_seconds: 3600,
            start_timestamp: 1_577_836_800,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.nodes == 0 || self.channels == 0 || self.steps == 0 {
            return Err(Error::config(
                "data.synth",
                "nodes, channels and steps must be positive",
            ));
        }
        if self.k_true < 0.0 || self.noise_std < 0.0 || self.shock_std < 0.0 {
            return Err(Error::config(
                "data.synth",
                "k_true, noise_std and shock_std must be non-negative",
            ));
        }
        if self.seasonal_period <= 0.0 || self.interval_seconds <= 0 {
            return Err(Error::config(
                "data.synth",
                "seasonal_period and interval_seconds must be positive",
            ));
        }
        Ok(())
    }
}

/// Generated series plus its ingredients.
#[derive(Clone, Debug)]
pub struct SynthData<T> {
    pub store: SeriesStore<T>,
    pub coords: Vec<(f64, f64)>,
    pub graph: SensorGraph<T>,
    /// Latent diffusion trajectory `[Ttotal, N, C]`.
    pub latent: Tensor<T>,
    /// Seasonal component `[Ttotal, N, C]`.
    pub seasonal: Tensor<T>,
}

/// Latent graph diffusion with optional periodic shocks (kept off the Laplacian null space), plus node-phased
/// seasonality and i.i.d. observation noise.
pub fn synth_generate<T: Scalar>(config: &SynthConfig, stream: &RngStream) -> Result<SynthData<T>> {
    config.validate()?;
    let (n, c, tt) = (config.nodes, config.channels, config.steps);
    let mut rng_graph = stream.fork(0);
    let coords: Vec<(f64, f64)> = (0..n)
        .map(|_| (rng_graph.uniform_f64(), rng_graph.uniform_f64()))
        .collect();
    let graph = if n == 1 {
        SensorGraph::from_adjacency(Tensor::zeros(&[1, 1]))?
    } else {
        SensorGraph::from_coords(
            &coords,
            DistanceMetric::Euclidean,
            None,
            T::lit(config.graph_threshold),
        )?
    };

    let k = vec![T::lit(config.k_true); c];
    let mut rng_state = stream.fork(1);
    let mut state: Tensor<T> = rng_state.gaussian(&[n, c]);
    let mut latent = Tensor::zeros(&[tt, n, c]);
    let one = [T::one()];
    for t in 0..tt {
        if t > 0 {
            state = closed_form_oracle(&state, &graph, &k, &one)?
                .values
                .index0(0);
            if config.shock_interval > 0 && t % config.shock_interval == 0 {
                let kick = zero_mean_kick(&graph, rng_state.gaussian(&[n, c]))?;
                state = state.zip_map(&kick, |s, z| s + T::lit(config.shock_std) * z)?;
            }
        }
        latent.data_mut()[t * n * c..(t + 1) * n * c].copy_from_slice(state.data());
    }

    let amps: Vec<f64> = (0..c)
        .map(|ch| {
            if config.seasonal_amplitude.is_empty() {
                0.0
            } else {
                config.seasonal_amplitude[ch % config.seasonal_amplitude.len()]
            }
        })
        .collect();
    let omega = 2.0 * std::f64::consts::PI / config.seasonal_period;
    let seasonal = Tensor::from_fn(&[tt, n, c], |ix| {
        let (x, y) = coords[ix[1]];
        let phase = 1.5 * x + 0.5 * y + 0.7 * ix[2] as f64;
        T::lit(amps[ix[2]] * (omega * ix[0] as f64 + phase).sin())
    });
    let mut rng_noise = stream.fork(2);
    let noise: Tensor<T> = rng_noise.gaussian(&[tt, n, c]);
    let values = Tensor::from_fn(&[tt, n, c], |ix| {
        latent.get(ix) + seasonal.get(ix) + T::lit(config.noise_std) * noise.get(ix)
    });
    let store = SeriesStore::new(
        values,
        vec![false; tt * n * c],
        (0..tt as i64)
            .map(|t| config.start_timestamp + t * config.interval_seconds)
            .collect(),
        (0..n).map(|i| format!("s{i:02}")).collect(),
        (0..c).map(|i| format!("c{i}")).collect(),
    )?;
    Ok(SynthData {
        store,
        coords,
        graph,
        latent,
        seasonal,
    })
}

// Kicks along the Laplacian null space never decay, so they would make the level a
// random walk. Dropping those modes keeps the series stationary.
fn zero_mean_kick<T: Scalar>(graph: &SensorGraph<T>, kick: Tensor<T>) -> Result<Tensor<T>> {
    let lambda = graph.eigenvalues().data().to_vec();
    let mut spec = graph.gft(&kick, 0)?;
    let c = kick.shape()[1];
    for (i, l) in lambda.iter().enumerate() {
        if *l < T::lit(1e-6) {
            spec.data_mut()[i * c..(i + 1) * c]
                .iter_mut()
                .for_each(|v| *v = T::zero());
        }
    }
    graph.igft(&spec, 0)
}

/// CSV layouts for series files.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SeriesFormat {
    /// `timestamp,node_id,channel,value` rows; empty value = missing.
    #[default]
    Long,
    /// `timestamp,<node>:<channel>,…` one row per timestamp.
    Wide,
}

/// Parses integer ticks or `YYYY-MM-DD[ T]HH:MM[:SS]` datetimes to seconds.
pub fn parse_timestamp(s: &str) -> Result<i64> {
    let s = s.trim();
    if let Ok(v) = s.parse::<i64>() {
        return Ok(v);
    }
    for fmt in [
        "%Y-%m-%d %H:%M:%S",
        "%Y-%m-%dT%H:%M:%S",
        "%Y-%m-%d %H:%M",
        "%Y-%m-%dT%H:%M",
    ] {
        if let Ok(dt) = NaiveDateTime::parse_from_str(s, fmt) {
            return Ok(dt.and_utc().timestamp());
        }
    }
    Err(Error::Parse(format!("unrecognized timestamp `{s}`")))
}

/// ISO `YYYY-MM-DD HH:MM:SS` rendering of a seconds timestamp.
pub fn format_timestamp(secs: i64) -> String {
    match DateTime::from_timestamp(secs, 0) {
        Some(dt) => format!(
            "{:04}-{:02}-{:02} {:02}:{:02}:{:02}",
            dt.year(),
            dt.month(),
            dt.day(),
            dt.hour(),
            dt.minute(),
            dt.second()
        ),
        None => secs.to_string(),
    }
}

fn parse_value<T: Scalar>(s: &str, path: &Path) -> Result<Option<T>> {
    let s = s.trim();
    if s.is_empty() || s.eq_ignore_ascii_case("nan") {
        return Ok(None);
    }
    s.parse::<f64>()
        .map(|v| Some(T::lit(v)))
        .map_err(|e| Error::Parse(format!("{}: value `{s}`: {e}", path.display())))
}

fn index_of(list: &mut Vec<String>, lookup: &mut HashMap<String, usize>, key: &str) -> usize {
    if let Some(&i) = lookup.get(key) {
        return i;
    }
    list.push(key.to_string());
    lookup.insert(key.to_string(), list.len() - 1);
    list.len() - 1
}

fn assemble<T: Scalar>(
    entries: Vec<(i64, usize, usize, Option<T>)>,
    nodes: Vec<String>,
    channels: Vec<String>,
) -> Result<SeriesStore<T>> {
    let mut times: Vec<i64> = entries.iter().map(|e| e.0).collect();
    times.sort_unstable();
    times.dedup();
    let pos: HashMap<i64, usize> = times.iter().enumerate().map(|(i, &t)| (t, i)).collect();
    let (n, c) = (nodes.len(), channels.len());
    let mut values = Tensor::zeros(&[times.len(), n, c]);
    let mut missing = vec![true; times.len() * n * c];
    for (t, node, ch, v) in entries {
        let i = (pos[&t] * n + node) * c + ch;
        if let Some(v) = v {
            values.data_mut()[i] = v;
            missing[i] = false;
        }
    }
    SeriesStore::new(values, missing, times, nodes, channels)
}

pub fn read_long_csv<T: Scalar>(path: &Path) -> Result<SeriesStore<T>> {
    let mut rdr = csv::Reader::from_path(path)?;
    let (mut nodes, mut node_ix) = (Vec::new(), HashMap::new());
    let (mut chans, mut chan_ix) = (Vec::new(), HashMap::new());
    let mut entries = Vec::new();
    for rec in rdr.records() {
        let rec = rec?;
        if rec.len() < 4 {
            return Err(Error::Parse(format!(
                "{}: expected timestamp,node_id,channel,value",
                path.display()
            )));
        }
        let t = parse_timestamp(&rec[0])?;
        let node = index_of(&mut nodes, &mut node_ix, rec[1].trim());
        let ch = index_of(&mut chans, &mut chan_ix, rec[2].trim());
        entries.push((t, node, ch, parse_value(&rec[3], path)?));
    }
    assemble(entries, nodes, chans)
}

pub fn read_wide_csv<T: Scalar>(path: &Path) -> Result<SeriesStore<T>> {
    let mut rdr = csv::Reader::from_path(path)?;
    let headers = rdr.headers()?.clone();
    let (mut nodes, mut node_ix) = (Vec::new(), HashMap::new());
    let (mut chans, mut chan_ix) = (Vec::new(), HashMap::new());
    let mut cols = Vec::new();
    for h in headers.iter().skip(1) {
        let (node, ch) = h.trim().rsplit_once(':').ok_or_else(|| {
            Error::Parse(format!(
                "{}: column `{h}` is not <node>:<channel>",
                path.display()
            ))
        })?;
        cols.push((
            index_of(&mut nodes, &mut node_ix, node),
            index_of(&mut chans, &mut chan_ix, ch),
        ));
    }
    let mut entries = Vec::new();
    for rec in rdr.records() {
        let rec = rec?;
        let t = parse_timestamp(&rec[0])?;
        for (j, &(node, ch)) in cols.iter().enumerate() {
            entries.push((
                t,
                node,
                ch,
                parse_value(rec.get(j + 1).unwrap_or(""), path)?,
            ));
        }
    }
    assemble(entries, nodes, chans)
}

pub fn read_series<T: Scalar>(path: &Path, format: SeriesFormat) -> Result<SeriesStore<T>> {
    match format {
        SeriesFormat::Long => read_long_csv(path),
        SeriesFormat::Wide => read_wide_csv(path),
    }
}

fn cell<T: Scalar>(store: &SeriesStore<T>, i: usize) -> String {
    if store.missing[i] {
        String::new()
    } else {
        format!("{}", store.values.data()[i])
    }
}

pub fn write_long_csv<T: Scalar>(store: &SeriesStore<T>, path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["timestamp", "node_id", "channel", "value"])?;
    let (n, c) = (store.n_nodes(), store.n_channels());
    for (t, &ts) in store.timestamps.iter().enumerate() {
        let stamp = format_timestamp(ts);
        for node in 0..n {
            for ch in 0..c {
                let i = (t * n + node) * c + ch;
                w.write_record([
                    stamp.as_str(),
                    &store.node_ids[node],
                    &store.channels[ch],
                    &cell(store, i),
                ])?;
            }
        }
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn write_wide_csv<T: Scalar>(store: &SeriesStore<T>, path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    let (n, c) = (store.n_nodes(), store.n_channels());
    let mut header = vec!["timestamp".to_string()];
    for node in &store.node_ids {
        for ch in &store.channels {
            header.push(format!("{node}:{ch}"));
        }
    }
    w.write_record(&header)?;
    for (t, &ts) in store.timestamps.iter().enumerate() {
        let mut row = vec![format_timestamp(ts)];
        row.extend((0..n * c).map(|j| cell(store, t * n * c + j)));
        w.write_record(&row)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn write_series<T: Scalar>(
    store: &SeriesStore<T>,
    path: &Path,
    format: SeriesFormat,
) -> Result<()> {
    match format {
        SeriesFormat::Long => write_long_csv(store, path),
        SeriesFormat::Wide => write_wide_csv(store, path),
    }
}
