//! Point and ensemble forecast scores.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Tensor;
use crate::scalar::Scalar;

fn check_same<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<()> {
    b.expect_shape(a.shape())
}

pub fn mae<T: Scalar>(pred: &Tensor<T>, truth: &Tensor<T>) -> Result<f64> {
    check_same(pred, truth)?;
    if pred.is_empty() {
        return Err(Error::contract("no positions to score"));
    }
    let s: f64 = pred
        .data()
        .iter()
        .zip(truth.data())
        .map(|(p, t)| (p.to_f64_lossy() - t.to_f64_lossy()).abs())
        .sum();
    Ok(s / pred.len() as f64)
}

pub fn rmse<T: Scalar>(pred: &Tensor<T>, truth: &Tensor<T>) -> Result<f64> {
    check_same(pred, truth)?;
    if pred.is_empty() {
        return Err(Error::contract("no positions to score"));
    }
    let s: f64 = pred
        .data()
        .iter()
        .zip(truth.data())
        .map(|(p, t)| (p.to_f64_lossy() - t.to_f64_lossy()).powi(2))
        .sum();
    Ok((s / pred.len() as f64).sqrt())
}

/// CRPS of the empirical distribution of `samples` at observation `y`:
/// `mean|x_k − y| − ½·mean_{k,j}|x_k − x_j|`.
pub fn crps_empirical(samples: &[f64], y: f64) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::contract("CRPS needs at least one sample"));
    }
    if !y.is_finite() || samples.iter().any(|x| !x.is_finite()) {
        return Err(Error::contract("CRPS needs finite samples and observation"));
    }
    let k = samples.len() as f64;
    let spread_to_obs = samples.iter().map(|x| (x - y).abs()).sum::<f64>() / k;
    let mut sorted = samples.to_vec();
    sorted.sort_by(f64::total_cmp);
    // Σ_{i,j}|x_i − x_j| = 2·Σ_i (2i − K + 1)·x_(i)
    let pair_sum: f64 = sorted
        .iter()
        .enumerate()
        .map(|(i, x)| (2.0 * i as f64 - k + 1.0) * x)
        .sum::<f64>()
        * 2.0;
    Ok(spread_to_obs - pair_sum / (2.0 * k * k))
}

/// Mean CRPS over all positions; `samples` is `[K, …]` and `truth` is `[…]`.
pub fn crps_ensemble<T: Scalar>(samples: &Tensor<T>, truth: &Tensor<T>) -> Result<f64> {
    let per = crps_positions(samples, truth)?;
    Ok(per.iter().sum::<f64>() / per.len() as f64)
}

fn crps_positions<T: Scalar>(samples: &Tensor<T>, truth: &Tensor<T>) -> Result<Vec<f64>> {
    if samples.ndim() != truth.ndim() + 1 || samples.shape()[1..] != *truth.shape() {
        return Err(Error::Shape {
            expected: [
                &[samples.shape().first().copied().unwrap_or(0)],
                truth.shape(),
            ]
            .concat(),
            actual: samples.shape().to_vec(),
        });
    }
    let k = samples.shape()[0];
    let p = truth.len();
    let mut buf = vec![0.0; k];
    (0..p)
        .map(|i| {
            for (j, b) in buf.iter_mut().enumerate() {
                *b = samples.data()[j * p + i].to_f64_lossy();
            }
            crps_empirical(&buf, truth.data()[i].to_f64_lossy())
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChannelScore {
    pub channel: String,
    pub mae: f64,
    pub rmse: f64,
    pub crps: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HorizonScore {
    /// 1-based lead time.
    pub horizon: usize,
    pub mae: f64,
    pub rmse: f64,
    pub crps: f64,
}

/// Aggregate scores, averaged uniformly over windows, horizons, nodes and channels.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoreReport {
    pub mae: f64,
    pub rmse: f64,
    pub crps: f64,
    pub windows: usize,
    pub samples: usize,
    pub per_channel: Vec<ChannelScore>,
    pub per_horizon: Vec<HorizonScore>,
}

#[derive(Default, Clone, Copy)]
struct Acc {
    abs: f64,
    sq: f64,
    crps: f64,
    n: usize,
}

impl Acc {
    fn push(&mut self, err: f64, crps: f64) {
        self.abs += err.abs();
        self.sq += err * err;
        self.crps += crps;
        self.n += 1;
    }

    fn finish(&self) -> (f64, f64, f64) {
        let n = self.n.max(1) as f64;
        (self.abs / n, (self.sq / n).sqrt(), self.crps / n)
    }
}

impl ScoreReport {
    /// Scores ensembles `[K, H′, N, C]` against truths `[H′, N, C]`, one pair per
    /// window. The ensemble mean is the point forecast.
    pub fn from_ensembles<T: Scalar>(
        samples: &[Tensor<T>],
        truth: &[Tensor<T>],
        channels: &[String],
    ) -> Result<Self> {
        if samples.is_empty() || samples.len() != truth.len() {
            return Err(Error::contract(format!(
                "{} ensembles for {} truth windows",
                samples.len(),
                truth.len()
            )));
        }
        let shape = truth[0].shape().to_vec();
        if shape.len() != 3 || shape[2] != channels.len() {
            return Err(Error::Shape {
                expected: vec![0, 0, channels.len()],
                actual: shape,
            });
        }
        let (hp, n, c) = (shape[0], shape[1], shape[2]);
        let k = samples[0].shape()[0];
        let mut all = Acc::default();
        let mut by_c = vec![Acc::default(); c];
        let mut by_h = vec![Acc::default(); hp];
        for (ens, y) in samples.iter().zip(truth) {
            y.expect_shape(&shape)?;
            let crps = crps_positions(ens, y)?;
            let p = y.len();
            let kk = ens.shape()[0];
            for i in 0..p {
                let mean = (0..kk)
                    .map(|j| ens.data()[j * p + i].to_f64_lossy())
                    .sum::<f64>()
                    / kk as f64;
                let err = mean - y.data()[i].to_f64_lossy();
                let (h, ch) = (i / (n * c), i % c);
                all.push(err, crps[i]);
                by_c[ch].push(err, crps[i]);
                by_h[h].push(err, crps[i]);
            }
        }
        let (mae, rmse, crps) = all.finish();
        Ok(ScoreReport {
            mae,
            rmse,
            crps,
            windows: samples.len(),
            samples: k,
            per_channel: by_c
                .iter()
                .zip(channels)
                .map(|(a, name)| {
                    let (mae, rmse, crps) = a.finish();
                    ChannelScore {
                        channel: name.clone(),
                        mae,
                        rmse,
                        crps,
                    }
                })
                .collect(),
            per_horizon: by_h
                .iter()
                .enumerate()
                .map(|(h, a)| {
                    let (mae, rmse, crps) = a.finish();
                    HorizonScore {
                        horizon: h + 1,
                        mae,
                        rmse,
                        crps,
                    }
                })
                .collect(),
        })
    }

    pub fn validate(&self) -> Result<()> {
        let vals = [self.mae, self.rmse, self.crps];
        if vals.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::Degenerate(format!("invalid score {vals:?}")));
        }
        Ok(())
    }

    pub fn write_json(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
    }

    /// One row per scope: `scope,key,mae,rmse,crps`.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["scope", "key", "mae", "rmse", "crps"])?;
        let row =
            |w: &mut csv::Writer<fs::File>, scope: &str, key: &str, m: f64, r: f64, c: f64| {
                w.write_record([scope, key, &m.to_string(), &r.to_string(), &c.to_string()])
            };
        row(&mut w, "overall", "all", self.mae, self.rmse, self.crps)?;
        for s in &self.per_channel {
            row(&mut w, "channel", &s.channel, s.mae, s.rmse, s.crps)?;
        }
        for s in &self.per_horizon {
            row(
                &mut w,
                "horizon",
                &s.horizon.to_string(),
                s.mae,
                s.rmse,
                s.crps,
            )?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    /// Plot-ready `horizon,mae,rmse,crps` series.
    pub fn write_horizon_plot(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["horizon", "mae", "rmse", "crps"])?;
        for s in &self.per_horizon {
            w.write_record([
                s.horizon.to_string(),
                s.mae.to_string(),
                s.rmse.to_string(),
                s.crps.to_string(),
            ])?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}
