use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{RngStream, Tensor};
use crate::resfusion::{init_inference_state, reverse_step_with_noise};
use crate::scalar::Scalar;
use crate::schedule::NoiseSchedule;

/// Noise estimator driving the reverse process.
pub trait Denoiser<T: Scalar> {
    /// Predicts the blended noise ε̃ for a batch `[B, T, N, C]`.
    ///
    /// `steps[b]` is the diffusion step of item `b` and `windows[b]` the index
    /// of the forecast window it belongs to. Learned models ignore `windows`.
    fn predict(
        &self,
        x_s: &Tensor<T>,
        x_a: &Tensor<T>,
        steps: &[usize],
        windows: &[usize],
    ) -> Result<Tensor<T>>;
}

/// Denoiser that knows the clean windows and returns the exact ε̃.
#[derive(Clone, Debug)]
pub struct OracleDenoiser<T> {
    x0: Tensor<T>,
    schedule: NoiseSchedule<T>,
}

impl<T: Scalar> OracleDenoiser<T> {
    /// `x0` holds one clean window per window index: `[W, T, N, C]`.
    pub fn new(x0: Tensor<T>, schedule: NoiseSchedule<T>) -> Result<Self> {
        if x0.ndim() != 4 {
            return Err(Error::contract(format!(
                "oracle needs [W, T, N, C], got {:?}",
                x0.shape()
            )));
        }
        Ok(OracleDenoiser { x0, schedule })
    }
}

impl<T: Scalar> Denoiser<T> for OracleDenoiser<T> {
    fn predict(
        &self,
        x_s: &Tensor<T>,
        _x_a: &Tensor<T>,
        steps: &[usize],
        windows: &[usize],
    ) -> Result<Tensor<T>> {
        let item = self.x0.shape()[1..].iter().product::<usize>();
        if x_s.shape()[1..] != self.x0.shape()[1..]
            || steps.len() != x_s.shape()[0]
            || windows.len() != steps.len()
        {
            return Err(Error::Shape {
                expected: self.x0.shape().to_vec(),
                actual: x_s.shape().to_vec(),
            });
        }
        let mut out = Vec::with_capacity(x_s.len());
        for (b, (&s, &w)) in steps.iter().zip(windows).enumerate() {
            let ab = self.schedule.alpha_bar(s)?;
            let (a, n) = (ab.sqrt(), (T::one() - ab).sqrt());
            let xs = &x_s.data()[b * item..(b + 1) * item];
            let x0 = &self.x0.data()[w * item..(w + 1) * item];
            out.extend(xs.iter().zip(x0).map(|(&x, &c)| (x - a * c) / n));
        }
        Tensor::new(x_s.shape().to_vec(), out)
    }
}

/// How the prior enters the reverse residual estimate.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PriorMode {
    /// Residual estimated from the ODE forecast on the future window.
    #[default]
    Ode,
    /// Ablation: prior forecast and residual are zero everywhere.
    Zeros,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SamplerConfig {
    /// Trajectories per window (K).
    pub samples: usize,
    pub deterministic: bool,
    /// Start at the accelerated step S′; otherwise run all S steps.
    pub accelerate: bool,
    /// Re-impose the observed history after each step instead of denoising it.
    pub clamp_history: bool,
    /// Upper bound on trajectories evaluated in one denoiser call.
    pub max_batch: usize,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        SamplerConfig {
            samples: 8,
            deterministic: false,
            accelerate: true,
            clamp_history: false,
            max_batch: 64,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.samples == 0 {
            return Err(Error::config(
                "sampling.samples",
                "need at least one sample",
            ));
        }
        if self.max_batch == 0 {
            return Err(Error::config("sampling.max_batch", "must be positive"));
        }
        Ok(())
    }
}

/// K forecasts for one window.
#[derive(Clone, Debug, PartialEq)]
pub struct ForecastEnsemble<T> {
    /// `[K, H′, N, C]`
    pub samples: Tensor<T>,
    /// `[H′, N, C]`
    pub mean: Tensor<T>,
    pub start_step: usize,
    pub denoiser_invocations: usize,
}

impl<T: Scalar> ForecastEnsemble<T> {
    pub fn from_samples(
        samples: Tensor<T>,
        start_step: usize,
        denoiser_invocations: usize,
    ) -> Result<Self> {
        if samples.ndim() != 4 || samples.shape()[0] == 0 {
            return Err(Error::contract(format!(
                "ensemble needs [K, H′, N, C], got {:?}",
                samples.shape()
            )));
        }
        let k = samples.shape()[0];
        let inner = samples.len() / k;
        let mut acc = vec![T::zero(); inner];
        for kk in 0..k {
            for (a, &v) in acc
                .iter_mut()
                .zip(&samples.data()[kk * inner..(kk + 1) * inner])
            {
                *a += v;
            }
        }
        let kt = T::from_usize_lossy(k);
        let mean = Tensor::new(
            samples.shape()[1..].to_vec(),
            acc.into_iter().map(|v| v / kt).collect(),
        )?;
        Ok(ForecastEnsemble {
            samples,
            mean,
            start_step,
            denoiser_invocations,
        })
    }

    pub fn members(&self) -> usize {
        self.samples.shape()[0]
    }

    /// Samples sorted ascending along the ensemble axis at every position.
    pub fn sorted(&self) -> Tensor<T> {
        let k = self.members();
        let inner = self.mean.len();
        let mut out = self.samples.clone();
        let mut col = vec![T::zero(); k];
        for i in 0..inner {
            for (kk, c) in col.iter_mut().enumerate() {
                *c = self.samples.data()[kk * inner + i];
            }
            col.sort_by(|a, b| a.partial_cmp(b).expect("finite samples"));
            for (kk, &c) in col.iter().enumerate() {
                out.data_mut()[kk * inner + i] = c;
            }
        }
        out
    }
}

fn concat_items<T: Scalar>(items: &[Tensor<T>]) -> Result<Tensor<T>> {
    let refs: Vec<&Tensor<T>> = items.iter().collect();
    Tensor::stack(&refs)
}

/// Runs K reverse trajectories for every window of `x_a` (`[W, T, N, C]`).
///
/// Trajectory `k` of window `w` draws all of its noise from `stream.fork(w·K + k)`,
/// so results do not depend on how trajectories are batched.
pub fn sample_ensemble<T: Scalar, D: Denoiser<T> + ?Sized>(
    denoiser: &D,
    x_a: &Tensor<T>,
    history: usize,
    schedule: &NoiseSchedule<T>,
    prior: PriorMode,
    config: &SamplerConfig,
    stream: &RngStream,
) -> Result<Vec<ForecastEnsemble<T>>> {
    config.validate()?;
    if x_a.ndim() != 4 {
        return Err(Error::contract(format!(
            "conditioning input must be [W, T, N, C], got {:?}",
            x_a.shape()
        )));
    }
    let (w_total, t_len) = (x_a.shape()[0], x_a.shape()[1]);
    if history >= t_len {
        return Err(Error::contract(format!(
            "history {history} leaves no future in a window of {t_len}"
        )));
    }
    let item_shape = x_a.shape()[1..].to_vec();
    let k = config.samples;
    let start = if config.accelerate {
        schedule.accelerated_step()
    } else {
        schedule.steps()
    };
    let per_call = (config.max_batch / k).max(1);
    let mut out = Vec::with_capacity(w_total);

    let mut w0 = 0;
    while w0 < w_total {
        let w1 = (w0 + per_call).min(w_total);
        let mut windows = Vec::new();
        let mut streams = Vec::new();
        let mut cond = Vec::new();
        for w in w0..w1 {
            let xa_w = x_a.index0(w);
            for kk in 0..k {
                windows.push(w);
                streams.push(stream.fork((w * k + kk) as u64));
                cond.push(xa_w.clone());
            }
        }
        let batch = windows.len();
        let xa_b = concat_items(&cond)?;
        let hist_obs = xa_b.narrow(1, 0, history)?;

        let eps: Vec<Tensor<T>> = streams
            .iter_mut()
            .map(|s| s.gaussian(&item_shape))
            .collect();
        let mut x = init_inference_state(&xa_b, schedule, start, &concat_items(&eps)?)?.x_s;
        let mut invocations = 0;
        for s in (1..=start).rev() {
            let steps = vec![s; batch];
            let eps_hat = denoiser.predict(&x, &xa_b, &steps, &windows)?;
            invocations += batch;
            let xi = if config.deterministic || s == 1 {
                None
            } else {
                let draws: Vec<Tensor<T>> = streams
                    .iter_mut()
                    .map(|st| st.gaussian(&item_shape))
                    .collect();
                Some(concat_items(&draws)?)
            };
            let prior_ref = match prior {
                PriorMode::Ode => Some(&xa_b),
                PriorMode::Zeros => None,
            };
            x = reverse_step_with_noise(
                &x,
                s,
                &eps_hat,
                prior_ref,
                history,
                schedule,
                xi.as_ref(),
            )?;
            if config.clamp_history {
                x = clamp_history(
                    &x,
                    &hist_obs,
                    s - 1,
                    schedule,
                    &mut streams,
                    config.deterministic,
                )?;
            }
        }
        let future = x.narrow(1, history, t_len - history)?;
        let per_window = invocations / (w1 - w0);
        for (i, _) in (w0..w1).enumerate() {
            let samples = future.narrow(0, i * k, k)?;
            out.push(ForecastEnsemble::from_samples(samples, start, per_window)?);
        }
        w0 = w1;
    }
    Ok(out)
}

/// Replaces history positions with the forward marginal of the observations at step `s`.
fn clamp_history<T: Scalar>(
    x: &Tensor<T>,
    hist: &Tensor<T>,
    s: usize,
    schedule: &NoiseSchedule<T>,
    streams: &mut [RngStream],
    deterministic: bool,
) -> Result<Tensor<T>> {
    let ab = schedule.alpha_bar(s)?;
    let (a, n) = (ab.sqrt(), (T::one() - ab).sqrt());
    let hshape = hist.shape()[1..].to_vec();
    let inner: usize = hshape.iter().product();
    let item = x.len() / x.shape()[0];
    let mut out = x.clone();
    for (b, st) in streams.iter_mut().enumerate() {
        let noise = if deterministic || s == 0 {
            Tensor::zeros(&hshape)
        } else {
            st.gaussian(&hshape)
        };
        let h = &hist.data()[b * inner..(b + 1) * inner];
        let dst = &mut out.data_mut()[b * item..b * item + inner];
        for ((d, &o), &z) in dst.iter_mut().zip(h).zip(noise.data()) {
            *d = a * o + n * z;
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::schedule::linear_schedule;

    struct Counting;

    impl Denoiser<f64> for Counting {
        fn predict(
            &self,
            x_s: &Tensor<f64>,
            _: &Tensor<f64>,
            _: &[usize],
            _: &[usize],
        ) -> Result<Tensor<f64>> {
            Ok(Tensor::zeros(x_s.shape()))
        }
    }

    fn setup(w: usize) -> (Tensor<f64>, Tensor<f64>, NoiseSchedule<f64>) {
        let mut rng = RngStream::new(11, 0);
        let x0: Tensor<f64> = rng.gaussian(&[w, 24, 8, 2]);
        // prior equal to the truth on the future window
        let xa = x0.clone();
        (x0, xa, linear_schedule(200, 1e-4, 0.2).unwrap())
    }

    #[test]
    fn oracle_recovers_future_exactly() {
        let (x0, xa, sch) = setup(2);
        let oracle = OracleDenoiser::new(x0.clone(), sch.clone()).unwrap();
        let cfg = SamplerConfig {
            samples: 3,
            deterministic: true,
            ..Default::default()
        };
        let ens = sample_ensemble(
            &oracle,
            &xa,
            12,
            &sch,
            PriorMode::Ode,
            &cfg,
            &RngStream::new(1, 2),
        )
        .unwrap();
        for (w, e) in ens.iter().enumerate() {
            let truth = x0.index0(w).narrow(0, 12, 12).unwrap();
            for k in 0..3 {
                let d = e.samples.index0(k).sub(&truth).unwrap();
                assert!(d.max_abs() < 1e-6);
            }
        }
    }

    #[test]
    fn oracle_recovers_even_with_imperfect_prior() {
        let (x0, mut xa, sch) = setup(1);
        for (i, v) in xa.data_mut().iter_mut().enumerate() {
            if (i / 16) % 24 >= 12 {
                *v += 0.7;
            }
        }
        let oracle = OracleDenoiser::new(x0.clone(), sch.clone()).unwrap();
        let cfg = SamplerConfig {
            samples: 2,
            ..Default::default()
        };
        let ens = sample_ensemble(
            &oracle,
            &xa,
            12,
            &sch,
            PriorMode::Ode,
            &cfg,
            &RngStream::new(1, 2),
        )
        .unwrap();
        let truth = x0.index0(0).narrow(0, 12, 12).unwrap();
        assert!(ens[0].mean.sub(&truth).unwrap().max_abs() < 1e-6);
    }

    #[test]
    fn invocation_counts() {
        let (_, xa, sch) = setup(1);
        let cfg = SamplerConfig::default();
        let ens = sample_ensemble(
            &Counting,
            &xa,
            12,
            &sch,
            PriorMode::Ode,
            &cfg,
            &RngStream::new(0, 0),
        )
        .unwrap();
        assert_eq!(ens[0].denoiser_invocations, 52 * 8);
        assert_eq!(ens[0].start_step, 52);
        let slow = SamplerConfig {
            accelerate: false,
            ..cfg
        };
        let ens = sample_ensemble(
            &Counting,
            &xa,
            12,
            &sch,
            PriorMode::Ode,
            &slow,
            &RngStream::new(0, 0),
        )
        .unwrap();
        assert_eq!(ens[0].denoiser_invocations, 200 * 8);
    }

    #[test]
    fn batching_does_not_change_draws() {
        let (_, xa, sch) = setup(3);
        let a = SamplerConfig {
            samples: 2,
            max_batch: 64,
            ..Default::default()
        };
        let b = SamplerConfig { max_batch: 2, ..a };
        let st = RngStream::new(5, 9);
        let ea = sample_ensemble(&Counting, &xa, 12, &sch, PriorMode::Zeros, &a, &st).unwrap();
        let eb = sample_ensemble(&Counting, &xa, 12, &sch, PriorMode::Zeros, &b, &st).unwrap();
        assert_eq!(ea, eb);
    }

    #[test]
    fn mean_and_sorted_views() {
        let samples = Tensor::new(vec![3, 1, 1, 2], vec![3.0, 0.0, 1.0, 5.0, 2.0, 1.0]).unwrap();
        let e = ForecastEnsemble::from_samples(samples, 1, 3).unwrap();
        assert_eq!(e.mean.data(), &[2.0, 2.0]);
        assert_eq!(e.sorted().data(), &[1.0, 0.0, 2.0, 1.0, 3.0, 5.0]);
    }

    #[test]
    fn clamp_history_pins_observations() {
        let (x0, xa, sch) = setup(1);
        let oracle = OracleDenoiser::new(x0, sch.clone()).unwrap();
        let cfg = SamplerConfig {
            samples: 1,
            clamp_history: true,
            ..Default::default()
        };
        let ens = sample_ensemble(
            &oracle,
            &xa,
            12,
            &sch,
            PriorMode::Ode,
            &cfg,
            &RngStream::new(2, 2),
        )
        .unwrap();
        assert!(ens[0].samples.all_finite());
    }
}
