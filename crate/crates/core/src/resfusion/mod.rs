//! Residual-blended diffusion: the forward process that mixes the prior's
//! error into the noise, the matching regression target, and the shortened
//! reverse sampler that starts from the conditioning input.
//!
//! Under the shift `z_s = x_s − (1−√ᾱ_s)·Res` the residual process is an
//! ordinary DDPM chain. The reverse step below is the standard posterior step
//! written back in terms of `x_s`.

mod checkpoint;
mod sampler;
mod train;

pub use checkpoint::{Checkpoint, CHECKPOINT_FORMAT};
pub use sampler::{
    sample_ensemble, Denoiser, ForecastEnsemble, OracleDenoiser, PriorMode, SamplerConfig,
};
pub use train::{train_epoch, TrainConfig, TrainingWindows};

use crate::error::{Error, Result};
use crate::numerics::{RngStream, Tensor};
use crate::scalar::Scalar;
use crate::schedule::NoiseSchedule;

/// A noised window together with the draw that produced it.
#[derive(Clone, Debug, PartialEq)]
pub struct NoisySample<T> {
    pub x_s: Tensor<T>,
    pub step: usize,
    pub eps: Tensor<T>,
}

/// Whether each flat position of a `[.., T, N, C]` tensor lies after the history window.
pub(crate) fn future_positions(shape: &[usize], history: usize) -> Result<Vec<bool>> {
    if shape.len() < 3 {
        return Err(Error::contract(format!(
            "expected [.., T, N, C], got {shape:?}"
        )));
    }
    let nd = shape.len();
    let (t_len, inner) = (shape[nd - 3], shape[nd - 2] * shape[nd - 1]);
    if history > t_len {
        return Err(Error::contract(format!(
            "history {history} exceeds window length {t_len}"
        )));
    }
    let total: usize = shape.iter().product();
    Ok((0..total).map(|i| (i / inner) % t_len >= history).collect())
}

/// `x_a = concat(history, forecast)` along time, plus the observation mask (1 on history).
pub fn conditioning_input<T: Scalar>(
    history: &Tensor<T>,
    forecast: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>)> {
    if history.ndim() != 3 || forecast.ndim() != 3 || history.shape()[1..] != forecast.shape()[1..]
    {
        return Err(Error::Shape {
            expected: history.shape().to_vec(),
            actual: forecast.shape().to_vec(),
        });
    }
    let x_a = Tensor::concat(&[history, forecast], 0)?;
    let h = history.shape()[0];
    let mask = Tensor::from_fn(
        x_a.shape(),
        |ix| if ix[0] < h { T::one() } else { T::zero() },
    );
    Ok((x_a, mask))
}

/// `x_a − x₀` on the future window and exactly zero on the first `history` steps.
pub fn residual_field<T: Scalar>(
    x_a: &Tensor<T>,
    x0: &Tensor<T>,
    history: usize,
) -> Result<Tensor<T>> {
    x0.expect_shape(x_a.shape())?;
    let future = future_positions(x0.shape(), history)?;
    let data = x_a
        .data()
        .iter()
        .zip(x0.data())
        .zip(&future)
        .map(|((&a, &x), &f)| if f { a - x } else { T::zero() })
        .collect();
    Tensor::new(x0.shape().to_vec(), data)
}

fn check_same(a: &Tensor<impl Scalar>, b: &Tensor<impl Scalar>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::Shape {
            expected: a.shape().to_vec(),
            actual: b.shape().to_vec(),
        });
    }
    Ok(())
}

/// Closed-form marginal `x_s = √ᾱ_s·x₀ + (1−√ᾱ_s)·Res + √(1−ᾱ_s)·ε`.
pub fn forward_sample<T: Scalar>(
    x0: &Tensor<T>,
    res: &Tensor<T>,
    schedule: &NoiseSchedule<T>,
    s: usize,
    eps: &Tensor<T>,
) -> Result<NoisySample<T>> {
    check_same(x0, res)?;
    check_same(x0, eps)?;
    let ab = schedule.alpha_bar(s)?;
    if s == 0 {
        return Err(Error::contract("forward_sample needs s >= 1"));
    }
    let (a, r, n) = (ab.sqrt(), T::one() - ab.sqrt(), (T::one() - ab).sqrt());
    let data = x0
        .data()
        .iter()
        .zip(res.data())
        .zip(eps.data())
        .map(|((&x, &rr), &e)| a * x + r * rr + n * e)
        .collect();
    Ok(NoisySample {
        x_s: Tensor::new(x0.shape().to_vec(), data)?,
        step: s,
        eps: eps.clone(),
    })
}

/// Coefficient of `Res` in the blended target, `(1−√ᾱ_s)/√(1−ᾱ_s)`; zero when ᾱ_s = 1.
pub fn residual_coefficient<T: Scalar>(schedule: &NoiseSchedule<T>, s: usize) -> Result<T> {
    let ab = schedule.alpha_bar(s)?;
    let denom = (T::one() - ab).sqrt();
    if denom <= T::zero() {
        return Ok(T::zero());
    }
    Ok((T::one() - ab.sqrt()) / denom)
}

/// `ε̃ = ε + (1−√ᾱ_s)/√(1−ᾱ_s)·Res`, so that `√ᾱ_s·x₀ + √(1−ᾱ_s)·ε̃ = x_s`.
pub fn training_target<T: Scalar>(
    eps: &Tensor<T>,
    res: &Tensor<T>,
    schedule: &NoiseSchedule<T>,
    s: usize,
) -> Result<Tensor<T>> {
    check_same(eps, res)?;
    if s == 0 {
        return Err(Error::contract("training_target needs s >= 1"));
    }
    let c = residual_coefficient(schedule, s)?;
    eps.zip_map(res, |e, r| e + c * r)
}

/// Starting state `√ᾱ_s·x_a + √(1−ᾱ_s)·ε` at step `s` (normally S′).
pub fn init_inference_state<T: Scalar>(
    x_a: &Tensor<T>,
    schedule: &NoiseSchedule<T>,
    s: usize,
    eps: &Tensor<T>,
) -> Result<NoisySample<T>> {
    check_same(x_a, eps)?;
    let ab = schedule.alpha_bar(s)?;
    let (a, n) = (ab.sqrt(), (T::one() - ab).sqrt());
    Ok(NoisySample {
        x_s: x_a.zip_map(eps, |x, e| a * x + n * e)?,
        step: s,
        eps: eps.clone(),
    })
}

/// One reverse transition with explicit fresh noise `xi` (`None` = deterministic).
///
/// `x_a` supplies the prior for the residual estimate on the future window;
/// pass `None` to sample with a zero residual everywhere. Tensors are
/// `[.., T, N, C]` and the first `history` time steps are the observed part.
pub fn reverse_step_with_noise<T: Scalar>(
    x_s: &Tensor<T>,
    s: usize,
    eps_hat: &Tensor<T>,
    x_a: Option<&Tensor<T>>,
    history: usize,
    schedule: &NoiseSchedule<T>,
    xi: Option<&Tensor<T>>,
) -> Result<Tensor<T>> {
    check_same(x_s, eps_hat)?;
    if let Some(a) = x_a {
        check_same(x_s, a)?;
    }
    if let Some(n) = xi {
        check_same(x_s, n)?;
    }
    if !eps_hat.all_finite() {
        return Err(Error::Sampling {
            step: s,
            reason: "denoiser produced non-finite values".into(),
        });
    }
    if s == 0 {
        return Err(Error::contract("reverse_step needs s >= 1"));
    }
    let ab = schedule.alpha_bar(s)?;
    let ab_prev = schedule.alpha_bar(s - 1)?;
    let (sa, sn) = (ab.sqrt(), (T::one() - ab).sqrt());
    let future = future_positions(x_s.shape(), history)?;

    let x0_hat = x_s.zip_map(eps_hat, |x, e| (x - sn * e) / sa)?;
    if s == 1 {
        return Ok(x0_hat);
    }
    let res_hat: Vec<T> = match x_a {
        Some(a) => a
            .data()
            .iter()
            .zip(x0_hat.data())
            .zip(&future)
            .map(|((&p, &x0), &f)| if f { p - x0 } else { T::zero() })
            .collect(),
        None => vec![T::zero(); x_s.len()],
    };
    let sigma2 = if xi.is_some() {
        schedule.posterior_variance(s)?
    } else {
        T::zero()
    };
    let sigma = sigma2.sqrt();
    let (sa_prev, keep) = (
        ab_prev.sqrt(),
        (T::one() - ab_prev - sigma2).max(T::zero()).sqrt(),
    );
    let mut out = Vec::with_capacity(x_s.len());
    for i in 0..x_s.len() {
        let x0 = x0_hat.data()[i];
        let r = res_hat[i];
        let eps = (x_s.data()[i] - sa * x0 - (T::one() - sa) * r) / sn;
        let mut v = sa_prev * x0 + (T::one() - sa_prev) * r + keep * eps;
        if let Some(n) = xi {
            v += sigma * n.data()[i];
        }
        out.push(v);
    }
    let next = Tensor::new(x_s.shape().to_vec(), out)?;
    if !next.all_finite() {
        return Err(Error::Sampling {
            step: s,
            reason: "reverse update is non-finite".into(),
        });
    }
    Ok(next)
}

/// Reverse transition `x_s → x_{s−1}` drawing ξ from `stream` unless `deterministic`.
#[allow(clippy::too_many_arguments)]
pub fn reverse_step<T: Scalar>(
    x_s: &Tensor<T>,
    s: usize,
    eps_hat: &Tensor<T>,
    x_a: Option<&Tensor<T>>,
    history: usize,
    schedule: &NoiseSchedule<T>,
    stream: &mut RngStream,
    deterministic: bool,
) -> Result<Tensor<T>> {
    let xi = if deterministic || s == 1 {
        None
    } else {
        Some(stream.gaussian(x_s.shape()))
    };
    reverse_step_with_noise(x_s, s, eps_hat, x_a, history, schedule, xi.as_ref())
}
