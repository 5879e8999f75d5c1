//! Parameter-free graph diffusion prior `dX/dt = −k·L·X`.
//!
//! The forecast is integrated with an adaptive Dormand–Prince 5(4) pair from
//! the last observed state. A spectral closed form is provided as an
//! independent reference solution.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::SensorGraph;
use crate::numerics::Tensor;
use crate::scalar::Scalar;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OdeConfig {
    /// Diffusion coefficient per unit of sampling interval.
    pub k: f64,
    pub rtol: f64,
    pub atol: f64,
    pub max_steps: usize,
    /// Optional per-channel coefficients overriding `k`.
    pub channel_k: Option<Vec<f64>>,
}

impl Default for OdeConfig {
    fn default() -> Self {
        OdeConfig {
            k: 0.1,
            rtol: 1e-6,
            atol: 1e-8,
            max_steps: 100_000,
            channel_k: None,
        }
    }
}

impl OdeConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.k >= 0.0 && self.k.is_finite()) {
            return Err(Error::config(
                "ode.k",
                "diffusion coefficient must be finite and >= 0",
            ));
        }
        if !(self.rtol > 0.0) || !(self.atol > 0.0) {
            return Err(Error::config("ode.rtol", "tolerances must be positive"));
        }
        if self.max_steps == 0 {
            return Err(Error::config("ode.max_steps", "must be positive"));
        }
        if let Some(ks) = &self.channel_k {
            if ks.iter().any(|k| !(*k >= 0.0 && k.is_finite())) {
                return Err(Error::config(
                    "ode.channel_k",
                    "coefficients must be finite and >= 0",
                ));
            }
        }
        Ok(())
    }

    /// Coefficient for each of `channels` channels.
    pub fn coefficients<T: Scalar>(&self, channels: usize) -> Result<Vec<T>> {
        match &self.channel_k {
            Some(ks) if ks.len() != channels => Err(Error::config(
                "ode.channel_k",
                format!("{} coefficients for {channels} channels", ks.len()),
            )),
            Some(ks) => Ok(ks.iter().map(|&k| T::lit(k)).collect()),
            None => Ok(vec![T::lit(self.k); channels]),
        }
    }
}

/// Preliminary forecast produced by the diffusion prior.
#[derive(Clone, Debug)]
pub struct OdeForecast<T> {
    /// `H′×N×C`
    pub values: Tensor<T>,
    /// `N×C` initial state.
    pub init: Tensor<T>,
    pub eval_times: Vec<T>,
    /// Accepted integrator steps (zero for the closed form).
    pub steps: usize,
}

fn check_state<T: Scalar>(state: &Tensor<T>, graph: &SensorGraph<T>) -> Result<(usize, usize)> {
    if state.ndim() != 2 || state.shape()[0] != graph.n_nodes() {
        return Err(Error::Shape {
            expected: vec![graph.n_nodes(), state.shape().get(1).copied().unwrap_or(0)],
            actual: state.shape().to_vec(),
        });
    }
    Ok((state.shape()[0], state.shape()[1]))
}

/// `−k_c·(L·X)[:, c]` for every channel `c`.
pub fn rhs<T: Scalar>(state: &Tensor<T>, graph: &SensorGraph<T>, k: &[T]) -> Result<Tensor<T>> {
    let (_, c) = check_state(state, graph)?;
    if k.len() != c {
        return Err(Error::contract(
            "one diffusion coefficient per channel required",
        ));
    }
    let mut lx = graph.laplacian().matmul(state)?;
    for row in lx.data_mut().chunks_mut(c) {
        for (v, &kc) in row.iter_mut().zip(k) {
            *v = -kc * *v;
        }
    }
    Ok(lx)
}

fn check_times<T: Scalar>(eval_times: &[T]) -> Result<()> {
    if eval_times.is_empty() {
        return Err(Error::contract("no evaluation times"));
    }
    let mut prev = T::zero();
    for &t in eval_times {
        if !(t > prev) {
            return Err(Error::contract(
                "evaluation times must be positive and strictly increasing",
            ));
        }
        prev = t;
    }
    Ok(())
}

// Dormand–Prince 5(4) tableau. The system is autonomous, so the nodes c_i are unused.
const A21: f64 = 1.0 / 5.0;
const A31: f64 = 3.0 / 40.0;
const A32: f64 = 9.0 / 40.0;
const A41: f64 = 44.0 / 45.0;
const A42: f64 = -56.0 / 15.0;
const A43: f64 = 32.0 / 9.0;
const A51: f64 = 19372.0 / 6561.0;
const A52: f64 = -25360.0 / 2187.0;
const A53: f64 = 64448.0 / 6561.0;
const A54: f64 = -212.0 / 729.0;
const A61: f64 = 9017.0 / 3168.0;
const A62: f64 = -355.0 / 33.0;
const A63: f64 = 46732.0 / 5247.0;
const A64: f64 = 49.0 / 176.0;
const A65: f64 = -5103.0 / 18656.0;
const A71: f64 = 35.0 / 384.0;
const A73: f64 = 500.0 / 1113.0;
const A74: f64 = 125.0 / 192.0;
const A75: f64 = -2187.0 / 6784.0;
const A76: f64 = 11.0 / 84.0;
// 5th-order minus embedded 4th-order weights.
const E1: f64 = 71.0 / 57600.0;
const E3: f64 = -71.0 / 16695.0;
const E4: f64 = 71.0 / 1920.0;
const E5: f64 = -17253.0 / 339200.0;
const E6: f64 = 22.0 / 525.0;
const E7: f64 = -1.0 / 40.0;

fn combo<T: Scalar>(y: &[T], h: T, terms: &[(f64, &[T])]) -> Vec<T> {
    let mut out = y.to_vec();
    for &(coef, k) in terms {
        let c = h * T::lit(coef);
        for (o, &kv) in out.iter_mut().zip(k) {
            *o += c * kv;
        }
    }
    out
}

/// Adaptive Dormand–Prince integration from `t = 0`, reporting the state at each evaluation time.
pub fn solve_dopri5<T: Scalar>(
    init: &Tensor<T>,
    graph: &SensorGraph<T>,
    config: &OdeConfig,
    eval_times: &[T],
) -> Result<OdeForecast<T>> {
    config.validate()?;
    let (n, c) = check_state(init, graph)?;
    check_times(eval_times)?;
    let k = config.coefficients::<T>(c)?;
    let shape = [n, c];
    let f = |y: &[T]| -> Result<Vec<T>> {
        let t = Tensor::new(shape.to_vec(), y.to_vec())?;
        Ok(rhs(&t, graph, &k)?.into_data())
    };
    let rtol = T::lit(config.rtol);
    let atol = T::lit(config.atol);
    let err_norm = |y0: &[T], y1: &[T], e: &[T]| -> T {
        let mut acc = T::zero();
        for ((&a, &b), &ev) in y0.iter().zip(y1).zip(e) {
            let sc = atol + rtol * a.abs().max(b.abs());
            acc += (ev / sc) * (ev / sc);
        }
        (acc / T::from_usize_lossy(y0.len().max(1))).sqrt()
    };

    let mut y = init.data().to_vec();
    let mut t = T::zero();
    let mut k1 = f(&y)?;

    // initial step size heuristic (Hairer, Nørsett & Wanner, II.4)
    let zeros = vec![T::zero(); y.len()];
    let d0 = err_norm(&y, &y, &y);
    let d1 = err_norm(&y, &y, &k1);
    let mut h = if d0 < T::lit(1e-5) || d1 < T::lit(1e-5) {
        T::lit(1e-6)
    } else {
        T::lit(0.01) * d0 / d1
    };
    {
        let y1 = combo(&y, h, &[(1.0, &k1)]);
        let k2 = f(&y1)?;
        let diff: Vec<T> = k2.iter().zip(&k1).map(|(&a, &b)| a - b).collect();
        let d2 = err_norm(&y, &zeros, &diff) / h;
        let h1 = if d1.max(d2) <= T::lit(1e-15) {
            (h * T::lit(1e-3)).max(T::lit(1e-6))
        } else {
            (T::lit(0.01) / d1.max(d2)).powf(T::lit(0.2))
        };
        h = (T::lit(100.0) * h).min(h1);
    }

    let mut values = Vec::with_capacity(eval_times.len() * y.len());
    let mut attempts = 0usize;
    let mut accepted = 0usize;
    let safety = T::lit(0.9);
    let fac_min = T::lit(0.2);
    let fac_max = T::lit(10.0);
    for &target in eval_times {
        while t < target {
            attempts += 1;
            if attempts > config.max_steps {
                return Err(Error::Integration {
                    t: t.to_f64_lossy(),
                    reason: format!("exceeded {} steps", config.max_steps),
                });
            }
            let remaining = target - t;
            let last = h >= remaining;
            let hs = if last { remaining } else { h };
            let k2 = f(&combo(&y, hs, &[(A21, &k1)]))?;
            let k3 = f(&combo(&y, hs, &[(A31, &k1), (A32, &k2)]))?;
            let k4 = f(&combo(&y, hs, &[(A41, &k1), (A42, &k2), (A43, &k3)]))?;
            let k5 = f(&combo(
                &y,
                hs,
                &[(A51, &k1), (A52, &k2), (A53, &k3), (A54, &k4)],
            ))?;
            let k6 = f(&combo(
                &y,
                hs,
                &[(A61, &k1), (A62, &k2), (A63, &k3), (A64, &k4), (A65, &k5)],
            ))?;
            let y_new = combo(
                &y,
                hs,
                &[(A71, &k1), (A73, &k3), (A74, &k4), (A75, &k5), (A76, &k6)],
            );
            let k7 = f(&y_new)?;
            let err: Vec<T> = (0..y.len())
                .map(|i| {
                    hs * (T::lit(E1) * k1[i]
                        + T::lit(E3) * k3[i]
                        + T::lit(E4) * k4[i]
                        + T::lit(E5) * k5[i]
                        + T::lit(E6) * k6[i]
                        + T::lit(E7) * k7[i])
                })
                .collect();
            let en = err_norm(&y, &y_new, &err);
            if !en.is_finite() {
                return Err(Error::Integration {
                    t: t.to_f64_lossy(),
                    reason: "non-finite error estimate".into(),
                });
            }
            let fac = if en == T::zero() {
                fac_max
            } else {
                (safety * en.powf(T::lit(-0.2))).max(fac_min).min(fac_max)
            };
            if en <= T::one() {
                t = if last { target } else { t + hs };
                y = y_new;
                k1 = k7;
                accepted += 1;
                // a truncated final step says nothing about the natural step size
                if !last {
                    h = hs * fac;
                }
            } else {
                h = hs * fac.min(T::one());
            }
        }
        values.extend_from_slice(&y);
    }
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::Integration {
            t: t.to_f64_lossy(),
            reason: "non-finite state".into(),
        });
    }
    Ok(OdeForecast {
        values: Tensor::new(vec![eval_times.len(), n, c], values)?,
        init: init.clone(),
        eval_times: eval_times.to_vec(),
        steps: accepted,
    })
}

/// Exact solution `X(t) = U·exp(−k·Λ·t)·Uᵀ·X(0)`, channel by channel.
pub fn closed_form_oracle<T: Scalar>(
    init: &Tensor<T>,
    graph: &SensorGraph<T>,
    k: &[T],
    eval_times: &[T],
) -> Result<OdeForecast<T>> {
    let (n, c) = check_state(init, graph)?;
    if k.len() != c {
        return Err(Error::contract(
            "one diffusion coefficient per channel required",
        ));
    }
    let u = graph.eigenvectors();
    let lambda = graph.eigenvalues().data();
    let spec = u.transpose2().matmul(init)?;
    let mut values = Vec::with_capacity(eval_times.len() * n * c);
    for &t in eval_times {
        let decayed = Tensor::from_fn(&[n, c], |ix| {
            spec.get(ix) * (-k[ix[1]] * lambda[ix[0]] * t).exp()
        });
        values.extend(u.matmul(&decayed)?.into_data());
    }
    Ok(OdeForecast {
        values: Tensor::new(vec![eval_times.len(), n, c], values)?,
        init: init.clone(),
        eval_times: eval_times.to_vec(),
        steps: 0,
    })
}

/// Per-channel Laplacian quadratic form `xᵀ·L·x`.
pub fn laplacian_energy<T: Scalar>(graph: &SensorGraph<T>, state: &Tensor<T>) -> Result<Vec<T>> {
    let (n, c) = check_state(state, graph)?;
    let lx = graph.laplacian().matmul(state)?;
    Ok((0..c)
        .map(|ch| (0..n).map(|i| state.get(&[i, ch]) * lx.get(&[i, ch])).sum())
        .collect())
}

/// Horizon times `1, 2, …, H′` in sampling-interval units.
pub fn horizon_times<T: Scalar>(horizon: usize) -> Vec<T> {
    (1..=horizon).map(T::from_usize_lossy).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::DistanceMetric;
    use crate::numerics::RngStream;

    fn two_node() -> SensorGraph<f64> {
        SensorGraph::from_adjacency(Tensor::from_rows(&[vec![0.0, 1.0], vec![1.0, 0.0]]).unwrap())
            .unwrap()
    }

    fn random_graph(n: usize, seed: u64) -> SensorGraph<f64> {
        let mut rng = RngStream::new(seed, 0);
        let coords: Vec<(f64, f64)> = (0..n)
            .map(|_| (rng.uniform_f64(), rng.uniform_f64()))
            .collect();
        SensorGraph::from_coords(&coords, DistanceMetric::Euclidean, None, 0.1).unwrap()
    }

    fn rel_err(a: &Tensor<f64>, b: &Tensor<f64>) -> f64 {
        a.sub(b).unwrap().max_abs() / b.max_abs().max(1e-300)
    }

    #[test]
    fn rhs_zero_coefficient() {
        let g = random_graph(5, 1);
        let x: Tensor<f64> = RngStream::new(1, 2).gaussian(&[5, 2]);
        assert_eq!(rhs(&x, &g, &[0.0, 0.0]).unwrap().max_abs(), 0.0);
    }

    #[test]
    fn rhs_vanishes_on_kernel() {
        let g = random_graph(7, 2);
        let x = Tensor::from_fn(&[7, 3], |ix| g.degrees()[ix[0]].sqrt() * (ix[1] + 1) as f64);
        assert!(rhs(&x, &g, &[0.1, 0.2, 0.3]).unwrap().max_abs() < 1e-10);
    }

    #[test]
    fn rhs_two_node_example() {
        let g = two_node();
        let x = Tensor::new(vec![2, 1], vec![1.0, 0.0]).unwrap();
        assert_eq!(rhs(&x, &g, &[1.0]).unwrap().data(), &[-1.0, 1.0]);
    }

    #[test]
    fn zero_coefficient_keeps_init() {
        let g = random_graph(6, 3);
        let x: Tensor<f64> = RngStream::new(3, 0).gaussian(&[6, 2]);
        let cfg = OdeConfig {
            k: 0.0,
            ..OdeConfig::default()
        };
        let out = solve_dopri5(&x, &g, &cfg, &horizon_times(12)).unwrap();
        for h in 0..12 {
            assert_eq!(out.values.index0(h), x);
        }
    }

    #[test]
    fn two_node_analytic_solution() {
        let g = two_node();
        let x = Tensor::new(vec![2, 1], vec![1.0, 0.0]).unwrap();
        for &k in &[0.01, 0.1, 0.5, 2.0] {
            let cfg = OdeConfig {
                k,
                ..OdeConfig::default()
            };
            let times: Vec<f64> = horizon_times(12);
            let out = solve_dopri5(&x, &g, &cfg, &times).unwrap();
            for (h, &t) in times.iter().enumerate() {
                let e = (-2.0 * k * t).exp();
                let want = [0.5 + 0.5 * e, 0.5 - 0.5 * e];
                for i in 0..2 {
                    let got = out.values.get(&[h, i, 0]);
                    assert!((got - want[i]).abs() <= 1e-5 * want[0].abs(), "k={k} t={t}");
                }
            }
        }
    }

    #[test]
    fn random_graph_matches_oracle() {
        let g = random_graph(10, 5);
        let x: Tensor<f64> = RngStream::new(5, 1).gaussian(&[10, 3]);
        let cfg = OdeConfig::default();
        let times = horizon_times(12);
        let a = solve_dopri5(&x, &g, &cfg, &times).unwrap();
        let b = closed_form_oracle(&x, &g, &[0.1; 3], &times).unwrap();
        assert!(rel_err(&a.values, &b.values) <= 1e-5);
    }

    #[test]
    fn oracle_at_time_zero_is_init() {
        let g = random_graph(6, 8);
        let x: Tensor<f64> = RngStream::new(8, 1).gaussian(&[6, 2]);
        let out = closed_form_oracle(&x, &g, &[0.3, 0.3], &[0.0]).unwrap();
        assert!(out.values.index0(0).sub(&x).unwrap().max_abs() < 1e-12);
    }

    #[test]
    fn oracle_long_time_limit_on_regular_graph() {
        let a: Tensor<f64> = Tensor::from_fn(&[6, 6], |ix| {
            let d = (ix[0] as i64 - ix[1] as i64).rem_euclid(6);
            if d == 1 || d == 5 {
                1.0
            } else {
                0.0
            }
        });
        let g = SensorGraph::from_adjacency(a).unwrap();
        let x: Tensor<f64> = RngStream::new(9, 1).gaussian(&[6, 2]);
        let out = closed_form_oracle(&x, &g, &[1.0, 1.0], &[500.0]).unwrap();
        for ch in 0..2 {
            let mean: f64 = (0..6).map(|i| x.get(&[i, ch])).sum::<f64>() / 6.0;
            for i in 0..6 {
                assert!((out.values.get(&[0, i, ch]) - mean).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn energy_is_non_increasing() {
        for seed in 0..10 {
            let g = random_graph(12, 30 + seed);
            let x: Tensor<f64> = RngStream::new(seed, 4).gaussian(&[12, 2]);
            let out = solve_dopri5(&x, &g, &OdeConfig::default(), &horizon_times(12)).unwrap();
            let mut prev = laplacian_energy(&g, &x).unwrap();
            for h in 0..12 {
                let e = laplacian_energy(&g, &out.values.index0(h)).unwrap();
                for ch in 0..2 {
                    assert!(e[ch] <= prev[ch] * (1.0 + 1e-9) + 1e-15);
                }
                prev = e;
            }
        }
    }

    #[test]
    fn solution_is_linear_in_init() {
        let g = random_graph(8, 12);
        let x: Tensor<f64> = RngStream::new(1, 5).gaussian(&[8, 2]);
        let y: Tensor<f64> = RngStream::new(1, 6).gaussian(&[8, 2]);
        let (a, b) = (1.7, -0.4);
        let cfg = OdeConfig::default();
        let times = horizon_times(6);
        let combo_init = x.scale(a).add(&y.scale(b)).unwrap();
        let lhs = solve_dopri5(&combo_init, &g, &cfg, &times).unwrap().values;
        let sx = solve_dopri5(&x, &g, &cfg, &times).unwrap().values;
        let sy = solve_dopri5(&y, &g, &cfg, &times).unwrap().values;
        let rhs_ = sx.scale(a).add(&sy.scale(b)).unwrap();
        assert!(lhs.sub(&rhs_).unwrap().max_abs() <= 1e-5 * rhs_.max_abs());
    }

    #[test]
    fn step_cap_is_an_error() {
        let g = random_graph(5, 13);
        let x: Tensor<f64> = RngStream::new(1, 7).gaussian(&[5, 1]);
        let cfg = OdeConfig {
            k: 50.0,
            max_steps: 3,
            ..OdeConfig::default()
        };
        assert!(matches!(
            solve_dopri5(&x, &g, &cfg, &horizon_times(12)),
            Err(Error::Integration { .. })
        ));
    }

    #[test]
    fn bad_times_rejected() {
        let g = two_node();
        let x = Tensor::new(vec![2, 1], vec![1.0, 0.0]).unwrap();
        assert!(solve_dopri5(&x, &g, &OdeConfig::default(), &[2.0, 1.0]).is_err());
        assert!(solve_dopri5(&x, &g, &OdeConfig::default(), &[0.0, 1.0]).is_err());
    }
}
