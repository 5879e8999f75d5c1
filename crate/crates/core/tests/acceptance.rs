//! Acceptance suite. Runs every criterion, prints one PASS/FAIL line each and
//! exits non-zero if any fails. Pass criterion numbers as arguments to run a
//! subset, e.g. `cargo test --test acceptance -- 1 2 9`.

use std::fs;
use std::process::ExitCode;
use std::time::Instant;

use ddiff::fsd::{FsdConfig, FsdDims, FsdModel};
use ddiff::graph::SensorGraph;
use ddiff::metrics::crps_empirical;
use ddiff::numerics::{RngStream, Tape, Tensor};
use ddiff::ode_prior::{closed_form_oracle, solve_dopri5, OdeConfig};
use ddiff::pipeline::{cmd_evaluate, cmd_sample, cmd_schedule, cmd_train, Baseline};
use ddiff::resfusion::{
    forward_sample, sample_ensemble, training_target, OracleDenoiser, PriorMode, SamplerConfig,
};
use ddiff::schedule::{approx_step, linear_schedule, TABLE_BETAS, TABLE_STEPS};
use ddiff::RunConfig;

type Outcome = Result<String, String>;

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

/// Accelerated start steps for β_end ∈ {0.1, 0.2, 0.3, 0.4} × S ∈ {50, …, 500}.
const PUBLISHED_STEPS: [[usize; 6]; 4] = [
    [37, 52, 74, 91, 105, 117],
    [26, 37, 52, 64, 74, 83],
    [21, 30, 43, 53, 61, 68],
    [18, 26, 37, 45, 53, 59],
];

fn table_exactness() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let grid =
        cmd_schedule(&TABLE_STEPS, &TABLE_BETAS, 1e-4, dir.path()).map_err(|e| e.to_string())?;
    let mut mismatches = Vec::new();
    for (bi, row) in grid.iter().enumerate() {
        for (si, &v) in row.iter().enumerate() {
            if v != PUBLISHED_STEPS[bi][si] {
                mismatches.push(format!(
                    "β={} S={}: {v} vs {}",
                    TABLE_BETAS[bi], TABLE_STEPS[si], PUBLISHED_STEPS[bi][si]
                ));
            }
        }
    }
    check(
        mismatches.is_empty() && grid[1][2] == 52 && grid[3][5] == 59,
        if mismatches.is_empty() {
            "24/24 cells exact".into()
        } else {
            mismatches.join("; ")
        },
    )
}

fn scaling_law() -> Outcome {
    let mut worst: f64 = 0.0;
    for (bi, &b) in TABLE_BETAS.iter().enumerate() {
        for (si, &s) in TABLE_STEPS.iter().enumerate() {
            if s < 100 {
                continue;
            }
            let exact = PUBLISHED_STEPS[bi][si] as f64;
            worst = worst.max((approx_step(s, b) - exact).abs() / exact);
        }
    }
    let example = approx_step(200, 0.2);
    check(
        worst <= 0.10 && (example - 52.65).abs() < 0.01,
        format!("max relative error {worst:.4} (S=200, β=0.2: {example:.2} vs 52)"),
    )
}

fn random_graph(rng: &mut RngStream, n: usize) -> SensorGraph<f64> {
    let mut adj = Tensor::zeros(&[n, n]);
    for i in 0..n {
        for j in (i + 1)..n {
            // a path keeps the graph connected, the rest is random
            let w = if j == i + 1 || rng.uniform_f64() < 0.2 {
                0.1 + rng.uniform_f64()
            } else {
                0.0
            };
            adj.set(&[i, j], w);
            adj.set(&[j, i], w);
        }
    }
    SensorGraph::from_adjacency(adj).expect("valid adjacency")
}

fn ode_oracle() -> Outcome {
    let mut rng = RngStream::new(303, 0);
    let ks = [0.01, 0.1, 0.5];
    let times: Vec<f64> = (1..=12).map(|t| t as f64).collect();
    let mut worst: f64 = 0.0;
    for g in 0..20 {
        let n = rng.uniform_int(2, 64);
        let graph = random_graph(&mut rng, n);
        let init: Tensor<f64> = rng.gaussian(&[n, 2]);
        let k = ks[g % 3];
        let cfg = OdeConfig {
            k,
            ..Default::default()
        };
        let num = solve_dopri5(&init, &graph, &cfg, &times)
            .map_err(|e| e.to_string())?
            .values;
        let exact = closed_form_oracle(&init, &graph, &[k, k], &times)
            .map_err(|e| e.to_string())?
            .values;
        let rel = num.sub(&exact).unwrap().norm() / exact.norm();
        worst = worst.max(rel);
    }
    check(
        worst <= 1e-5,
        format!("max relative error {worst:.2e} over 20 graphs"),
    )
}

fn forward_identities() -> Outcome {
    let sch = linear_schedule::<f64>(200, 1e-4, 0.2).map_err(|e| e.to_string())?;
    let mut rng = RngStream::new(404, 0);
    let shape = [6, 4, 2];
    let x0: Tensor<f64> = rng.gaussian(&shape);
    let res: Tensor<f64> = rng.gaussian(&shape);
    let zero = Tensor::zeros(&shape);
    let one = Tensor::ones(&shape);

    // iterate x_s = √α_s·x_{s−1} + (1−√α_s)·Res + √β_s·ε on mean and variance
    let (mut mean, mut var) = (x0.clone(), 0.0f64);
    let (mut mean_err, mut var_err, mut target_err): (f64, f64, f64) = (0.0, 0.0, 0.0);
    for s in 1..=200 {
        let beta = sch.betas()[s - 1];
        let ra = (1.0 - beta).sqrt();
        mean = mean.zip_map(&res, |m, r| ra * m + (1.0 - ra) * r).unwrap();
        var = (1.0 - beta) * var + beta;

        let det = forward_sample(&x0, &res, &sch, s, &zero).unwrap().x_s;
        mean_err = mean_err.max(det.sub(&mean).unwrap().max_abs());
        let unit = forward_sample(&x0, &res, &sch, s, &one)
            .unwrap()
            .x_s
            .sub(&det)
            .unwrap();
        let closed_var = unit.data()[0].powi(2);
        var_err = var_err.max((closed_var - var).abs());

        let eps: Tensor<f64> = rng.gaussian(&shape);
        let xs = forward_sample(&x0, &res, &sch, s, &eps).unwrap().x_s;
        let tilde = training_target(&eps, &res, &sch, s).unwrap();
        let ab = sch.alpha_bar(s).unwrap();
        let rebuilt = x0
            .zip_map(&tilde, |a, t| ab.sqrt() * a + (1.0 - ab).sqrt() * t)
            .unwrap();
        target_err = target_err.max(rebuilt.sub(&xs).unwrap().max_abs());
    }
    check(
        mean_err <= 1e-10 && var_err <= 1e-12 && target_err <= 1e-12,
        format!("mean {mean_err:.1e}, variance {var_err:.1e}, target identity {target_err:.1e}"),
    )
}

fn perfect_denoiser() -> Outcome {
    let sch = linear_schedule::<f64>(200, 1e-4, 0.2).map_err(|e| e.to_string())?;
    let mut rng = RngStream::new(505, 0);
    let (w, t, n, c, h) = (4, 24, 8, 2, 12);
    let x0: Tensor<f64> = rng.gaussian(&[w, t, n, c]);
    let oracle = OracleDenoiser::new(x0.clone(), sch.clone()).unwrap();
    let cfg = SamplerConfig {
        samples: 2,
        deterministic: true,
        ..Default::default()
    };
    let ens = sample_ensemble(
        &oracle,
        &x0,
        h,
        &sch,
        PriorMode::Ode,
        &cfg,
        &RngStream::new(1, 1),
    )
    .map_err(|e| e.to_string())?;
    let mut worst: f64 = 0.0;
    for (wi, e) in ens.iter().enumerate() {
        let truth = x0.index0(wi).narrow(0, h, t - h).unwrap();
        for k in 0..e.members() {
            let d = e.samples.index0(k).sub(&truth).unwrap();
            let mae = d.data().iter().map(|v| v.abs()).sum::<f64>() / d.len() as f64;
            worst = worst.max(mae);
        }
    }
    check(
        worst <= 1e-6,
        format!("max MAE {worst:.2e} over {w} windows"),
    )
}

fn ring(n: usize) -> SensorGraph<f64> {
    let adj = Tensor::from_fn(&[n, n], |ix| {
        let d = ix[0].abs_diff(ix[1]);
        if d == 1 || d == n - 1 {
            1.0
        } else {
            0.0
        }
    });
    SensorGraph::from_adjacency(adj).unwrap()
}

fn gradient_check() -> Outcome {
    let cfg = FsdConfig {
        blocks: 1,
        hidden: 8,
        heads: 2,
        ..Default::default()
    };
    let dims = FsdDims {
        window: 4,
        history: 2,
        nodes: 3,
        channels: 2,
    };
    let mut m = FsdModel::new(cfg, dims, &ring(3), &mut RngStream::new(606, 0))
        .map_err(|e| e.to_string())?;
    let mut rng = RngStream::new(607, 0);
    let xs: Tensor<f64> = rng.gaussian(&[1, 4, 3, 2]);
    let xa: Tensor<f64> = rng.gaussian(&[1, 4, 3, 2]);
    let w: Tensor<f64> = rng.gaussian(&[1, 4, 3, 2]);
    let steps = [37];
    let loss_of = |m: &FsdModel<f64>| m.forward(&xs, &xa, &steps).unwrap().mul(&w).unwrap().sum();

    let tape = Tape::new();
    let grads = {
        let bound = m.bind(&tape, true);
        let out = bound.forward(&xs, &xa, &steps).map_err(|e| e.to_string())?;
        let loss = tape.sum_all(tape.mul_bcast(out, tape.constant(w.clone())).unwrap());
        tape.grad(loss, bound.vars()).map_err(|e| e.to_string())?
    };
    let names: Vec<String> = m.params.iter().map(|(k, _)| k.clone()).collect();
    let eps = 1e-5;
    let (mut worst, mut worst_name, mut count) = (0.0f64, String::new(), 0usize);
    for (pi, name) in names.iter().enumerate() {
        let len = m.params.get(name).unwrap().len();
        let (mut num, mut den) = (0.0, 0.0);
        for i in 0..len {
            let orig = m.params.get(name).unwrap().data()[i];
            m.params.get_mut(name).unwrap().data_mut()[i] = orig + eps;
            let up = loss_of(&m);
            m.params.get_mut(name).unwrap().data_mut()[i] = orig - eps;
            let down = loss_of(&m);
            m.params.get_mut(name).unwrap().data_mut()[i] = orig;
            let fd = (up - down) / (2.0 * eps);
            let an = grads[pi].data()[i];
            num += (fd - an) * (fd - an);
            den += fd * fd + an * an;
            count += 1;
        }
        let rel = num.sqrt() / den.sqrt().max(1e-12);
        if rel > worst {
            worst = rel;
            worst_name = name.clone();
        }
    }
    check(
        worst <= 1e-4,
        format!(
            "{count} scalars in {} tensors, worst relative error {worst:.2e} ({worst_name})",
            names.len()
        ),
    )
}

fn acceleration_accounting() -> Outcome {
    let sch = linear_schedule::<f64>(200, 1e-4, 0.2).map_err(|e| e.to_string())?;
    let mut rng = RngStream::new(707, 0);
    let x0: Tensor<f64> = rng.gaussian(&[1, 8, 3, 2]);
    let oracle = OracleDenoiser::new(x0.clone(), sch.clone()).unwrap();
    let run = |accelerate: bool| {
        let cfg = SamplerConfig {
            samples: 8,
            accelerate,
            ..Default::default()
        };
        sample_ensemble(
            &oracle,
            &x0,
            4,
            &sch,
            PriorMode::Ode,
            &cfg,
            &RngStream::new(1, 0),
        )
        .map(|e| e[0].denoiser_invocations)
    };
    let fast = run(true).map_err(|e| e.to_string())?;
    let full = run(false).map_err(|e| e.to_string())?;
    let ratio = full as f64 / fast as f64;
    check(
        fast == 416 && full == 1600 && sch.accelerated_step() == 52,
        format!("{fast} vs {full} invocations, ratio {ratio:.2}"),
    )
}

/// Desk-scale settings shared by the end-to-end criteria.
fn desk_config(seed: u64, prior: &str) -> RunConfig {
    let overrides: Vec<String> = [
        "precision=\"f32\"",
        "data.synth.nodes=12",
        "data.synth.channels=2",
        "data.synth.steps=2000",
        "data.synth.k_true=0.1",
        "ode.k=0.1",
        "data.windows.stride=8",
        "data.eval_stride=24",
        "model.blocks=2",
        "model.hidden=16",
        "model.heads=2",
        "schedule.steps=200",
        "schedule.beta_end=0.2",
        "train.epochs=50",
        "train.batch_size=8",
        "sampling.samples=8",
    ]
    .iter()
    .map(|s| s.to_string())
    .chain([format!("prior=\"{prior}\"")])
    .collect();
    RunConfig::resolve(None, &overrides, Some(seed)).expect("desk config is valid")
}

fn desk_end_to_end() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let mut passes = 0;
    let mut lines = Vec::new();
    for seed in 0..3u64 {
        let mut scores = Vec::new();
        for prior in ["ode", "zeros"] {
            let cfg = desk_config(seed, prior);
            let run = dir.path().join(format!("{prior}-{seed}"));
            fs::create_dir_all(&run).unwrap();
            let out = cmd_train(&cfg, None, &run).map_err(|e| e.to_string())?;
            scores.push(
                cmd_evaluate(&cfg, Some(&out.checkpoint), None, false, &run)
                    .map_err(|e| e.to_string())?,
            );
        }
        let base = cmd_evaluate(
            &desk_config(seed, "ode"),
            None,
            Some(Baseline::Ode),
            false,
            dir.path(),
        )
        .map_err(|e| e.to_string())?;
        let (full, zeros) = (&scores[0], &scores[1]);
        let ok = full.crps < zeros.crps && full.mae < base.mae;
        passes += usize::from(ok);
        lines.push(format!(
            "seed {seed}: crps {:.4} vs zeros {:.4}, mae {:.4} vs ode {:.4} [{}]",
            full.crps,
            zeros.crps,
            full.mae,
            base.mae,
            if ok { "ok" } else { "miss" }
        ));
    }
    check(
        passes >= 2,
        format!("{passes}/3 seeds; {}", lines.join("; ")),
    )
}

fn small_config(seed: u64) -> RunConfig {
    let overrides: Vec<String> = [
        "precision=\"f32\"",
        "data.synth.nodes=6",
        "data.synth.steps=400",
        "data.windows.stride=4",
        "data.eval_stride=12",
        "model.blocks=1",
        "model.hidden=16",
        "model.heads=2",
        "schedule.steps=100",
        "train.epochs=4",
        "train.batch_size=8",
        "sampling.samples=4",
    ]
    .iter()
    .map(|s| s.to_string())
    .collect();
    RunConfig::resolve(None, &overrides, Some(seed)).expect("small config is valid")
}

fn determinism() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let run_once = |tag: &str| -> Result<Vec<(String, Vec<u8>)>, String> {
        let cfg = small_config(11);
        let root = dir.path().join(tag);
        let (t, s, e) = (
            root.join("train"),
            root.join("sample"),
            root.join("evaluate"),
        );
        for d in [&t, &s, &e] {
            fs::create_dir_all(d).map_err(|e| e.to_string())?;
        }
        let out = cmd_train(&cfg, None, &t).map_err(|e| e.to_string())?;
        cmd_sample(&cfg, &out.checkpoint, &s).map_err(|e| e.to_string())?;
        cmd_evaluate(&cfg, Some(&out.checkpoint), None, true, &e).map_err(|e| e.to_string())?;
        let mut files = Vec::new();
        for d in [&t, &s, &e] {
            let mut names: Vec<_> = fs::read_dir(d)
                .unwrap()
                .map(|f| f.unwrap().path())
                .collect();
            names.sort();
            for p in names {
                let rel = p.strip_prefix(&root).unwrap().display().to_string();
                files.push((rel, fs::read(&p).unwrap()));
            }
        }
        Ok(files)
    };
    let a = run_once("a")?;
    let b = run_once("b")?;
    let differing: Vec<&str> = a
        .iter()
        .zip(&b)
        .filter(|(x, y)| x != y)
        .map(|(x, _)| x.0.as_str())
        .collect();
    check(
        a.len() == b.len() && differing.is_empty() && !a.is_empty(),
        format!("{} files compared, differing: {differing:?}", a.len()),
    )
}

/// ∫(F(x) − 1{x ≥ y})² dx for the empirical step CDF, integrated exactly per segment.
fn crps_quadrature(samples: &[f64], y: f64) -> f64 {
    let mut pts: Vec<f64> = samples.to_vec();
    pts.push(y);
    pts.sort_by(f64::total_cmp);
    let k = samples.len() as f64;
    pts.windows(2)
        .filter(|w| w[1] > w[0])
        .map(|w| {
            let mid = 0.5 * (w[0] + w[1]);
            let f = samples.iter().filter(|&&x| x <= mid).count() as f64 / k;
            let step = if mid >= y { 1.0 } else { 0.0 };
            (f - step).powi(2) * (w[1] - w[0])
        })
        .sum()
}

fn crps_estimator() -> Outcome {
    let mut rng = RngStream::new(909, 0);
    let mut worst: f64 = 0.0;
    for _ in 0..200 {
        let k = rng.uniform_int(1, 16);
        let xs: Vec<f64> = (0..k).map(|_| 2.0 * rng.standard_normal::<f64>()).collect();
        let y = 2.0 * rng.standard_normal::<f64>();
        let e = crps_empirical(&xs, y).map_err(|e| e.to_string())?;
        worst = worst.max((e - crps_quadrature(&xs, y)).abs());
    }
    let half = crps_empirical(&[0.0, 1.0], 0.0).map_err(|e| e.to_string())?;
    check(
        worst <= 1e-6 && half == 0.25,
        format!("max deviation {worst:.2e}; {{0,1}} at 0 gives {half}"),
    )
}

fn main() -> ExitCode {
    let criteria: [(u32, &str, fn() -> Outcome); 10] = [
        (1, "accelerated-step table exactness", table_exactness),
        (2, "accelerated-step scaling law", scaling_law),
        (3, "ODE solver vs closed form", ode_oracle),
        (4, "forward-process identities", forward_identities),
        (5, "perfect-denoiser recovery", perfect_denoiser),
        (6, "denoiser gradient check", gradient_check),
        (7, "acceleration accounting", acceleration_accounting),
        (8, "desk-scale end-to-end", desk_end_to_end),
        (9, "CRPS estimator", crps_estimator),
        (10, "determinism", determinism),
    ];
    let selected: Vec<u32> = std::env::args()
        .skip(1)
        .filter_map(|a| a.parse().ok())
        .collect();
    let mut failed = 0;
    for (id, name, run) in criteria {
        if !selected.is_empty() && !selected.contains(&id) {
            continue;
        }
        let t = Instant::now();
        let outcome = run();
        let secs = t.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("PASS  {id:>2}  {name} ({secs:.1}s): {detail}"),
            Err(detail) => {
                failed += 1;
                println!("FAIL  {id:>2}  {name} ({secs:.1}s): {detail}");
            }
        }
    }
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
