//! Factored spectral denoiser.
//!
//! Each block attends over time per (node, channel), over channels per
//! (time, node), and filters across nodes in the Laplacian eigenbasis, then
//! gates the result with side information. Activations are laid out as
//! `[B, T, N, C, D]`.

use std::cell::Cell;
use std::rc::Rc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::SensorGraph;
use crate::numerics::{ParamStore, RngStream, Tape, Tensor, Var};
use crate::resfusion::Denoiser;
use crate::scalar::Scalar;

/// Which axis the spectral mixing layer acts on.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SpectralMix {
    /// D→D mixing of hidden features in the spectral domain.
    #[default]
    Hidden,
    /// C→C mixing across channels in the spectral domain.
    Channel,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FsdConfig {
    pub blocks: usize,
    pub hidden: usize,
    pub heads: usize,
    pub time_embedding: usize,
    pub node_embedding: usize,
    pub channel_embedding: usize,
    pub step_embedding: usize,
    pub spectral_mix: SpectralMix,
}

impl Default for FsdConfig {
    fn default() -> Self {
        FsdConfig {
            blocks: 8,
            hidden: 64,
            heads: 8,
            time_embedding: 16,
            node_embedding: 16,
            channel_embedding: 16,
            step_embedding: 128,
            spectral_mix: SpectralMix::Hidden,
        }
    }
}

impl FsdConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("model.blocks", self.blocks),
            ("model.hidden", self.hidden),
            ("model.heads", self.heads),
            ("model.time_embedding", self.time_embedding),
            ("model.node_embedding", self.node_embedding),
            ("model.channel_embedding", self.channel_embedding),
            ("model.step_embedding", self.step_embedding),
        ];
        for (field, v) in positive {
            if v == 0 {
                return Err(Error::config(field, "must be positive"));
            }
        }
        if self.hidden % self.heads != 0 {
            return Err(Error::config(
                "model.heads",
                format!(
                    "hidden size {} is not divisible by {} heads",
                    self.hidden, self.heads
                ),
            ));
        }
        if self.step_embedding % 2 != 0 || self.time_embedding % 2 != 0 {
            return Err(Error::config(
                "model.step_embedding",
                "sinusoidal widths must be even",
            ));
        }
        Ok(())
    }
}

/// Data-dependent extents: window length, history length, nodes, channels.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FsdDims {
    pub window: usize,
    pub history: usize,
    pub nodes: usize,
    pub channels: usize,
}

/// Multiply-add counts accumulated by forward passes, split by axis.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct FlopCounts {
    /// Score and value products of temporal attention (∝ T²).
    pub temporal_attention: u64,
    /// Score and value products of channel attention (∝ C²).
    pub channel_attention: u64,
    /// Spectral filter and mixing (∝ N).
    pub spectral_filter: u64,
    /// Dense eigenbasis projections (∝ N²).
    pub graph_transform: u64,
}

/// Sinusoidal code of width `dim` for position `pos`: sines then cosines.
pub fn sinusoidal<T: Scalar>(pos: f64, dim: usize) -> Vec<T> {
    let half = dim / 2;
    let mut out = vec![T::zero(); dim];
    for i in 0..half {
        let freq = (-(10000f64).ln() * i as f64 / half as f64).exp();
        out[i] = T::lit((pos * freq).sin());
        out[half + i] = T::lit((pos * freq).cos());
    }
    out
}

/// Denoiser parameters plus the fixed graph basis and side-information tables.
pub struct FsdModel<T: Scalar> {
    config: FsdConfig,
    dims: FsdDims,
    pub params: ParamStore<T>,
    basis: Rc<Tensor<T>>,
    basis_t: Rc<Tensor<T>>,
    fingerprint: String,
    time_code: Tensor<T>,
    mask: Tensor<T>,
    flops: Cell<FlopCounts>,
}

fn uniform_init<T: Scalar>(rng: &mut RngStream, shape: &[usize], fan_in: usize) -> Tensor<T> {
    let bound = 1.0 / (fan_in as f64).sqrt();
    rng.uniform(shape, -bound, bound)
}

impl<T: Scalar> FsdModel<T> {
    /// Fresh model with fan-scaled uniform weights, unit spectral filters and
    /// N(0, 0.02²) node/channel embeddings.
    pub fn new(
        config: FsdConfig,
        dims: FsdDims,
        graph: &SensorGraph<T>,
        rng: &mut RngStream,
    ) -> Result<Self> {
        config.validate()?;
        if dims.window == 0 || dims.nodes == 0 || dims.channels == 0 || dims.history > dims.window {
            return Err(Error::contract(format!(
                "invalid denoiser dimensions {dims:?}"
            )));
        }
        if graph.n_nodes() != dims.nodes {
            return Err(Error::Shape {
                expected: vec![dims.nodes],
                actual: vec![graph.n_nodes()],
            });
        }
        let d = config.hidden;
        let (n, c) = (dims.nodes, dims.channels);
        let mut p = ParamStore::new();
        p.insert("input.w", uniform_init(rng, &[2, d], 2));
        p.insert("input.b", uniform_init(rng, &[d], 2));
        let se = config.step_embedding;
        p.insert("step.w1", uniform_init(rng, &[se, d], se));
        p.insert("step.b1", uniform_init(rng, &[d], se));
        p.insert("step.w2", uniform_init(rng, &[d, d], d));
        p.insert("step.b2", uniform_init(rng, &[d], d));
        p.insert(
            "side.node",
            rng.gaussian::<T>(&[n, config.node_embedding])
                .scale(T::lit(0.02)),
        );
        p.insert(
            "side.channel",
            rng.gaussian::<T>(&[c, config.channel_embedding])
                .scale(T::lit(0.02)),
        );
        for b in 0..config.blocks {
            let k = |s: &str| format!("block{b}.{s}");
            p.insert(k("step.w"), uniform_init(rng, &[d, d], d));
            p.insert(k("step.b"), uniform_init(rng, &[d], d));
            for axis in ["temporal", "channel"] {
                p.insert(
                    k(&format!("{axis}.wqkv")),
                    uniform_init(rng, &[d, 3 * d], d),
                );
                p.insert(k(&format!("{axis}.bqkv")), uniform_init(rng, &[3 * d], d));
                p.insert(k(&format!("{axis}.wo")), uniform_init(rng, &[d, d], d));
                p.insert(k(&format!("{axis}.bo")), uniform_init(rng, &[d], d));
                p.insert(k(&format!("{axis}.ln.g")), Tensor::ones(&[d]));
                p.insert(k(&format!("{axis}.ln.b")), Tensor::zeros(&[d]));
            }
            p.insert(k("spectral.g"), Tensor::ones(&[n, c]));
            match config.spectral_mix {
                SpectralMix::Hidden => p.insert(k("spectral.mix"), uniform_init(rng, &[d, d], d)),
                SpectralMix::Channel => p.insert(k("spectral.mix"), uniform_init(rng, &[c, c], c)),
            }
            let side = config.time_embedding + config.node_embedding + config.channel_embedding + 1;
            p.insert(k("gate.w_mid"), uniform_init(rng, &[d, 2 * d], d));
            p.insert(k("gate.b_mid"), uniform_init(rng, &[2 * d], d));
            p.insert(
                k("gate.w_time"),
                uniform_init(rng, &[config.time_embedding, 2 * d], side),
            );
            p.insert(
                k("gate.w_node"),
                uniform_init(rng, &[config.node_embedding, 2 * d], side),
            );
            p.insert(
                k("gate.w_channel"),
                uniform_init(rng, &[config.channel_embedding, 2 * d], side),
            );
            p.insert(k("gate.w_mask"), uniform_init(rng, &[1, 2 * d], side));
            p.insert(k("gate.b_side"), uniform_init(rng, &[2 * d], side));
            p.insert(k("gate.w_out"), uniform_init(rng, &[d, 2 * d], d));
            p.insert(k("gate.b_out"), uniform_init(rng, &[2 * d], d));
        }
        p.insert("final.ln.g", Tensor::ones(&[d]));
        p.insert("final.ln.b", Tensor::zeros(&[d]));
        p.insert("final.w1", uniform_init(rng, &[d, d], d));
        p.insert("final.b1", uniform_init(rng, &[d], d));
        p.insert("final.w2", uniform_init(rng, &[d, 1], d));
        p.insert("final.b2", uniform_init(rng, &[1], d));
        Self::with_params(config, dims, graph, p)
    }

    /// Wraps an existing parameter store, checking it against the expected manifest.
    pub fn with_params(
        config: FsdConfig,
        dims: FsdDims,
        graph: &SensorGraph<T>,
        params: ParamStore<T>,
    ) -> Result<Self> {
        config.validate()?;
        if graph.n_nodes() != dims.nodes {
            return Err(Error::Shape {
                expected: vec![dims.nodes],
                actual: vec![graph.n_nodes()],
            });
        }
        let te = config.time_embedding;
        let mut time_code = Tensor::zeros(&[dims.window, te]);
        for t in 0..dims.window {
            for (j, v) in sinusoidal::<T>(t as f64, te).into_iter().enumerate() {
                time_code.set(&[t, j], v);
            }
        }
        let mask = Tensor::from_fn(&[dims.window, dims.nodes, dims.channels, 1], |ix| {
            if ix[0] < dims.history {
                T::one()
            } else {
                T::zero()
            }
        });
        let model = FsdModel {
            config,
            dims,
            params,
            basis: Rc::new(graph.eigenvectors().clone()),
            basis_t: Rc::new(graph.eigenvectors().transpose2()),
            fingerprint: graph.fingerprint(),
            time_code,
            mask,
            flops: Cell::new(FlopCounts::default()),
        };
        if !model.params.all_finite() {
            return Err(Error::Checkpoint(
                "parameters contain non-finite values".into(),
            ));
        }
        Ok(model)
    }

    pub fn config(&self) -> FsdConfig {
        self.config
    }

    pub fn dims(&self) -> FsdDims {
        self.dims
    }

    pub fn graph_fingerprint(&self) -> &str {
        &self.fingerprint
    }

    pub fn flops(&self) -> FlopCounts {
        self.flops.get()
    }

    pub fn reset_flops(&self) {
        self.flops.set(FlopCounts::default());
    }

    fn count(&self, f: impl FnOnce(&mut FlopCounts)) {
        let mut c = self.flops.get();
        f(&mut c);
        self.flops.set(c);
    }

    /// Records parameters on `tape`, as differentiable leaves when `trainable`.
    pub fn bind<'a>(&'a self, tape: &'a Tape<T>, trainable: bool) -> Bound<'a, T> {
        let vars = if trainable {
            self.params.register(tape)
        } else {
            self.params
                .tensors()
                .map(|t| tape.constant(t.clone()))
                .collect()
        };
        Bound {
            model: self,
            tape,
            vars,
        }
    }

    /// Plain forward pass returning `[B, T, N, C]`.
    pub fn forward(&self, x_s: &Tensor<T>, x_a: &Tensor<T>, steps: &[usize]) -> Result<Tensor<T>> {
        let tape = Tape::new();
        let bound = self.bind(&tape, false);
        let out = bound.forward(x_s, x_a, steps)?;
        Ok((*tape.value(out)).clone())
    }
}

impl<T: Scalar> Denoiser<T> for FsdModel<T> {
    fn predict(
        &self,
        x_s: &Tensor<T>,
        x_a: &Tensor<T>,
        steps: &[usize],
        _windows: &[usize],
    ) -> Result<Tensor<T>> {
        self.forward(x_s, x_a, steps)
    }
}

/// A model whose parameters have been recorded on a tape.
pub struct Bound<'a, T: Scalar> {
    model: &'a FsdModel<T>,
    tape: &'a Tape<T>,
    vars: Vec<Var>,
}

impl<'a, T: Scalar> Bound<'a, T> {
    /// Parameter vars in store order, for [`Tape::grad`].
    pub fn vars(&self) -> &[Var] {
        &self.vars
    }

    pub fn tape(&self) -> &'a Tape<T> {
        self.tape
    }

    fn p(&self, name: &str) -> Result<Var> {
        Ok(self.vars[self.model.params.index_of(name)?])
    }

    fn pb(&self, block: usize, name: &str) -> Result<Var> {
        self.p(&format!("block{block}.{name}"))
    }

    /// Step code through the shared two-layer MLP: `[B, D]`.
    pub fn embed_step(&self, steps: &[usize]) -> Result<Var> {
        let se = self.model.config.step_embedding;
        let mut code = Vec::with_capacity(steps.len() * se);
        for &s in steps {
            if s == 0 {
                return Err(Error::contract("diffusion steps are 1-based"));
            }
            code.extend(sinusoidal::<T>(s as f64, se));
        }
        let t = self.tape;
        let x = t.constant(Tensor::new(vec![steps.len(), se], code)?);
        let h = t.silu(t.linear(x, self.p("step.w1")?, self.p("step.b1")?)?);
        t.linear(h, self.p("step.w2")?, self.p("step.b2")?)
    }

    /// Position-wise 2→D projection of `(x_s, x_a)`: `[B, T, N, C, D]`.
    pub fn stack_inputs(&self, x_s: &Tensor<T>, x_a: &Tensor<T>) -> Result<Var> {
        x_s.expect_shape(x_a.shape())?;
        let dims = self.model.dims;
        let want = [dims.window, dims.nodes, dims.channels];
        if x_s.ndim() != 4 || x_s.shape()[1..] != want {
            return Err(Error::Shape {
                expected: want.to_vec(),
                actual: x_s.shape().to_vec(),
            });
        }
        let mut shape = x_s.shape().to_vec();
        shape.push(2);
        let mut data = Vec::with_capacity(x_s.len() * 2);
        for (&a, &b) in x_s.data().iter().zip(x_a.data()) {
            data.push(a);
            data.push(b);
        }
        let x = self.tape.constant(Tensor::new(shape, data)?);
        self.tape.linear(x, self.p("input.w")?, self.p("input.b")?)
    }

    /// Multi-head self-attention over the middle axis of `x: [G, L, D]`,
    /// followed by residual add and layer norm.
    fn attend(&self, x: Var, prefix: &str) -> Result<(Var, u64)> {
        let t = self.tape;
        let shape = t.shape(x);
        let (g, l, d) = (shape[0], shape[1], shape[2]);
        let a = self.model.config.heads;
        let dh = d / a;
        let qkv = t.linear(
            x,
            self.p(&format!("{prefix}.wqkv"))?,
            self.p(&format!("{prefix}.bqkv"))?,
        )?;
        let heads = |start: usize| -> Result<Var> {
            let part = t.narrow_last(qkv, start, d)?;
            let r = t.reshape(part, &[g, l, a, dh])?;
            t.reshape(t.permute(r, &[0, 2, 1, 3]), &[g * a, l, dh])
        };
        let (q, k, v) = (heads(0)?, heads(d)?, heads(2 * d)?);
        let scores = t.scale(
            t.bmm(q, k, true)?,
            T::one() / T::from_usize_lossy(dh).sqrt(),
        );
        let attn = t.bmm(t.softmax_last(scores), v, false)?;
        let merged = t.reshape(
            t.permute(t.reshape(attn, &[g, a, l, dh])?, &[0, 2, 1, 3]),
            &[g, l, d],
        )?;
        let proj = t.linear(
            merged,
            self.p(&format!("{prefix}.wo"))?,
            self.p(&format!("{prefix}.bo"))?,
        )?;
        let out = t.layer_norm(
            t.add(x, proj)?,
            self.p(&format!("{prefix}.ln.g"))?,
            self.p(&format!("{prefix}.ln.b"))?,
        )?;
        Ok((out, 4 * (g * l * l * d) as u64))
    }

    /// Attention along T for every (node, channel) sequence.
    pub fn temporal_attention(&self, block: usize, h: Var) -> Result<Var> {
        let t = self.tape;
        let s = t.shape(h);
        let (b, tl, n, c, d) = (s[0], s[1], s[2], s[3], s[4]);
        let seq = t.reshape(t.permute(h, &[0, 2, 3, 1, 4]), &[b * n * c, tl, d])?;
        let (out, flops) = self.attend(seq, &format!("block{block}.temporal"))?;
        self.model.count(|f| f.temporal_attention += flops);
        Ok(t.permute(t.reshape(out, &[b, n, c, tl, d])?, &[0, 3, 1, 2, 4]))
    }

    /// Attention along C for every (time, node) pair.
    pub fn channel_attention(&self, block: usize, h: Var) -> Result<Var> {
        let t = self.tape;
        let s = t.shape(h);
        let seq = t.reshape(h, &[s[0] * s[1] * s[2], s[3], s[4]])?;
        let (out, flops) = self.attend(seq, &format!("block{block}.channel"))?;
        self.model.count(|f| f.channel_attention += flops);
        t.reshape(out, &s)
    }

    /// `h + U·mix(g ⊙ Uᵀh)` with the transform taken along the node axis.
    pub fn spectral_conv(&self, block: usize, h: Var) -> Result<Var> {
        let t = self.tape;
        let s = t.shape(h);
        let (b, tl, n, c, d) = (s[0], s[1], s[2], s[3], s[4]);
        if n != self.model.basis.shape()[0] {
            return Err(Error::Shape {
                expected: vec![self.model.basis.shape()[0]],
                actual: s.clone(),
            });
        }
        let moved = t.permute(h, &[2, 0, 1, 3, 4]);
        let spec = t.left_matmul(self.model.basis_t.clone(), moved)?;
        let g = t.reshape(self.pb(block, "spectral.g")?, &[n, 1, 1, c, 1])?;
        let filtered = t.mul_bcast(spec, g)?;
        let mix = self.pb(block, "spectral.mix")?;
        let mixed = match self.model.config.spectral_mix {
            SpectralMix::Hidden => t.matmul_last(filtered, mix)?,
            SpectralMix::Channel => {
                let swapped = t.permute(filtered, &[0, 1, 2, 4, 3]);
                t.permute(t.matmul_last(swapped, mix)?, &[0, 1, 2, 4, 3])
            }
        };
        let back = t.left_matmul(self.model.basis.clone(), mixed)?;
        let rows = (b * tl * n * c) as u64;
        let mix_cost = match self.model.config.spectral_mix {
            SpectralMix::Hidden => d as u64,
            SpectralMix::Channel => c as u64,
        };
        self.model.count(|f| {
            f.spectral_filter += rows * d as u64 * (1 + mix_cost);
            f.graph_transform += 2 * (n * n * b * tl * c * d) as u64;
        });
        t.add(h, t.permute(back, &[1, 2, 0, 3, 4]))
    }

    /// Side-information projection to `[T, N, C, 2D]`.
    fn side_condition(&self, block: usize) -> Result<Var> {
        let t = self.tape;
        let dims = self.model.dims;
        let d2 = 2 * self.model.config.hidden;
        let mask = t.constant(self.model.mask.clone());
        let mut cond = t.matmul_last(mask, self.pb(block, "gate.w_mask")?)?;
        let time = t.matmul_last(
            t.constant(self.model.time_code.clone()),
            self.pb(block, "gate.w_time")?,
        )?;
        cond = t.add_bcast(cond, t.reshape(time, &[dims.window, 1, 1, d2])?)?;
        let node = t.matmul_last(self.p("side.node")?, self.pb(block, "gate.w_node")?)?;
        cond = t.add_bcast(cond, t.reshape(node, &[dims.nodes, 1, d2])?)?;
        let chan = t.matmul_last(self.p("side.channel")?, self.pb(block, "gate.w_channel")?)?;
        cond = t.add_bcast(cond, chan)?;
        t.add_bcast(cond, self.pb(block, "gate.b_side")?)
    }

    /// Gate activation `σ(g)·tanh(f)` of `h` plus side information, before the output split.
    pub fn gate_activation(&self, block: usize, h: Var) -> Result<Var> {
        let t = self.tape;
        let d = self.model.config.hidden;
        let mid = t.linear(
            h,
            self.pb(block, "gate.w_mid")?,
            self.pb(block, "gate.b_mid")?,
        )?;
        let z = t.add_bcast(mid, self.side_condition(block)?)?;
        let gate = t.sigmoid(t.narrow_last(z, 0, d)?);
        let filt = t.tanh(t.narrow_last(z, d, d)?);
        t.mul_bcast(gate, filt)
    }

    /// Gated output split into `(residual, skip)`.
    pub fn gated_output(&self, block: usize, h: Var) -> Result<(Var, Var)> {
        let t = self.tape;
        let d = self.model.config.hidden;
        let y = self.gate_activation(block, h)?;
        let out = t.linear(
            y,
            self.pb(block, "gate.w_out")?,
            self.pb(block, "gate.b_out")?,
        )?;
        Ok((t.narrow_last(out, 0, d)?, t.narrow_last(out, d, d)?))
    }

    /// Noise estimate `[B, T, N, C]` for noisy windows `x_s` at `steps`.
    pub fn forward(&self, x_s: &Tensor<T>, x_a: &Tensor<T>, steps: &[usize]) -> Result<Var> {
        let t = self.tape;
        let cfg = self.model.config;
        let bsz = x_s.shape().first().copied().unwrap_or(0);
        if steps.len() != bsz {
            return Err(Error::contract(format!(
                "{} steps for a batch of {bsz}",
                steps.len()
            )));
        }
        let d = cfg.hidden;
        let mut h = self.stack_inputs(x_s, x_a)?;
        let emb = self.embed_step(steps)?;
        let mut skips: Option<Var> = None;
        let inv_sqrt2 = T::one() / T::lit(2.0).sqrt();
        for blk in 0..cfg.blocks {
            let step = t.linear(emb, self.pb(blk, "step.w")?, self.pb(blk, "step.b")?)?;
            let x = t.add_bcast(h, t.reshape(step, &[bsz, 1, 1, 1, d])?)?;
            let x = self.temporal_attention(blk, x)?;
            let x = self.channel_attention(blk, x)?;
            let x = self.spectral_conv(blk, x)?;
            let (res, skip) = self.gated_output(blk, x)?;
            h = t.scale(t.add(h, res)?, inv_sqrt2);
            skips = Some(match skips {
                Some(acc) => t.add(acc, skip)?,
                None => skip,
            });
            if !t.value(h).all_finite() || !t.value(skip).all_finite() {
                return Err(Error::NonFiniteActivation {
                    location: format!("block {blk}"),
                });
            }
        }
        let total = skips.ok_or_else(|| Error::contract("model has no blocks"))?;
        let y = t.layer_norm(total, self.p("final.ln.g")?, self.p("final.ln.b")?)?;
        let y = t.silu(t.linear(y, self.p("final.w1")?, self.p("final.b1")?)?);
        let y = t.linear(y, self.p("final.w2")?, self.p("final.b2")?)?;
        let out = t.reshape(y, x_s.shape())?;
        if !t.value(out).all_finite() {
            return Err(Error::NonFiniteActivation {
                location: "output projection".into(),
            });
        }
        Ok(out)
    }
}
