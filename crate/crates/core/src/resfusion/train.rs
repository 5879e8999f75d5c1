use std::rc::Rc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fsd::FsdModel;
use crate::numerics::{Adam, AdamConfig, RngStream, Tape, Tensor};
use crate::resfusion::{
    forward_sample, future_positions, residual_field, training_target, PriorMode,
};
use crate::scalar::Scalar;
use crate::schedule::NoiseSchedule;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub optimizer: AdamConfig,
    /// Restrict the loss to the forecast window instead of the whole window.
    pub future_only_loss: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 200,
            batch_size: 32,
            optimizer: AdamConfig::default(),
            future_only_loss: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::config("train.batch_size", "must be positive"));
        }
        let o = &self.optimizer;
        if !(o.learning_rate > 0.0 && o.learning_rate.is_finite()) {
            return Err(Error::config(
                "train.optimizer.learning_rate",
                "must be positive and finite",
            ));
        }
        if !(0.0..1.0).contains(&o.beta1) || !(0.0..1.0).contains(&o.beta2) || o.eps <= 0.0 {
            return Err(Error::config(
                "train.optimizer",
                "need beta1, beta2 in [0, 1) and eps > 0",
            ));
        }
        Ok(())
    }
}

/// Clean windows and their conditioning inputs, both `[W, T, N, C]`.
#[derive(Clone, Debug)]
pub struct TrainingWindows<T> {
    pub x0: Tensor<T>,
    pub x_a: Tensor<T>,
    pub history: usize,
}

impl<T: Scalar> TrainingWindows<T> {
    pub fn new(x0: Tensor<T>, x_a: Tensor<T>, history: usize) -> Result<Self> {
        x0.expect_shape(x_a.shape())?;
        if x0.ndim() != 4 || x0.shape()[0] == 0 {
            return Err(Error::contract(format!(
                "training windows must be non-empty [W, T, N, C], got {:?}",
                x0.shape()
            )));
        }
        future_positions(x0.shape(), history)?;
        Ok(TrainingWindows { x0, x_a, history })
    }

    pub fn len(&self) -> usize {
        self.x0.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Residual field of window `w` under the given prior mode.
    pub fn residual(&self, w: usize, prior: PriorMode) -> Result<Tensor<T>> {
        match prior {
            PriorMode::Ode => residual_field(&self.x_a.index0(w), &self.x0.index0(w), self.history),
            PriorMode::Zeros => Ok(Tensor::zeros(&self.x0.shape()[1..])),
        }
    }
}

/// One pass over shuffled windows with one Adam update per batch.
///
/// All randomness comes from `stream.fork(epoch)`, so an epoch can be replayed
/// from a checkpoint. Returns the mean batch loss.
#[allow(clippy::too_many_arguments)]
pub fn train_epoch<T: Scalar>(
    model: &mut FsdModel<T>,
    optimizer: &mut Adam<T>,
    data: &TrainingWindows<T>,
    schedule: &NoiseSchedule<T>,
    prior: PriorMode,
    config: &TrainConfig,
    epoch: usize,
    stream: &RngStream,
) -> Result<f64> {
    config.validate()?;
    let mut rng = stream.fork(epoch as u64);
    let mut order: Vec<usize> = (0..data.len()).collect();
    rng.shuffle(&mut order);
    let item_shape = data.x0.shape()[1..].to_vec();
    let weights = if config.future_only_loss {
        let fut = future_positions(&item_shape, data.history)?;
        let one = Tensor::new(
            item_shape.clone(),
            fut.iter()
                .map(|&f| if f { T::one() } else { T::zero() })
                .collect(),
        )?;
        Some(one)
    } else {
        None
    };

    let mut total = 0.0;
    let mut batches = 0;
    for (bi, chunk) in order.chunks(config.batch_size).enumerate() {
        let mut xs = Vec::with_capacity(chunk.len());
        let mut xa = Vec::with_capacity(chunk.len());
        let mut targets = Vec::with_capacity(chunk.len());
        let mut steps = Vec::with_capacity(chunk.len());
        for &w in chunk {
            let s = rng.uniform_int(1, schedule.steps());
            let eps = rng.gaussian(&item_shape);
            let res = data.residual(w, prior)?;
            let x0 = data.x0.index0(w);
            xs.push(forward_sample(&x0, &res, schedule, s, &eps)?.x_s);
            targets.push(training_target(&eps, &res, schedule, s)?);
            xa.push(data.x_a.index0(w));
            steps.push(s);
        }
        let stack = |v: &[Tensor<T>]| Tensor::stack(&v.iter().collect::<Vec<_>>());
        let (xs, xa, target) = (stack(&xs)?, stack(&xa)?, stack(&targets)?);
        let w = match &weights {
            Some(one) => {
                let copies: Vec<&Tensor<T>> = (0..chunk.len()).map(|_| one).collect();
                Some(Rc::new(Tensor::stack(&copies)?))
            }
            None => None,
        };

        let tape = Tape::new();
        let grads = {
            let bound = model.bind(&tape, true);
            let out = bound.forward(&xs, &xa, &steps)?;
            let loss = tape.mse(out, Rc::new(target), w)?;
            let value = tape.value(loss).item();
            if !value.is_finite() {
                return Err(Error::NonFiniteLoss {
                    epoch,
                    batch: bi,
                    steps,
                });
            }
            total += value.to_f64_lossy();
            tape.grad(loss, bound.vars())?
        };
        optimizer.update(&mut model.params, &grads)?;
        if !model.params.all_finite() {
            return Err(Error::NonFiniteLoss {
                epoch,
                batch: bi,
                steps,
            });
        }
        batches += 1;
    }
    Ok(total / batches.max(1) as f64)
}
