//! Training objective, Adam with step-decay learning rate, and the seeded
//! training loop.
//!
//! The objective is `α·task_loss + λ₁·Σ|w| + λ₂·Σw²` where the penalties run
//! over weights only. One epoch is one Adam step on a freshly sampled batch.

use std::time::Instant;

use ndarray::Zip;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::netcore::{self, NetworkParams, NetworkShape};
use crate::tasks::{self, Batch, TaskKind, TaskSpec};

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPSILON: f64 = 1e-8;

/// Stream index used for the fixed evaluation batch, distinct from the
/// training stream (stream 0) of the same seed.
const EVAL_STREAM: u64 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub alpha: f64,
    pub lambda1: f64,
    pub lambda2: f64,
    pub epochs: u64,
    pub batch_size: usize,
    pub lr_initial: f64,
    pub lr_decay_factor: f64,
    pub lr_decay_every: u64,
    pub seed: u64,
    #[serde(default)]
    pub beta: Option<f64>,
    /// Size of the fixed held-out batch used for checkpoint losses.
    #[serde(default = "default_eval_samples")]
    pub eval_samples: usize,
}

fn default_eval_samples() -> usize {
    4096
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            alpha: 1.0,
            lambda1: 1e-4,
            lambda2: 5e-4,
            epochs: 100_000,
            batch_size: 500,
            lr_initial: 0.01,
            lr_decay_factor: 0.3,
            lr_decay_every: 20_000,
            seed: 0,
            beta: None,
            eval_samples: default_eval_samples(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if !(self.alpha.is_finite() && self.alpha > 0.0) {
            return bad(format!("alpha must be > 0, got {}", self.alpha));
        }
        if !(self.lambda1 >= 0.0 && self.lambda2 >= 0.0) {
            return bad("lambda1 and lambda2 must be >= 0".into());
        }
        if self.batch_size == 0 || self.eval_samples == 0 {
            return bad("batch_size and eval_samples must be >= 1".into());
        }
        if !(self.lr_initial > 0.0) {
            return bad("lr_initial must be > 0".into());
        }
        if !(self.lr_decay_factor > 0.0 && self.lr_decay_factor < 1.0) {
            return bad("lr_decay_factor must lie in (0, 1)".into());
        }
        if self.lr_decay_every == 0 {
            return bad("lr_decay_every must be >= 1".into());
        }
        if let Some(b) = self.beta {
            if !(0.0..=1.0).contains(&b) {
                return bad(format!("beta {b} outside [0, 1]"));
            }
        }
        Ok(())
    }

    /// Checks the config against the task it will train: `beta` is present
    /// exactly for parallel tasks and agrees with the task's own weighting.
    pub fn validate_for(&self, task: &TaskSpec) -> Result<()> {
        self.validate()?;
        task.validate()?;
        match (task.kind, self.beta, task.beta) {
            (TaskKind::Parallel, Some(a), Some(b)) if a == b => Ok(()),
            (TaskKind::Parallel, _, _) => Err(Error::InvalidConfig(
                "parallel task needs config.beta equal to the task's beta".into(),
            )),
            (_, None, _) => Ok(()),
            (kind, Some(_), _) => Err(Error::InvalidConfig(format!("beta given for a {kind} task"))),
        }
    }

    /// Cadence of loss checkpoints: every `max(1, epochs/100)` steps.
    pub fn checkpoint_every(&self) -> u64 {
        (self.epochs / 100).max(1)
    }
}

/// `lr_initial · decay^⌊epoch / decay_every⌋`.
pub fn lr_at(epoch: u64, config: &TrainConfig) -> f64 {
    let k = (epoch / config.lr_decay_every) as i32;
    config.lr_initial * config.lr_decay_factor.powi(k)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ObjectiveValue {
    pub total: f64,
    pub task_loss: f64,
}

/// `λ₁·Σ|w| + λ₂·Σw²` over weights (biases excluded).
pub fn penalty(params: &NetworkParams, config: &TrainConfig) -> f64 {
    config.lambda1 * params.weight_l1() + config.lambda2 * params.weight_l2_sq()
}

pub fn objective(
    params: &NetworkParams,
    batch: &Batch,
    task: &TaskSpec,
    config: &TrainConfig,
) -> Result<ObjectiveValue> {
    let predictions = netcore::forward(params, batch.inputs.view())?;
    let task_loss = tasks::task_loss(task, predictions.view(), batch)?;
    Ok(ObjectiveValue {
        total: config.alpha * task_loss + penalty(params, config),
        task_loss,
    })
}

/// Objective value and its exact gradient. The L1 subgradient at exactly
/// zero is taken as 0.
pub fn objective_gradient(
    params: &NetworkParams,
    batch: &Batch,
    task: &TaskSpec,
    config: &TrainConfig,
) -> Result<(ObjectiveValue, NetworkParams)> {
    let cache = netcore::forward_cached(params, batch.inputs.view())?;
    let task_loss = tasks::task_loss(task, cache.outputs.view(), batch)?;
    let mut output_grad = tasks::task_loss_gradient(task, cache.outputs.view(), batch)?;
    output_grad *= config.alpha;
    let mut grads = netcore::backward(params, batch.inputs.view(), &cache, output_grad.view())?;
    let (l1, l2) = (config.lambda1, config.lambda2);
    for (g, p) in grads.layers_mut().iter_mut().zip(params.layers()) {
        Zip::from(&mut g.weights).and(&p.weights).for_each(|g, &w| {
            let sign = if w > 0.0 {
                1.0
            } else if w < 0.0 {
                -1.0
            } else {
                0.0
            };
            *g += l1 * sign + 2.0 * l2 * w;
        });
    }
    let value = ObjectiveValue {
        total: config.alpha * task_loss + penalty(params, config),
        task_loss,
    };
    Ok((value, grads))
}

/// First and second moment accumulators for Adam.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub first_moment: NetworkParams,
    pub second_moment: NetworkParams,
    pub step: u64,
}

impl AdamState {
    pub fn new(shape: &NetworkShape) -> Result<Self> {
        Ok(Self {
            first_moment: NetworkParams::zeros(shape)?,
            second_moment: NetworkParams::zeros(shape)?,
            step: 0,
        })
    }
}

/// One bias-corrected Adam update, in place. Parameters and state are left
/// untouched when any gradient entry is non-finite.
pub fn adam_update(params: &mut NetworkParams, grads: &NetworkParams, state: &mut AdamState, lr: f64) -> Result<()> {
    if params.shape() != grads.shape() || params.shape() != state.first_moment.shape() {
        return Err(Error::InvalidShape(
            "gradient/state shape differs from parameters".into(),
        ));
    }
    for (idx, g) in grads.layers().iter().enumerate() {
        if !(g.weights.iter().all(|v| v.is_finite()) && g.biases.iter().all(|v| v.is_finite())) {
            return Err(Error::NonFiniteGradient { layer: idx });
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - ADAM_BETA1.powi(t);
    let c2 = 1.0 - ADAM_BETA2.powi(t);
    let update = |p: &mut f64, g: &f64, m: &mut f64, v: &mut f64| {
        *m = ADAM_BETA1 * *m + (1.0 - ADAM_BETA1) * g;
        *v = ADAM_BETA2 * *v + (1.0 - ADAM_BETA2) * g * g;
        let m_hat = *m / c1;
        let v_hat = *v / c2;
        *p -= lr * m_hat / (v_hat.sqrt() + ADAM_EPSILON);
    };
    let layers = params.layers_mut().iter_mut().zip(grads.layers()).zip(
        state
            .first_moment
            .layers_mut()
            .iter_mut()
            .zip(state.second_moment.layers_mut().iter_mut()),
    );
    for ((p, g), (m, v)) in layers {
        Zip::from(&mut p.weights)
            .and(&g.weights)
            .and(&mut m.weights)
            .and(&mut v.weights)
            .for_each(update);
        Zip::from(&mut p.biases)
            .and(&g.biases)
            .and(&mut m.biases)
            .and(&mut v.biases)
            .for_each(update);
    }
    Ok(())
}

/// Functional form of [`adam_update`].
pub fn adam_step(
    params: &NetworkParams,
    grads: &NetworkParams,
    state: &AdamState,
    lr: f64,
) -> Result<(NetworkParams, AdamState)> {
    let mut p = params.clone();
    let mut s = state.clone();
    adam_update(&mut p, grads, &mut s, lr)?;
    Ok((p, s))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub epoch: u64,
    pub task_loss: f64,
    pub total: f64,
}

#[derive(Debug, Clone)]
pub struct TrainRecord {
    pub config: TrainConfig,
    pub task: TaskSpec,
    pub shape: NetworkShape,
    /// Losses on the fixed evaluation batch. The first entry is taken before
    /// any update, the last after the final one.
    pub checkpoints: Vec<Checkpoint>,
    pub initial_params: NetworkParams,
    pub final_params: NetworkParams,
    pub wall_time_secs: f64,
}

impl TrainRecord {
    pub fn initial_task_loss(&self) -> f64 {
        self.checkpoints.first().map(|c| c.task_loss).unwrap_or(f64::NAN)
    }

    pub fn final_task_loss(&self) -> f64 {
        self.checkpoints.last().map(|c| c.task_loss).unwrap_or(f64::NAN)
    }

    pub fn to_document(&self, weights_ref: &str) -> TrainRecordDocument {
        TrainRecordDocument {
            version: 1,
            config: self.config.clone(),
            task: self.task.clone(),
            shape: self.shape.clone(),
            checkpoints: self
                .checkpoints
                .iter()
                .map(|c| (c.epoch, c.task_loss, c.total))
                .collect(),
            weights: weights_ref.to_string(),
            wall_time_secs: self.wall_time_secs,
        }
    }
}

/// JSON form of a [`TrainRecord`]; final weights live in a separate weight
/// dump referenced by `weights`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainRecordDocument {
    pub version: u32,
    pub config: TrainConfig,
    pub task: TaskSpec,
    pub shape: NetworkShape,
    pub checkpoints: Vec<(u64, f64, f64)>,
    pub weights: String,
    pub wall_time_secs: f64,
}

fn evaluate(
    params: &NetworkParams,
    batch: &Batch,
    task: &TaskSpec,
    config: &TrainConfig,
    epoch: u64,
) -> Result<Checkpoint> {
    let v = objective(params, batch, task, config)?;
    Ok(Checkpoint {
        epoch,
        task_loss: v.task_loss,
        total: v.total,
    })
}

/// Trains a freshly initialized network. Initialization and every training
/// batch come from one ChaCha8 stream seeded with `config.seed`; the
/// evaluation batch comes from a separate stream of the same seed.
pub fn train(task: &TaskSpec, shape: &NetworkShape, config: &TrainConfig) -> Result<TrainRecord> {
    config.validate_for(task)?;
    shape.validate()?;
    if shape.input_dim != task.input_dim() || shape.output_dim != task.output_dim() {
        return Err(Error::InvalidShape(format!(
            "network {}→{} does not fit task {}→{}",
            shape.input_dim,
            shape.output_dim,
            task.input_dim(),
            task.output_dim()
        )));
    }
    let started = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut eval_rng = ChaCha8Rng::seed_from_u64(config.seed);
    eval_rng.set_stream(EVAL_STREAM);

    let initial_params = NetworkParams::init_uniform(shape, &mut rng)?;
    let eval_batch = tasks::sample_batch(task, config.eval_samples, &mut eval_rng)?;
    let mut params = initial_params.clone();
    let mut state = AdamState::new(shape)?;
    let cadence = config.checkpoint_every();
    let mut checkpoints = vec![evaluate(&params, &eval_batch, task, config, 0)?];

    let abort = |epoch: u64, checkpoints: Vec<Checkpoint>, params: NetworkParams, initial: NetworkParams| {
        Error::NonFiniteLoss {
            epoch,
            record: Box::new(TrainRecord {
                config: config.clone(),
                task: task.clone(),
                shape: shape.clone(),
                checkpoints,
                initial_params: initial,
                final_params: params,
                wall_time_secs: started.elapsed().as_secs_f64(),
            }),
        }
    };

    for epoch in 0..config.epochs {
        let batch = tasks::sample_batch(task, config.batch_size, &mut rng)?;
        let (value, grads) = objective_gradient(&params, &batch, task, config)?;
        if !value.total.is_finite() {
            return Err(abort(epoch, checkpoints, params, initial_params));
        }
        adam_update(&mut params, &grads, &mut state, lr_at(epoch, config))?;
        let done = epoch + 1;
        if done % cadence == 0 || done == config.epochs {
            let c = evaluate(&params, &eval_batch, task, config, done)?;
            let finite = c.total.is_finite();
            if checkpoints.last().map(|l| l.epoch) != Some(done) {
                checkpoints.push(c);
            }
            if !finite {
                return Err(abort(done, checkpoints, params, initial_params));
            }
        }
    }

    Ok(TrainRecord {
        config: config.clone(),
        task: task.clone(),
        shape: shape.clone(),
        checkpoints,
        initial_params,
        final_params: params,
        wall_time_secs: started.elapsed().as_secs_f64(),
    })
}
