//! Training: the joint translation-plus-reconstruction objective, the noam
//! learning-rate schedule, gradient clipping, and the epoch loop with
//! early stopping on validation perplexity.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::arch::{
    forward_triplet, CascadeAblation, Checkpoint, ForwardOutput, ModelConfig, ModelParams,
    ModelVars, Triplet,
};
use crate::blocks::{DropoutMode, ModelError};
use crate::data::{batches, ContextMode};
use crate::tensor::{adam_step, AdamSlot, Tape, TensorError, Var};

/// Adam moment decays and epsilon, the usual transformer settings.
pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.98;
pub const ADAM_EPS: f64 = 1e-9;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("learning-rate schedule is undefined at step 0")]
    ZeroStep,
    #[error(
        "non-finite loss {loss} at step {step} (epoch {epoch}, batch {batch}, lr {lr:.3e}); \
         aborting"
    )]
    NonFinite {
        loss: f64,
        step: u64,
        epoch: usize,
        batch: usize,
        lr: f64,
    },
    #[error("{0} is empty")]
    EmptyData(&'static str),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// Learning-rate schedule. The noam defaults are the paper-scale settings;
/// tiny desk models want a fixed rate instead, because the noam curve at
/// small `d_model` and early steps is far below anything that trains.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum LrMode {
    Noam { init: f64, warmup: u64 },
    Fixed { value: f64 },
}

impl Default for LrMode {
    fn default() -> Self {
        LrMode::Noam {
            init: 0.2,
            warmup: 16_000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    /// Joint-loss mix: `alpha * NLL_translation + (1 - alpha) * NLL_reconstruction`.
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    #[serde(default)]
    pub lr_mode: LrMode,
    /// Epochs without validation improvement tolerated before stopping.
    #[serde(default = "default_patience")]
    pub patience: usize,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub seed: u64,
    /// Global gradient-norm ceiling; `None` disables clipping.
    #[serde(default = "default_clip_norm")]
    pub clip_norm: Option<f64>,
    /// Label-smoothing mass; `None` trains on hard targets.
    #[serde(default)]
    pub label_smoothing: Option<f64>,
}

fn default_alpha() -> f64 {
    0.5
}

fn default_patience() -> usize {
    10
}

fn default_clip_norm() -> Option<f64> {
    Some(1.0)
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(TrainError::Config(format!(
                "alpha must lie in [0, 1], got {}",
                self.alpha
            )));
        }
        match self.lr_mode {
            LrMode::Noam { warmup, init } => {
                if warmup == 0 {
                    return Err(TrainError::Config("noam warmup must be at least 1".into()));
                }
                if !(init > 0.0) {
                    return Err(TrainError::Config(format!(
                        "noam init must be positive, got {init}"
                    )));
                }
            }
            LrMode::Fixed { value } => {
                if !value.is_finite() || value < 0.0 {
                    return Err(TrainError::Config(format!(
                        "fixed learning rate must be finite and non-negative, got {value}"
                    )));
                }
            }
        }
        if self.batch_size == 0 {
            return Err(TrainError::Config("batch_size must be at least 1".into()));
        }
        if self.max_epochs == 0 {
            return Err(TrainError::Config("max_epochs must be at least 1".into()));
        }
        if let Some(c) = self.clip_norm {
            if !(c > 0.0) {
                return Err(TrainError::Config(format!(
                    "clip_norm must be positive, got {c}"
                )));
            }
        }
        if let Some(eps) = self.label_smoothing {
            if !(0.0..1.0).contains(&eps) {
                return Err(TrainError::Config(format!(
                    "label_smoothing must lie in [0, 1), got {eps}"
                )));
            }
        }
        Ok(())
    }
}

/// Noam schedule: `init * d_model^(-1/2) * min(step^(-1/2), step * warmup^(-3/2))`.
/// Ramps linearly to the peak at `step == warmup`, then decays as the
/// inverse square root.
pub fn noam_lr(step: u64, d_model: usize, warmup: u64, init: f64) -> Result<f64, TrainError> {
    if step == 0 {
        return Err(TrainError::ZeroStep);
    }
    if warmup == 0 {
        return Err(TrainError::Config("noam warmup must be at least 1".into()));
    }
    let s = step as f64;
    let ramp = s * (warmup as f64).powf(-1.5);
    let decay = s.powf(-0.5);
    Ok(init * (d_model as f64).powf(-0.5) * decay.min(ramp))
}

/// Learning rate for optimizer update `step` (1-based).
pub fn scheduled_lr(mode: &LrMode, step: u64, d_model: usize) -> Result<f64, TrainError> {
    match *mode {
        LrMode::Noam { init, warmup } => noam_lr(step, d_model, warmup, init),
        LrMode::Fixed { value } => Ok(value),
    }
}

/// `alpha * t + (1 - alpha) * r`. The endpoints return the surviving term's
/// own node so they are bit-exact, and a missing reconstruction stream
/// (the non-cascade architectures) reduces the joint loss to `t` alone.
pub fn mix_losses(
    tape: &mut Tape,
    t: Var,
    r: Option<Var>,
    alpha: f64,
) -> Result<Var, TrainError> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(TrainError::Config(format!(
            "alpha must lie in [0, 1], got {alpha}"
        )));
    }
    let Some(r) = r else { return Ok(t) };
    if alpha == 1.0 {
        return Ok(t);
    }
    if alpha == 0.0 {
        return Ok(r);
    }
    let ts = tape.scale(t, alpha);
    let rs = tape.scale(r, 1.0 - alpha);
    Ok(tape.add(ts, rs)?)
}

/// Per-example loss terms: padding-free mean cross-entropies with their
/// token counts, one for each output stream the forward pass produced.
struct ExampleLoss {
    translation: Var,
    translation_tokens: usize,
    reconstruction: Option<(Var, usize)>,
}

fn example_loss(
    tape: &mut Tape,
    out: &ForwardOutput,
    target: &[usize],
    smoothing: f64,
) -> Result<ExampleLoss, TrainError> {
    let no_pad = vec![false; target.len()];
    let translation =
        tape.cross_entropy_smoothed(out.translation_logits, target, &no_pad, smoothing)?;
    let reconstruction = match &out.reconstruction {
        None => None,
        Some(r) => {
            let no_pad = vec![false; r.targets.len()];
            let ce = tape.cross_entropy_smoothed(r.logits, &r.targets, &no_pad, smoothing)?;
            Some((ce, r.targets.len()))
        }
    };
    Ok(ExampleLoss {
        translation,
        translation_tokens: target.len(),
        reconstruction,
    })
}

/// Joint objective for one example: `alpha * NLL_translation +
/// (1 - alpha) * NLL_reconstruction`, each a mean cross-entropy over its
/// own stream. Architectures without a reconstruction stream contribute
/// the translation term alone.
pub fn joint_loss(
    tape: &mut Tape,
    out: &ForwardOutput,
    target: &[usize],
    alpha: f64,
) -> Result<Var, TrainError> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(TrainError::Config(format!(
            "alpha must lie in [0, 1], got {alpha}"
        )));
    }
    let el = example_loss(tape, out, target, 0.0)?;
    mix_losses(tape, el.translation, el.reconstruction.map(|(v, _)| v), alpha)
}

/// Scalar summary of one optimizer step's objective.
#[derive(Debug, Clone, Copy)]
pub struct BatchStats {
    pub loss: f64,
    pub nll_translation: f64,
    pub nll_reconstruction: Option<f64>,
    pub translation_tokens: usize,
    pub reconstruction_tokens: usize,
}

/// Forward every example of the batch on one tape and combine the losses.
/// Each stream's batch NLL is the token-weighted mean of per-example mean
/// cross-entropies, i.e. the sum of token losses over the total token
/// count, so padding never enters the objective.
fn batch_loss(
    tape: &mut Tape,
    cfg_model: &ModelConfig,
    vars: &ModelVars,
    rows: &[Triplet],
    alpha: f64,
    smoothing: f64,
    drop: &mut DropoutMode,
) -> Result<(Var, BatchStats), TrainError> {
    if rows.is_empty() {
        return Err(TrainError::EmptyData("batch"));
    }
    let mut terms = Vec::with_capacity(rows.len());
    let mut t_total = 0usize;
    let mut r_total = 0usize;
    for row in rows {
        let out = forward_triplet(tape, cfg_model, vars, row, drop, &CascadeAblation::NONE)?;
        let el = example_loss(tape, &out, &row.target, smoothing)?;
        t_total += el.translation_tokens;
        r_total += el.reconstruction.map_or(0, |(_, n)| n);
        terms.push(el);
    }

    let weighted_mean = |tape: &mut Tape, parts: &[(Var, usize)], total: usize| {
        let mut acc: Option<Var> = None;
        for &(v, n) in parts {
            let scaled = tape.scale(v, n as f64 / total as f64);
            acc = Some(match acc {
                None => scaled,
                Some(a) => tape.add(a, scaled)?,
            });
        }
        Ok::<Var, TrainError>(acc.expect("non-empty batch"))
    };

    let t_parts: Vec<(Var, usize)> = terms
        .iter()
        .map(|el| (el.translation, el.translation_tokens))
        .collect();
    let nll_t = weighted_mean(tape, &t_parts, t_total)?;

    let nll_r = if terms.iter().all(|el| el.reconstruction.is_some()) {
        let r_parts: Vec<(Var, usize)> =
            terms.iter().map(|el| el.reconstruction.unwrap()).collect();
        Some(weighted_mean(tape, &r_parts, r_total)?)
    } else {
        None
    };

    let loss = mix_losses(tape, nll_t, nll_r, alpha)?;
    let stats = BatchStats {
        loss: tape.value(loss).data[0],
        nll_translation: tape.value(nll_t).data[0],
        nll_reconstruction: nll_r.map(|v| tape.value(v).data[0]),
        translation_tokens: t_total,
        reconstruction_tokens: r_total,
    };
    Ok((loss, stats))
}

/// Scales gradients in place so their global L2 norm is at most
/// `max_norm`; returns the pre-clip norm.
pub fn clip_gradients(grads: &mut [Vec<f64>], max_norm: f64) -> f64 {
    let norm = grads
        .iter()
        .flat_map(|g| g.iter())
        .map(|g| g * g)
        .sum::<f64>()
        .sqrt();
    if norm > max_norm && norm > 0.0 {
        let s = max_norm / norm;
        for g in grads.iter_mut() {
            for v in g.iter_mut() {
                *v *= s;
            }
        }
    }
    norm
}

/// Validation perplexities: `exp` of the token-mean NLL per stream,
/// computed with dropout off and hard targets. Model selection reads
/// `translation` only.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ValidationScore {
    pub translation_ppl: f64,
    pub reconstruction_ppl: Option<f64>,
}

pub fn validate_perplexity(
    cfg_model: &ModelConfig,
    params: &ModelParams,
    data: &[Triplet],
) -> Result<ValidationScore, TrainError> {
    if data.is_empty() {
        return Err(TrainError::EmptyData("validation set"));
    }
    let mut t_sum = 0.0;
    let mut t_tokens = 0usize;
    let mut r_sum = 0.0;
    let mut r_tokens = 0usize;
    let mut saw_reconstruction = false;
    for row in data {
        let mut tape = Tape::new();
        let vars = params.bind(&mut tape, false);
        let out = forward_triplet(
            &mut tape,
            cfg_model,
            &vars,
            row,
            &mut DropoutMode::Disabled,
            &CascadeAblation::NONE,
        )?;
        let el = example_loss(&mut tape, &out, &row.target, 0.0)?;
        t_sum += tape.value(el.translation).data[0] * el.translation_tokens as f64;
        t_tokens += el.translation_tokens;
        if let Some((ce, n)) = el.reconstruction {
            saw_reconstruction = true;
            r_sum += tape.value(ce).data[0] * n as f64;
            r_tokens += n;
        }
    }
    Ok(ValidationScore {
        translation_ppl: (t_sum / t_tokens as f64).exp(),
        reconstruction_ppl: saw_reconstruction.then(|| (r_sum / r_tokens as f64).exp()),
    })
}

/// Mutable optimization state carried across epochs. The step count only
/// grows; the staleness counter resets on strict validation improvement.
#[derive(Debug)]
pub struct TrainState {
    pub step: u64,
    pub optimizer: BTreeMap<String, AdamSlot>,
    pub best_valid_ppl: f64,
    pub epochs_since_improvement: usize,
    pub shuffle_rng: ChaCha8Rng,
    pub dropout_rng: ChaCha8Rng,
}

impl TrainState {
    pub fn new(seed: u64) -> Self {
        // one substream per consumer keeps draws independent of batch count
        let mut shuffle_rng = ChaCha8Rng::seed_from_u64(seed);
        shuffle_rng.set_stream(1);
        let mut dropout_rng = ChaCha8Rng::seed_from_u64(seed);
        dropout_rng.set_stream(2);
        TrainState {
            step: 0,
            optimizer: BTreeMap::new(),
            best_valid_ppl: f64::INFINITY,
            epochs_since_improvement: 0,
            shuffle_rng,
            dropout_rng,
        }
    }
}

/// One line of training history, emitted once per epoch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub step: u64,
    pub lr: f64,
    pub train_loss: f64,
    pub train_nll_translation: f64,
    pub train_nll_reconstruction: Option<f64>,
    pub valid_ppl: f64,
    pub valid_reconstruction_ppl: Option<f64>,
}

/// Full training run: shuffled batches, the joint objective, Adam with the
/// scheduled rate, per-epoch validation, and early stopping once
/// `patience` consecutive evaluations fail to improve strictly. Returns
/// the checkpoint with the best observed validation perplexity (never the
/// last epoch's parameters unless they are the best) plus the history.
pub fn train(
    cfg_model: &ModelConfig,
    context_mode: ContextMode,
    mut params: ModelParams,
    train_data: &[Triplet],
    valid_data: &[Triplet],
    cfg: &TrainConfig,
) -> Result<(Checkpoint, Vec<EpochRecord>), TrainError> {
    cfg.validate()?;
    cfg_model.validate()?;
    if train_data.is_empty() {
        return Err(TrainError::EmptyData("training set"));
    }
    if valid_data.is_empty() {
        return Err(TrainError::EmptyData("validation set"));
    }

    let d_model = cfg_model.block.d_model;
    let smoothing = cfg.label_smoothing.unwrap_or(0.0);
    let mut state = TrainState::new(cfg.seed);
    let mut history = Vec::new();
    let mut best: Option<(f64, ModelParams, BTreeMap<String, AdamSlot>)> = None;

    for epoch in 1..=cfg.max_epochs {
        let epoch_batches = batches(train_data, cfg.batch_size, Some(&mut state.shuffle_rng));
        let mut t_num = 0.0;
        let mut t_den = 0usize;
        let mut r_num = 0.0;
        let mut r_den = 0usize;
        let mut last_lr = 0.0;

        for (batch_index, batch) in epoch_batches.iter().enumerate() {
            state.step += 1;
            let lr = scheduled_lr(&cfg.lr_mode, state.step, d_model)?;
            last_lr = lr;

            let rows: Vec<Triplet> = (0..batch.len()).map(|i| batch.example(i)).collect();
            let mut tape = Tape::new();
            let vars = params.bind(&mut tape, true);
            let mut drop = DropoutMode::Enabled {
                p: cfg_model.block.dropout,
                rng: &mut state.dropout_rng,
            };
            let (loss, stats) = batch_loss(
                &mut tape, cfg_model, &vars, &rows, cfg.alpha, smoothing, &mut drop,
            )?;
            if !stats.loss.is_finite() {
                return Err(TrainError::NonFinite {
                    loss: stats.loss,
                    step: state.step,
                    epoch,
                    batch: batch_index,
                    lr,
                });
            }
            tape.backward(loss)?;

            let bound = vars.bound_vars();
            let mut grads: Vec<Vec<f64>> = bound
                .iter()
                .map(|&v| match tape.grad(v) {
                    Some(g) => g.to_vec(),
                    // parameters outside the loss graph (e.g. the unused
                    // head at an alpha endpoint) simply hold still
                    None => vec![0.0; tape.value(v).len()],
                })
                .collect();
            if let Some(max_norm) = cfg.clip_norm {
                clip_gradients(&mut grads, max_norm);
            }
            for ((name, tensor), grad) in params.named_tensors_mut().into_iter().zip(&grads) {
                let slot = state
                    .optimizer
                    .entry(name)
                    .or_insert_with(|| AdamSlot::new(grad.len()));
                adam_step(
                    &mut tensor.data,
                    grad,
                    slot,
                    lr,
                    ADAM_BETA1,
                    ADAM_BETA2,
                    ADAM_EPS,
                )?;
            }

            t_num += stats.nll_translation * stats.translation_tokens as f64;
            t_den += stats.translation_tokens;
            if let Some(r) = stats.nll_reconstruction {
                r_num += r * stats.reconstruction_tokens as f64;
                r_den += stats.reconstruction_tokens;
            }
        }

        let nll_t = t_num / t_den as f64;
        let nll_r = (r_den > 0).then(|| r_num / r_den as f64);
        let train_loss = match nll_r {
            Some(r) => cfg.alpha * nll_t + (1.0 - cfg.alpha) * r,
            None => nll_t,
        };
        let score = validate_perplexity(cfg_model, &params, valid_data)?;
        history.push(EpochRecord {
            epoch,
            step: state.step,
            lr: last_lr,
            train_loss,
            train_nll_translation: nll_t,
            train_nll_reconstruction: nll_r,
            valid_ppl: score.translation_ppl,
            valid_reconstruction_ppl: score.reconstruction_ppl,
        });

        if score.translation_ppl < state.best_valid_ppl {
            state.best_valid_ppl = score.translation_ppl;
            state.epochs_since_improvement = 0;
            best = Some((
                score.translation_ppl,
                params.clone(),
                state.optimizer.clone(),
            ));
        } else {
            state.epochs_since_improvement += 1;
            if state.epochs_since_improvement >= cfg.patience {
                break;
            }
        }
    }

    let (_, best_params, best_optimizer) = best.expect("at least one epoch ran");
    let mut stored_config = cfg_model.clone();
    stored_config.alpha = cfg.alpha;
    Ok((
        Checkpoint {
            config: stored_config,
            context_mode,
            seed: cfg.seed,
            params: best_params,
            optimizer: Some(best_optimizer),
        },
        history,
    ))
}
