//! Transformer building blocks: embeddings with learned positions,
//! multi-head attention, position-wise feed-forward, and post-norm
//! encoder/decoder stacks.
//!
//! Sublayer convention (post-norm): `x ← LayerNorm(x + Dropout(sublayer(x)))`;
//! embeddings are `token + position` followed by dropout. With dropout
//! disabled every forward is deterministic.

mod params;

pub use params::{
    binder, AttentionParams, DecoderLayerParams, DecoderParams, EncoderLayerParams, EncoderParams,
    FeedForwardParams, Linear, NormParams,
};
pub(crate) use params::{init_linear, normal};

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor::{Tape, Tensor, TensorError, Var};

/// Finite stand-in for -inf in pre-softmax masking: exp underflows to an
/// exact zero weight after max-subtraction, and backward never forms inf·0.
const MASK_FILL: f64 = -1e30;

pub const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("sequence length {len} exceeds max_positions {max}")]
    SequenceTooLong { len: usize, max: usize },
    #[error("no attendable keys for query position {row}")]
    NoAttendableKeys { row: usize },
    #[error("invalid block config: {0}")]
    Config(String),
    #[error("attention mask is {mask_rows}x{mask_cols} but queries/keys are {q}x{k}")]
    MaskDims {
        mask_rows: usize,
        mask_cols: usize,
        q: usize,
        k: usize,
    },
    #[error("{arch} does not support {op}")]
    Unsupported {
        arch: &'static str,
        op: &'static str,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlockConfig {
    pub num_layers: usize,
    pub d_model: usize,
    pub num_heads: usize,
    pub d_ffn: usize,
    pub dropout: f64,
    pub max_positions: usize,
    pub vocab_size: usize,
}

impl BlockConfig {
    /// Desk-scale config sized so the full test grid runs in minutes on CPU.
    pub fn desk(vocab_size: usize) -> Self {
        BlockConfig {
            num_layers: 2,
            d_model: 64,
            num_heads: 4,
            d_ffn: 256,
            dropout: 0.1,
            max_positions: 160,
            vocab_size,
        }
    }

    /// The full-scale configuration the original experiments used.
    pub fn paper(vocab_size: usize) -> Self {
        BlockConfig {
            num_layers: 6,
            d_model: 512,
            num_heads: 8,
            d_ffn: 2048,
            dropout: 0.1,
            max_positions: 160,
            vocab_size,
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if self.d_model == 0 || self.num_heads == 0 {
            return Err(ModelError::Config(
                "d_model and num_heads must be positive".into(),
            ));
        }
        if self.d_model % self.num_heads != 0 {
            return Err(ModelError::Config(format!(
                "d_model {} not divisible by num_heads {}",
                self.d_model, self.num_heads
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(ModelError::Config(format!(
                "dropout {} outside [0,1)",
                self.dropout
            )));
        }
        if self.max_positions == 0 || self.vocab_size == 0 {
            return Err(ModelError::Config(
                "max_positions and vocab_size must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// Boolean attention mask, true = attendable. Constructors keep the
/// invariants: causal masks are lower-triangular and padded key positions
/// are never attendable.
#[derive(Debug, Clone)]
pub struct AttentionMask {
    pub rows: usize,
    pub cols: usize,
    keep: Vec<bool>,
}

impl AttentionMask {
    pub fn full(rows: usize, cols: usize) -> Self {
        AttentionMask {
            rows,
            cols,
            keep: vec![true; rows * cols],
        }
    }

    pub fn causal(len: usize) -> Self {
        let mut keep = vec![false; len * len];
        for q in 0..len {
            for k in 0..=q {
                keep[q * len + k] = true;
            }
        }
        AttentionMask {
            rows: len,
            cols: len,
            keep,
        }
    }

    /// Clears every column whose key position is padding.
    pub fn with_key_padding(mut self, key_is_pad: &[bool]) -> Self {
        assert_eq!(key_is_pad.len(), self.cols, "padding flags cover keys");
        for q in 0..self.rows {
            for k in 0..self.cols {
                if key_is_pad[k] {
                    self.keep[q * self.cols + k] = false;
                }
            }
        }
        self
    }

    pub fn keep(&self) -> &[bool] {
        &self.keep
    }

    pub fn is_attendable(&self, q: usize, k: usize) -> bool {
        self.keep[q * self.cols + k]
    }

    fn row_with_no_keys(&self) -> Option<usize> {
        (0..self.rows).find(|q| !self.keep[q * self.cols..(q + 1) * self.cols].contains(&true))
    }
}

/// Dropout context threaded through forwards; `Disabled` for evaluation.
pub enum DropoutMode<'r> {
    Disabled,
    Enabled { p: f64, rng: &'r mut ChaCha8Rng },
}

impl DropoutMode<'_> {
    pub fn apply(&mut self, tape: &mut Tape, x: Var) -> Result<Var, TensorError> {
        match self {
            DropoutMode::Disabled => Ok(x),
            DropoutMode::Enabled { p, rng } => {
                if *p == 0.0 {
                    return Ok(x);
                }
                let shape = tape.value(x).shape.clone();
                let scale = 1.0 / (1.0 - *p);
                let data = (0..tape.value(x).len())
                    .map(|_| if rng.gen::<f64>() < *p { 0.0 } else { scale })
                    .collect();
                let mask = tape.constant(Tensor::new(shape, data)?);
                tape.mul(x, mask)
            }
        }
    }
}

/// Token embedding + learned positional embedding, then dropout.
pub fn embed(
    tape: &mut Tape,
    ids: &[usize],
    token_embedding: Var,
    positional_embedding: Var,
    drop: &mut DropoutMode,
) -> Result<Var, ModelError> {
    let max = tape.value(positional_embedding).shape[0];
    if ids.len() > max {
        return Err(ModelError::SequenceTooLong {
            len: ids.len(),
            max,
        });
    }
    let tok = tape.embedding(token_embedding, ids)?;
    let positions: Vec<usize> = (0..ids.len()).collect();
    let pos = tape.embedding(positional_embedding, &positions)?;
    let summed = tape.add(tok, pos)?;
    Ok(drop.apply(tape, summed)?)
}

/// Per-head scaled dot-product attention with masking, head concatenation,
/// and output projection.
pub fn multi_head_attention(
    tape: &mut Tape,
    q: Var,
    k: Var,
    v: Var,
    mask: &AttentionMask,
    params: &AttentionParams<Var>,
    num_heads: usize,
) -> Result<Var, ModelError> {
    let (lq, d) = tape.value(q).dims2();
    let (lk, dk) = tape.value(k).dims2();
    let (lv, dv) = tape.value(v).dims2();
    if dk != d || dv != d || lv != lk {
        return Err(TensorError::ShapeMismatch {
            op: "multi_head_attention",
            lhs: tape.value(q).shape.clone(),
            rhs: tape.value(k).shape.clone(),
        }
        .into());
    }
    if mask.rows != lq || mask.cols != lk {
        return Err(ModelError::MaskDims {
            mask_rows: mask.rows,
            mask_cols: mask.cols,
            q: lq,
            k: lk,
        });
    }
    if let Some(row) = mask.row_with_no_keys() {
        return Err(ModelError::NoAttendableKeys { row });
    }
    debug_assert_eq!(d % num_heads, 0, "config validation enforces divisibility");
    let dh = d / num_heads;
    let scale = 1.0 / (dh as f64).sqrt();

    let qp = project(tape, q, &params.query)?;
    let kp = project(tape, k, &params.key)?;
    let vp = project(tape, v, &params.value)?;

    let mut heads = Vec::with_capacity(num_heads);
    for h in 0..num_heads {
        let qh = tape.slice_cols(qp, h * dh, dh)?;
        let kh = tape.slice_cols(kp, h * dh, dh)?;
        let vh = tape.slice_cols(vp, h * dh, dh)?;
        let kt = tape.transpose(kh)?;
        let scores = tape.matmul(qh, kt)?;
        let scaled = tape.scale(scores, scale);
        let masked = tape.mask_fill(scaled, mask.keep(), MASK_FILL)?;
        let weights = tape.softmax(masked, 1)?;
        heads.push(tape.matmul(weights, vh)?);
    }
    let merged = tape.concat_cols(&heads)?;
    Ok(project(tape, merged, &params.output)?)
}

/// Two affine maps with a ReLU between; residual and norm are the caller's.
pub fn feed_forward(
    tape: &mut Tape,
    x: Var,
    params: &FeedForwardParams<Var>,
) -> Result<Var, ModelError> {
    let hidden = project(tape, x, &params.inner)?;
    let activated = tape.relu(hidden);
    Ok(project(tape, activated, &params.outer)?)
}

pub(crate) fn project(tape: &mut Tape, x: Var, lin: &Linear<Var>) -> Result<Var, TensorError> {
    let prod = tape.matmul(x, lin.weight)?;
    tape.add_row(prod, lin.bias)
}

/// `LayerNorm(x + Dropout(branch))`, the post-norm sublayer wrapper.
pub fn sublayer(
    tape: &mut Tape,
    x: Var,
    branch: Var,
    norm: &NormParams<Var>,
    drop: &mut DropoutMode,
) -> Result<Var, ModelError> {
    let dropped = drop.apply(tape, branch)?;
    let summed = tape.add(x, dropped)?;
    Ok(tape.layer_norm(summed, norm.gain, norm.bias, LAYER_NORM_EPS)?)
}

/// `num_layers × (self-attention → FFN)` over the token embeddings; a
/// zero-layer stack returns the embeddings unchanged.
pub fn encoder_stack(
    tape: &mut Tape,
    tokens: &[usize],
    pad: &[bool],
    cfg: &BlockConfig,
    params: &EncoderParams<Var>,
    drop: &mut DropoutMode,
) -> Result<Var, ModelError> {
    assert_eq!(tokens.len(), pad.len(), "padding flags cover tokens");
    let mut x = embed(
        tape,
        tokens,
        params.token_embedding,
        params.positional_embedding,
        drop,
    )?;
    let mask = AttentionMask::full(tokens.len(), tokens.len()).with_key_padding(pad);
    for layer in &params.layers {
        let attended = multi_head_attention(tape, x, x, x, &mask, &layer.self_attn, cfg.num_heads)?;
        x = sublayer(tape, x, attended, &layer.self_norm, drop)?;
        let ff = feed_forward(tape, x, &layer.ffn)?;
        x = sublayer(tape, x, ff, &layer.ffn_norm, drop)?;
    }
    Ok(x)
}

/// `num_layers × (causal self-attention → cross-attention over memory →
/// FFN)`; `memory` is the generic cross-attention source (encoder output
/// or an upstream decoder's states).
pub fn decoder_stack(
    tape: &mut Tape,
    tokens: &[usize],
    memory: Var,
    self_mask: &AttentionMask,
    cross_mask: &AttentionMask,
    cfg: &BlockConfig,
    params: &DecoderParams<Var>,
    drop: &mut DropoutMode,
) -> Result<Var, ModelError> {
    let mut x = embed(
        tape,
        tokens,
        params.token_embedding,
        params.positional_embedding,
        drop,
    )?;
    for layer in &params.layers {
        let attended =
            multi_head_attention(tape, x, x, x, self_mask, &layer.self_attn, cfg.num_heads)?;
        x = sublayer(tape, x, attended, &layer.self_norm, drop)?;
        let crossed = multi_head_attention(
            tape,
            x,
            memory,
            memory,
            cross_mask,
            &layer.cross_attn,
            cfg.num_heads,
        )?;
        x = sublayer(tape, x, crossed, &layer.cross_norm, drop)?;
        let ff = feed_forward(tape, x, &layer.ffn)?;
        x = sublayer(tape, x, ff, &layer.ffn_norm, drop)?;
    }
    Ok(x)
}

/// Vocabulary projection applied to decoder states.
pub fn project_vocab(tape: &mut Tape, hidden: Var, out: &Linear<Var>) -> Result<Var, ModelError> {
    Ok(project(tape, hidden, out)?)
}

#[cfg(test)]
pub(crate) mod naive;
