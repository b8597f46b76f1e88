//! Parameter containers, generic over the leaf type `T` so one set of
//! structs describes both host storage (`T = Tensor`) and tape bindings
//! (`T = Var`). Traversal order is fixed and shared by `map`/`visit`/
//! `visit_mut`, which optimizer updates and checkpoints rely on.

use rand::RngCore;

use crate::tensor::{Tape, Tensor, Var};

use super::BlockConfig;

/// Affine map; `weight` is `[in × out]`, `bias` is `[out]`.
#[derive(Debug, Clone)]
pub struct Linear<T> {
    pub weight: T,
    pub bias: T,
}

#[derive(Debug, Clone)]
pub struct AttentionParams<T> {
    pub query: Linear<T>,
    pub key: Linear<T>,
    pub value: Linear<T>,
    pub output: Linear<T>,
}

#[derive(Debug, Clone)]
pub struct FeedForwardParams<T> {
    pub inner: Linear<T>,
    pub outer: Linear<T>,
}

#[derive(Debug, Clone)]
pub struct NormParams<T> {
    pub gain: T,
    pub bias: T,
}

#[derive(Debug, Clone)]
pub struct EncoderLayerParams<T> {
    pub self_attn: AttentionParams<T>,
    pub self_norm: NormParams<T>,
    pub ffn: FeedForwardParams<T>,
    pub ffn_norm: NormParams<T>,
}

/// Decoder layer; `context_attn` is present only for the inside-context
/// architecture's second cross-attention branch.
#[derive(Debug, Clone)]
pub struct DecoderLayerParams<T> {
    pub self_attn: AttentionParams<T>,
    pub self_norm: NormParams<T>,
    pub cross_attn: AttentionParams<T>,
    pub context_attn: Option<AttentionParams<T>>,
    pub cross_norm: NormParams<T>,
    pub ffn: FeedForwardParams<T>,
    pub ffn_norm: NormParams<T>,
}

/// Token/positional tables plus encoder layers. Nothing is shared or tied
/// across stacks: every stack owns its tables.
#[derive(Debug, Clone)]
pub struct EncoderParams<T> {
    pub token_embedding: T,
    pub positional_embedding: T,
    pub layers: Vec<EncoderLayerParams<T>>,
}

/// Decoder stack with its own tables and the vocabulary projection.
#[derive(Debug, Clone)]
pub struct DecoderParams<T> {
    pub token_embedding: T,
    pub positional_embedding: T,
    pub layers: Vec<DecoderLayerParams<T>>,
    pub output: Linear<T>,
}

impl<T> Linear<T> {
    pub fn map<U>(&self, f: &mut impl FnMut(&T) -> U) -> Linear<U> {
        Linear {
            weight: f(&self.weight),
            bias: f(&self.bias),
        }
    }

    fn visit<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a T)>) {
        out.push((format!("{prefix}.weight"), &self.weight));
        out.push((format!("{prefix}.bias"), &self.bias));
    }

    fn visit_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut T)>) {
        out.push((format!("{prefix}.weight"), &mut self.weight));
        out.push((format!("{prefix}.bias"), &mut self.bias));
    }
}

impl<T> AttentionParams<T> {
    pub fn map<U>(&self, f: &mut impl FnMut(&T) -> U) -> AttentionParams<U> {
        AttentionParams {
            query: self.query.map(f),
            key: self.key.map(f),
            value: self.value.map(f),
            output: self.output.map(f),
        }
    }

    fn visit<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a T)>) {
        self.query.visit(&format!("{prefix}.query"), out);
        self.key.visit(&format!("{prefix}.key"), out);
        self.value.visit(&format!("{prefix}.value"), out);
        self.output.visit(&format!("{prefix}.output"), out);
    }

    fn visit_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut T)>) {
        self.query.visit_mut(&format!("{prefix}.query"), out);
        self.key.visit_mut(&format!("{prefix}.key"), out);
        self.value.visit_mut(&format!("{prefix}.value"), out);
        self.output.visit_mut(&format!("{prefix}.output"), out);
    }
}

impl<T> FeedForwardParams<T> {
    pub fn map<U>(&self, f: &mut impl FnMut(&T) -> U) -> FeedForwardParams<U> {
        FeedForwardParams {
            inner: self.inner.map(f),
            outer: self.outer.map(f),
        }
    }

    fn visit<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a T)>) {
        self.inner.visit(&format!("{prefix}.inner"), out);
        self.outer.visit(&format!("{prefix}.outer"), out);
    }

    fn visit_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut T)>) {
        self.inner.visit_mut(&format!("{prefix}.inner"), out);
        self.outer.visit_mut(&format!("{prefix}.outer"), out);
    }
}

impl<T> NormParams<T> {
    pub fn map<U>(&self, f: &mut impl FnMut(&T) -> U) -> NormParams<U> {
        NormParams {
            gain: f(&self.gain),
            bias: f(&self.bias),
        }
    }

    fn visit<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a T)>) {
        out.push((format!("{prefix}.gain"), &self.gain));
        out.push((format!("{prefix}.bias"), &self.bias));
    }

    fn visit_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut T)>) {
        out.push((format!("{prefix}.gain"), &mut self.gain));
        out.push((format!("{prefix}.bias"), &mut self.bias));
    }
}

impl<T> EncoderLayerParams<T> {
    pub fn map<U>(&self, f: &mut impl FnMut(&T) -> U) -> EncoderLayerParams<U> {
        EncoderLayerParams {
            self_attn: self.self_attn.map(f),
            self_norm: self.self_norm.map(f),
            ffn: self.ffn.map(f),
            ffn_norm: self.ffn_norm.map(f),
        }
    }

    fn visit<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a T)>) {
        self.self_attn.visit(&format!("{prefix}.self_attn"), out);
        self.self_norm.visit(&format!("{prefix}.self_norm"), out);
        self.ffn.visit(&format!("{prefix}.ffn"), out);
        self.ffn_norm.visit(&format!("{prefix}.ffn_norm"), out);
    }

    fn visit_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut T)>) {
        self.self_attn.visit_mut(&format!("{prefix}.self_attn"), out);
        self.self_norm.visit_mut(&format!("{prefix}.self_norm"), out);
        self.ffn.visit_mut(&format!("{prefix}.ffn"), out);
        self.ffn_norm.visit_mut(&format!("{prefix}.ffn_norm"), out);
    }
}

impl<T> DecoderLayerParams<T> {
    pub fn map<U>(&self, f: &mut impl FnMut(&T) -> U) -> DecoderLayerParams<U> {
        DecoderLayerParams {
            self_attn: self.self_attn.map(f),
            self_norm: self.self_norm.map(f),
            cross_attn: self.cross_attn.map(f),
            context_attn: self.context_attn.as_ref().map(|a| a.map(f)),
            cross_norm: self.cross_norm.map(f),
            ffn: self.ffn.map(f),
            ffn_norm: self.ffn_norm.map(f),
        }
    }

    fn visit<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a T)>) {
        self.self_attn.visit(&format!("{prefix}.self_attn"), out);
        self.self_norm.visit(&format!("{prefix}.self_norm"), out);
        self.cross_attn.visit(&format!("{prefix}.cross_attn"), out);
        if let Some(ctx) = &self.context_attn {
            ctx.visit(&format!("{prefix}.context_attn"), out);
        }
        self.cross_norm.visit(&format!("{prefix}.cross_norm"), out);
        self.ffn.visit(&format!("{prefix}.ffn"), out);
        self.ffn_norm.visit(&format!("{prefix}.ffn_norm"), out);
    }

    fn visit_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut T)>) {
        self.self_attn.visit_mut(&format!("{prefix}.self_attn"), out);
        self.self_norm.visit_mut(&format!("{prefix}.self_norm"), out);
        self.cross_attn.visit_mut(&format!("{prefix}.cross_attn"), out);
        if let Some(ctx) = &mut self.context_attn {
            ctx.visit_mut(&format!("{prefix}.context_attn"), out);
        }
        self.cross_norm.visit_mut(&format!("{prefix}.cross_norm"), out);
        self.ffn.visit_mut(&format!("{prefix}.ffn"), out);
        self.ffn_norm.visit_mut(&format!("{prefix}.ffn_norm"), out);
    }
}

impl<T> EncoderParams<T> {
    pub fn map<U>(&self, f: &mut impl FnMut(&T) -> U) -> EncoderParams<U> {
        EncoderParams {
            token_embedding: f(&self.token_embedding),
            positional_embedding: f(&self.positional_embedding),
            layers: self.layers.iter().map(|l| l.map(f)).collect(),
        }
    }

    pub fn visit<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a T)>) {
        out.push((format!("{prefix}.token_embedding"), &self.token_embedding));
        out.push((
            format!("{prefix}.positional_embedding"),
            &self.positional_embedding,
        ));
        for (i, layer) in self.layers.iter().enumerate() {
            layer.visit(&format!("{prefix}.layer{i}"), out);
        }
    }

    pub fn visit_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut T)>) {
        out.push((
            format!("{prefix}.token_embedding"),
            &mut self.token_embedding,
        ));
        out.push((
            format!("{prefix}.positional_embedding"),
            &mut self.positional_embedding,
        ));
        for (i, layer) in self.layers.iter_mut().enumerate() {
            layer.visit_mut(&format!("{prefix}.layer{i}"), out);
        }
    }
}

impl<T> DecoderParams<T> {
    pub fn map<U>(&self, f: &mut impl FnMut(&T) -> U) -> DecoderParams<U> {
        DecoderParams {
            token_embedding: f(&self.token_embedding),
            positional_embedding: f(&self.positional_embedding),
            layers: self.layers.iter().map(|l| l.map(f)).collect(),
            output: self.output.map(f),
        }
    }

    pub fn visit<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a T)>) {
        out.push((format!("{prefix}.token_embedding"), &self.token_embedding));
        out.push((
            format!("{prefix}.positional_embedding"),
            &self.positional_embedding,
        ));
        for (i, layer) in self.layers.iter().enumerate() {
            layer.visit(&format!("{prefix}.layer{i}"), out);
        }
        self.output.visit(&format!("{prefix}.output"), out);
    }

    pub fn visit_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut T)>) {
        out.push((
            format!("{prefix}.token_embedding"),
            &mut self.token_embedding,
        ));
        out.push((
            format!("{prefix}.positional_embedding"),
            &mut self.positional_embedding,
        ));
        for (i, layer) in self.layers.iter_mut().enumerate() {
            layer.visit_mut(&format!("{prefix}.layer{i}"), out);
        }
        self.output.visit_mut(&format!("{prefix}.output"), out);
    }
}

// ── initialization ──────────────────────────────────────────────────────

/// Standard normal via Box-Muller; avoids carrying a distributions crate
/// for one sampler and keeps the draw order pinned to our RNG streams.
pub(crate) fn normal(rng: &mut impl RngCore, std: f64) -> f64 {
    let u1 = (rng.next_u64() as f64 + 1.0) / (u64::MAX as f64 + 2.0);
    let u2 = rng.next_u64() as f64 / u64::MAX as f64;
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos() * std
}

const INIT_STD: f64 = 0.02;

fn dense(rng: &mut impl RngCore, rows: usize, cols: usize) -> Tensor {
    let data = (0..rows * cols).map(|_| normal(rng, INIT_STD)).collect();
    Tensor::new(vec![rows, cols], data).expect("sized buffer")
}

fn linear(rng: &mut impl RngCore, d_in: usize, d_out: usize) -> Linear<Tensor> {
    Linear {
        weight: dense(rng, d_in, d_out),
        bias: Tensor::zeros(vec![d_out]),
    }
}

fn attention(rng: &mut impl RngCore, d: usize) -> AttentionParams<Tensor> {
    AttentionParams {
        query: linear(rng, d, d),
        key: linear(rng, d, d),
        value: linear(rng, d, d),
        output: linear(rng, d, d),
    }
}

fn feed_forward(rng: &mut impl RngCore, d: usize, d_ffn: usize) -> FeedForwardParams<Tensor> {
    FeedForwardParams {
        inner: linear(rng, d, d_ffn),
        outer: linear(rng, d_ffn, d),
    }
}

fn norm(d: usize) -> NormParams<Tensor> {
    NormParams {
        gain: Tensor::new(vec![d], vec![1.0; d]).expect("sized buffer"),
        bias: Tensor::zeros(vec![d]),
    }
}

impl EncoderParams<Tensor> {
    pub fn init(cfg: &BlockConfig, rng: &mut impl RngCore) -> Self {
        EncoderParams {
            token_embedding: dense(rng, cfg.vocab_size, cfg.d_model),
            positional_embedding: dense(rng, cfg.max_positions, cfg.d_model),
            layers: (0..cfg.num_layers)
                .map(|_| EncoderLayerParams {
                    self_attn: attention(rng, cfg.d_model),
                    self_norm: norm(cfg.d_model),
                    ffn: feed_forward(rng, cfg.d_model, cfg.d_ffn),
                    ffn_norm: norm(cfg.d_model),
                })
                .collect(),
        }
    }
}

impl DecoderParams<Tensor> {
    pub fn init(cfg: &BlockConfig, with_context_attn: bool, rng: &mut impl RngCore) -> Self {
        DecoderParams {
            token_embedding: dense(rng, cfg.vocab_size, cfg.d_model),
            positional_embedding: dense(rng, cfg.max_positions, cfg.d_model),
            layers: (0..cfg.num_layers)
                .map(|_| DecoderLayerParams {
                    self_attn: attention(rng, cfg.d_model),
                    self_norm: norm(cfg.d_model),
                    cross_attn: attention(rng, cfg.d_model),
                    context_attn: with_context_attn.then(|| attention(rng, cfg.d_model)),
                    cross_norm: norm(cfg.d_model),
                    ffn: feed_forward(rng, cfg.d_model, cfg.d_ffn),
                    ffn_norm: norm(cfg.d_model),
                })
                .collect(),
            output: linear(rng, cfg.d_model, cfg.vocab_size),
        }
    }
}

pub(crate) fn init_linear(rng: &mut impl RngCore, d_in: usize, d_out: usize) -> Linear<Tensor> {
    linear(rng, d_in, d_out)
}

/// Closure for `map` that records host tensors as tape leaves.
pub fn binder(tape: &mut Tape, trainable: bool) -> impl FnMut(&Tensor) -> Var + '_ {
    move |t: &Tensor| {
        let mut leaf = t.clone();
        leaf.requires_grad = trainable;
        leaf.grad = None;
        tape.leaf(leaf)
    }
}
