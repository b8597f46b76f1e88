//! The five model graphs: a sentence-level baseline, two single-pass
//! context integrations (concatenation and a second cross-attention
//! branch), and the two-decoder cascade in its isolated and residual
//! variants. All of them map token-id inputs to `[prefix_len × V]` logits
//! behind one `forward` interface.

mod checkpoint;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CheckpointError};

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::blocks::{
    binder, decoder_stack, embed, encoder_stack, feed_forward, init_linear, multi_head_attention,
    project_vocab, sublayer, AttentionMask, BlockConfig, DecoderParams, DropoutMode,
    EncoderParams, Linear, ModelError, LAYER_NORM_EPS,
};
use crate::data::{ContextMode, BOS, CONCAT};
use crate::tensor::{Tape, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Architecture {
    VanillaSent,
    ConcatContext,
    InsideContext,
    CascadeMtl,
    CascadeResidual,
}

impl Architecture {
    pub fn name(self) -> &'static str {
        match self {
            Architecture::VanillaSent => "vanilla_sent",
            Architecture::ConcatContext => "concat_context",
            Architecture::InsideContext => "inside_context",
            Architecture::CascadeMtl => "cascade_mtl",
            Architecture::CascadeResidual => "cascade_residual",
        }
    }

    pub fn is_cascade(self) -> bool {
        matches!(
            self,
            Architecture::CascadeMtl | Architecture::CascadeResidual
        )
    }
}

/// Which sequence the cascade's intermediate decoder reconstructs.
/// `ReCntx` exchanges the context and source roles before the forward.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AuxObjective {
    #[default]
    ReSrc,
    ReCntx,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub arch: Architecture,
    pub block: BlockConfig,
    /// Joint-loss mix: `alpha * translation + (1 - alpha) * reconstruction`.
    /// Only the cascade variants consume it; `alpha = 1` recovers the
    /// cascade trained without the reconstruction objective.
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    #[serde(default)]
    pub aux_objective: AuxObjective,
}

fn default_alpha() -> f64 {
    0.5
}

impl ModelConfig {
    pub fn new(arch: Architecture, block: BlockConfig) -> Self {
        ModelConfig {
            arch,
            block,
            alpha: default_alpha(),
            aux_objective: AuxObjective::default(),
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        self.block.validate()?;
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(ModelError::Config(format!(
                "alpha {} outside [0, 1]",
                self.alpha
            )));
        }
        Ok(())
    }
}

/// One training example: context, source, and target token ids, each ending
/// with `<eos>`, plus enough document metadata to regroup hypotheses into
/// documents for document-level scoring.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Triplet {
    pub context: Vec<usize>,
    pub source: Vec<usize>,
    pub target: Vec<usize>,
    pub doc_id: usize,
    pub position_in_doc: usize,
}

/// Decoder input for a gold sequence: drop the trailing token, prepend
/// `<bos>`. Position `t` of the result conditions the prediction of
/// `seq[t]`.
pub fn shift_right(seq: &[usize]) -> Vec<usize> {
    let mut out = Vec::with_capacity(seq.len().max(1));
    out.push(BOS);
    if !seq.is_empty() {
        out.extend_from_slice(&seq[..seq.len() - 1]);
    }
    out
}

/// Both cascade logit streams. Reconstruction depends only on (context,
/// source prefix); translation additionally on the target prefix.
#[derive(Debug)]
pub struct CascadeOutput {
    pub reconstruction_logits: Var,
    pub translation_logits: Var,
}

/// Diagnostic switches that sever one cascade stream at a time; the
/// double-ablation test uses them to prove the final decoder reaches the
/// context encoder only through the intermediate decoder.
#[derive(Debug, Clone, Copy, Default)]
pub struct CascadeAblation {
    pub zero_encoder_output: bool,
    pub zero_intermediate_states: bool,
}

impl CascadeAblation {
    pub const NONE: CascadeAblation = CascadeAblation {
        zero_encoder_output: false,
        zero_intermediate_states: false,
    };
}

// ── parameters ──────────────────────────────────────────────────────────

/// Host-side parameter tree for one architecture. `P` abstracts the leaf
/// so the same shape serves stored tensors and tape bindings.
#[derive(Debug, Clone)]
pub enum ModelParamsOf<T> {
    /// `vanilla_sent` and `concat_context`: one encoder, one decoder.
    EncDec {
        encoder: EncoderParams<T>,
        decoder: DecoderParams<T>,
    },
    /// `inside_context`: separate source/context encoders; decoder layers
    /// carry the extra context cross-attention branch.
    Inside {
        source_encoder: EncoderParams<T>,
        context_encoder: EncoderParams<T>,
        decoder: DecoderParams<T>,
    },
    /// The cascades: context encoder, intermediate decoder, final decoder,
    /// and (residual variant only) the memory-combine layer.
    Cascade {
        encoder: EncoderParams<T>,
        intermediate: DecoderParams<T>,
        final_decoder: DecoderParams<T>,
        combine: Option<Linear<T>>,
    },
}

pub type ModelParams = ModelParamsOf<Tensor>;
pub type ModelVars = ModelParamsOf<Var>;

impl ModelParams {
    /// Fresh parameters for `cfg.arch`, drawn from `rng`. No tables or
    /// layers are shared between stacks.
    pub fn init(cfg: &ModelConfig, rng: &mut ChaCha8Rng) -> Result<Self, ModelError> {
        cfg.validate()?;
        let b = &cfg.block;
        Ok(match cfg.arch {
            Architecture::VanillaSent | Architecture::ConcatContext => ModelParamsOf::EncDec {
                encoder: EncoderParams::init(b, rng),
                decoder: DecoderParams::init(b, false, rng),
            },
            Architecture::InsideContext => ModelParamsOf::Inside {
                source_encoder: EncoderParams::init(b, rng),
                context_encoder: EncoderParams::init(b, rng),
                decoder: DecoderParams::init(b, true, rng),
            },
            Architecture::CascadeMtl | Architecture::CascadeResidual => ModelParamsOf::Cascade {
                encoder: EncoderParams::init(b, rng),
                intermediate: DecoderParams::init(b, false, rng),
                final_decoder: DecoderParams::init(b, false, rng),
                combine: (cfg.arch == Architecture::CascadeResidual)
                    .then(|| init_linear(rng, b.d_model, b.d_model)),
            },
        })
    }

    /// Every tensor with its stable dotted name, in checkpoint order.
    pub fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        match self {
            ModelParamsOf::EncDec { encoder, decoder } => {
                encoder.visit("encoder", &mut out);
                decoder.visit("decoder", &mut out);
            }
            ModelParamsOf::Inside {
                source_encoder,
                context_encoder,
                decoder,
            } => {
                source_encoder.visit("source_encoder", &mut out);
                context_encoder.visit("context_encoder", &mut out);
                decoder.visit("decoder", &mut out);
            }
            ModelParamsOf::Cascade {
                encoder,
                intermediate,
                final_decoder,
                combine,
            } => {
                encoder.visit("encoder", &mut out);
                intermediate.visit("intermediate_decoder", &mut out);
                final_decoder.visit("final_decoder", &mut out);
                if let Some(c) = combine {
                    out.push(("combine.weight".into(), &c.weight));
                    out.push(("combine.bias".into(), &c.bias));
                }
            }
        }
        out
    }

    pub fn named_tensors_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out = Vec::new();
        match self {
            ModelParamsOf::EncDec { encoder, decoder } => {
                encoder.visit_mut("encoder", &mut out);
                decoder.visit_mut("decoder", &mut out);
            }
            ModelParamsOf::Inside {
                source_encoder,
                context_encoder,
                decoder,
            } => {
                source_encoder.visit_mut("source_encoder", &mut out);
                context_encoder.visit_mut("context_encoder", &mut out);
                decoder.visit_mut("decoder", &mut out);
            }
            ModelParamsOf::Cascade {
                encoder,
                intermediate,
                final_decoder,
                combine,
            } => {
                encoder.visit_mut("encoder", &mut out);
                intermediate.visit_mut("intermediate_decoder", &mut out);
                final_decoder.visit_mut("final_decoder", &mut out);
                if let Some(c) = combine {
                    out.push(("combine.weight".into(), &mut c.weight));
                    out.push(("combine.bias".into(), &mut c.bias));
                }
            }
        }
        out
    }

    /// Total scalar parameter count.
    pub fn num_parameters(&self) -> usize {
        self.named_tensors().iter().map(|(_, t)| t.len()).sum()
    }

    /// Record every tensor on the tape; `trainable` marks them for
    /// gradient accumulation.
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> ModelVars {
        let mut f = binder(tape, trainable);
        match self {
            ModelParamsOf::EncDec { encoder, decoder } => ModelParamsOf::EncDec {
                encoder: encoder.map(&mut f),
                decoder: decoder.map(&mut f),
            },
            ModelParamsOf::Inside {
                source_encoder,
                context_encoder,
                decoder,
            } => ModelParamsOf::Inside {
                source_encoder: source_encoder.map(&mut f),
                context_encoder: context_encoder.map(&mut f),
                decoder: decoder.map(&mut f),
            },
            ModelParamsOf::Cascade {
                encoder,
                intermediate,
                final_decoder,
                combine,
            } => ModelParamsOf::Cascade {
                encoder: encoder.map(&mut f),
                intermediate: intermediate.map(&mut f),
                final_decoder: final_decoder.map(&mut f),
                combine: combine.as_ref().map(|c| c.map(&mut f)),
            },
        }
    }
}

impl ModelVars {
    /// Tape handles in the same order as [`ModelParams::named_tensors`],
    /// for reading gradients back out after `backward`.
    pub fn bound_vars(&self) -> Vec<Var> {
        let mut out = Vec::new();
        let mut f = |v: &Var| {
            out.push(*v);
            *v
        };
        match self {
            ModelParamsOf::EncDec { encoder, decoder } => {
                encoder.map(&mut f);
                decoder.map(&mut f);
            }
            ModelParamsOf::Inside {
                source_encoder,
                context_encoder,
                decoder,
            } => {
                source_encoder.map(&mut f);
                context_encoder.map(&mut f);
                decoder.map(&mut f);
            }
            ModelParamsOf::Cascade {
                encoder,
                intermediate,
                final_decoder,
                combine,
            } => {
                encoder.map(&mut f);
                intermediate.map(&mut f);
                final_decoder.map(&mut f);
                if let Some(c) = combine {
                    c.map(&mut f);
                }
            }
        }
        out
    }
}

// ── forwards ────────────────────────────────────────────────────────────

fn no_pad(len: usize) -> Vec<bool> {
    vec![false; len]
}

/// Sentence-level baseline: encode the source, decode the target prefix
/// against it. Context never enters the graph.
pub fn vanilla_forward(
    tape: &mut Tape,
    source: &[usize],
    target_prefix: &[usize],
    encoder: &EncoderParams<Var>,
    decoder: &DecoderParams<Var>,
    block: &BlockConfig,
    drop: &mut DropoutMode,
) -> Result<Var, ModelError> {
    let memory = encoder_stack(tape, source, &no_pad(source.len()), block, encoder, drop)?;
    let hidden = decoder_stack(
        tape,
        target_prefix,
        memory,
        &AttentionMask::causal(target_prefix.len()),
        &AttentionMask::full(target_prefix.len(), source.len()),
        block,
        decoder,
        drop,
    )?;
    project_vocab(tape, hidden, &decoder.output)
}

/// Encoder input for the concatenation architecture: context (its final
/// `<eos>` dropped), `<concat>`, then the untouched source. When the result
/// would exceed `max_len`, context tokens are dropped from the left, oldest
/// first; the source is never truncated. Returns the input and the number
/// of context tokens dropped.
pub fn concat_input(context: &[usize], source: &[usize], max_len: usize) -> (Vec<usize>, usize) {
    let ctx = if context.last() == Some(&crate::data::EOS) {
        &context[..context.len() - 1]
    } else {
        context
    };
    let budget = max_len.saturating_sub(source.len() + 1);
    let dropped = ctx.len().saturating_sub(budget);
    let mut input = Vec::with_capacity(ctx.len() - dropped + 1 + source.len());
    input.extend_from_slice(&ctx[dropped..]);
    input.push(CONCAT);
    input.extend_from_slice(source);
    (input, dropped)
}

/// Single-encoder context model over `context ⧺ <concat> ⧺ source`.
pub fn concat_context_forward(
    tape: &mut Tape,
    context: &[usize],
    source: &[usize],
    target_prefix: &[usize],
    encoder: &EncoderParams<Var>,
    decoder: &DecoderParams<Var>,
    block: &BlockConfig,
    drop: &mut DropoutMode,
) -> Result<Var, ModelError> {
    let (input, dropped) = concat_input(context, source, block.max_positions);
    if dropped > 0 {
        eprintln!(
            "warning: concatenated input over {} tokens, dropped {dropped} context tokens from the left",
            block.max_positions
        );
    }
    vanilla_forward(tape, &input, target_prefix, encoder, decoder, block, drop)
}

/// Two encoders and a decoder whose layers cross-attend to both streams,
/// adding the two attention outputs element-wise into one residual before
/// the shared layer norm.
pub fn inside_context_forward(
    tape: &mut Tape,
    context: &[usize],
    source: &[usize],
    target_prefix: &[usize],
    source_encoder: &EncoderParams<Var>,
    context_encoder: &EncoderParams<Var>,
    decoder: &DecoderParams<Var>,
    block: &BlockConfig,
    drop: &mut DropoutMode,
) -> Result<Var, ModelError> {
    let src_mem = encoder_stack(tape, source, &no_pad(source.len()), block, source_encoder, drop)?;
    let ctx_mem = encoder_stack(
        tape,
        context,
        &no_pad(context.len()),
        block,
        context_encoder,
        drop,
    )?;

    let t = target_prefix.len();
    let self_mask = AttentionMask::causal(t);
    let src_mask = AttentionMask::full(t, source.len());
    let ctx_mask = AttentionMask::full(t, context.len());

    let mut x = embed(
        tape,
        target_prefix,
        decoder.token_embedding,
        decoder.positional_embedding,
        drop,
    )?;
    for layer in &decoder.layers {
        let context_attn = layer.context_attn.as_ref().ok_or_else(|| {
            ModelError::Config("inside_context decoder layer lacks the context branch".into())
        })?;
        let attended =
            multi_head_attention(tape, x, x, x, &self_mask, &layer.self_attn, block.num_heads)?;
        x = sublayer(tape, x, attended, &layer.self_norm, drop)?;

        let over_source = multi_head_attention(
            tape,
            x,
            src_mem,
            src_mem,
            &src_mask,
            &layer.cross_attn,
            block.num_heads,
        )?;
        let over_context = multi_head_attention(
            tape,
            x,
            ctx_mem,
            ctx_mem,
            &ctx_mask,
            context_attn,
            block.num_heads,
        )?;
        let over_source = drop.apply(tape, over_source)?;
        let over_context = drop.apply(tape, over_context)?;
        let summed = tape.add(x, over_source)?;
        let summed = tape.add(summed, over_context)?;
        x = tape.layer_norm(
            summed,
            layer.cross_norm.gain,
            layer.cross_norm.bias,
            LAYER_NORM_EPS,
        )?;

        let ff = feed_forward(tape, x, &layer.ffn)?;
        x = sublayer(tape, x, ff, &layer.ffn_norm, drop)?;
    }
    project_vocab(tape, x, &decoder.output)
}

/// ReLU-activated linear combine of the residual cascade: both streams are
/// stacked along the sequence axis (context rows, then source rows) and
/// mapped position-wise, giving a `[(Z+S) × d]` memory.
pub(crate) fn residual_memory(
    tape: &mut Tape,
    encoder_output: Var,
    intermediate_states: Var,
    combine: &Linear<Var>,
) -> Result<Var, ModelError> {
    let stacked = tape.concat_rows(encoder_output, intermediate_states)?;
    let mapped = tape.matmul(stacked, combine.weight)?;
    let shifted = tape.add_row(mapped, combine.bias)?;
    Ok(tape.relu(shifted))
}

struct CascadeVars<'p> {
    encoder: &'p EncoderParams<Var>,
    intermediate: &'p DecoderParams<Var>,
    final_decoder: &'p DecoderParams<Var>,
}

/// Shared cascade graph. `combine = None` keeps the final decoder's memory
/// strictly the intermediate decoder's states (the isolation the MTL
/// variant is about); `Some` routes the encoder output in as well.
fn cascade_forward(
    tape: &mut Tape,
    context: &[usize],
    source: &[usize],
    target_prefix: &[usize],
    vars: &CascadeVars,
    combine: Option<&Linear<Var>>,
    block: &BlockConfig,
    drop: &mut DropoutMode,
    ablation: &CascadeAblation,
) -> Result<CascadeOutput, ModelError> {
    let mut enc_out = encoder_stack(
        tape,
        context,
        &no_pad(context.len()),
        block,
        vars.encoder,
        drop,
    )?;
    if ablation.zero_encoder_output {
        enc_out = tape.scale(enc_out, 0.0);
    }

    let source_prefix = shift_right(source);
    let s = source_prefix.len();
    let hidden = decoder_stack(
        tape,
        &source_prefix,
        enc_out,
        &AttentionMask::causal(s),
        &AttentionMask::full(s, context.len()),
        block,
        vars.intermediate,
        drop,
    )?;
    let reconstruction_logits = project_vocab(tape, hidden, &vars.intermediate.output)?;

    let intermediate_states = if ablation.zero_intermediate_states {
        tape.scale(hidden, 0.0)
    } else {
        hidden
    };
    let memory = match combine {
        None => intermediate_states,
        Some(lin) => residual_memory(tape, enc_out, intermediate_states, lin)?,
    };

    let t = target_prefix.len();
    let memory_len = tape.value(memory).dims2().0;
    let out = decoder_stack(
        tape,
        target_prefix,
        memory,
        &AttentionMask::causal(t),
        &AttentionMask::full(t, memory_len),
        block,
        vars.final_decoder,
        drop,
    )?;
    let translation_logits = project_vocab(tape, out, &vars.final_decoder.output)?;
    Ok(CascadeOutput {
        reconstruction_logits,
        translation_logits,
    })
}

/// Cascade with strict stream isolation: encoder(context) feeds only the
/// intermediate decoder; the final decoder sees the intermediate decoder's
/// last-layer states over all source positions and nothing else.
#[allow(clippy::too_many_arguments)]
pub fn cascade_mtl_forward(
    tape: &mut Tape,
    context: &[usize],
    source: &[usize],
    target_prefix: &[usize],
    encoder: &EncoderParams<Var>,
    intermediate: &DecoderParams<Var>,
    final_decoder: &DecoderParams<Var>,
    block: &BlockConfig,
    drop: &mut DropoutMode,
    ablation: &CascadeAblation,
) -> Result<CascadeOutput, ModelError> {
    cascade_forward(
        tape,
        context,
        source,
        target_prefix,
        &CascadeVars {
            encoder,
            intermediate,
            final_decoder,
        },
        None,
        block,
        drop,
        ablation,
    )
}

/// Appendix variant that deliberately breaks the isolation: final-decoder
/// memory is the ReLU-combined stack of encoder output and intermediate
/// states.
#[allow(clippy::too_many_arguments)]
pub fn cascade_residual_forward(
    tape: &mut Tape,
    context: &[usize],
    source: &[usize],
    target_prefix: &[usize],
    encoder: &EncoderParams<Var>,
    intermediate: &DecoderParams<Var>,
    final_decoder: &DecoderParams<Var>,
    combine: &Linear<Var>,
    block: &BlockConfig,
    drop: &mut DropoutMode,
    ablation: &CascadeAblation,
) -> Result<CascadeOutput, ModelError> {
    cascade_forward(
        tape,
        context,
        source,
        target_prefix,
        &CascadeVars {
            encoder,
            intermediate,
            final_decoder,
        },
        Some(combine),
        block,
        drop,
        ablation,
    )
}

/// Translation logits plus, for the cascades, the reconstruction stream
/// with the token ids it is scored against.
#[derive(Debug)]
pub struct ForwardOutput {
    pub translation_logits: Var,
    pub reconstruction: Option<Reconstruction>,
}

#[derive(Debug)]
pub struct Reconstruction {
    pub logits: Var,
    /// Gold ids for the reconstruction loss (the sequence the intermediate
    /// decoder re-generates, `<eos>`-terminated).
    pub targets: Vec<usize>,
}

/// One forward pass through whichever architecture `cfg` names. The
/// `re_cntx` objective swaps context and source before the cascade graph
/// runs, so its intermediate decoder reconstructs the context instead.
pub fn forward(
    tape: &mut Tape,
    cfg: &ModelConfig,
    vars: &ModelVars,
    context: &[usize],
    source: &[usize],
    target_prefix: &[usize],
    drop: &mut DropoutMode,
    ablation: &CascadeAblation,
) -> Result<ForwardOutput, ModelError> {
    match (vars, cfg.arch) {
        (ModelParamsOf::EncDec { encoder, decoder }, Architecture::VanillaSent) => {
            let logits =
                vanilla_forward(tape, source, target_prefix, encoder, decoder, &cfg.block, drop)?;
            Ok(ForwardOutput {
                translation_logits: logits,
                reconstruction: None,
            })
        }
        (ModelParamsOf::EncDec { encoder, decoder }, Architecture::ConcatContext) => {
            let logits = concat_context_forward(
                tape,
                context,
                source,
                target_prefix,
                encoder,
                decoder,
                &cfg.block,
                drop,
            )?;
            Ok(ForwardOutput {
                translation_logits: logits,
                reconstruction: None,
            })
        }
        (
            ModelParamsOf::Inside {
                source_encoder,
                context_encoder,
                decoder,
            },
            Architecture::InsideContext,
        ) => {
            let logits = inside_context_forward(
                tape,
                context,
                source,
                target_prefix,
                source_encoder,
                context_encoder,
                decoder,
                &cfg.block,
                drop,
            )?;
            Ok(ForwardOutput {
                translation_logits: logits,
                reconstruction: None,
            })
        }
        (
            ModelParamsOf::Cascade {
                encoder,
                intermediate,
                final_decoder,
                combine,
            },
            Architecture::CascadeMtl | Architecture::CascadeResidual,
        ) => {
            let (ctx, src) = match cfg.aux_objective {
                AuxObjective::ReSrc => (context, source),
                AuxObjective::ReCntx => (source, context),
            };
            let out = cascade_forward(
                tape,
                ctx,
                src,
                target_prefix,
                &CascadeVars {
                    encoder,
                    intermediate,
                    final_decoder,
                },
                match (cfg.arch, combine) {
                    (Architecture::CascadeResidual, Some(lin)) => Some(lin),
                    (Architecture::CascadeResidual, None) => {
                        return Err(ModelError::Config(
                            "cascade_residual parameters lack the combine layer".into(),
                        ))
                    }
                    _ => None,
                },
                &cfg.block,
                drop,
                ablation,
            )?;
            Ok(ForwardOutput {
                translation_logits: out.translation_logits,
                reconstruction: Some(Reconstruction {
                    logits: out.reconstruction_logits,
                    targets: src.to_vec(),
                }),
            })
        }
        _ => Err(ModelError::Config(format!(
            "parameter tree does not match architecture {}",
            cfg.arch.name()
        ))),
    }
}

/// Teacher-forced forward over a whole triplet: the decoder input is the
/// right-shifted target.
pub fn forward_triplet(
    tape: &mut Tape,
    cfg: &ModelConfig,
    vars: &ModelVars,
    triplet: &Triplet,
    drop: &mut DropoutMode,
    ablation: &CascadeAblation,
) -> Result<ForwardOutput, ModelError> {
    let target_prefix = shift_right(&triplet.target);
    forward(
        tape,
        cfg,
        vars,
        &triplet.context,
        &triplet.source,
        &target_prefix,
        drop,
        ablation,
    )
}
