//! Decoding: beam search with the GNMT length penalty, greedy decoding,
//! and greedy source reconstruction from the intermediate decoder.

use thiserror::Error;

use crate::arch::{
    cascade_mtl_forward, cascade_residual_forward, forward, Architecture, CascadeAblation,
    ModelConfig, ModelParams, ModelParamsOf, Triplet,
};
use crate::blocks::{DropoutMode, ModelError};
use crate::data::{BOS, EOS};
use crate::tensor::{Tape, TensorError};

#[derive(Debug, Error)]
pub enum InferError {
    #[error("invalid decode options: {0}")]
    Config(String),
    #[error("scorer returned an empty distribution")]
    EmptyScores,
    #[error("length penalty requires length >= 1, got 0")]
    ZeroLength,
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// One partial or retired decode: the token prefix (including `<bos>`),
/// its summed log-probability, and whether it ended on `<eos>`. With
/// normalized scores the sum never increases as tokens append.
#[derive(Debug, Clone, PartialEq)]
pub struct Hypothesis {
    pub tokens: Vec<usize>,
    pub log_prob: f64,
    pub finished: bool,
}

impl Hypothesis {
    /// Generated length: tokens after `<bos>`.
    fn generated(&self) -> usize {
        self.tokens.len() - 1
    }
}

/// GNMT length penalty `((5 + length) / 6)^p`; hypotheses are ranked by
/// `log_prob / length_penalty(length)`.
pub fn length_penalty(length: usize, p: f64) -> Result<f64, InferError> {
    if length == 0 {
        return Err(InferError::ZeroLength);
    }
    Ok(((5.0 + length as f64) / 6.0).powf(p))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DecodeOptions {
    pub beam: usize,
    pub length_penalty: f64,
    /// Generated-token cap; `None` means `2 * source_len + 10`.
    pub max_len: Option<usize>,
}

impl Default for DecodeOptions {
    fn default() -> Self {
        DecodeOptions {
            beam: 4,
            length_penalty: 0.6,
            max_len: None,
        }
    }
}

impl DecodeOptions {
    pub fn validate(&self) -> Result<(), InferError> {
        if self.beam == 0 {
            return Err(InferError::Config("beam must be at least 1".into()));
        }
        if !self.length_penalty.is_finite() || self.length_penalty < 0.0 {
            return Err(InferError::Config(format!(
                "length penalty exponent must be finite and non-negative, got {}",
                self.length_penalty
            )));
        }
        if self.max_len == Some(0) {
            return Err(InferError::Config("max_len must be at least 1".into()));
        }
        Ok(())
    }
}

pub fn default_max_len(source_len: usize) -> usize {
    2 * source_len + 10
}

/// Everything the search saw: the winning token ids (`<bos>`/`<eos>`
/// stripped), every retired hypothesis, and whether the result fell back
/// to an unfinished hypothesis because nothing reached `<eos>`.
#[derive(Debug, Clone)]
pub struct BeamOutcome {
    pub tokens: Vec<usize>,
    pub finished: Vec<Hypothesis>,
    pub fell_back: bool,
}

fn penalized(h: &Hypothesis, p: f64) -> Result<f64, InferError> {
    Ok(h.log_prob / length_penalty(h.generated(), p)?)
}

/// Ranks high scores first; exact ties go to the lexicographically
/// smallest token sequence, i.e. the lowest token id at the first
/// difference, so the search is deterministic.
fn rank(a: &(f64, Hypothesis), b: &(f64, Hypothesis)) -> std::cmp::Ordering {
    b.0.total_cmp(&a.0).then_with(|| a.1.tokens.cmp(&b.1.tokens))
}

/// Beam search over an abstract next-token scorer: `scorer(prefix)` maps a
/// `<bos>`-rooted prefix to normalized log-probabilities for the next
/// token. Hypotheses reaching `eos` retire; the search stops once `beam`
/// hypotheses have retired, every live hypothesis has retired, or the
/// generated length hits `max_len`. If nothing retired, the best
/// unfinished hypothesis is returned with `fell_back` set.
pub fn beam_search_with<F>(
    mut scorer: F,
    bos: usize,
    eos: usize,
    beam: usize,
    p: f64,
    max_len: usize,
) -> Result<BeamOutcome, InferError>
where
    F: FnMut(&[usize]) -> Result<Vec<f64>, InferError>,
{
    let opts = DecodeOptions {
        beam,
        length_penalty: p,
        max_len: Some(max_len),
    };
    opts.validate()?;

    let mut active = vec![Hypothesis {
        tokens: vec![bos],
        log_prob: 0.0,
        finished: false,
    }];
    let mut finished: Vec<Hypothesis> = Vec::new();
    let mut vocab: Option<usize> = None;

    for _ in 0..max_len {
        let mut candidates: Vec<(f64, Hypothesis)> = Vec::new();
        for hyp in &active {
            let scores = scorer(&hyp.tokens)?;
            if scores.is_empty() {
                return Err(InferError::EmptyScores);
            }
            match vocab {
                None => vocab = Some(scores.len()),
                Some(v) if v != scores.len() => {
                    return Err(InferError::Config(format!(
                        "scorer vocabulary changed from {v} to {}",
                        scores.len()
                    )))
                }
                Some(_) => {}
            }
            for (tok, &lp) in scores.iter().enumerate() {
                let mut tokens = hyp.tokens.clone();
                tokens.push(tok);
                let cand = Hypothesis {
                    tokens,
                    log_prob: hyp.log_prob + lp,
                    finished: tok == eos,
                };
                candidates.push((penalized(&cand, p)?, cand));
            }
        }
        candidates.sort_by(rank);
        candidates.truncate(beam);

        active.clear();
        for (_, cand) in candidates {
            if cand.finished {
                finished.push(cand);
            } else {
                active.push(cand);
            }
        }
        if finished.len() >= beam || active.is_empty() {
            break;
        }
    }

    let pick_best = |pool: &[Hypothesis]| -> Result<Hypothesis, InferError> {
        let mut ranked: Vec<(f64, Hypothesis)> = pool
            .iter()
            .map(|h| Ok((penalized(h, p)?, h.clone())))
            .collect::<Result<_, InferError>>()?;
        ranked.sort_by(rank);
        Ok(ranked.remove(0).1)
    };

    let (best, fell_back) = if finished.is_empty() {
        (pick_best(&active)?, true)
    } else {
        (pick_best(&finished)?, false)
    };
    let mut tokens = best.tokens[1..].to_vec();
    if best.finished {
        tokens.pop();
    }
    Ok(BeamOutcome {
        tokens,
        finished,
        fell_back,
    })
}

/// Argmax decoding over the same abstract scorer; ties go to the lowest
/// token id. Stops on `eos` (excluded from the output) or at `max_len`.
pub fn greedy_decode_with<F>(
    mut scorer: F,
    bos: usize,
    eos: usize,
    max_len: usize,
) -> Result<Vec<usize>, InferError>
where
    F: FnMut(&[usize]) -> Result<Vec<f64>, InferError>,
{
    let mut prefix = vec![bos];
    for _ in 0..max_len {
        let scores = scorer(&prefix)?;
        if scores.is_empty() {
            return Err(InferError::EmptyScores);
        }
        let mut best = 0usize;
        for (tok, &s) in scores.iter().enumerate() {
            if s > scores[best] {
                best = tok;
            }
        }
        if best == eos {
            break;
        }
        prefix.push(best);
    }
    Ok(prefix[1..].to_vec())
}

fn log_softmax_last_row(tape: &Tape, logits: crate::tensor::Var) -> Vec<f64> {
    let t = tape.value(logits);
    let (rows, vocab) = (t.shape[0], t.shape[1]);
    let row = &t.data[(rows - 1) * vocab..rows * vocab];
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
    row.iter().map(|v| v - lse).collect()
}

/// Next-token log-probabilities from one teacher-forced forward pass over
/// the prefix. Rebinds the parameters on a fresh tape per call, which
/// keeps the search read-only over the checkpoint.
fn model_scores(
    cfg: &ModelConfig,
    params: &ModelParams,
    context: &[usize],
    source: &[usize],
    prefix: &[usize],
) -> Result<Vec<f64>, InferError> {
    let mut tape = Tape::new();
    let vars = params.bind(&mut tape, false);
    let out = forward(
        &mut tape,
        cfg,
        &vars,
        context,
        source,
        prefix,
        &mut DropoutMode::Disabled,
        &CascadeAblation::NONE,
    )?;
    Ok(log_softmax_last_row(&tape, out.translation_logits))
}

/// Beam-search translation of one sentence. Prints a warning when no
/// hypothesis finished within the length cap and the best unfinished one
/// is returned instead.
pub fn beam_search(
    cfg: &ModelConfig,
    params: &ModelParams,
    context: &[usize],
    source: &[usize],
    opts: &DecodeOptions,
) -> Result<Vec<usize>, InferError> {
    opts.validate()?;
    let max_len = opts.max_len.unwrap_or_else(|| default_max_len(source.len()));
    let outcome = beam_search_with(
        |prefix| model_scores(cfg, params, context, source, prefix),
        BOS,
        EOS,
        opts.beam,
        opts.length_penalty,
        max_len,
    )?;
    if outcome.fell_back {
        eprintln!(
            "warning: no hypothesis finished within {max_len} tokens; returning the best \
             unfinished one"
        );
    }
    Ok(outcome.tokens)
}

/// Greedy translation of one sentence.
pub fn greedy_decode(
    cfg: &ModelConfig,
    params: &ModelParams,
    context: &[usize],
    source: &[usize],
    max_len: Option<usize>,
) -> Result<Vec<usize>, InferError> {
    let max_len = max_len.unwrap_or_else(|| default_max_len(source.len()));
    greedy_decode_with(
        |prefix| model_scores(cfg, params, context, source, prefix),
        BOS,
        EOS,
        max_len,
    )
}

/// Greedy decoding on the intermediate decoder: regenerates the sequence
/// the reconstruction stream was trained on (the source under `re_src`,
/// the context under `re_cntx`) from `conditioning` alone. Only the
/// cascade architectures have this stream.
pub fn greedy_reconstruct(
    cfg: &ModelConfig,
    params: &ModelParams,
    conditioning: &[usize],
    max_len: usize,
) -> Result<Vec<usize>, InferError> {
    if !cfg.arch.is_cascade() {
        return Err(ModelError::Unsupported {
            arch: cfg.arch.name(),
            op: "greedy reconstruction",
        }
        .into());
    }
    if max_len == 0 {
        return Err(InferError::Config("max_len must be at least 1".into()));
    }

    let mut generated: Vec<usize> = Vec::new();
    for _ in 0..max_len {
        // Feed the prefix through the reconstruction stream: the decoder
        // input is the right-shifted "source", so a source of
        // `generated ++ [eos]` makes it consume exactly `<bos> ++ generated`
        // (the placeholder last token is shifted away, never read).
        let mut fake_source = generated.clone();
        fake_source.push(EOS);

        let mut tape = Tape::new();
        let vars = params.bind(&mut tape, false);
        let mut drop = DropoutMode::Disabled;
        let out = match (&vars, cfg.arch) {
            (
                ModelParamsOf::Cascade {
                    encoder,
                    intermediate,
                    final_decoder,
                    combine,
                },
                arch,
            ) => match arch {
                Architecture::CascadeMtl => cascade_mtl_forward(
                    &mut tape,
                    conditioning,
                    &fake_source,
                    &[BOS],
                    encoder,
                    intermediate,
                    final_decoder,
                    &cfg.block,
                    &mut drop,
                    &CascadeAblation::NONE,
                )?,
                Architecture::CascadeResidual => {
                    let combine = combine.as_ref().ok_or_else(|| {
                        ModelError::Config(
                            "cascade_residual parameters lack the combine layer".into(),
                        )
                    })?;
                    cascade_residual_forward(
                        &mut tape,
                        conditioning,
                        &fake_source,
                        &[BOS],
                        encoder,
                        intermediate,
                        final_decoder,
                        combine,
                        &cfg.block,
                        &mut drop,
                        &CascadeAblation::NONE,
                    )?
                }
                _ => unreachable!("is_cascade checked above"),
            },
            _ => {
                return Err(ModelError::Config(format!(
                    "parameter tree does not match architecture {}",
                    cfg.arch.name()
                ))
                .into())
            }
        };

        let scores = log_softmax_last_row(&tape, out.reconstruction_logits);
        let mut best = 0usize;
        for (tok, &s) in scores.iter().enumerate() {
            if s > scores[best] {
                best = tok;
            }
        }
        if best == EOS {
            break;
        }
        generated.push(best);
    }
    Ok(generated)
}

/// Beam-decodes every triplet, preserving input order.
pub fn decode_corpus(
    cfg: &ModelConfig,
    params: &ModelParams,
    triplets: &[Triplet],
    opts: &DecodeOptions,
) -> Result<Vec<Vec<usize>>, InferError> {
    triplets
        .iter()
        .map(|t| beam_search(cfg, params, &t.context, &t.source, opts))
        .collect()
}
