//! Translation metrics: sentence- and document-level BLEU under the 13a
//! tokenizer with exponentially smoothed zero precisions, pronoun
//! translation accuracy, and paired bootstrap significance testing.
//!
//! The BLEU path is pinned to one configuration, mirrored in
//! [`BLEU_SIGNATURE`]: single reference, mixed case, no effective-order
//! fallback, 13a tokenization, exponential smoothing. The frozen fixture
//! corpora under `tests/fixtures/` hold reference scores for this exact
//! configuration; every change here must keep matching them.

use std::collections::{HashMap, HashSet};
use std::sync::OnceLock;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// BLEU matches n-grams up to this order.
pub const MAX_NGRAM_ORDER: usize = 4;

/// Metric signature in the conventional pipe-separated format.
pub const BLEU_SIGNATURE: &str = "nrefs:1|case:mixed|eff:no|tok:13a|smooth:exp";

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("invalid evaluation config: {0}")]
    Config(String),
    #[error("corpus is empty")]
    EmptyCorpus,
    #[error("corpora differ in length: {left} vs {right}")]
    LengthMismatch { left: usize, right: usize },
    #[error("document boundaries cover {covered} sentences, corpus has {expected}")]
    BadBoundaries { covered: usize, expected: usize },
}

/// Scoring knobs, all pinned: tokenizer 13a, exponential smoothing, mixed
/// case, effective order off. The type exists so call sites carry the
/// configuration explicitly even though only one is constructible.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct BleuConfig;

impl BleuConfig {
    pub fn signature(&self) -> &'static str {
        BLEU_SIGNATURE
    }
}

// ── 13a tokenization ────────────────────────────────────────────────────

/// The four splitting rules, applied in order. Rule one isolates the
/// ASCII punctuation union 0x20-0x26, 0x28-0x2B, 0x2F, 0x3A-0x40,
/// 0x5B-0x60, 0x7B-0x7E; rules two and three split periods and commas not
/// attached to digits; rule four splits a dash after a digit.
fn tokenizer_rules() -> &'static [(Regex, &'static str); 4] {
    static RULES: OnceLock<[(Regex, &'static str); 4]> = OnceLock::new();
    RULES.get_or_init(|| {
        [
            (
                Regex::new(r"([\x7b-\x7e\x5b-\x60\x20-\x26\x28-\x2b\x3a-\x40\x2f])").unwrap(),
                " ${1} ",
            ),
            (Regex::new(r"([^0-9])([\.,])").unwrap(), "${1} ${2} "),
            (Regex::new(r"([\.,])([^0-9])").unwrap(), " ${1} ${2}"),
            (Regex::new(r"([0-9])(\-)").unwrap(), "${1} ${2} "),
        ]
    })
}

/// 13a tokenization: right-strip, drop `<skipped>` tags, unwrap hyphenated
/// line breaks, unescape the four XML entities when an ampersand is
/// present, then isolate punctuation by the rules above and split on
/// whitespace.
pub fn tokenize_13a(line: &str) -> Vec<String> {
    let mut line = line.trim_end().to_string();
    line = line.replace("<skipped>", "");
    line = line.replace("-\n", "");
    line = line.replace('\n', " ");
    if line.contains('&') {
        line = line.replace("&quot;", "\"");
        line = line.replace("&amp;", "&");
        line = line.replace("&lt;", "<");
        line = line.replace("&gt;", ">");
    }
    let mut spaced = format!(" {line} ");
    for (pattern, replacement) in tokenizer_rules() {
        spaced = pattern.replace_all(&spaced, *replacement).into_owned();
    }
    spaced.split_whitespace().map(str::to_string).collect()
}

// ── BLEU ────────────────────────────────────────────────────────────────

/// Sufficient statistics for corpus BLEU: clipped n-gram matches and
/// totals per order, plus hypothesis and reference token counts. Sums of
/// segment statistics score a corpus, which is what lets the bootstrap
/// resample cheaply.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct BleuStats {
    pub correct: [u64; MAX_NGRAM_ORDER],
    pub total: [u64; MAX_NGRAM_ORDER],
    pub sys_len: u64,
    pub ref_len: u64,
}

fn ngram_counts(tokens: &[String], n: usize) -> HashMap<&[String], u64> {
    let mut counts = HashMap::new();
    if tokens.len() >= n {
        for gram in tokens.windows(n) {
            *counts.entry(gram).or_insert(0) += 1;
        }
    }
    counts
}

fn my_log(x: f64) -> f64 {
    // stands in for ln(0) so a zero precision zeroes the whole score
    if x == 0.0 {
        -9_999_999_999.0
    } else {
        x.ln()
    }
}

impl BleuStats {
    /// Statistics for one already-tokenized segment pair.
    pub fn from_tokens(hyp: &[String], reference: &[String]) -> Self {
        let mut stats = BleuStats {
            sys_len: hyp.len() as u64,
            ref_len: reference.len() as u64,
            ..Default::default()
        };
        for n in 1..=MAX_NGRAM_ORDER {
            let ref_grams = ngram_counts(reference, n);
            for (gram, count) in ngram_counts(hyp, n) {
                stats.total[n - 1] += count;
                stats.correct[n - 1] += count.min(ref_grams.get(gram).copied().unwrap_or(0));
            }
        }
        stats
    }

    /// Statistics for one raw segment pair, tokenizing both sides.
    pub fn from_segment(hyp: &str, reference: &str) -> Self {
        Self::from_tokens(&tokenize_13a(hyp), &tokenize_13a(reference))
    }

    pub fn add(&mut self, other: &BleuStats) {
        for i in 0..MAX_NGRAM_ORDER {
            self.correct[i] += other.correct[i];
            self.total[i] += other.total[i];
        }
        self.sys_len += other.sys_len;
        self.ref_len += other.ref_len;
    }

    /// BLEU in [0, 100]: brevity penalty times the geometric mean of the
    /// four n-gram precisions. A zero-match order at nonzero total takes
    /// the halving smoothing `100 / (2^k * total)`; an order with no
    /// n-grams at all stays at zero precision, which drives the whole
    /// score to zero (no effective-order fallback).
    pub fn score(&self) -> f64 {
        let bp = if self.sys_len < self.ref_len {
            if self.sys_len > 0 {
                (1.0 - self.ref_len as f64 / self.sys_len as f64).exp()
            } else {
                0.0
            }
        } else {
            1.0
        };
        let mut precisions = [0.0f64; MAX_NGRAM_ORDER];
        let mut smooth = 1.0f64;
        for n in 0..MAX_NGRAM_ORDER {
            if self.total[n] == 0 {
                break;
            }
            if self.correct[n] == 0 {
                smooth *= 2.0;
                precisions[n] = 100.0 / (smooth * self.total[n] as f64);
            } else {
                precisions[n] = 100.0 * self.correct[n] as f64 / self.total[n] as f64;
            }
        }
        let log_sum: f64 = precisions.iter().map(|&p| my_log(p)).sum();
        bp * (log_sum / MAX_NGRAM_ORDER as f64).exp()
    }
}

/// Per-sentence statistics for aligned corpora. Public so significance
/// tests can resample over the same sufficient statistics the corpus
/// score is built from.
pub fn sentence_stats(hyps: &[String], refs: &[String]) -> Result<Vec<BleuStats>, EvalError> {
    if hyps.len() != refs.len() {
        return Err(EvalError::LengthMismatch {
            left: hyps.len(),
            right: refs.len(),
        });
    }
    if hyps.is_empty() {
        return Err(EvalError::EmptyCorpus);
    }
    Ok(hyps
        .iter()
        .zip(refs)
        .map(|(h, r)| BleuStats::from_segment(h, r))
        .collect())
}

/// Corpus-level BLEU over aligned sentence lists.
pub fn corpus_bleu(hyps: &[String], refs: &[String], _cfg: &BleuConfig) -> Result<f64, EvalError> {
    let stats = sentence_stats(hyps, refs)?;
    let mut sum = BleuStats::default();
    for s in &stats {
        sum.add(s);
    }
    Ok(sum.score())
}

/// Document-level BLEU: each document's sentences are joined with single
/// spaces on both sides, and the resulting one-sequence-per-document
/// corpus is scored with [`corpus_bleu`]. `doc_lens` gives the number of
/// sentences per document and must exactly partition both corpora.
pub fn doc_bleu(
    hyps: &[String],
    refs: &[String],
    doc_lens: &[usize],
    cfg: &BleuConfig,
) -> Result<f64, EvalError> {
    if hyps.len() != refs.len() {
        return Err(EvalError::LengthMismatch {
            left: hyps.len(),
            right: refs.len(),
        });
    }
    if doc_lens.iter().any(|&n| n == 0) {
        return Err(EvalError::Config("document with zero sentences".into()));
    }
    let covered: usize = doc_lens.iter().sum();
    if covered != hyps.len() {
        return Err(EvalError::BadBoundaries {
            covered,
            expected: hyps.len(),
        });
    }
    let join = |sents: &[String]| -> Vec<String> {
        let mut docs = Vec::with_capacity(doc_lens.len());
        let mut pos = 0;
        for &n in doc_lens {
            docs.push(sents[pos..pos + n].join(" "));
            pos += n;
        }
        docs
    };
    corpus_bleu(&join(hyps), &join(refs), cfg)
}

// ── pronoun translation accuracy ────────────────────────────────────────

/// Pronoun surface forms for the two languages, lowercase-normalized. The
/// target list is optional; when absent the source list doubles as the
/// target-side list (useful for monolingual synthetic corpora). An
/// optional equivalence map folds variants (clitics, case forms) into one
/// class before comparison.
#[derive(Debug, Clone)]
pub struct PronounLists {
    source: Vec<String>,
    target: Option<Vec<String>>,
    equivalence: HashMap<String, String>,
}

impl PronounLists {
    pub fn new<S: AsRef<str>>(source: &[S], target: Option<&[S]>) -> Result<Self, EvalError> {
        let normalize = |items: &[S]| -> Vec<String> {
            let mut seen = HashSet::new();
            items
                .iter()
                .map(|s| s.as_ref().trim().to_lowercase())
                .filter(|s| !s.is_empty() && seen.insert(s.clone()))
                .collect()
        };
        let source = normalize(source);
        if source.is_empty() {
            return Err(EvalError::Config(
                "source pronoun list must not be empty".into(),
            ));
        }
        let target = target.map(normalize).filter(|t| !t.is_empty());
        Ok(PronounLists {
            source,
            target,
            equivalence: HashMap::new(),
        })
    }

    /// Parses "one surface form per line" file contents; blank lines are
    /// skipped.
    pub fn from_text(source_text: &str, target_text: Option<&str>) -> Result<Self, EvalError> {
        let lines = |text: &str| -> Vec<String> { text.lines().map(str::to_string).collect() };
        let src = lines(source_text);
        let tgt = target_text.map(lines);
        Self::new(&src, tgt.as_deref())
    }

    /// Adds variant -> canonical foldings, e.g. mapping an archaic or
    /// clitic form onto its class representative. Both sides are
    /// lowercased.
    pub fn with_equivalences<I, A, B>(mut self, pairs: I) -> Self
    where
        I: IntoIterator<Item = (A, B)>,
        A: AsRef<str>,
        B: AsRef<str>,
    {
        for (variant, canonical) in pairs {
            self.equivalence.insert(
                variant.as_ref().trim().to_lowercase(),
                canonical.as_ref().trim().to_lowercase(),
            );
        }
        self
    }

    fn canon(&self, token: &str) -> String {
        let lower = token.to_lowercase();
        match self.equivalence.get(&lower) {
            Some(class) => class.clone(),
            None => lower,
        }
    }

    fn canon_set(&self, items: &[String]) -> HashSet<String> {
        items.iter().map(|s| self.canon(s)).collect()
    }

    fn source_set(&self) -> HashSet<String> {
        self.canon_set(&self.source)
    }

    fn target_set(&self) -> HashSet<String> {
        match &self.target {
            Some(t) => self.canon_set(t),
            None => self.source_set(),
        }
    }
}

/// Window of token indices in a sentence of `len` tokens for a source
/// pronoun at fractional position `r`: centered at `r * len` with radius
/// `max(3, ceil(0.1 * len))`.
fn aligned_window(r: f64, len: usize) -> impl Iterator<Item = usize> {
    let center = r * len as f64;
    let radius = 3.0f64.max((0.1 * len as f64).ceil());
    (0..len).filter(move |&j| (j as f64 - center).abs() <= radius)
}

/// Accuracy of pronoun translation over aligned (source, hypothesis,
/// reference) sentences. For each source pronoun occurrence the expected
/// target pronoun is the one nearest the relative-position window center
/// in the reference (ties to the smaller index); the hypothesis is
/// correct if its own window contains that pronoun, case-folded and
/// equivalence-folded. When the reference window holds no pronoun the
/// hypothesis window must be pronoun-free. Returns `None` (with a
/// warning) when the sources contain no pronoun at all, since the score
/// is undefined.
pub fn apt_score(
    src_sents: &[String],
    hyp_sents: &[String],
    ref_sents: &[String],
    lists: &PronounLists,
) -> Result<Option<f64>, EvalError> {
    if src_sents.len() != hyp_sents.len() {
        return Err(EvalError::LengthMismatch {
            left: src_sents.len(),
            right: hyp_sents.len(),
        });
    }
    if src_sents.len() != ref_sents.len() {
        return Err(EvalError::LengthMismatch {
            left: src_sents.len(),
            right: ref_sents.len(),
        });
    }
    let source_set = lists.source_set();
    let target_set = lists.target_set();

    let mut occurrences = 0u64;
    let mut correct = 0u64;
    for ((src, hyp), reference) in src_sents.iter().zip(hyp_sents).zip(ref_sents) {
        let s = tokenize_13a(src);
        let h = tokenize_13a(hyp);
        let r = tokenize_13a(reference);
        for (i, token) in s.iter().enumerate() {
            if !source_set.contains(&lists.canon(token)) {
                continue;
            }
            occurrences += 1;
            let rel = i as f64 / s.len() as f64;

            let expected = aligned_window(rel, r.len())
                .filter(|&j| target_set.contains(&lists.canon(&r[j])))
                .min_by(|&a, &b| {
                    let center = rel * r.len() as f64;
                    let da = (a as f64 - center).abs();
                    let db = (b as f64 - center).abs();
                    da.total_cmp(&db).then(a.cmp(&b))
                })
                .map(|j| lists.canon(&r[j]));

            let hyp_window: Vec<String> =
                aligned_window(rel, h.len()).map(|j| lists.canon(&h[j])).collect();
            let hit = match &expected {
                Some(class) => hyp_window.iter().any(|t| t == class),
                None => !hyp_window.iter().any(|t| target_set.contains(t)),
            };
            if hit {
                correct += 1;
            }
        }
    }
    if occurrences == 0 {
        eprintln!("warning: no source pronoun occurrences; pronoun accuracy is undefined");
        return Ok(None);
    }
    Ok(Some(100.0 * correct as f64 / occurrences as f64))
}

// ── paired bootstrap ────────────────────────────────────────────────────

/// The resample index stream for [`paired_bootstrap`], exposed so tests
/// and audits can replay the exact samples: `n` draws of `sample_size`
/// indices into a corpus of `corpus_len` sentences, with replacement.
pub fn bootstrap_indices(
    seed: u64,
    n: usize,
    corpus_len: usize,
    sample_size: usize,
) -> Vec<Vec<usize>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| (0..sample_size).map(|_| rng.gen_range(0..corpus_len)).collect())
        .collect()
}

/// Paired bootstrap resampling: p is the fraction of resamples where
/// system B's corpus BLEU is at least system A's. Ties count for B, the
/// challenger, so identical systems yield p = 1.0. `sample_frac` scales
/// the resample size relative to the corpus (minimum one sentence).
pub fn paired_bootstrap(
    hyps_a: &[String],
    hyps_b: &[String],
    refs: &[String],
    n: usize,
    sample_frac: f64,
    seed: u64,
) -> Result<f64, EvalError> {
    if n < 1 {
        return Err(EvalError::Config("bootstrap needs at least one resample".into()));
    }
    if !sample_frac.is_finite() || sample_frac <= 0.0 {
        return Err(EvalError::Config(format!(
            "sample fraction must be positive and finite, got {sample_frac}"
        )));
    }
    if hyps_a.len() != hyps_b.len() {
        return Err(EvalError::LengthMismatch {
            left: hyps_a.len(),
            right: hyps_b.len(),
        });
    }
    let stats_a = sentence_stats(hyps_a, refs)?;
    let stats_b = sentence_stats(hyps_b, refs)?;

    let sample_size = ((sample_frac * stats_a.len() as f64).round() as usize).max(1);
    let mut wins_b = 0usize;
    for sample in bootstrap_indices(seed, n, stats_a.len(), sample_size) {
        let mut sum_a = BleuStats::default();
        let mut sum_b = BleuStats::default();
        for idx in sample {
            sum_a.add(&stats_a[idx]);
            sum_b.add(&stats_b[idx]);
        }
        if sum_b.score() >= sum_a.score() {
            wins_b += 1;
        }
    }
    Ok(wins_b as f64 / n as f64)
}

// ── report record ───────────────────────────────────────────────────────

/// One scored metric with the configuration signature it was computed
/// under. `value` is `None` when the metric was undefined on the input
/// (pronoun accuracy with no pronoun occurrences).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub metric: String,
    pub value: Option<f64>,
    pub signature: String,
}

impl EvalReport {
    pub fn bleu(metric: impl Into<String>, value: f64) -> Self {
        EvalReport {
            metric: metric.into(),
            value: Some(value),
            signature: BLEU_SIGNATURE.to_string(),
        }
    }

    pub fn new(metric: impl Into<String>, value: Option<f64>, signature: impl Into<String>) -> Self {
        EvalReport {
            metric: metric.into(),
            value,
            signature: signature.into(),
        }
    }
}
