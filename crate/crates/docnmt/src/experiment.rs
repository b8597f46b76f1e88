//! Experiment orchestration: a declarative spec (TOML) drives the whole
//! pipeline — subword vocabulary, triplet assembly, training, test-set
//! decoding, metric reports — with every artifact written under one
//! output directory. Also the random-context and self-context probes that
//! stress a trained checkpoint's use of context.
//!
//! Determinism contract: a rerun with an identical spec produces
//! byte-identical hypotheses and reports. Nothing here reads clocks,
//! process ids, or unordered map iteration into any artifact.

use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::arch::{
    load_checkpoint, save_checkpoint, Architecture, AuxObjective, Checkpoint, CheckpointError,
    ModelConfig, ModelParams, Triplet,
};
use crate::blocks::{BlockConfig, ModelError};
use crate::data::{
    bpe_train, build_triplets, decode as vocab_decode, load_corpus, ContextMode, DataError,
    ParallelDocumentCorpus, SubwordVocab, MAX_CONCAT_LEN, MAX_SRC_LEN,
};
use crate::eval::{
    apt_score, corpus_bleu, doc_bleu, paired_bootstrap, BleuConfig, EvalError, EvalReport,
    PronounLists,
};
use crate::infer::{beam_search, default_max_len, greedy_reconstruct, DecodeOptions, InferError};
use crate::train::{train, EpochRecord, TrainConfig, TrainError};

pub const APT_SIGNATURE: &str = "apt|align:relative-position|radius:max(3,ceil(0.1*len))|case:folded";

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error("config: {0}")]
    Config(String),
    #[error("{stage}: {source}")]
    Data {
        stage: &'static str,
        #[source]
        source: DataError,
    },
    #[error("{stage}: {path}: {source}")]
    Io {
        stage: &'static str,
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("training: {0}")]
    Train(#[from] TrainError),
    #[error("{stage}: {source}")]
    Infer {
        stage: &'static str,
        #[source]
        source: InferError,
    },
    #[error("evaluation: {0}")]
    Eval(#[from] EvalError),
    #[error("checkpoint: {0}")]
    Checkpoint(#[from] CheckpointError),
    #[error("{0}")]
    Model(#[from] ModelError),
}

impl ExperimentError {
    /// Process exit code: 1 for configuration and usage problems, 2 for
    /// data and artifact problems, 3 for failures during compute.
    pub fn exit_code(&self) -> i32 {
        fn model_code(e: &ModelError) -> i32 {
            match e {
                ModelError::Config(_) | ModelError::Unsupported { .. } => 1,
                _ => 3,
            }
        }
        match self {
            ExperimentError::Config(_) => 1,
            ExperimentError::Data { .. }
            | ExperimentError::Io { .. }
            | ExperimentError::Checkpoint(_) => 2,
            ExperimentError::Eval(EvalError::Config(_)) => 1,
            ExperimentError::Eval(_) => 2,
            ExperimentError::Train(TrainError::Config(_)) => 1,
            ExperimentError::Train(TrainError::EmptyData(_)) => 2,
            ExperimentError::Train(TrainError::Model(e)) => model_code(e),
            ExperimentError::Train(_) => 3,
            ExperimentError::Infer { source: InferError::Config(_), .. } => 1,
            ExperimentError::Infer { source: InferError::Model(e), .. } => model_code(e),
            ExperimentError::Infer { .. } => 3,
            ExperimentError::Model(e) => model_code(e),
        }
    }
}

fn data_err(stage: &'static str) -> impl Fn(DataError) -> ExperimentError {
    move |source| ExperimentError::Data { stage, source }
}

fn infer_err(stage: &'static str) -> impl Fn(InferError) -> ExperimentError {
    move |source| ExperimentError::Infer { stage, source }
}

// ── spec ────────────────────────────────────────────────────────────────

/// Corpus locations for the three splits, plus the subword vocabulary:
/// either a pre-trained file or a target size to train one from the
/// training split. Boundary files are optional; without one, blank lines
/// in the sentence files mark document breaks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataPaths {
    pub train_src: PathBuf,
    pub train_tgt: PathBuf,
    #[serde(default)]
    pub train_boundaries: Option<PathBuf>,
    pub valid_src: PathBuf,
    pub valid_tgt: PathBuf,
    #[serde(default)]
    pub valid_boundaries: Option<PathBuf>,
    pub test_src: PathBuf,
    pub test_tgt: PathBuf,
    #[serde(default)]
    pub test_boundaries: Option<PathBuf>,
    /// Existing vocabulary file; when absent one is trained.
    #[serde(default)]
    pub vocab_file: Option<PathBuf>,
    /// Target size when training a vocabulary.
    #[serde(default = "default_vocab_size")]
    pub vocab_size: usize,
    #[serde(default = "default_max_src_len")]
    pub max_src_len: usize,
    #[serde(default = "default_max_concat_len")]
    pub max_concat_len: usize,
}

fn default_vocab_size() -> usize {
    300
}

fn default_max_src_len() -> usize {
    MAX_SRC_LEN
}

fn default_max_concat_len() -> usize {
    MAX_CONCAT_LEN
}

/// Block dimensions without the vocabulary size, which always comes from
/// the actual vocabulary. Defaults are the desk-scale configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub num_layers: usize,
    pub d_model: usize,
    pub num_heads: usize,
    pub d_ffn: usize,
    pub dropout: f64,
    pub max_positions: usize,
}

impl Default for ModelSection {
    fn default() -> Self {
        let desk = BlockConfig::desk(1);
        ModelSection {
            num_layers: desk.num_layers,
            d_model: desk.d_model,
            num_heads: desk.num_heads,
            d_ffn: desk.d_ffn,
            dropout: desk.dropout,
            max_positions: desk.max_positions,
        }
    }
}

impl ModelSection {
    fn to_block(&self, vocab_size: usize) -> BlockConfig {
        BlockConfig {
            num_layers: self.num_layers,
            d_model: self.d_model,
            num_heads: self.num_heads,
            d_ffn: self.d_ffn,
            dropout: self.dropout,
            max_positions: self.max_positions,
            vocab_size,
        }
    }
}

/// Training options without a seed of their own: the experiment's single
/// master seed feeds training, initialization, and every probe.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub alpha: f64,
    pub lr: crate::train::LrMode,
    pub patience: usize,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub clip_norm: Option<f64>,
    pub label_smoothing: Option<f64>,
}

impl Default for TrainSection {
    fn default() -> Self {
        TrainSection {
            alpha: 0.5,
            lr: crate::train::LrMode::default(),
            patience: 10,
            batch_size: 16,
            max_epochs: 20,
            clip_norm: Some(1.0),
            label_smoothing: None,
        }
    }
}

impl TrainSection {
    fn to_config(&self, seed: u64) -> TrainConfig {
        TrainConfig {
            alpha: self.alpha,
            lr_mode: self.lr.clone(),
            patience: self.patience,
            batch_size: self.batch_size,
            max_epochs: self.max_epochs,
            seed,
            clip_norm: self.clip_norm,
            label_smoothing: self.label_smoothing,
        }
    }
}

/// Which metrics the run reports. APT needs a source pronoun list; the
/// bootstrap needs a baseline hypotheses file to test against.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalToggles {
    pub s_bleu: bool,
    pub d_bleu: bool,
    pub reconstruction_bleu: bool,
    pub apt: bool,
    pub source_pronouns: Option<PathBuf>,
    pub target_pronouns: Option<PathBuf>,
    pub bootstrap_baseline: Option<PathBuf>,
    pub bootstrap_samples: usize,
}

impl Default for EvalToggles {
    fn default() -> Self {
        EvalToggles {
            s_bleu: true,
            d_bleu: true,
            reconstruction_bleu: true,
            apt: false,
            source_pronouns: None,
            target_pronouns: None,
            bootstrap_baseline: None,
            bootstrap_samples: 1000,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DecodeSection {
    pub beam: usize,
    pub length_penalty: f64,
    pub max_len: Option<usize>,
}

impl Default for DecodeSection {
    fn default() -> Self {
        let d = DecodeOptions::default();
        DecodeSection {
            beam: d.beam,
            length_penalty: d.length_penalty,
            max_len: d.max_len,
        }
    }
}

impl DecodeSection {
    fn options(&self) -> DecodeOptions {
        DecodeOptions {
            beam: self.beam,
            length_penalty: self.length_penalty,
            max_len: self.max_len,
        }
    }
}

/// One experiment, fully described. Serialize order keeps scalar fields
/// ahead of the table-valued sections so the spec also re-serializes to
/// TOML cleanly.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentSpec {
    pub arch: Architecture,
    pub context_mode: ContextMode,
    #[serde(default)]
    pub aux_objective: AuxObjective,
    pub seed: u64,
    pub output_dir: PathBuf,
    pub data: DataPaths,
    #[serde(default)]
    pub model: ModelSection,
    #[serde(default)]
    pub train: TrainSection,
    #[serde(default)]
    pub eval: EvalToggles,
    #[serde(default)]
    pub decode: DecodeSection,
}

impl ExperimentSpec {
    pub fn from_toml(text: &str) -> Result<Self, ExperimentError> {
        let spec: ExperimentSpec =
            toml::from_str(text).map_err(|e| ExperimentError::Config(e.to_string()))?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn from_file(path: &Path) -> Result<Self, ExperimentError> {
        let text = std::fs::read_to_string(path).map_err(|source| ExperimentError::Io {
            stage: "reading spec",
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_toml(&text)
    }

    pub fn validate(&self) -> Result<(), ExperimentError> {
        if self.context_mode.is_probe_only() {
            return Err(ExperimentError::Config(format!(
                "context mode {} is probe-only and cannot train a model",
                self.context_mode
            )));
        }
        if self.eval.apt && self.eval.source_pronouns.is_none() {
            return Err(ExperimentError::Config(
                "apt evaluation needs a source pronoun list".into(),
            ));
        }
        if self.eval.bootstrap_baseline.is_some() && self.eval.bootstrap_samples < 1 {
            return Err(ExperimentError::Config(
                "bootstrap needs at least one resample".into(),
            ));
        }
        if self.output_dir.as_os_str().is_empty() {
            return Err(ExperimentError::Config("output_dir must not be empty".into()));
        }
        Ok(())
    }
}

// ── pipeline ────────────────────────────────────────────────────────────

/// Everything a finished run leaves behind, plus the in-memory reports.
#[derive(Debug)]
pub struct RunArtifacts {
    pub output_dir: PathBuf,
    pub checkpoint_path: PathBuf,
    pub hypotheses_path: PathBuf,
    pub reports: Vec<EvalReport>,
    pub history: Vec<EpochRecord>,
}

fn write_file(stage: &'static str, path: &Path, contents: &str) -> Result<(), ExperimentError> {
    std::fs::write(path, contents).map_err(|source| ExperimentError::Io {
        stage,
        path: path.to_path_buf(),
        source,
    })
}

fn read_file(stage: &'static str, path: &Path) -> Result<String, ExperimentError> {
    std::fs::read_to_string(path).map_err(|source| ExperimentError::Io {
        stage,
        path: path.to_path_buf(),
        source,
    })
}

fn write_lines(stage: &'static str, path: &Path, lines: &[String]) -> Result<(), ExperimentError> {
    let mut text = lines.join("\n");
    text.push('\n');
    write_file(stage, path, &text)
}

fn json_pretty<T: Serialize>(value: &T) -> String {
    let mut text = serde_json::to_string_pretty(value).expect("serializable artifact");
    text.push('\n');
    text
}

fn load_split(
    stage: &'static str,
    src: &Path,
    tgt: &Path,
    boundaries: Option<&PathBuf>,
) -> Result<ParallelDocumentCorpus, ExperimentError> {
    load_corpus(src, tgt, boundaries.map(PathBuf::as_path)).map_err(data_err(stage))
}

/// Sentence-per-line artifact text for a decoded corpus.
fn decode_to_lines(hyps: &[Vec<usize>], vocab: &SubwordVocab) -> Vec<String> {
    hyps.iter().map(|ids| vocab_decode(ids, vocab)).collect()
}

fn plain_report_table(reports: &[EvalReport]) -> String {
    let mut out = format!("{:<28}{:>9}  {}\n", "metric", "value", "signature");
    for r in reports {
        let value = match r.value {
            Some(v) => format!("{v:>9.2}"),
            None => format!("{:>9}", "undef"),
        };
        out.push_str(&format!("{:<28}{value}  {}\n", r.metric, r.signature));
    }
    out
}

/// The full pipeline: vocabulary, triplets, training with early stopping,
/// beam decoding of the test split, metric reports. Every artifact lands
/// under `spec.output_dir`; reruns with the same spec are byte-identical.
pub fn run_experiment(spec: &ExperimentSpec) -> Result<RunArtifacts, ExperimentError> {
    spec.validate()?;
    let out = &spec.output_dir;
    std::fs::create_dir_all(out).map_err(|source| ExperimentError::Io {
        stage: "creating output dir",
        path: out.clone(),
        source,
    })?;

    // vocabulary
    let train_corpus = load_split(
        "loading train split",
        &spec.data.train_src,
        &spec.data.train_tgt,
        spec.data.train_boundaries.as_ref(),
    )?;
    let vocab = match &spec.data.vocab_file {
        Some(path) => SubwordVocab::load(path).map_err(data_err("loading vocabulary"))?,
        None => {
            let lines: Vec<&str> = train_corpus
                .source_sentences()
                .chain(train_corpus.target_sentences())
                .collect();
            bpe_train(lines, spec.data.vocab_size).map_err(data_err("training vocabulary"))?
        }
    };
    vocab
        .save(&out.join("vocab.txt"))
        .map_err(data_err("saving vocabulary"))?;

    // resolved configuration
    let block = spec.model.to_block(vocab.len());
    let mut model_cfg = ModelConfig::new(spec.arch, block);
    model_cfg.alpha = spec.train.alpha;
    model_cfg.aux_objective = spec.aux_objective;
    let train_cfg = spec.train.to_config(spec.seed);

    #[derive(Serialize)]
    struct Resolved<'a> {
        spec: &'a ExperimentSpec,
        model: &'a ModelConfig,
        train: &'a TrainConfig,
        vocab_size: usize,
    }
    write_file(
        "writing resolved spec",
        &out.join("resolved_spec.json"),
        &json_pretty(&Resolved {
            spec,
            model: &model_cfg,
            train: &train_cfg,
            vocab_size: vocab.len(),
        }),
    )?;

    // triplets
    let valid_corpus = load_split(
        "loading valid split",
        &spec.data.valid_src,
        &spec.data.valid_tgt,
        spec.data.valid_boundaries.as_ref(),
    )?;
    let test_corpus = load_split(
        "loading test split",
        &spec.data.test_src,
        &spec.data.test_tgt,
        spec.data.test_boundaries.as_ref(),
    )?;
    let assemble = |corpus: &ParallelDocumentCorpus| -> Result<Vec<Triplet>, ExperimentError> {
        let (triplets, _stats) = build_triplets(
            corpus,
            spec.context_mode,
            &vocab,
            spec.data.max_src_len,
            spec.data.max_concat_len,
            None,
        )
        .map_err(data_err("assembling triplets"))?;
        Ok(triplets)
    };
    let train_data = assemble(&train_corpus)?;
    let valid_data = assemble(&valid_corpus)?;
    let test_data = assemble(&test_corpus)?;

    // training
    let mut init_rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let params = ModelParams::init(&model_cfg, &mut init_rng)?;
    let (checkpoint, history) = train(
        &model_cfg,
        spec.context_mode,
        params,
        &train_data,
        &valid_data,
        &train_cfg,
    )?;
    let checkpoint_path = out.join("checkpoint.bin");
    save_checkpoint(&checkpoint_path, &checkpoint)?;
    write_file("writing history", &out.join("history.json"), &json_pretty(&history))?;

    // decoding
    let opts = spec.decode.options();
    let mut hyps = Vec::with_capacity(test_data.len());
    for t in &test_data {
        hyps.push(
            beam_search(&model_cfg, &checkpoint.params, &t.context, &t.source, &opts)
                .map_err(infer_err("decoding test split"))?,
        );
    }
    let hyp_lines = decode_to_lines(&hyps, &vocab);
    let ref_lines: Vec<String> = test_corpus.target_sentences().map(str::to_string).collect();
    let src_lines: Vec<String> = test_corpus.source_sentences().map(str::to_string).collect();
    let doc_lens = test_corpus.doc_lengths();

    let hypotheses_path = out.join("hypotheses.txt");
    write_lines("writing hypotheses", &hypotheses_path, &hyp_lines)?;
    write_lines("writing references", &out.join("references.txt"), &ref_lines)?;
    write_lines("writing sources", &out.join("test_sources.txt"), &src_lines)?;
    write_lines(
        "writing boundaries",
        &out.join("doc_lens.txt"),
        &doc_lens.iter().map(|n| n.to_string()).collect::<Vec<_>>(),
    )?;

    // evaluation
    let cfg = BleuConfig;
    let mut reports = Vec::new();
    if spec.eval.s_bleu {
        reports.push(EvalReport::bleu(
            "s-BLEU",
            corpus_bleu(&hyp_lines, &ref_lines, &cfg)?,
        ));
    }
    if spec.eval.d_bleu {
        reports.push(EvalReport::bleu(
            "d-BLEU",
            doc_bleu(&hyp_lines, &ref_lines, &doc_lens, &cfg)?,
        ));
    }
    if spec.eval.reconstruction_bleu && spec.arch.is_cascade() {
        let mut rec_lines = Vec::with_capacity(test_data.len());
        let mut gold_lines = Vec::with_capacity(test_data.len());
        for t in &test_data {
            // the reconstruction stream regenerates the source from the
            // context under re_src, and the context from the source under
            // re_cntx
            let (conditioning, gold) = match spec.aux_objective {
                AuxObjective::ReSrc => (&t.context, &t.source),
                AuxObjective::ReCntx => (&t.source, &t.context),
            };
            let ids = greedy_reconstruct(
                &model_cfg,
                &checkpoint.params,
                conditioning,
                default_max_len(conditioning.len()),
            )
            .map_err(infer_err("reconstructing"))?;
            rec_lines.push(vocab_decode(&ids, &vocab));
            gold_lines.push(vocab_decode(&gold[..gold.len() - 1], &vocab));
        }
        write_lines("writing reconstructions", &out.join("reconstruction.txt"), &rec_lines)?;
        write_lines(
            "writing reconstruction references",
            &out.join("reconstruction_refs.txt"),
            &gold_lines,
        )?;
        reports.push(EvalReport::bleu(
            "reconstruction s-BLEU",
            corpus_bleu(&rec_lines, &gold_lines, &cfg)?,
        ));
    }
    if spec.eval.apt {
        let src_list = read_file(
            "reading source pronouns",
            spec.eval.source_pronouns.as_ref().expect("validated"),
        )?;
        let tgt_list = match &spec.eval.target_pronouns {
            Some(path) => Some(read_file("reading target pronouns", path)?),
            None => None,
        };
        let lists = PronounLists::from_text(&src_list, tgt_list.as_deref())?;
        let value = apt_score(&src_lines, &hyp_lines, &ref_lines, &lists)?;
        reports.push(EvalReport::new("APT", value, APT_SIGNATURE));
    }
    if let Some(baseline_path) = &spec.eval.bootstrap_baseline {
        let baseline: Vec<String> = read_file("reading bootstrap baseline", baseline_path)?
            .lines()
            .map(str::to_string)
            .collect();
        let p = paired_bootstrap(
            &baseline,
            &hyp_lines,
            &ref_lines,
            spec.eval.bootstrap_samples,
            1.0,
            spec.seed,
        )?;
        reports.push(EvalReport::new(
            "bootstrap p (baseline vs this)",
            Some(p),
            format!(
                "bootstrap|n:{}|frac:1|seed:{}|ties:challenger",
                spec.eval.bootstrap_samples, spec.seed
            ),
        ));
    }

    write_file("writing report", &out.join("report.json"), &json_pretty(&reports))?;
    write_file("writing report", &out.join("report.txt"), &plain_report_table(&reports))?;

    Ok(RunArtifacts {
        output_dir: out.clone(),
        checkpoint_path,
        hypotheses_path,
        reports,
        history,
    })
}

// ── probes ──────────────────────────────────────────────────────────────

/// Probe outcome: the probe score, the score it is compared against, and
/// the Table-4/6 style rendering "value (signed delta)".
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeOutcome {
    pub report: EvalReport,
    pub baseline: f64,
    pub formatted: String,
    pub hypotheses: Vec<String>,
}

/// "1.0 (-19.0)" for probe 1.0 against baseline 20.0.
pub fn format_probe(probe: f64, baseline: f64) -> String {
    format!("{:.1} ({:+.1})", probe, probe - baseline)
}

fn require_context_consumer(arch: Architecture, op: &'static str) -> Result<(), ExperimentError> {
    if arch == Architecture::VanillaSent {
        return Err(ModelError::Unsupported { arch: arch.name(), op }.into());
    }
    Ok(())
}

/// Decodes a corpus under an arbitrary context mode. `seed` drives the
/// context sampling of [`ContextMode::Random`] and is ignored by the
/// deterministic modes, so matched and probe decodings share a call path.
pub fn decode_with_mode(
    ckpt: &Checkpoint,
    vocab: &SubwordVocab,
    corpus: &ParallelDocumentCorpus,
    mode: ContextMode,
    seed: u64,
    opts: &DecodeOptions,
) -> Result<Vec<String>, ExperimentError> {
    let mut rng_store;
    let rng = if mode == ContextMode::Random {
        rng_store = ChaCha8Rng::seed_from_u64(seed);
        Some(&mut rng_store)
    } else {
        None
    };
    let (triplets, _) = build_triplets(corpus, mode, vocab, MAX_SRC_LEN, MAX_CONCAT_LEN, rng)
        .map_err(data_err("assembling triplets"))?;
    let mut lines = Vec::with_capacity(triplets.len());
    for t in &triplets {
        let ids = beam_search(&ckpt.config, &ckpt.params, &t.context, &t.source, opts)
            .map_err(infer_err("decoding"))?;
        lines.push(vocab_decode(&ids, vocab));
    }
    Ok(lines)
}

/// Decodes the test split twice — once with the checkpoint's own context
/// mode, once with two random corpus sentences as context — and reports
/// the random-context score with its delta against the matched run.
/// Context-free architectures are refused.
pub fn probe_random_context(
    ckpt: &Checkpoint,
    vocab: &SubwordVocab,
    test: &ParallelDocumentCorpus,
    opts: &DecodeOptions,
    seed: u64,
) -> Result<ProbeOutcome, ExperimentError> {
    require_context_consumer(ckpt.config.arch, "context probes")?;

    let refs: Vec<String> = test.target_sentences().map(str::to_string).collect();
    let cfg = BleuConfig;
    let matched_lines = decode_with_mode(ckpt, vocab, test, ckpt.context_mode, seed, opts)?;
    let random_lines = decode_with_mode(ckpt, vocab, test, ContextMode::Random, seed, opts)?;
    let baseline = corpus_bleu(&matched_lines, &refs, &cfg)?;
    let probe = corpus_bleu(&random_lines, &refs, &cfg)?;

    Ok(ProbeOutcome {
        report: EvalReport::bleu("s-BLEU random-context", probe),
        baseline,
        formatted: format_probe(probe, baseline),
        hypotheses: random_lines,
    })
}

/// Decodes the test split with each sentence's own source as its context
/// and reports the score with its delta against a random-context run
/// (seeded identically to [`probe_random_context`]). Refused for
/// target-side context modes, where the analogous substitution would need
/// the current target sentence, which is unavailable at test time — and
/// for context-free architectures.
pub fn probe_self_context(
    ckpt: &Checkpoint,
    vocab: &SubwordVocab,
    test: &ParallelDocumentCorpus,
    opts: &DecodeOptions,
    seed: u64,
) -> Result<ProbeOutcome, ExperimentError> {
    require_context_consumer(ckpt.config.arch, "context probes")?;
    if ckpt.context_mode == ContextMode::P2Tgt {
        return Err(ExperimentError::Config(
            "self-context probe is limited to source-side context modes: substituting the \
             context of a target-context model requires the current target sentence, which \
             is unavailable at test time"
                .into(),
        ));
    }

    let random = probe_random_context(ckpt, vocab, test, opts, seed)?;
    let baseline = random
        .report
        .value
        .expect("random-context probe always scores");

    let refs: Vec<String> = test.target_sentences().map(str::to_string).collect();
    let self_lines = decode_with_mode(ckpt, vocab, test, ContextMode::SelfContext, seed, opts)?;
    let probe = corpus_bleu(&self_lines, &refs, &BleuConfig)?;

    Ok(ProbeOutcome {
        report: EvalReport::bleu("s-BLEU self-context", probe),
        baseline,
        formatted: format_probe(probe, baseline),
        hypotheses: self_lines,
    })
}

/// Convenience: load a checkpoint and its companion vocabulary.
pub fn load_run(
    checkpoint_path: &Path,
    vocab_path: &Path,
) -> Result<(Checkpoint, SubwordVocab), ExperimentError> {
    let ckpt = load_checkpoint(checkpoint_path)?;
    let vocab = SubwordVocab::load(vocab_path).map_err(data_err("loading vocabulary"))?;
    Ok((ckpt, vocab))
}

/// Standalone evaluation over already-written artifact files, so every
/// reported number can be recomputed from hypotheses + references alone.
pub struct EvalRequest<'a> {
    pub hyps: &'a [String],
    pub refs: &'a [String],
    pub doc_lens: Option<&'a [usize]>,
    pub sources: Option<&'a [String]>,
    pub pronouns: Option<&'a PronounLists>,
    pub bootstrap_baseline: Option<&'a [String]>,
    pub bootstrap_samples: usize,
    pub seed: u64,
}

pub fn evaluate(req: &EvalRequest) -> Result<Vec<EvalReport>, ExperimentError> {
    let cfg = BleuConfig;
    let mut reports = vec![EvalReport::bleu(
        "s-BLEU",
        corpus_bleu(req.hyps, req.refs, &cfg)?,
    )];
    if let Some(lens) = req.doc_lens {
        reports.push(EvalReport::bleu(
            "d-BLEU",
            doc_bleu(req.hyps, req.refs, lens, &cfg)?,
        ));
    }
    if let Some(lists) = req.pronouns {
        let sources = req.sources.ok_or_else(|| {
            ExperimentError::Config("apt evaluation needs the source sentences".into())
        })?;
        let value = apt_score(sources, req.hyps, req.refs, lists)?;
        reports.push(EvalReport::new("APT", value, APT_SIGNATURE));
    }
    if let Some(baseline) = req.bootstrap_baseline {
        let p = paired_bootstrap(
            baseline,
            req.hyps,
            req.refs,
            req.bootstrap_samples,
            1.0,
            req.seed,
        )?;
        reports.push(EvalReport::new(
            "bootstrap p (baseline vs this)",
            Some(p),
            format!(
                "bootstrap|n:{}|frac:1|seed:{}|ties:challenger",
                req.bootstrap_samples, req.seed
            ),
        ));
    }
    Ok(reports)
}

/// Renders reports as the aligned plain-text table the CLI prints.
pub fn render_report_table(reports: &[EvalReport]) -> String {
    plain_report_table(reports)
}
