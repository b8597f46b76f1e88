//! Batch CLI for the document-NMT pipeline: train one experiment from a
//! TOML spec, decode and evaluate stored checkpoints, run the context
//! probes, train vocabularies. Everything random sits behind a single
//! `--seed`, and exit codes follow the stage of the failure: 1 for config
//! and usage problems, 2 for data and artifact problems, 3 for failures
//! during compute.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use docnmt::arch::Architecture;
use docnmt::data::{bpe_train, load_corpus, ContextMode, ParallelDocumentCorpus};
use docnmt::eval::PronounLists;
use docnmt::experiment::{
    decode_with_mode, evaluate, load_run, probe_random_context, probe_self_context,
    render_report_table, run_experiment, EvalRequest, ExperimentError, ExperimentSpec,
    ProbeOutcome,
};
use docnmt::infer::DecodeOptions;

#[derive(Parser)]
#[command(name = "docnmt", version, about = "Document-level NMT experiments")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run one experiment end to end from a TOML spec
    Train(TrainArgs),
    /// Translate a corpus with a stored checkpoint
    Decode(DecodeArgs),
    /// Score hypothesis files against references
    Eval(EvalArgs),
    /// Decode with random contexts and report the drop vs. matched context
    ProbeRandom(ProbeArgs),
    /// Decode with each source as its own context, vs. a random-context baseline
    ProbeSelf(ProbeArgs),
    /// Train a subword vocabulary from text files
    BpeTrain(BpeTrainArgs),
}

fn parse_arch(s: &str) -> Result<Architecture, String> {
    serde_json::from_value(serde_json::Value::String(s.into())).map_err(|_| {
        format!(
            "unknown architecture '{s}' (expected one of vanilla_sent, concat_context, \
             inside_context, cascade_mtl, cascade_residual)"
        )
    })
}

fn parse_context_mode(s: &str) -> Result<ContextMode, String> {
    serde_json::from_value(serde_json::Value::String(s.into())).map_err(|_| {
        format!(
            "unknown context mode '{s}' (expected one of p2_src, p2_tgt, pn_src, random, \
             self_context)"
        )
    })
}

#[derive(Args)]
struct TrainArgs {
    /// Experiment spec (TOML)
    spec: PathBuf,
    /// Override the spec's seed
    #[arg(long)]
    seed: Option<u64>,
    /// Override the spec's output directory
    #[arg(long)]
    output_dir: Option<PathBuf>,
    /// Override the spec's epoch budget
    #[arg(long)]
    max_epochs: Option<usize>,
    /// Override the spec's architecture
    #[arg(long, value_parser = parse_arch)]
    arch: Option<Architecture>,
    /// Override the spec's context mode
    #[arg(long, value_parser = parse_context_mode)]
    context_mode: Option<ContextMode>,
    /// Override the spec's joint-loss mix
    #[arg(long)]
    alpha: Option<f64>,
}

/// Beam options shared by every decoding subcommand.
#[derive(Args)]
struct BeamFlags {
    #[arg(long, default_value_t = 4)]
    beam: usize,
    #[arg(long, default_value_t = 0.6)]
    length_penalty: f64,
    /// Cap on generated tokens (default: 2 * source length + 10)
    #[arg(long)]
    max_len: Option<usize>,
}

impl BeamFlags {
    fn options(&self) -> DecodeOptions {
        DecodeOptions {
            beam: self.beam,
            length_penalty: self.length_penalty,
            max_len: self.max_len,
        }
    }
}

#[derive(Args)]
struct CorpusFlags {
    /// Source sentences, one per line (blank lines separate documents)
    #[arg(long)]
    src: PathBuf,
    /// Target sentences, aligned with --src
    #[arg(long)]
    tgt: Option<PathBuf>,
    /// Sentences-per-document counts, one per line (replaces blank-line breaks)
    #[arg(long)]
    boundaries: Option<PathBuf>,
}

impl CorpusFlags {
    fn load(&self) -> Result<ParallelDocumentCorpus, ExperimentError> {
        let tgt = self.tgt.as_ref().unwrap_or(&self.src);
        load_corpus(&self.src, tgt, self.boundaries.as_deref())
            .map_err(|source| ExperimentError::Data { stage: "loading corpus", source })
    }
}

#[derive(Args)]
struct DecodeArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    vocab: PathBuf,
    #[command(flatten)]
    corpus: CorpusFlags,
    /// Context mode for decoding (default: the checkpoint's training mode)
    #[arg(long, value_parser = parse_context_mode)]
    context_mode: Option<ContextMode>,
    /// Seed for random-context sampling
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[command(flatten)]
    beam: BeamFlags,
    /// Write hypotheses here instead of stdout
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    hyps: PathBuf,
    #[arg(long)]
    refs: PathBuf,
    /// Sentences-per-document counts; enables d-BLEU
    #[arg(long)]
    doc_lens: Option<PathBuf>,
    /// Source sentences; required for APT
    #[arg(long)]
    sources: Option<PathBuf>,
    /// Source-side pronoun list, one per line; enables APT
    #[arg(long)]
    source_pronouns: Option<PathBuf>,
    /// Target-side pronoun list (default: the source list)
    #[arg(long)]
    target_pronouns: Option<PathBuf>,
    /// Baseline hypotheses; enables the paired bootstrap against --hyps
    #[arg(long)]
    baseline: Option<PathBuf>,
    #[arg(long, default_value_t = 1000)]
    bootstrap_samples: usize,
    /// Seed for bootstrap resampling
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Also write the reports as JSON
    #[arg(long)]
    json: Option<PathBuf>,
}

#[derive(Args)]
struct ProbeArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    vocab: PathBuf,
    #[command(flatten)]
    corpus: CorpusFlags,
    /// Seed for the random contexts
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[command(flatten)]
    beam: BeamFlags,
    /// Write the probe hypotheses here
    #[arg(long)]
    hyps_out: Option<PathBuf>,
    /// Also write the full probe outcome as JSON
    #[arg(long)]
    json: Option<PathBuf>,
}

#[derive(Args)]
struct BpeTrainArgs {
    /// Text files to learn from, one sentence per line
    #[arg(required = true)]
    inputs: Vec<PathBuf>,
    /// Total vocabulary size, special tokens included
    #[arg(long)]
    size: usize,
    /// Where to save the vocabulary
    #[arg(long)]
    out: PathBuf,
}

fn io_err<'a>(
    stage: &'static str,
    path: &'a Path,
) -> impl Fn(std::io::Error) -> ExperimentError + 'a {
    move |source| ExperimentError::Io {
        stage,
        path: path.to_path_buf(),
        source,
    }
}

fn read_lines(stage: &'static str, path: &Path) -> Result<Vec<String>, ExperimentError> {
    Ok(std::fs::read_to_string(path)
        .map_err(io_err(stage, path))?
        .lines()
        .map(str::to_string)
        .collect())
}

fn write_lines(stage: &'static str, path: &Path, lines: &[String]) -> Result<(), ExperimentError> {
    let mut text = lines.join("\n");
    text.push('\n');
    std::fs::write(path, text).map_err(io_err(stage, path))
}

fn write_json<T: serde::Serialize>(
    stage: &'static str,
    path: &Path,
    value: &T,
) -> Result<(), ExperimentError> {
    let mut text = serde_json::to_string_pretty(value).expect("serializable report");
    text.push('\n');
    std::fs::write(path, text).map_err(io_err(stage, path))
}

fn cmd_train(args: &TrainArgs) -> Result<(), ExperimentError> {
    let mut spec = ExperimentSpec::from_file(&args.spec)?;
    if let Some(seed) = args.seed {
        spec.seed = seed;
    }
    if let Some(dir) = &args.output_dir {
        spec.output_dir = dir.clone();
    }
    if let Some(n) = args.max_epochs {
        spec.train.max_epochs = n;
    }
    if let Some(arch) = args.arch {
        spec.arch = arch;
    }
    if let Some(mode) = args.context_mode {
        spec.context_mode = mode;
    }
    if let Some(alpha) = args.alpha {
        spec.train.alpha = alpha;
    }
    spec.validate()?;
    let arts = run_experiment(&spec)?;
    print!("{}", render_report_table(&arts.reports));
    println!("artifacts: {}", arts.output_dir.display());
    Ok(())
}

fn cmd_decode(args: &DecodeArgs) -> Result<(), ExperimentError> {
    let (ckpt, vocab) = load_run(&args.checkpoint, &args.vocab)?;
    let corpus = args.corpus.load()?;
    let mode = args.context_mode.unwrap_or(ckpt.context_mode);
    let lines = decode_with_mode(&ckpt, &vocab, &corpus, mode, args.seed, &args.beam.options())?;
    match &args.out {
        Some(path) => write_lines("writing hypotheses", path, &lines)?,
        None => {
            for line in &lines {
                println!("{line}");
            }
        }
    }
    Ok(())
}

fn cmd_eval(args: &EvalArgs) -> Result<(), ExperimentError> {
    let hyps = read_lines("reading hypotheses", &args.hyps)?;
    let refs = read_lines("reading references", &args.refs)?;
    let doc_lens = match &args.doc_lens {
        Some(path) => {
            let mut lens = Vec::new();
            for (i, line) in read_lines("reading doc lens", path)?.iter().enumerate() {
                let line = line.trim();
                if line.is_empty() {
                    continue;
                }
                lens.push(line.parse::<usize>().map_err(|_| {
                    ExperimentError::Config(format!(
                        "{}:{}: not a document length: {line:?}",
                        path.display(),
                        i + 1
                    ))
                })?);
            }
            Some(lens)
        }
        None => None,
    };
    let sources = match &args.sources {
        Some(path) => Some(read_lines("reading sources", path)?),
        None => None,
    };
    let pronouns = match &args.source_pronouns {
        Some(path) => {
            let src_text =
                std::fs::read_to_string(path).map_err(io_err("reading source pronouns", path))?;
            let tgt_text = match &args.target_pronouns {
                Some(p) => Some(
                    std::fs::read_to_string(p).map_err(io_err("reading target pronouns", p))?,
                ),
                None => None,
            };
            Some(PronounLists::from_text(&src_text, tgt_text.as_deref())?)
        }
        None => None,
    };
    let baseline = match &args.baseline {
        Some(path) => Some(read_lines("reading baseline hypotheses", path)?),
        None => None,
    };

    let reports = evaluate(&EvalRequest {
        hyps: &hyps,
        refs: &refs,
        doc_lens: doc_lens.as_deref(),
        sources: sources.as_deref(),
        pronouns: pronouns.as_ref(),
        bootstrap_baseline: baseline.as_deref(),
        bootstrap_samples: args.bootstrap_samples,
        seed: args.seed,
    })?;
    print!("{}", render_report_table(&reports));
    if let Some(path) = &args.json {
        write_json("writing report", path, &reports)?;
    }
    Ok(())
}

fn finish_probe(args: &ProbeArgs, outcome: &ProbeOutcome) -> Result<(), ExperimentError> {
    println!("{}: {}", outcome.report.metric, outcome.formatted);
    println!("baseline s-BLEU: {:.1}", outcome.baseline);
    if let Some(path) = &args.hyps_out {
        write_lines("writing probe hypotheses", path, &outcome.hypotheses)?;
    }
    if let Some(path) = &args.json {
        write_json("writing probe outcome", path, outcome)?;
    }
    Ok(())
}

fn cmd_probe(args: &ProbeArgs, selfish: bool) -> Result<(), ExperimentError> {
    let (ckpt, vocab) = load_run(&args.checkpoint, &args.vocab)?;
    let corpus = args.corpus.load()?;
    let opts = args.beam.options();
    let outcome = if selfish {
        probe_self_context(&ckpt, &vocab, &corpus, &opts, args.seed)?
    } else {
        probe_random_context(&ckpt, &vocab, &corpus, &opts, args.seed)?
    };
    finish_probe(args, &outcome)
}

fn cmd_bpe_train(args: &BpeTrainArgs) -> Result<(), ExperimentError> {
    let mut texts = Vec::with_capacity(args.inputs.len());
    for path in &args.inputs {
        texts.push(std::fs::read_to_string(path).map_err(io_err("reading text", path))?);
    }
    let lines = texts.iter().flat_map(|t| t.lines());
    let vocab = bpe_train(lines, args.size).map_err(|source| {
        use docnmt::data::DataError;
        match source {
            // asking for fewer tokens than the inventory needs is a
            // configuration mistake, not a data problem
            DataError::VocabTargetTooSmall { .. } => ExperimentError::Config(source.to_string()),
            _ => ExperimentError::Data { stage: "training vocabulary", source },
        }
    })?;
    vocab
        .save(&args.out)
        .map_err(|source| ExperimentError::Data { stage: "saving vocabulary", source })?;
    println!("vocabulary of {} tokens saved to {}", vocab.len(), args.out.display());
    Ok(())
}

fn run(cli: &Cli) -> Result<(), ExperimentError> {
    match &cli.cmd {
        Cmd::Train(args) => cmd_train(args),
        Cmd::Decode(args) => cmd_decode(args),
        Cmd::Eval(args) => cmd_eval(args),
        Cmd::ProbeRandom(args) => cmd_probe(args, false),
        Cmd::ProbeSelf(args) => cmd_probe(args, true),
        Cmd::BpeTrain(args) => cmd_bpe_train(args),
    }
}

fn main() -> ExitCode {
    // usage errors are config errors (exit 1); --help/--version exit 0
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code: u8 = match e.kind() {
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
