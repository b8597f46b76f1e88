//! End-to-end tests of the `docnmt` binary: the toy convergence run, the
//! probe subcommands, artifact recomputability, and the exit-code
//! contract (0 success, 1 config, 2 data, 3 numeric).

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use docnmt::arch::{Checkpoint, ModelConfig, ModelParams};
use docnmt::blocks::BlockConfig;
use docnmt::data::synth::copy_corpus;
use docnmt::data::{bpe_train, ContextMode, ParallelDocumentCorpus};
use docnmt::eval::EvalReport;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use tempfile::TempDir;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_docnmt"))
}

fn run_ok(cmd: &mut Command) -> String {
    let out = cmd.output().expect("spawn docnmt");
    assert!(
        out.status.success(),
        "command failed\nstdout: {}\nstderr: {}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr),
    );
    String::from_utf8(out.stdout).unwrap()
}

fn run_err(cmd: &mut Command) -> (i32, String) {
    let Output { status, stdout, stderr } = cmd.output().expect("spawn docnmt");
    assert!(
        !status.success(),
        "expected failure but got success\nstdout: {}",
        String::from_utf8_lossy(&stdout),
    );
    (status.code().expect("exit code"), String::from_utf8_lossy(&stderr).into_owned())
}

fn side_text(corpus: &ParallelDocumentCorpus, source: bool) -> String {
    let mut out = String::new();
    for (i, d) in corpus.documents.iter().enumerate() {
        if i > 0 {
            out.push('\n');
        }
        let side = if source { &d.source } else { &d.target };
        for s in side {
            out.push_str(s);
            out.push('\n');
        }
    }
    out
}

/// Writes the 51-pair toy copy corpus and a spec that trains, validates,
/// and decodes on it: the convergence demonstration setup.
fn write_copy_setup(dir: &Path) -> PathBuf {
    let corpus = copy_corpus(17, 3, 41);
    std::fs::write(dir.join("corpus.src"), side_text(&corpus, true)).unwrap();
    std::fs::write(dir.join("corpus.tgt"), side_text(&corpus, false)).unwrap();
    let spec = format!(
        r#"
arch = "vanilla_sent"
context_mode = "p2_src"
seed = 5
output_dir = "{out}"

[data]
train_src = "{src}"
train_tgt = "{tgt}"
valid_src = "{src}"
valid_tgt = "{tgt}"
test_src = "{src}"
test_tgt = "{tgt}"
vocab_size = 40

[model]
num_layers = 1
d_model = 16
num_heads = 2
d_ffn = 32
dropout = 0.0
max_positions = 64

[train]
lr = {{ mode = "fixed", value = 0.003 }}
batch_size = 8
max_epochs = 160
patience = 160

[decode]
beam = 2
"#,
        out = dir.join("out").display(),
        src = dir.join("corpus.src").display(),
        tgt = dir.join("corpus.tgt").display(),
    );
    let spec_path = dir.join("spec.toml");
    std::fs::write(&spec_path, spec).unwrap();
    spec_path
}

fn read(path: &Path) -> String {
    std::fs::read_to_string(path).unwrap_or_else(|e| panic!("{}: {e}", path.display()))
}

#[test]
fn train_converges_on_the_copy_task_and_artifacts_recompute() {
    let tmp = TempDir::new().unwrap();
    let spec = write_copy_setup(tmp.path());
    let out = tmp.path().join("out");

    let stdout = run_ok(bin().arg("train").arg(&spec));
    assert!(stdout.contains("s-BLEU"), "{stdout}");
    assert!(stdout.contains("d-BLEU"), "{stdout}");
    assert!(stdout.contains("artifacts:"), "{stdout}");

    // the toy copy task converges well past the 90-BLEU mark
    let reports: Vec<EvalReport> =
        serde_json::from_str(&read(&out.join("report.json"))).unwrap();
    assert_eq!(reports[0].metric, "s-BLEU");
    assert!(
        reports[0].value.unwrap() > 90.0,
        "copy task failed to converge: {:?}",
        reports[0]
    );

    // every reported number is recomputable from the artifacts alone
    let eval_stdout = run_ok(
        bin()
            .arg("eval")
            .arg("--hyps")
            .arg(out.join("hypotheses.txt"))
            .arg("--refs")
            .arg(out.join("references.txt"))
            .arg("--doc-lens")
            .arg(out.join("doc_lens.txt")),
    );
    let train_table = read(&out.join("report.txt"));
    for line in eval_stdout.lines().skip(1) {
        assert!(
            train_table.contains(line),
            "recomputed line missing from the training report:\n{line}\nvs\n{train_table}"
        );
    }

    // the decode subcommand reproduces the pipeline's hypotheses
    let redecoded = tmp.path().join("redecoded.txt");
    run_ok(
        bin()
            .arg("decode")
            .arg("--checkpoint")
            .arg(out.join("checkpoint.bin"))
            .arg("--vocab")
            .arg(out.join("vocab.txt"))
            .arg("--src")
            .arg(tmp.path().join("corpus.src"))
            .arg("--tgt")
            .arg(tmp.path().join("corpus.tgt"))
            .arg("--beam")
            .arg("2")
            .arg("--out")
            .arg(&redecoded),
    );
    assert_eq!(read(&redecoded), read(&out.join("hypotheses.txt")));

    // a rerun of the same spec into a fresh directory is byte-identical
    let out2 = tmp.path().join("out2");
    run_ok(bin().arg("train").arg(&spec).arg("--output-dir").arg(&out2));
    for name in ["hypotheses.txt", "report.json", "checkpoint.bin"] {
        assert_eq!(
            std::fs::read(out.join(name)).unwrap(),
            std::fs::read(out2.join(name)).unwrap(),
            "artifact {name} differs between identical runs"
        );
    }
}

#[test]
fn probe_subcommands_print_the_delta_format() {
    let tmp = TempDir::new().unwrap();
    let spec = write_copy_setup(tmp.path());
    let casc = tmp.path().join("casc");

    // a short cascade run is enough for probe plumbing
    run_ok(
        bin()
            .arg("train")
            .arg(&spec)
            .arg("--arch")
            .arg("cascade_mtl")
            .arg("--max-epochs")
            .arg("8")
            .arg("--output-dir")
            .arg(&casc),
    );
    let reports: Vec<EvalReport> =
        serde_json::from_str(&read(&casc.join("report.json"))).unwrap();
    let metrics: Vec<&str> = reports.iter().map(|r| r.metric.as_str()).collect();
    assert_eq!(metrics, ["s-BLEU", "d-BLEU", "reconstruction s-BLEU"]);

    let probe = |kind: &str, json: Option<&Path>| {
        let mut cmd = bin();
        cmd.arg(kind)
            .arg("--checkpoint")
            .arg(casc.join("checkpoint.bin"))
            .arg("--vocab")
            .arg(casc.join("vocab.txt"))
            .arg("--src")
            .arg(tmp.path().join("corpus.src"))
            .arg("--tgt")
            .arg(tmp.path().join("corpus.tgt"))
            .arg("--seed")
            .arg("9")
            .arg("--beam")
            .arg("2");
        if let Some(path) = json {
            cmd.arg("--json").arg(path);
        }
        run_ok(&mut cmd)
    };

    let json_path = tmp.path().join("probe.json");
    let out_a = probe("probe-random", Some(&json_path));
    assert!(out_a.contains("s-BLEU random-context:"), "{out_a}");
    assert!(out_a.contains("baseline s-BLEU:"), "{out_a}");
    // Table-4 shape: "x.x (+y.y)" or "x.x (-y.y)"
    let formatted = out_a
        .lines()
        .next()
        .unwrap()
        .split(": ")
        .nth(1)
        .unwrap()
        .to_string();
    let json: serde_json::Value = serde_json::from_str(&read(&json_path)).unwrap();
    assert_eq!(json["formatted"].as_str().unwrap(), formatted);
    assert!(
        formatted.contains(" (+") || formatted.contains(" (-"),
        "unexpected probe format: {formatted}"
    );

    // seeded determinism: the probe prints the same thing twice
    let out_b = probe("probe-random", None);
    assert_eq!(out_a, out_b);

    let out_self = probe("probe-self", None);
    assert!(out_self.contains("s-BLEU self-context:"), "{out_self}");
}

#[test]
fn exit_codes_separate_config_data_and_usage_failures() {
    let tmp = TempDir::new().unwrap();

    // unknown subcommand and bad flags are usage errors
    let (code, _) = run_err(bin().arg("frobnicate"));
    assert_eq!(code, 1);
    let (code, _) = run_err(bin().arg("train"));
    assert_eq!(code, 1);

    // --help succeeds
    let help = run_ok(bin().arg("--help"));
    for sub in ["train", "decode", "eval", "probe-random", "probe-self", "bpe-train"] {
        assert!(help.contains(sub), "missing subcommand {sub} in help:\n{help}");
    }

    // unknown spec keys are config errors
    let bad = tmp.path().join("bad.toml");
    std::fs::write(&bad, "banana = 1\n").unwrap();
    let (code, stderr) = run_err(bin().arg("train").arg(&bad));
    assert_eq!(code, 1, "{stderr}");
    assert!(stderr.contains("error:"), "{stderr}");

    // a well-formed spec pointing at missing data is a data error
    let corpus = copy_corpus(2, 2, 1);
    std::fs::write(tmp.path().join("c.src"), side_text(&corpus, true)).unwrap();
    std::fs::write(tmp.path().join("c.tgt"), side_text(&corpus, false)).unwrap();
    let spec = format!(
        "arch = \"vanilla_sent\"\ncontext_mode = \"p2_src\"\nseed = 1\noutput_dir = \"{}\"\n\n\
         [data]\ntrain_src = \"{}\"\ntrain_tgt = \"{}\"\nvalid_src = \"{m}\"\nvalid_tgt = \"{m}\"\n\
         test_src = \"{m}\"\ntest_tgt = \"{m}\"\n",
        tmp.path().join("x").display(),
        tmp.path().join("c.src").display(),
        tmp.path().join("c.tgt").display(),
        m = tmp.path().join("missing.txt").display(),
    );
    let spec_path = tmp.path().join("spec.toml");
    std::fs::write(&spec_path, spec).unwrap();
    let (code, stderr) = run_err(bin().arg("train").arg(&spec_path));
    assert_eq!(code, 2, "{stderr}");
    assert!(stderr.contains("valid split"), "{stderr}");

    // probing a context-free checkpoint is refused as a usage error
    let lines: Vec<&str> = corpus
        .source_sentences()
        .chain(corpus.target_sentences())
        .collect();
    let vocab = bpe_train(lines, 30).unwrap();
    let cfg = ModelConfig::new(
        docnmt::arch::Architecture::VanillaSent,
        BlockConfig {
            num_layers: 1,
            d_model: 16,
            num_heads: 2,
            d_ffn: 32,
            dropout: 0.0,
            max_positions: 64,
            vocab_size: vocab.len(),
        },
    );
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let ckpt = Checkpoint {
        config: cfg.clone(),
        context_mode: ContextMode::P2Src,
        seed: 3,
        params: ModelParams::init(&cfg, &mut rng).unwrap(),
        optimizer: None,
    };
    let ckpt_path = tmp.path().join("vanilla.bin");
    docnmt::arch::save_checkpoint(&ckpt_path, &ckpt).unwrap();
    let vocab_path = tmp.path().join("vocab.txt");
    vocab.save(&vocab_path).unwrap();
    let (code, stderr) = run_err(
        bin()
            .arg("probe-random")
            .arg("--checkpoint")
            .arg(&ckpt_path)
            .arg("--vocab")
            .arg(&vocab_path)
            .arg("--src")
            .arg(tmp.path().join("c.src"))
            .arg("--tgt")
            .arg(tmp.path().join("c.tgt")),
    );
    assert_eq!(code, 1, "{stderr}");
    assert!(stderr.contains("does not support context probes"), "{stderr}");

    // a missing checkpoint is a data error
    let (code, _) = run_err(
        bin()
            .arg("probe-random")
            .arg("--checkpoint")
            .arg(tmp.path().join("nope.bin"))
            .arg("--vocab")
            .arg(&vocab_path)
            .arg("--src")
            .arg(tmp.path().join("c.src")),
    );
    assert_eq!(code, 2);

    // asking for a vocabulary smaller than its floor is a config error
    let (code, stderr) = run_err(
        bin()
            .arg("bpe-train")
            .arg(tmp.path().join("c.src"))
            .arg("--size")
            .arg("3")
            .arg("--out")
            .arg(tmp.path().join("v.txt")),
    );
    assert_eq!(code, 1, "{stderr}");
}
