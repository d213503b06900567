//! End-to-end checks of the `maskmoe` binary and the artifact formats it
//! leaves behind: exit codes, file schemas, resume, and the fixed-routing
//! guarantees that survive a whole training run.

use maskmoe::config::RunConfig;
use maskmoe::corpus::{encode_corpus, FrequencySplit, Vocab};
use maskmoe::maskgen::MaskTable;
use maskmoe::metrics::{evaluate, EvalStats};
use maskmoe::model::{init_params, ModelDims};
use maskmoe::routing::hash_route;
use maskmoe::textgen::{TextGen, TextGenConfig};
use maskmoe::train::read_routing_log;
use std::fs::File;
use std::io::BufReader;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use tempfile::TempDir;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_maskmoe"))
}

fn run(cmd: &mut Command) -> Output {
    cmd.output().expect("binary spawns")
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn write_corpus(dir: &Path) -> PathBuf {
    let path = dir.join("corpus.txt");
    let lang = TextGen::new(
        TextGenConfig { n_forms: 400, ..Default::default() },
        42,
    )
    .unwrap();
    lang.write_corpus(&path, 30_000, 1).unwrap();
    path
}

fn tiny_cfg(arch: &str, extra: &str) -> String {
    format!(
        "arch = {arch}\n\
         dtype = f32\n\
         max_vocab = 512\n\
         d_model = 32\n\
         n_heads = 4\n\
         n_layers = 2\n\
         d_ff = 64\n\
         n_experts = 8\n\
         seq_len = 16\n\
         batch_seqs = 8\n\
         steps = 30\n\
         lr_peak = 3e-3\n\
         {extra}"
    )
}

#[test]
fn analyze_writes_the_three_tables() {
    let tmp = TempDir::new().unwrap();
    let corpus = write_corpus(tmp.path());
    let out = run(bin()
        .args(["analyze", "--corpus"])
        .arg(&corpus)
        .arg("--out-dir")
        .arg(tmp.path().join("a"))
        .args(["--max-vocab", "256"]));
    assert!(out.status.success(), "{}", stderr(&out));
    assert!(stdout(&out).contains("coverage"));

    let vocab = std::fs::read_to_string(tmp.path().join("a/vocab.txt")).unwrap();
    let lines: Vec<&str> = vocab.lines().collect();
    assert_eq!(lines.len(), 256);
    assert_eq!(&lines[..2], &["<unk>", "<bos>"]);

    for (file, pat) in [("freq.tsv", "\t"), ("split.tsv", "\t")] {
        let text = std::fs::read_to_string(tmp.path().join("a").join(file)).unwrap();
        assert_eq!(text.lines().count(), 256);
        for (i, line) in text.lines().enumerate() {
            let (id, rest) = line.split_once(pat).expect("tab-separated");
            assert_eq!(id.parse::<usize>().unwrap(), i);
            assert!(!rest.is_empty());
        }
    }
    let split = std::fs::read_to_string(tmp.path().join("a/split.tsv")).unwrap();
    assert!(split.lines().all(|l| l.ends_with("\tF") || l.ends_with("\tI")));
}

#[test]
fn missing_inputs_exit_2_with_plain_messages() {
    let tmp = TempDir::new().unwrap();
    let out = run(bin()
        .args(["analyze", "--corpus", "nope.txt", "--out-dir"])
        .arg(tmp.path()));
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("corpus not found"), "{}", stderr(&out));

    let out = run(bin()
        .args(["eval", "--run-dir", "nope", "--corpus", "nope.txt"]));
    assert_eq!(out.status.code(), Some(2));

    let out = run(bin().args(["train", "--config", "nope.cfg"]));
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("config not found"));
}

#[test]
fn config_validation_exits_2() {
    let tmp = TempDir::new().unwrap();
    let cfg = tmp.path().join("bad.cfg");

    std::fs::write(&cfg, "arch = smoe\nnum_experts = 8\n").unwrap();
    let out = run(bin().arg("train").arg("--config").arg(&cfg));
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("unknown key"));

    std::fs::write(&cfg, "arch = hash\nv_a = 4\n").unwrap();
    let out = run(bin().arg("train").arg("--config").arg(&cfg));
    assert_eq!(out.status.code(), Some(2), "hash must keep v = 1");

    let out = run(bin().arg("frobnicate"));
    assert_eq!(out.status.code(), Some(2), "clap usage errors are 2");
}

#[test]
fn build_masks_is_deterministic_and_idempotent() {
    let tmp = TempDir::new().unwrap();
    let corpus = write_corpus(tmp.path());
    let analysis = tmp.path().join("a");
    assert!(run(bin()
        .args(["analyze", "--corpus"])
        .arg(&corpus)
        .arg("--out-dir")
        .arg(&analysis))
    .status
    .success());

    let masks = |name: &str, seed: &str| {
        let path = tmp.path().join(name);
        let out = run(bin()
            .args(["build-masks", "--split"])
            .arg(analysis.join("split.tsv"))
            .arg("--out")
            .arg(&path)
            .args(["--experts", "16", "--seed", seed]));
        assert!(out.status.success(), "{}", stderr(&out));
        std::fs::read(&path).unwrap()
    };
    let first = masks("m1.jsonl", "7");
    let second = masks("m2.jsonl", "7");
    assert_eq!(first, second, "same inputs, same bytes");
    assert_ne!(first, masks("m3.jsonl", "8"), "seed changes the table");

    // Flag defaults: v_a = 8, v_b = 1.
    let table = MaskTable::load(&tmp.path().join("m1.jsonl")).unwrap();
    assert_eq!((table.v_a, table.v_b), (8, 1));
}

#[test]
fn train_leaves_a_complete_run_directory() {
    let tmp = TempDir::new().unwrap();
    write_corpus(tmp.path());
    let cfg_path = tmp.path().join("run.cfg");
    std::fs::write(
        &cfg_path,
        tiny_cfg("maskmoe", "v_a = 4\nv_b = 1\ncorpus = corpus.txt\nout_dir = run\n"),
    )
    .unwrap();
    let out = run(bin()
        .current_dir(tmp.path())
        .args(["train", "--config", "run.cfg", "--quiet"]));
    assert!(out.status.success(), "{}", stderr(&out));

    let run_dir = tmp.path().join("run");
    for name in [
        "config.json",
        "vocab.txt",
        "freq.tsv",
        "split.tsv",
        "masks.jsonl",
        "model.ckpt",
        "metrics.jsonl",
        "routing.jsonl",
        "eval.json",
    ] {
        assert!(run_dir.join(name).exists(), "{name} missing");
    }

    // The embedded config reloads and matches the file the run was
    // launched from.
    let stored = RunConfig::load(&run_dir.join("config.json")).unwrap();
    let parsed = maskmoe::cli::parse_config(&cfg_path).unwrap();
    assert_eq!(stored.digest(), parsed.run.digest());

    // Checkpoints start with the format magic.
    let ckpt = std::fs::read(run_dir.join("model.ckpt")).unwrap();
    assert_eq!(&ckpt[..4], b"MMOE");

    // Metrics stream: every record carries the full key set, bal_loss
    // included.
    let metrics = std::fs::read_to_string(run_dir.join("metrics.jsonl")).unwrap();
    assert_eq!(metrics.lines().count(), 30);
    for line in metrics.lines() {
        let v: serde_json::Value = serde_json::from_str(line).unwrap();
        for key in ["step", "lm_loss", "bal_loss", "total", "lr"] {
            assert!(v.get(key).is_some(), "{key} missing from {line}");
        }
    }

    // Routing log: one record per routed token occurrence, gate-ordered
    // expert lists, all inside the token's mask.
    let table = MaskTable::load(&run_dir.join("masks.jsonl")).unwrap();
    let log = read_routing_log(&run_dir.join("routing.jsonl")).unwrap();
    assert!(!log.is_empty());
    let per_step = 8 * 16;
    assert_eq!(log.len(), 3 * per_step, "steps 0, 10, 20 logged");
    for line in &log {
        assert_eq!(line.experts.len(), 1);
        assert!(table.get(line.token).is_visible(line.experts[0]));
    }
}

#[test]
fn dense_metrics_report_zero_balance() {
    let tmp = TempDir::new().unwrap();
    write_corpus(tmp.path());
    std::fs::write(
        tmp.path().join("run.cfg"),
        tiny_cfg("dense", "corpus = corpus.txt\nout_dir = run\n"),
    )
    .unwrap();
    let out = run(bin()
        .current_dir(tmp.path())
        .args(["train", "--config", "run.cfg", "--quiet", "--no-eval"]));
    assert!(out.status.success(), "{}", stderr(&out));

    let metrics = std::fs::read_to_string(tmp.path().join("run/metrics.jsonl")).unwrap();
    for line in metrics.lines() {
        let v: serde_json::Value = serde_json::from_str(line).unwrap();
        assert_eq!(v["bal_loss"].as_f64(), Some(0.0));
        assert_eq!(v["lm_loss"], v["total"]);
    }
    assert!(
        !tmp.path().join("run/routing.jsonl").exists()
            || std::fs::read_to_string(tmp.path().join("run/routing.jsonl"))
                .unwrap()
                .is_empty(),
        "dense runs route nothing"
    );
}

#[test]
fn resume_through_the_cli_is_bit_exact() {
    let tmp = TempDir::new().unwrap();
    write_corpus(tmp.path());
    for (dir, sessions) in [("solid", vec![None]), ("pieces", vec![Some(10), Some(20)])] {
        std::fs::write(
            tmp.path().join(format!("{dir}.cfg")),
            tiny_cfg("smoe", &format!("corpus = corpus.txt\nout_dir = {dir}\n")),
        )
        .unwrap();
        for (i, chunk) in sessions.iter().enumerate() {
            let mut cmd = bin();
            cmd.current_dir(tmp.path()).args([
                "train",
                "--config",
                &format!("{dir}.cfg"),
                "--quiet",
                "--no-eval",
            ]);
            if let Some(n) = chunk {
                cmd.args(["--session-steps", &n.to_string()]);
            }
            if i > 0 {
                cmd.arg("--resume");
            }
            let out = run(&mut cmd);
            assert!(out.status.success(), "{}", stderr(&out));
        }
    }
    for name in ["model.ckpt", "metrics.jsonl", "routing.jsonl"] {
        let solid = std::fs::read(tmp.path().join("solid").join(name)).unwrap();
        let pieces = std::fs::read(tmp.path().join("pieces").join(name)).unwrap();
        assert_eq!(solid, pieces, "{name} differs after resume");
    }
}

#[test]
fn zero_step_run_evaluates_like_a_fresh_init() {
    let tmp = TempDir::new().unwrap();
    let corpus = write_corpus(tmp.path());
    std::fs::write(
        tmp.path().join("run.cfg"),
        tiny_cfg("maskmoe", "v_a = 4\nv_b = 1\ncorpus = corpus.txt\nout_dir = run\n")
            .replace("steps = 30", "steps = 0"),
    )
    .unwrap();
    let out = run(bin()
        .current_dir(tmp.path())
        .args(["train", "--config", "run.cfg", "--quiet"]));
    assert!(out.status.success(), "{}", stderr(&out));

    let run_dir = tmp.path().join("run");
    let through_cli = EvalStats::load(&run_dir.join("eval.json")).unwrap();

    // Rebuild the same model in process, straight from the seed.
    let cfg = RunConfig::load(&run_dir.join("config.json")).unwrap();
    let vocab = Vocab::load(&run_dir.join("vocab.txt")).unwrap();
    let split = FrequencySplit::load(&run_dir.join("split.tsv")).unwrap();
    let masks = MaskTable::load(&run_dir.join("masks.jsonl")).unwrap();
    let tokens = encode_corpus(BufReader::new(File::open(&corpus).unwrap()), &vocab).unwrap();
    let dims = ModelDims::from_run(&cfg, vocab.len());
    let params = init_params::<f32>(&dims, cfg.seed);
    let fresh =
        evaluate(&params, &dims, Some(&masks), &tokens, Some(&split), cfg.batch_seqs.max(8))
            .unwrap();

    assert_eq!(through_cli.tokens, fresh.tokens);
    assert_eq!(through_cli.mean_nll, fresh.mean_nll, "0 steps = untouched init");
    assert_eq!(through_cli.perplexity, fresh.perplexity);
}

#[test]
fn hash_runs_route_every_token_at_its_hash_expert() {
    let tmp = TempDir::new().unwrap();
    write_corpus(tmp.path());
    std::fs::write(
        tmp.path().join("run.cfg"),
        tiny_cfg("hash", "corpus = corpus.txt\nout_dir = run\nlog_every = 1\nmask_seed = 13\n"),
    )
    .unwrap();
    let out = run(bin()
        .current_dir(tmp.path())
        .args(["train", "--config", "run.cfg", "--quiet", "--no-eval"]));
    assert!(out.status.success(), "{}", stderr(&out));

    let log = read_routing_log(&tmp.path().join("run/routing.jsonl")).unwrap();
    assert_eq!(log.len(), 30 * 8 * 16, "every step logged");
    for line in &log {
        assert_eq!(
            line.experts,
            vec![hash_route(line.token, 8, 13)],
            "token {} strayed from its hash expert",
            line.token
        );
    }
}

#[test]
fn report_emits_the_fixed_schema() {
    let tmp = TempDir::new().unwrap();
    write_corpus(tmp.path());
    std::fs::write(
        tmp.path().join("run.cfg"),
        tiny_cfg("smoe", "corpus = corpus.txt\nout_dir = run\n"),
    )
    .unwrap();
    assert!(run(bin()
        .current_dir(tmp.path())
        .args(["train", "--config", "run.cfg", "--quiet"]))
    .status
    .success());
    let out = run(bin()
        .current_dir(tmp.path())
        .args(["report", "--run-dir", "run"]));
    assert!(out.status.success(), "{}", stderr(&out));

    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(tmp.path().join("run/report.json")).unwrap())
            .unwrap();
    let keys: Vec<&str> = report.as_object().unwrap().keys().map(|k| k.as_str()).collect();
    let mut expect = vec![
        "fluct_frequent",
        "fluct_infrequent",
        "fluct_all",
        "cv_per_layer",
        "balance_loss_eval",
        "ppl",
    ];
    let mut got = keys.clone();
    got.sort_unstable();
    expect.sort_unstable();
    assert_eq!(got, expect);
    assert!(report["ppl"].as_f64().unwrap() > 1.0);
    assert_eq!(report["cv_per_layer"].as_array().unwrap().len(), 1, "one MoE layer");

    let csv = std::fs::read_to_string(tmp.path().join("run/counts.csv")).unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next(), Some("layer,expert,count"));
    assert_eq!(lines.count(), 8, "one row per (layer, expert)");

    // A run directory that never evaluated is a usage error.
    let out = run(bin().args(["report", "--run-dir", "nowhere"]));
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn compare_prints_one_row_per_run() {
    let tmp = TempDir::new().unwrap();
    write_corpus(tmp.path());
    std::fs::write(
        tmp.path().join("mm.cfg"),
        tiny_cfg("maskmoe", "v_a = 4\nv_b = 1\ncorpus = corpus.txt\n"),
    )
    .unwrap();
    std::fs::write(
        tmp.path().join("plain.cfg"),
        tiny_cfg("dense", "corpus = corpus.txt\n"),
    )
    .unwrap();
    let out = run(bin().current_dir(tmp.path()).args([
        "compare",
        "mm.cfg",
        "plain.cfg",
        "--out-dir",
        "cmp",
        "--quiet",
    ]));
    assert!(out.status.success(), "{}", stderr(&out));
    let text = stdout(&out);
    let table: Vec<&str> = text.lines().filter(|l| l.starts_with("run") || l.starts_with("mm") || l.starts_with("plain")).collect();
    assert_eq!(table.len(), 3, "header + two rows in:\n{text}");
    assert!(table[1].starts_with("mm") && table[1].contains("maskmoe"));
    assert!(table[2].starts_with("plain") && table[2].contains("dense"));
    assert!(table[2].trim_end().ends_with('-'), "dense shows - for routing columns");
    assert!(tmp.path().join("cmp/mm/model.ckpt").exists());
    assert!(tmp.path().join("cmp/plain/model.ckpt").exists());
}

#[test]
fn compare_names_the_failing_run() {
    let tmp = TempDir::new().unwrap();
    write_corpus(tmp.path());
    std::fs::write(
        tmp.path().join("ok.cfg"),
        tiny_cfg("dense", "corpus = corpus.txt\n"),
    )
    .unwrap();
    std::fs::write(
        tmp.path().join("broken.cfg"),
        tiny_cfg("dense", "corpus = gone.txt\n"),
    )
    .unwrap();
    let out = run(bin().current_dir(tmp.path()).args([
        "compare",
        "ok.cfg",
        "broken.cfg",
        "--out-dir",
        "cmp",
        "--quiet",
    ]));
    assert_eq!(out.status.code(), Some(2), "missing corpus is a usage error");
    let err = stderr(&out);
    assert!(err.contains("broken"), "failing run named: {err}");
    assert!(err.contains("corpus not found"));
}
