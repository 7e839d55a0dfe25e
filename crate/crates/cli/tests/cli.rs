use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn mixcpt(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mixcpt"))
        .args(args)
        .env_remove("MIXCPT_THREADS")
        .output()
        .unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

const TINY: &str = "seed = 3
model.d_model = 16
model.n_layers = 1
model.n_heads = 2
model.max_seq_len = 48
train.steps = 6
train.batch_size = 2
train.lr = 0.05
select.k = 2
dpo.steps = 4
dpo.batch_size = 2
";

fn write_inputs(dir: &Path) {
    fs::write(
        dir.join("cpt.jsonl"),
        "{\"text\": \"bobi color is jade.\"}\n{\"text\": \"gifi gem is amber.\", \"score\": 0.9}\n",
    )
    .unwrap();
    fs::write(
        dir.join("sft.jsonl"),
        "{\"query\": \"What is nasa food?\", \"response\": \"figs\"}\n\
         {\"query\": \"What is pira drink?\", \"response\": \"oats\"}\n\
         {\"query\": \"What is bobi color?\", \"response\": \"jade\"}\n",
    )
    .unwrap();
    fs::write(
        dir.join("dpo.jsonl"),
        "{\"query\": \"What is nasa food?\", \"chosen\": \"figs\", \"rejected\": \"kale\"}\n\
         {\"query\": \"What is pira drink?\", \"chosen\": \"oats\", \"rejected\": \"soup\"}\n",
    )
    .unwrap();
    fs::write(dir.join("run.cfg"), TINY).unwrap();
}

#[test]
fn unknown_subcommand_prints_usage_and_exits_1() {
    let o = mixcpt(&["frobnicate"]);
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("Usage"), "{}", stderr(&o));
    assert_eq!(code(&mixcpt(&[])), 1);
    assert_eq!(code(&mixcpt(&["--help"])), 0);
}

#[test]
fn missing_config_names_the_path() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nope.cfg");
    let out = dir.path().join("run");
    let o = mixcpt(&["mix", "--config", s(&missing), "--out", s(&out)]);
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains(s(&missing)), "{}", stderr(&o));
}

#[test]
fn bad_config_keys_are_usage_errors() {
    let dir = tempfile::tempdir().unwrap();
    write_inputs(dir.path());
    let cfg = dir.path().join("bad.cfg");
    fs::write(&cfg, "train.gamma = 0.3\n").unwrap();
    let o = mixcpt(&["mix", "--config", s(&cfg), "--cpt", s(&dir.path().join("cpt.jsonl")), "--out", s(&dir.path().join("r"))]);
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("train.gamma"), "{}", stderr(&o));
}

#[test]
fn select_keeps_k_lines() {
    let dir = tempfile::tempdir().unwrap();
    let scored = dir.path().join("scored.jsonl");
    fs::write(
        &scored,
        "{\"query\": \"a?\", \"response\": \"x\", \"perplexity\": 3.0}\n\
         {\"query\": \"b?\", \"response\": \"y\", \"perplexity\": 1.5}\n\
         {\"query\": \"c?\", \"response\": \"z\", \"perplexity\": 2.0}\n",
    )
    .unwrap();
    let o = mixcpt(&["select", "--input", s(&scored), "--strategy", "E", "--k", "2"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let lines: Vec<String> = stdout(&o).lines().map(str::to_string).collect();
    assert_eq!(lines.len(), 2);
    assert!(lines[0].contains("b?") && lines[1].contains("c?"), "{lines:?}");
    assert!(!lines[0].contains("perplexity"));

    let o = mixcpt(&["select", "--input", s(&scored), "--strategy", "Q", "--k", "2"]);
    assert_eq!(code(&o), 1);
}

#[test]
fn malformed_jsonl_is_a_data_error() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.jsonl");
    fs::write(&bad, "{\"text\": \"fine\"}\n{\"txt\": 1}\n").unwrap();
    let o = mixcpt(&["mix", "--cpt", s(&bad), "--out", s(&dir.path().join("r"))]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains(":2:"), "{}", stderr(&o));
}

#[test]
fn invalid_thread_count_is_rejected() {
    let o = Command::new(env!("CARGO_BIN_EXE_mixcpt"))
        .arg("gradcheck")
        .env("MIXCPT_THREADS", "many")
        .output()
        .unwrap();
    assert_eq!(code(&o), 1);
}

#[test]
fn gradcheck_passes() {
    let o = mixcpt(&["gradcheck"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let out = stdout(&o);
    for op in ["matmul(a)", "layer_norm(gain)", "causal_attention(v)", "kl_divergence_rows(p)", "model/"] {
        assert!(out.contains(op), "{op} missing from\n{out}");
    }
}

#[test]
fn diverging_training_exits_3() {
    let dir = tempfile::tempdir().unwrap();
    write_inputs(dir.path());
    let d = dir.path();
    let cfg = d.join("hot.cfg");
    fs::write(&cfg, format!("{TINY}train.lr = 1e30\ntrain.clip_norm = 0\ntrain.momentum = 0\n").replace("train.lr = 0.05\n", "")).unwrap();
    let o = mixcpt(&["mix", "--config", s(&cfg), "--cpt", s(&d.join("cpt.jsonl")), "--out", s(&d.join("mix"))]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let o = mixcpt(&["train-cpt", "--config", s(&cfg), "--blocks", s(&d.join("mix/blocks.jsonl")), "--out", s(&d.join("cpt"))]);
    assert_eq!(code(&o), 3, "{}", stderr(&o));
}

#[test]
fn full_pipeline_writes_reproducible_run_directories() {
    let dir = tempfile::tempdir().unwrap();
    write_inputs(dir.path());
    let d = dir.path();
    let cfg = d.join("run.cfg");
    let ok = |args: &[&str]| {
        let o = mixcpt(args);
        assert_eq!(code(&o), 0, "{args:?}: {}", stderr(&o));
        o
    };
    ok(&[
        "mix", "--config", s(&cfg), "--cpt", s(&d.join("cpt.jsonl")), "--sft", s(&d.join("sft.jsonl")), "--dpo",
        s(&d.join("dpo.jsonl")), "--out", s(&d.join("mix")),
    ]);
    let blocks = fs::read_to_string(d.join("mix/blocks.jsonl")).unwrap();
    assert!(!blocks.is_empty());

    for run in ["cpt", "cpt2"] {
        ok(&["train-cpt", "--config", s(&cfg), "--blocks", s(&d.join("mix/blocks.jsonl")), "--out", s(&d.join(run))]);
    }
    for f in ["config.txt", "metrics.csv", "model.ckpt", "manifest.json"] {
        assert!(d.join("cpt").join(f).exists(), "{f}");
    }
    assert_eq!(
        fs::read_to_string(d.join("cpt/manifest.json")).unwrap(),
        fs::read_to_string(d.join("cpt2/manifest.json")).unwrap()
    );
    let echo = fs::read_to_string(d.join("cpt/config.txt")).unwrap();
    assert!(echo.contains("model.d_model = 16") && echo.contains("train.alpha = 0.5"), "{echo}");
    let metrics = fs::read_to_string(d.join("cpt/metrics.csv")).unwrap();
    assert!(metrics.starts_with("step,ntp,lssd,total"));
    assert_eq!(metrics.lines().count(), 7);

    let model = d.join("cpt/model.ckpt");
    let scored = d.join("scored.jsonl");
    ok(&["score", "--model", s(&model), "--input", s(&d.join("sft.jsonl")), "--out", s(&scored)]);
    assert_eq!(fs::read_to_string(&scored).unwrap().lines().count(), 3);
    let picked = d.join("picked.jsonl");
    ok(&["select", "--config", s(&cfg), "--input", s(&scored), "--out", s(&picked)]);
    assert_eq!(fs::read_to_string(&picked).unwrap().lines().count(), 2);

    ok(&["train-sft", "--config", s(&cfg), "--model", s(&model), "--data", s(&picked), "--out", s(&d.join("sft"))]);
    ok(&[
        "train-dpo", "--config", s(&cfg), "--model", s(&d.join("sft/model.ckpt")), "--data", s(&d.join("dpo.jsonl")),
        "--out", s(&d.join("dpo")),
    ]);
    let dpo_metrics = fs::read_to_string(d.join("dpo/metrics.csv")).unwrap();
    let first: f64 = dpo_metrics.lines().nth(1).unwrap().split(',').nth(1).unwrap().parse().unwrap();
    assert!((first - std::f64::consts::LN_2).abs() < 1e-6, "{first}");

    let o = ok(&[
        "eval", "--model", s(&d.join("dpo/model.ckpt")), "--docs", s(&d.join("cpt.jsonl")), "--probes",
        s(&d.join("sft.jsonl")),
    ]);
    let report: serde_json::Value = serde_json::from_str(stdout(&o).trim()).unwrap();
    assert!(report["perplexity"].as_f64().unwrap() > 1.0);
    let em = report["exact_match"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&em));

    let o = mixcpt(&["train-sft", "--config", s(&cfg), "--model", s(&d.join("missing.ckpt")), "--data", s(&picked), "--out", s(&d.join("x"))]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("missing.ckpt"));
}
