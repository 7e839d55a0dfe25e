use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use mixcpt::align::{score_records, select_samples, train_dpo, train_sft, ScoredSample, SelectionConfig, Strategy};
use mixcpt::datapipe::{
    build_mixture, load_jsonl, pack_blocks, InstructionPair, PackOrder, PackedBlock, PreferenceTriple, Record,
    RecordKind, RawDocument,
};
use mixcpt::evalharness::{corpus_perplexity, exact_match_probes, run_experiment, ExperimentConfig, Scenario};
use mixcpt::lssd::train_mix_cpt;
use mixcpt::model::{grad_check_model, init_parameters, load_checkpoint, save_checkpoint, Checkpoint, ModelConfig, Parameters};
use mixcpt::tensor::{gradient_suite, Tensor};
use mixcpt::Error;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::{json, Map, Value};
use sha2::{Digest, Sha256};

use crate::config::{RunConfig, Stage};
use crate::CliError;

type Result<T> = std::result::Result<T, CliError>;

fn sha256(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn read(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| CliError::data(format!("{}: {e}", path.display())))
}

fn at_path(path: &Path) -> impl Fn(Error) -> CliError + '_ {
    move |e| match e {
        Error::Io(io) => CliError::data(format!("{}: {io}", path.display())),
        other => other.into(),
    }
}

fn load_records(path: &Path, kind: RecordKind, min_quality: Option<f64>) -> Result<Vec<Record>> {
    load_jsonl(path, kind, min_quality).map_err(at_path(path))
}

fn load_model(path: &Path) -> Result<Checkpoint> {
    load_checkpoint(path).map_err(|e| match e {
        Error::Io(io) => CliError::data(format!("{}: {io}", path.display())),
        other => CliError::data(format!("{}: {other}", path.display())),
    })
}

/// Output directory of one training or experiment run.
pub struct RunDir {
    dir: PathBuf,
    command: &'static str,
    config_text: String,
    inputs: BTreeMap<String, String>,
}

impl RunDir {
    pub fn create(dir: &Path, command: &'static str, cfg: &RunConfig) -> Result<Self> {
        fs::create_dir_all(dir).map_err(|e| CliError::data(format!("{}: {e}", dir.display())))?;
        let config_text = cfg.to_text();
        let run = Self {
            dir: dir.to_path_buf(),
            command,
            config_text,
            inputs: BTreeMap::new(),
        };
        run.write("config.txt", run.config_text.as_bytes())?;
        Ok(run)
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    fn write(&self, name: &str, bytes: &[u8]) -> Result<()> {
        let p = self.path(name);
        fs::write(&p, bytes).map_err(|e| CliError::data(format!("{}: {e}", p.display())))
    }

    pub fn input(&mut self, role: &str, path: &Path) -> Result<()> {
        let h = sha256(&read(path)?);
        self.inputs.insert(role.to_string(), h);
        Ok(())
    }

    /// Saves the checkpoint and writes the manifest; the manifest holds
    /// content hashes only, so identical runs give identical manifests.
    pub fn finish(self, ckpt: Option<&Checkpoint>) -> Result<()> {
        let mut outputs = Map::new();
        if let Some(c) = ckpt {
            let p = self.path("model.ckpt");
            save_checkpoint(&p, c).map_err(at_path(&p))?;
            outputs.insert("model.ckpt".into(), json!(sha256(&read(&p)?)));
        }
        for name in ["metrics.csv", "comparison.csv"] {
            let p = self.path(name);
            if p.exists() {
                outputs.insert(name.into(), json!(sha256(&read(&p)?)));
            }
        }
        let manifest = json!({
            "command": self.command,
            "config_sha256": sha256(self.config_text.as_bytes()),
            "inputs": self.inputs,
            "outputs": outputs,
        });
        self.write("manifest.json", serde_json::to_string_pretty(&manifest).unwrap().as_bytes())
    }
}

fn block_json(b: &PackedBlock) -> String {
    json!({ "tokens": b.tokens, "mask": b.mask }).to_string()
}

fn load_blocks(path: &Path) -> Result<Vec<PackedBlock>> {
    let text = String::from_utf8(read(path)?).map_err(|e| CliError::data(format!("{}: {e}", path.display())))?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let bad = |m: String| CliError::data(format!("{}:{}: {m}", path.display(), i + 1));
        let v: Value = serde_json::from_str(line).map_err(|e| bad(e.to_string()))?;
        let tokens: Vec<usize> = serde_json::from_value(v["tokens"].clone()).map_err(|e| bad(format!("tokens: {e}")))?;
        let mask: Vec<bool> = serde_json::from_value(v["mask"].clone()).map_err(|e| bad(format!("mask: {e}")))?;
        if tokens.len() != mask.len() {
            return Err(bad("tokens and mask differ in length".into()));
        }
        out.push(PackedBlock { tokens, mask });
    }
    if out.is_empty() {
        return Err(CliError::data(format!("{}: no blocks", path.display())));
    }
    Ok(out)
}

pub fn mix(cfg: &RunConfig, cpt: Option<PathBuf>, sft: Option<PathBuf>, dpo: Option<PathBuf>, out: &Path) -> Result<()> {
    let cpt = cpt.or_else(|| cfg.data_cpt.clone());
    let sft = sft.or_else(|| cfg.data_sft.clone());
    let dpo = dpo.or_else(|| cfg.data_dpo.clone());
    if cpt.is_none() && sft.is_none() && dpo.is_none() {
        return Err(CliError::usage("mix needs at least one of --cpt, --sft, --dpo (or data.* keys)"));
    }
    let (mut docs, mut pairs, mut triples) = (Vec::new(), Vec::new(), Vec::new());
    let mut run = RunDir::create(out, "mix", cfg)?;
    if let Some(p) = &cpt {
        run.input("cpt", p)?;
        docs = load_records(p, RecordKind::Cpt, cfg.data_min_quality)?
            .into_iter()
            .filter_map(|r| if let Record::Cpt(d) = r { Some(d) } else { None })
            .collect::<Vec<RawDocument>>();
    }
    if let Some(p) = &sft {
        run.input("sft", p)?;
        pairs = sft_pairs(load_records(p, RecordKind::Sft, None)?);
    }
    if let Some(p) = &dpo {
        run.input("dpo", p)?;
        triples = dpo_triples(load_records(p, RecordKind::Dpo, None)?);
    }
    let samples = build_mixture(&docs, &pairs, &triples)?;
    let blocks = pack_blocks(&samples, cfg.pack_len(), cfg.stage_seed(Stage::Mix), cfg.data_pack_order)?;
    let body: String = blocks.iter().map(|b| block_json(b) + "\n").collect();
    run.write("blocks.jsonl", body.as_bytes())?;
    run.finish(None)?;
    println!(
        "{} documents, {} pairs, {} triples -> {} blocks of {} tokens",
        docs.len(),
        pairs.len(),
        triples.len(),
        blocks.len(),
        cfg.pack_len()
    );
    Ok(())
}

fn sft_pairs(records: Vec<Record>) -> Vec<InstructionPair> {
    records
        .into_iter()
        .filter_map(|r| if let Record::Sft(p) = r { Some(p) } else { None })
        .collect()
}

fn dpo_triples(records: Vec<Record>) -> Vec<PreferenceTriple> {
    records
        .into_iter()
        .filter_map(|r| if let Record::Dpo(t) = r { Some(t) } else { None })
        .collect()
}

fn start_model(cfg: &RunConfig, init: Option<&Path>, run: &mut RunDir, stage: Stage) -> Result<Checkpoint> {
    match init {
        Some(p) => {
            run.input("init", p)?;
            let ck = load_model(p)?;
            if *ck.config() != cfg.model {
                return Err(CliError::usage(format!(
                    "{}: checkpoint model config {:?} differs from model.* settings {:?}",
                    p.display(),
                    ck.config(),
                    cfg.model
                )));
            }
            Ok(ck)
        }
        None => {
            let seed = cfg.stage_seed(stage);
            Ok(Checkpoint::new(init_parameters(cfg.model, seed)?, 0, seed))
        }
    }
}

pub fn train_cpt(cfg: &RunConfig, blocks: &Path, init: Option<&Path>, out: &Path) -> Result<()> {
    let mut run = RunDir::create(out, "train-cpt", cfg)?;
    run.input("blocks", blocks)?;
    let data = load_blocks(blocks)?;
    let start = start_model(cfg, init, &mut run, Stage::TrainCpt)?;
    let outcome = train_mix_cpt(&start, &data, &cfg.cpt(), Some(&run.path("metrics.csv")))?;
    let last = outcome.metrics.rows().last().map(|(_, v)| v.clone()).unwrap_or_default();
    println!("trained {} steps; final ntp {:.4} lssd {:.4} total {:.4}", cfg.train.optim.steps, last[0], last[1], last[2]);
    run.finish(Some(&outcome.checkpoint))
}

fn scored_line(s: &ScoredSample) -> String {
    let mut v = match &s.record {
        Record::Cpt(d) => serde_json::to_value(d),
        Record::Sft(p) => serde_json::to_value(p),
        Record::Dpo(t) => serde_json::to_value(t),
    }
    .unwrap();
    v["perplexity"] = json!(s.perplexity);
    v.to_string()
}

fn emit(lines: &[String], out: Option<&Path>) -> Result<()> {
    let body: String = lines.iter().map(|l| format!("{l}\n")).collect();
    match out {
        Some(p) => fs::write(p, body).map_err(|e| CliError::data(format!("{}: {e}", p.display()))),
        None => {
            std::io::stdout()
                .write_all(body.as_bytes())
                .map_err(|e| CliError::data(format!("stdout: {e}")))
        }
    }
}

pub fn score(model: &Path, input: &Path, kind: RecordKind, out: Option<&Path>) -> Result<()> {
    if kind == RecordKind::Cpt {
        return Err(CliError::usage("score works on sft or dpo records"));
    }
    let ck = load_model(model)?;
    let records = load_records(input, kind, None)?;
    let scored = score_records(&ck.params, &records)?;
    emit(&scored.iter().map(scored_line).collect::<Vec<_>>(), out)
}

fn load_scored(path: &Path) -> Result<Vec<ScoredSample>> {
    let text = String::from_utf8(read(path)?).map_err(|e| CliError::data(format!("{}: {e}", path.display())))?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let bad = |m: String| CliError::data(format!("{}:{}: {m}", path.display(), i + 1));
        let mut v: Value = serde_json::from_str(line).map_err(|e| bad(e.to_string()))?;
        let obj = v.as_object_mut().ok_or_else(|| bad("expected a JSON object".into()))?;
        let perplexity = obj
            .remove("perplexity")
            .and_then(|p| p.as_f64())
            .ok_or_else(|| bad("missing numeric perplexity".into()))?;
        let record = if obj.contains_key("chosen") {
            serde_json::from_value(v).map(Record::Dpo)
        } else {
            serde_json::from_value(v).map(Record::Sft)
        }
        .map_err(|e| bad(e.to_string()))?;
        out.push(ScoredSample {
            index: out.len(),
            record,
            perplexity,
        });
    }
    Ok(out)
}

pub fn select(input: &Path, k: usize, strategy: Strategy, seed: u64, out: Option<&Path>) -> Result<()> {
    let pool = load_scored(input)?;
    let sel = select_samples(&pool, &SelectionConfig { k, strategy, seed })?;
    if sel.k_exceeds_pool {
        log::warn!("K = {k} exceeds the pool of {}; keeping everything", pool.len());
    }
    let lines: Vec<String> = sel
        .samples
        .iter()
        .map(|s| match &s.record {
            Record::Sft(p) => serde_json::to_string(p),
            Record::Dpo(t) => serde_json::to_string(t),
            Record::Cpt(d) => serde_json::to_string(d),
        })
        .collect::<std::result::Result<_, _>>()
        .map_err(|e| CliError::data(e.to_string()))?;
    emit(&lines, out)
}

pub fn train_sft_cmd(cfg: &RunConfig, model: &Path, data: &Path, out: &Path) -> Result<()> {
    let mut run = RunDir::create(out, "train-sft", cfg)?;
    run.input("data", data)?;
    let start = start_model(cfg, Some(model), &mut run, Stage::TrainSft)?;
    let pairs = sft_pairs(load_records(data, RecordKind::Sft, None)?);
    let outcome = train_sft(&start, &pairs, &cfg.sft(), Some(&run.path("metrics.csv")))?;
    let last = outcome.metrics.column("sft").and_then(|c| c.last().copied()).unwrap_or(f64::NAN);
    println!("trained {} steps on {} pairs; final sft loss {last:.4}", cfg.sft().steps, pairs.len());
    run.finish(Some(&outcome.checkpoint))
}

pub fn train_dpo_cmd(cfg: &RunConfig, model: &Path, reference: Option<&Path>, data: &Path, out: &Path) -> Result<()> {
    let mut run = RunDir::create(out, "train-dpo", cfg)?;
    run.input("data", data)?;
    let start = start_model(cfg, Some(model), &mut run, Stage::TrainDpo)?;
    let reference = match reference {
        Some(p) => {
            run.input("reference", p)?;
            load_model(p)?.params
        }
        None => start.params.clone(),
    };
    let triples = dpo_triples(load_records(data, RecordKind::Dpo, None)?);
    let outcome = train_dpo(&start, &reference, &triples, &cfg.dpo(), Some(&run.path("metrics.csv")))?;
    let dpo = outcome.metrics.column("dpo").unwrap_or_default();
    println!(
        "trained {} steps on {} triples; dpo loss {:.4} -> {:.4}",
        cfg.dpo().optim.steps,
        triples.len(),
        dpo.first().copied().unwrap_or(f64::NAN),
        dpo.last().copied().unwrap_or(f64::NAN)
    );
    run.finish(Some(&outcome.checkpoint))
}

pub fn eval(cfg: &RunConfig, model: &Path, docs: Option<&Path>, probes: Option<&Path>) -> Result<()> {
    if docs.is_none() && probes.is_none() {
        return Err(CliError::usage("eval needs --docs and/or --probes"));
    }
    let ck = load_model(model)?;
    let mut report = Map::new();
    if let Some(p) = docs {
        let docs: Vec<RawDocument> = load_records(p, RecordKind::Cpt, cfg.data_min_quality)?
            .into_iter()
            .filter_map(|r| if let Record::Cpt(d) = r { Some(d) } else { None })
            .collect();
        let samples = build_mixture(&docs, &[], &[])?;
        let blocks = pack_blocks(&samples, ck.config().max_seq_len, 0, PackOrder::InOrder)?;
        report.insert("perplexity".into(), json!(corpus_perplexity(&ck.params, &blocks)?));
    }
    if let Some(p) = probes {
        let pairs = sft_pairs(load_records(p, RecordKind::Sft, None)?);
        report.insert("exact_match".into(), json!(exact_match_probes(&ck.params, &pairs)?));
    }
    println!("{}", Value::Object(report));
    Ok(())
}

pub fn experiment(cfg: &RunConfig, scenario: Scenario, out: &Path) -> Result<()> {
    let run = RunDir::create(out, "experiment", cfg)?;
    let result = run_experiment(cfg.stage_seed(Stage::Experiment), scenario, &ExperimentConfig::default(), Some(out))?;
    print!("{}", result.csv);
    run.finish(None)
}

fn random_model(config: ModelConfig, seed: u64) -> Parameters<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let tensors = config
        .parameter_shapes()
        .iter()
        .map(|(_, s)| {
            let n = s.iter().product();
            Tensor::new(s, (0..n).map(|_| rng.gen_range(-0.3..0.3)).collect()).unwrap()
        })
        .collect();
    Parameters::from_tensors(config, tensors).unwrap()
}

pub fn gradcheck() -> Result<()> {
    let mut ok = true;
    for r in gradient_suite()? {
        ok &= r.max_relative_error < 1e-4;
        println!("{:<28} {:.3e}", r.op, r.max_relative_error);
    }
    let config = ModelConfig {
        d_model: 16,
        n_layers: 2,
        n_heads: 2,
        max_seq_len: 16,
        ..ModelConfig::default()
    };
    let tokens = [84, 104, 101, 32, 99, 97, 116, 256, 105, 115];
    let mut mask = [true; 10];
    mask[7] = false;
    for r in grad_check_model(&random_model(config, 7), &tokens, &mask, 1e-4)? {
        ok &= r.max_relative_error < 1e-3;
        println!("model/{:<22} {:.3e}", r.op, r.max_relative_error);
    }
    if ok {
        Ok(())
    } else {
        Err(CliError::numeric("gradient check exceeded tolerance"))
    }
}
