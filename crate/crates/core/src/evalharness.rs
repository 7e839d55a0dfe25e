//! Desk-scale evaluation and the end-to-end experiment scenarios.
//!
//! Every scenario starts from the same seed-derived corpus and the same
//! pre-trained base checkpoint; both are hashed and re-checked before each
//! arm runs so differences between arms come from the method alone.

use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use log::info;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::align::{
    implicit_reward_margin, prompt_tokens, score_records, select_samples, train_dpo, train_sft, DpoConfig,
    SelectionConfig, Strategy,
};
use crate::datapipe::{
    build_mixture, detokenize, pack_blocks, pack_epochs, synth_corpus, InstructionPair, PackOrder, PackedBlock,
    PreferenceTriple, RawDocument, Record, SynthCorpus, UnifiedSample, SEP,
};
use crate::error::{Error, Result};
use crate::lssd::{train_mix_cpt, train_ntp, TrainConfig};
use crate::model::{forward, greedy_decode, init_parameters, ntp_loss, Checkpoint, ModelConfig, Parameters};
use crate::tensor::Real;
use crate::trainer::OptimConfig;

/// Longest continuation decoded when answering a probe.
pub const MAX_ANSWER_TOKENS: usize = 32;

/// exp of the mean next-token NLL over every scored position of `blocks`.
pub fn corpus_perplexity<R: Real>(params: &Parameters<R>, blocks: &[PackedBlock]) -> Result<f64> {
    use rayon::prelude::*;
    let per_block: Vec<Option<(f64, usize)>> = blocks
        .par_iter()
        .map(|b| {
            let n = b.mask.iter().skip(1).filter(|&&m| m).count();
            if n == 0 {
                return Ok(None);
            }
            let trace = forward(params, &b.tokens)?;
            Ok(Some((ntp_loss(&trace, &b.tokens, &b.mask)?, n)))
        })
        .collect::<Result<_>>()?;
    let (mut total, mut count) = (0.0, 0usize);
    for (loss, n) in per_block.into_iter().flatten() {
        total += loss * n as f64;
        count += n;
    }
    if count == 0 {
        return Err(Error::Input("corpus has no scored tokens".into()));
    }
    Ok((total / count as f64).exp())
}

/// Trim plus lowercase.
pub fn normalize_answer(s: &str) -> String {
    s.trim().to_lowercase()
}

/// Greedy answer to a templated query, decoded up to SEP.
pub fn answer<R: Real>(params: &Parameters<R>, query: &str) -> Result<String> {
    let ids = greedy_decode(params, &prompt_tokens(query), MAX_ANSWER_TOKENS, SEP)?;
    detokenize(&ids, false).or_else(|_| Ok(String::from_utf8_lossy(&ids.iter().filter(|&&i| i < 256).map(|&i| i as u8).collect::<Vec<_>>()).into_owned()))
}

/// Fraction of probes whose normalized greedy answer equals the normalized gold.
pub fn exact_match_probes<R: Real>(params: &Parameters<R>, probes: &[InstructionPair]) -> Result<f64> {
    use rayon::prelude::*;
    if probes.is_empty() {
        return Err(Error::Input("no probes".into()));
    }
    let hits: Vec<bool> = probes
        .par_iter()
        .map(|p| Ok(normalize_answer(&answer(params, &p.query)?) == normalize_answer(&p.response)))
        .collect::<Result<_>>()?;
    Ok(hits.iter().filter(|&&h| h).count() as f64 / probes.len() as f64)
}

/// `ppl(after) − ppl(before)` on `blocks`; positive means forgetting.
pub fn forgetting_gap<R: Real>(
    before: &Parameters<R>,
    after: &Parameters<R>,
    blocks: &[PackedBlock],
) -> Result<f64> {
    if before.config() != after.config() {
        return Err(Error::Param("models being compared have different configs".into()));
    }
    Ok(corpus_perplexity(after, blocks)? - corpus_perplexity(before, blocks)?)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub arm: String,
    pub domain_ppl: f64,
    pub general_ppl: f64,
    pub forgetting_gap: f64,
    pub probe_em: f64,
}

pub const COMPARISON_HEADER: &str = "arm,domain_ppl,general_ppl,forgetting_gap,probe_em";

pub fn comparison_csv(reports: &[EvalReport]) -> String {
    let mut s = String::from(COMPARISON_HEADER);
    s.push('\n');
    for r in reports {
        s.push_str(&format!(
            "{},{:.6},{:.6},{:.6},{:.6}\n",
            r.arm, r.domain_ppl, r.general_ppl, r.forgetting_gap, r.probe_em
        ));
    }
    s
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Scenario {
    Forgetting,
    Utilization,
    AblationAlpha,
    AblationSelection,
    AblationRatio,
}

impl FromStr for Scenario {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "forgetting" => Ok(Scenario::Forgetting),
            "utilization" => Ok(Scenario::Utilization),
            "ablation-alpha" => Ok(Scenario::AblationAlpha),
            "ablation-selection" => Ok(Scenario::AblationSelection),
            "ablation-ratio" => Ok(Scenario::AblationRatio),
            other => Err(Error::Param(format!(
                "unknown scenario {other:?} (forgetting|utilization|ablation-alpha|ablation-selection|ablation-ratio)"
            ))),
        }
    }
}

impl fmt::Display for Scenario {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Scenario::Forgetting => "forgetting",
            Scenario::Utilization => "utilization",
            Scenario::AblationAlpha => "ablation-alpha",
            Scenario::AblationSelection => "ablation-selection",
            Scenario::AblationRatio => "ablation-ratio",
        })
    }
}

/// The three continual pre-training arms compared throughout.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum CptArm {
    /// Raw domain documents only, plain next-token loss.
    CptOnly,
    /// Knowledge mixture, plain next-token loss.
    MixNoKd,
    /// Knowledge mixture with the LSSD term.
    Mix,
}

impl CptArm {
    pub fn label(self) -> &'static str {
        match self {
            CptArm::CptOnly => "CPT-only",
            CptArm::MixNoKd => "Mix-CPT-noKD",
            CptArm::Mix => "Mix-CPT",
        }
    }
}

/// Every knob of the desk-scale harness.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub model: ModelConfig,
    pub n_entities: usize,
    pub n_general: usize,
    /// Copies of each domain document in the knowledge mixture, so raw
    /// documents stay a large share of it as in full-scale corpora.
    pub domain_repeat: usize,
    pub base: OptimConfig,
    pub cpt: OptimConfig,
    /// α of the LSSD arm.
    pub alpha: f64,
    pub alpha_grid: Vec<f64>,
    pub sft: OptimConfig,
    pub sft_k: usize,
    pub dpo: DpoConfig,
    pub dpo_k: usize,
    /// SFT:DPO sample ratios for the ratio ablation; the total follows `sft_k + dpo_k`.
    pub ratios: Vec<(usize, usize)>,
    pub pack_order: PackOrder,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig {
                d_model: 80,
                ..ModelConfig::default()
            },
            n_entities: 32,
            n_general: 48,
            domain_repeat: 3,
            base: OptimConfig {
                lr: 0.2,
                momentum: 0.9,
                clip_norm: 1.0,
                steps: 1500,
                batch_size: 8,
                seed: 0,
            },
            cpt: OptimConfig {
                lr: 0.2,
                momentum: 0.9,
                clip_norm: 1.0,
                steps: 1000,
                batch_size: 8,
                seed: 0,
            },
            alpha: 0.5,
            alpha_grid: vec![1.0, 0.75, 0.5, 0.25],
            // Light on purpose: alignment should teach the format, not the facts.
            sft: OptimConfig {
                lr: 0.003,
                momentum: 0.9,
                clip_norm: 1.0,
                steps: 50,
                batch_size: 8,
                seed: 0,
            },
            sft_k: 64,
            dpo: DpoConfig {
                beta: 0.1,
                optim: OptimConfig {
                    lr: 0.05,
                    momentum: 0.9,
                    clip_norm: 1.0,
                    steps: 200,
                    batch_size: 8,
                    seed: 0,
                },
            },
            dpo_k: 64,
            ratios: vec![(1, 2), (1, 1), (2, 1), (3, 1), (4, 1)],
            pack_order: PackOrder::Shuffled,
        }
    }
}

impl ExperimentConfig {
    /// Derives every per-stage seed from one global seed: stage `i` uses
    /// `seed + i` (0 corpus, 1 init, 2 base, 3 cpt, 4 select, 5 sft, 6 dpo).
    pub fn seeded(mut self, seed: u64) -> Self {
        self.base.seed = seed + 2;
        self.cpt.seed = seed + 3;
        self.sft.seed = seed + 5;
        self.dpo.optim.seed = seed + 6;
        self
    }
}

/// Shared inputs of every arm.
pub struct Prepared {
    pub seed: u64,
    pub config: ExperimentConfig,
    pub corpus: SynthCorpus,
    pub base: Checkpoint,
    pub domain_eval: Vec<PackedBlock>,
    pub general_eval: Vec<PackedBlock>,
    pub corpus_hash: String,
    pub base_hash: String,
}

/// Instruction pool mixed into pre-training and later scored for SFT.
pub fn sft_pool(corpus: &SynthCorpus) -> Vec<InstructionPair> {
    corpus.general_pairs.iter().chain(&corpus.probes_seen).cloned().collect()
}

fn corpus_hash(c: &SynthCorpus) -> String {
    let mut h = Sha256::new();
    let mut put = |s: &str| {
        h.update((s.len() as u64).to_le_bytes());
        h.update(s.as_bytes());
    };
    for d in c.domain_docs.iter().chain(&c.general_docs) {
        put(&d.text);
    }
    for p in c.probes_seen.iter().chain(&c.probes_heldout).chain(&c.general_pairs) {
        put(&p.query);
        put(&p.response);
    }
    for t in &c.preference_triples {
        put(&t.query);
        put(&t.chosen);
        put(&t.rejected);
    }
    hex::encode(h.finalize())
}

/// Enough freshly shuffled epochs to cover `optim.steps` batches.
pub fn training_stream(
    samples: &[UnifiedSample],
    seq: usize,
    optim: &OptimConfig,
    order: PackOrder,
) -> Result<Vec<PackedBlock>> {
    let per_epoch = pack_blocks(samples, seq, optim.seed, order)?.len().max(1);
    let epochs = (optim.steps * optim.batch_size).div_ceil(per_epoch);
    pack_epochs(samples, seq, optim.seed, order, epochs)
}

fn eval_blocks(docs: &[RawDocument], seq: usize) -> Result<Vec<PackedBlock>> {
    pack_blocks(&build_mixture(docs, &[], &[])?, seq, 0, PackOrder::InOrder)
}

/// Builds the corpus and pre-trains the base model on general documents.
pub fn prepare(seed: u64, config: &ExperimentConfig) -> Result<Prepared> {
    let base = pretrain_base(seed, config)?;
    prepare_with_base(seed, config, base)
}

/// Pre-trains the base model on the general documents of the seed's corpus.
pub fn pretrain_base(seed: u64, config: &ExperimentConfig) -> Result<Checkpoint> {
    let config = config.clone().seeded(seed);
    let corpus = synth_corpus(seed, config.n_entities, config.n_general)?;
    let base_data = training_stream(
        &build_mixture(&corpus.general_docs, &[], &[])?,
        config.model.max_seq_len,
        &config.base,
        PackOrder::Shuffled,
    )?;
    let init = Checkpoint::new(init_parameters(config.model, seed + 1)?, 0, seed + 1);
    info!("pre-training base model: {} blocks, {} steps", base_data.len(), config.base.steps);
    Ok(train_ntp(&init, &base_data, &config.base, None)?.checkpoint)
}

/// Same as [`prepare`] with an already trained base checkpoint.
pub fn prepare_with_base(seed: u64, config: &ExperimentConfig, base: Checkpoint) -> Result<Prepared> {
    let config = config.clone().seeded(seed);
    if *base.config() != config.model {
        return Err(Error::Param("base checkpoint does not match the experiment model config".into()));
    }
    let corpus = synth_corpus(seed, config.n_entities, config.n_general)?;
    let seq = config.model.max_seq_len;
    Ok(Prepared {
        seed,
        domain_eval: eval_blocks(&corpus.domain_docs, seq)?,
        general_eval: eval_blocks(&corpus.general_docs, seq)?,
        corpus_hash: corpus_hash(&corpus),
        base_hash: base.hash(),
        corpus,
        base,
        config,
    })
}

impl Prepared {
    fn check_inputs(&self) -> Result<()> {
        if corpus_hash(&self.corpus) != self.corpus_hash || self.base.hash() != self.base_hash {
            return Err(Error::Input("shared corpus or base checkpoint changed between arms".into()));
        }
        Ok(())
    }

    /// Packed pre-training stream of one CPT arm.
    pub fn cpt_blocks(&self, arm: CptArm) -> Result<Vec<PackedBlock>> {
        let c = &self.corpus;
        let samples = match arm {
            CptArm::CptOnly => build_mixture(&c.domain_docs, &[], &[])?,
            CptArm::MixNoKd | CptArm::Mix => {
                let docs: Vec<RawDocument> = (0..self.config.domain_repeat.max(1))
                    .flat_map(|_| c.domain_docs.iter().cloned())
                    .collect();
                build_mixture(&docs, &sft_pool(c), &c.preference_triples)?
            }
        };
        training_stream(&samples, self.config.model.max_seq_len, &self.config.cpt, self.config.pack_order)
    }

    pub fn run_cpt(&self, arm: CptArm, alpha_override: Option<f64>) -> Result<Checkpoint> {
        self.check_inputs()?;
        let alpha = match arm {
            CptArm::CptOnly | CptArm::MixNoKd => 1.0,
            CptArm::Mix => alpha_override.unwrap_or(self.config.alpha),
        };
        let blocks = self.cpt_blocks(arm)?;
        info!("{}: {} blocks, alpha {alpha}", arm.label(), blocks.len());
        let cfg = TrainConfig {
            alpha,
            optim: self.config.cpt,
        };
        Ok(train_mix_cpt(&self.base, &blocks, &cfg, None)?.checkpoint)
    }

    /// Scores the instruction pool with `model` and keeps `k` samples.
    pub fn select_sft(&self, model: &Checkpoint, k: usize, strategy: Strategy) -> Result<Vec<InstructionPair>> {
        let records: Vec<Record> = sft_pool(&self.corpus).into_iter().map(Record::Sft).collect();
        let scored = score_records(&model.params, &records)?;
        let sel = select_samples(&scored, &SelectionConfig { k, strategy, seed: self.seed + 4 })?;
        Ok(sel
            .samples
            .into_iter()
            .filter_map(|s| match s.record {
                Record::Sft(p) => Some(p),
                _ => None,
            })
            .collect())
    }

    /// Splits the preference triples into a scored, selected training set and
    /// the held-out remainder.
    pub fn select_dpo(&self, model: &Checkpoint, k: usize) -> Result<(Vec<PreferenceTriple>, Vec<PreferenceTriple>)> {
        let records: Vec<Record> = self.corpus.preference_triples.iter().cloned().map(Record::Dpo).collect();
        let scored = score_records(&model.params, &records)?;
        let sel = select_samples(&scored, &SelectionConfig { k, strategy: Strategy::E, seed: self.seed + 4 })?;
        let chosen: std::collections::BTreeSet<usize> = sel.samples.iter().map(|s| s.index).collect();
        let (mut train, mut held) = (Vec::new(), Vec::new());
        for (i, t) in self.corpus.preference_triples.iter().enumerate() {
            if chosen.contains(&i) {
                train.push(t.clone());
            } else {
                held.push(t.clone());
            }
        }
        Ok((train, held))
    }

    pub fn run_sft(&self, model: &Checkpoint, pairs: &[InstructionPair]) -> Result<Checkpoint> {
        Ok(train_sft(model, pairs, &self.config.sft, None)?.checkpoint)
    }

    pub fn run_dpo(&self, sft_model: &Checkpoint, triples: &[PreferenceTriple]) -> Result<Checkpoint> {
        Ok(train_dpo(sft_model, &sft_model.params, triples, &self.config.dpo, None)?.checkpoint)
    }

    pub fn report(&self, arm: &str, model: &Checkpoint) -> Result<EvalReport> {
        let general_ppl = corpus_perplexity(&model.params, &self.general_eval)?;
        let base_general = corpus_perplexity(&self.base.params, &self.general_eval)?;
        Ok(EvalReport {
            arm: arm.to_string(),
            domain_ppl: corpus_perplexity(&model.params, &self.domain_eval)?,
            general_ppl,
            forgetting_gap: general_ppl - base_general,
            probe_em: exact_match_probes(&model.params, &self.corpus.probes_heldout)?,
        })
    }

    pub fn base_report(&self) -> Result<EvalReport> {
        self.report("base", &self.base)
    }
}

/// Fraction of triples with a positive implicit-reward margin.
pub fn positive_margin_rate(
    policy: &Parameters<f32>,
    reference: &Parameters<f32>,
    triples: &[PreferenceTriple],
    beta: f64,
) -> Result<f64> {
    if triples.is_empty() {
        return Err(Error::Input("no triples".into()));
    }
    let mut wins = 0;
    for t in triples {
        if implicit_reward_margin(policy, reference, t, beta)? > 0.0 {
            wins += 1;
        }
    }
    Ok(wins as f64 / triples.len() as f64)
}

pub struct ExperimentOutput {
    pub reports: Vec<EvalReport>,
    pub csv: String,
}

/// Runs one scenario end to end. When `out_dir` is given the comparison
/// CSV is written to `<out_dir>/comparison.csv`.
pub fn run_experiment(
    seed: u64,
    scenario: Scenario,
    config: &ExperimentConfig,
    out_dir: Option<&Path>,
) -> Result<ExperimentOutput> {
    let prep = prepare(seed, config)?;
    let reports = run_scenario(&prep, scenario)?;
    let csv = comparison_csv(&reports);
    if let Some(dir) = out_dir {
        fs::create_dir_all(dir)?;
        fs::write(dir.join("comparison.csv"), &csv)?;
    }
    Ok(ExperimentOutput { reports, csv })
}

pub fn run_scenario(prep: &Prepared, scenario: Scenario) -> Result<Vec<EvalReport>> {
    let cfg = &prep.config;
    let mut reports = vec![prep.base_report()?];
    match scenario {
        Scenario::Forgetting => {
            for arm in [CptArm::CptOnly, CptArm::MixNoKd, CptArm::Mix] {
                let ck = prep.run_cpt(arm, None)?;
                reports.push(prep.report(arm.label(), &ck)?);
            }
        }
        Scenario::Utilization => {
            for arm in [CptArm::CptOnly, CptArm::MixNoKd, CptArm::Mix] {
                let ck = prep.run_cpt(arm, None)?;
                let pairs = prep.select_sft(&ck, cfg.sft_k, Strategy::E)?;
                let tuned = prep.run_sft(&ck, &pairs)?;
                reports.push(prep.report(&format!("{}+SFT", arm.label()), &tuned)?);
            }
        }
        Scenario::AblationAlpha => {
            for &alpha in &cfg.alpha_grid {
                let ck = prep.run_cpt(CptArm::Mix, Some(alpha))?;
                reports.push(prep.report(&format!("alpha={alpha}"), &ck)?);
            }
        }
        Scenario::AblationSelection => {
            let ck = prep.run_cpt(CptArm::Mix, None)?;
            for strategy in [Strategy::R, Strategy::E, Strategy::H, Strategy::EH] {
                let pairs = prep.select_sft(&ck, cfg.sft_k, strategy)?;
                let tuned = prep.run_sft(&ck, &pairs)?;
                reports.push(prep.report(&format!("select={strategy}"), &tuned)?);
            }
        }
        Scenario::AblationRatio => {
            let ck = prep.run_cpt(CptArm::Mix, None)?;
            let budget = cfg.sft_k + cfg.dpo_k;
            for &(s, d) in &cfg.ratios {
                let k_sft = (budget * s / (s + d)).max(1);
                let k_dpo = (budget - k_sft).max(1);
                let pairs = prep.select_sft(&ck, k_sft, Strategy::E)?;
                let tuned = prep.run_sft(&ck, &pairs)?;
                let (triples, _) = prep.select_dpo(&ck, k_dpo)?;
                let aligned = prep.run_dpo(&tuned, &triples)?;
                reports.push(prep.report(&format!("sft:dpo={s}:{d}"), &aligned)?);
            }
        }
    }
    Ok(reports)
}
