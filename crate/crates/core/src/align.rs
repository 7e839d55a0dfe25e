//! Format alignment: chat templating, response perplexity, easy-sample
//! selection, SFT and DPO.

use std::collections::BTreeSet;
use std::ops::Range;
use std::path::Path;

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::datapipe::{tokenize, InstructionPair, PreferenceTriple, Record, AT, SEP, ST, UT};
use crate::error::{Error, Result};
use crate::lssd::TrainOutcome;
use crate::model::{build_forward, check_tokens, ntp_loss_var, Checkpoint, ModelConfig, ParamVars, Parameters, Sgd};
use crate::tensor::{sigmoid, Graph, Real, Var};
use crate::trainer::{batch_gradient, check_finite, ExampleLoss, MetricsLog, OptimConfig};

/// Default number of SFT samples kept by selection.
pub const DEFAULT_K_SFT: usize = 10_000;
/// Default number of preference triples kept by selection.
pub const DEFAULT_K_DPO: usize = 5_000;

/// A templated sample: `[ST] [UT] query [AT] response [SEP]`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Templated {
    pub tokens: Vec<usize>,
    /// Positions of the response tokens plus the trailing SEP.
    pub response: Range<usize>,
}

impl Templated {
    /// 0/1 mask over `tokens` selecting the response span.
    pub fn span_mask(&self) -> Vec<bool> {
        (0..self.tokens.len()).map(|i| self.response.contains(&i)).collect()
    }

    pub fn span_len(&self) -> usize {
        self.response.len()
    }
}

/// `[ST] [UT] query [AT]`, the prefix fed to the model at inference time.
pub fn prompt_tokens(query: &str) -> Vec<usize> {
    let mut t = vec![ST, UT];
    t.extend(tokenize(query));
    t.push(AT);
    t
}

pub fn apply_chat_template(query: &str, response: &str) -> Result<Templated> {
    if query.is_empty() || response.is_empty() {
        return Err(Error::Input("chat template needs a non-empty query and response".into()));
    }
    let mut tokens = prompt_tokens(query);
    let start = tokens.len();
    tokens.extend(tokenize(response));
    tokens.push(SEP);
    let end = tokens.len();
    Ok(Templated {
        tokens,
        response: start..end,
    })
}

fn templated_for_scoring(config: &ModelConfig, record: &Record) -> Result<Templated> {
    let t = match record {
        Record::Sft(p) => apply_chat_template(&p.query, &p.response)?,
        Record::Dpo(t) => apply_chat_template(&t.query, &t.chosen)?,
        Record::Cpt(_) => {
            return Err(Error::Input("documents have no response to score".into()));
        }
    };
    check_tokens(config, &t.tokens)?;
    Ok(t)
}

/// Response-only NLL recorded on the graph (mean over the span).
fn response_nll_var<R: Real>(
    g: &mut Graph<R>,
    config: &ModelConfig,
    vars: &ParamVars,
    t: &Templated,
) -> Result<Var> {
    check_tokens(config, &t.tokens)?;
    let (_, logits) = build_forward(g, config, vars, &t.tokens)?;
    ntp_loss_var(g, logits, &t.tokens, &t.span_mask())
}

fn response_nll<R: Real>(params: &Parameters<R>, t: &Templated) -> Result<f64> {
    let mut g = Graph::new();
    let vars = params.register(&mut g, false);
    let l = response_nll_var(&mut g, params.config(), &vars, t)?;
    Ok(g.value(l).item().f64())
}

/// `exp` of the mean NLL over the response span (response tokens and the
/// closing SEP), conditioned on the templated prompt. Triples are scored
/// on their chosen response only.
pub fn response_perplexity<R: Real>(params: &Parameters<R>, record: &Record) -> Result<f64> {
    let t = templated_for_scoring(params.config(), record)?;
    Ok(response_nll(params, &t)?.exp())
}

#[derive(Clone, Debug, PartialEq)]
pub struct ScoredSample {
    pub index: usize,
    pub record: Record,
    pub perplexity: f64,
}

/// Scores every record; results keep input order.
pub fn score_records(params: &Parameters<f32>, records: &[Record]) -> Result<Vec<ScoredSample>> {
    use rayon::prelude::*;
    records
        .par_iter()
        .enumerate()
        .map(|(index, record)| {
            Ok(ScoredSample {
                index,
                record: record.clone(),
                perplexity: response_perplexity(params, record)?,
            })
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Strategy {
    /// Seeded uniform sample.
    R,
    /// Lowest perplexity.
    E,
    /// Highest perplexity.
    H,
    /// `ceil(K/2)` easiest plus `floor(K/2)` hardest.
    EH,
}

impl std::str::FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_uppercase().as_str() {
            "R" => Ok(Strategy::R),
            "E" => Ok(Strategy::E),
            "H" => Ok(Strategy::H),
            "EH" => Ok(Strategy::EH),
            _ => Err(Error::Param(format!("unknown selection strategy {s:?} (R|E|H|EH)"))),
        }
    }
}

impl std::fmt::Display for Strategy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{self:?}")
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SelectionConfig {
    pub k: usize,
    pub strategy: Strategy,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Selection {
    /// Selected samples sorted by original index.
    pub samples: Vec<ScoredSample>,
    /// Set when `k` exceeded the number of candidates.
    pub k_exceeds_pool: bool,
}

/// Positions into `scored`, easiest first; ties by ascending index.
fn by_difficulty(scored: &[ScoredSample], hardest_first: bool) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scored.len()).collect();
    order.sort_by(|&a, &b| {
        let (pa, pb) = (scored[a].perplexity, scored[b].perplexity);
        let c = if hardest_first { pb.total_cmp(&pa) } else { pa.total_cmp(&pb) };
        c.then(scored[a].index.cmp(&scored[b].index))
    });
    order
}

pub fn select_samples(scored: &[ScoredSample], cfg: &SelectionConfig) -> Result<Selection> {
    if cfg.k == 0 {
        return Err(Error::Param("selection K must be >= 1".into()));
    }
    let n = scored.len();
    let k_exceeds_pool = cfg.k > n;
    let k = cfg.k.min(n);
    let picked: BTreeSet<usize> = match cfg.strategy {
        Strategy::E => by_difficulty(scored, false).into_iter().take(k).collect(),
        Strategy::H => by_difficulty(scored, true).into_iter().take(k).collect(),
        Strategy::EH => {
            let mut set: BTreeSet<usize> = by_difficulty(scored, false).into_iter().take(k.div_ceil(2)).collect();
            let hard: Vec<usize> = by_difficulty(scored, true)
                .into_iter()
                .filter(|i| !set.contains(i))
                .take(k / 2)
                .collect();
            set.extend(hard);
            set
        }
        Strategy::R => {
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
            index::sample(&mut rng, n, k).into_iter().collect()
        }
    };
    let mut samples: Vec<ScoredSample> = picked.into_iter().map(|i| scored[i].clone()).collect();
    samples.sort_by_key(|s| s.index);
    Ok(Selection {
        samples,
        k_exceeds_pool,
    })
}

/// Response-span cross entropy of one instruction pair.
pub fn sft_loss<R: Real>(params: &Parameters<R>, pair: &InstructionPair) -> Result<f64> {
    let t = apply_chat_template(&pair.query, &pair.response)?;
    response_nll(params, &t)
}

/// Seeded epoch-wise shuffling over `n` items; `n` must be non-zero.
struct EpochSampler {
    rng: ChaCha8Rng,
    order: Vec<usize>,
    pos: usize,
}

impl EpochSampler {
    fn new(n: usize, seed: u64) -> Self {
        Self {
            rng: ChaCha8Rng::seed_from_u64(seed),
            order: (0..n).collect(),
            pos: n,
        }
    }

    fn next_batch(&mut self, size: usize) -> Vec<usize> {
        use rand::seq::SliceRandom;
        (0..size)
            .map(|_| {
                if self.pos == self.order.len() {
                    self.order.shuffle(&mut self.rng);
                    self.pos = 0;
                }
                self.pos += 1;
                self.order[self.pos - 1]
            })
            .collect()
    }
}

/// Supervised fine-tuning on the response span of templated pairs.
/// Metrics columns: `sft,total`.
pub fn train_sft(
    start: &Checkpoint,
    pairs: &[InstructionPair],
    cfg: &OptimConfig,
    metrics_path: Option<&Path>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if pairs.is_empty() {
        return Err(Error::Input("no SFT samples".into()));
    }
    let config = *start.config();
    let templated: Vec<Templated> = pairs
        .iter()
        .map(|p| {
            let t = apply_chat_template(&p.query, &p.response)?;
            check_tokens(&config, &t.tokens)?;
            Ok(t)
        })
        .collect::<Result<_>>()?;
    let mut params = start.params.clone();
    let mut opt = Sgd::new(cfg.lr, cfg.momentum, cfg.clip_norm)?;
    let mut metrics = MetricsLog::new(&["sft", "total"], metrics_path)?;
    let mut sampler = EpochSampler::new(templated.len(), cfg.seed);
    for step in 0..cfg.steps {
        let batch: Vec<&Templated> = sampler.next_batch(cfg.batch_size).into_iter().map(|i| &templated[i]).collect();
        let bg = batch_gradient(&params, &batch, |g, vars, t| {
            let root = response_nll_var(g, &config, vars, t)?;
            let v = g.value(root).item() as f64;
            Ok(Some(ExampleLoss {
                root,
                weight: t.span_len() as f64,
                components: vec![v, v],
            }))
        })?;
        check_finite(step, &["sft"], &bg.components)?;
        opt.step(&mut params, &bg.grads)?;
        metrics.log(step, &bg.components)?;
    }
    Ok(TrainOutcome {
        checkpoint: Checkpoint::new(params, start.step + cfg.steps as u64, cfg.seed),
        metrics,
    })
}

/// Preference optimization settings.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DpoConfig {
    pub beta: f64,
    pub optim: OptimConfig,
}

impl Default for DpoConfig {
    fn default() -> Self {
        Self {
            beta: 0.1,
            optim: OptimConfig::default(),
        }
    }
}

impl DpoConfig {
    pub fn validate(&self) -> Result<()> {
        check_beta(self.beta)?;
        self.optim.validate()
    }
}

fn check_beta(beta: f64) -> Result<()> {
    if !(beta > 0.0 && beta.is_finite()) {
        return Err(Error::Param(format!("beta must be > 0, got {beta}")));
    }
    Ok(())
}

/// Sum of response-span log-probabilities, `log π(r | q)`.
fn sequence_logprob_var<R: Real>(
    g: &mut Graph<R>,
    config: &ModelConfig,
    vars: &ParamVars,
    t: &Templated,
) -> Result<Var> {
    let nll = response_nll_var(g, config, vars, t)?;
    Ok(g.scale(nll, -(t.span_len() as f64)))
}

pub fn sequence_logprob<R: Real>(params: &Parameters<R>, query: &str, response: &str) -> Result<f64> {
    let t = apply_chat_template(query, response)?;
    Ok(-response_nll(params, &t)? * t.span_len() as f64)
}

struct DpoPair {
    chosen: Templated,
    rejected: Templated,
    /// `log π_ref(r⁺|q) − log π_ref(r⁻|q)`
    ref_margin: f64,
}

fn dpo_pair<R: Real>(reference: &Parameters<R>, triple: &PreferenceTriple) -> Result<DpoPair> {
    triple.validate()?;
    let chosen = apply_chat_template(&triple.query, &triple.chosen)?;
    let rejected = apply_chat_template(&triple.query, &triple.rejected)?;
    for t in [&chosen, &rejected] {
        check_tokens(reference.config(), &t.tokens)?;
    }
    let ref_margin = sequence_logprob(reference, &triple.query, &triple.chosen)?
        - sequence_logprob(reference, &triple.query, &triple.rejected)?;
    Ok(DpoPair {
        chosen,
        rejected,
        ref_margin,
    })
}

/// Records `-log σ(β · (policy margin − reference margin))`; returns the
/// loss and the β-scaled implicit reward margin.
fn dpo_loss_var<R: Real>(
    g: &mut Graph<R>,
    config: &ModelConfig,
    vars: &ParamVars,
    pair: &DpoPair,
    beta: f64,
) -> Result<(Var, Var)> {
    let lp_chosen = sequence_logprob_var(g, config, vars, &pair.chosen)?;
    let lp_rejected = sequence_logprob_var(g, config, vars, &pair.rejected)?;
    let policy_margin = g.sub(lp_chosen, lp_rejected)?;
    let ref_margin = g.constant(crate::tensor::Tensor::scalar(R::of(pair.ref_margin)));
    let diff = g.sub(policy_margin, ref_margin)?;
    let reward = g.scale(diff, beta);
    Ok((g.neg_log_sigmoid(reward), reward))
}

/// β-scaled implicit reward margin of `policy` over `reference` on a triple.
pub fn implicit_reward_margin<R: Real>(
    policy: &Parameters<R>,
    reference: &Parameters<R>,
    triple: &PreferenceTriple,
    beta: f64,
) -> Result<f64> {
    check_beta(beta)?;
    let pair = dpo_pair(reference, triple)?;
    let policy_margin = sequence_logprob(policy, &triple.query, &triple.chosen)?
        - sequence_logprob(policy, &triple.query, &triple.rejected)?;
    Ok(beta * (policy_margin - pair.ref_margin))
}

pub fn dpo_loss<R: Real>(
    policy: &Parameters<R>,
    reference: &Parameters<R>,
    triple: &PreferenceTriple,
    beta: f64,
) -> Result<f64> {
    let m = implicit_reward_margin(policy, reference, triple, beta)?;
    Ok(dpo_loss_from_margin(m))
}

/// `-log σ(margin)` for an already β-scaled margin.
pub fn dpo_loss_from_margin(margin: f64) -> f64 {
    -sigmoid(margin).ln()
}

/// Direct preference optimization against a frozen reference.
/// Metrics columns: `dpo,margin,total`.
pub fn train_dpo(
    start: &Checkpoint,
    reference: &Parameters<f32>,
    triples: &[PreferenceTriple],
    cfg: &DpoConfig,
    metrics_path: Option<&Path>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if triples.is_empty() {
        return Err(Error::Input("no preference triples".into()));
    }
    if reference.config() != start.config() {
        return Err(Error::Param("reference and policy configs differ".into()));
    }
    let config = *start.config();
    let pairs: Vec<DpoPair> = triples.iter().map(|t| dpo_pair(reference, t)).collect::<Result<_>>()?;
    let o = cfg.optim;
    let mut params = start.params.clone();
    let mut opt = Sgd::new(o.lr, o.momentum, o.clip_norm)?;
    let mut metrics = MetricsLog::new(&["dpo", "margin", "total"], metrics_path)?;
    let mut sampler = EpochSampler::new(pairs.len(), o.seed);
    for step in 0..o.steps {
        let batch: Vec<&DpoPair> = sampler.next_batch(o.batch_size).into_iter().map(|i| &pairs[i]).collect();
        let bg = batch_gradient(&params, &batch, |g, vars, pair| {
            let (loss, reward) = dpo_loss_var(g, &config, vars, pair, cfg.beta)?;
            let (l, m) = (g.value(loss).item() as f64, g.value(reward).item() as f64);
            Ok(Some(ExampleLoss {
                root: loss,
                weight: 1.0,
                components: vec![l, m, l],
            }))
        })?;
        check_finite(step, &["dpo", "margin"], &bg.components)?;
        opt.step(&mut params, &bg.grads)?;
        metrics.log(step, &bg.components)?;
    }
    Ok(TrainOutcome {
        checkpoint: Checkpoint::new(params, start.step + o.steps as u64, o.seed),
        metrics,
    })
}
