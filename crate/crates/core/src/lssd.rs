//! Logit swap self-distillation and the mixed continual pre-training loop.
//!
//! The frozen pre-training snapshot acts as teacher. For every position its
//! logit row is edited so the gold token takes the top-1 logit value (the
//! two entries are exchanged), and the student is pulled towards the
//! softmax of that edited row with a reverse KL term, `KL(student ‖ teacher)`.
//! The CPT objective blends this with next-token prediction:
//! `α · ntp + (1 − α) · lssd`.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::datapipe::PackedBlock;
use crate::error::{Error, Result};
use crate::model::{
    build_forward, forward, next_token_targets, ntp_loss_var, Checkpoint, ParamVars, Parameters, Sgd,
};
use crate::tensor::{argmax, log_softmax_row, Graph, Real, Tensor, Var};
use crate::trainer::{batch_gradient, check_finite, ExampleLoss, MetricsLog, OptimConfig};

/// Continual pre-training settings.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    /// Weight of the next-token loss; `1 − alpha` weighs the LSSD term.
    pub alpha: f64,
    pub optim: OptimConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            alpha: 0.5,
            optim: OptimConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        check_alpha(self.alpha)?;
        self.optim.validate()
    }
}

fn check_alpha(alpha: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::Param(format!("alpha must be in [0, 1], got {alpha}")));
    }
    Ok(())
}

/// Parameter snapshot taken before any CPT update. Never trained.
#[derive(Clone, Debug)]
pub struct FrozenTeacher {
    params: Parameters<f32>,
}

impl FrozenTeacher {
    pub fn new(params: Parameters<f32>) -> Self {
        Self { params }
    }

    pub fn params(&self) -> &Parameters<f32> {
        &self.params
    }

    /// Teacher logits for `tokens`, computed without gradient tracking.
    pub fn logits(&self, student: &Parameters<f32>, tokens: &[usize]) -> Result<Tensor<f32>> {
        if student.config() != self.params.config() {
            return Err(Error::Param(format!(
                "teacher config {:?} does not match student config {:?}",
                self.params.config(),
                student.config()
            )));
        }
        Ok(forward(&self.params, tokens)?.logits)
    }
}

/// Exchanges the top-1 logit (lowest index on ties) with the gold logit.
/// Rows whose top-1 already is the gold token are returned unchanged.
pub fn swap_teacher_logits<R: Real>(row: &[R], gold: usize) -> Result<Vec<R>> {
    if gold >= row.len() {
        return Err(Error::Index(format!("gold id {gold} >= vocabulary {}", row.len())));
    }
    let mut out = row.to_vec();
    let top = argmax(row);
    if top != gold {
        out.swap(top, gold);
    }
    Ok(out)
}

/// Log-probabilities of the swapped teacher for the active NTP rows.
fn swapped_teacher_log_probs<R: Real>(
    teacher_logits: &Tensor<R>,
    targets: &[usize],
    rows: &[usize],
) -> Result<Tensor<R>> {
    let (_, vocab) = teacher_logits.rows_cols();
    let mut data = Vec::with_capacity(rows.len() * vocab);
    for &r in rows {
        let swapped = swap_teacher_logits(teacher_logits.row(r), targets[r])?;
        data.extend(log_softmax_row(&swapped));
    }
    Tensor::new(&[rows.len(), vocab], data)
}

/// Records the LSSD loss on `g`: mean over active rows of
/// `KL(softmax(student) ‖ softmax(swap(teacher)))`. Row `j` uses gold token
/// `tokens[j + 1]` and is active when `mask[j + 1]` is set.
pub fn lssd_loss_var<R: Real>(
    g: &mut Graph<R>,
    student_logits: Var,
    teacher_logits: &Tensor<R>,
    tokens: &[usize],
    mask: &[bool],
) -> Result<Var> {
    g.value(student_logits)
        .assert_same_shape(teacher_logits, "lssd_loss")?;
    if g.value(student_logits).rows_cols().0 != tokens.len() {
        return Err(Error::Shape(format!(
            "lssd_loss: {} logit rows for {} tokens",
            g.value(student_logits).rows_cols().0,
            tokens.len()
        )));
    }
    let (targets, active) = next_token_targets(tokens, mask)?;
    let rows: Vec<usize> = (0..active.len()).filter(|&i| active[i]).collect();
    if rows.is_empty() {
        return Err(Error::EmptyLossSupport);
    }
    let log_q = swapped_teacher_log_probs(teacher_logits, &targets, &rows)?;
    let student = g.select_rows(student_logits, &rows)?;
    let p = g.row_softmax(student);
    let log_q = g.constant(log_q);
    g.kl_divergence_rows(p, log_q)
}

/// Value of [`lssd_loss_var`] for fixed logits.
pub fn lssd_loss<R: Real>(
    student_logits: &Tensor<R>,
    teacher_logits: &Tensor<R>,
    tokens: &[usize],
    mask: &[bool],
) -> Result<f64> {
    let mut g = Graph::<R>::new();
    let s = g.constant(student_logits.clone());
    let l = lssd_loss_var(&mut g, s, teacher_logits, tokens, mask)?;
    Ok(g.value(l).item().f64())
}

/// `α · ntp + (1 − α) · lssd`.
pub fn cpt_loss(ntp: f64, lssd: f64, alpha: f64) -> Result<f64> {
    check_alpha(alpha)?;
    Ok(alpha * ntp + (1.0 - alpha) * lssd)
}

/// Result of a training run: the final checkpoint and its step log.
pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub metrics: MetricsLog,
}

fn targets_in(block: &PackedBlock) -> usize {
    block.mask.iter().skip(1).filter(|&&m| m).count()
}

fn cpt_example(
    g: &mut Graph<f32>,
    vars: &ParamVars,
    student: &Parameters<f32>,
    teacher: Option<&FrozenTeacher>,
    alpha: f64,
    block: &PackedBlock,
) -> Result<Option<ExampleLoss>> {
    let weight = targets_in(block);
    if weight == 0 {
        return Ok(None);
    }
    let (_, logits) = build_forward(g, student.config(), vars, &block.tokens)?;
    let ntp = ntp_loss_var(g, logits, &block.tokens, &block.mask)?;
    let ntp_value = g.value(ntp).item() as f64;
    if !ntp_value.is_finite() {
        // The training loop fills in the step.
        return Err(Error::NonFinite {
            step: 0,
            detail: format!("ntp = {ntp_value}"),
        });
    }
    let Some(teacher) = teacher else {
        return Ok(Some(ExampleLoss {
            root: ntp,
            weight: weight as f64,
            components: vec![ntp_value, f64::NAN, ntp_value],
        }));
    };
    let teacher_logits = teacher.logits(student, &block.tokens)?;
    let lssd = lssd_loss_var(g, logits, &teacher_logits, &block.tokens, &block.mask)?;
    let lssd_value = g.value(lssd).item() as f64;
    let a = g.scale(ntp, alpha);
    let b = g.scale(lssd, 1.0 - alpha);
    let total = g.add(a, b)?;
    Ok(Some(ExampleLoss {
        root: total,
        weight: weight as f64,
        components: vec![ntp_value, lssd_value, cpt_loss(ntp_value, lssd_value, alpha)?],
    }))
}

/// Blocks consumed at `step`: consecutive windows of the stream, wrapping
/// around at the end.
pub fn batch_at(blocks: &[PackedBlock], step: usize, batch_size: usize) -> Vec<&PackedBlock> {
    (0..batch_size)
        .map(|i| &blocks[(step * batch_size + i) % blocks.len()])
        .collect()
}

/// Continual pre-training with the blended NTP + LSSD objective.
///
/// The teacher is snapshotted from `start`. With `alpha == 1` the teacher is
/// skipped and the `lssd` column is logged as NaN.
pub fn train_mix_cpt(
    start: &Checkpoint,
    blocks: &[PackedBlock],
    cfg: &TrainConfig,
    metrics_path: Option<&Path>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if blocks.is_empty() {
        return Err(Error::Input("no training blocks".into()));
    }
    let seq_len = start.config().max_seq_len;
    if let Some(b) = blocks.iter().find(|b| b.tokens.len() > seq_len) {
        return Err(Error::ExceedsContext {
            len: b.tokens.len(),
            max: seq_len,
        });
    }
    let teacher = (cfg.alpha < 1.0).then(|| FrozenTeacher::new(start.params.clone()));
    let mut params = start.params.clone();
    let o = cfg.optim;
    let mut opt = Sgd::new(o.lr, o.momentum, o.clip_norm)?;
    let mut metrics = MetricsLog::new(&["ntp", "lssd", "total"], metrics_path)?;
    for step in 0..o.steps {
        let batch = batch_at(blocks, step, o.batch_size);
        let bg = batch_gradient(&params, &batch, |g, vars, block| {
            cpt_example(g, vars, &params, teacher.as_ref(), cfg.alpha, block)
        })
        .map_err(|e| match e {
            Error::NonFinite { detail, .. } => Error::NonFinite { step, detail },
            e => e,
        })?;
        if bg.total_weight == 0.0 {
            return Err(Error::Input(format!("batch at step {step} has no scored tokens")));
        }
        let comps = bg.components;
        check_finite(step, &["ntp", "total"], &[comps[0], comps[2]])?;
        if teacher.is_some() {
            check_finite(step, &["lssd"], &comps[1..2])?;
        }
        opt.step(&mut params, &bg.grads)?;
        metrics.log(step, &comps)?;
    }
    if !params.is_finite() {
        return Err(Error::NonFinite {
            step: o.steps,
            detail: "parameters".into(),
        });
    }
    Ok(TrainOutcome {
        checkpoint: Checkpoint::new(params, start.step + o.steps as u64, o.seed),
        metrics,
    })
}

/// Plain next-token pre-training on a block stream (used for the base model).
pub fn train_ntp(
    start: &Checkpoint,
    blocks: &[PackedBlock],
    optim: &OptimConfig,
    metrics_path: Option<&Path>,
) -> Result<TrainOutcome> {
    train_mix_cpt(
        start,
        blocks,
        &TrainConfig {
            alpha: 1.0,
            optim: *optim,
        },
        metrics_path,
    )
}
