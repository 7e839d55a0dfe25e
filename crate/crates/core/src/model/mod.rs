//! Tiny pre-norm decoder-only transformer with a tied embedding matrix.
//!
//! The token embedding `W_e` doubles as the output projection, so logits are
//! always `h · W_eᵀ` for final hidden states `h`.

mod checkpoint;
mod optim;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION, HEADER_LEN};
pub use optim::Sgd;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{argmax, grad_check, GradCheckReport, Graph, Real, Tensor, Var};

const INIT_STD: f64 = 0.02;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub max_seq_len: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            vocab_size: crate::datapipe::VOCAB_SIZE,
            d_model: 64,
            n_layers: 2,
            n_heads: 4,
            max_seq_len: 64,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let fields = [
            ("vocab_size", self.vocab_size),
            ("d_model", self.d_model),
            ("n_layers", self.n_layers),
            ("n_heads", self.n_heads),
            ("max_seq_len", self.max_seq_len),
        ];
        for (name, v) in fields {
            if v == 0 || v > u32::MAX as usize {
                return Err(Error::Param(format!("model.{name} must be in 1..=u32::MAX, got {v}")));
            }
        }
        if self.d_model % self.n_heads != 0 {
            return Err(Error::Param(format!(
                "d_model {} is not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        Ok(())
    }

    pub fn mlp_width(&self) -> usize {
        4 * self.d_model
    }

    /// Shapes of every parameter tensor in canonical order.
    pub fn parameter_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let (d, f) = (self.d_model, self.mlp_width());
        let mut out = vec![
            ("tok_emb".to_string(), vec![self.vocab_size, d]),
            ("pos_emb".to_string(), vec![self.max_seq_len, d]),
        ];
        for l in 0..self.n_layers {
            for (name, shape) in [
                ("ln1.gain", vec![d]),
                ("ln1.bias", vec![d]),
                ("attn.w_q", vec![d, d]),
                ("attn.w_k", vec![d, d]),
                ("attn.w_v", vec![d, d]),
                ("attn.w_o", vec![d, d]),
                ("ln2.gain", vec![d]),
                ("ln2.bias", vec![d]),
                ("mlp.w_up", vec![d, f]),
                ("mlp.w_down", vec![f, d]),
            ] {
                out.push((format!("layers.{l}.{name}"), shape));
            }
        }
        out.push(("ln_f.gain".to_string(), vec![d]));
        out.push(("ln_f.bias".to_string(), vec![d]));
        out
    }

    pub fn parameter_count(&self) -> usize {
        self.parameter_shapes()
            .iter()
            .map(|(_, s)| s.iter().product::<usize>())
            .sum()
    }
}

const PER_LAYER: usize = 10;

/// All model weights, stored as one list in canonical order.
#[derive(Clone, Debug, PartialEq)]
pub struct Parameters<R: Real = f32> {
    config: ModelConfig,
    tensors: Vec<Tensor<R>>,
}

impl<R: Real> Parameters<R> {
    pub fn from_tensors(config: ModelConfig, tensors: Vec<Tensor<R>>) -> Result<Self> {
        config.validate()?;
        let shapes = config.parameter_shapes();
        if shapes.len() != tensors.len() {
            return Err(Error::Shape(format!(
                "expected {} parameter tensors, got {}",
                shapes.len(),
                tensors.len()
            )));
        }
        for ((name, shape), t) in shapes.iter().zip(&tensors) {
            if t.shape() != shape.as_slice() {
                return Err(Error::Shape(format!("{name}: expected {shape:?}, got {:?}", t.shape())));
            }
        }
        Ok(Self { config, tensors })
    }

    pub fn zeros(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let tensors = config
            .parameter_shapes()
            .iter()
            .map(|(_, s)| Tensor::zeros(s))
            .collect();
        Ok(Self { config, tensors })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn tensors(&self) -> &[Tensor<R>] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor<R>] {
        &mut self.tensors
    }

    pub fn names(&self) -> Vec<String> {
        self.config.parameter_shapes().into_iter().map(|(n, _)| n).collect()
    }

    /// The tied token embedding / output projection matrix `W_e`.
    pub fn token_embedding(&self) -> &Tensor<R> {
        &self.tensors[0]
    }

    pub fn position_embedding(&self) -> &Tensor<R> {
        &self.tensors[1]
    }

    pub fn num_params(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors.iter().all(Tensor::is_finite)
    }

    pub fn cast<S: Real>(&self) -> Parameters<S> {
        Parameters {
            config: self.config,
            tensors: self.tensors.iter().map(Tensor::cast).collect(),
        }
    }

    /// Registers every tensor as a graph leaf, trainable or frozen.
    pub fn register(&self, g: &mut Graph<R>, trainable: bool) -> ParamVars {
        let vars = self
            .tensors
            .iter()
            .map(|t| {
                if trainable {
                    g.param(t.clone())
                } else {
                    g.constant(t.clone())
                }
            })
            .collect();
        ParamVars { vars }
    }
}

/// Graph handles for a registered [`Parameters`], in canonical order.
#[derive(Clone, Debug)]
pub struct ParamVars {
    pub vars: Vec<Var>,
}

impl ParamVars {
    fn tok(&self) -> Var {
        self.vars[0]
    }
    fn pos(&self) -> Var {
        self.vars[1]
    }
    fn layer(&self, l: usize, field: usize) -> Var {
        self.vars[2 + l * PER_LAYER + field]
    }
    fn final_norm(&self) -> (Var, Var) {
        let n = self.vars.len();
        (self.vars[n - 2], self.vars[n - 1])
    }
}

/// Final hidden states and the logits projected from them.
#[derive(Clone, Debug, PartialEq)]
pub struct ForwardTrace<R: Real = f32> {
    pub hidden: Tensor<R>,
    pub logits: Tensor<R>,
}

pub fn init_parameters(config: ModelConfig, seed: u64) -> Result<Parameters<f32>> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, INIT_STD).expect("valid normal");
    let tensors = config
        .parameter_shapes()
        .into_iter()
        .map(|(name, shape)| {
            let n = shape.iter().product();
            let data = if name.ends_with(".gain") {
                vec![1.0f32; n]
            } else if name.ends_with(".bias") {
                vec![0.0f32; n]
            } else {
                (0..n).map(|_| normal.sample(&mut rng) as f32).collect()
            };
            Tensor::new(&shape, data)
        })
        .collect::<Result<_>>()?;
    Ok(Parameters { config, tensors })
}

pub(crate) fn check_tokens(config: &ModelConfig, tokens: &[usize]) -> Result<()> {
    if tokens.is_empty() {
        return Err(Error::Input("empty token sequence".into()));
    }
    if tokens.len() > config.max_seq_len {
        return Err(Error::ExceedsContext {
            len: tokens.len(),
            max: config.max_seq_len,
        });
    }
    if let Some(&bad) = tokens.iter().find(|&&t| t >= config.vocab_size) {
        return Err(Error::Input(format!(
            "token id {bad} out of range for vocabulary {}",
            config.vocab_size
        )));
    }
    Ok(())
}

/// Records the forward pass on `g`; returns `(hidden, logits)`.
pub fn build_forward<R: Real>(
    g: &mut Graph<R>,
    config: &ModelConfig,
    p: &ParamVars,
    tokens: &[usize],
) -> Result<(Var, Var)> {
    check_tokens(config, tokens)?;
    let positions: Vec<usize> = (0..tokens.len()).collect();
    let tok = g.embedding(p.tok(), tokens)?;
    let pos = g.embedding(p.pos(), &positions)?;
    let mut x = g.add(tok, pos)?;
    for l in 0..config.n_layers {
        let a = g.layer_norm(x, p.layer(l, 0), p.layer(l, 1))?;
        let q = g.matmul(a, p.layer(l, 2))?;
        let k = g.matmul(a, p.layer(l, 3))?;
        let v = g.matmul(a, p.layer(l, 4))?;
        let att = g.causal_attention(q, k, v, config.n_heads)?;
        let att = g.matmul(att, p.layer(l, 5))?;
        x = g.add(x, att)?;
        let m = g.layer_norm(x, p.layer(l, 6), p.layer(l, 7))?;
        let up = g.matmul(m, p.layer(l, 8))?;
        let up = g.gelu(up);
        let down = g.matmul(up, p.layer(l, 9))?;
        x = g.add(x, down)?;
    }
    let (gain, bias) = p.final_norm();
    let h = g.layer_norm(x, gain, bias)?;
    let logits = g.matmul_nt(h, p.tok())?;
    Ok((h, logits))
}

/// Forward pass without gradient tracking.
pub fn forward<R: Real>(params: &Parameters<R>, tokens: &[usize]) -> Result<ForwardTrace<R>> {
    let mut g = Graph::new();
    let vars = params.register(&mut g, false);
    let (h, logits) = build_forward(&mut g, params.config(), &vars, tokens)?;
    Ok(ForwardTrace {
        hidden: g.value(h).clone(),
        logits: g.value(logits).clone(),
    })
}

/// Shifts a `(tokens, mask)` pair into next-token targets: row `j` predicts
/// `tokens[j + 1]` and is active when `mask[j + 1]` is set. The last row has
/// no target.
pub fn next_token_targets(tokens: &[usize], mask: &[bool]) -> Result<(Vec<usize>, Vec<bool>)> {
    if tokens.len() < 2 {
        return Err(Error::Input(format!(
            "next-token loss needs at least 2 tokens, got {}",
            tokens.len()
        )));
    }
    if mask.len() != tokens.len() {
        return Err(Error::Shape(format!(
            "{} tokens but {} mask entries",
            tokens.len(),
            mask.len()
        )));
    }
    let mut targets: Vec<usize> = tokens[1..].to_vec();
    targets.push(0);
    let mut active: Vec<bool> = mask[1..].to_vec();
    active.push(false);
    Ok((targets, active))
}

/// Next-token cross-entropy recorded on the graph.
pub fn ntp_loss_var<R: Real>(
    g: &mut Graph<R>,
    logits: Var,
    tokens: &[usize],
    mask: &[bool],
) -> Result<Var> {
    let (targets, active) = next_token_targets(tokens, mask)?;
    g.cross_entropy_masked(logits, &targets, &active)
}

/// Mean next-token negative log-likelihood of `tokens` under `trace`.
pub fn ntp_loss<R: Real>(trace: &ForwardTrace<R>, tokens: &[usize], mask: &[bool]) -> Result<f64> {
    let mut g = Graph::<R>::new();
    let logits = g.constant(trace.logits.clone());
    let l = ntp_loss_var(&mut g, logits, tokens, mask)?;
    Ok(g.value(l).item().f64())
}

/// Checks the next-token loss gradient of every parameter tensor of the
/// full model, one tensor at a time with the others held fixed.
pub fn grad_check_model(
    params: &Parameters<f64>,
    tokens: &[usize],
    mask: &[bool],
    epsilon: f64,
) -> Result<Vec<GradCheckReport>> {
    let names = params.names();
    (0..params.tensors.len())
        .map(|i| {
            let f = |g: &mut Graph<f64>, x: Var| {
                let mut vars = params.register(g, false);
                vars.vars[i] = x;
                let (_, logits) = build_forward(g, params.config(), &vars, tokens)?;
                ntp_loss_var(g, logits, tokens, mask)
            };
            grad_check(&names[i], f, &params.tensors[i], epsilon)
        })
        .collect()
}

/// Greedy continuation of `prompt`. Stops after `max_new` tokens, when
/// `stop_id` is produced (it is not included in the result), or when the
/// context window is full.
pub fn greedy_decode<R: Real>(
    params: &Parameters<R>,
    prompt: &[usize],
    max_new: usize,
    stop_id: usize,
) -> Result<Vec<usize>> {
    check_tokens(params.config(), prompt)?;
    let mut seq = prompt.to_vec();
    let mut out = Vec::new();
    while out.len() < max_new && seq.len() < params.config().max_seq_len {
        let trace = forward(params, &seq)?;
        let last = trace.logits.row(seq.len() - 1);
        let next = argmax(last);
        if next == stop_id {
            break;
        }
        out.push(next);
        seq.push(next);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> ModelConfig {
        ModelConfig {
            vocab_size: 11,
            d_model: 8,
            n_layers: 1,
            n_heads: 2,
            max_seq_len: 6,
        }
    }

    #[test]
    fn config_validation() {
        let mut c = tiny();
        c.n_heads = 3;
        assert!(matches!(c.validate(), Err(Error::Param(_))));
        c.n_heads = 0;
        assert!(c.validate().is_err());
        assert!(tiny().validate().is_ok());
    }

    #[test]
    fn logits_are_hidden_times_embedding_transpose() {
        let p = init_parameters(tiny(), 1).unwrap();
        let tr = forward(&p, &[1, 2, 3]).unwrap();
        let we = p.token_embedding();
        for t in 0..3 {
            for v in 0..11 {
                let want: f32 = crate::tensor::kernels::dot(tr.hidden.row(t), we.row(v));
                assert_eq!(tr.logits.row(t)[v], want);
            }
        }
    }

    #[test]
    fn forward_input_errors() {
        let p = init_parameters(tiny(), 1).unwrap();
        assert!(matches!(forward(&p, &[0; 7]), Err(Error::ExceedsContext { .. })));
        assert!(matches!(forward(&p, &[0, 11]), Err(Error::Input(_))));
        assert!(matches!(forward(&p, &[]), Err(Error::Input(_))));
    }

    #[test]
    fn next_token_alignment() {
        let (t, m) = next_token_targets(&[5, 6, 7], &[true, true, false]).unwrap();
        assert_eq!(t, vec![6, 7, 0]);
        assert_eq!(m, vec![true, false, false]);
        assert!(next_token_targets(&[5], &[true]).is_err());
    }
}
