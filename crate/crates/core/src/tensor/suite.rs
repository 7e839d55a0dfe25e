//! Finite-difference checks for every differentiable graph op, covering each
//! differentiable input of multi-input ops.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{grad_check, log_softmax_row, GradCheckReport, Graph, Tensor, Var};
use crate::error::Result;

const EPSILON: f64 = 1e-6;

fn random(shape: &[usize], seed: u64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).expect("non-empty shape")
}

/// Contracts `y` with a fixed random tensor so every output coordinate
/// carries a distinct upstream gradient.
fn project(g: &mut Graph<f64>, y: Var, seed: u64) -> Result<Var> {
    let w = g.constant(random(g.value(y).shape(), seed));
    let p = g.mul(y, w)?;
    Ok(g.sum(p))
}

type Case = (&'static str, Vec<usize>, Box<dyn Fn(&mut Graph<f64>, Var) -> Result<Var> + Sync>);

fn cases() -> Vec<Case> {
    let c = |g: &mut Graph<f64>, shape: &[usize], seed| g.constant(random(shape, seed));
    vec![
        ("matmul(a)", vec![3, 4], Box::new(move |g, x| {
            let b = c(g, &[4, 5], 1);
            let y = g.matmul(x, b)?;
            project(g, y, 2)
        })),
        ("matmul(b)", vec![4, 5], Box::new(move |g, x| {
            let a = c(g, &[3, 4], 3);
            let y = g.matmul(a, x)?;
            project(g, y, 4)
        })),
        ("matmul_nt(a)", vec![3, 4], Box::new(move |g, x| {
            let b = c(g, &[6, 4], 5);
            let y = g.matmul_nt(x, b)?;
            project(g, y, 6)
        })),
        ("matmul_nt(b)", vec![6, 4], Box::new(move |g, x| {
            let a = c(g, &[3, 4], 7);
            let y = g.matmul_nt(a, x)?;
            project(g, y, 8)
        })),
        ("add", vec![3, 5], Box::new(move |g, x| {
            let o = c(g, &[3, 5], 9);
            let y = g.add(x, o)?;
            project(g, y, 10)
        })),
        ("add(scalar)", vec![1], Box::new(move |g, x| {
            let o = c(g, &[3, 5], 11);
            let y = g.add(o, x)?;
            project(g, y, 12)
        })),
        ("sub(a)", vec![3, 5], Box::new(move |g, x| {
            let o = c(g, &[3, 5], 13);
            let y = g.sub(x, o)?;
            project(g, y, 14)
        })),
        ("sub(b)", vec![3, 5], Box::new(move |g, x| {
            let o = c(g, &[3, 5], 15);
            let y = g.sub(o, x)?;
            project(g, y, 16)
        })),
        ("mul", vec![3, 5], Box::new(move |g, x| {
            let o = c(g, &[3, 5], 17);
            let y = g.mul(o, x)?;
            project(g, y, 18)
        })),
        ("mul(scalar)", vec![1], Box::new(move |g, x| {
            let o = c(g, &[3, 5], 19);
            let y = g.mul(x, o)?;
            project(g, y, 20)
        })),
        ("scale", vec![3, 5], Box::new(|g, x| {
            let y = g.scale(x, -2.5);
            project(g, y, 21)
        })),
        ("gelu", vec![3, 5], Box::new(|g, x| {
            let y = g.scale(x, 2.0);
            let y = g.gelu(y);
            project(g, y, 22)
        })),
        ("tanh", vec![3, 5], Box::new(|g, x| {
            let y = g.tanh(x);
            project(g, y, 23)
        })),
        ("layer_norm(x)", vec![3, 5], Box::new(move |g, x| {
            let gain = c(g, &[5], 24);
            let bias = c(g, &[5], 25);
            let y = g.layer_norm(x, gain, bias)?;
            project(g, y, 26)
        })),
        ("layer_norm(gain)", vec![5], Box::new(move |g, x| {
            let inp = c(g, &[3, 5], 27);
            let bias = c(g, &[5], 28);
            let y = g.layer_norm(inp, x, bias)?;
            project(g, y, 29)
        })),
        ("layer_norm(bias)", vec![5], Box::new(move |g, x| {
            let inp = c(g, &[3, 5], 30);
            let gain = c(g, &[5], 31);
            let y = g.layer_norm(inp, gain, x)?;
            project(g, y, 32)
        })),
        ("embedding", vec![6, 4], Box::new(|g, x| {
            let y = g.embedding(x, &[5, 0, 5, 2])?;
            project(g, y, 33)
        })),
        ("select_rows", vec![4, 3], Box::new(|g, x| {
            let y = g.select_rows(x, &[3, 0, 3])?;
            project(g, y, 34)
        })),
        ("row_softmax", vec![3, 5], Box::new(|g, x| {
            let y = g.row_softmax(x);
            project(g, y, 35)
        })),
        ("row_log_softmax", vec![3, 5], Box::new(|g, x| {
            let y = g.row_log_softmax(x);
            project(g, y, 36)
        })),
        ("cross_entropy_masked", vec![4, 6], Box::new(|g, x| {
            g.cross_entropy_masked(x, &[5, 0, 2, 1], &[true, false, true, true])
        })),
        ("kl_divergence_rows(p)", vec![3, 5], Box::new(|g, x| {
            let p = g.row_softmax(x);
            let r = random(&[3, 5], 37);
            let lq: Vec<f64> = (0..3).flat_map(|i| log_softmax_row(r.row(i))).collect();
            let lq = g.constant(Tensor::new(&[3, 5], lq)?);
            g.kl_divergence_rows(p, lq)
        })),
        ("kl_divergence_rows(log_q)", vec![3, 5], Box::new(|g, x| {
            let r = random(&[3, 5], 38);
            let p: Vec<f64> = (0..3)
                .flat_map(|i| log_softmax_row(r.row(i)).into_iter().map(f64::exp))
                .collect();
            let p = g.constant(Tensor::new(&[3, 5], p)?);
            let lq = g.row_log_softmax(x);
            g.kl_divergence_rows(p, lq)
        })),
        ("causal_attention(q)", vec![4, 6], Box::new(move |g, x| {
            let k = c(g, &[4, 6], 39);
            let v = c(g, &[4, 6], 40);
            let y = g.causal_attention(x, k, v, 2)?;
            project(g, y, 41)
        })),
        ("causal_attention(k)", vec![4, 6], Box::new(move |g, x| {
            let q = c(g, &[4, 6], 42);
            let v = c(g, &[4, 6], 43);
            let y = g.causal_attention(q, x, v, 2)?;
            project(g, y, 44)
        })),
        ("causal_attention(v)", vec![4, 6], Box::new(move |g, x| {
            let q = c(g, &[4, 6], 45);
            let k = c(g, &[4, 6], 46);
            let y = g.causal_attention(q, k, x, 2)?;
            project(g, y, 47)
        })),
        ("sum", vec![3, 5], Box::new(|g, x| {
            let y = g.tanh(x);
            Ok(g.sum(y))
        })),
        ("mean", vec![3, 5], Box::new(|g, x| {
            let y = g.tanh(x);
            Ok(g.mean(y))
        })),
        ("neg_log_sigmoid", vec![3, 5], Box::new(|g, x| {
            let y = g.scale(x, 3.0);
            let y = g.neg_log_sigmoid(y);
            project(g, y, 48)
        })),
    ]
}

/// Runs the finite-difference check for every op in `f64`.
pub fn gradient_suite() -> Result<Vec<GradCheckReport>> {
    cases()
        .into_iter()
        .enumerate()
        .map(|(i, (name, shape, f))| grad_check(name, f, &random(&shape, 100 + i as u64), EPSILON))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_case_passes() {
        for r in gradient_suite().unwrap() {
            assert!(r.max_relative_error < 1e-4, "{r:?}");
        }
    }
}
