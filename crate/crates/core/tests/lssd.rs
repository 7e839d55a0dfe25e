use mixcpt::datapipe::{build_mixture, pack_blocks, synth_corpus, PackOrder, PackedBlock};
use mixcpt::lssd::*;
use mixcpt::model::{
    build_forward, forward, init_parameters, ntp_loss_var, Checkpoint, ModelConfig, Parameters, Sgd,
};
use mixcpt::tensor::{grad_check, Tensor};
use mixcpt::trainer::{batch_gradient, ExampleLoss, OptimConfig};
use mixcpt::Error;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Direct evaluation: swap, softmax both rows, sum p·(ln p − ln q), mean over active rows.
fn oracle(student: &[Vec<f64>], teacher: &[Vec<f64>], tokens: &[usize], mask: &[bool]) -> f64 {
    let softmax = |z: &[f64]| {
        let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = z.iter().map(|x| (x - m).exp()).collect();
        let s: f64 = e.iter().sum();
        e.into_iter().map(|x| x / s).collect::<Vec<f64>>()
    };
    let mut total = 0.0;
    let mut n = 0;
    for j in 0..tokens.len() - 1 {
        if !mask[j + 1] {
            continue;
        }
        let gold = tokens[j + 1];
        let mut z = teacher[j].clone();
        let mut top = 0;
        for (i, &v) in z.iter().enumerate() {
            if v > z[top] {
                top = i;
            }
        }
        z.swap(top, gold);
        let q = softmax(&z);
        let p = softmax(&student[j]);
        total += p.iter().zip(&q).map(|(&a, &b)| if a == 0.0 { 0.0 } else { a * (a.ln() - b.ln()) }).sum::<f64>();
        n += 1;
    }
    total / n as f64
}

fn to_tensor(rows: &[Vec<f64>]) -> Tensor<f64> {
    Tensor::from_rows(rows).unwrap()
}

fn random_rows(rng: &mut ChaCha8Rng, t: usize, v: usize, scale: f64) -> Vec<Vec<f64>> {
    (0..t).map(|_| (0..v).map(|_| rng.gen_range(-scale..scale)).collect()).collect()
}

#[test]
fn two_token_closed_form() {
    // teacher q = (3/4, 1/4), gold = 1 swaps it to (1/4, 3/4); uniform student.
    let student = vec![vec![0.0, 0.0], vec![0.0, 0.0]];
    let teacher = vec![vec![3f64.ln(), 0.0], vec![0.0, 0.0]];
    let got = lssd_loss(&to_tensor(&student), &to_tensor(&teacher), &[0, 1], &[true, true]).unwrap();
    let expected = 0.5 * (4.0f64 / 3.0).ln();
    assert!((got - expected).abs() < 1e-12, "{got} vs {expected}");
}

#[test]
fn matches_direct_evaluation() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    for _ in 0..20 {
        let (t, v) = (rng.gen_range(2..12), rng.gen_range(2..40));
        let s = random_rows(&mut rng, t, v, 4.0);
        let z = random_rows(&mut rng, t, v, 4.0);
        let tokens: Vec<usize> = (0..t).map(|_| rng.gen_range(0..v)).collect();
        let mut mask: Vec<bool> = (0..t).map(|_| rng.gen_bool(0.8)).collect();
        mask[1] = true;
        let got = lssd_loss(&to_tensor(&s), &to_tensor(&z), &tokens, &mask).unwrap();
        let want = oracle(&s, &z, &tokens, &mask);
        assert!((got - want).abs() < 1e-7, "{got} vs {want}");
    }
}

#[test]
fn zero_at_swapped_teacher_and_nonnegative() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let z = random_rows(&mut rng, 6, 30, 3.0);
    let tokens: Vec<usize> = (0..6).map(|_| rng.gen_range(0..30)).collect();
    let swapped: Vec<Vec<f64>> = (0..6)
        .map(|j| if j + 1 < 6 { swap_teacher_logits(&z[j], tokens[j + 1]).unwrap() } else { z[j].clone() })
        .collect();
    let mask = vec![true; 6];
    let zero = lssd_loss(&to_tensor(&swapped), &to_tensor(&z), &tokens, &mask).unwrap();
    assert!(zero.abs() < 1e-12, "{zero}");
    for _ in 0..50 {
        let s = random_rows(&mut rng, 6, 30, 5.0);
        assert!(lssd_loss(&to_tensor(&s), &to_tensor(&z), &tokens, &mask).unwrap() >= -1e-6);
    }
}

#[test]
fn errors() {
    let a = Tensor::<f64>::zeros(&[3, 4]);
    let b = Tensor::<f64>::zeros(&[3, 5]);
    assert!(matches!(lssd_loss(&a, &b, &[0, 1, 2], &[true; 3]), Err(Error::Shape(_))));
    assert!(matches!(lssd_loss(&a, &a, &[0, 1], &[true; 2]), Err(Error::Shape(_))));
    assert!(matches!(lssd_loss(&a, &a, &[0, 1, 2], &[true, false, false]), Err(Error::EmptyLossSupport)));
    assert!(matches!(lssd_loss(&a, &a, &[0, 9, 2], &[true; 3]), Err(Error::Index(_))));
}

#[test]
fn student_gradient_passes_grad_check() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let s = to_tensor(&random_rows(&mut rng, 5, 7, 2.0));
    let z = to_tensor(&random_rows(&mut rng, 5, 7, 2.0));
    let tokens = vec![1, 6, 0, 3, 3];
    let mask = vec![true, true, false, true, true];
    let r = grad_check("lssd", |g, x| lssd_loss_var(g, x, &z, &tokens, &mask), &s, 1e-6).unwrap();
    assert!(r.max_relative_error < 1e-4, "{r:?}");
}

fn setup(steps: usize) -> (Checkpoint, Vec<PackedBlock>, OptimConfig) {
    let config = ModelConfig {
        d_model: 16,
        n_layers: 1,
        n_heads: 2,
        max_seq_len: 24,
        ..ModelConfig::default()
    };
    let corpus = synth_corpus(0, 6, 6).unwrap();
    let blocks = pack_blocks(&build_mixture(&corpus.domain_docs, &[], &[]).unwrap(), 24, 0, PackOrder::Shuffled).unwrap();
    let start = Checkpoint::new(init_parameters(config, 0).unwrap(), 0, 0);
    let optim = OptimConfig {
        steps,
        batch_size: 4,
        ..OptimConfig::default()
    };
    (start, blocks, optim)
}

/// Straight next-token SGD loop written against the public building blocks.
fn plain_ntp_loop(start: &Checkpoint, blocks: &[PackedBlock], o: &OptimConfig) -> Parameters<f32> {
    let mut params = start.params.clone();
    let mut opt = Sgd::new(o.lr, o.momentum, o.clip_norm).unwrap();
    for step in 0..o.steps {
        let batch = batch_at(blocks, step, o.batch_size);
        let bg = batch_gradient(&params, &batch, |g, vars, b| {
            let (_, logits) = build_forward(g, params.config(), vars, &b.tokens)?;
            let loss = ntp_loss_var(g, logits, &b.tokens, &b.mask)?;
            let n = b.mask.iter().skip(1).filter(|&&m| m).count() as f64;
            Ok(Some(ExampleLoss { root: loss, weight: n, components: vec![] }))
        })
        .unwrap();
        opt.step(&mut params, &bg.grads).unwrap();
    }
    params
}

#[test]
fn alpha_one_equals_plain_next_token_training() {
    let (start, blocks, optim) = setup(10);
    let cfg = TrainConfig { alpha: 1.0, optim };
    let out = train_mix_cpt(&start, &blocks, &cfg, None).unwrap();
    let plain = Checkpoint::new(plain_ntp_loop(&start, &blocks, &optim), 10, optim.seed);
    assert_eq!(out.checkpoint.hash(), plain.hash());
    assert!(out.metrics.column("lssd").unwrap().iter().all(|v| v.is_nan()));
}

#[test]
fn teacher_is_frozen_and_metrics_are_consistent() {
    let (start, blocks, optim) = setup(8);
    let before = start.hash();
    let teacher = FrozenTeacher::new(start.params.clone());
    let cfg = TrainConfig { alpha: 0.5, optim };
    let out = train_mix_cpt(&start, &blocks, &cfg, None).unwrap();
    assert_eq!(start.hash(), before);
    assert_eq!(teacher.params().tensors(), start.params.tensors());
    assert_ne!(out.checkpoint.hash(), before);
    let ntp = out.metrics.column("ntp").unwrap();
    let lssd = out.metrics.column("lssd").unwrap();
    let total = out.metrics.column("total").unwrap();
    for i in 0..8 {
        assert!(lssd[i] >= -1e-6);
        assert!((total[i] - (0.5 * ntp[i] + 0.5 * lssd[i])).abs() < 1e-9);
    }
    // first step: student equals teacher, so only the swap contributes.
    let direct = {
        let b = &blocks[0];
        let logits = forward(&start.params, &b.tokens).unwrap().logits;
        lssd_loss(&logits, &logits, &b.tokens, &b.mask).unwrap()
    };
    assert!(direct > 0.0);
}

#[test]
fn training_is_thread_count_invariant() {
    let (start, blocks, optim) = setup(4);
    let cfg = TrainConfig { alpha: 0.3, optim };
    let run = |threads| {
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .unwrap()
            .install(|| train_mix_cpt(&start, &blocks, &cfg, None).unwrap().checkpoint.hash())
    };
    assert_eq!(run(1), run(3));
}

#[test]
fn config_errors() {
    let (start, blocks, optim) = setup(1);
    let bad = TrainConfig { alpha: 1.5, optim };
    assert!(matches!(train_mix_cpt(&start, &blocks, &bad, None), Err(Error::Param(_))));
    let cfg = TrainConfig { alpha: 0.5, optim };
    assert!(matches!(train_mix_cpt(&start, &[], &cfg, None), Err(Error::Input(_))));
    let other = Parameters::<f32>::zeros(ModelConfig { d_model: 8, ..*start.config() }).unwrap();
    let teacher = FrozenTeacher::new(other);
    assert!(matches!(teacher.logits(&start.params, &[1, 2]), Err(Error::Param(_))));
}

#[test]
fn metrics_csv_is_written() {
    let (start, blocks, optim) = setup(3);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.csv");
    train_mix_cpt(&start, &blocks, &TrainConfig { alpha: 0.5, optim }, Some(&path)).unwrap();
    let text = std::fs::read_to_string(&path).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "step,ntp,lssd,total");
    assert_eq!(lines.len(), 4);
    assert!(lines[3].starts_with("2,"));
}
