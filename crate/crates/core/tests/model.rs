use mixcpt::datapipe::{tokenize, PackOrder, VOCAB_SIZE};
use mixcpt::lssd::train_ntp;
use mixcpt::model::*;
use mixcpt::tensor::{log_softmax_row, Tensor};
use mixcpt::trainer::OptimConfig;
use mixcpt::Error;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn small() -> ModelConfig {
    ModelConfig {
        vocab_size: VOCAB_SIZE,
        d_model: 16,
        n_layers: 2,
        n_heads: 2,
        max_seq_len: 12,
    }
}

fn random_params(config: ModelConfig, std: f64, seed: u64) -> Parameters<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let init = init_parameters(config, seed).unwrap().cast::<f64>();
    let tensors = init
        .tensors()
        .iter()
        .map(|t| {
            let data = t.data().iter().map(|_| rng.gen_range(-std..std)).collect();
            Tensor::new(t.shape(), data).unwrap()
        })
        .collect();
    Parameters::from_tensors(config, tensors).unwrap()
}

#[test]
fn init_is_deterministic_and_seed_sensitive() {
    let a = init_parameters(small(), 7).unwrap();
    let b = init_parameters(small(), 7).unwrap();
    let c = init_parameters(small(), 8).unwrap();
    assert_eq!(a.tensors(), b.tensors());
    assert_ne!(a.tensors(), c.tensors());
}

#[test]
fn init_statistics() {
    let p = init_parameters(ModelConfig::default(), 0).unwrap();
    let w = p.token_embedding().data();
    let n = w.len() as f64;
    let mean = w.iter().map(|&x| x as f64).sum::<f64>() / n;
    let std = (w.iter().map(|&x| (x as f64 - mean).powi(2)).sum::<f64>() / n).sqrt();
    assert!(mean.abs() < 1e-3, "mean {mean}");
    assert!((std - 0.02).abs() < 1e-3, "std {std}");
    for (name, t) in p.names().iter().zip(p.tensors()) {
        if name.ends_with(".gain") {
            assert!(t.data().iter().all(|&x| x == 1.0));
        } else if name.ends_with(".bias") {
            assert!(t.data().iter().all(|&x| x == 0.0));
        }
    }
}

#[test]
fn parameter_count_matches_shapes() {
    let c = ModelConfig::default();
    let d = c.d_model;
    let expected = c.vocab_size * d + c.max_seq_len * d + c.n_layers * (4 * d + 4 * d * d + 8 * d * d) + 2 * d;
    assert_eq!(c.parameter_count(), expected);
    assert_eq!(init_parameters(c, 0).unwrap().num_params(), expected);
}

#[test]
fn forward_shapes_and_errors() {
    let p = init_parameters(small(), 0).unwrap();
    let t = forward(&p, &[1, 2, 3]).unwrap();
    assert_eq!(t.logits.shape(), &[3, VOCAB_SIZE]);
    assert_eq!(t.hidden.shape(), &[3, 16]);
    assert!(matches!(forward(&p, &[]), Err(Error::Input(_))));
    assert!(matches!(forward(&p, &[0; 13]), Err(Error::ExceedsContext { len: 13, max: 12 })));
    assert!(matches!(forward(&p, &[VOCAB_SIZE]), Err(Error::Input(_))));
}

#[test]
fn logits_are_hidden_times_embedding_transpose() {
    let p = init_parameters(small(), 3).unwrap();
    let t = forward(&p, &[5, 9, 100]).unwrap();
    let w = p.token_embedding();
    for r in 0..3 {
        for v in 0..VOCAB_SIZE {
            let dot: f64 = t.hidden.row(r).iter().zip(w.row(v)).map(|(&a, &b)| a as f64 * b as f64).sum();
            assert!((dot - t.logits.row(r)[v] as f64).abs() < 1e-5);
        }
    }
}

#[test]
fn future_tokens_do_not_change_past_logits() {
    let p = init_parameters(small(), 1).unwrap();
    let a = forward(&p, &[10, 20, 30, 40, 50]).unwrap();
    let b = forward(&p, &[10, 20, 30, 99, 7]).unwrap();
    for r in 0..3 {
        assert_eq!(a.logits.row(r), b.logits.row(r));
    }
    assert_ne!(a.logits.row(3), b.logits.row(3));
    let prefix = forward(&p, &[10, 20, 30]).unwrap();
    assert_eq!(prefix.logits.data(), &a.logits.data()[..3 * VOCAB_SIZE]);
}

#[test]
fn zero_model_is_uniform() {
    let p = Parameters::<f64>::zeros(small()).unwrap();
    let tokens = tokenize("hello");
    let t = forward(&p, &tokens).unwrap();
    assert!(t.logits.data().iter().all(|&x| x == 0.0));
    let loss = ntp_loss(&t, &tokens, &[true; 5]).unwrap();
    assert!((loss - (VOCAB_SIZE as f64).ln()).abs() < 1e-12);
}

#[test]
fn ntp_loss_matches_explicit_loop() {
    let p = random_params(small(), 0.3, 5);
    let tokens = vec![3, 7, 256, 100, 7, 7, 42];
    let mask = vec![true, true, false, true, true, true, true];
    let t = forward(&p, &tokens).unwrap();
    let mut total = 0.0;
    let mut n = 0;
    for j in 0..tokens.len() - 1 {
        if mask[j + 1] {
            total -= log_softmax_row(t.logits.row(j))[tokens[j + 1]];
            n += 1;
        }
    }
    let got = ntp_loss(&t, &tokens, &mask).unwrap();
    assert!((got - total / n as f64).abs() < 1e-12, "{got} vs {}", total / n as f64);
}

#[test]
fn ntp_loss_rejects_short_or_unmasked_input() {
    let p = init_parameters(small(), 0).unwrap();
    let t = forward(&p, &[1]).unwrap();
    assert!(matches!(ntp_loss(&t, &[1], &[true]), Err(Error::Input(_))));
    let t = forward(&p, &[1, 2]).unwrap();
    assert!(matches!(ntp_loss(&t, &[1, 2], &[true, false]), Err(Error::EmptyLossSupport)));
}

#[test]
fn full_model_passes_grad_check() {
    let p = random_params(small(), 0.3, 11);
    let tokens = vec![72, 101, 108, 108, 111, 256, 87, 111];
    let mut mask = vec![true; tokens.len()];
    mask[5] = false;
    let reports = grad_check_model(&p, &tokens, &mask, 1e-4).unwrap();
    assert_eq!(reports.len(), p.tensors().len());
    for r in &reports {
        assert!(r.max_relative_error < 1e-3, "{r:?}");
    }
}

#[test]
fn checkpoint_round_trip_is_bitwise() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    let ck = Checkpoint::new(init_parameters(small(), 4).unwrap(), 17, 4);
    save_checkpoint(&path, &ck).unwrap();
    let back = load_checkpoint(&path).unwrap();
    assert_eq!(back.step, 17);
    assert_eq!(back.seed, 4);
    assert_eq!(back.hash(), ck.hash());
    let tokens = [1, 2, 3, 4];
    assert_eq!(forward(&ck.params, &tokens).unwrap().logits, forward(&back.params, &tokens).unwrap().logits);
    let len = std::fs::metadata(&path).unwrap().len() as usize;
    assert_eq!(len, HEADER_LEN + 4 * small().parameter_count());
}

#[test]
fn corrupted_checkpoints_are_rejected() {
    let ck = Checkpoint::new(init_parameters(small(), 4).unwrap(), 0, 0);
    let bytes = ck.to_bytes();

    let mut bad_magic = bytes.clone();
    bad_magic[0] ^= 0xff;
    assert!(matches!(Checkpoint::from_bytes(&bad_magic), Err(Error::Format(_))));

    let mut bad_version = bytes.clone();
    bad_version[8] = 9;
    assert!(matches!(Checkpoint::from_bytes(&bad_version), Err(Error::Format(_))));

    let mut bad_config = bytes.clone();
    bad_config[12..16].copy_from_slice(&0u32.to_le_bytes());
    assert!(matches!(Checkpoint::from_bytes(&bad_config), Err(Error::Format(_))));

    assert!(matches!(Checkpoint::from_bytes(&bytes[..HEADER_LEN - 1]), Err(Error::Format(_))));
    assert!(matches!(Checkpoint::from_bytes(&bytes[..bytes.len() - 4]), Err(Error::Format(_))));
    let mut longer = bytes.clone();
    longer.extend([0; 4]);
    assert!(matches!(Checkpoint::from_bytes(&longer), Err(Error::Format(_))));
}

#[test]
fn greedy_decode_respects_limits() {
    let p = init_parameters(small(), 2).unwrap();
    let out = greedy_decode(&p, &[1, 2, 3], 4, usize::MAX).unwrap();
    assert_eq!(out.len(), 4);
    let out = greedy_decode(&p, &[1; 10], 100, usize::MAX).unwrap();
    assert_eq!(out.len(), 2);
    assert_eq!(greedy_decode(&p, &[1, 2], 0, usize::MAX).unwrap(), Vec::<usize>::new());
    let again = greedy_decode(&p, &[1, 2, 3], 4, usize::MAX).unwrap();
    assert_eq!(again, greedy_decode(&p, &[1, 2, 3], 4, usize::MAX).unwrap());
}

#[test]
fn greedy_decode_stops_before_stop_token() {
    // Zero weights: uniform logits, argmax is token 0 on every step.
    let p = Parameters::<f32>::zeros(small()).unwrap();
    assert_eq!(greedy_decode(&p, &[5], 3, 0).unwrap(), Vec::<usize>::new());
    assert_eq!(greedy_decode(&p, &[5], 3, 1).unwrap(), vec![0, 0, 0]);
}

#[test]
fn learns_to_repeat_a_fixed_string() {
    let config = ModelConfig {
        d_model: 32,
        n_layers: 1,
        n_heads: 2,
        max_seq_len: 16,
        ..small()
    };
    let text = "abcabcabcabcabca";
    let tokens = tokenize(text);
    let blocks = mixcpt::datapipe::pack_blocks(
        &[mixcpt::datapipe::UnifiedSample {
            tokens: tokens[..15].to_vec(),
            source: mixcpt::datapipe::RecordKind::Cpt,
        }],
        16,
        0,
        PackOrder::InOrder,
    )
    .unwrap();
    let start = Checkpoint::new(init_parameters(config, 0).unwrap(), 0, 0);
    let optim = OptimConfig {
        lr: 0.3,
        steps: 150,
        batch_size: 1,
        ..OptimConfig::default()
    };
    let out = train_ntp(&start, &blocks, &optim, None).unwrap();
    let ntp = out.metrics.column("ntp").unwrap();
    assert!(ntp.last().unwrap() < &0.1, "final loss {}", ntp.last().unwrap());
    let cont = greedy_decode(&out.checkpoint.params, &tokenize("abca"), 5, usize::MAX).unwrap();
    assert_eq!(cont, tokenize("bcabc"));
}

#[test]
fn sgd_descends_on_a_fixed_batch() {
    let p = init_parameters(small(), 9).unwrap();
    let tokens = tokenize("the cat sat");
    let start = Checkpoint::new(p, 0, 0);
    let blocks = vec![mixcpt::datapipe::PackedBlock {
        mask: vec![true; tokens.len()],
        tokens,
    }];
    let optim = OptimConfig {
        lr: 0.1,
        steps: 30,
        batch_size: 1,
        ..OptimConfig::default()
    };
    let out = train_ntp(&start, &blocks, &optim, None).unwrap();
    let ntp = out.metrics.column("ntp").unwrap();
    assert!(ntp[29] < ntp[0] * 0.8, "{} -> {}", ntp[0], ntp[29]);
    assert_eq!(out.checkpoint.step, 30);
}
