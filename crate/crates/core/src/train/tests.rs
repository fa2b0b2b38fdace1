use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::data::{synthetic_pairs, Task, EOS};
use crate::model::ModelConfig;
use crate::nn::ParamStore;

fn lp_from(probs: &[f64], shape: Vec<usize>) -> Tensor<f64> {
    Tensor::from_vec(shape, probs.iter().map(|p| p.ln()).collect()).unwrap()
}

#[test]
fn nll_of_uniform_is_log_vocab() {
    let v = 7;
    let lp = lp_from(&vec![1.0 / v as f64; 2 * 3 * v], vec![2, 3, v]);
    let loss = nll_loss(&lp, &[4, 5, 6, 1, 2, 0], PAD).unwrap().item().unwrap();
    assert!((loss - (v as f64).ln()).abs() < 1e-12);
}

#[test]
fn nll_of_confident_correct_is_near_zero() {
    let mut probs = vec![1e-12; 3];
    probs[2] = 1.0 - 2e-12;
    let loss = nll_loss(&lp_from(&probs, vec![1, 1, 3]), &[2], PAD).unwrap().item().unwrap();
    assert!(loss < 1e-10);
}

#[test]
fn nll_hand_case_excludes_padding() {
    let probs = [
        0.2, 0.3, 0.5, //
        0.1, 0.6, 0.3, //
        0.7, 0.2, 0.1, //
        0.25, 0.25, 0.5,
    ];
    let lp = lp_from(&probs, vec![2, 2, 3]);
    let loss = nll_loss(&lp, &[2, 1, 1, 0], PAD).unwrap().item().unwrap();
    let want = -(0.5f64.ln() + 0.6f64.ln() + 0.2f64.ln()) / 3.0;
    assert!((loss - want).abs() < 1e-12);
    assert!(matches!(nll_loss(&lp, &[0, 0, 0, 0], PAD), Err(Error::EmptyBatch)));
}

#[test]
fn accuracy_counts_argmax_hits() {
    let lp = lp_from(&[0.2, 0.3, 0.5, 0.6, 0.3, 0.1, 0.1, 0.8, 0.1], vec![1, 3, 3]);
    assert_eq!(token_accuracy(&lp, &[2, 1, 0], PAD), (1, 2));
}

fn scalar_store(p: f64) -> ParamStore<f64> {
    let mut s = ParamStore::new();
    s.add("p", Tensor::from_vec(vec![1], vec![p]).unwrap()).unwrap();
    s
}

fn value(s: &ParamStore<f64>) -> f64 {
    s.get(s.ids().next().unwrap()).data()[0]
}

#[test]
fn nag_without_momentum_is_sgd() {
    let mut s = scalar_store(1.0);
    let mut nag = Nag::new(0.1, 0.0, None, &s).unwrap();
    nag.step(&mut s, &[vec![3.0]]).unwrap();
    assert!((value(&s) - 0.7).abs() < 1e-15);
}

#[test]
fn nag_zero_lr_leaves_params() {
    let mut s = scalar_store(1.0);
    let mut nag = Nag::new(0.0, 0.9, None, &s).unwrap();
    for _ in 0..3 {
        nag.step(&mut s, &[vec![5.0]]).unwrap();
    }
    assert_eq!(value(&s), 1.0);
}

/// Classical look-ahead NAG: the gradient is taken at `theta + mu v`.
/// Tracking `p = theta + mu v` gives the stored-parameter form.
#[test]
fn nag_matches_lookahead_oracle_on_quadratic() {
    let (lr, mu) = (0.1, 0.9);
    let grad = |x: f64| 2.0 * x;
    let (mut theta, mut v) = (1.0f64, 0.0f64);
    let mut oracle = Vec::new();
    for _ in 0..2 {
        v = mu * v - lr * grad(theta + mu * v);
        theta += v;
        oracle.push(theta + mu * v);
    }
    let mut s = scalar_store(1.0);
    let mut nag = Nag::new(lr, mu, None, &s).unwrap();
    for want in oracle {
        let g = grad(value(&s));
        nag.step(&mut s, &[vec![g]]).unwrap();
        assert!((value(&s) - want).abs() < 1e-14, "{} vs {want}", value(&s));
    }
    // p1 = 1 - 1.9 * 0.2 = 0.62; v1 = -0.2; p2 = 0.62 + 0.81 * -0.2 - 1.9 * 0.1 * 1.24
    assert!((value(&s) - (0.62 - 0.162 - 0.2356)).abs() < 1e-14);
}

#[test]
fn nag_rejects_non_finite_gradients_without_update() {
    let mut s = scalar_store(1.0);
    let mut nag = Nag::new(0.1, 0.9, None, &s).unwrap();
    let err = nag.step(&mut s, &[vec![f64::NAN]]).unwrap_err();
    assert!(matches!(err, Error::NonFinite(ref m) if m.contains("gradient of p")));
    assert_eq!(value(&s), 1.0);
    assert_eq!(nag.velocity()[0], vec![0.0]);
}

#[test]
fn nag_clips_global_norm() {
    let mut s = ParamStore::<f64>::new();
    s.add("a", Tensor::from_vec(vec![1], vec![0.0]).unwrap()).unwrap();
    s.add("b", Tensor::from_vec(vec![1], vec![0.0]).unwrap()).unwrap();
    let mut nag = Nag::new(1.0, 0.0, Some(1.0), &s).unwrap();
    let info = nag.step(&mut s, &[vec![3.0], vec![4.0]]).unwrap();
    assert!(info.clipped && (info.grad_norm - 5.0).abs() < 1e-12);
    let vals: Vec<f64> = s.iter().map(|(_, t)| t.data()[0]).collect();
    assert!((vals[0] + 0.6).abs() < 1e-12 && (vals[1] + 0.8).abs() < 1e-12);
    assert!(Nag::new(0.1, 1.0, None, &s).is_err());
    assert!(Nag::new(-0.1, 0.5, None, &s).is_err());
}

#[test]
fn schedule_examples() {
    let run = |losses: &[f64]| {
        let mut lr = 0.25;
        let mut s = LrSchedule::new(10.0, 1);
        for &l in losses {
            s.observe(&mut lr, l);
        }
        lr
    };
    assert_eq!(run(&[3.0, 2.5, 2.0]), 0.25);
    assert!((run(&[2.0, 2.1]) - 0.025).abs() < 1e-15);
    assert!((run(&[2.0, 2.1, 2.05]) - 0.0025).abs() < 1e-15);
    let mut lr = 1.0;
    let mut s = LrSchedule::new(10.0, 2);
    assert!(!s.observe(&mut lr, 1.0));
    assert!(!s.observe(&mut lr, 1.0));
    assert!(s.observe(&mut lr, 1.5));
    assert_eq!(lr, 0.1);
}

fn pair(s: usize, t: usize) -> Pair {
    Pair::new(vec![4; s], vec![5; t])
}

#[test]
fn batching_examples() {
    let pairs = vec![pair(10, 10), pair(10, 10), pair(10, 10)];
    assert_eq!(make_batches(&pairs, 100, 0).len(), 1);
    let batches = make_batches(&pairs, 1, 0);
    assert_eq!(batches.len(), 3);
    assert!(batches.iter().all(|b| b.len() == 1));
    let mut all: Vec<usize> = batches.concat();
    all.sort();
    assert_eq!(all, vec![0, 1, 2]);
}

fn random_corpus(n: usize, seed: u64) -> Vec<Pair> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| pair(rng.random_range(1..40), rng.random_range(1..40))).collect()
}

#[test]
fn sorted_batching_pads_less_than_random() {
    let pairs = random_corpus(1000, 3);
    let sorted: usize = make_batches(&pairs, 800, 1).iter().map(|b| padded_size(&pairs, b)).sum();
    let mut order: Vec<usize> = (0..pairs.len()).collect();
    rand::seq::SliceRandom::shuffle(&mut order[..], &mut ChaCha8Rng::seed_from_u64(1));
    let random: usize = pack(&pairs, &order, 800).iter().map(|b| padded_size(&pairs, b)).sum();
    assert!(sorted <= random, "{sorted} > {random}");
}

proptest! {
    #[test]
    fn batches_partition_and_respect_budget(n in 1usize..120, budget in 1usize..300, seed in 0u64..50) {
        let pairs = random_corpus(n, seed);
        let batches = make_batches(&pairs, budget, seed);
        let mut all: Vec<usize> = batches.concat();
        all.sort();
        prop_assert_eq!(all, (0..n).collect::<Vec<_>>());
        for b in &batches {
            prop_assert!(b.len() == 1 || padded_size(&pairs, b) <= budget);
        }
        prop_assert_eq!(make_batches(&pairs, budget, seed), batches);
    }

    #[test]
    fn sgd_decreases_convex_quadratic(p0 in -5.0f64..5.0, lr in 0.001f64..0.4) {
        prop_assume!(p0.abs() > 1e-6);
        let mut s = scalar_store(p0);
        let mut nag = Nag::new(lr, 0.0, None, &s).unwrap();
        nag.step(&mut s, &[vec![2.0 * p0]]).unwrap();
        prop_assert!(value(&s).powi(2) < p0 * p0);
    }
}

fn toy_model(seed: u64, dropout: f64) -> Dpn<f32> {
    let config = ModelConfig {
        d: 16,
        d_ff: 32,
        heads: 2,
        max_len: 12,
        dropout,
        ..ModelConfig::tiny(10, 10)
    };
    Dpn::new(config, seed).unwrap()
}

fn toy_data() -> (Vec<Pair>, Vec<Pair>) {
    (
        synthetic_pairs(Task::Copy, 64, 6, 1..=6, 11).unwrap(),
        synthetic_pairs(Task::Copy, 16, 6, 1..=6, 12).unwrap(),
    )
}

fn toy_config() -> TrainConfig {
    TrainConfig {
        lr: 0.05,
        clip: Some(1.0),
        max_tokens: 120,
        max_steps: Some(24),
        validate_every: Some(5),
        log_every: 1,
        seed: 7,
        ..TrainConfig::default()
    }
}

fn losses(trainer: &mut Trainer, train: &[Pair], valid: &[Pair], dir: Option<&Path>) -> Vec<(usize, u64)> {
    let mut out = Vec::new();
    trainer
        .run(
            train,
            valid,
            &mut |r| {
                if let LogRecord::Train { step, loss, .. } = r {
                    out.push((*step, loss.to_bits()));
                }
                Ok(())
            },
            dir,
        )
        .unwrap();
    out
}

#[test]
fn batch_of_copies_has_single_pair_loss() {
    let model = toy_model(1, 0.0);
    let p = Pair::new(vec![4, 5, 6], vec![6, 5]);
    let params = model.params.bind(None);
    let loss_of = |rows: &[&Pair]| {
        let b = Batch::from_pairs(rows).unwrap();
        let lp = model.forward(&params, &b.src, &b.src_lengths, &b.tgt_in, &mut ForwardCtx::eval()).unwrap();
        nll_loss(&lp, &b.tgt_out, PAD).unwrap().item().unwrap()
    };
    let one = loss_of(&[&p]);
    let four = loss_of(&[&p, &p, &p, &p]);
    assert!((one - four).abs() < 1e-6, "{one} vs {four}");
}

#[test]
fn zero_lr_keeps_loss_constant() {
    let (train, _) = toy_data();
    let config = TrainConfig {
        lr: 0.0,
        max_tokens: 10_000,
        validate_every: None,
        ..toy_config()
    };
    let mut t = Trainer::new(toy_model(2, 0.0), config).unwrap();
    let l = losses(&mut t, &train, &[], None);
    assert!(l.len() > 3);
    // Each epoch is one batch whose row order is reshuffled, so only the
    // summation order changes.
    let first = f64::from_bits(l[0].1);
    assert!(l.iter().all(|&(_, b)| (f64::from_bits(b) - first).abs() < 1e-6 * first));
}

#[test]
fn fixed_seed_runs_are_bit_identical() {
    let (train, valid) = toy_data();
    let a = losses(&mut Trainer::new(toy_model(3, 0.1), toy_config()).unwrap(), &train, &valid, None);
    let b = losses(&mut Trainer::new(toy_model(3, 0.1), toy_config()).unwrap(), &train, &valid, None);
    assert_eq!(a.len(), 24);
    assert_eq!(a, b);
    let c = losses(
        &mut Trainer::new(toy_model(3, 0.1), TrainConfig { seed: 8, ..toy_config() }).unwrap(),
        &train,
        &valid,
        None,
    );
    assert_ne!(a, c);
}

#[test]
fn resume_mid_epoch_reproduces_trajectory() {
    let (train, valid) = toy_data();
    let full = losses(&mut Trainer::new(toy_model(4, 0.1), toy_config()).unwrap(), &train, &valid, None);

    let dir = tempfile::tempdir().unwrap();
    let mut first = Trainer::new(toy_model(4, 0.1), TrainConfig { max_steps: Some(13), ..toy_config() }).unwrap();
    let head = losses(&mut first, &train, &valid, Some(dir.path()));
    assert_ne!(first.state.batch_in_epoch, 0, "stop should fall inside an epoch");
    let ck = Checkpoint::load(&dir.path().join("last.ckpt")).unwrap();
    let mut resumed = Trainer::from_checkpoint(&ck, Some(toy_config())).unwrap();
    assert_eq!(resumed.state, first.state);
    let tail = losses(&mut resumed, &train, &valid, None);
    assert_eq!([head, tail].concat(), full);
    assert!(dir.path().join("best.ckpt").exists());
}

#[test]
fn checkpoint_round_trip_then_step_is_exact() {
    let (train, _) = toy_data();
    let rows: Vec<&Pair> = train.iter().take(5).collect();
    let batch = Batch::from_pairs(&rows).unwrap();
    let mut t = Trainer::new(toy_model(5, 0.1), toy_config()).unwrap();
    t.train_step(&batch).unwrap();
    let ck = Checkpoint::from_bytes(&t.to_checkpoint().to_bytes()).unwrap();
    let mut back = Trainer::from_checkpoint(&ck, None).unwrap();
    assert_eq!(back.config, t.config);
    let a = t.train_step(&batch).unwrap();
    let b = back.train_step(&batch).unwrap();
    assert_eq!(a.loss.to_bits(), b.loss.to_bits());
    for ((_, x), (_, y)) in t.model.params.iter().zip(back.model.params.iter()) {
        assert_eq!(x.data(), y.data());
    }
}

#[test]
fn non_finite_loss_aborts_and_keeps_checkpoint() {
    let (train, valid) = toy_data();
    let dir = tempfile::tempdir().unwrap();
    let mut t = Trainer::new(toy_model(6, 0.0), TrainConfig { max_steps: Some(5), ..toy_config() }).unwrap();
    losses(&mut t, &train, &valid, Some(dir.path()));
    let saved = std::fs::read(dir.path().join("last.ckpt")).unwrap();
    let id = t.model.params.ids().last().unwrap();
    let shape = t.model.params.get(id).shape().to_vec();
    let n = t.model.params.get(id).numel();
    t.model.params.set(id, Tensor::from_vec(shape, vec![f32::NAN; n]).unwrap()).unwrap();
    t.config.max_steps = Some(10);
    let err = t.run(&train, &valid, &mut |_| Ok(()), Some(dir.path())).unwrap_err();
    assert!(matches!(err, Error::NonFinite(_)), "{err}");
    assert_eq!(std::fs::read(dir.path().join("last.ckpt")).unwrap(), saved);
}

#[test]
fn training_lowers_copy_loss() {
    let (train, valid) = toy_data();
    let model = toy_model(9, 0.0);
    let before = evaluate(&model, &valid, 400).unwrap();
    let mut t = Trainer::new(model, TrainConfig { max_steps: Some(60), validate_every: None, ..toy_config() }).unwrap();
    t.config.lr = 0.1;
    t.state.lr = 0.1;
    losses(&mut t, &train, &valid, None);
    let after = evaluate(&t.model, &valid, 400).unwrap();
    assert!(after.loss < before.loss, "{} -> {}", before.loss, after.loss);
    assert!(after.tokens == valid.iter().map(|p| p.tgt.len()).sum::<usize>());
    assert!(valid.iter().all(|p| *p.tgt.last().unwrap() == EOS));
}

#[test]
fn log_records_are_jsonl() {
    let mut buf = Vec::new();
    {
        let mut sink = jsonl_sink(&mut buf);
        sink(&LogRecord::Valid {
            step: 3,
            epoch: 0,
            loss: 1.5,
            accuracy: 0.5,
            lr: 0.25,
            best: true,
            elapsed: 0.1,
        })
        .unwrap();
    }
    let line = String::from_utf8(buf).unwrap();
    assert!(line.ends_with('\n'));
    let back: LogRecord = serde_json::from_str(line.trim()).unwrap();
    assert!(matches!(back, LogRecord::Valid { step: 3, best: true, .. }));
    assert!(line.contains("\"kind\":\"valid\""));
}
