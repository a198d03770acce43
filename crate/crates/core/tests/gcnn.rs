mod common;

use std::sync::Arc;

use branchlab::gcnn::*;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn batch(seed: u64) -> Vec<Sample> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..3)
        .map(|k| {
            let n = 4 + k;
            let obs = Arc::new(common::random_obs(&mut rng, n, 3, 0.6));
            let candidates: Vec<usize> = (0..n).filter(|j| j % 2 == k % 2 || *j == 0).collect();
            let action = candidates[rng.random_range(0..candidates.len())];
            Sample { obs, candidates, action, target: 0.0 }
        })
        .collect()
}

fn fd_check(params: &GcnnParams, data: &[Sample], head: Head, seed: u64) -> f64 {
    let (_, grad) = loss_and_grad(params, data, head).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let h = 1e-5;
    let mut worst: f64 = 0.0;
    for _ in 0..50 {
        let k = rng.random_range(0..params.len());
        let mut plus = params.clone();
        plus.values[k] += h;
        let mut minus = params.clone();
        minus.values[k] -= h;
        let fd = (loss_and_grad(&plus, data, head).unwrap().0 - loss_and_grad(&minus, data, head).unwrap().0) / (2.0 * h);
        let rel = (fd - grad[k]).abs() / (fd.abs().max(grad[k].abs()).max(1e-6));
        worst = worst.max(rel);
    }
    worst
}

#[test]
fn policy_gradient_matches_finite_differences() {
    let params = GcnnParams::init(HIDDEN, 11);
    let worst = fd_check(&params, &batch(2), Head::Policy, 5);
    assert!(worst < 1e-4, "relative error {worst}");
}

#[test]
fn value_gradient_matches_finite_differences() {
    let params = GcnnParams::init(HIDDEN, 12);
    let mut data = batch(3);
    for (k, s) in data.iter_mut().enumerate() {
        let (_, v) = gcnn_forward(&params, &s.obs, &s.candidates).unwrap();
        // Alternate sides of the kink, well away from it.
        s.target = if k % 2 == 0 { v + 0.5 } else { v - 0.5 };
    }
    let worst = fd_check(&params, &data, Head::Value { k: 1000.0, lambda: 1e-2 }, 6);
    assert!(worst < 1e-4, "relative error {worst}");
}

fn permuted_case(seed: u64) -> (GcnnParams, branchlab::observation::BipartiteObservation, Vec<usize>, Vec<usize>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = rng.random_range(2..12);
    let m = rng.random_range(1..6);
    let obs = common::random_obs(&mut rng, n, m, 0.5);
    let cands: Vec<usize> = (0..n).filter(|_| rng.random_bool(0.6)).collect();
    let cands = if cands.is_empty() { vec![0] } else { cands };
    let mut perm: Vec<usize> = (0..n).collect();
    rand::seq::SliceRandom::shuffle(&mut perm[..], &mut rng);
    (GcnnParams::init(HIDDEN, seed), obs, cands, perm)
}

#[test]
fn forward_is_permutation_equivariant() {
    for seed in 0..100 {
        let (params, obs, cands, perm) = permuted_case(seed);
        let mut inverse = vec![0; perm.len()];
        for (new, &old) in perm.iter().enumerate() {
            inverse[old] = new;
        }
        let moved = obs.permute_vars(&perm);
        let moved_cands: Vec<usize> = cands.iter().map(|&j| inverse[j]).collect();
        let (a, va) = gcnn_forward(&params, &obs, &cands).unwrap();
        let (b, vb) = gcnn_forward(&params, &moved, &moved_cands).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() <= 1e-6, "seed {seed}: logit {x} vs {y}");
        }
        assert!((va - vb).abs() <= 1e-6, "seed {seed}: value {va} vs {vb}");
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn softmax_is_normalized(logits in prop::collection::vec(-700.0f64..700.0, 1..40)) {
        let p = masked_softmax(&logits);
        prop_assert!((p.iter().sum::<f64>() - 1.0).abs() <= 1e-9);
        for (k, &pk) in p.iter().enumerate() {
            prop_assert!(pk >= 0.0);
            prop_assert!((pk.ln() - common::reference_log_softmax(&logits, k)).abs() <= 1e-9 || pk < 1e-300);
        }
    }

    #[test]
    fn network_probabilities_are_normalized(seed in any::<u64>()) {
        let (params, obs, cands, _) = permuted_case(seed);
        let (logits, value) = gcnn_forward(&params, &obs, &cands).unwrap();
        prop_assert_eq!(logits.len(), cands.len());
        prop_assert!(value.is_finite());
        prop_assert!((masked_softmax(&logits).iter().sum::<f64>() - 1.0).abs() <= 1e-9);
        prop_assert!(cands.contains(&predict_branch(&params, &obs, &cands).unwrap()));
    }
}

#[test]
fn small_steps_never_increase_the_loss() {
    let data = batch(21);
    let cfg = TrainConfig { learning_rate: 1e-4, batch_size: data.len(), epochs: 40, seed: 4, checkpoint_every: 40, hidden: HIDDEN };
    let out = train_policy(&data, &[], &cfg).unwrap();
    for w in out.curve.windows(2) {
        assert!(w[1].train_loss <= w[0].train_loss + 1e-12, "epoch {}: {} -> {}", w[1].epoch, w[0].train_loss, w[1].train_loss);
    }
}

#[test]
fn memorizes_a_tiny_dataset() {
    let data = batch(8);
    let cfg = TrainConfig { learning_rate: 0.1, batch_size: 4, epochs: 300, seed: 1, checkpoint_every: 300, hidden: HIDDEN };
    let out = train_policy(&data, &data, &cfg).unwrap();
    let params = &out.checkpoints.last().unwrap().params;
    for s in &data {
        assert_eq!(predict_branch(params, &s.obs, &s.candidates).unwrap(), s.action);
    }
    assert!(out.curve.last().unwrap().train_loss < 0.05);
}

#[test]
fn training_is_deterministic() {
    let data: Vec<Sample> = (0..6).flat_map(batch).collect();
    let cfg = TrainConfig { epochs: 4, checkpoint_every: 2, batch_size: 5, ..Default::default() };
    assert_eq!(train_policy(&data, &data[..3], &cfg).unwrap(), train_policy(&data, &data[..3], &cfg).unwrap());
}

#[test]
fn checkpoint_and_loss_csv_roundtrip() {
    let params = GcnnParams::init(HIDDEN, 99);
    let mut buf = Vec::new();
    write_checkpoint(&mut buf, &params, 12, "cafe:3").unwrap();
    let back = read_checkpoint(&buf[..]).unwrap();
    assert_eq!((back.params, back.epoch, back.tag.as_str()), (params, 12, "cafe:3"));
    buf.truncate(buf.len() - 3);
    assert!(read_checkpoint(&buf[..]).is_err());

    let curve = vec![
        EpochLoss { epoch: 0, train_loss: 1.5, valid_loss: Some(1.25) },
        EpochLoss { epoch: 1, train_loss: 0.1 + 0.2, valid_loss: None },
    ];
    let mut csv = Vec::new();
    write_loss_csv(&mut csv, &curve).unwrap();
    assert_eq!(read_loss_csv(std::str::from_utf8(&csv).unwrap()).unwrap(), curve);
}
