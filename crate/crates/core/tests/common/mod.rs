//! Independent reference implementations used by the integration tests.
#![allow(dead_code)]

use branchlab::milp::{MilpBuilder, MilpInstance, RowSense};
use branchlab::observation::{BipartiteObservation, CONS_FEATURES, VAR_FEATURES};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Optimum of a pure binary program by enumerating every assignment.
pub fn brute_force_binary(inst: &MilpInstance) -> Option<f64> {
    let n = inst.num_vars();
    assert!(n <= 20 && inst.num_int() == n);
    let dense = inst.dense_matrix();
    let mut best: Option<f64> = None;
    let mut x = vec![0.0; n];
    for mask in 0u32..(1 << n) {
        for (j, v) in x.iter_mut().enumerate() {
            *v = f64::from((mask >> j) & 1);
        }
        if (0..n).any(|j| x[j] < inst.lower()[j] || x[j] > inst.upper()[j]) {
            continue;
        }
        let ok = dense.iter().zip(inst.rhs()).all(|(row, b)| row.iter().zip(&x).map(|(a, v)| a * v).sum::<f64>() <= b + 1e-9);
        if ok {
            let obj: f64 = inst.objective().iter().zip(&x).map(|(c, v)| c * v).sum();
            best = Some(best.map_or(obj, |b: f64| b.min(obj)));
        }
    }
    best
}

fn solve_square(mut a: Vec<Vec<f64>>, mut b: Vec<f64>) -> Option<Vec<f64>> {
    let n = b.len();
    for col in 0..n {
        let piv = (col..n).max_by(|&i, &j| a[i][col].abs().total_cmp(&a[j][col].abs()))?;
        if a[piv][col].abs() < 1e-10 {
            return None;
        }
        a.swap(col, piv);
        b.swap(col, piv);
        for r in 0..n {
            if r != col {
                let f = a[r][col] / a[col][col];
                if f != 0.0 {
                    for k in col..n {
                        a[r][k] -= f * a[col][k];
                    }
                    b[r] -= f * b[col];
                }
            }
        }
    }
    Some((0..n).map(|i| b[i] / a[i][i]).collect())
}

/// LP optimum over a bounded polytope by enumerating all basic solutions.
/// `None` when no vertex is feasible.
pub fn vertex_enumeration(inst: &MilpInstance) -> Option<f64> {
    let n = inst.num_vars();
    let mut planes: Vec<(Vec<f64>, f64)> = inst.dense_matrix().into_iter().zip(inst.rhs().iter().copied()).collect();
    for j in 0..n {
        let mut e = vec![0.0; n];
        e[j] = 1.0;
        planes.push((e.clone(), inst.upper()[j]));
        e[j] = -1.0;
        planes.push((e, -inst.lower()[j]));
    }
    let k = planes.len();
    let mut best: Option<f64> = None;
    let mut idx: Vec<usize> = (0..n).collect();
    loop {
        let a = idx.iter().map(|&i| planes[i].0.clone()).collect();
        let b = idx.iter().map(|&i| planes[i].1).collect();
        if let Some(x) = solve_square(a, b) {
            let feasible = planes.iter().all(|(row, rhs)| row.iter().zip(&x).map(|(a, v)| a * v).sum::<f64>() <= rhs + 1e-7);
            if feasible {
                let obj: f64 = inst.objective().iter().zip(&x).map(|(c, v)| c * v).sum();
                best = Some(best.map_or(obj, |b: f64| b.min(obj)));
            }
        }
        // next combination
        let mut i = n;
        loop {
            if i == 0 {
                return best;
            }
            i -= 1;
            if idx[i] < k - n + i {
                idx[i] += 1;
                for t in i + 1..n {
                    idx[t] = idx[t - 1] + 1;
                }
                break;
            }
        }
    }
}

/// Random LP with a finite box, mixed row senses and a feasible planted
/// point.
pub fn random_lp(seed: u64, n: usize, m: usize) -> MilpInstance {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let lower: Vec<f64> = (0..n).map(|_| rng.random_range(-3..=0) as f64).collect();
    let upper: Vec<f64> = lower.iter().map(|l| l + rng.random_range(1..=5) as f64).collect();
    let x0: Vec<f64> = (0..n).map(|j| rng.random_range(lower[j]..=upper[j])).collect();
    let mut b = MilpBuilder::new(format!("lp-{seed}"), n, 0)
        .objective((0..n).map(|_| rng.random_range(-10..=10) as f64).collect())
        .bounds(lower, upper);
    for _ in 0..m {
        let mut coeffs = vec![];
        for j in 0..n {
            let a = rng.random_range(-5..=5) as f64;
            if rng.random_bool(0.7) && a != 0.0 {
                coeffs.push((j, a));
            }
        }
        let act: f64 = coeffs.iter().map(|&(j, a)| a * x0[j]).sum();
        match rng.random_range(0..5) {
            0 => b.push_row(RowSense::Ge, coeffs, act - rng.random_range(0.0..3.0)),
            1 => b.push_row(RowSense::Eq, coeffs, act),
            _ => b.push_row(RowSense::Le, coeffs, act + rng.random_range(0.0..3.0)),
        }
    }
    b.build().unwrap()
}

/// Random pure binary program that always has a feasible point.
pub fn random_binary(seed: u64, n: usize, m: usize) -> MilpInstance {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x0: Vec<f64> = (0..n).map(|_| f64::from(u8::from(rng.random_bool(0.5)))).collect();
    let mut b = MilpBuilder::new(format!("bin-{seed}"), n, n)
        .objective((0..n).map(|_| rng.random_range(-20..=5) as f64).collect())
        .bounds(vec![0.0; n], vec![1.0; n]);
    for _ in 0..m {
        let mut coeffs = vec![];
        for j in 0..n {
            let a = rng.random_range(1..=9) as f64;
            if rng.random_bool(0.6) {
                coeffs.push((j, a));
            }
        }
        let act: f64 = coeffs.iter().map(|&(j, a)| a * x0[j]).sum();
        b.push_row(RowSense::Le, coeffs, act + rng.random_range(0..=6) as f64);
    }
    b.build().unwrap()
}

pub fn random_obs(rng: &mut ChaCha8Rng, n: usize, m: usize, density: f64) -> BipartiteObservation {
    let var_features = (0..n * VAR_FEATURES).map(|_| rng.random_range(-1.0..1.0)).collect();
    let cons_features = (0..m * CONS_FEATURES).map(|_| rng.random_range(-1.0..1.0)).collect();
    let mut edges = vec![];
    for i in 0..m {
        for j in 0..n {
            if rng.random_bool(density) {
                edges.push((i, j, rng.random_range(-1.0..1.0)));
            }
        }
    }
    BipartiteObservation { num_vars: n, num_cons: m, var_features, cons_features, edges }
}

/// Log-softmax of `logits[k]` by direct summation.
pub fn reference_log_softmax(logits: &[f64], k: usize) -> f64 {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let denom: f64 = logits.iter().map(|l| (l - max).exp()).sum();
    logits[k] - max - denom.ln()
}

/// One-sided sign test: probability of at least `wins` successes out of
/// `wins + losses` fair coin flips.
pub fn sign_test_p(wins: usize, losses: usize) -> f64 {
    let n = wins + losses;
    let mut p = 0.0;
    for k in wins..=n {
        let mut c = 1.0f64;
        for i in 0..k {
            c *= (n - i) as f64 / (i + 1) as f64;
        }
        p += c * 0.5f64.powi(n as i32);
    }
    p
}
