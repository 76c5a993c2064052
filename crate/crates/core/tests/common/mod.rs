//! Shared fixtures and brute-force oracles for the integration tests.
#![allow(dead_code)]

use capo_core::{ChainTask, Environment, PolicyParams, ReferencePolicy, Trajectory};
use rand::Rng;
use rand_distr::{Distribution, Normal};

pub fn random_params<R: Rng>(rng: &mut R, rows: usize, k: usize, scale: f64) -> PolicyParams {
    let logits = (0..rows * k).map(|_| rng.random_range(-scale..scale)).collect();
    PolicyParams::from_flat(rows, k, logits).unwrap()
}

pub fn random_chain<R: Rng>(rng: &mut R) -> Environment {
    let c = rng.random_range(1..4);
    let k = rng.random_range(2..5);
    let t = rng.random_range(2..5);
    ChainTask::new(c, k, t).unwrap().into()
}

/// Rollouts under `behavior` with Gaussian token advantages.
pub fn random_batch<R: Rng>(
    rng: &mut R,
    env: &Environment,
    behavior: &PolicyParams,
    n: usize,
) -> Vec<Trajectory> {
    let normal = Normal::new(0.0, 1.0).unwrap();
    (0..n)
        .map(|_| {
            let c = rng.random_range(0..env.num_contexts());
            let mut t = env.rollout(behavior, c, rng).unwrap();
            let adv = (0..t.len()).map(|_| normal.sample(rng)).collect();
            t.set_advantages(adv).unwrap();
            t
        })
        .collect()
}

/// `params` nudged away from `base` so importance ratios differ from 1.
pub fn perturbed<R: Rng>(rng: &mut R, base: &PolicyParams, scale: f64) -> PolicyParams {
    let mut p = base.clone();
    for x in p.logits_mut() {
        *x += rng.random_range(-scale..scale);
    }
    p
}

fn log_softmax(row: &[f64]) -> Vec<f64> {
    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + row.iter().map(|x| (x - m).exp()).sum::<f64>().ln();
    row.iter().map(|x| x - lse).collect()
}

fn kl_row(p: &[f64], q: &[f64]) -> f64 {
    let lp = log_softmax(p);
    let lq = log_softmax(q);
    lp.iter().zip(&lq).map(|(a, b)| a.exp() * (a - b)).sum()
}

/// Straight transcription of the clipped surrogate with a KL anchor.
pub fn objective_oracle(
    batch: &[Trajectory],
    keep: &dyn Fn(&Trajectory) -> bool,
    params: &PolicyParams,
    reference: &ReferencePolicy,
    epsilon: f64,
    beta: f64,
) -> f64 {
    let mut total = 0.0;
    for traj in batch.iter().filter(|t| keep(t)) {
        let adv = traj.advantage_tokens.as_ref().unwrap();
        let mut s = 0.0;
        for t in 0..traj.len() {
            let lp = log_softmax(params.row(traj.context_ids[t]))[traj.actions[t]];
            let rho = (lp - traj.behavior_logps[t]).exp();
            let a = adv[t];
            s += (rho * a).min(rho.clamp(1.0 - epsilon, 1.0 + epsilon) * a);
        }
        total += s / traj.len() as f64;
    }
    let mut rows: Vec<usize> = batch.iter().flat_map(|t| t.context_ids.clone()).collect();
    rows.sort();
    rows.dedup();
    let kl = rows
        .iter()
        .map(|&r| kl_row(params.row(r), reference.params().row(r)))
        .sum::<f64>()
        / rows.len() as f64;
    total / batch.len() as f64 - beta * kl
}

/// Rows touched by a token whose ratio sits within `margin` of a clip boundary.
pub fn kink_rows(batch: &[Trajectory], params: &PolicyParams, epsilon: f64, h: f64) -> Vec<usize> {
    let mut rows = Vec::new();
    for traj in batch {
        for t in 0..traj.len() {
            let row = traj.context_ids[t];
            let lp = log_softmax(params.row(row))[traj.actions[t]];
            let rho = (lp - traj.behavior_logps[t]).exp();
            let margin = 1e-6 + 4.0 * h * rho;
            if (rho - (1.0 - epsilon)).abs() < margin || (rho - (1.0 + epsilon)).abs() < margin {
                rows.push(row);
            }
        }
    }
    rows
}

/// Central finite differences of `f` at every coordinate of `params`.
pub fn finite_differences(params: &PolicyParams, h: f64, f: &dyn Fn(&PolicyParams) -> f64) -> Vec<f64> {
    (0..params.len())
        .map(|i| {
            let mut plus = params.clone();
            plus.logits_mut()[i] += h;
            let mut minus = params.clone();
            minus.logits_mut()[i] -= h;
            (f(&plus) - f(&minus)) / (2.0 * h)
        })
        .collect()
}

pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-4)
}

pub fn softmax(row: &[f64]) -> Vec<f64> {
    log_softmax(row).into_iter().map(f64::exp).collect()
}
