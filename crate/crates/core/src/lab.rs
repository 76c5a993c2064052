//! Monte Carlo laboratory for the bias/variance behaviour of the filtered
//! (positive-only) and unfiltered single-sample policy-gradient estimators.
//!
//! The single-sample estimator draws a context uniformly, an action sequence
//! from the policy, and forms
//!
//! ```text
//! g_hat = grad log pi(seq | c) * A_hat,   A_hat = A(c, seq) + noise
//! ```
//!
//! where `A(c, seq) = E[r | c, seq] - E[r | c]` is the exact advantage. The
//! filtered estimator multiplies by `1{A_hat >= 0}`. Reported statistics are
//! population moments of the drawn sample, so `mse == bias_norm^2 +
//! variance_trace` holds as an identity up to rounding.
//!
//! Sampling is split into fixed-size chunks, each with its own derived seed.
//! Chunk moments are merged in chunk order whether or not the chunks were
//! computed in parallel, so results do not depend on the thread count.

use std::fmt;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;

use crate::env::{Environment, NoiseModel};
use crate::error::{CapoError, Result};
use crate::policy::{softmax, PolicyParams};
use crate::rng::substream;

/// Largest `contexts * K^T * T` that [`true_gradient`] will enumerate.
pub const MAX_ENUMERATION: usize = 1_000_000;

/// Minimum sample count accepted by the Monte Carlo estimators.
pub const MIN_MC_SAMPLES: usize = 1_000;

/// Minimum draws for the Gaussian halving check.
pub const MIN_HALVING_SAMPLES: usize = 100_000;

const CHUNK: usize = 8_192;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum EstimatorPhase {
    /// Keeps only samples with `A_hat >= 0`.
    Phase1,
    /// Unfiltered.
    Phase2,
}

impl EstimatorPhase {
    pub fn as_str(self) -> &'static str {
        match self {
            EstimatorPhase::Phase1 => "phase1",
            EstimatorPhase::Phase2 => "phase2",
        }
    }
}

impl fmt::Display for EstimatorPhase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Sample moments of a gradient estimator against the exact gradient.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientStats {
    pub mean_gradient: Vec<f64>,
    /// `||mean - g||`
    pub bias_norm: f64,
    /// Sum of per-coordinate population variances.
    pub variance_trace: f64,
    /// Mean of `||g_hat - g||^2`.
    pub mse: f64,
    pub n_samples: usize,
}

impl GradientStats {
    /// Aggregate standard error of the sample mean, `sqrt(variance_trace / n)`.
    pub fn standard_error(&self) -> f64 {
        (self.variance_trace / self.n_samples as f64).sqrt()
    }
}

/// Harmonic step sizes `alpha0 / (1 + t / tau)`; they sum to infinity while
/// their squares are summable.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepSchedule {
    alpha0: f64,
    tau: f64,
}

impl StepSchedule {
    pub fn new(alpha0: f64, tau: f64) -> Result<Self> {
        if !(alpha0 > 0.0 && alpha0.is_finite() && tau > 0.0 && tau.is_finite()) {
            return Err(CapoError::usage(format!(
                "step schedule needs alpha0 > 0 and tau > 0, got {alpha0}, {tau}"
            )));
        }
        Ok(Self { alpha0, tau })
    }

    pub fn alpha0(&self) -> f64 {
        self.alpha0
    }

    pub fn tau(&self) -> f64 {
        self.tau
    }

    pub fn step_size(&self, t: usize) -> f64 {
        self.alpha0 / (1.0 + t as f64 / self.tau)
    }
}

/// Cached per-row probabilities and per-context baselines.
struct Tables {
    probs: Vec<Vec<f64>>,
    cdfs: Vec<Vec<f64>>,
    baselines: Vec<f64>,
}

impl Tables {
    fn new(env: &Environment, params: &PolicyParams) -> Result<Self> {
        env.check_params(params)?;
        let probs: Vec<Vec<f64>> = (0..params.num_contexts())
            .map(|r| softmax(params.row(r)))
            .collect();
        let cdfs = probs
            .iter()
            .map(|p| {
                p.iter()
                    .scan(0.0, |acc, x| {
                        *acc += x;
                        Some(*acc)
                    })
                    .collect()
            })
            .collect();
        let baselines = (0..env.num_contexts())
            .map(|c| env.expected_context_reward(params, c))
            .collect::<Result<_>>()?;
        Ok(Self {
            probs,
            cdfs,
            baselines,
        })
    }

    fn sample_row<R: Rng + ?Sized>(&self, row: usize, rng: &mut R) -> usize {
        let u: f64 = rng.random();
        let cdf = &self.cdfs[row];
        cdf.iter().position(|&c| u < c).unwrap_or(cdf.len() - 1)
    }

    /// Adds `weight * grad log pi(seq | c)` into `out`.
    fn add_score(&self, env: &Environment, context: usize, actions: &[usize], weight: f64, out: &mut [f64]) {
        let k = env.num_actions();
        for (t, &a) in actions.iter().enumerate() {
            let row = env.row_index(context, t);
            for (j, p) in self.probs[row].iter().enumerate() {
                let onehot = if j == a { 1.0 } else { 0.0 };
                out[row * k + j] += weight * (onehot - p);
            }
        }
    }
}

/// Exact policy gradient `E[grad log pi * A]` by enumerating every context and
/// action sequence. Rejects instances beyond [`MAX_ENUMERATION`].
pub fn true_gradient(env: &Environment, params: &PolicyParams) -> Result<Vec<f64>> {
    let contexts = env.num_contexts();
    let k = env.num_actions();
    let len = env.episode_length();
    let sequences = u32::try_from(len)
        .ok()
        .and_then(|l| k.checked_pow(l))
        .filter(|s| s.saturating_mul(contexts).saturating_mul(len) <= MAX_ENUMERATION)
        .ok_or_else(|| {
            CapoError::usage(format!(
                "{contexts} contexts x {k}^{len} sequences exceeds the enumeration limit of {MAX_ENUMERATION}"
            ))
        })?;
    let tables = Tables::new(env, params)?;
    let mut grad = vec![0.0; params.len()];
    let mut actions = vec![0usize; len];
    let context_weight = 1.0 / contexts as f64;
    for c in 0..contexts {
        for index in 0..sequences {
            let mut rest = index;
            let mut prob = 1.0;
            for (t, a) in actions.iter_mut().enumerate() {
                *a = rest % k;
                rest /= k;
                prob *= tables.probs[env.row_index(c, t)][*a];
            }
            let advantage = env.expected_reward_of(c, &actions) - tables.baselines[c];
            let weight = context_weight * prob * advantage;
            if weight != 0.0 {
                tables.add_score(env, c, &actions, weight, &mut grad);
            }
        }
    }
    Ok(grad)
}

/// Running population moments of gradient samples.
#[derive(Debug, Clone)]
struct Moments {
    n: usize,
    mean: Vec<f64>,
    m2: Vec<f64>,
    sq_err: f64,
}

impl Moments {
    fn new(dim: usize) -> Self {
        Self {
            n: 0,
            mean: vec![0.0; dim],
            m2: vec![0.0; dim],
            sq_err: 0.0,
        }
    }

    fn push(&mut self, x: &[f64], truth: &[f64]) {
        self.n += 1;
        let n = self.n as f64;
        let mut err = 0.0;
        for i in 0..x.len() {
            let delta = x[i] - self.mean[i];
            self.mean[i] += delta / n;
            self.m2[i] += delta * (x[i] - self.mean[i]);
            let e = x[i] - truth[i];
            err += e * e;
        }
        self.sq_err += err;
    }

    /// Chan et al. pairwise merge.
    fn merge(mut self, other: Moments) -> Moments {
        if other.n == 0 {
            return self;
        }
        if self.n == 0 {
            return other;
        }
        let na = self.n as f64;
        let nb = other.n as f64;
        let n = na + nb;
        for i in 0..self.mean.len() {
            let delta = other.mean[i] - self.mean[i];
            self.mean[i] += delta * nb / n;
            self.m2[i] += other.m2[i] + delta * delta * na * nb / n;
        }
        self.n += other.n;
        self.sq_err += other.sq_err;
        self
    }

    fn into_stats(self, truth: &[f64]) -> GradientStats {
        let n = self.n as f64;
        let bias_norm = self
            .mean
            .iter()
            .zip(truth)
            .map(|(m, g)| (m - g) * (m - g))
            .sum::<f64>()
            .sqrt();
        GradientStats {
            bias_norm,
            variance_trace: self.m2.iter().sum::<f64>() / n,
            mse: self.sq_err / n,
            n_samples: self.n,
            mean_gradient: self.mean,
        }
    }
}

/// Draws `count` single-sample estimates and feeds `weight(A_hat) * score` to `moments`.
#[allow(clippy::too_many_arguments)]
fn run_chunk(
    env: &Environment,
    tables: &Tables,
    noise: NoiseModel,
    weight: fn(f64) -> f64,
    truth: &[f64],
    seed: u64,
    chunk: usize,
    count: usize,
) -> Moments {
    let mut rng = substream(seed, chunk as u64);
    let dim = truth.len();
    let mut moments = Moments::new(dim);
    let mut sample = vec![0.0; dim];
    let mut actions = vec![0usize; env.episode_length()];
    for _ in 0..count {
        let c = rng.random_range(0..env.num_contexts());
        for (t, a) in actions.iter_mut().enumerate() {
            *a = tables.sample_row(env.row_index(c, t), &mut rng);
        }
        let advantage = env.expected_reward_of(c, &actions) - tables.baselines[c];
        let noisy = advantage + noise.draw(&mut rng);
        sample.iter_mut().for_each(|x| *x = 0.0);
        let w = weight(noisy);
        if w != 0.0 {
            tables.add_score(env, c, &actions, w, &mut sample);
        }
        moments.push(&sample, truth);
    }
    moments
}

fn phase_weight(phase: EstimatorPhase) -> fn(f64) -> f64 {
    match phase {
        EstimatorPhase::Phase1 => |a| if a >= 0.0 { a } else { 0.0 },
        EstimatorPhase::Phase2 => |a| a,
    }
}

fn negative_branch(a: f64) -> f64 {
    if a <= 0.0 {
        a
    } else {
        0.0
    }
}

fn sampled_moments(
    env: &Environment,
    params: &PolicyParams,
    noise: NoiseModel,
    weight: fn(f64) -> f64,
    n: usize,
    seed: u64,
    parallel: bool,
) -> Result<(Moments, Vec<f64>)> {
    if n < MIN_MC_SAMPLES {
        return Err(CapoError::usage(format!(
            "Monte Carlo estimation needs n >= {MIN_MC_SAMPLES}, got {n}"
        )));
    }
    let truth = true_gradient(env, params)?;
    let tables = Tables::new(env, params)?;
    let chunks = n.div_ceil(CHUNK);
    let job = |i: usize| {
        let count = CHUNK.min(n - i * CHUNK);
        run_chunk(env, &tables, noise, weight, &truth, seed, i, count)
    };
    let parts: Vec<Moments> = if parallel {
        (0..chunks).into_par_iter().map(job).collect()
    } else {
        (0..chunks).map(job).collect()
    };
    let merged = parts
        .into_iter()
        .fold(Moments::new(truth.len()), Moments::merge);
    Ok((merged, truth))
}

/// Bias, variance and MSE of the single-sample estimator over `n` draws.
pub fn mc_gradient_stats(
    env: &Environment,
    params: &PolicyParams,
    estimator: EstimatorPhase,
    noise: NoiseModel,
    n: usize,
    seed: u64,
) -> Result<GradientStats> {
    let (moments, truth) =
        sampled_moments(env, params, noise, phase_weight(estimator), n, seed, true)?;
    Ok(moments.into_stats(&truth))
}

/// Single-threaded variant of [`mc_gradient_stats`]; produces the same numbers.
pub fn mc_gradient_stats_sequential(
    env: &Environment,
    params: &PolicyParams,
    estimator: EstimatorPhase,
    noise: NoiseModel,
    n: usize,
    seed: u64,
) -> Result<GradientStats> {
    let (moments, truth) =
        sampled_moments(env, params, noise, phase_weight(estimator), n, seed, false)?;
    Ok(moments.into_stats(&truth))
}

/// Monte Carlo estimate of `E[grad log pi * A_hat * 1{A_hat <= 0}]`, the mass
/// the filtered estimator discards, so that
/// `E[g_phase1] + filtered_bias = E[g_phase2]`.
///
/// With the same seed the draws coincide with those of [`mc_gradient_stats`].
pub fn filtered_estimator_bias(
    env: &Environment,
    params: &PolicyParams,
    noise: NoiseModel,
    n: usize,
    seed: u64,
) -> Result<Vec<f64>> {
    let (moments, _) = sampled_moments(env, params, noise, negative_branch, n, seed, true)?;
    Ok(moments.mean)
}

/// `sum(x^2 1{x > 0}) / sum(x^2)` over `n` draws of `N(mean, sigma^2)`.
pub fn filtered_second_moment_ratio<R: Rng + ?Sized>(
    mean: f64,
    sigma: f64,
    n: usize,
    rng: &mut R,
) -> Result<f64> {
    if !(sigma > 0.0 && sigma.is_finite()) || !mean.is_finite() {
        return Err(CapoError::usage(format!("need sigma > 0, got {sigma}")));
    }
    if n == 0 {
        return Err(CapoError::usage("need at least one draw"));
    }
    let normal = Normal::new(mean, sigma).expect("validated");
    let mut kept = 0.0;
    let mut total = 0.0;
    for _ in 0..n {
        let x: f64 = normal.sample(rng);
        let sq = x * x;
        total += sq;
        if x > 0.0 {
            kept += sq;
        }
    }
    Ok(kept / total)
}

/// Share of the advantage second moment kept by positive-only filtering when
/// `A_hat ~ N(0, sigma^2)`; symmetry puts it at one half.
pub fn variance_halving_check<R: Rng + ?Sized>(sigma: f64, n: usize, rng: &mut R) -> Result<f64> {
    if n < MIN_HALVING_SAMPLES {
        return Err(CapoError::usage(format!(
            "halving check needs n >= {MIN_HALVING_SAMPLES}, got {n}"
        )));
    }
    filtered_second_moment_ratio(0.0, sigma, n, rng)
}

/// `Var(g_phase1) / Var(g_phase2)` on common random numbers.
pub fn gradient_variance_ratio(
    env: &Environment,
    params: &PolicyParams,
    noise: NoiseModel,
    n: usize,
    seed: u64,
) -> Result<f64> {
    let p1 = mc_gradient_stats(env, params, EstimatorPhase::Phase1, noise, n, seed)?;
    let p2 = mc_gradient_stats(env, params, EstimatorPhase::Phase2, noise, n, seed)?;
    Ok(p1.variance_trace / p2.variance_trace)
}
