mod common;

use capo_core::lab::{
    filtered_estimator_bias, gradient_variance_ratio, mc_gradient_stats, mc_gradient_stats_sequential,
    true_gradient, variance_halving_check,
};
use capo_core::rng::seeded;
use capo_core::{ChainTask, Environment, EstimatorPhase, GroupedBandit, NoiseModel, PolicyParams};
use common::{finite_differences, random_params, softmax};
use statrs::distribution::{Continuous, ContinuousCDF, Normal};

fn two_context_bandit() -> Environment {
    GroupedBandit::new(vec![vec![0.9, 0.1, 0.4], vec![0.2, 0.7, 0.5]])
        .unwrap()
        .into()
}

/// Expected single-sample gradient of a bandit when the weight applied to
/// `A + noise` has the closed-form mean `moment(A)`.
fn bandit_oracle(table: &[Vec<f64>], params: &PolicyParams, moment: &dyn Fn(f64) -> f64) -> Vec<f64> {
    let k = params.num_actions();
    let mut g = vec![0.0; params.len()];
    for (c, rewards) in table.iter().enumerate() {
        let p = softmax(params.row(c));
        let baseline: f64 = p.iter().zip(rewards).map(|(a, b)| a * b).sum();
        for a in 0..k {
            let m = moment(rewards[a] - baseline);
            for j in 0..k {
                let onehot = if j == a { 1.0 } else { 0.0 };
                g[c * k + j] += p[a] * m * (onehot - p[j]) / table.len() as f64;
            }
        }
    }
    g
}

fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

#[test]
fn filtered_mean_matches_truncated_normal_moments() {
    let env = two_context_bandit();
    let Environment::Bandit(b) = &env else { unreachable!() };
    let table = b.reward_table().to_vec();
    let mut rng = seeded(31);
    for (i, sigma) in [0.3, 1.0].into_iter().enumerate() {
        let params = random_params(&mut rng, 2, 3, 1.0);
        let std_normal = Normal::new(0.0, 1.0).unwrap();
        let kept = |a: f64| a * std_normal.cdf(a / sigma) + sigma * std_normal.pdf(a / sigma);
        let dropped = |a: f64| a * std_normal.cdf(-a / sigma) - sigma * std_normal.pdf(a / sigma);
        let noise = NoiseModel::new(sigma).unwrap();
        let n = 400_000;

        let stats = mc_gradient_stats(&env, &params, EstimatorPhase::Phase1, noise, n, i as u64).unwrap();
        let oracle = bandit_oracle(&table, &params, &kept);
        assert!(dist(&stats.mean_gradient, &oracle) <= 4.0 * stats.standard_error());

        let bias = filtered_estimator_bias(&env, &params, noise, n, 100 + i as u64).unwrap();
        let oracle = bandit_oracle(&table, &params, &dropped);
        assert!(dist(&bias, &oracle) <= 4.0 * stats.standard_error());

        let unbiased = mc_gradient_stats(&env, &params, EstimatorPhase::Phase2, noise, n, i as u64).unwrap();
        let truth = true_gradient(&env, &params).unwrap();
        assert!(dist(&unbiased.mean_gradient, &truth) <= 4.0 * unbiased.standard_error());
    }
}

#[test]
fn true_gradient_is_derivative_of_expected_reward() {
    let mut rng = seeded(32);
    let envs: Vec<Environment> = vec![
        two_context_bandit(),
        ChainTask::new(2, 3, 3).unwrap().into(),
        ChainTask::new(1, 2, 4).unwrap().with_label_noise(0.2).unwrap().into(),
    ];
    for env in &envs {
        for _ in 0..5 {
            let params = random_params(&mut rng, env.policy_rows(), env.num_actions(), 1.5);
            let g = true_gradient(env, &params).unwrap();
            let fd = finite_differences(&params, 1e-5, &|p| env.expected_reward(p).unwrap());
            for (a, b) in g.iter().zip(&fd) {
                assert!((a - b).abs() < 1e-8, "{a} vs {b}");
            }
        }
    }
}

#[test]
fn parallel_and_sequential_agree_bitwise() {
    let env: Environment = ChainTask::new(2, 3, 2).unwrap().into();
    let mut rng = seeded(33);
    let params = random_params(&mut rng, env.policy_rows(), 3, 1.0);
    let noise = NoiseModel::new(0.7).unwrap();
    for est in [EstimatorPhase::Phase1, EstimatorPhase::Phase2] {
        let a = mc_gradient_stats(&env, &params, est, noise, 50_001, 9).unwrap();
        let b = mc_gradient_stats_sequential(&env, &params, est, noise, 50_001, 9).unwrap();
        assert_eq!(a, b);
    }
}

#[test]
fn filtered_plus_discarded_is_unfiltered() {
    let env = two_context_bandit();
    let mut rng = seeded(34);
    for seed in 0..5 {
        let params = random_params(&mut rng, 2, 3, 1.0);
        let noise = NoiseModel::new(0.5).unwrap();
        let p1 = mc_gradient_stats(&env, &params, EstimatorPhase::Phase1, noise, 20_000, seed).unwrap();
        let p2 = mc_gradient_stats(&env, &params, EstimatorPhase::Phase2, noise, 20_000, seed).unwrap();
        let bias = filtered_estimator_bias(&env, &params, noise, 20_000, seed).unwrap();
        for i in 0..p1.mean_gradient.len() {
            assert!((p1.mean_gradient[i] + bias[i] - p2.mean_gradient[i]).abs() < 1e-12);
        }
    }
}

#[test]
fn noiseless_advantage_at_zero_mean_halves_second_moment() {
    let mut rng = seeded(35);
    for sigma in [0.1, 1.0, 10.0] {
        let r = variance_halving_check(sigma, 200_000, &mut rng).unwrap();
        assert!((r - 0.5).abs() < 0.01, "{r}");
    }
    assert!(variance_halving_check(1.0, 10, &mut rng).is_err());
}

#[test]
fn filtering_reduces_variance_on_a_flat_bandit() {
    let env: Environment = GroupedBandit::new(vec![vec![0.5, 0.5, 0.5]]).unwrap().into();
    let params = env.initial_params();
    let r = gradient_variance_ratio(&env, &params, NoiseModel::new(1.0).unwrap(), 100_000, 3).unwrap();
    assert!((r - 0.5).abs() < 0.02, "{r}");
}
