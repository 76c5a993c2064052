//! Acceptance suite: one PASS/FAIL line per criterion, non-zero exit if any fail.

mod common;

use std::process::ExitCode;
use std::time::{Duration, Instant};

use capo_core::advantage::{gae_advantage, grpo_advantage, rloo_advantage, ValueTable};
use capo_core::lab::{mc_gradient_stats, variance_halving_check};
use capo_core::objective::{clipped_objective, phase1_objective, phase2_objective, visited_rows};
use capo_core::rng::seeded;
use capo_core::trainer::{compare_algorithms, median, sweep_switch_points, train};
use capo_core::*;
use common::*;
use rand::Rng;

const NOISY_CHAIN: &str = include_str!("../../../configs/noisy_chain.conf");
const SWEEP_FRACTIONS: [f64; 6] = [0.0, 0.1, 0.2, 0.3, 0.5, 1.0];

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

fn gradient_correctness() -> Outcome {
    let mut rng = seeded(101);
    let h = 1e-5;
    let mut worst: f64 = 0.0;
    let mut checked = 0usize;
    let mut value_gap: f64 = 0.0;
    for _ in 0..100 {
        let env = random_chain(&mut rng);
        let rows = env.policy_rows();
        let k = env.num_actions();
        let behavior = random_params(&mut rng, rows, k, 1.0);
        let params = perturbed(&mut rng, &behavior, 0.3);
        let reference = ReferencePolicy::capture(&random_params(&mut rng, rows, k, 1.0));
        let n = rng.random_range(1..9);
        let batch = random_batch(&mut rng, &env, &behavior, n);
        let cfg = ClipConfig::new(0.2, rng.random_range(0.0..0.1)).unwrap();
        let kinked = kink_rows(&batch, &params, cfg.epsilon, h);
        for phase in [Phase::Imitation, Phase::Discrimination] {
            let eval = |p: &PolicyParams| match phase {
                Phase::Imitation => phase1_objective(&batch, p, &reference, &cfg),
                Phase::Discrimination => phase2_objective(&batch, p, &reference, &cfg),
            };
            let report = eval(&params).unwrap();
            let keep = |t: &Trajectory| phase == Phase::Discrimination || t.advantage_scalar.unwrap() >= 0.0;
            let oracle = objective_oracle(&batch, &keep, &params, &reference, cfg.epsilon, cfg.beta);
            value_gap = value_gap.max((oracle - report.objective_value).abs());
            let fd = finite_differences(&params, h, &|p| eval(p).unwrap().objective_value);
            for (i, (a, f)) in report.gradient.iter().zip(&fd).enumerate() {
                if kinked.contains(&(i / k)) {
                    continue;
                }
                worst = worst.max(rel_err(*a, *f));
                checked += 1;
            }
        }
    }
    outcome(
        worst <= 1e-5 && value_gap <= 1e-12,
        format!("max rel err {worst:.2e} over {checked} coordinates, objective vs oracle {value_gap:.1e}"),
    )
}

fn small_chain_params() -> (Environment, PolicyParams) {
    let env: Environment = ChainTask::new(2, 3, 3).unwrap().into();
    let mut rng = seeded(7);
    let params = random_params(&mut rng, env.policy_rows(), 3, 1.0);
    (env, params)
}

fn mse_decomposition() -> Outcome {
    let (env, params) = small_chain_params();
    let mut identity_gap: f64 = 0.0;
    let mut worst_z: f64 = 0.0;
    for (i, sigma) in [0.5, 1.0, 2.0].into_iter().enumerate() {
        let noise = NoiseModel::new(sigma).unwrap();
        for est in [EstimatorPhase::Phase1, EstimatorPhase::Phase2] {
            let s = mc_gradient_stats(&env, &params, est, noise, 1_000_000, 40 + i as u64).unwrap();
            let gap = (s.mse - (s.bias_norm.powi(2) + s.variance_trace)).abs();
            identity_gap = identity_gap.max(gap);
            if est == EstimatorPhase::Phase2 {
                worst_z = worst_z.max(s.bias_norm / s.standard_error());
            }
        }
    }
    outcome(
        identity_gap <= 1e-9 && worst_z <= 3.0,
        format!("identity gap {identity_gap:.1e}, phase2 bias at {worst_z:.2} standard errors"),
    )
}

fn variance_halving() -> Outcome {
    let ratio = variance_halving_check(1.0, 1_000_000, &mut seeded(3)).unwrap();
    let mut rng = seeded(4);
    let mut ordered = 0;
    let mut max_ratio: f64 = 0.0;
    for i in 0..20 {
        let c = rng.random_range(1..4);
        let k = rng.random_range(2..6);
        let rows: Vec<Vec<f64>> = (0..c)
            .map(|_| vec![rng.random_range(0.0..1.0); k])
            .collect();
        let env: Environment = GroupedBandit::new(rows).unwrap().into();
        let params = random_params(&mut rng, c, k, 2.0);
        let noise = NoiseModel::new(rng.random_range(0.2..3.0)).unwrap();
        let p1 = mc_gradient_stats(&env, &params, EstimatorPhase::Phase1, noise, 100_000, i).unwrap();
        let p2 = mc_gradient_stats(&env, &params, EstimatorPhase::Phase2, noise, 100_000, i).unwrap();
        if p1.variance_trace <= p2.variance_trace {
            ordered += 1;
        }
        max_ratio = max_ratio.max(p1.variance_trace / p2.variance_trace);
    }
    outcome(
        (0.48..=0.52).contains(&ratio) && ordered == 20,
        format!("halving ratio {ratio:.4}, phase1 <= phase2 variance on {ordered}/20 (worst ratio {max_ratio:.3})"),
    )
}

fn degenerate_equivalence() -> Outcome {
    let env: Environment = ChainTask::new(3, 3, 3)
        .unwrap()
        .with_label_noise(0.1)
        .unwrap()
        .into();
    let mut identical = 0;
    for algo in Algo::ALL {
        let mut cfg = TrainConfig::new(env.clone(), 17);
        cfg.algo = algo;
        cfg.total_steps = 200;
        cfg.switch_fraction = 0.0;
        cfg.learning_rate = LearningRate::Fixed(2.0);
        let capo = train(&cfg).unwrap();
        cfg.curriculum = Curriculum::None;
        let base = train(&cfg).unwrap();
        if format!("{capo:?}") == format!("{base:?}") {
            identical += 1;
        }
    }
    outcome(identical == 4, format!("{identical}/4 algorithms bitwise identical"))
}

fn subset_identity() -> Outcome {
    let mut rng = seeded(5);
    let mut gap: f64 = 0.0;
    for _ in 0..1000 {
        let env = random_chain(&mut rng);
        let behavior = random_params(&mut rng, env.policy_rows(), env.num_actions(), 1.0);
        let params = perturbed(&mut rng, &behavior, 0.3);
        let reference = ReferencePolicy::capture(&env.initial_params());
        let n = rng.random_range(1..10);
        let batch = random_batch(&mut rng, &env, &behavior, n);
        let cfg = ClipConfig::new(0.2, rng.random_range(0.0..0.1)).unwrap();
        let full = phase1_objective(&batch, &params, &reference, &cfg).unwrap();
        let sub: Vec<Trajectory> = batch
            .iter()
            .filter(|t| t.advantage_scalar.unwrap() >= 0.0)
            .cloned()
            .collect();
        let all = vec![true; sub.len()];
        let on_sub =
            clipped_objective(&sub, &all, batch.len(), &visited_rows(&batch), &params, &reference, &cfg)
                .unwrap();
        gap = gap.max((full.objective_value - on_sub.objective_value).abs());
        for (a, b) in full.gradient.iter().zip(&on_sub.gradient) {
            gap = gap.max((a - b).abs());
        }
    }
    outcome(gap <= 1e-12, format!("max deviation {gap:.1e} over 1000 batches"))
}

fn convergence() -> Outcome {
    let env: Environment = GroupedBandit::new(vec![vec![0.9, 0.1]]).unwrap().into();
    let target = 0.95 * env.optimal_expected_reward();
    let mut finals = Vec::new();
    for seed in 0..5 {
        let mut cfg = TrainConfig::new(env.clone(), seed);
        cfg.total_steps = 500;
        cfg.learning_rate = LearningRate::RobbinsMonro(StepSchedule::new(1.0, 100.0).unwrap());
        finals.push(train(&cfg).unwrap().final_reward(&env));
    }
    let reached = finals.iter().filter(|&&r| r >= target).count();
    let lowest = finals.iter().cloned().fold(f64::INFINITY, f64::min);
    outcome(
        reached == 5,
        format!("{reached}/5 seeds reach {target:.3} (lowest {lowest:.4})"),
    )
}

fn estimator_invariants() -> Outcome {
    let mut rng = seeded(6);
    let env: Environment = GroupedBandit::new(vec![vec![0.3, 0.6, 0.9]]).unwrap().into();
    let params = env.initial_params();
    let (mut grpo_worst, mut rloo_worst, mut gae_worst) = (0.0f64, 0.0f64, 0.0f64);
    for _ in 0..1000 {
        let g = rng.random_range(2..12);
        let mut members = Vec::with_capacity(g);
        for _ in 0..g {
            let mut t = env.rollout(&params, 0, &mut rng).unwrap();
            t.rewards[0] = rng.random_range(-3.0..3.0);
            members.push(t);
        }
        let group = TrajectoryGroup::new(0, members).unwrap();
        let a = grpo_advantage(&group, 1e-8).scalar_values;
        grpo_worst = grpo_worst.max((a.iter().sum::<f64>() / g as f64).abs());
        let a = rloo_advantage(&group).scalar_values;
        rloo_worst = rloo_worst.max(a.iter().sum::<f64>().abs());

        let len = rng.random_range(1..12);
        let mut traj = env.rollout(&params, 0, &mut rng).unwrap();
        traj.context_ids = (0..len).collect();
        traj.actions = vec![0; len];
        traj.behavior_logps = vec![0.0; len];
        traj.rewards = (0..len).map(|_| rng.random_range(-2.0..2.0)).collect();
        let adv = gae_advantage(&traj, &ValueTable::zeros(len), 1.0, 1.0).unwrap();
        for t in 0..len {
            let to_go: f64 = traj.rewards[t..].iter().sum();
            gae_worst = gae_worst.max((adv.token_values[0][t] - to_go).abs());
        }
    }
    outcome(
        grpo_worst <= 1e-10 && rloo_worst <= 1e-12 && gae_worst <= 1e-12,
        format!("grpo mean {grpo_worst:.1e}, rloo sum {rloo_worst:.1e}, gae vs return-to-go {gae_worst:.1e}"),
    )
}

fn noisy_chain() -> TrainConfig {
    TrainConfig::parse(NOISY_CHAIN).unwrap()
}

fn switch_point_sweep() -> Outcome {
    let cfg = noisy_chain();
    let seeds: Vec<u64> = (0..5).collect();
    let rows = sweep_switch_points(&cfg, &SWEEP_FRACTIONS, &seeds).unwrap();
    let medians: Vec<f64> = SWEEP_FRACTIONS
        .iter()
        .map(|&f| {
            let v: Vec<f64> = rows.iter().filter(|r| r.fraction == f).map(|r| r.final_reward).collect();
            median(&v)
        })
        .collect();
    let last = medians.len() - 1;
    let best_interior = medians[1..last].iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let pass = best_interior > medians[0] && best_interior > medians[last];
    let table: Vec<String> = SWEEP_FRACTIONS
        .iter()
        .zip(&medians)
        .map(|(f, m)| format!("{f}:{m:.4}"))
        .collect();
    outcome(pass, format!("median final reward {}", table.join(" ")))
}

fn algorithm_comparison() -> Outcome {
    let cfg = noisy_chain();
    let seeds: Vec<u64> = (0..5).collect();
    let rows = compare_algorithms(&cfg, &[Curriculum::Capo], &seeds).unwrap();
    let mut wins = 0;
    let mut parts = Vec::new();
    for algo in Algo::ALL {
        let d: Vec<f64> = rows
            .iter()
            .filter(|r| r.algo == algo && r.curriculum == Curriculum::Capo)
            .map(|r| r.delta)
            .collect();
        let m = median(&d);
        if m >= 0.0 {
            wins += 1;
        }
        parts.push(format!("{algo}:{m:+.4}"));
    }
    outcome(
        wins >= 3,
        format!("median capo - none {} ({wins}/4 >= 0)", parts.join(" ")),
    )
}

fn main() -> ExitCode {
    let criteria: [(&str, fn() -> Outcome, Duration); 9] = [
        ("gradient correctness", gradient_correctness, Duration::from_secs(10)),
        ("mse decomposition", mse_decomposition, Duration::from_secs(60)),
        ("variance halving", variance_halving, Duration::from_secs(60)),
        ("degenerate schedule equivalence", degenerate_equivalence, Duration::from_secs(30)),
        ("subset identity", subset_identity, Duration::MAX),
        ("robbins-monro convergence", convergence, Duration::from_secs(60)),
        ("estimator invariants", estimator_invariants, Duration::MAX),
        ("switch point sweep", switch_point_sweep, Duration::from_secs(300)),
        ("algorithm comparison", algorithm_comparison, Duration::from_secs(600)),
    ];
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut failed = 0;
    for (i, (name, run, budget)) in criteria.iter().enumerate() {
        if !filter.is_empty() && !filter.iter().any(|f| name.contains(f.as_str())) {
            continue;
        }
        let start = Instant::now();
        let result = run();
        let elapsed = start.elapsed();
        let pass = result.pass && elapsed <= *budget;
        if !pass {
            failed += 1;
        }
        println!(
            "criterion {}: {name}: {} ({}; {:.1}s)",
            i + 1,
            if pass { "PASS" } else { "FAIL" },
            result.detail,
            elapsed.as_secs_f64()
        );
    }
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        println!("{failed} criteria failed");
        ExitCode::FAILURE
    }
}
