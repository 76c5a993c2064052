//! Training loop, evaluation, switch-point sweeps and algorithm comparisons.

use std::io::Write;

use rand::Rng;
use rayon::prelude::*;

use crate::advantage::{
    fit_value_table, gae_batch, grpo_advantage, reinforcepp_advantage, rloo_advantage, Algo,
    TrajectoryGroup, DEFAULT_EPS_STD,
};
use crate::curriculum::{
    estimate_difficulty, static_batch_contexts, static_curriculum_order, Curriculum, Phase,
    PhaseSchedule, DEFAULT_DIFFICULTY_K,
};
use crate::env::Environment;
use crate::error::{CapoError, Result};
use crate::lab::StepSchedule;
use crate::objective::{phase_objective, ClipConfig};
use crate::policy::{PolicyParams, ReferencePolicy, Trajectory};
use crate::rng::{substream, CapoRng};

/// Step-size rule for the logit updates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum LearningRate {
    Fixed(f64),
    /// Harmonic decay satisfying the Robbins-Monro conditions.
    RobbinsMonro(StepSchedule),
}

impl LearningRate {
    pub fn at(&self, step: usize) -> f64 {
        match self {
            LearningRate::Fixed(lr) => *lr,
            LearningRate::RobbinsMonro(s) => s.step_size(step),
        }
    }
}

/// Every knob of a training run. Build one with [`TrainConfig::new`] or parse
/// it from a key=value file (see [`crate::config`]).
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub algo: Algo,
    pub curriculum: Curriculum,
    pub switch_fraction: f64,
    pub total_steps: usize,
    pub group_size: usize,
    /// Rollout groups (contexts) per step.
    pub batch_groups: usize,
    pub clip: ClipConfig,
    pub learning_rate: LearningRate,
    pub gamma: f64,
    pub lam: f64,
    pub inner_epochs: usize,
    pub eps_std: f64,
    /// Rollouts per context when estimating difficulty for the static curriculum.
    pub difficulty_k: usize,
    pub seed: u64,
    pub env: Environment,
}

impl TrainConfig {
    /// Defaults for everything but the environment and seed.
    pub fn new(env: Environment, seed: u64) -> Self {
        Self {
            algo: Algo::Grpo,
            curriculum: Curriculum::Capo,
            switch_fraction: 0.2,
            total_steps: 500,
            group_size: 16,
            batch_groups: 4,
            clip: ClipConfig::default(),
            learning_rate: LearningRate::Fixed(0.5),
            gamma: 1.0,
            lam: 1.0,
            inner_epochs: 1,
            eps_std: DEFAULT_EPS_STD,
            difficulty_k: DEFAULT_DIFFICULTY_K,
            seed,
            env,
        }
    }

    pub fn validate(&self) -> Result<()> {
        PhaseSchedule::new(self.switch_fraction, self.total_steps)?;
        ClipConfig::new(self.clip.epsilon, self.clip.beta)?;
        if self.group_size < 2 {
            return Err(CapoError::usage("group_size must be at least 2"));
        }
        if self.batch_groups == 0 {
            return Err(CapoError::usage("batch_groups must be positive"));
        }
        if self.algo == Algo::ReinforcePp && self.group_size * self.batch_groups < 2 {
            return Err(CapoError::usage("reinforcepp needs at least 2 trajectories per step"));
        }
        if let LearningRate::Fixed(lr) = self.learning_rate {
            if !(lr > 0.0 && lr.is_finite()) {
                return Err(CapoError::usage(format!("learning rate must be > 0, got {lr}")));
            }
        }
        if !(0.0..=1.0).contains(&self.gamma) || !(0.0..=1.0).contains(&self.lam) {
            return Err(CapoError::usage("gamma and lam must lie in [0, 1]"));
        }
        if self.inner_epochs == 0 {
            return Err(CapoError::usage("inner_epochs must be positive"));
        }
        if !(self.eps_std >= 0.0 && self.eps_std.is_finite()) {
            return Err(CapoError::usage("eps_std must be >= 0"));
        }
        if self.difficulty_k == 0 {
            return Err(CapoError::usage("difficulty_k must be positive"));
        }
        Ok(())
    }
}

/// One row of the training trace.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricRecord {
    pub step: usize,
    pub phase: Phase,
    /// Mean observed episode return of the step's batch.
    pub mean_reward: f64,
    /// Policy entropy averaged over all rows, after the update.
    pub policy_entropy: f64,
    /// KL to the initial policy averaged over all rows, after the update.
    pub kl_to_ref: f64,
    /// Share of trajectories with `A(tau) > 0`, before masking.
    pub frac_positive_advantage: f64,
    pub num_contributing: usize,
    /// Norm of the first inner-epoch gradient.
    pub gradient_norm: f64,
    /// Objective value of the first inner epoch.
    pub objective_value: f64,
}

pub const METRIC_COLUMNS: [&str; 9] = [
    "step",
    "phase",
    "mean_reward",
    "policy_entropy",
    "kl_to_ref",
    "frac_positive_advantage",
    "num_contributing",
    "gradient_norm",
    "objective_value",
];

impl MetricRecord {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{}",
            self.step,
            self.phase,
            self.mean_reward,
            self.policy_entropy,
            self.kl_to_ref,
            self.frac_positive_advantage,
            self.num_contributing,
            self.gradient_norm,
            self.objective_value
        )
    }
}

pub fn write_metrics_csv<W: Write>(mut out: W, metrics: &[MetricRecord]) -> std::io::Result<()> {
    writeln!(out, "{}", METRIC_COLUMNS.join(","))?;
    for m in metrics {
        writeln!(out, "{}", m.csv_row())?;
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutput {
    pub params: PolicyParams,
    pub metrics: Vec<MetricRecord>,
}

impl TrainOutput {
    /// Exact expected reward of the final policy.
    pub fn final_reward(&self, env: &Environment) -> f64 {
        env.expected_reward(&self.params)
            .expect("trained params match the environment")
    }

    pub fn final_entropy(&self) -> f64 {
        self.params.mean_entropy()
    }
}

fn step_contexts(
    cfg: &TrainConfig,
    static_order: Option<&[usize]>,
    step: usize,
    rng: &mut CapoRng,
) -> Vec<usize> {
    match static_order {
        Some(order) => static_batch_contexts(order, step, cfg.total_steps, cfg.batch_groups),
        None => (0..cfg.batch_groups)
            .map(|_| rng.random_range(0..cfg.env.num_contexts()))
            .collect(),
    }
}

/// Fills in advantages for a step's groups and returns the flattened batch.
fn estimate_advantages(cfg: &TrainConfig, groups: Vec<TrajectoryGroup>) -> Result<Vec<Trajectory>> {
    match cfg.algo {
        Algo::Grpo | Algo::Rloo => {
            let mut batch = Vec::new();
            for group in groups {
                let profile = match cfg.algo {
                    Algo::Grpo => grpo_advantage(&group, cfg.eps_std),
                    _ => rloo_advantage(&group),
                };
                let mut members = group.into_members();
                profile.apply_to(&mut members)?;
                batch.extend(members);
            }
            Ok(batch)
        }
        Algo::ReinforcePp => {
            let mut batch: Vec<Trajectory> = groups.into_iter().flat_map(TrajectoryGroup::into_members).collect();
            reinforcepp_advantage(&batch, cfg.eps_std)?.apply_to(&mut batch)?;
            Ok(batch)
        }
        Algo::Ppo => {
            let mut batch: Vec<Trajectory> = groups.into_iter().flat_map(TrajectoryGroup::into_members).collect();
            let values = fit_value_table(&batch, cfg.gamma, cfg.env.policy_rows())?;
            gae_batch(&batch, &values, cfg.gamma, cfg.lam)?.apply_to(&mut batch)?;
            Ok(batch)
        }
    }
}

fn all_finite(xs: &[f64]) -> bool {
    xs.iter().all(|x| x.is_finite())
}

/// Runs `total_steps` clipped-surrogate ascent steps from the uniform policy.
///
/// The phase of each step comes from the switch schedule when the curriculum
/// is `capo`; the other curricula always use the full advantage spectrum.
/// The old policy is re-snapshotted every step, so the first inner epoch sees
/// `rho == 1`. The KL anchor is the policy at step 0.
pub fn train(cfg: &TrainConfig) -> Result<TrainOutput> {
    cfg.validate()?;
    let schedule = PhaseSchedule::new(cfg.switch_fraction, cfg.total_steps)?;
    let mut params = cfg.env.initial_params();
    let reference = ReferencePolicy::capture(&params);
    let mut rng = substream(cfg.seed, 0);

    let static_order = if cfg.curriculum == Curriculum::Static {
        let mut probe = substream(cfg.seed, 1);
        let estimates = (0..cfg.env.num_contexts())
            .map(|c| estimate_difficulty(&cfg.env, &params, c, cfg.difficulty_k, &mut probe))
            .collect::<Result<Vec<_>>>()?;
        Some(static_curriculum_order(&estimates)?)
    } else {
        None
    };

    let mut metrics = Vec::with_capacity(cfg.total_steps);
    for step in 0..cfg.total_steps {
        let phase = match cfg.curriculum {
            Curriculum::Capo => schedule.current_phase(step)?,
            Curriculum::None | Curriculum::Static => Phase::Discrimination,
        };
        let contexts = step_contexts(cfg, static_order.as_deref(), step, &mut rng);
        let groups = contexts
            .into_iter()
            .map(|c| cfg.env.rollout_group(&params, c, cfg.group_size, &mut rng))
            .collect::<Result<Vec<_>>>()?;
        let batch = estimate_advantages(cfg, groups)?;

        let n = batch.len() as f64;
        let mean_reward = batch.iter().map(Trajectory::total_reward).sum::<f64>() / n;
        let positives = batch
            .iter()
            .filter(|t| t.advantage_scalar.is_some_and(|a| a > 0.0))
            .count();
        let lr = cfg.learning_rate.at(step);

        let mut record = MetricRecord {
            step,
            phase,
            mean_reward,
            policy_entropy: f64::NAN,
            kl_to_ref: f64::NAN,
            frac_positive_advantage: positives as f64 / n,
            num_contributing: 0,
            gradient_norm: f64::NAN,
            objective_value: f64::NAN,
        };
        for epoch in 0..cfg.inner_epochs {
            let report = phase_objective(phase, &batch, &params, &reference, &cfg.clip)?;
            if epoch == 0 {
                record.num_contributing = report.num_contributing;
                record.gradient_norm = report.gradient_norm();
                record.objective_value = report.objective_value;
            }
            if !all_finite(&report.gradient) {
                return Err(CapoError::NonFinite {
                    step,
                    record: Box::new(record),
                });
            }
            params.add_scaled(&report.gradient, lr)?;
            if !all_finite(params.logits()) {
                return Err(CapoError::NonFinite {
                    step,
                    record: Box::new(record),
                });
            }
        }
        record.policy_entropy = params.mean_entropy();
        record.kl_to_ref = params.mean_kl_to_reference(&reference)?;
        metrics.push(record);
    }
    Ok(TrainOutput { params, metrics })
}

/// Mean terminal reward over `episodes` greedy rollouts (argmax, lowest id on ties).
pub fn eval_policy<R: Rng + ?Sized>(
    params: &PolicyParams,
    env: &Environment,
    episodes: usize,
    rng: &mut R,
) -> Result<f64> {
    if episodes == 0 {
        return Err(CapoError::usage("evaluation needs at least one episode"));
    }
    let mut total = 0.0;
    for _ in 0..episodes {
        let context = rng.random_range(0..env.num_contexts());
        total += env.greedy_rollout(params, context, rng)?.total_reward();
    }
    Ok(total / episodes as f64)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub fraction: f64,
    pub seed: u64,
    /// Exact expected reward of the final policy.
    pub final_reward: f64,
    /// Mean policy entropy of the final policy.
    pub final_entropy: f64,
}

/// One CAPO run per `(fraction, seed)`; all other settings shared.
pub fn sweep_switch_points(cfg: &TrainConfig, fractions: &[f64], seeds: &[u64]) -> Result<Vec<SweepRow>> {
    if let Some(f) = fractions.iter().find(|f| !(0.0..=1.0).contains(*f)) {
        return Err(CapoError::usage(format!("switch fraction {f} outside [0, 1]")));
    }
    let jobs: Vec<(f64, u64)> = fractions
        .iter()
        .flat_map(|&f| seeds.iter().map(move |&s| (f, s)))
        .collect();
    jobs.par_iter()
        .map(|&(fraction, seed)| {
            let run_cfg = TrainConfig {
                curriculum: Curriculum::Capo,
                switch_fraction: fraction,
                seed,
                ..cfg.clone()
            };
            let out = train(&run_cfg)?;
            Ok(SweepRow {
                fraction,
                seed,
                final_reward: out.final_reward(&cfg.env),
                final_entropy: out.final_entropy(),
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct CompareRow {
    pub algo: Algo,
    pub curriculum: Curriculum,
    pub seed: u64,
    pub final_reward: f64,
    /// `final_reward` minus the same algorithm's `none` run with the same seed.
    pub delta: f64,
}

/// Every algorithm under each curriculum in `curricula`, matched seeds.
/// `Curriculum::None` is always included as the delta reference.
pub fn compare_algorithms(
    cfg: &TrainConfig,
    curricula: &[Curriculum],
    seeds: &[u64],
) -> Result<Vec<CompareRow>> {
    let mut variants = vec![Curriculum::None];
    variants.extend(curricula.iter().copied().filter(|c| *c != Curriculum::None));
    let jobs: Vec<(Algo, Curriculum, u64)> = Algo::ALL
        .iter()
        .flat_map(|&a| {
            let variants = &variants;
            seeds
                .iter()
                .flat_map(move |&s| variants.iter().map(move |&c| (a, c, s)))
        })
        .collect();
    let finals: Vec<f64> = jobs
        .par_iter()
        .map(|&(algo, curriculum, seed)| {
            let run_cfg = TrainConfig {
                algo,
                curriculum,
                seed,
                ..cfg.clone()
            };
            Ok(train(&run_cfg)?.final_reward(&cfg.env))
        })
        .collect::<Result<_>>()?;

    let mut rows = Vec::with_capacity(jobs.len());
    for (i, &(algo, curriculum, seed)) in jobs.iter().enumerate() {
        let base = jobs
            .iter()
            .position(|&(a, c, s)| a == algo && c == Curriculum::None && s == seed)
            .expect("none variant always present");
        rows.push(CompareRow {
            algo,
            curriculum,
            seed,
            final_reward: finals[i],
            delta: finals[i] - finals[base],
        });
    }
    Ok(rows)
}

/// Median of a non-empty slice.
pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let mid = v.len() / 2;
    if v.len() % 2 == 1 {
        v[mid]
    } else {
        0.5 * (v[mid - 1] + v[mid])
    }
}
