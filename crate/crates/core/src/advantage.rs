//! Advantage estimators: group-relative normalization, GAE over a tabular
//! critic, leave-one-out baselines and global batch standardization.

use std::fmt;
use std::str::FromStr;

use crate::error::{CapoError, Result};
use crate::policy::Trajectory;

/// Default stabilizer added to the standard deviation in normalized estimators.
pub const DEFAULT_EPS_STD: f64 = 1e-8;

/// Trajectories sampled from the same context.
#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryGroup {
    context: usize,
    members: Vec<Trajectory>,
}

impl TrajectoryGroup {
    pub fn new(context: usize, members: Vec<Trajectory>) -> Result<Self> {
        if members.len() < 2 {
            return Err(CapoError::usage(format!(
                "a group needs at least 2 trajectories, got {}",
                members.len()
            )));
        }
        if let Some(t) = members.iter().find(|t| t.context != context) {
            return Err(CapoError::usage(format!(
                "trajectory from context {} in group for context {context}",
                t.context
            )));
        }
        Ok(Self { context, members })
    }

    pub fn context(&self) -> usize {
        self.context
    }

    pub fn members(&self) -> &[Trajectory] {
        &self.members
    }

    pub fn members_mut(&mut self) -> &mut [Trajectory] {
        &mut self.members
    }

    pub fn into_members(self) -> Vec<Trajectory> {
        self.members
    }

    /// Episode return of each member.
    pub fn group_rewards(&self) -> Vec<f64> {
        self.members.iter().map(Trajectory::total_reward).collect()
    }
}

/// Tabular critic `V(s)` indexed by policy row.
#[derive(Debug, Clone, PartialEq)]
pub struct ValueTable {
    values: Vec<f64>,
}

impl ValueTable {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.iter().any(|v| !v.is_finite()) {
            return Err(CapoError::usage("value table entries must be finite"));
        }
        Ok(Self { values })
    }

    pub fn zeros(rows: usize) -> Self {
        Self {
            values: vec![0.0; rows],
        }
    }

    pub fn get(&self, row: usize) -> Result<f64> {
        self.values.get(row).copied().ok_or_else(|| {
            CapoError::usage(format!(
                "no value entry for row {row} (table has {})",
                self.values.len()
            ))
        })
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum EstimatorKind {
    GroupRelative,
    Gae,
    LeaveOneOut,
    GlobalBaseline,
}

/// Advantages for a list of trajectories, in input order.
#[derive(Debug, Clone, PartialEq)]
pub struct AdvantageProfile {
    pub kind: EstimatorKind,
    pub token_values: Vec<Vec<f64>>,
    pub scalar_values: Vec<f64>,
}

impl AdvantageProfile {
    fn broadcast(kind: EstimatorKind, scalars: Vec<f64>, trajectories: &[Trajectory]) -> Self {
        let token_values = scalars
            .iter()
            .zip(trajectories)
            .map(|(&a, t)| vec![a; t.len()])
            .collect();
        Self {
            kind,
            token_values,
            scalar_values: scalars,
        }
    }

    /// Writes the advantages into the matching trajectories.
    pub fn apply_to(&self, trajectories: &mut [Trajectory]) -> Result<()> {
        if trajectories.len() != self.token_values.len() {
            return Err(CapoError::usage(format!(
                "profile has {} entries for {} trajectories",
                self.token_values.len(),
                trajectories.len()
            )));
        }
        for (t, tokens) in trajectories.iter_mut().zip(&self.token_values) {
            t.set_advantages(tokens.clone())?;
        }
        Ok(())
    }
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

fn std_pop(xs: &[f64], mean: f64) -> f64 {
    (xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / xs.len() as f64).sqrt()
}

fn all_equal(xs: &[f64]) -> bool {
    xs.iter().all(|&x| x == xs[0])
}

/// `(r - mean) / (std + eps_std)`, or all zeros for a constant input.
fn standardize(rewards: &[f64], eps_std: f64) -> Vec<f64> {
    if all_equal(rewards) {
        return vec![0.0; rewards.len()];
    }
    let m = mean(rewards);
    let s = std_pop(rewards, m);
    rewards.iter().map(|r| (r - m) / (s + eps_std)).collect()
}

/// Group-relative advantage: returns standardized within the group, using the
/// population standard deviation.
pub fn grpo_advantage(group: &TrajectoryGroup, eps_std: f64) -> AdvantageProfile {
    let scalars = standardize(&group.group_rewards(), eps_std);
    AdvantageProfile::broadcast(EstimatorKind::GroupRelative, scalars, group.members())
}

/// Leave-one-out baseline: `r_i - mean_{j != i} r_j`.
pub fn rloo_advantage(group: &TrajectoryGroup) -> AdvantageProfile {
    let rewards = group.group_rewards();
    let scalars = if all_equal(&rewards) {
        vec![0.0; rewards.len()]
    } else {
        let n = rewards.len() as f64;
        let total: f64 = rewards.iter().sum();
        rewards
            .iter()
            .map(|r| r - (total - r) / (n - 1.0))
            .collect()
    };
    AdvantageProfile::broadcast(EstimatorKind::LeaveOneOut, scalars, group.members())
}

/// Global-baseline (REINFORCE++ style) advantage: returns standardized over the
/// whole batch rather than per group.
pub fn reinforcepp_advantage(batch: &[Trajectory], eps_std: f64) -> Result<AdvantageProfile> {
    if batch.len() < 2 {
        return Err(CapoError::usage(format!(
            "batch standardization needs at least 2 trajectories, got {}",
            batch.len()
        )));
    }
    let rewards: Vec<f64> = batch.iter().map(Trajectory::total_reward).collect();
    let scalars = standardize(&rewards, eps_std);
    Ok(AdvantageProfile::broadcast(
        EstimatorKind::GlobalBaseline,
        scalars,
        batch,
    ))
}

/// Generalized advantage estimation for one trajectory.
///
/// The state after the final step is terminal with value 0.
pub fn gae_advantage(
    traj: &Trajectory,
    values: &ValueTable,
    gamma: f64,
    lam: f64,
) -> Result<AdvantageProfile> {
    if !(0.0..=1.0).contains(&gamma) || !(0.0..=1.0).contains(&lam) {
        return Err(CapoError::usage(format!(
            "gamma and lambda must lie in [0, 1], got {gamma}, {lam}"
        )));
    }
    let len = traj.len();
    let mut advantages = vec![0.0; len];
    let mut running = 0.0;
    let mut next_value = 0.0;
    for t in (0..len).rev() {
        let v = values.get(traj.context_ids[t])?;
        let delta = traj.rewards[t] + gamma * next_value - v;
        running = delta + gamma * lam * running;
        advantages[t] = running;
        next_value = v;
    }
    let scalar = trajectory_aggregate(&advantages)?;
    Ok(AdvantageProfile {
        kind: EstimatorKind::Gae,
        token_values: vec![advantages],
        scalar_values: vec![scalar],
    })
}

/// GAE over a batch, one profile entry per trajectory.
pub fn gae_batch(
    batch: &[Trajectory],
    values: &ValueTable,
    gamma: f64,
    lam: f64,
) -> Result<AdvantageProfile> {
    let mut profile = AdvantageProfile {
        kind: EstimatorKind::Gae,
        token_values: Vec::with_capacity(batch.len()),
        scalar_values: Vec::with_capacity(batch.len()),
    };
    for t in batch {
        let single = gae_advantage(t, values, gamma, lam)?;
        profile.token_values.extend(single.token_values);
        profile.scalar_values.extend(single.scalar_values);
    }
    Ok(profile)
}

/// Monte Carlo critic: `V(row)` is the mean discounted return-to-go observed
/// from that row; rows never visited get 0.
pub fn fit_value_table(trajectories: &[Trajectory], gamma: f64, rows: usize) -> Result<ValueTable> {
    if trajectories.is_empty() {
        return Err(CapoError::usage("cannot fit a critic on no trajectories"));
    }
    let mut sums = vec![0.0; rows];
    let mut counts = vec![0usize; rows];
    for traj in trajectories {
        let mut ret = 0.0;
        for t in (0..traj.len()).rev() {
            ret = traj.rewards[t] + gamma * ret;
            let row = traj.context_ids[t];
            if row >= rows {
                return Err(CapoError::usage(format!(
                    "row {row} outside a value table of {rows} rows"
                )));
            }
            sums[row] += ret;
            counts[row] += 1;
        }
    }
    let values = sums
        .into_iter()
        .zip(counts)
        .map(|(s, n)| if n == 0 { 0.0 } else { s / n as f64 })
        .collect();
    ValueTable::new(values)
}

/// Trajectory-level advantage used by the curriculum mask: the token mean.
pub fn trajectory_aggregate(token_values: &[f64]) -> Result<f64> {
    if token_values.is_empty() {
        return Err(CapoError::usage("cannot aggregate an empty advantage sequence"));
    }
    Ok(mean(token_values))
}

/// Which advantage construction a training run uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Algo {
    Grpo,
    Ppo,
    Rloo,
    ReinforcePp,
}

impl Algo {
    pub const ALL: [Algo; 4] = [Algo::Grpo, Algo::Ppo, Algo::Rloo, Algo::ReinforcePp];

    pub fn estimator(self) -> EstimatorKind {
        match self {
            Algo::Grpo => EstimatorKind::GroupRelative,
            Algo::Ppo => EstimatorKind::Gae,
            Algo::Rloo => EstimatorKind::LeaveOneOut,
            Algo::ReinforcePp => EstimatorKind::GlobalBaseline,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Algo::Grpo => "grpo",
            Algo::Ppo => "ppo",
            Algo::Rloo => "rloo",
            Algo::ReinforcePp => "reinforcepp",
        }
    }
}

impl fmt::Display for Algo {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Algo {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        Algo::ALL
            .into_iter()
            .find(|a| a.as_str() == s)
            .ok_or_else(|| format!("unknown algo `{s}` (expected grpo, ppo, rloo or reinforcepp)"))
    }
}
