//! Verifiable-reward toy environments.
//!
//! Two reward rules are provided: a contextual Bernoulli bandit (episodes of
//! length one) and a chain task whose binary reward arrives only at the last
//! step, optionally corrupted by label flips. Both are small enough that every
//! expectation can be computed by enumeration.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{CapoError, Result};
use crate::policy::{ActionSpace, PolicyParams, Trajectory};
use crate::advantage::TrajectoryGroup;

/// Contextual bandit with Bernoulli rewards.
#[derive(Debug, Clone, PartialEq)]
pub struct GroupedBandit {
    reward_table: Vec<Vec<f64>>,
    actions: ActionSpace,
}

impl GroupedBandit {
    /// `reward_table[c][a]` is the success probability of arm `a` in context `c`.
    pub fn new(reward_table: Vec<Vec<f64>>) -> Result<Self> {
        let k = reward_table.first().map_or(0, Vec::len);
        let actions = ActionSpace::new(k)?;
        for (c, row) in reward_table.iter().enumerate() {
            if row.len() != k {
                return Err(CapoError::usage(format!(
                    "reward row {c} has {} entries, expected {k}",
                    row.len()
                )));
            }
            if let Some(p) = row.iter().find(|p| !(0.0..=1.0).contains(*p)) {
                return Err(CapoError::usage(format!(
                    "reward probability {p} in row {c} outside [0, 1]"
                )));
            }
        }
        Ok(Self {
            reward_table,
            actions,
        })
    }

    pub fn reward_table(&self) -> &[Vec<f64>] {
        &self.reward_table
    }

    /// Whether some context has arms with different success probabilities.
    pub fn is_informative(&self) -> bool {
        self.reward_table
            .iter()
            .any(|row| row.iter().any(|&p| p != row[0]))
    }
}

/// Chain of `chain_length` decisions per context; reward 1 at the final step
/// iff every decision was correct, flipped with probability `label_noise`.
#[derive(Debug, Clone, PartialEq)]
pub struct ChainTask {
    num_contexts: usize,
    actions: ActionSpace,
    chain_length: usize,
    correct: Vec<Vec<usize>>,
    label_noise: f64,
}

impl ChainTask {
    /// Chain whose correct action at `(context, step)` is `(context + step) % K`.
    pub fn new(num_contexts: usize, num_actions: usize, chain_length: usize) -> Result<Self> {
        let correct = (0..num_contexts)
            .map(|c| (0..chain_length).map(|t| (c + t) % num_actions.max(1)).collect())
            .collect();
        Self::with_correct(num_actions, chain_length, correct)
    }

    pub fn with_correct(
        num_actions: usize,
        chain_length: usize,
        correct: Vec<Vec<usize>>,
    ) -> Result<Self> {
        let actions = ActionSpace::new(num_actions)?;
        if chain_length < 2 {
            return Err(CapoError::usage(format!(
                "chain length must be at least 2, got {chain_length}"
            )));
        }
        if correct.is_empty() {
            return Err(CapoError::usage("chain task needs at least one context"));
        }
        for (c, row) in correct.iter().enumerate() {
            if row.len() != chain_length {
                return Err(CapoError::usage(format!(
                    "correct row {c} has {} steps, expected {chain_length}",
                    row.len()
                )));
            }
            if let Some(a) = row.iter().find(|&&a| a >= num_actions) {
                return Err(CapoError::usage(format!("correct action {a} out of range")));
            }
        }
        Ok(Self {
            num_contexts: correct.len(),
            actions,
            chain_length,
            correct,
            label_noise: 0.0,
        })
    }

    /// Probability that the terminal reward is flipped.
    pub fn with_label_noise(mut self, label_noise: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&label_noise) {
            return Err(CapoError::usage(format!(
                "label noise {label_noise} outside [0, 1]"
            )));
        }
        self.label_noise = label_noise;
        Ok(self)
    }

    pub fn chain_length(&self) -> usize {
        self.chain_length
    }

    pub fn label_noise(&self) -> f64 {
        self.label_noise
    }

    pub fn correct_action(&self, context: usize, step: usize) -> usize {
        self.correct[context][step]
    }

    pub fn correct_rows(&self) -> &[Vec<usize>] {
        &self.correct
    }

    fn expected_reward_given(&self, success: bool) -> f64 {
        if success {
            1.0 - self.label_noise
        } else {
            self.label_noise
        }
    }
}

/// Zero-mean Gaussian perturbation of advantage values.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NoiseModel {
    sigma: f64,
}

impl NoiseModel {
    pub fn new(sigma: f64) -> Result<Self> {
        if !(sigma >= 0.0 && sigma.is_finite()) {
            return Err(CapoError::usage(format!("noise sigma must be >= 0, got {sigma}")));
        }
        Ok(Self { sigma })
    }

    pub fn none() -> Self {
        Self { sigma: 0.0 }
    }

    pub fn sigma(&self) -> f64 {
        self.sigma
    }

    pub(crate) fn draw<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        if self.sigma == 0.0 {
            return 0.0;
        }
        Normal::new(0.0, self.sigma)
            .expect("sigma validated")
            .sample(rng)
    }
}

/// The environments the trainer and the estimator lab run on.
#[derive(Debug, Clone, PartialEq)]
pub enum Environment {
    Bandit(GroupedBandit),
    Chain(ChainTask),
}

impl From<GroupedBandit> for Environment {
    fn from(env: GroupedBandit) -> Self {
        Environment::Bandit(env)
    }
}

impl From<ChainTask> for Environment {
    fn from(env: ChainTask) -> Self {
        Environment::Chain(env)
    }
}

impl Environment {
    /// Number of prompts (episode start contexts).
    pub fn num_contexts(&self) -> usize {
        match self {
            Environment::Bandit(b) => b.reward_table.len(),
            Environment::Chain(c) => c.num_contexts,
        }
    }

    pub fn action_space(&self) -> ActionSpace {
        match self {
            Environment::Bandit(b) => b.actions,
            Environment::Chain(c) => c.actions,
        }
    }

    pub fn num_actions(&self) -> usize {
        self.action_space().num_actions()
    }

    pub fn episode_length(&self) -> usize {
        match self {
            Environment::Bandit(_) => 1,
            Environment::Chain(c) => c.chain_length,
        }
    }

    /// Number of policy rows, one per `(context, step)`.
    pub fn policy_rows(&self) -> usize {
        self.num_contexts() * self.episode_length()
    }

    /// Policy row used at `step` of an episode started from `context`.
    pub fn row_index(&self, context: usize, step: usize) -> usize {
        context * self.episode_length() + step
    }

    /// Uniform policy of the right shape.
    pub fn initial_params(&self) -> PolicyParams {
        PolicyParams::zeros(self.policy_rows(), self.action_space())
            .expect("environment shape validated at construction")
    }

    pub(crate) fn check_params(&self, params: &PolicyParams) -> Result<()> {
        if params.num_contexts() != self.policy_rows() || params.num_actions() != self.num_actions()
        {
            return Err(CapoError::usage(format!(
                "policy shape {}x{} does not match environment {}x{}",
                params.num_contexts(),
                params.num_actions(),
                self.policy_rows(),
                self.num_actions()
            )));
        }
        Ok(())
    }

    fn check_context(&self, context: usize) -> Result<()> {
        if context >= self.num_contexts() {
            return Err(CapoError::usage(format!(
                "context {context} out of range (environment has {})",
                self.num_contexts()
            )));
        }
        Ok(())
    }

    /// Expected reward of an action sequence from `context`.
    pub fn expected_reward_of(&self, context: usize, actions: &[usize]) -> f64 {
        match self {
            Environment::Bandit(b) => b.reward_table[context][actions[0]],
            Environment::Chain(c) => {
                let success = actions
                    .iter()
                    .enumerate()
                    .all(|(t, &a)| a == c.correct[context][t]);
                c.expected_reward_given(success)
            }
        }
    }

    /// Samples one episode from `context` under `params`.
    pub fn rollout<R: Rng + ?Sized>(
        &self,
        params: &PolicyParams,
        context: usize,
        rng: &mut R,
    ) -> Result<Trajectory> {
        self.check_params(params)?;
        self.episode(context, rng, |row, rng| params.sample_action(row, rng))
    }

    /// Plays the argmax action at every step (lowest id on ties).
    pub fn greedy_rollout<R: Rng + ?Sized>(
        &self,
        params: &PolicyParams,
        context: usize,
        rng: &mut R,
    ) -> Result<Trajectory> {
        self.check_params(params)?;
        self.episode(context, rng, |row, _| {
            let a = params.greedy_action(row)?;
            Ok((a, params.log_prob(row, a)?))
        })
    }

    fn episode<R, F>(&self, context: usize, rng: &mut R, mut choose: F) -> Result<Trajectory>
    where
        R: Rng + ?Sized,
        F: FnMut(usize, &mut R) -> Result<(usize, f64)>,
    {
        self.check_context(context)?;
        let len = self.episode_length();
        let mut traj = Trajectory {
            context,
            context_ids: Vec::with_capacity(len),
            actions: Vec::with_capacity(len),
            behavior_logps: Vec::with_capacity(len),
            rewards: vec![0.0; len],
            advantage_tokens: None,
            advantage_scalar: None,
        };
        for step in 0..len {
            let row = self.row_index(context, step);
            let (action, logp) = choose(row, rng)?;
            traj.context_ids.push(row);
            traj.actions.push(action);
            traj.behavior_logps.push(logp);
        }
        let reward = match self {
            Environment::Bandit(b) => {
                let u: f64 = rng.random();
                f64::from(u8::from(u < b.reward_table[context][traj.actions[0]]))
            }
            Environment::Chain(c) => {
                let success = traj
                    .actions
                    .iter()
                    .enumerate()
                    .all(|(t, &a)| a == c.correct[context][t]);
                let flip = c.label_noise > 0.0 && rng.random::<f64>() < c.label_noise;
                f64::from(u8::from(success != flip))
            }
        };
        traj.rewards[len - 1] = reward;
        Ok(traj)
    }

    /// Samples `group_size` independent episodes from one context.
    pub fn rollout_group<R: Rng + ?Sized>(
        &self,
        params: &PolicyParams,
        context: usize,
        group_size: usize,
        rng: &mut R,
    ) -> Result<TrajectoryGroup> {
        if group_size < 2 {
            return Err(CapoError::usage(format!(
                "group size must be at least 2, got {group_size}"
            )));
        }
        let members = (0..group_size)
            .map(|_| self.rollout(params, context, rng))
            .collect::<Result<Vec<_>>>()?;
        TrajectoryGroup::new(context, members)
    }

    /// Exact `E[r | context]` under `params`.
    pub fn expected_context_reward(&self, params: &PolicyParams, context: usize) -> Result<f64> {
        self.check_params(params)?;
        self.check_context(context)?;
        Ok(match self {
            Environment::Bandit(b) => params
                .probs(context)?
                .iter()
                .zip(&b.reward_table[context])
                .map(|(p, r)| p * r)
                .sum(),
            Environment::Chain(c) => {
                let mut success = 1.0;
                for t in 0..c.chain_length {
                    let row = self.row_index(context, t);
                    success *= params.log_prob(row, c.correct[context][t])?.exp();
                }
                success * (1.0 - c.label_noise) + (1.0 - success) * c.label_noise
            }
        })
    }

    /// Exact expected reward under the uniform context distribution.
    pub fn expected_reward(&self, params: &PolicyParams) -> Result<f64> {
        let n = self.num_contexts();
        let mut total = 0.0;
        for c in 0..n {
            total += self.expected_context_reward(params, c)?;
        }
        Ok(total / n as f64)
    }

    /// Best expected reward over deterministic policies.
    pub fn optimal_expected_reward(&self) -> f64 {
        match self {
            Environment::Bandit(b) => {
                b.reward_table
                    .iter()
                    .map(|row| row.iter().copied().fold(f64::NEG_INFINITY, f64::max))
                    .sum::<f64>()
                    / b.reward_table.len() as f64
            }
            // Reward depends only on whether the whole chain is right.
            Environment::Chain(c) => c.expected_reward_given(true).max(c.expected_reward_given(false)),
        }
    }
}

/// Adds i.i.d. `N(0, sigma^2)` noise to every token advantage and refreshes
/// the trajectory aggregate.
pub fn inject_advantage_noise<R: Rng + ?Sized>(
    traj: &Trajectory,
    noise: NoiseModel,
    rng: &mut R,
) -> Result<Trajectory> {
    let tokens = traj.tokens()?;
    let mut out = traj.clone();
    if noise.sigma() == 0.0 {
        return Ok(out);
    }
    let noisy = tokens.iter().map(|a| a + noise.draw(rng)).collect();
    out.set_advantages(noisy)?;
    Ok(out)
}
