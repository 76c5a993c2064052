//! Phase resolution, the advantage-sign mask, and the static difficulty-ordered
//! baseline curriculum.

use std::fmt;
use std::str::FromStr;

use rand::Rng;

use crate::env::Environment;
use crate::error::{CapoError, Result};
use crate::policy::PolicyParams;

/// Default rollouts per context for difficulty estimation (pass@16).
pub const DEFAULT_DIFFICULTY_K: usize = 16;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Phase {
    /// Positive-only updates.
    Imitation,
    /// Full advantage spectrum.
    Discrimination,
}

impl Phase {
    pub fn as_str(self) -> &'static str {
        match self {
            Phase::Imitation => "imitation",
            Phase::Discrimination => "discrimination",
        }
    }
}

impl fmt::Display for Phase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Hard switch from imitation to discrimination after a fixed fraction of training.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PhaseSchedule {
    switch_fraction: f64,
    total_steps: usize,
}

impl PhaseSchedule {
    pub fn new(switch_fraction: f64, total_steps: usize) -> Result<Self> {
        if !(0.0..=1.0).contains(&switch_fraction) {
            return Err(CapoError::usage(format!(
                "switch fraction {switch_fraction} outside [0, 1]"
            )));
        }
        if total_steps == 0 {
            return Err(CapoError::usage("total steps must be positive"));
        }
        Ok(Self {
            switch_fraction,
            total_steps,
        })
    }

    pub fn switch_fraction(&self) -> f64 {
        self.switch_fraction
    }

    pub fn total_steps(&self) -> usize {
        self.total_steps
    }

    /// First discrimination step, `floor(switch_fraction * total_steps)`.
    pub fn switch_step(&self) -> usize {
        // The nudge keeps products like 0.29 * 100 from flooring to 28.
        ((self.switch_fraction * self.total_steps as f64) + 1e-9).floor() as usize
    }

    pub fn current_phase(&self, step: usize) -> Result<Phase> {
        if step >= self.total_steps {
            return Err(CapoError::usage(format!(
                "step {step} outside schedule of {} steps",
                self.total_steps
            )));
        }
        Ok(if step < self.switch_step() {
            Phase::Imitation
        } else {
            Phase::Discrimination
        })
    }
}

/// Which trajectories the objective sees: `A >= 0` while imitating, all otherwise.
pub fn advantage_mask(phase: Phase, scalar_advantages: &[f64]) -> Vec<bool> {
    match phase {
        Phase::Imitation => scalar_advantages.iter().map(|&a| a >= 0.0).collect(),
        Phase::Discrimination => vec![true; scalar_advantages.len()],
    }
}

/// Curriculum applied on top of the base algorithm.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Curriculum {
    /// Two-phase advantage curriculum.
    Capo,
    /// Plain base algorithm.
    None,
    /// Contexts fed in a fixed easy-to-hard order.
    Static,
}

impl Curriculum {
    pub fn as_str(self) -> &'static str {
        match self {
            Curriculum::Capo => "capo",
            Curriculum::None => "none",
            Curriculum::Static => "static",
        }
    }
}

impl fmt::Display for Curriculum {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Curriculum {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "capo" => Ok(Curriculum::Capo),
            "none" => Ok(Curriculum::None),
            "static" => Ok(Curriculum::Static),
            _ => Err(format!("unknown curriculum `{s}` (expected capo, none or static)")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DifficultyEstimate {
    pub context: usize,
    pub pass_rate: f64,
    pub k: usize,
}

/// Fraction of `k` rollouts from `context` that earned reward 1.
pub fn estimate_difficulty<R: Rng + ?Sized>(
    env: &Environment,
    params: &PolicyParams,
    context: usize,
    k: usize,
    rng: &mut R,
) -> Result<DifficultyEstimate> {
    if k == 0 {
        return Err(CapoError::usage("difficulty estimation needs k >= 1"));
    }
    let mut successes = 0usize;
    for _ in 0..k {
        if env.rollout(params, context, rng)?.total_reward() >= 1.0 {
            successes += 1;
        }
    }
    Ok(DifficultyEstimate {
        context,
        pass_rate: successes as f64 / k as f64,
        k,
    })
}

/// Contexts from easiest (highest pass rate) to hardest; ties by context id.
pub fn static_curriculum_order(estimates: &[DifficultyEstimate]) -> Result<Vec<usize>> {
    if estimates.is_empty() {
        return Err(CapoError::usage("no difficulty estimates to order"));
    }
    let mut sorted = estimates.to_vec();
    sorted.sort_by(|a, b| {
        b.pass_rate
            .total_cmp(&a.pass_rate)
            .then(a.context.cmp(&b.context))
    });
    Ok(sorted.into_iter().map(|e| e.context).collect())
}

/// Contexts for one training step of the static curriculum.
///
/// The usable prefix of `order` grows linearly from one context at step 0 to
/// the full list at the last step; groups cycle round-robin through it.
pub fn static_batch_contexts(
    order: &[usize],
    step: usize,
    total_steps: usize,
    batch_groups: usize,
) -> Vec<usize> {
    let n = order.len();
    let prefix = (((step + 1) * n).div_ceil(total_steps.max(1))).clamp(1, n);
    (0..batch_groups)
        .map(|g| order[(step * batch_groups + g) % prefix])
        .collect()
}
