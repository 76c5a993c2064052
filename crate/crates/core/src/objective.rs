//! Clipped surrogate objective with a KL anchor, in the filtered (imitation)
//! and full-spectrum (discrimination) forms, with exact gradients.
//!
//! For a batch of `N` trajectories the objective is
//!
//! ```text
//! J = 1/N * sum_i m_i * (1/T_i) * sum_t min(rho_t A_t, clip(rho_t, 1-eps, 1+eps) A_t)
//!     - beta * KL(pi || pi_ref)
//! ```
//!
//! where `m_i` is the curriculum mask (`A(tau_i) >= 0` while imitating, always 1
//! otherwise) and the KL is the exact categorical divergence averaged over the
//! policy rows the batch visited. Filtered trajectories keep their place in the
//! denominator `N`.

use std::collections::BTreeSet;

use crate::curriculum::{advantage_mask, Phase};
use crate::error::{CapoError, Result};
use crate::policy::{log_softmax, PolicyParams, ReferencePolicy, Trajectory};

/// Clip radius and KL coefficient.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClipConfig {
    pub epsilon: f64,
    pub beta: f64,
}

impl ClipConfig {
    pub fn new(epsilon: f64, beta: f64) -> Result<Self> {
        if !(epsilon > 0.0 && epsilon.is_finite()) {
            return Err(CapoError::usage(format!("clip epsilon must be > 0, got {epsilon}")));
        }
        if !(beta >= 0.0 && beta.is_finite()) {
            return Err(CapoError::usage(format!("KL beta must be >= 0, got {beta}")));
        }
        Ok(Self { epsilon, beta })
    }
}

impl Default for ClipConfig {
    fn default() -> Self {
        Self {
            epsilon: 0.2,
            beta: 0.02,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ObjectiveReport {
    pub objective_value: f64,
    /// Gradient with respect to the logits, same layout as [`PolicyParams::logits`].
    pub gradient: Vec<f64>,
    /// Trajectories that passed the phase mask.
    pub num_contributing: usize,
    pub kl_value: f64,
}

impl ObjectiveReport {
    pub fn gradient_norm(&self) -> f64 {
        self.gradient.iter().map(|g| g * g).sum::<f64>().sqrt()
    }
}

pub fn importance_ratio(new_logp: f64, old_logp: f64) -> f64 {
    (new_logp - old_logp).exp()
}

pub fn clipped_term(rho: f64, advantage: f64, epsilon: f64) -> f64 {
    let clipped = rho.clamp(1.0 - epsilon, 1.0 + epsilon);
    (rho * advantage).min(clipped * advantage)
}

/// Derivative of [`clipped_term`] with respect to `rho`, following the active
/// branch of the min. Inside the clip range both branches agree.
fn clipped_term_slope(rho: f64, advantage: f64, epsilon: f64) -> f64 {
    let clipped = rho.clamp(1.0 - epsilon, 1.0 + epsilon);
    if clipped == rho || rho * advantage < clipped * advantage {
        advantage
    } else {
        0.0
    }
}

/// Distinct policy rows visited by the batch, ascending.
pub fn visited_rows(batch: &[Trajectory]) -> Vec<usize> {
    let rows: BTreeSet<usize> = batch.iter().flat_map(|t| t.context_ids.iter().copied()).collect();
    rows.into_iter().collect()
}

/// The general form behind both phases.
///
/// Trajectories with `mask[i] == false` are skipped; `denominator` is the
/// batch-size normalizer and `kl_rows` the rows the KL anchor averages over.
pub fn clipped_objective(
    batch: &[Trajectory],
    mask: &[bool],
    denominator: usize,
    kl_rows: &[usize],
    params: &PolicyParams,
    reference: &ReferencePolicy,
    cfg: &ClipConfig,
) -> Result<ObjectiveReport> {
    if mask.len() != batch.len() {
        return Err(CapoError::usage(format!(
            "mask has {} entries for {} trajectories",
            mask.len(),
            batch.len()
        )));
    }
    if denominator == 0 {
        return Err(CapoError::usage("objective denominator must be positive"));
    }
    params.check_same_shape(reference.params())?;

    let k = params.num_actions();
    let mut gradient = vec![0.0; params.len()];
    let mut surrogate = 0.0;
    let mut num_contributing = 0;
    let norm = 1.0 / denominator as f64;

    for (traj, _) in batch.iter().zip(mask).filter(|(_, &keep)| keep) {
        num_contributing += 1;
        let tokens = traj.tokens()?;
        let inv_len = 1.0 / traj.len() as f64;
        let mut traj_sum = 0.0;
        for t in 0..traj.len() {
            let row = traj.context_ids[t];
            let action = traj.actions[t];
            params.check_context(row)?;
            if action >= k {
                return Err(CapoError::usage(format!("action {action} out of range")));
            }
            let logp = log_softmax(params.row(row));
            let rho = importance_ratio(logp[action], traj.behavior_logps[t]);
            let adv = tokens[t];
            traj_sum += clipped_term(rho, adv, cfg.epsilon);
            let slope = clipped_term_slope(rho, adv, cfg.epsilon);
            if slope != 0.0 {
                // d rho / d z = rho * (onehot - p)
                params.accumulate_score(row, action, norm * inv_len * slope * rho, &mut gradient);
            }
        }
        surrogate += traj_sum * inv_len;
    }
    surrogate *= norm;

    let mut kl_value = 0.0;
    if !kl_rows.is_empty() {
        let scale = 1.0 / kl_rows.len() as f64;
        for &row in kl_rows {
            params.check_context(row)?;
            let logp = log_softmax(params.row(row));
            let logq = log_softmax(reference.params().row(row));
            let row_kl: f64 = logp.iter().zip(&logq).map(|(lp, lq)| lp.exp() * (lp - lq)).sum();
            kl_value += row_kl * scale;
            if cfg.beta != 0.0 {
                let dst = &mut gradient[row * k..(row + 1) * k];
                for ((g, lp), lq) in dst.iter_mut().zip(&logp).zip(&logq) {
                    // d KL_row / d z_j = p_j (log p_j - log q_j - KL_row)
                    *g -= cfg.beta * scale * lp.exp() * (lp - lq - row_kl);
                }
            }
        }
    }

    Ok(ObjectiveReport {
        objective_value: surrogate - cfg.beta * kl_value,
        gradient,
        num_contributing,
        kl_value,
    })
}

fn scalar_advantages(batch: &[Trajectory]) -> Result<Vec<f64>> {
    batch.iter().map(Trajectory::scalar).collect()
}

/// Objective for the given curriculum phase.
pub fn phase_objective(
    phase: Phase,
    batch: &[Trajectory],
    params: &PolicyParams,
    reference: &ReferencePolicy,
    cfg: &ClipConfig,
) -> Result<ObjectiveReport> {
    if batch.is_empty() {
        return Err(CapoError::usage("objective of an empty batch"));
    }
    let mask = advantage_mask(phase, &scalar_advantages(batch)?);
    clipped_objective(
        batch,
        &mask,
        batch.len(),
        &visited_rows(batch),
        params,
        reference,
        cfg,
    )
}

/// Imitation objective: only trajectories with `A(tau) >= 0` contribute.
pub fn phase1_objective(
    batch: &[Trajectory],
    params: &PolicyParams,
    reference: &ReferencePolicy,
    cfg: &ClipConfig,
) -> Result<ObjectiveReport> {
    phase_objective(Phase::Imitation, batch, params, reference, cfg)
}

/// Discrimination objective over the full advantage spectrum.
pub fn phase2_objective(
    batch: &[Trajectory],
    params: &PolicyParams,
    reference: &ReferencePolicy,
    cfg: &ClipConfig,
) -> Result<ObjectiveReport> {
    phase_objective(Phase::Discrimination, batch, params, reference, cfg)
}

/// Maximum relative discrepancy between the analytic gradient and central
/// finite differences of the objective value.
///
/// Logits whose row carries a token with `rho` within `1e-6 + 2 * step * rho`
/// of a clip boundary are skipped, since a difference quotient straddling the
/// kink is meaningless. The relative error of a coordinate is
/// `|analytic - fd| / max(|analytic|, |fd|, 1e-4)`.
pub fn surrogate_gradient_check(
    phase: Phase,
    params: &PolicyParams,
    reference: &ReferencePolicy,
    batch: &[Trajectory],
    cfg: &ClipConfig,
    step: f64,
) -> Result<f64> {
    if !(step > 0.0 && step <= 1e-3) {
        return Err(CapoError::usage(format!("finite-difference step {step} outside (0, 1e-3]")));
    }
    let analytic = phase_objective(phase, batch, params, reference, cfg)?.gradient;
    let kinked = kinked_rows(params, batch, cfg.epsilon, step);
    let k = params.num_actions();
    let mut worst: f64 = 0.0;
    let mut probe = params.clone();
    for i in 0..params.len() {
        if kinked.contains(&(i / k)) {
            continue;
        }
        let base = params.logits()[i];
        probe.logits_mut()[i] = base + step;
        let plus = phase_objective(phase, batch, &probe, reference, cfg)?.objective_value;
        probe.logits_mut()[i] = base - step;
        let minus = phase_objective(phase, batch, &probe, reference, cfg)?.objective_value;
        probe.logits_mut()[i] = base;
        let fd = (plus - minus) / (2.0 * step);
        let scale = analytic[i].abs().max(fd.abs()).max(1e-4);
        worst = worst.max((analytic[i] - fd).abs() / scale);
    }
    Ok(worst)
}

fn kinked_rows(params: &PolicyParams, batch: &[Trajectory], epsilon: f64, step: f64) -> BTreeSet<usize> {
    let mut rows = BTreeSet::new();
    for traj in batch {
        for t in 0..traj.len() {
            let row = traj.context_ids[t];
            let logp = log_softmax(params.row(row))[traj.actions[t]];
            let rho = importance_ratio(logp, traj.behavior_logps[t]);
            let margin = 1e-6 + 2.0 * step * rho;
            if (rho - (1.0 - epsilon)).abs() < margin || (rho - (1.0 + epsilon)).abs() < margin {
                rows.insert(row);
            }
        }
    }
    rows
}
