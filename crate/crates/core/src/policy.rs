//! Tabular softmax policy.
//!
//! Each policy row is one discrete context (a bandit prompt, or one step of a
//! chain task) and holds `K` logits. Everything here is exact: log-probabilities,
//! score-function gradients, entropy and the categorical KL divergence to a
//! frozen reference copy.

use std::fmt;
use std::io::{BufRead, Write};

use rand::Rng;

use crate::error::{CapoError, Result};

/// Number of discrete actions available in every context.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ActionSpace {
    num_actions: usize,
}

impl ActionSpace {
    pub fn new(num_actions: usize) -> Result<Self> {
        if num_actions < 2 {
            return Err(CapoError::usage(format!(
                "action space needs at least 2 actions, got {num_actions}"
            )));
        }
        Ok(Self { num_actions })
    }

    pub fn num_actions(&self) -> usize {
        self.num_actions
    }
}

/// Row-major logit table of shape `num_contexts x num_actions`.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyParams {
    num_contexts: usize,
    num_actions: usize,
    logits: Vec<f64>,
}

/// Numerically stable log-softmax of one logit row.
pub fn log_softmax(row: &[f64]) -> Vec<f64> {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + row.iter().map(|z| (z - max).exp()).sum::<f64>().ln();
    row.iter().map(|z| z - lse).collect()
}

/// Softmax of one logit row.
pub fn softmax(row: &[f64]) -> Vec<f64> {
    log_softmax(row).into_iter().map(f64::exp).collect()
}

impl PolicyParams {
    /// The uniform policy.
    pub fn zeros(num_contexts: usize, actions: ActionSpace) -> Result<Self> {
        if num_contexts == 0 {
            return Err(CapoError::usage("policy needs at least one context"));
        }
        Ok(Self {
            num_contexts,
            num_actions: actions.num_actions(),
            logits: vec![0.0; num_contexts * actions.num_actions()],
        })
    }

    pub fn from_rows(rows: Vec<Vec<f64>>) -> Result<Self> {
        let num_contexts = rows.len();
        let num_actions = rows.first().map_or(0, Vec::len);
        let actions = ActionSpace::new(num_actions)?;
        let mut params = Self::zeros(num_contexts, actions)?;
        for (c, row) in rows.into_iter().enumerate() {
            if row.len() != num_actions {
                return Err(CapoError::usage(format!(
                    "row {c} has {} logits, expected {num_actions}",
                    row.len()
                )));
            }
            params.row_mut(c).copy_from_slice(&row);
        }
        params.check_finite()?;
        Ok(params)
    }

    pub fn from_flat(num_contexts: usize, num_actions: usize, logits: Vec<f64>) -> Result<Self> {
        ActionSpace::new(num_actions)?;
        if num_contexts == 0 || logits.len() != num_contexts * num_actions {
            return Err(CapoError::usage(format!(
                "flat logits of length {} do not fit {num_contexts}x{num_actions}",
                logits.len()
            )));
        }
        let params = Self {
            num_contexts,
            num_actions,
            logits,
        };
        params.check_finite()?;
        Ok(params)
    }

    fn check_finite(&self) -> Result<()> {
        if let Some(i) = self.logits.iter().position(|z| !z.is_finite()) {
            return Err(CapoError::usage(format!("logit {i} is not finite")));
        }
        Ok(())
    }

    pub fn num_contexts(&self) -> usize {
        self.num_contexts
    }

    pub fn num_actions(&self) -> usize {
        self.num_actions
    }

    /// Total number of logits, i.e. the length of every gradient vector.
    pub fn len(&self) -> usize {
        self.logits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.logits.is_empty()
    }

    pub fn logits(&self) -> &[f64] {
        &self.logits
    }

    pub fn logits_mut(&mut self) -> &mut [f64] {
        &mut self.logits
    }

    pub fn row(&self, context: usize) -> &[f64] {
        let k = self.num_actions;
        &self.logits[context * k..(context + 1) * k]
    }

    pub fn row_mut(&mut self, context: usize) -> &mut [f64] {
        let k = self.num_actions;
        &mut self.logits[context * k..(context + 1) * k]
    }

    pub(crate) fn check_context(&self, context: usize) -> Result<()> {
        if context >= self.num_contexts {
            return Err(CapoError::usage(format!(
                "context {context} out of range (policy has {})",
                self.num_contexts
            )));
        }
        Ok(())
    }

    fn check_index(&self, context: usize, action: usize) -> Result<()> {
        self.check_context(context)?;
        if action >= self.num_actions {
            return Err(CapoError::usage(format!(
                "action {action} out of range (policy has {})",
                self.num_actions
            )));
        }
        Ok(())
    }

    pub fn log_probs(&self, context: usize) -> Result<Vec<f64>> {
        self.check_context(context)?;
        Ok(log_softmax(self.row(context)))
    }

    pub fn probs(&self, context: usize) -> Result<Vec<f64>> {
        self.check_context(context)?;
        Ok(softmax(self.row(context)))
    }

    /// `log pi(action | context)`.
    pub fn log_prob(&self, context: usize, action: usize) -> Result<f64> {
        self.check_index(context, action)?;
        Ok(log_softmax(self.row(context))[action])
    }

    /// Draws an action by inverting the CDF with a single uniform.
    pub fn sample_action<R: Rng + ?Sized>(
        &self,
        context: usize,
        rng: &mut R,
    ) -> Result<(usize, f64)> {
        let logp = self.log_probs(context)?;
        let u: f64 = rng.random();
        let mut cumulative = 0.0;
        let mut action = self.num_actions - 1;
        for (a, lp) in logp.iter().enumerate() {
            cumulative += lp.exp();
            if u < cumulative {
                action = a;
                break;
            }
        }
        Ok((action, logp[action]))
    }

    /// Index of the most likely action, ties broken towards the lowest id.
    pub fn greedy_action(&self, context: usize) -> Result<usize> {
        self.check_context(context)?;
        let row = self.row(context);
        let mut best = 0;
        for a in 1..row.len() {
            if row[a] > row[best] {
                best = a;
            }
        }
        Ok(best)
    }

    /// Score function `grad log pi(action | context)` over the full logit table.
    ///
    /// Only row `context` is non-zero; it equals `onehot(action) - softmax(row)`.
    pub fn logprob_gradient(&self, context: usize, action: usize) -> Result<Vec<f64>> {
        self.check_index(context, action)?;
        let mut grad = vec![0.0; self.logits.len()];
        self.accumulate_score(context, action, 1.0, &mut grad);
        Ok(grad)
    }

    /// Adds `weight * grad log pi(action | context)` into `out`. Indices must be valid.
    pub(crate) fn accumulate_score(&self, context: usize, action: usize, weight: f64, out: &mut [f64]) {
        let k = self.num_actions;
        let probs = softmax(self.row(context));
        let dst = &mut out[context * k..(context + 1) * k];
        for (a, (g, p)) in dst.iter_mut().zip(&probs).enumerate() {
            let onehot = if a == action { 1.0 } else { 0.0 };
            *g += weight * (onehot - p);
        }
    }

    /// Shannon entropy (nats) of the context's action distribution.
    pub fn entropy(&self, context: usize) -> Result<f64> {
        let logp = self.log_probs(context)?;
        let h: f64 = -logp.iter().map(|lp| lp.exp() * lp).sum::<f64>();
        Ok(h.max(0.0))
    }

    /// Entropy averaged uniformly over all contexts.
    pub fn mean_entropy(&self) -> f64 {
        (0..self.num_contexts)
            .map(|c| self.entropy(c).expect("context in range"))
            .sum::<f64>()
            / self.num_contexts as f64
    }

    /// Mean over `contexts` of the exact categorical `KL(pi || reference)`.
    ///
    /// An empty context set yields zero.
    pub fn kl_to_reference(&self, reference: &ReferencePolicy, contexts: &[usize]) -> Result<f64> {
        self.check_same_shape(reference.params())?;
        if contexts.is_empty() {
            return Ok(0.0);
        }
        let mut total = 0.0;
        for &c in contexts {
            total += row_kl(self.row(c), reference.params().row(c));
        }
        Ok(total / contexts.len() as f64)
    }

    /// KL averaged over every context.
    pub fn mean_kl_to_reference(&self, reference: &ReferencePolicy) -> Result<f64> {
        let all: Vec<usize> = (0..self.num_contexts).collect();
        self.kl_to_reference(reference, &all)
    }

    pub(crate) fn check_same_shape(&self, other: &PolicyParams) -> Result<()> {
        if self.num_contexts != other.num_contexts || self.num_actions != other.num_actions {
            return Err(CapoError::usage(format!(
                "shape mismatch: {}x{} vs {}x{}",
                self.num_contexts, self.num_actions, other.num_contexts, other.num_actions
            )));
        }
        Ok(())
    }

    /// `self += scale * direction`.
    pub fn add_scaled(&mut self, direction: &[f64], scale: f64) -> Result<()> {
        if direction.len() != self.logits.len() {
            return Err(CapoError::usage(format!(
                "direction has length {}, params have {}",
                direction.len(),
                self.logits.len()
            )));
        }
        for (z, d) in self.logits.iter_mut().zip(direction) {
            *z += scale * d;
        }
        Ok(())
    }

    /// Writes the plain-text checkpoint: a `contexts=<n> actions=<K>` header,
    /// then one whitespace-separated logit row per context.
    pub fn write_checkpoint<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        writeln!(out, "contexts={} actions={}", self.num_contexts, self.num_actions)?;
        for c in 0..self.num_contexts {
            let row: Vec<String> = self.row(c).iter().map(|z| format!("{z:.17e}")).collect();
            writeln!(out, "{}", row.join(" "))?;
        }
        Ok(())
    }

    pub fn read_checkpoint<R: BufRead>(input: R) -> Result<Self> {
        let mut lines = input.lines().enumerate();
        let (_, header) = lines
            .next()
            .ok_or_else(|| CapoError::config(1, "empty checkpoint"))?;
        let header = header?;
        let (contexts, actions) = parse_header(&header).ok_or_else(|| {
            CapoError::config(1, format!("bad checkpoint header `{header}`"))
        })?;
        let mut logits = Vec::with_capacity(contexts * actions);
        for (i, line) in lines {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let row: Vec<f64> = line
                .split_whitespace()
                .map(str::parse)
                .collect::<std::result::Result<_, _>>()
                .map_err(|e| CapoError::config(i + 1, format!("bad logit: {e}")))?;
            if row.len() != actions {
                return Err(CapoError::config(
                    i + 1,
                    format!("expected {actions} logits, found {}", row.len()),
                ));
            }
            logits.extend(row);
        }
        if logits.len() != contexts * actions {
            return Err(CapoError::config(
                contexts + 1,
                format!("expected {contexts} rows, found {}", logits.len() / actions),
            ));
        }
        Self::from_flat(contexts, actions, logits)
    }
}

fn parse_header(header: &str) -> Option<(usize, usize)> {
    let mut contexts = None;
    let mut actions = None;
    for field in header.split_whitespace() {
        let (key, value) = field.split_once('=')?;
        match key {
            "contexts" => contexts = value.parse().ok(),
            "actions" => actions = value.parse().ok(),
            _ => return None,
        }
    }
    Some((contexts?, actions?))
}

fn row_kl(row: &[f64], reference_row: &[f64]) -> f64 {
    let logp = log_softmax(row);
    let logq = log_softmax(reference_row);
    let kl: f64 = logp
        .iter()
        .zip(&logq)
        .map(|(lp, lq)| lp.exp() * (lp - lq))
        .sum();
    kl.max(0.0)
}

/// Frozen copy of the policy taken when training starts.
#[derive(Debug, Clone, PartialEq)]
pub struct ReferencePolicy(PolicyParams);

impl ReferencePolicy {
    pub fn capture(params: &PolicyParams) -> Self {
        Self(params.clone())
    }

    pub fn params(&self) -> &PolicyParams {
        &self.0
    }
}

/// One sampled episode.
///
/// `context_ids` are policy rows (one per step); `context` is the prompt the
/// episode was started from. Advantage fields stay `None` until an estimator
/// fills them.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub context: usize,
    pub context_ids: Vec<usize>,
    pub actions: Vec<usize>,
    pub behavior_logps: Vec<f64>,
    pub rewards: Vec<f64>,
    pub advantage_tokens: Option<Vec<f64>>,
    pub advantage_scalar: Option<f64>,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.actions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.actions.is_empty()
    }

    /// Undiscounted episode return.
    pub fn total_reward(&self) -> f64 {
        self.rewards.iter().sum()
    }

    /// Stores token advantages and their aggregate (the token mean).
    pub fn set_advantages(&mut self, tokens: Vec<f64>) -> Result<()> {
        if tokens.len() != self.len() {
            return Err(CapoError::usage(format!(
                "{} advantage values for a trajectory of length {}",
                tokens.len(),
                self.len()
            )));
        }
        self.advantage_scalar = Some(crate::advantage::trajectory_aggregate(&tokens)?);
        self.advantage_tokens = Some(tokens);
        Ok(())
    }

    pub(crate) fn tokens(&self) -> Result<&[f64]> {
        self.advantage_tokens
            .as_deref()
            .ok_or_else(|| CapoError::usage("trajectory advantages not populated"))
    }

    pub(crate) fn scalar(&self) -> Result<f64> {
        self.advantage_scalar
            .ok_or_else(|| CapoError::usage("trajectory advantages not populated"))
    }
}

impl fmt::Display for PolicyParams {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for c in 0..self.num_contexts {
            let probs = softmax(self.row(c));
            let cells: Vec<String> = probs.iter().map(|p| format!("{p:.3}")).collect();
            writeln!(f, "{c}: [{}]", cells.join(", "))?;
        }
        Ok(())
    }
}
