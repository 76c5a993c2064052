//! Line-based `key=value` files for environments and training runs.
//!
//! Blank lines and `#` comments are ignored, keys may appear once, and keys
//! outside the known set are rejected with their line number.
//!
//! Environment keys: `env` (`bandit` or `chain`), `contexts`, `actions`,
//! `chain_length`, `label_noise`, `reward_row.<c>=p1,p2,...` (bandit) and
//! `correct_row.<c>=a1,a2,...` (chain, optional).
//!
//! Training keys: `algo`, `curriculum`, `switch_fraction`, `total_steps`,
//! `group_size`, `batch_groups`, `epsilon`, `beta`, `lr`, `lr_schedule`
//! (`fixed` or `robbins_monro`), `lr_tau`, `gamma`, `lam`, `inner_epochs`,
//! `eps_std`, `difficulty_k` and the mandatory `seed`.

use std::collections::BTreeMap;
use std::fmt::Display;
use std::str::FromStr;

use crate::env::{ChainTask, Environment, GroupedBandit};
use crate::error::{CapoError, Result};
use crate::lab::StepSchedule;
use crate::objective::ClipConfig;
use crate::trainer::{LearningRate, TrainConfig};

const ENV_KEYS: [&str; 5] = ["env", "contexts", "actions", "chain_length", "label_noise"];
const TRAIN_KEYS: [&str; 16] = [
    "algo",
    "curriculum",
    "switch_fraction",
    "total_steps",
    "group_size",
    "batch_groups",
    "epsilon",
    "beta",
    "lr",
    "lr_schedule",
    "lr_tau",
    "gamma",
    "lam",
    "inner_epochs",
    "eps_std",
    "difficulty_k",
];
const DEFAULT_LR_TAU: f64 = 100.0;

/// Parsed `key=value` pairs with the line each came from.
#[derive(Debug, Clone, Default)]
pub struct KeyValues {
    entries: BTreeMap<String, (usize, String)>,
}

impl KeyValues {
    pub fn parse(text: &str) -> Result<Self> {
        let mut entries = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line_no = i + 1;
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| CapoError::config(line_no, format!("expected key=value, got `{line}`")))?;
            let key = key.trim().to_string();
            if key.is_empty() {
                return Err(CapoError::config(line_no, "empty key"));
            }
            if let Some((first, _)) = entries.get(&key) {
                return Err(CapoError::config(
                    line_no,
                    format!("duplicate key `{key}` (first set on line {first})"),
                ));
            }
            entries.insert(key, (line_no, value.trim().to_string()));
        }
        Ok(Self { entries })
    }

    /// Line number to blame for a missing key: one past the last line.
    fn end_line(&self) -> usize {
        self.entries.values().map(|(l, _)| *l).max().unwrap_or(0) + 1
    }

    fn raw(&self, key: &str) -> Option<&(usize, String)> {
        self.entries.get(key)
    }

    fn get<T: FromStr>(&self, key: &str) -> Result<Option<T>>
    where
        T::Err: Display,
    {
        match self.entries.get(key) {
            None => Ok(None),
            Some((line, value)) => value
                .parse()
                .map(Some)
                .map_err(|e| CapoError::config(*line, format!("bad value for `{key}`: {e}"))),
        }
    }

    fn require<T: FromStr>(&self, key: &str) -> Result<T>
    where
        T::Err: Display,
    {
        self.get(key)?
            .ok_or_else(|| CapoError::config(self.end_line(), format!("missing required key `{key}`")))
    }

    fn list<T: FromStr>(&self, key: &str) -> Result<Option<Vec<T>>>
    where
        T::Err: Display,
    {
        match self.entries.get(key) {
            None => Ok(None),
            Some((line, value)) => value
                .split(',')
                .map(|v| v.trim().parse())
                .collect::<std::result::Result<Vec<T>, _>>()
                .map(Some)
                .map_err(|e| CapoError::config(*line, format!("bad list for `{key}`: {e}"))),
        }
    }

    fn line_of(&self, key: &str) -> usize {
        self.raw(key).map_or(self.end_line(), |(l, _)| *l)
    }

    /// Rejects keys that are neither in `allowed` nor `<prefix>.<index>` for an allowed prefix.
    fn reject_unknown(&self, allowed: &[&str], prefixes: &[&str]) -> Result<()> {
        for (key, (line, _)) in &self.entries {
            let indexed = key.split_once('.').is_some_and(|(p, idx)| {
                prefixes.contains(&p) && idx.parse::<usize>().is_ok()
            });
            if !indexed && !allowed.contains(&key.as_str()) {
                return Err(CapoError::config(*line, format!("unknown key `{key}`")));
            }
        }
        Ok(())
    }
}

/// Wraps a constructor error with the line of the key it concerns.
fn at_line<T>(line: usize, r: Result<T>) -> Result<T> {
    r.map_err(|e| match e {
        CapoError::Usage(msg) => CapoError::config(line, msg),
        other => other,
    })
}

fn env_from_kv(kv: &KeyValues) -> Result<Environment> {
    let kind: String = kv.require("env")?;
    let env_line = kv.line_of("env");
    match kind.as_str() {
        "bandit" => {
            let contexts: usize = kv.require("contexts")?;
            let actions: usize = kv.require("actions")?;
            if kv.raw("chain_length").is_some() || kv.raw("label_noise").is_some() {
                return Err(CapoError::config(
                    kv.line_of("chain_length").min(kv.line_of("label_noise")),
                    "chain_length and label_noise only apply to env=chain",
                ));
            }
            let mut rows = Vec::with_capacity(contexts);
            for c in 0..contexts {
                let key = format!("reward_row.{c}");
                let row: Vec<f64> = kv.list(&key)?.ok_or_else(|| {
                    CapoError::config(kv.end_line(), format!("missing `{key}`"))
                })?;
                if row.len() != actions {
                    return Err(CapoError::config(
                        kv.line_of(&key),
                        format!("`{key}` has {} entries, expected {actions}", row.len()),
                    ));
                }
                rows.push(row);
            }
            check_indexed(kv, "reward_row", contexts)?;
            check_indexed(kv, "correct_row", 0)?;
            let bandit = at_line(env_line, GroupedBandit::new(rows))?;
            if !bandit.is_informative() {
                return Err(CapoError::config(
                    env_line,
                    "every reward row is uniform; no context has anything to learn",
                ));
            }
            Ok(bandit.into())
        }
        "chain" => {
            let contexts: usize = kv.require("contexts")?;
            let actions: usize = kv.require("actions")?;
            let chain_length: usize = kv.require("chain_length")?;
            let label_noise: f64 = kv.get("label_noise")?.unwrap_or(0.0);
            check_indexed(kv, "reward_row", 0)?;
            check_indexed(kv, "correct_row", contexts)?;
            let default = at_line(env_line, ChainTask::new(contexts, actions, chain_length))?;
            let mut correct = default.correct_rows().to_vec();
            for (c, row) in correct.iter_mut().enumerate() {
                if let Some(custom) = kv.list(&format!("correct_row.{c}"))? {
                    *row = custom;
                }
            }
            let task = at_line(env_line, ChainTask::with_correct(actions, chain_length, correct))?;
            let task = at_line(kv.line_of("label_noise"), task.with_label_noise(label_noise))?;
            Ok(task.into())
        }
        other => Err(CapoError::config(
            env_line,
            format!("unknown env `{other}` (expected bandit or chain)"),
        )),
    }
}

/// Indexed keys `<prefix>.<i>` must satisfy `i < limit`.
fn check_indexed(kv: &KeyValues, prefix: &str, limit: usize) -> Result<()> {
    for (key, (line, _)) in &kv.entries {
        if let Some((p, idx)) = key.split_once('.') {
            if p == prefix && idx.parse::<usize>().map_or(true, |i| i >= limit) {
                return Err(CapoError::config(*line, format!("unexpected key `{key}`")));
            }
        }
    }
    Ok(())
}

/// Parses a standalone environment file.
pub fn parse_env(text: &str) -> Result<Environment> {
    let kv = KeyValues::parse(text)?;
    kv.reject_unknown(&ENV_KEYS, &["reward_row", "correct_row"])?;
    env_from_kv(&kv)
}

/// Key=value lines describing an environment.
pub fn env_to_kv(env: &Environment) -> Vec<(String, String)> {
    let join = |xs: &[String]| xs.join(",");
    let mut out = Vec::new();
    match env {
        Environment::Bandit(b) => {
            out.push(("env".into(), "bandit".into()));
            out.push(("contexts".into(), env.num_contexts().to_string()));
            out.push(("actions".into(), env.num_actions().to_string()));
            for (c, row) in b.reward_table().iter().enumerate() {
                let cells: Vec<String> = row.iter().map(f64::to_string).collect();
                out.push((format!("reward_row.{c}"), join(&cells)));
            }
        }
        Environment::Chain(t) => {
            out.push(("env".into(), "chain".into()));
            out.push(("contexts".into(), env.num_contexts().to_string()));
            out.push(("actions".into(), env.num_actions().to_string()));
            out.push(("chain_length".into(), t.chain_length().to_string()));
            out.push(("label_noise".into(), t.label_noise().to_string()));
            for (c, row) in t.correct_rows().iter().enumerate() {
                let cells: Vec<String> = row.iter().map(usize::to_string).collect();
                out.push((format!("correct_row.{c}"), join(&cells)));
            }
        }
    }
    out
}

impl TrainConfig {
    /// Parses a training config; environment keys live in the same file.
    pub fn parse(text: &str) -> Result<Self> {
        let kv = KeyValues::parse(text)?;
        let mut allowed: Vec<&str> = ENV_KEYS.to_vec();
        allowed.extend(TRAIN_KEYS);
        allowed.push("seed");
        kv.reject_unknown(&allowed, &["reward_row", "correct_row"])?;

        let seed: u64 = kv.require("seed")?;
        let env = env_from_kv(&kv)?;
        let mut cfg = TrainConfig::new(env, seed);

        if let Some(algo) = kv.get("algo")? {
            cfg.algo = algo;
        }
        if let Some(c) = kv.get("curriculum")? {
            cfg.curriculum = c;
        }
        macro_rules! set {
            ($key:literal, $field:expr) => {
                if let Some(v) = kv.get($key)? {
                    $field = v;
                }
            };
        }
        set!("switch_fraction", cfg.switch_fraction);
        set!("total_steps", cfg.total_steps);
        set!("group_size", cfg.group_size);
        set!("batch_groups", cfg.batch_groups);
        set!("gamma", cfg.gamma);
        set!("lam", cfg.lam);
        set!("inner_epochs", cfg.inner_epochs);
        set!("eps_std", cfg.eps_std);
        set!("difficulty_k", cfg.difficulty_k);

        let epsilon = kv.get("epsilon")?.unwrap_or(cfg.clip.epsilon);
        let beta = kv.get("beta")?.unwrap_or(cfg.clip.beta);
        cfg.clip = at_line(kv.line_of("epsilon").min(kv.line_of("beta")), ClipConfig::new(epsilon, beta))?;

        let lr: f64 = kv.get("lr")?.unwrap_or(0.5);
        let schedule: String = kv.get("lr_schedule")?.unwrap_or_else(|| "fixed".into());
        cfg.learning_rate = match schedule.as_str() {
            "fixed" => {
                if kv.raw("lr_tau").is_some() {
                    return Err(CapoError::config(kv.line_of("lr_tau"), "lr_tau requires lr_schedule=robbins_monro"));
                }
                LearningRate::Fixed(lr)
            }
            "robbins_monro" => {
                let tau = kv.get("lr_tau")?.unwrap_or(DEFAULT_LR_TAU);
                LearningRate::RobbinsMonro(at_line(kv.line_of("lr_tau"), StepSchedule::new(lr, tau))?)
            }
            other => {
                return Err(CapoError::config(
                    kv.line_of("lr_schedule"),
                    format!("unknown lr_schedule `{other}` (expected fixed or robbins_monro)"),
                ))
            }
        };

        at_line(kv.end_line(), cfg.validate())?;
        Ok(cfg)
    }

    /// Every setting as explicit key=value pairs, parseable by [`TrainConfig::parse`].
    pub fn to_kv(&self) -> Vec<(String, String)> {
        let mut out: Vec<(String, String)> = vec![
            ("seed".into(), self.seed.to_string()),
            ("algo".into(), self.algo.to_string()),
            ("curriculum".into(), self.curriculum.to_string()),
            ("switch_fraction".into(), self.switch_fraction.to_string()),
            ("total_steps".into(), self.total_steps.to_string()),
            ("group_size".into(), self.group_size.to_string()),
            ("batch_groups".into(), self.batch_groups.to_string()),
            ("epsilon".into(), self.clip.epsilon.to_string()),
            ("beta".into(), self.clip.beta.to_string()),
        ];
        match self.learning_rate {
            LearningRate::Fixed(lr) => {
                out.push(("lr".into(), lr.to_string()));
                out.push(("lr_schedule".into(), "fixed".into()));
            }
            LearningRate::RobbinsMonro(s) => {
                out.push(("lr".into(), s.alpha0().to_string()));
                out.push(("lr_schedule".into(), "robbins_monro".into()));
                out.push(("lr_tau".into(), s.tau().to_string()));
            }
        }
        out.extend([
            ("gamma".into(), self.gamma.to_string()),
            ("lam".into(), self.lam.to_string()),
            ("inner_epochs".into(), self.inner_epochs.to_string()),
            ("eps_std".into(), self.eps_std.to_string()),
            ("difficulty_k".into(), self.difficulty_k.to_string()),
        ]);
        out.extend(env_to_kv(&self.env));
        out
    }

    pub fn to_kv_string(&self) -> String {
        self.to_kv()
            .into_iter()
            .map(|(k, v)| format!("{k}={v}\n"))
            .collect()
    }
}
