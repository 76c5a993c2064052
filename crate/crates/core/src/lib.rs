//! Two-phase advantage-gated curriculum on top of GRPO, PPO, RLOO and
//! Reinforce++, run on small tabular environments, plus a Monte Carlo lab for
//! the bias and variance of positive-only gradient estimators.

pub mod advantage;
pub mod config;
pub mod curriculum;
pub mod env;
pub mod error;
pub mod lab;
pub mod objective;
pub mod policy;
pub mod rng;
pub mod trainer;

pub use advantage::{Algo, EstimatorKind, TrajectoryGroup, ValueTable};
pub use curriculum::{Curriculum, Phase, PhaseSchedule};
pub use env::{ChainTask, Environment, GroupedBandit, NoiseModel};
pub use error::{CapoError, Result};
pub use lab::{EstimatorPhase, GradientStats, StepSchedule};
pub use objective::{ClipConfig, ObjectiveReport};
pub use policy::{ActionSpace, PolicyParams, ReferencePolicy, Trajectory};
pub use trainer::{LearningRate, MetricRecord, TrainConfig, TrainOutput};
