//! Multi-agent constrained trust-region training.

mod cg;
mod gae;
pub mod tabular;
mod trainer;
mod trust_region;

pub use cg::conjugate_gradient;
pub use gae::{compute_gae, discounted_sum, estimate_cost_return};
pub use trainer::{
    agent_update, fit_value_networks, normalize, sequential_joint_update, train, train_from, AgentBatch, JointBatch,
    TrainConfig, TrainOutcome, TrainState, TrainedModel, TrainingLog, TrainingRow, UpdateReport,
};
pub use trust_region::{cpo_direction, line_search_accepts, StepCase, StepDirection};
