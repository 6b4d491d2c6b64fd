//! Closed-loop evaluation: scenario sampling, episodes for every policy,
//! flowtime and success metrics, and failure-injection runs.

mod episode;
mod metrics;
mod scenario;

pub use episode::{
    run_episode, run_episode_with_snapshots, team_belief, EpisodeResult, Policy, RobotTrace, Snapshot, TerminationReason,
};
pub use metrics::{
    batch_evaluate, default_cap, flowtime_increase, robustness_scenario, success_rate, InstanceRecord, MetricsReport,
    SUCCESS_FACTOR,
};
pub use scenario::{Dynamics, Instance, ScenarioConfig};
