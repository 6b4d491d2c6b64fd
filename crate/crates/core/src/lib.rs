//! Distributed multi-robot active information acquisition.
//!
//! A team of grid-world robots estimates a hidden Gaussian state (the stacked
//! positions of a set of targets). Each robot keeps a local information-form
//! belief, fuses it with its neighbours through a distributed Kalman consensus
//! step, renders the result as an uncertainty heatmap and feeds it, together
//! with occupancy and position grids, to a small residual convolutional
//! policy. The policy is trained by imitating a centralized best-first
//! planner.
//!
//! Module map:
//!
//! * [`world`]: occupancy grids, robot kinematics, the hidden process and the
//!   sensing model.
//! * [`estimation`]: information-form Kalman filtering and the consensus
//!   update.
//! * [`graph`]: communication graphs, consensus weights, position grids and
//!   failure injection.
//! * [`gblock`]: heatmap projection, the policy network and the per-step
//!   graph update.
//! * [`expert`]: the centralized planner and the two baselines.
//! * [`imitation`]: dataset generation and supervised training.
//! * [`harness`]: closed-loop episodes, metrics and robustness runs.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod error;
pub mod estimation;
pub mod expert;
pub mod gblock;
pub mod graph;
pub mod grid;
pub mod harness;
pub mod imitation;
pub mod linalg;
pub mod world;

pub use error::{Error, Result};
pub use estimation::{Belief, InnovationInfo, TerminationMode};
pub use expert::Plan;
pub use gblock::{ActionDist, Architecture, ChannelStack, HeatGrid, PolicyParams};
pub use graph::{EdgeSet, NetworkGraph, NodeAttribute};
pub use grid::Grid;
pub use harness::{EpisodeResult, MetricsReport, ScenarioConfig};
pub use imitation::{DatasetSample, TrainConfig};
pub use world::{Action, Cell, GridMap, HiddenState, SensorSpec};
