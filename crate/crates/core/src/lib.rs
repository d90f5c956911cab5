//! Multicast loss tomography over networks covered by several source-rooted
//! multicast trees.
//!
//! The crate covers the whole chain from a topology description to per-link
//! loss estimates:
//!
//! * [`topology`] describes and validates overlapping trees, finds joint
//!   nodes and cuts the network into independent trees,
//! * [`sim`] draws Bernoulli probe losses and records receiver bitmaps,
//! * [`stats`] reduces bitmaps to confirmed-pass counts,
//! * [`path`] solves the per-node likelihood polynomial and maps path rates
//!   to link rates,
//! * [`pipeline`] runs the same estimate piecewise over the decomposition,
//! * [`likelihood`] maximizes the link-level log-likelihood directly and is
//!   used to cross-check the other estimators,
//! * [`consistency`] flags degenerate data before estimation,
//! * [`harness`] runs seeded experiments and writes reports.

pub mod consistency;
pub mod error;
pub mod fixtures;
pub mod harness;
pub mod likelihood;
pub mod path;
pub mod pipeline;
pub mod report;
pub mod sim;
pub mod solver;
pub mod stats;
pub mod topology;

pub use consistency::{ConsistencyPolicy, ConsistencyReport, EstimationPlan, Flag};
pub use error::{Error, Result};
pub use path::{estimate_all_paths, EstimateReport, LinkEstimate, PathEstimatorConfig};
pub use sim::{simulate, LossModel, ObservationSet};
pub use stats::{build_stats, StatTable};
pub use topology::{LinkId, NodeId, SourceId, Topology};
