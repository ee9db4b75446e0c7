//! Natural-language command execution for a simulated desk robot.
//!
//! A command is decomposed into motion-function calls by a planner backend,
//! bound to perceived object poses and executed in a 2D world. When a motion
//! fails, an operator demonstration is fitted as a dynamic movement primitive
//! and replayed in place of the failing function from then on.

// `!(x > 0.0)` is used on purpose so NaN is rejected too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod correction;
pub mod dmp;
pub mod executor;
pub mod geometry;
pub mod metrics;
pub mod perception;
pub mod planner;

use thiserror::Error;

/// Problems with files and settings supplied from outside.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum ConfigError {
    #[error("parse error: {0}")]
    Parse(String),
    #[error("cannot read {0}: {1}")]
    Io(String, String),
    #[error("invalid configuration: {0}")]
    Invalid(String),
}

pub use correction::{
    CorrectionContext, CorrectionLoop, CorrectionTrigger, DmpOverride, OverrideKey,
    OverrideRegistry,
};
pub use dmp::{canonical_phase, fit_dmp, DmpConfig, DmpError, DmpModel, Trajectory};
pub use executor::{
    grasp_feasibility, run_program, ExecutionReport, GoalPredicate, MotionFunction, ObjectShape,
    RobotConfig, ShapeKind, WorldState,
};
pub use geometry::{Pose2, Rect};
pub use metrics::{render_report, run_trials, Experiment, MetricsRow, ReportFormat, Suite};
pub use perception::{detect, DetectorConfig, ObjectRegistry, SceneObject};
pub use planner::{
    assemble_program, build_plan, PlanBackend, PlanError, StubBackend, StubTable, TaskPlan,
};
