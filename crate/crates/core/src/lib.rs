//! Jacobian-routed two-objective optimization of additive perturbations on a
//! bilinear logit model.
//!
//! The model is `logits = (H + h)(W + w)^T` with frozen `H`, `W` and tunable
//! `(h, w)`. Two objectives are optimized: Heat (cross-entropy against the
//! targets) and Confidence (negative entropy of the softmax). At each step the
//! four gradient blocks are summarized into the six-term J6 or fifteen-term J+
//! attribution vector, and a strategy turns that vector into an update.

pub mod attrib;
pub mod check;
pub mod generate;
pub mod io;
pub mod linalg;
pub mod model;
pub mod optimizer;
pub mod strategy;

pub use attrib::{
    compute_gradient_set, j6, jplus, Alignment, AlignmentMode, AttribError, GradientSet, J6Vector,
    JPlusVector, Scale,
};
pub use check::{check_gradients, GradCheck, GRADCHECK_TOL};
pub use generate::{generate, Family, GeneratedInstance, GeneratorSpec};
pub use linalg::Matrix;
pub use model::{
    Group, ModelError, Objective, ObjectivePair, Perturbations, ProblemInstance, WMode,
};
pub use optimizer::{run, RunConfig, RunError, RunResult, StopReason, TraceRecord};
pub use strategy::{Scores, StrategyConfig, StrategyKind, UpdateDecision};
