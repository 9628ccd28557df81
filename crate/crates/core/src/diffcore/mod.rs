//! Minimal reverse-mode differentiation core.
//!
//! Dense layers, elementwise nonlinearities, softmax and reductions recorded
//! on a linear tape, plus Adam and a finite-difference gradient oracle.
//! Every trainable network in the crate is built on these pieces.

pub mod adam;
pub mod fdcheck;
pub mod mlp;
pub mod param;
pub mod tape;

pub use adam::{adam_step, AdamConfig, AdamState, StepOutcome};
pub use fdcheck::finite_diff_check;
pub use mlp::{mlp_eval, mlp_forward, Net};
pub use param::{Activation, MlpSpec, ParameterBlock, ShapeEntry};
pub use tape::{log_sigmoid, sigmoid, softmax_stable, BlockId, Graph, NodeId, Tape};
