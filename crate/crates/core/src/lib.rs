//! Asymmetric primary-auxiliary network training.
//!
//! Two methods over a pair (or K+1-tuple) of soft-parameter-shared branches:
//!
//! * **Aux-G** — fixed primary-to-auxiliary connections; the auxiliary branch
//!   contributes only gradients to the primary weights, so inference on the
//!   primary task costs exactly one single-task network.
//! * **Aux-NAS** — a bi-directionally connected supernet whose
//!   auxiliary-to-primary architecture weights are driven to zero by an L1
//!   penalty during a single-phase search, after which the auxiliary side is
//!   pruned away with no effect on the primary output.
//!
//! Built on a minimal deterministic reverse-mode tape ([`tape`]), with a
//! synthetic task generator ([`taskgen`]), training loops ([`trainer`]),
//! cost accounting ([`archnet::flops`]) and a desk-scale comparison
//! protocol ([`evalbench`]).

pub mod archnet;
pub mod error;
pub mod evalbench;
pub mod gradcheck;
pub mod params;
pub mod rng;
pub mod tape;
pub mod taskgen;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use params::{Param, ParamGroup, ParamId, ParamStore};
pub use tape::{BnState, CostBreakdown, Gradients, NodeId, Tape};
pub use tensor::Tensor;
