//! Inference-cost taxonomy (symbolic N/M/K accounting) and measured
//! multiply-add counts from tape traversal.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tape::{CostBreakdown, Tape};
use crate::tensor::Tensor;

use super::AuxNetwork;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FlopsModel {
    /// Single-task FLOPs.
    pub n: f64,
    /// Per-pair fusion FLOPs.
    pub m: f64,
    /// Auxiliary task count.
    pub k: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CostMethod {
    Ours,
    SoftMtl,
    HardAttention,
    AdashareBound,
}

impl CostMethod {
    pub const ALL: [CostMethod; 4] = [
        CostMethod::Ours,
        CostMethod::SoftMtl,
        CostMethod::HardAttention,
        CostMethod::AdashareBound,
    ];

    pub fn name(self) -> &'static str {
        match self {
            CostMethod::Ours => "ours",
            CostMethod::SoftMtl => "soft_mtl",
            CostMethod::HardAttention => "hard_attention",
            CostMethod::AdashareBound => "adashare_bound",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CostEstimate {
    Exact(f64),
    /// Inclusive upper bound (select-or-skip style methods).
    UpperBound(f64),
}

impl CostEstimate {
    pub fn bound(self) -> f64 {
        match self {
            CostEstimate::Exact(v) | CostEstimate::UpperBound(v) => v,
        }
    }
}

/// Symbolic inference cost per method:
/// ours = N; soft MTL = (K+1)N + (K+1)K M/2; hard attention = N + M;
/// adashare-style select-or-skip <= N.
pub fn symbolic(model: FlopsModel, method: CostMethod) -> Result<CostEstimate> {
    if model.n < 0.0 || model.m < 0.0 {
        return Err(Error::contract("flops: N and M must be nonnegative"));
    }
    let n = model.n;
    let m = model.m;
    let k = model.k as f64;
    Ok(match method {
        CostMethod::Ours => CostEstimate::Exact(n),
        CostMethod::SoftMtl => CostEstimate::Exact((k + 1.0) * n + (k + 1.0) * k * m / 2.0),
        CostMethod::HardAttention => CostEstimate::Exact(n + m),
        CostMethod::AdashareBound => CostEstimate::UpperBound(n),
    })
}

/// Measured inference cost: one eval-mode forward on a fresh tape,
/// counted by graph traversal. Only the primary output matters for
/// inference, but the count covers every node the forward recorded, so
/// call this on a pruned (or single) network for the deployment number.
pub fn measured_inference(net: &mut AuxNetwork, x: &Tensor) -> Result<CostBreakdown> {
    let mut tape = Tape::new();
    net.forward(&mut tape, x, false)?;
    Ok(tape.forward_cost())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn table_formulas_for_small_k() {
        // K=1: soft MTL = 2N + M
        let m1 = FlopsModel { n: 100.0, m: 10.0, k: 1 };
        assert_eq!(symbolic(m1, CostMethod::Ours).unwrap().bound(), 100.0);
        assert_eq!(symbolic(m1, CostMethod::SoftMtl).unwrap().bound(), 210.0);
        assert_eq!(symbolic(m1, CostMethod::HardAttention).unwrap().bound(), 110.0);
        // K=2: soft MTL = 3N + 3M; ours stays N
        let m2 = FlopsModel { n: 100.0, m: 10.0, k: 2 };
        assert_eq!(symbolic(m2, CostMethod::SoftMtl).unwrap().bound(), 330.0);
        assert_eq!(symbolic(m2, CostMethod::Ours).unwrap().bound(), 100.0);
    }

    #[test]
    fn negative_inputs_rejected() {
        let m = FlopsModel { n: -1.0, m: 0.0, k: 1 };
        assert!(symbolic(m, CostMethod::Ours).is_err());
    }
}
