//! Central-difference gradient checking against the reverse-mode tape.

use crate::archnet::AuxNetwork;
use crate::error::{Error, Result};
use crate::tape::{NodeId, Tape};
use crate::taskgen::TaskLabels;
use crate::tensor::Tensor;
use crate::trainer;

pub const DEFAULT_EPS: f64 = 1e-5;

/// Builds the computation under test: given a fresh tape and the input
/// leaves (in the same order as the `inputs` slice), returns the scalar root.
pub type Closure<'a> = &'a dyn Fn(&mut Tape, &[NodeId]) -> Result<NodeId>;

/// Max over all input coordinates of |g_ad - g_fd| / max(1, |g_fd|).
///
/// The caller is responsible for evaluating at a differentiable point;
/// use [`kink_distance`] to re-sample inputs near ReLU/L1 kinks.
pub fn grad_check(f: Closure, inputs: &[Tensor], eps: f64) -> Result<f64> {
    if eps <= 0.0 {
        return Err(Error::contract("grad_check: eps must be positive"));
    }
    // reverse-mode gradients at the base point
    let mut tape = Tape::new();
    let ids: Vec<NodeId> = inputs
        .iter()
        .map(|t| tape.input(t.clone()))
        .collect::<Result<_>>()?;
    let root = f(&mut tape, &ids)?;
    let grads = tape.backward(root)?;
    let ad: Vec<Tensor> = ids
        .iter()
        .map(|&id| {
            grads
                .of_node(id)
                .cloned()
                .unwrap_or_else(|| Tensor::zeros(tape.value(id).shape().to_vec()))
        })
        .collect();

    let eval = |points: &[Tensor]| -> Result<f64> {
        let mut t = Tape::new();
        let ids: Vec<NodeId> = points
            .iter()
            .map(|p| t.input(p.clone()))
            .collect::<Result<_>>()?;
        let root = f(&mut t, &ids)?;
        let v = t.value(root).item();
        if !v.is_finite() {
            return Err(Error::NonFinite { op: "grad_check" });
        }
        Ok(v)
    };

    let mut max_err = 0.0f64;
    let mut work: Vec<Tensor> = inputs.to_vec();
    for (k, input) in inputs.iter().enumerate() {
        for j in 0..input.numel() {
            let orig = input.data()[j];
            work[k].data_mut()[j] = orig + eps;
            let plus = eval(&work)?;
            work[k].data_mut()[j] = orig - eps;
            let minus = eval(&work)?;
            work[k].data_mut()[j] = orig;
            let fd = (plus - minus) / (2.0 * eps);
            let err = (ad[k].data()[j] - fd).abs() / fd.abs().max(1.0);
            max_err = max_err.max(err);
        }
    }
    Ok(max_err)
}

/// Distance of the closure's evaluation at `inputs` to the nearest
/// ReLU / L1 kink. Re-sample when this is below `10 * eps`.
pub fn kink_distance(f: Closure, inputs: &[Tensor]) -> Result<f64> {
    let mut tape = Tape::new();
    let ids: Vec<NodeId> = inputs
        .iter()
        .map(|t| tape.input(t.clone()))
        .collect::<Result<_>>()?;
    f(&mut tape, &ids)?;
    Ok(tape.min_kink_distance())
}

/// Result of a whole-network parameter-space gradient check.
pub struct NetGradCheck {
    pub max_rel_err: f64,
    /// Kink distance of the base evaluation; re-sample the batch when this
    /// is below `10 * eps`, the central difference is unreliable there.
    pub kink_distance: f64,
    pub scalars_checked: usize,
}

/// Central-difference check of d(objective)/d(theta) for every trainable
/// scalar in the network against the reverse-mode gradients, where the
/// objective is L_P + sum L_A + lambda * ||alpha^P||_1 on one fixed batch.
pub fn grad_check_network(
    net: &mut AuxNetwork,
    x: &Tensor,
    labels: &[TaskLabels],
    lambda: f64,
    eps: f64,
) -> Result<NetGradCheck> {
    if eps <= 0.0 {
        return Err(Error::contract("grad_check_network: eps must be positive"));
    }

    let mut tape = Tape::new();
    let pass = net.forward(&mut tape, x, true)?;
    let obj = trainer::nas_objective(&mut tape, net, pass.primary_out, &pass.aux_outs, labels, lambda, true)?;
    let kink = tape.min_kink_distance();
    let grads = tape.backward(obj.total)?;
    let ad = grads.param_grads(&tape, &net.params);

    let eval = |net: &mut AuxNetwork| -> Result<f64> {
        let mut t = Tape::new();
        let pass = net.forward(&mut t, x, true)?;
        let obj = trainer::nas_objective(&mut t, net, pass.primary_out, &pass.aux_outs, labels, lambda, true)?;
        let v = t.value(obj.total).item();
        if !v.is_finite() {
            return Err(Error::NonFinite { op: "grad_check_network" });
        }
        Ok(v)
    };

    let ids: Vec<_> = net.params.iter().map(|(id, _)| id).collect();
    let mut max_err = 0.0f64;
    let mut checked = 0usize;
    for id in ids {
        for j in 0..net.params.value(id).numel() {
            let orig = net.params.value(id).data()[j];
            net.params.value_mut(id).data_mut()[j] = orig + eps;
            let plus = eval(net)?;
            net.params.value_mut(id).data_mut()[j] = orig - eps;
            let minus = eval(net)?;
            net.params.value_mut(id).data_mut()[j] = orig;
            let fd = (plus - minus) / (2.0 * eps);
            let err = (ad[id.0].data()[j] - fd).abs() / fd.abs().max(1.0);
            max_err = max_err.max(err);
            checked += 1;
        }
    }
    Ok(NetGradCheck {
        max_rel_err: max_err,
        kink_distance: kink,
        scalars_checked: checked,
    })
}
