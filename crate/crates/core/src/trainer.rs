//! Optimizers and training loops: joint training for single/symmetric/aux-g
//! networks and the alternating weight/architecture loop for aux-nas, with a
//! linear L1 penalty ramp on the auxiliary-to-primary architecture weights.

use std::io::Write;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::archnet::{AuxNetwork, NetMode};
use crate::error::{Error, Result};
use crate::params::{ParamGroup, ParamId, ParamStore};
use crate::tape::{NodeId, Tape};
use crate::taskgen::{BatchPair, Dataset, Split, TaskLabels};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum OptimKind {
    #[default]
    SgdMomentum,
    Adam,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimConfig {
    /// Applies to the network weights; architecture weights always take
    /// plain SGD steps (momentum or moment estimates would fight the L1
    /// dead-zone).
    pub kind: OptimKind,
    /// Learning rate for network weights.
    pub lr_w: f64,
    /// Learning rate for architecture weights.
    pub lr_alpha: f64,
    pub momentum: f64,
    /// If set, the alpha step excludes the L1 term from the gradient and
    /// applies a soft-threshold shrinkage of lr_alpha * lambda instead.
    pub proximal_l1: bool,
}

impl Default for OptimConfig {
    fn default() -> Self {
        OptimConfig {
            kind: OptimKind::SgdMomentum,
            lr_w: 1e-2,
            lr_alpha: 1e-2,
            momentum: 0.9,
            proximal_l1: false,
        }
    }
}

const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

/// Linear ramp for the L1 penalty coefficient over the alpha-step budget:
/// lambda(0) = start, lambda(total_steps - 1) = end.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct LambdaSchedule {
    pub start: f64,
    pub end: f64,
}

impl Default for LambdaSchedule {
    fn default() -> Self {
        LambdaSchedule { start: 0.0, end: 100.0 }
    }
}

impl LambdaSchedule {
    pub fn value(&self, step: usize, total_steps: usize) -> f64 {
        if total_steps <= 1 {
            return self.end;
        }
        let t = (step.min(total_steps - 1)) as f64 / (total_steps - 1) as f64;
        self.start + (self.end - self.start) * t
    }
}

#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub optim: OptimConfig,
    pub schedule: LambdaSchedule,
    /// Skip every update to alpha^P (they stay at their current values).
    pub freeze_alpha_p: bool,
    /// Record per-step wall time. Off by default so step logs are
    /// bit-reproducible across runs.
    pub timing: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 1,
            batch_size: 16,
            seed: 0,
            optim: OptimConfig::default(),
            schedule: LambdaSchedule::default(),
            freeze_alpha_p: false,
            timing: false,
        }
    }
}

/// One logged optimization step. `batch_wall_ms` is only populated when
/// timing was requested.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub l_p: f64,
    pub l_a: f64,
    pub r: f64,
    pub lambda: f64,
    pub alpha_p_max: f64,
    pub alpha_p_mean: f64,
    pub alpha_a_mean: f64,
    pub batch_op_count: u64,
    pub batch_wall_ms: Option<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub alpha_p_min: f64,
    pub alpha_p_max: f64,
    pub alpha_p_mean: f64,
    pub alpha_p_median: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainReport {
    pub records: Vec<StepRecord>,
    pub epochs: Vec<EpochStats>,
    pub final_alpha_p: Vec<f64>,
    pub final_alpha_a: Vec<f64>,
}

impl TrainReport {
    pub fn final_loss_p(&self) -> Option<f64> {
        self.records.last().map(|r| r.l_p)
    }
}

/// Per-parameter accumulators (momentum, or Adam moments), allocated
/// lazily. Weight-group and alpha-group parameters never share a buffer:
/// buffers are keyed by ParamId and alphas take buffer-free plain steps.
#[derive(Debug, Default)]
pub struct OptimState {
    velocity: Vec<Option<Vec<f64>>>,
    second: Vec<Option<Vec<f64>>>,
    adam_t: u64,
}

impl OptimState {
    pub fn new() -> Self {
        OptimState::default()
    }

    fn buf(slot: &mut Vec<Option<Vec<f64>>>, id: ParamId, len: usize) -> &mut Vec<f64> {
        if slot.len() <= id.0 {
            slot.resize(id.0 + 1, None);
        }
        slot[id.0].get_or_insert_with(|| vec![0.0; len])
    }
}

pub(crate) fn task_loss(tape: &mut Tape, out: NodeId, label: &TaskLabels) -> Result<NodeId> {
    match label {
        TaskLabels::Regression(t) => tape.mse(out, t),
        TaskLabels::Classification { labels, .. } => tape.softmax_xent(out, labels),
    }
}

pub(crate) fn epoch_seed(base: u64, epoch: usize) -> u64 {
    base ^ (epoch as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

fn alpha_stats(values: &[f64]) -> (f64, f64, f64, f64) {
    if values.is_empty() {
        return (0.0, 0.0, 0.0, 0.0);
    }
    let mut v = values.to_vec();
    v.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let min = v[0];
    let max = v[v.len() - 1];
    let mean = v.iter().sum::<f64>() / v.len() as f64;
    let median = if v.len() % 2 == 1 {
        v[v.len() / 2]
    } else {
        0.5 * (v[v.len() / 2 - 1] + v[v.len() / 2])
    };
    (min, max, mean, median)
}

/// SGD update over the parameters selected by `pred`. Weights use heavy-ball
/// momentum; architecture weights use plain SGD and are clamped to [0, 1]
/// by the caller.
pub(crate) fn sgd_update(
    store: &mut ParamStore,
    grads: &[Tensor],
    state: &mut OptimState,
    cfg: &OptimConfig,
    pred: impl Fn(ParamGroup) -> bool,
    frozen: &[ParamId],
) {
    let ids: Vec<ParamId> = store.ids_where(&pred);
    let weight_step = ids.iter().any(|id| store.get(*id).group.is_weight());
    if weight_step && cfg.kind == OptimKind::Adam {
        state.adam_t += 1;
    }
    for id in ids {
        if frozen.contains(&id) {
            continue;
        }
        let group = store.get(id).group;
        let g = grads[id.0].data();
        if group.is_alpha() {
            let lr = cfg.lr_alpha;
            let value = store.value_mut(id);
            for (v, gi) in value.data_mut().iter_mut().zip(g) {
                *v -= lr * gi;
            }
        } else if cfg.kind == OptimKind::Adam {
            let lr = cfg.lr_w;
            let t = state.adam_t as i32;
            let g = g.to_vec();
            let m = OptimState::buf(&mut state.velocity, id, g.len());
            for (mi, gi) in m.iter_mut().zip(&g) {
                *mi = ADAM_BETA1 * *mi + (1.0 - ADAM_BETA1) * gi;
            }
            let m = m.clone();
            let v2 = OptimState::buf(&mut state.second, id, g.len());
            for (vi, gi) in v2.iter_mut().zip(&g) {
                *vi = ADAM_BETA2 * *vi + (1.0 - ADAM_BETA2) * gi * gi;
            }
            let v2 = v2.clone();
            let bc1 = 1.0 - ADAM_BETA1.powi(t);
            let bc2 = 1.0 - ADAM_BETA2.powi(t);
            let value = store.value_mut(id);
            for ((w, mi), vi) in value.data_mut().iter_mut().zip(&m).zip(&v2) {
                *w -= lr * (mi / bc1) / ((vi / bc2).sqrt() + ADAM_EPS);
            }
        } else {
            let lr = cfg.lr_w;
            let mu = cfg.momentum;
            let vel = OptimState::buf(&mut state.velocity, id, g.len());
            for (vi, gi) in vel.iter_mut().zip(g) {
                *vi = mu * *vi + gi;
            }
            let vel = state.velocity[id.0].as_ref().unwrap().clone();
            let value = store.value_mut(id);
            for (v, vi) in value.data_mut().iter_mut().zip(&vel) {
                *v -= lr * vi;
            }
        }
    }
}

pub(crate) fn check_finite_losses(step: usize, losses: &[(f64, &str)]) -> Result<()> {
    for (v, name) in losses {
        if !v.is_finite() {
            return Err(Error::Diverged { step, detail: format!("{name} = {v}") });
        }
    }
    Ok(())
}

/// Joint training on the sum of all branch losses. Legal for single,
/// symmetric, and aux_g networks, whose architecture weights are fixed.
pub fn train_joint(net: &mut AuxNetwork, data: &Dataset, cfg: &TrainConfig) -> Result<TrainReport> {
    match net.mode {
        NetMode::Single | NetMode::Symmetric | NetMode::AuxG => {}
        other => {
            return Err(Error::contract(format!(
                "train_joint expects single/symmetric/aux_g, network is {other:?}"
            )))
        }
    }
    if data.labels.len() < net.n_branches() {
        return Err(Error::contract(format!(
            "dataset has {} tasks, network needs {}",
            data.labels.len(),
            net.n_branches()
        )));
    }
    let mut state = OptimState::new();
    let mut records = Vec::new();
    let mut epochs = Vec::new();
    let mut step = 0usize;
    for epoch in 0..cfg.epochs {
        let batches = data.iterate(Split::Train, cfg.batch_size, epoch_seed(cfg.seed, epoch), false)?;
        for pair in &batches {
            let started = cfg.timing.then(Instant::now);
            let (x, labels) = data.batch(&pair.w);
            let mut tape = Tape::new();
            let pass = net.forward(&mut tape, &x, true)?;
            let l_p = task_loss(&mut tape, pass.primary_out, &labels[0])?;
            let mut parts = vec![l_p];
            for (k, out) in pass.aux_outs.iter().enumerate() {
                parts.push(task_loss(&mut tape, *out, &labels[1 + k])?);
            }
            let total = tape.add_scalars(&parts)?;
            let grads = tape.backward(total)?;
            let pg = grads.param_grads(&tape, &net.params);
            let l_p_v = tape.value(parts[0]).item();
            let l_a_v: f64 = parts[1..].iter().map(|p| tape.value(*p).item()).sum();
            check_finite_losses(step, &[(l_p_v, "l_p"), (l_a_v, "l_a")])?;
            let ops = tape.forward_cost().total() + tape.backward_cost();
            sgd_update(&mut net.params, &pg, &mut state, &cfg.optim, |g| g.is_weight(), &[]);
            records.push(StepRecord {
                step,
                l_p: l_p_v,
                l_a: l_a_v,
                r: 0.0,
                lambda: 0.0,
                alpha_p_max: 0.0,
                alpha_p_mean: 0.0,
                alpha_a_mean: 0.0,
                batch_op_count: ops,
                batch_wall_ms: started.map(|t| t.elapsed().as_secs_f64() * 1e3),
            });
            step += 1;
        }
        epochs.push(EpochStats {
            epoch,
            alpha_p_min: 0.0,
            alpha_p_max: 0.0,
            alpha_p_mean: 0.0,
            alpha_p_median: 0.0,
        });
    }
    Ok(TrainReport {
        records,
        epochs,
        final_alpha_p: net.alpha_p_values(),
        final_alpha_a: net.alpha_a_values(),
    })
}

pub fn train_aux_g(net: &mut AuxNetwork, data: &Dataset, cfg: &TrainConfig) -> Result<TrainReport> {
    if net.mode != NetMode::AuxG {
        return Err(Error::contract(format!(
            "train_aux_g expects an aux_g network, got {:?}",
            net.mode
        )));
    }
    train_joint(net, data, cfg)
}

/// Objective terms for one aux-nas batch: the task losses, the L1 penalty
/// node over alpha^P, and the combined scalar.
pub struct Objective {
    pub total: NodeId,
    pub l_p: NodeId,
    pub l_a: Vec<NodeId>,
    /// lambda * sum |alpha^P|; absent when lambda == 0 or the graph is
    /// built for a proximal step.
    pub r: Option<NodeId>,
}

/// Build L_P + sum_k L_A_k + lambda * ||alpha^P||_1 on the given tape,
/// after `forward` has run. `with_l1 = false` leaves the penalty out of the
/// graph (its shrinkage is then applied proximally by the caller).
pub fn nas_objective(
    tape: &mut Tape,
    net: &AuxNetwork,
    primary_out: NodeId,
    aux_outs: &[NodeId],
    labels: &[TaskLabels],
    lambda: f64,
    with_l1: bool,
) -> Result<Objective> {
    let l_p = task_loss(tape, primary_out, &labels[0])?;
    let mut l_a = Vec::new();
    for (k, out) in aux_outs.iter().enumerate() {
        l_a.push(task_loss(tape, *out, &labels[1 + k])?);
    }
    let mut parts = vec![l_p];
    parts.extend(&l_a);
    let mut r = None;
    if with_l1 && lambda != 0.0 {
        let alpha_ids = net.params.ids_in_group(ParamGroup::AlphaP);
        if !alpha_ids.is_empty() {
            let nodes: Vec<NodeId> = alpha_ids
                .iter()
                .map(|id| tape.param(*id, &net.params))
                .collect::<Result<_>>()?;
            let l1 = tape.l1_norm(&nodes)?;
            let pen = tape.mul_const(l1, lambda)?;
            parts.push(pen);
            r = Some(pen);
        }
    }
    let total = tape.add_scalars(&parts)?;
    Ok(Objective { total, l_p, l_a, r })
}

/// Alternating aux-nas training: each step takes two disjoint batches, a
/// weight update on L_P + L_A over the first and an architecture update on
/// the full penalized objective over the second. alpha is clamped to [0, 1]
/// after every architecture step.
pub fn train_aux_nas(net: &mut AuxNetwork, data: &Dataset, cfg: &TrainConfig) -> Result<TrainReport> {
    if net.mode != NetMode::AuxNas {
        return Err(Error::contract(format!(
            "train_aux_nas expects an aux_nas network, got {:?}",
            net.mode
        )));
    }
    if data.labels.len() < net.n_branches() {
        return Err(Error::contract(format!(
            "dataset has {} tasks, network needs {}",
            data.labels.len(),
            net.n_branches()
        )));
    }
    for v in net.alpha_p_values().iter().chain(net.alpha_a_values().iter()) {
        if !(0.0..=1.0).contains(v) {
            return Err(Error::contract(format!("alpha {v} outside [0, 1] before training")));
        }
    }

    // The schedule is pinned to the alpha-step budget, which is known up
    // front because the batch plan per epoch has a fixed length.
    let steps_per_epoch = data
        .iterate(Split::Train, cfg.batch_size, epoch_seed(cfg.seed, 0), true)?
        .len();
    let total_alpha_steps = steps_per_epoch * cfg.epochs;
    if total_alpha_steps == 0 {
        return Err(Error::contract("train_aux_nas: zero steps per epoch"));
    }

    let frozen: Vec<ParamId> = if cfg.freeze_alpha_p {
        net.params.ids_in_group(ParamGroup::AlphaP)
    } else {
        vec![]
    };

    let mut state = OptimState::new();
    let mut records = Vec::new();
    let mut epochs = Vec::new();
    let mut step = 0usize;
    for epoch in 0..cfg.epochs {
        let batches = data.iterate(Split::Train, cfg.batch_size, epoch_seed(cfg.seed, epoch), true)?;
        for pair in &batches {
            let record = alternate_step(net, data, pair, cfg, &mut state, &frozen, step, total_alpha_steps)?;
            records.push(record);
            step += 1;
        }
        let (mn, mx, mean, med) = alpha_stats(&net.alpha_p_values());
        epochs.push(EpochStats {
            epoch,
            alpha_p_min: mn,
            alpha_p_max: mx,
            alpha_p_mean: mean,
            alpha_p_median: med,
        });
    }
    Ok(TrainReport {
        records,
        epochs,
        final_alpha_p: net.alpha_p_values(),
        final_alpha_a: net.alpha_a_values(),
    })
}

#[allow(clippy::too_many_arguments)]
fn alternate_step(
    net: &mut AuxNetwork,
    data: &Dataset,
    pair: &BatchPair,
    cfg: &TrainConfig,
    state: &mut OptimState,
    frozen: &[ParamId],
    step: usize,
    total_alpha_steps: usize,
) -> Result<StepRecord> {
    let alpha_idx = pair
        .alpha
        .as_ref()
        .ok_or_else(|| Error::contract("alternate_step needs a disjoint batch pair"))?;
    if pair.w.iter().any(|i| alpha_idx.contains(i)) {
        return Err(Error::contract("alternate_step: weight and alpha batches overlap"));
    }
    let started = cfg.timing.then(Instant::now);
    let lambda = cfg.schedule.value(step, total_alpha_steps);
    let mut ops = 0u64;

    // weight step: unpenalized task losses on the first batch
    let (x_w, labels_w) = data.batch(&pair.w);
    let (l_p_v, l_a_v) = {
        let mut tape = Tape::new();
        let pass = net.forward(&mut tape, &x_w, true)?;
        let obj = nas_objective(&mut tape, net, pass.primary_out, &pass.aux_outs, &labels_w, 0.0, false)?;
        let grads = tape.backward(obj.total)?;
        let pg = grads.param_grads(&tape, &net.params);
        let l_p_v = tape.value(obj.l_p).item();
        let l_a_v: f64 = obj.l_a.iter().map(|n| tape.value(*n).item()).sum();
        check_finite_losses(step, &[(l_p_v, "l_p"), (l_a_v, "l_a")])?;
        ops += tape.forward_cost().total() + tape.backward_cost();
        sgd_update(&mut net.params, &pg, state, &cfg.optim, |g| g.is_weight(), &[]);
        (l_p_v, l_a_v)
    };

    // architecture step: penalized objective on the second batch
    let (x_a, labels_a) = data.batch(alpha_idx);
    let r_v = {
        let mut tape = Tape::new();
        let pass = net.forward(&mut tape, &x_a, true)?;
        let with_l1 = !cfg.optim.proximal_l1;
        let obj = nas_objective(&mut tape, net, pass.primary_out, &pass.aux_outs, &labels_a, lambda, with_l1)?;
        let grads = tape.backward(obj.total)?;
        let pg = grads.param_grads(&tape, &net.params);
        let r_v = obj.r.map(|n| tape.value(n).item()).unwrap_or(0.0);
        check_finite_losses(step, &[(r_v, "r")])?;
        ops += tape.forward_cost().total() + tape.backward_cost();
        sgd_update(&mut net.params, &pg, state, &cfg.optim, |g| g.is_alpha(), frozen);
        if cfg.optim.proximal_l1 && lambda != 0.0 && !cfg.freeze_alpha_p {
            let shrink = cfg.optim.lr_alpha * lambda;
            for id in net.params.ids_in_group(ParamGroup::AlphaP) {
                for v in net.params.value_mut(id).data_mut() {
                    *v = v.signum() * (v.abs() - shrink).max(0.0);
                }
            }
        }
        net.params.clamp_alphas();
        r_v
    };

    let alpha_p = net.alpha_p_values();
    let alpha_a = net.alpha_a_values();
    let (_, ap_max, ap_mean, _) = alpha_stats(&alpha_p);
    let (_, _, aa_mean, _) = alpha_stats(&alpha_a);
    // recompute the reported penalty from the post-step values so the
    // logged R always equals lambda * sum |alpha^P|
    let r_post = lambda * alpha_p.iter().map(|v| v.abs()).sum::<f64>();
    let _ = r_v;
    Ok(StepRecord {
        step,
        l_p: l_p_v,
        l_a: l_a_v,
        r: r_post,
        lambda,
        alpha_p_max: ap_max,
        alpha_p_mean: ap_mean,
        alpha_a_mean: aa_mean,
        batch_op_count: ops,
        batch_wall_ms: started.map(|t| t.elapsed().as_secs_f64() * 1e3),
    })
}

/// True once every auxiliary-to-primary architecture weight has collapsed
/// under the threshold.
pub fn converged(net: &AuxNetwork, threshold: f64) -> bool {
    net.alpha_p_values().iter().all(|v| v.abs() < threshold)
}

pub const STEP_CSV_HEADER: &str =
    "step,l_p,l_a,r,lambda,alpha_p_max,alpha_p_mean,alpha_a_mean,batch_op_count,batch_wall_ms";

/// Step log as CSV. The wall-time column stays empty unless timing was
/// enabled, so default-mode logs are byte-stable across reruns.
pub fn write_step_csv(records: &[StepRecord], mut w: impl Write) -> Result<()> {
    writeln!(w, "{STEP_CSV_HEADER}")?;
    for r in records {
        let wall = r.batch_wall_ms.map(|v| format!("{v}")).unwrap_or_default();
        writeln!(
            w,
            "{},{},{},{},{},{},{},{},{},{}",
            r.step,
            r.l_p,
            r.l_a,
            r.r,
            r.lambda,
            r.alpha_p_max,
            r.alpha_p_mean,
            r.alpha_a_mean,
            r.batch_op_count,
            wall
        )?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::archnet::{BranchSpec, BuildOptions, HeadKind};
    use crate::rng;
    use crate::taskgen::{self, FamilyConfig, TaskKind};

    fn dataset(rho: f64, n: usize, tasks: usize) -> Dataset {
        let fam = taskgen::TaskFamily::new(
            FamilyConfig {
                input_dim: 6,
                relatedness: rho,
                tasks: vec![TaskKind::Regression { dim: 1 }; tasks],
                noise_std: vec![0.05; tasks],
                label_flip: 0.0, shared_heads: false,
            },
            7,
        )
        .unwrap();
        taskgen::generate(&fam, n, 3).unwrap()
    }

    fn nas_net(seed: u64) -> AuxNetwork {
        let spec = BranchSpec::uniform(3, 8, HeadKind::Regression { dim: 1 });
        let mut r = rng::stream(seed, "init");
        AuxNetwork::build(
            6,
            spec.clone(),
            vec![spec],
            NetMode::AuxNas,
            &BuildOptions::default(),
            &mut r,
        )
        .unwrap()
    }

    #[test]
    fn lambda_schedule_hits_endpoints() {
        let s = LambdaSchedule::default();
        assert_eq!(s.value(0, 200), 0.0);
        assert_eq!(s.value(199, 200), 100.0);
        let mid = s.value(100, 201);
        assert!((mid - 50.0).abs() < 1e-12);
    }

    #[test]
    fn joint_training_reduces_single_task_loss() {
        let data = dataset(0.5, 400, 1);
        let spec = BranchSpec::uniform(2, 8, HeadKind::Regression { dim: 1 });
        let mut r = rng::stream(1, "init");
        let mut net =
            AuxNetwork::build_single(6, spec, crate::archnet::ActivKind::Relu, &mut r).unwrap();
        let cfg = TrainConfig { epochs: 10, batch_size: 16, seed: 5, ..Default::default() };
        let report = train_joint(&mut net, &data, &cfg).unwrap();
        let first = report.records.first().unwrap().l_p;
        let last = report.records.last().unwrap().l_p;
        assert!(last < first, "loss did not drop: {first} -> {last}");
    }

    #[test]
    fn aux_nas_training_is_deterministic() {
        let data = dataset(0.8, 200, 2);
        let cfg = TrainConfig { epochs: 2, batch_size: 8, seed: 11, ..Default::default() };
        let mut a = nas_net(4);
        let ra = train_aux_nas(&mut a, &data, &cfg).unwrap();
        let mut b = nas_net(4);
        let rb = train_aux_nas(&mut b, &data, &cfg).unwrap();
        assert_eq!(ra.final_alpha_p, rb.final_alpha_p);
        let last_a = ra.records.last().unwrap();
        let last_b = rb.records.last().unwrap();
        assert_eq!(last_a.l_p.to_bits(), last_b.l_p.to_bits());
        assert_eq!(
            a.params.group_hash(|_| true),
            b.params.group_hash(|_| true)
        );
    }

    #[test]
    fn alpha_step_leaves_weights_untouched_and_vice_versa() {
        // run one manual alternate step and check group hashes move only
        // in their own phase
        let data = dataset(0.8, 200, 2);
        let mut net = nas_net(4);
        let cfg = TrainConfig { epochs: 1, batch_size: 8, seed: 11, ..Default::default() };
        let pairs = data.iterate(Split::Train, 8, epoch_seed(11, 0), true).unwrap();
        let pair = &pairs[0];

        let w_hash_before = net.params.group_hash(|g| g.is_weight());
        let a_hash_before = net.params.group_hash(|g| g.is_alpha());
        let mut state = OptimState::new();
        alternate_step(&mut net, &data, pair, &cfg, &mut state, &[], 0, 100).unwrap();
        // both change across the full step ...
        assert_ne!(net.params.group_hash(|g| g.is_weight()), w_hash_before);
        assert_ne!(net.params.group_hash(|g| g.is_alpha()), a_hash_before);

        // ... but a weight-only update never touches alphas
        let mut net2 = nas_net(4);
        let a_hash = net2.params.group_hash(|g| g.is_alpha());
        let (x, labels) = data.batch(&pair.w);
        let mut tape = Tape::new();
        let pass = net2.forward(&mut tape, &x, true).unwrap();
        let obj =
            nas_objective(&mut tape, &net2, pass.primary_out, &pass.aux_outs, &labels, 0.0, false)
                .unwrap();
        let grads = tape.backward(obj.total).unwrap();
        let pg = grads.param_grads(&tape, &net2.params);
        sgd_update(&mut net2.params, &pg, &mut OptimState::new(), &cfg.optim, |g| g.is_weight(), &[]);
        assert_eq!(net2.params.group_hash(|g| g.is_alpha()), a_hash);
    }

    #[test]
    fn reported_r_matches_lambda_times_l1() {
        let data = dataset(0.8, 200, 2);
        let mut net = nas_net(4);
        let cfg = TrainConfig { epochs: 1, batch_size: 8, seed: 11, ..Default::default() };
        let report = train_aux_nas(&mut net, &data, &cfg).unwrap();
        // the last record's alphas are the final ones
        let last = report.records.last().unwrap();
        let expected = last.lambda * report.final_alpha_p.iter().map(|v| v.abs()).sum::<f64>();
        assert!((last.r - expected).abs() < 1e-12);
    }

    #[test]
    fn frozen_alpha_p_never_moves() {
        let data = dataset(0.8, 200, 2);
        let mut net = nas_net(4);
        let cfg = TrainConfig {
            epochs: 2,
            batch_size: 8,
            seed: 11,
            freeze_alpha_p: true,
            ..Default::default()
        };
        let report = train_aux_nas(&mut net, &data, &cfg).unwrap();
        assert!(report.final_alpha_p.iter().all(|v| *v == 0.5));
    }

    #[test]
    fn ramped_l1_drives_alpha_p_to_zero() {
        let data = dataset(0.9, 400, 2);
        let mut net = nas_net(4);
        let cfg = TrainConfig { epochs: 8, batch_size: 8, seed: 11, ..Default::default() };
        let report = train_aux_nas(&mut net, &data, &cfg).unwrap();
        let max = report.final_alpha_p.iter().cloned().fold(0.0, f64::max);
        assert!(max < 0.02, "alpha_p max {max}");
        assert!(converged(&net, 0.02));
    }

    #[test]
    fn csv_omits_wall_time_by_default() {
        let rec = StepRecord {
            step: 0,
            l_p: 1.5,
            l_a: 0.5,
            r: 0.0,
            lambda: 0.0,
            alpha_p_max: 0.5,
            alpha_p_mean: 0.5,
            alpha_a_mean: 0.5,
            batch_op_count: 42,
            batch_wall_ms: None,
        };
        let mut buf = Vec::new();
        write_step_csv(&[rec], &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.lines().nth(1).unwrap().ends_with(",42,"));
    }
}
