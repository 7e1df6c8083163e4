//! The two-branch (or (K+1)-branch) network: branch specs, cross-task
//! connections gated by architecture weights, fusion layers, forward modes,
//! pruning to a single-task inference network, and cost accounting.

pub mod flops;
pub mod serialize;

use std::collections::BTreeMap;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::{ParamGroup, ParamId, ParamStore};
use crate::tape::{BnState, NodeId, Tape};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NetMode {
    /// Vanilla single-task network: primary branch only, no fusion layers.
    Single,
    /// Bi-directional layer-(i-1)-to-layer-i wiring on both branches.
    Symmetric,
    /// Fixed primary-to-auxiliary connections only (binary indicators).
    AuxG,
    /// Bi-directional windowed connections with learnable architecture weights.
    AuxNas,
    /// Primary branch plus surviving norm/activation layers; no cross-task edges.
    Pruned,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadKind {
    Classification { classes: usize },
    Regression { dim: usize },
}

impl HeadKind {
    pub fn out_dim(&self) -> usize {
        match *self {
            HeadKind::Classification { classes } => classes,
            HeadKind::Regression { dim } => dim,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BranchSpec {
    pub n_layers: usize,
    pub layer_widths: Vec<usize>,
    pub head: HeadKind,
}

impl BranchSpec {
    pub fn uniform(n_layers: usize, width: usize, head: HeadKind) -> Self {
        BranchSpec { n_layers, layer_widths: vec![width; n_layers], head }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_layers == 0 || self.n_layers != self.layer_widths.len() {
            return Err(Error::config(format!(
                "branch spec: n_layers {} must match layer_widths length {}",
                self.n_layers,
                self.layer_widths.len()
            )));
        }
        if self.layer_widths.iter().any(|&w| w == 0) {
            return Err(Error::config("branch spec: all widths must be >= 1"));
        }
        Ok(())
    }

    /// Width of feature index j, where index 0 is the stem output.
    pub fn feat_width(&self, j: usize) -> usize {
        if j == 0 {
            self.layer_widths[0]
        } else {
            self.layer_widths[j - 1]
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    AuxToPri,
    PriToAux,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ArchWeight {
    /// Compile-time indicator (Aux-G); present means 1.
    Fixed,
    /// Learnable scalar in the alpha groups (Aux-NAS).
    Learned(ParamIdRepr),
}

/// Serializable stand-in for ParamId (resolved by name on load).
pub type ParamIdRepr = usize;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Connection {
    pub direction: Direction,
    pub aux_task: usize,
    pub src_layer: usize,
    pub dst_layer: usize,
    pub weight: ArchWeight,
    /// Bias-free width adapter on the source feature, when widths mismatch.
    pub adapter: Option<ParamIdRepr>,
}

impl Connection {
    pub fn sink_branch(&self) -> usize {
        match self.direction {
            Direction::AuxToPri => 0,
            Direction::PriToAux => 1 + self.aux_task,
        }
    }

    pub fn src_branch(&self) -> usize {
        match self.direction {
            Direction::AuxToPri => 1 + self.aux_task,
            Direction::PriToAux => 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Granularity {
    Layer,
    Stage(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NormKind {
    BatchNorm,
    Identity,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ActivKind {
    Relu,
    Identity,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FusionOps {
    pub norm: NormKind,
    pub activ: ActivKind,
}

impl Default for FusionOps {
    fn default() -> Self {
        FusionOps { norm: NormKind::BatchNorm, activ: ActivKind::Relu }
    }
}

/// One fusion point: bias-free projection over the concatenated (scaled)
/// cross-task features, residual sum, norm, activation. The projection is
/// zero-initialized so the supernet starts exactly at the two independent
/// single-task networks.
#[derive(Debug, Clone)]
pub struct FusionLayer {
    pub projection: Option<ParamId>,
    pub gamma: ParamId,
    pub beta: ParamId,
    pub bn: BnState,
}

#[derive(Debug, Clone)]
pub struct BranchParams {
    pub stem_w: ParamId,
    pub stem_b: ParamId,
    pub layer_w: Vec<ParamId>,
    pub layer_b: Vec<ParamId>,
    pub head_w: ParamId,
    pub head_b: ParamId,
}

#[derive(Debug, Clone)]
pub struct AuxNetwork {
    pub mode: NetMode,
    pub input_dim: usize,
    pub primary: BranchSpec,
    pub auxiliaries: Vec<BranchSpec>,
    pub window: usize,
    pub granularity: Granularity,
    pub fusion_ops: FusionOps,
    pub block_activ: ActivKind,
    pub connections: Vec<Connection>,
    /// (branch, layer) -> fusion layer; branch 0 is primary.
    pub fusion: BTreeMap<(usize, usize), FusionLayer>,
    pub branch_params: Vec<BranchParams>,
    pub params: ParamStore,
}

#[derive(Debug, Clone)]
pub struct BuildOptions {
    pub window: usize,
    pub granularity: Granularity,
    pub fusion_ops: FusionOps,
    pub block_activ: ActivKind,
}

impl Default for BuildOptions {
    fn default() -> Self {
        BuildOptions {
            window: 3,
            granularity: Granularity::Layer,
            fusion_ops: FusionOps::default(),
            block_activ: ActivKind::Relu,
        }
    }
}

pub struct ForwardPass {
    pub primary_out: NodeId,
    pub aux_outs: Vec<NodeId>,
    /// features[branch][feature index 0..=n]
    pub features: Vec<Vec<NodeId>>,
}

pub(crate) fn branch_prefix(b: usize) -> String {
    if b == 0 {
        "p".to_string()
    } else {
        format!("a{}", b - 1)
    }
}

fn he_normal(rng: &mut ChaCha8Rng, fan_in: usize, shape: Vec<usize>) -> Tensor {
    use rand::Rng;
    let std = (2.0 / fan_in as f64).sqrt();
    let numel: usize = shape.iter().product();
    let mut data = Vec::with_capacity(numel);
    // Box-Muller; two uniforms per sample keeps the stream deterministic
    for _ in 0..numel {
        let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
        let u2: f64 = rng.gen();
        let z = (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos();
        data.push(std * z);
    }
    Tensor::new(shape, data).expect("shape/data agree")
}

fn insert_branch_params(
    store: &mut ParamStore,
    b: usize,
    input_dim: usize,
    spec: &BranchSpec,
    rng: &mut ChaCha8Rng,
) -> Result<BranchParams> {
    let group = if b == 0 { ParamGroup::PrimaryW } else { ParamGroup::AuxW(b - 1) };
    let pre = branch_prefix(b);
    let w0 = spec.feat_width(0);
    let stem_w = store.insert(format!("{pre}/stem/w"), group, he_normal(rng, input_dim, vec![input_dim, w0]))?;
    let stem_b = store.insert(format!("{pre}/stem/b"), group, Tensor::zeros(vec![w0]))?;
    let mut layer_w = Vec::new();
    let mut layer_b = Vec::new();
    for i in 1..=spec.n_layers {
        let win = spec.feat_width(i - 1);
        let wout = spec.feat_width(i);
        layer_w.push(store.insert(
            format!("{pre}/layer{i}/w"),
            group,
            he_normal(rng, win, vec![win, wout]),
        )?);
        layer_b.push(store.insert(format!("{pre}/layer{i}/b"), group, Tensor::zeros(vec![wout]))?);
    }
    let wn = spec.feat_width(spec.n_layers);
    let hd = spec.head.out_dim();
    let head_w = store.insert(format!("{pre}/head/w"), group, he_normal(rng, wn, vec![wn, hd]))?;
    let head_b = store.insert(format!("{pre}/head/b"), group, Tensor::zeros(vec![hd]))?;
    Ok(BranchParams { stem_w, stem_b, layer_w, layer_b, head_w, head_b })
}

/// Sink layers for Aux-G at the given granularity: every layer, or the last
/// layer of each contiguous stage of g layers.
fn aux_g_sink_layers(n_layers: usize, granularity: Granularity) -> Result<Vec<usize>> {
    match granularity {
        Granularity::Layer => Ok((1..=n_layers).collect()),
        Granularity::Stage(g) => {
            if g == 0 || n_layers % g != 0 {
                return Err(Error::config(format!(
                    "stage granularity {g} must divide n_layers {n_layers}"
                )));
            }
            Ok((1..=n_layers).filter(|i| i % g == 0).collect())
        }
    }
}

fn windowed_sources(dst: usize, window: usize, src_max: usize) -> Vec<usize> {
    let lo = dst.saturating_sub(window);
    (lo..dst).filter(|&j| j <= src_max).collect()
}

impl AuxNetwork {
    /// Build a network in the given mode. `seed_rng` drives weight init.
    pub fn build(
        input_dim: usize,
        primary: BranchSpec,
        auxiliaries: Vec<BranchSpec>,
        mode: NetMode,
        opts: &BuildOptions,
        rng: &mut ChaCha8Rng,
    ) -> Result<AuxNetwork> {
        if input_dim == 0 {
            return Err(Error::config("input_dim must be >= 1"));
        }
        primary.validate()?;
        for a in &auxiliaries {
            a.validate()?;
        }
        match mode {
            NetMode::Single => {
                if !auxiliaries.is_empty() {
                    return Err(Error::config("single mode takes no auxiliary branches"));
                }
            }
            NetMode::Pruned => {
                return Err(Error::config("pruned networks come from prune(), not build()"))
            }
            _ => {
                if auxiliaries.is_empty() {
                    return Err(Error::config("need K >= 1 auxiliary branches"));
                }
            }
        }
        if opts.window == 0 {
            return Err(Error::config("window must be >= 1"));
        }

        let mut store = ParamStore::new();
        let mut branch_params = Vec::new();
        branch_params.push(insert_branch_params(&mut store, 0, input_dim, &primary, rng)?);
        for (k, a) in auxiliaries.iter().enumerate() {
            branch_params.push(insert_branch_params(&mut store, k + 1, input_dim, a, rng)?);
        }

        // structural connections, canonical order
        let mut connections: Vec<Connection> = Vec::new();
        match mode {
            NetMode::Single => {}
            NetMode::Symmetric => {
                for (k, a) in auxiliaries.iter().enumerate() {
                    let n = primary.n_layers.min(a.n_layers);
                    for i in 1..=n {
                        connections.push(Connection {
                            direction: Direction::AuxToPri,
                            aux_task: k,
                            src_layer: i - 1,
                            dst_layer: i,
                            weight: ArchWeight::Fixed,
                            adapter: None,
                        });
                        connections.push(Connection {
                            direction: Direction::PriToAux,
                            aux_task: k,
                            src_layer: i - 1,
                            dst_layer: i,
                            weight: ArchWeight::Fixed,
                            adapter: None,
                        });
                    }
                }
            }
            NetMode::AuxG => {
                for (k, a) in auxiliaries.iter().enumerate() {
                    for i in aux_g_sink_layers(a.n_layers, opts.granularity)? {
                        for j in windowed_sources(i, opts.window, primary.n_layers) {
                            connections.push(Connection {
                                direction: Direction::PriToAux,
                                aux_task: k,
                                src_layer: j,
                                dst_layer: i,
                                weight: ArchWeight::Fixed,
                                adapter: None,
                            });
                        }
                    }
                }
            }
            NetMode::AuxNas => {
                for (k, a) in auxiliaries.iter().enumerate() {
                    for i in 1..=primary.n_layers {
                        for j in windowed_sources(i, opts.window, a.n_layers) {
                            connections.push(Connection {
                                direction: Direction::AuxToPri,
                                aux_task: k,
                                src_layer: j,
                                dst_layer: i,
                                weight: ArchWeight::Fixed, // placeholder, alpha added below
                                adapter: None,
                            });
                        }
                    }
                    for i in 1..=a.n_layers {
                        for j in windowed_sources(i, opts.window, primary.n_layers) {
                            connections.push(Connection {
                                direction: Direction::PriToAux,
                                aux_task: k,
                                src_layer: j,
                                dst_layer: i,
                                weight: ArchWeight::Fixed,
                                adapter: None,
                            });
                        }
                    }
                }
            }
            NetMode::Pruned => unreachable!(),
        }
        connections.sort_by_key(|c| (c.sink_branch(), c.dst_layer, c.direction, c.aux_task, c.src_layer));

        let mut net = AuxNetwork {
            mode,
            input_dim,
            primary,
            auxiliaries,
            window: opts.window,
            granularity: opts.granularity,
            fusion_ops: opts.fusion_ops,
            block_activ: opts.block_activ,
            connections,
            fusion: BTreeMap::new(),
            branch_params,
            params: store,
        };

        // width adapters where source and destination widths differ
        for idx in 0..net.connections.len() {
            let c = net.connections[idx].clone();
            let src_w = net.branch_spec(c.src_branch()).feat_width(c.src_layer);
            let dst_w = net.branch_spec(c.sink_branch()).feat_width(c.dst_layer);
            if src_w != dst_w {
                let dir = match c.direction {
                    Direction::AuxToPri => "ap",
                    Direction::PriToAux => "pa",
                };
                let id = net.params.insert(
                    format!("adapter/{dir}/t{}/s{}/d{}", c.aux_task, c.src_layer, c.dst_layer),
                    ParamGroup::Fusion,
                    he_normal(rng, src_w, vec![src_w, dst_w]),
                )?;
                net.connections[idx].adapter = Some(id.0);
            }
        }

        // architecture weights (Aux-NAS only; Aux-G indicators stay fixed)
        if mode == NetMode::AuxNas {
            for idx in 0..net.connections.len() {
                let c = net.connections[idx].clone();
                let (group, tag) = match c.direction {
                    Direction::AuxToPri => (ParamGroup::AlphaP, "alphaP"),
                    Direction::PriToAux => (ParamGroup::AlphaA, "alphaA"),
                };
                let id = net.params.insert(
                    format!("{tag}/t{}/s{}/d{}", c.aux_task, c.src_layer, c.dst_layer),
                    group,
                    Tensor::scalar(0.5),
                )?;
                net.connections[idx].weight = ArchWeight::Learned(id.0);
            }
        }

        // fusion layers at every connection sink
        let sinks: Vec<(usize, usize)> = {
            let mut s: Vec<(usize, usize)> = net
                .connections
                .iter()
                .map(|c| (c.sink_branch(), c.dst_layer))
                .collect();
            s.sort_unstable();
            s.dedup();
            s
        };
        for (b, i) in sinks {
            let width = net.branch_spec(b).feat_width(i);
            let proj_in: usize = net
                .connections
                .iter()
                .filter(|c| c.sink_branch() == b && c.dst_layer == i)
                .map(|c| {
                    if c.adapter.is_some() {
                        width
                    } else {
                        net.branch_spec(c.src_branch()).feat_width(c.src_layer)
                    }
                })
                .sum();
            let pre = branch_prefix(b);
            let projection = Some(net.params.insert(
                format!("fusion/{pre}/L{i}/proj"),
                ParamGroup::Fusion,
                Tensor::zeros(vec![proj_in, width]),
            )?);
            let gamma = net.params.insert(
                format!("fusion/{pre}/L{i}/gamma"),
                ParamGroup::Norm,
                Tensor::new(vec![width], vec![1.0; width])?,
            )?;
            let beta = net.params.insert(
                format!("fusion/{pre}/L{i}/beta"),
                ParamGroup::Norm,
                Tensor::zeros(vec![width]),
            )?;
            net.fusion.insert((b, i), FusionLayer { projection, gamma, beta, bn: BnState::new(width) });
        }

        net.check_acyclic()?;
        Ok(net)
    }

    /// Vanilla single-task network for the primary spec.
    pub fn build_single(
        input_dim: usize,
        primary: BranchSpec,
        block_activ: ActivKind,
        rng: &mut ChaCha8Rng,
    ) -> Result<AuxNetwork> {
        let opts = BuildOptions { block_activ, ..Default::default() };
        AuxNetwork::build(input_dim, primary, vec![], NetMode::Single, &opts, rng)
    }

    pub fn branch_spec(&self, b: usize) -> &BranchSpec {
        if b == 0 {
            &self.primary
        } else {
            &self.auxiliaries[b - 1]
        }
    }

    pub fn n_branches(&self) -> usize {
        1 + self.auxiliaries.len()
    }

    pub fn aux_count(&self) -> usize {
        self.auxiliaries.len()
    }

    /// Every connection must point strictly forward and stay in the window.
    pub fn check_acyclic(&self) -> Result<()> {
        for c in &self.connections {
            if c.src_layer >= c.dst_layer {
                return Err(Error::invariant(format!(
                    "connection src {} !< dst {}",
                    c.src_layer, c.dst_layer
                )));
            }
            if c.dst_layer - c.src_layer > self.window {
                return Err(Error::invariant(format!(
                    "connection span {} exceeds window {}",
                    c.dst_layer - c.src_layer,
                    self.window
                )));
            }
            if c.aux_task >= self.auxiliaries.len() && self.mode != NetMode::Pruned {
                return Err(Error::invariant(format!("aux task {} out of range", c.aux_task)));
            }
        }
        Ok(())
    }

    pub fn alpha_p_values(&self) -> Vec<f64> {
        self.params
            .iter()
            .filter(|(_, p)| p.group == ParamGroup::AlphaP)
            .map(|(_, p)| p.value.item())
            .collect()
    }

    pub fn alpha_a_values(&self) -> Vec<f64> {
        self.params
            .iter()
            .filter(|(_, p)| p.group == ParamGroup::AlphaA)
            .map(|(_, p)| p.value.item())
            .collect()
    }

    /// Hard-zero every auxiliary-to-primary architecture weight in place.
    pub fn zero_alpha_p(&mut self) {
        let ids = self.params.ids_in_group(ParamGroup::AlphaP);
        for id in ids {
            for v in self.params.value_mut(id).data_mut() {
                *v = 0.0;
            }
        }
    }

    fn activ(&self, tape: &mut Tape, x: NodeId, kind: ActivKind) -> Result<NodeId> {
        match kind {
            ActivKind::Relu => tape.relu(x),
            ActivKind::Identity => Ok(x),
        }
    }

    /// Full supernet forward in whatever mode the network is in.
    pub fn forward(&mut self, tape: &mut Tape, x: &Tensor, train: bool) -> Result<ForwardPass> {
        if x.shape().len() != 2 || x.cols() != self.input_dim {
            return Err(Error::Dimension {
                op: "forward",
                lhs: x.shape().to_vec(),
                rhs: vec![0, self.input_dim],
            });
        }
        let n_branches = self.n_branches();
        let conns = self.connections.clone();
        let x_node = tape.input(x.clone())?;

        let mut features: Vec<Vec<NodeId>> = Vec::with_capacity(n_branches);
        for b in 0..n_branches {
            let bp = &self.branch_params[b];
            let w = tape.param(bp.stem_w, &self.params)?;
            let bias = tape.param(bp.stem_b, &self.params)?;
            let stem = tape.linear(x_node, w, Some(bias))?;
            tape.set_label(stem, "stem");
            features.push(vec![stem]);
        }

        let max_n = (0..n_branches).map(|b| self.branch_spec(b).n_layers).max().unwrap();
        for i in 1..=max_n {
            for b in 0..n_branches {
                if i > self.branch_spec(b).n_layers {
                    continue;
                }
                let bp = self.branch_params[b].clone();
                let prev = features[b][i - 1];
                let w = tape.param(bp.layer_w[i - 1], &self.params)?;
                let bias = tape.param(bp.layer_b[i - 1], &self.params)?;
                let blk = tape.linear(prev, w, Some(bias))?;
                tape.set_label(blk, "block");
                let blk = self.activ(tape, blk, self.block_activ)?;

                let out = if self.fusion.contains_key(&(b, i)) {
                    // gather scaled, width-adapted cross-task sources
                    let mut sources: Vec<(NodeId, Option<NodeId>)> = Vec::new();
                    for c in conns.iter().filter(|c| c.sink_branch() == b && c.dst_layer == i) {
                        let mut src = features[c.src_branch()][c.src_layer];
                        if let Some(a) = c.adapter {
                            let aw = tape.param(ParamId(a), &self.params)?;
                            src = tape.linear(src, aw, None)?;
                            tape.set_label(src, "adapter");
                        }
                        let alpha = match c.weight {
                            ArchWeight::Fixed => None,
                            ArchWeight::Learned(id) => Some(tape.param(ParamId(id), &self.params)?),
                        };
                        sources.push((src, alpha));
                    }
                    let fl = self.fusion.get_mut(&(b, i)).unwrap();
                    let proj = match fl.projection {
                        Some(id) if !sources.is_empty() => {
                            let n = tape.param(id, &self.params)?;
                            Some(n)
                        }
                        _ => None,
                    };
                    let gamma = tape.param(fl.gamma, &self.params)?;
                    let beta = tape.param(fl.beta, &self.params)?;
                    fuse(
                        tape,
                        blk,
                        &sources,
                        FuseCtx {
                            projection: proj,
                            gamma,
                            beta,
                            bn: &mut fl.bn,
                            ops: self.fusion_ops,
                            train,
                        },
                    )?
                } else {
                    blk
                };
                features[b].push(out);
            }
        }

        let mut outs = Vec::with_capacity(n_branches);
        for b in 0..n_branches {
            let bp = &self.branch_params[b];
            let n = self.branch_spec(b).n_layers;
            let w = tape.param(bp.head_w, &self.params)?;
            let bias = tape.param(bp.head_b, &self.params)?;
            let out = tape.linear(features[b][n], w, Some(bias))?;
            tape.set_label(out, "head");
            outs.push(out);
        }
        Ok(ForwardPass {
            primary_out: outs[0],
            aux_outs: outs[1..].to_vec(),
            features,
        })
    }

    /// Symmetric soft-parameter-sharing forward: each branch's layer i
    /// consumes both branches' layer i-1 features.
    pub fn forward_symmetric(&mut self, tape: &mut Tape, x: &Tensor, train: bool) -> Result<ForwardPass> {
        if self.mode != NetMode::Symmetric {
            return Err(Error::contract(format!(
                "forward_symmetric requires symmetric mode, network is {:?}",
                self.mode
            )));
        }
        self.forward(tape, x, train)
    }

    /// Asymmetric forward: primary consumes only primary features. Legal in
    /// aux_g mode, or in aux_nas mode once every alpha^P is hard-zeroed.
    pub fn forward_asymmetric(&mut self, tape: &mut Tape, x: &Tensor, train: bool) -> Result<ForwardPass> {
        match self.mode {
            NetMode::AuxG => {}
            NetMode::AuxNas => {
                if let Some(bad) = self.alpha_p_values().iter().find(|v| **v != 0.0) {
                    return Err(Error::contract(format!(
                        "forward_asymmetric: residual aux->pri connection with alpha {bad} != 0"
                    )));
                }
            }
            other => {
                return Err(Error::contract(format!(
                    "forward_asymmetric requires aux_g or hard-zeroed aux_nas, network is {other:?}"
                )))
            }
        }
        self.forward(tape, x, train)
    }

    /// Hard-zero alpha^P, then delete the auxiliary branches, every
    /// cross-task connection, and the primary-path projections. The
    /// surviving network keeps the primary-path norm+activation layers, so
    /// its forward computes exactly the same values as the full forward
    /// with alpha^P zeroed.
    pub fn prune(&self) -> Result<AuxNetwork> {
        if !matches!(self.mode, NetMode::AuxNas | NetMode::AuxG) {
            return Err(Error::contract(format!("prune requires aux_nas or aux_g, got {:?}", self.mode)));
        }
        let mut store = ParamStore::new();
        let remap = |old: &ParamStore, id: ParamId, store: &mut ParamStore| -> Result<ParamId> {
            let p = old.get(id);
            store.insert(p.name.clone(), p.group, p.value.clone())
        };
        let bp = &self.branch_params[0];
        let new_bp = BranchParams {
            stem_w: remap(&self.params, bp.stem_w, &mut store)?,
            stem_b: remap(&self.params, bp.stem_b, &mut store)?,
            layer_w: bp
                .layer_w
                .iter()
                .map(|&id| remap(&self.params, id, &mut store))
                .collect::<Result<_>>()?,
            layer_b: bp
                .layer_b
                .iter()
                .map(|&id| remap(&self.params, id, &mut store))
                .collect::<Result<_>>()?,
            head_w: remap(&self.params, bp.head_w, &mut store)?,
            head_b: remap(&self.params, bp.head_b, &mut store)?,
        };
        let mut fusion = BTreeMap::new();
        for ((b, i), fl) in &self.fusion {
            if *b != 0 {
                continue;
            }
            fusion.insert(
                (0usize, *i),
                FusionLayer {
                    projection: None,
                    gamma: remap(&self.params, fl.gamma, &mut store)?,
                    beta: remap(&self.params, fl.beta, &mut store)?,
                    bn: fl.bn.clone(),
                },
            );
        }
        Ok(AuxNetwork {
            mode: NetMode::Pruned,
            input_dim: self.input_dim,
            primary: self.primary.clone(),
            auxiliaries: vec![],
            window: self.window,
            granularity: self.granularity,
            fusion_ops: self.fusion_ops,
            block_activ: self.block_activ,
            connections: vec![],
            fusion,
            branch_params: vec![new_bp],
            params: store,
        })
    }

    /// Scalar count of the vanilla single-task network for the primary spec
    /// (stem + layers + head; no norm affine pairs).
    pub fn single_task_scalar_count(&self) -> usize {
        let s = &self.primary;
        let d = self.input_dim;
        let w0 = s.feat_width(0);
        let mut n = d * w0 + w0;
        for i in 1..=s.n_layers {
            let win = s.feat_width(i - 1);
            let wout = s.feat_width(i);
            n += win * wout + wout;
        }
        let h = s.head.out_dim();
        n += s.feat_width(s.n_layers) * h + h;
        n
    }

    /// Number of primary-path fusion layers (each contributes one
    /// gamma/beta pair to the pruned network).
    pub fn fused_primary_layers(&self) -> usize {
        self.fusion.keys().filter(|(b, _)| *b == 0).count()
    }
}

pub struct FuseCtx<'a> {
    pub projection: Option<NodeId>,
    pub gamma: NodeId,
    pub beta: NodeId,
    pub bn: &'a mut BnState,
    pub ops: FusionOps,
    pub train: bool,
}

/// Activ(Norm(dest_prev + Projection(concat(alpha_k * src_k)))).
///
/// Sources arrive width-adapted; `alpha = None` means a fixed indicator
/// (weight 1). With no sources or no projection the cross-task term is
/// skipped entirely: Activ(Norm(dest_prev)).
pub fn fuse(
    tape: &mut Tape,
    dest_prev: NodeId,
    sources: &[(NodeId, Option<NodeId>)],
    ctx: FuseCtx,
) -> Result<NodeId> {
    let mut cur = dest_prev;
    if let Some(proj) = ctx.projection {
        if !sources.is_empty() {
            let mut parts = Vec::with_capacity(sources.len());
            for &(src, alpha) in sources {
                let part = match alpha {
                    Some(a) => tape.scale(src, a)?,
                    None => src,
                };
                parts.push(part);
            }
            let cat = tape.concat(&parts)?;
            let proj_out = tape.linear(cat, proj, None)?;
            tape.set_label(proj_out, "projection");
            cur = tape.add(dest_prev, proj_out)?;
        }
    }
    let normed = match ctx.ops.norm {
        NormKind::BatchNorm => tape.batchnorm(cur, ctx.gamma, ctx.beta, ctx.train, ctx.bn)?,
        NormKind::Identity => cur,
    };
    match ctx.ops.activ {
        ActivKind::Relu => tape.relu(normed),
        ActivKind::Identity => Ok(normed),
    }
}
