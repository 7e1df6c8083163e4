//! Evaluation protocol: baselines, metrics, paired significance tests, and
//! the branch-count scaling study.
//!
//! Every architecture-search method is pruned before its metrics are
//! computed, so reported numbers always correspond to single-task inference
//! cost.

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::archnet::{
    ActivKind, AuxNetwork, BranchSpec, BuildOptions, Granularity, HeadKind, NetMode,
};
use crate::error::{Error, Result};
use crate::params::{ParamGroup, ParamId, ParamStore};
use crate::rng;
use crate::tape::{NodeId, Tape};
use crate::taskgen::{self, Dataset, FamilyConfig, Split, TaskLabels};
use crate::tensor::Tensor;
use crate::trainer::{self, TrainConfig, TrainReport};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Single,
    AuxHead,
    AuxGStage,
    AuxGLayer,
    AuxNas,
    /// aux_nas trained with alpha^P pinned at zero while alpha^A stays
    /// searchable: gradients flow primary -> auxiliary, but no features
    /// flow back. Isolates the contribution of the feature search.
    AuxNasFrozen,
}

impl Method {
    pub const ALL: [Method; 6] = [
        Method::Single,
        Method::AuxHead,
        Method::AuxGStage,
        Method::AuxGLayer,
        Method::AuxNas,
        Method::AuxNasFrozen,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            Method::Single => "single",
            Method::AuxHead => "aux_head",
            Method::AuxGStage => "aux_g_stage",
            Method::AuxGLayer => "aux_g_layer",
            Method::AuxNas => "aux_nas",
            Method::AuxNasFrozen => "aux_nas_frozen",
        }
    }
}

// --- metrics ---

#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
pub struct Metrics {
    /// Mean squared error (regression primary) or none.
    pub mse: Option<f64>,
    pub rmse: Option<f64>,
    /// Fraction correct (classification primary) or none.
    pub accuracy: Option<f64>,
}

impl Metrics {
    /// Scalar where lower is better, for cross-method comparison.
    pub fn score(&self) -> f64 {
        match (self.mse, self.accuracy) {
            (Some(m), _) => m,
            (None, Some(a)) => 1.0 - a,
            _ => f64::NAN,
        }
    }
}

fn metrics_from(pred: &Tensor, label: &TaskLabels) -> Result<Metrics> {
    match label {
        TaskLabels::Regression(y) => {
            if pred.shape() != y.shape() {
                return Err(Error::Dimension {
                    op: "metrics",
                    lhs: pred.shape().to_vec(),
                    rhs: y.shape().to_vec(),
                });
            }
            let n = pred.numel() as f64;
            let mse = pred
                .data()
                .iter()
                .zip(y.data())
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                / n;
            Ok(Metrics { mse: Some(mse), rmse: Some(mse.sqrt()), accuracy: None })
        }
        TaskLabels::Classification { labels, classes } => {
            let n = labels.len();
            let mut correct = 0usize;
            for (r, want) in labels.iter().enumerate() {
                let row = &pred.data()[r * classes..(r + 1) * classes];
                let mut best = 0;
                for j in 1..*classes {
                    if row[j] > row[best] {
                        best = j;
                    }
                }
                if best == *want {
                    correct += 1;
                }
            }
            Ok(Metrics { mse: None, rmse: None, accuracy: Some(correct as f64 / n as f64) })
        }
    }
}

/// Primary-task metrics on a split. Only vanilla and pruned networks are
/// accepted: evaluation never runs on a supernet.
pub fn eval_primary(net: &mut AuxNetwork, data: &Dataset, split: Split) -> Result<Metrics> {
    match net.mode {
        NetMode::Single | NetMode::Pruned => {}
        other => {
            return Err(Error::contract(format!(
                "eval_primary accepts single or pruned networks, got {other:?}"
            )))
        }
    }
    let idx = data.split_indices(split);
    if idx.is_empty() {
        return Err(Error::contract("eval_primary: empty split"));
    }
    let (x, labels) = data.batch(&idx);
    let mut tape = Tape::new();
    let pass = net.forward(&mut tape, &x, false)?;
    metrics_from(tape.value(pass.primary_out), &labels[0])
}

// --- auxiliary-head baseline: one trunk, one extra head per task ---

#[derive(Debug, Clone)]
pub struct AuxHeadNet {
    pub input_dim: usize,
    pub trunk: BranchSpec,
    pub task_heads: Vec<HeadKind>,
    pub params: ParamStore,
    stem_w: ParamId,
    stem_b: ParamId,
    layer_w: Vec<ParamId>,
    layer_b: Vec<ParamId>,
    head_w: Vec<ParamId>,
    head_b: Vec<ParamId>,
}

impl AuxHeadNet {
    pub fn build(
        input_dim: usize,
        trunk: BranchSpec,
        task_heads: Vec<HeadKind>,
        rng: &mut rand_chacha::ChaCha8Rng,
    ) -> Result<AuxHeadNet> {
        use rand::Rng;
        if task_heads.is_empty() {
            return Err(Error::config("aux_head: need at least one task head"));
        }
        trunk.validate()?;
        let he = |rng: &mut rand_chacha::ChaCha8Rng, fan_in: usize, shape: Vec<usize>| {
            let std = (2.0 / fan_in as f64).sqrt();
            let numel: usize = shape.iter().product();
            let mut data = Vec::with_capacity(numel);
            for _ in 0..numel {
                let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
                let u2: f64 = rng.gen();
                data.push(std * (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos());
            }
            Tensor::new(shape, data).unwrap()
        };
        let mut params = ParamStore::new();
        let g = ParamGroup::PrimaryW;
        let w0 = trunk.feat_width(0);
        let stem_w = params.insert("trunk/stem/w", g, he(rng, input_dim, vec![input_dim, w0]))?;
        let stem_b = params.insert("trunk/stem/b", g, Tensor::zeros(vec![w0]))?;
        let mut layer_w = Vec::new();
        let mut layer_b = Vec::new();
        for i in 1..=trunk.n_layers {
            let win = trunk.feat_width(i - 1);
            let wout = trunk.feat_width(i);
            layer_w.push(params.insert(format!("trunk/layer{i}/w"), g, he(rng, win, vec![win, wout]))?);
            layer_b.push(params.insert(format!("trunk/layer{i}/b"), g, Tensor::zeros(vec![wout]))?);
        }
        let wn = trunk.feat_width(trunk.n_layers);
        let mut head_w = Vec::new();
        let mut head_b = Vec::new();
        for (t, h) in task_heads.iter().enumerate() {
            let d = h.out_dim();
            head_w.push(params.insert(format!("head{t}/w"), g, he(rng, wn, vec![wn, d]))?);
            head_b.push(params.insert(format!("head{t}/b"), g, Tensor::zeros(vec![d]))?);
        }
        Ok(AuxHeadNet { input_dim, trunk, task_heads, params, stem_w, stem_b, layer_w, layer_b, head_w, head_b })
    }

    pub fn forward(&self, tape: &mut Tape, x: &Tensor) -> Result<Vec<NodeId>> {
        let x = tape.input(x.clone())?;
        let w = tape.param(self.stem_w, &self.params)?;
        let b = tape.param(self.stem_b, &self.params)?;
        let mut h = tape.linear(x, w, Some(b))?;
        for i in 0..self.trunk.n_layers {
            let w = tape.param(self.layer_w[i], &self.params)?;
            let b = tape.param(self.layer_b[i], &self.params)?;
            let lin = tape.linear(h, w, Some(b))?;
            h = tape.relu(lin)?;
        }
        let mut outs = Vec::new();
        for t in 0..self.task_heads.len() {
            let w = tape.param(self.head_w[t], &self.params)?;
            let b = tape.param(self.head_b[t], &self.params)?;
            outs.push(tape.linear(h, w, Some(b))?);
        }
        Ok(outs)
    }
}

fn task_loss(tape: &mut Tape, out: NodeId, label: &TaskLabels) -> Result<NodeId> {
    match label {
        TaskLabels::Regression(t) => tape.mse(out, t),
        TaskLabels::Classification { labels, .. } => tape.softmax_xent(out, labels),
    }
}

/// Train the shared-trunk multi-head baseline with the configured weight
/// optimizer (the model has no architecture weights, so the alpha columns
/// of the step log are zero).
pub fn train_aux_head(net: &mut AuxHeadNet, data: &Dataset, cfg: &TrainConfig) -> Result<TrainReport> {
    use std::time::Instant;
    let mut state = trainer::OptimState::new();
    let mut records = Vec::new();
    let mut step = 0usize;
    for epoch in 0..cfg.epochs {
        let seed = trainer::epoch_seed(cfg.seed, epoch);
        for pair in data.iterate(Split::Train, cfg.batch_size, seed, false)? {
            let started = cfg.timing.then(Instant::now);
            let (x, labels) = data.batch(&pair.w);
            let mut tape = Tape::new();
            let outs = net.forward(&mut tape, &x)?;
            let parts: Vec<NodeId> = outs
                .iter()
                .zip(&labels)
                .map(|(o, l)| task_loss(&mut tape, *o, l))
                .collect::<Result<_>>()?;
            let total = tape.add_scalars(&parts)?;
            let grads = tape.backward(total)?;
            let pg = grads.param_grads(&tape, &net.params);
            let l_p = tape.value(parts[0]).item();
            let l_a: f64 = parts[1..].iter().map(|p| tape.value(*p).item()).sum();
            trainer::check_finite_losses(step, &[(l_p, "l_p"), (l_a, "l_a")])?;
            let ops = tape.forward_cost().total() + tape.backward_cost();
            trainer::sgd_update(&mut net.params, &pg, &mut state, &cfg.optim, |g| g.is_weight(), &[]);
            records.push(trainer::StepRecord {
                step,
                l_p,
                l_a,
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
    }
    Ok(TrainReport {
        records,
        epochs: Vec::new(),
        final_alpha_p: Vec::new(),
        final_alpha_a: Vec::new(),
    })
}

/// Primary-task metrics of the shared-trunk baseline on one split.
pub fn eval_aux_head(net: &AuxHeadNet, data: &Dataset, split: Split) -> Result<Metrics> {
    let idx = data.split_indices(split);
    if idx.is_empty() {
        return Err(Error::contract("eval_aux_head: empty split"));
    }
    let (x, labels) = data.batch(&idx);
    let mut tape = Tape::new();
    let outs = net.forward(&mut tape, &x)?;
    metrics_from(tape.value(outs[0]), &labels[0])
}

/// Train the shared-trunk multi-head baseline and return primary metrics on
/// the test split.
pub fn aux_head_baseline(
    input_dim: usize,
    trunk: BranchSpec,
    heads: Vec<HeadKind>,
    data: &Dataset,
    cfg: &TrainConfig,
    init_seed: u64,
) -> Result<Metrics> {
    let mut rng = rng::stream(init_seed, "init");
    let mut net = AuxHeadNet::build(input_dim, trunk, heads, &mut rng)?;
    train_aux_head(&mut net, data, cfg)?;
    eval_aux_head(&net, data, Split::Test)
}

pub const AUX_HEAD_FORMAT_TAG: &str = "auxnas-auxhead-v1";

#[derive(Serialize, Deserialize)]
struct AuxHeadParamFile {
    name: String,
    shape: Vec<usize>,
    data_b64: String,
}

#[derive(Serialize, Deserialize)]
struct AuxHeadFile {
    format: String,
    input_dim: usize,
    trunk: BranchSpec,
    task_heads: Vec<HeadKind>,
    params: Vec<AuxHeadParamFile>,
}

pub fn aux_head_to_json(net: &AuxHeadNet) -> Result<String> {
    let file = AuxHeadFile {
        format: AUX_HEAD_FORMAT_TAG.to_string(),
        input_dim: net.input_dim,
        trunk: net.trunk.clone(),
        task_heads: net.task_heads.clone(),
        params: net
            .params
            .iter()
            .map(|(_, p)| AuxHeadParamFile {
                name: p.name.clone(),
                shape: p.value.shape().to_vec(),
                data_b64: crate::archnet::serialize::encode_f64s(p.value.data()),
            })
            .collect(),
    };
    Ok(serde_json::to_string_pretty(&file)?)
}

pub fn aux_head_from_json(json: &str) -> Result<AuxHeadNet> {
    let file: AuxHeadFile = serde_json::from_str(json)?;
    if file.format != AUX_HEAD_FORMAT_TAG {
        return Err(Error::Parse(format!(
            "expected format {AUX_HEAD_FORMAT_TAG:?}, got {:?}",
            file.format
        )));
    }
    let mut rng = rng::stream(0, "init");
    let mut net = AuxHeadNet::build(file.input_dim, file.trunk, file.task_heads, &mut rng)?;
    if file.params.len() != net.params.len() {
        return Err(Error::Parse(format!(
            "snapshot has {} parameters, model needs {}",
            file.params.len(),
            net.params.len()
        )));
    }
    for pf in &file.params {
        let id = net
            .params
            .id_of(&pf.name)
            .ok_or_else(|| Error::Parse(format!("unknown parameter {:?}", pf.name)))?;
        let data = crate::archnet::serialize::decode_f64s(&pf.data_b64)?;
        let cur = net.params.value(id);
        if cur.shape() != pf.shape.as_slice() || cur.numel() != data.len() {
            return Err(Error::Parse(format!("shape mismatch for {:?}", pf.name)));
        }
        *net.params.value_mut(id) = Tensor::new(pf.shape.clone(), data)?;
    }
    Ok(net)
}

// --- paired comparison ---

/// One-sided paired t-test that `a` is smaller than `b` on average.
/// Returns (t statistic, p-value). Smaller p favors "a < b".
pub fn paired_t_less(a: &[f64], b: &[f64]) -> Result<(f64, f64)> {
    if a.len() != b.len() || a.len() < 2 {
        return Err(Error::contract("paired_t_less: need >= 2 paired samples"));
    }
    let n = a.len() as f64;
    let d: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let mean = d.iter().sum::<f64>() / n;
    let var = d.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0);
    if var == 0.0 {
        // all differences equal: p is 0 or 1 depending on the sign
        return Ok((f64::NEG_INFINITY * mean.signum(), if mean < 0.0 { 0.0 } else { 1.0 }));
    }
    let t = mean / (var / n).sqrt();
    let dist = StudentsT::new(0.0, 1.0, n - 1.0)
        .map_err(|e| Error::invariant(format!("t distribution: {e}")))?;
    Ok((t, dist.cdf(t)))
}

// --- protocol ---

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct NetShape {
    pub n_layers: usize,
    pub width: usize,
    pub window: usize,
    pub stage: usize,
}

#[derive(Debug, Clone)]
pub struct ProtocolConfig {
    pub family: FamilyConfig,
    pub family_seed: u64,
    pub n_samples: usize,
    pub seeds: Vec<u64>,
    pub methods: Vec<Method>,
    pub shape: NetShape,
    pub train: TrainConfig,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Cell {
    pub method: Method,
    pub seed: u64,
    pub metrics: Option<Metrics>,
    pub failed: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ResultTable {
    pub cells: Vec<Cell>,
}

impl ResultTable {
    pub fn scores(&self, m: Method) -> Vec<f64> {
        self.cells
            .iter()
            .filter(|c| c.method == m && !c.failed)
            .filter_map(|c| c.metrics.map(|x| x.score()))
            .collect()
    }

    pub fn mean_score(&self, m: Method) -> Option<f64> {
        let s = self.scores(m);
        if s.is_empty() {
            None
        } else {
            Some(s.iter().sum::<f64>() / s.len() as f64)
        }
    }

    /// Per-seed differences method - single; requires both runs per seed.
    pub fn paired_diffs(&self, m: Method) -> Vec<f64> {
        let a = self.scores(m);
        let b = self.scores(Method::Single);
        a.iter().zip(&b).map(|(x, y)| x - y).collect()
    }

    /// p-value that `m` beats single (lower score) under a one-sided
    /// paired t-test.
    pub fn p_beats_single(&self, m: Method) -> Result<f64> {
        Ok(paired_t_less(&self.scores(m), &self.scores(Method::Single))?.1)
    }
}

fn dataset_hash(ds: &Dataset) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    let mut mix = |bits: u64| {
        h ^= bits;
        h = h.wrapping_mul(0x0000_0100_0000_01B3);
    };
    for v in ds.inputs.data() {
        mix(v.to_bits());
    }
    for l in &ds.labels {
        match l {
            TaskLabels::Regression(t) => t.data().iter().for_each(|v| mix(v.to_bits())),
            TaskLabels::Classification { labels, .. } => {
                labels.iter().for_each(|v| mix(*v as u64))
            }
        }
    }
    h
}

fn heads_for(family: &FamilyConfig) -> Vec<HeadKind> {
    family
        .tasks
        .iter()
        .map(|t| match *t {
            taskgen::TaskKind::Regression { dim } => HeadKind::Regression { dim },
            taskgen::TaskKind::Classification { classes } => HeadKind::Classification { classes },
        })
        .collect()
}

/// Train and evaluate one method on one dataset. Search methods are pruned
/// before evaluation. Divergence is reported, not propagated.
pub fn run_method(
    method: Method,
    cfg: &ProtocolConfig,
    data: &Dataset,
    seed: u64,
) -> Result<Cell> {
    let heads = heads_for(&cfg.family);
    let primary = BranchSpec::uniform(cfg.shape.n_layers, cfg.shape.width, heads[0]);
    let aux_specs: Vec<BranchSpec> = heads[1..]
        .iter()
        .map(|h| BranchSpec::uniform(cfg.shape.n_layers, cfg.shape.width, *h))
        .collect();
    let mut tcfg = cfg.train.clone();
    tcfg.seed = seed;
    let mut rng = rng::stream(seed, "init");

    let outcome: Result<Metrics> = (|| match method {
        Method::Single => {
            let mut net = AuxNetwork::build_single(
                cfg.family.input_dim,
                primary.clone(),
                ActivKind::Relu,
                &mut rng,
            )?;
            trainer::train_joint(&mut net, data, &tcfg)?;
            eval_primary(&mut net, data, Split::Test)
        }
        Method::AuxHead => aux_head_baseline(
            cfg.family.input_dim,
            primary.clone(),
            heads.clone(),
            data,
            &tcfg,
            seed,
        ),
        Method::AuxGStage | Method::AuxGLayer => {
            let gran = if method == Method::AuxGStage {
                Granularity::Stage(cfg.shape.stage)
            } else {
                Granularity::Layer
            };
            let opts = BuildOptions {
                window: cfg.shape.window,
                granularity: gran,
                ..Default::default()
            };
            let mut net = AuxNetwork::build(
                cfg.family.input_dim,
                primary.clone(),
                aux_specs.clone(),
                NetMode::AuxG,
                &opts,
                &mut rng,
            )?;
            trainer::train_aux_g(&mut net, data, &tcfg)?;
            let mut pruned = net.prune()?;
            eval_primary(&mut pruned, data, Split::Test)
        }
        Method::AuxNas | Method::AuxNasFrozen => {
            let opts = BuildOptions { window: cfg.shape.window, ..Default::default() };
            let mut net = AuxNetwork::build(
                cfg.family.input_dim,
                primary.clone(),
                aux_specs.clone(),
                NetMode::AuxNas,
                &opts,
                &mut rng,
            )?;
            if method == Method::AuxNasFrozen {
                // gradients + searchable alpha^A only: pin alpha^P at zero
                net.zero_alpha_p();
                tcfg.freeze_alpha_p = true;
            }
            trainer::train_aux_nas(&mut net, data, &tcfg)?;
            let mut pruned = net.prune()?;
            eval_primary(&mut pruned, data, Split::Test)
        }
    })();

    match outcome {
        Ok(metrics) => Ok(Cell { method, seed, metrics: Some(metrics), failed: false }),
        Err(Error::Diverged { .. }) | Err(Error::NonFinite { .. }) => {
            Ok(Cell { method, seed, metrics: None, failed: true })
        }
        Err(e) => Err(e),
    }
}

/// Run every (method, seed) pair; every method within a seed sees the
/// byte-identical dataset, asserted by hash.
pub fn run_protocol(cfg: &ProtocolConfig) -> Result<ResultTable> {
    if cfg.seeds.is_empty() || cfg.methods.is_empty() {
        return Err(Error::config("protocol: need at least one seed and one method"));
    }
    let family = taskgen::TaskFamily::new(cfg.family.clone(), cfg.family_seed)?;
    let mut cells = Vec::new();
    for &seed in &cfg.seeds {
        let data = taskgen::generate(&family, cfg.n_samples, seed)?;
        let h = dataset_hash(&data);
        for &method in &cfg.methods {
            if dataset_hash(&data) != h {
                return Err(Error::invariant("protocol: dataset mutated between methods"));
            }
            cells.push(run_method(method, cfg, &data, seed)?);
        }
    }
    Ok(ResultTable { cells })
}

// --- scaling study ---

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ScalingPoint {
    pub k: usize,
    /// Mean measured forward+backward ops per training step.
    pub ops_per_step: f64,
    pub weight_count: usize,
    pub alpha_count: usize,
    pub wall_ms_per_step: Option<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ScalingFit {
    pub points: Vec<ScalingPoint>,
    /// cost ~= a * (K+1) * |w_single| + b * K * |alpha_per_pair|
    pub a: f64,
    pub b: f64,
    pub r2: f64,
}

/// Train a small aux-nas supernet for each branch count and fit measured
/// per-step cost against the two-term linear model in K.
pub fn scaling_study(
    ks: &[usize],
    shape: &NetShape,
    input_dim: usize,
    train: &TrainConfig,
    n_samples: usize,
    seed: u64,
) -> Result<ScalingFit> {
    if ks.len() < 2 {
        return Err(Error::contract("scaling_study: need at least two branch counts"));
    }
    let mut points = Vec::new();
    for &k in ks {
        let tasks = vec![taskgen::TaskKind::Regression { dim: 1 }; k + 1];
        let fam = taskgen::TaskFamily::new(
            FamilyConfig {
                input_dim,
                relatedness: 0.8,
                tasks,
                noise_std: vec![0.05; k + 1],
                label_flip: 0.0,
                shared_heads: false,
            },
            seed,
        )?;
        let data = taskgen::generate(&fam, n_samples, seed)?;
        let head = HeadKind::Regression { dim: 1 };
        let spec = BranchSpec::uniform(shape.n_layers, shape.width, head);
        let opts = BuildOptions { window: shape.window, ..Default::default() };
        let mut rng = rng::stream(seed, "init");
        let mut net = AuxNetwork::build(
            input_dim,
            spec.clone(),
            vec![spec; k],
            NetMode::AuxNas,
            &opts,
            &mut rng,
        )?;
        let weight_count = net.params.scalar_count_in(|g| g.is_weight());
        let alpha_count = net.params.scalar_count_in(|g| g.is_alpha());
        let report = trainer::train_aux_nas(&mut net, &data, train)?;
        let ops = report.records.iter().map(|r| r.batch_op_count as f64).sum::<f64>()
            / report.records.len() as f64;
        let wall = if train.timing {
            Some(
                report.records.iter().filter_map(|r| r.batch_wall_ms).sum::<f64>()
                    / report.records.len() as f64,
            )
        } else {
            None
        };
        points.push(ScalingPoint {
            k,
            ops_per_step: ops,
            weight_count,
            alpha_count,
            wall_ms_per_step: wall,
        });
    }

    // least squares for cost = a * weight_count + b * alpha_count (both
    // features already scale with K)
    let (mut s11, mut s12, mut s22, mut sy1, mut sy2) = (0.0, 0.0, 0.0, 0.0, 0.0);
    for p in &points {
        let f1 = p.weight_count as f64;
        let f2 = p.alpha_count as f64;
        s11 += f1 * f1;
        s12 += f1 * f2;
        s22 += f2 * f2;
        sy1 += f1 * p.ops_per_step;
        sy2 += f2 * p.ops_per_step;
    }
    let det = s11 * s22 - s12 * s12;
    let (a, b) = if det.abs() > 1e-12 {
        ((s22 * sy1 - s12 * sy2) / det, (s11 * sy2 - s12 * sy1) / det)
    } else {
        (sy1 / s11, 0.0)
    };
    let mean_y = points.iter().map(|p| p.ops_per_step).sum::<f64>() / points.len() as f64;
    let mut ss_res = 0.0;
    let mut ss_tot = 0.0;
    for p in &points {
        let pred = a * p.weight_count as f64 + b * p.alpha_count as f64;
        ss_res += (p.ops_per_step - pred) * (p.ops_per_step - pred);
        ss_tot += (p.ops_per_step - mean_y) * (p.ops_per_step - mean_y);
    }
    let r2 = if ss_tot > 0.0 { 1.0 - ss_res / ss_tot } else { 1.0 };
    Ok(ScalingFit { points, a, b, r2 })
}

/// Loss-curve columns for gnuplot: `step l_p l_a lambda alpha_p_max`.
pub fn write_loss_dat(report: &TrainReport, mut w: impl std::io::Write) -> Result<()> {
    writeln!(w, "# step l_p l_a lambda alpha_p_max")?;
    for r in &report.records {
        writeln!(w, "{} {} {} {} {}", r.step, r.l_p, r.l_a, r.lambda, r.alpha_p_max)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::taskgen::TaskKind;

    #[test]
    fn mse_and_accuracy_oracles() {
        let pred = Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap();
        let y = Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 6.0]]).unwrap();
        let m = metrics_from(&pred, &TaskLabels::Regression(y)).unwrap();
        assert_eq!(m.mse, Some(1.0)); // (0+0+0+4)/4
        assert_eq!(m.rmse, Some(1.0));

        let logits = Tensor::from_rows(&[vec![0.1, 0.9], vec![0.8, 0.2], vec![0.3, 0.7]]).unwrap();
        let m = metrics_from(
            &logits,
            &TaskLabels::Classification { labels: vec![1, 0, 0], classes: 2 },
        )
        .unwrap();
        assert!((m.accuracy.unwrap() - 2.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn paired_t_matches_hand_computation() {
        // d = a - b = [-1, -2, -3]; mean -2, sd 1, t = -2 / (1/sqrt(3))
        let a = [1.0, 2.0, 3.0];
        let b = [2.0, 4.0, 6.0];
        let (t, p) = paired_t_less(&a, &b).unwrap();
        assert!((t - (-2.0 * 3.0_f64.sqrt())).abs() < 1e-12, "t = {t}");
        // t = -3.464 with 2 dof -> p ~ 0.0371
        assert!((p - 0.0371).abs() < 5e-3, "p = {p}");
        let (_, p_rev) = paired_t_less(&b, &a).unwrap();
        assert!(p_rev > 0.9);
    }

    #[test]
    fn eval_rejects_supernets() {
        let head = HeadKind::Regression { dim: 1 };
        let spec = BranchSpec::uniform(2, 6, head);
        let mut rng = rng::stream(1, "init");
        let mut net = AuxNetwork::build(
            4,
            spec.clone(),
            vec![spec],
            NetMode::AuxNas,
            &BuildOptions::default(),
            &mut rng,
        )
        .unwrap();
        let fam = taskgen::TaskFamily::new(
            FamilyConfig {
                input_dim: 4,
                relatedness: 0.5,
                tasks: vec![TaskKind::Regression { dim: 1 }; 2],
                noise_std: vec![0.1; 2],
                label_flip: 0.0, shared_heads: false,
            },
            3,
        )
        .unwrap();
        let data = taskgen::generate(&fam, 40, 1).unwrap();
        assert!(eval_primary(&mut net, &data, Split::Test).is_err());
    }

    #[test]
    fn aux_head_baseline_trains() {
        let fam = taskgen::TaskFamily::new(
            FamilyConfig {
                input_dim: 6,
                relatedness: 0.9,
                tasks: vec![TaskKind::Regression { dim: 1 }; 2],
                noise_std: vec![0.05; 2],
                label_flip: 0.0, shared_heads: false,
            },
            9,
        )
        .unwrap();
        let data = taskgen::generate(&fam, 300, 2).unwrap();
        let trunk = BranchSpec::uniform(2, 8, HeadKind::Regression { dim: 1 });
        let heads = vec![HeadKind::Regression { dim: 1 }; 2];
        let cfg = TrainConfig { epochs: 12, batch_size: 16, seed: 2, ..Default::default() };
        let m = aux_head_baseline(6, trunk, heads, &data, &cfg, 2).unwrap();
        assert!(m.mse.unwrap().is_finite());
    }

    #[test]
    fn protocol_runs_small_grid() {
        let cfg = ProtocolConfig {
            family: FamilyConfig {
                input_dim: 6,
                relatedness: 0.9,
                tasks: vec![TaskKind::Regression { dim: 1 }; 2],
                noise_std: vec![0.05; 2],
                label_flip: 0.0, shared_heads: false,
            },
            family_seed: 13,
            n_samples: 200,
            seeds: vec![1, 2],
            methods: vec![Method::Single, Method::AuxNas],
            shape: NetShape { n_layers: 2, width: 8, window: 3, stage: 2 },
            train: TrainConfig { epochs: 3, batch_size: 8, ..Default::default() },
        };
        let table = run_protocol(&cfg).unwrap();
        assert_eq!(table.cells.len(), 4);
        assert_eq!(table.scores(Method::Single).len(), 2);
        assert_eq!(table.paired_diffs(Method::AuxNas).len(), 2);
    }

    #[test]
    fn scaling_fit_is_near_affine() {
        let shape = NetShape { n_layers: 2, width: 8, window: 3, stage: 2 };
        let train = TrainConfig { epochs: 1, batch_size: 8, ..Default::default() };
        let fit = scaling_study(&[1, 2], &shape, 6, &train, 120, 5).unwrap();
        assert_eq!(fit.points.len(), 2);
        assert!(fit.r2 > 0.9, "r2 = {}", fit.r2);
    }
}
