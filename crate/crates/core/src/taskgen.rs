//! Synthetic primary/auxiliary task families with a controllable
//! relatedness knob, plus tabular CSV ingestion and deterministic batch
//! iteration.
//!
//! A family's teacher is a frozen pair of trunks per task: one shared
//! across tasks, one private. Labels derive from
//! sqrt(rho) * shared(x) + sqrt(1-rho) * private_t(x), so rho = 1 makes
//! every task a view of the same trunk and rho = 0 makes them independent.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::Tensor;

pub const TRUNK_WIDTH: usize = 32;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    Regression { dim: usize },
    Classification { classes: usize },
}

impl TaskKind {
    pub fn out_dim(&self) -> usize {
        match *self {
            TaskKind::Regression { dim } => dim,
            TaskKind::Classification { classes } => classes,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FamilyConfig {
    pub input_dim: usize,
    /// rho in [0, 1]: 1 = fully shared trunk, 0 = fully private trunks.
    pub relatedness: f64,
    pub tasks: Vec<TaskKind>,
    /// Gaussian label noise per task (regression only).
    pub noise_std: Vec<f64>,
    /// Fraction of classification labels flipped uniformly.
    #[serde(default)]
    pub label_flip: f64,
    /// Give every task the readout head of task 0 (all tasks must agree on
    /// output dimension). With independent random heads, labels of related
    /// tasks read out near-orthogonal directions of the shared features;
    /// sharing the head makes `relatedness` directly visible in the labels.
    #[serde(default)]
    pub shared_heads: bool,
}

/// A frozen 2-layer tanh teacher trunk. tanh avoids dead-ReLU label
/// degeneracies in the teacher.
#[derive(Debug, Clone)]
pub struct Trunk {
    pub w1: Tensor,
    pub b1: Tensor,
    pub w2: Tensor,
    pub b2: Tensor,
}

impl Trunk {
    fn sample(input_dim: usize, rng: &mut ChaCha8Rng) -> Self {
        let g = |fan_in: usize, shape: Vec<usize>, rng: &mut ChaCha8Rng| {
            let std = 1.0 / (fan_in as f64).sqrt();
            let numel: usize = shape.iter().product();
            let mut data = Vec::with_capacity(numel);
            for _ in 0..numel {
                let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
                let u2: f64 = rng.gen();
                data.push(std * (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos());
            }
            Tensor::new(shape, data).unwrap()
        };
        Trunk {
            w1: g(input_dim, vec![input_dim, TRUNK_WIDTH], rng),
            b1: Tensor::zeros(vec![TRUNK_WIDTH]),
            w2: g(TRUNK_WIDTH, vec![TRUNK_WIDTH, TRUNK_WIDTH], rng),
            b2: Tensor::zeros(vec![TRUNK_WIDTH]),
        }
    }

    /// [n x d] -> [n x TRUNK_WIDTH]
    pub fn apply(&self, x: &Tensor) -> Tensor {
        let h = matmul_bias_tanh(x, &self.w1, &self.b1);
        matmul_bias_tanh(&h, &self.w2, &self.b2)
    }
}

fn matmul_bias_tanh(x: &Tensor, w: &Tensor, b: &Tensor) -> Tensor {
    let (n, din) = (x.rows(), x.cols());
    let dout = w.cols();
    let mut out = vec![0.0; n * dout];
    for r in 0..n {
        for i in 0..din {
            let xv = x.data()[r * din + i];
            for o in 0..dout {
                out[r * dout + o] += xv * w.data()[i * dout + o];
            }
        }
        for o in 0..dout {
            out[r * dout + o] = (out[r * dout + o] + b.data()[o]).tanh();
        }
    }
    Tensor::new(vec![n, dout], out).unwrap()
}

fn matmul_bias(x: &Tensor, w: &Tensor, b: &Tensor) -> Tensor {
    let (n, din) = (x.rows(), x.cols());
    let dout = w.cols();
    let mut out = vec![0.0; n * dout];
    for r in 0..n {
        for i in 0..din {
            let xv = x.data()[r * din + i];
            for o in 0..dout {
                out[r * dout + o] += xv * w.data()[i * dout + o];
            }
        }
        for o in 0..dout {
            out[r * dout + o] += b.data()[o];
        }
    }
    Tensor::new(vec![n, dout], out).unwrap()
}

#[derive(Debug, Clone)]
pub struct TaskFamily {
    pub config: FamilyConfig,
    pub shared: Trunk,
    pub privates: Vec<Trunk>,
    /// One (w, b) head per task, applied to the mixed trunk feature.
    pub heads: Vec<(Tensor, Tensor)>,
}

impl TaskFamily {
    pub fn new(config: FamilyConfig, seed: u64) -> Result<Self> {
        if config.input_dim == 0 {
            return Err(Error::config("task family: input_dim must be >= 1"));
        }
        if config.tasks.is_empty() {
            return Err(Error::config("task family: need at least one task"));
        }
        if config.tasks.len() != config.noise_std.len() {
            return Err(Error::config("task family: noise_std must match task count"));
        }
        if !(0.0..=1.0).contains(&config.relatedness) {
            return Err(Error::config("task family: relatedness must be in [0, 1]"));
        }
        let mut r = rng::stream(seed, "teacher");
        let shared = Trunk::sample(config.input_dim, &mut r);
        let privates = config
            .tasks
            .iter()
            .map(|_| Trunk::sample(config.input_dim, &mut r))
            .collect();
        let heads = config
            .tasks
            .iter()
            .map(|t| {
                let dout = t.out_dim();
                let std = 1.0 / (TRUNK_WIDTH as f64).sqrt();
                let mut data = Vec::with_capacity(TRUNK_WIDTH * dout);
                for _ in 0..TRUNK_WIDTH * dout {
                    let u1: f64 = r.gen_range(f64::EPSILON..1.0);
                    let u2: f64 = r.gen();
                    data.push(std * (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos());
                }
                (
                    Tensor::new(vec![TRUNK_WIDTH, dout], data).unwrap(),
                    Tensor::zeros(vec![dout]),
                )
            })
            .collect();
        let mut heads: Vec<(Tensor, Tensor)> = heads;
        if config.shared_heads {
            if config.tasks.iter().any(|t| t.out_dim() != config.tasks[0].out_dim()) {
                return Err(Error::config(
                    "task family: shared_heads needs equal output dimensions",
                ));
            }
            let first = heads[0].clone();
            for h in heads.iter_mut().skip(1) {
                *h = first.clone();
            }
        }
        Ok(TaskFamily { config, shared, privates, heads })
    }

    /// Noiseless teacher output for task t.
    pub fn teacher_logits(&self, t: usize, x: &Tensor) -> Tensor {
        let rho = self.config.relatedness;
        let s = self.shared.apply(x);
        let p = self.privates[t].apply(x);
        let (ws, wp) = (rho.sqrt(), (1.0 - rho).sqrt());
        let mixed: Vec<f64> = s
            .data()
            .iter()
            .zip(p.data())
            .map(|(a, b)| ws * a + wp * b)
            .collect();
        let mixed = Tensor::new(vec![x.rows(), TRUNK_WIDTH], mixed).unwrap();
        matmul_bias(&mixed, &self.heads[t].0, &self.heads[t].1)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum TaskLabels {
    Regression(Tensor),
    Classification { labels: Vec<usize>, classes: usize },
}

impl TaskLabels {
    pub fn gather(&self, idx: &[usize]) -> TaskLabels {
        match self {
            TaskLabels::Regression(t) => TaskLabels::Regression(t.gather_rows(idx)),
            TaskLabels::Classification { labels, classes } => TaskLabels::Classification {
                labels: idx.iter().map(|&i| labels[i]).collect(),
                classes: *classes,
            },
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
    Test,
}

/// Immutable after construction; rows are stored train-first, then val,
/// then test, so splits are contiguous ranges and CSV round-trips preserve
/// them.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub inputs: Tensor,
    pub labels: Vec<TaskLabels>,
    pub n_train: usize,
    pub n_val: usize,
    pub seed: u64,
}

/// Sidecar manifest describing a generated dataset.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct DatasetManifest {
    pub seed: u64,
    pub relatedness: f64,
    pub input_dim: usize,
    pub n_samples: usize,
    pub split_sizes: (usize, usize, usize),
}

fn split_sizes(n: usize) -> (usize, usize, usize) {
    let train = n * 70 / 100;
    let val = n * 15 / 100;
    (train, val, n - train - val)
}

impl Dataset {
    pub fn n(&self) -> usize {
        self.inputs.rows()
    }

    pub fn split_indices(&self, s: Split) -> Vec<usize> {
        let (a, b) = match s {
            Split::Train => (0, self.n_train),
            Split::Val => (self.n_train, self.n_train + self.n_val),
            Split::Test => (self.n_train + self.n_val, self.n()),
        };
        (a..b).collect()
    }

    pub fn batch(&self, idx: &[usize]) -> (Tensor, Vec<TaskLabels>) {
        (
            self.inputs.gather_rows(idx),
            self.labels.iter().map(|l| l.gather(idx)).collect(),
        )
    }

    /// One epoch of batches over a split in seeded-permutation order.
    /// With `disjoint_pairs` every step yields a (batch_w, batch_alpha)
    /// pair with empty intersection; across the epoch the pairs never
    /// reuse an index.
    pub fn iterate(
        &self,
        split: Split,
        batch_size: usize,
        seed: u64,
        disjoint_pairs: bool,
    ) -> Result<Vec<BatchPair>> {
        let mut idx = self.split_indices(split);
        if batch_size == 0 {
            return Err(Error::contract("iterate: batch_size must be >= 1"));
        }
        if disjoint_pairs && batch_size * 2 > idx.len() {
            return Err(Error::contract(format!(
                "iterate: disjoint pairs need batch_size <= split/2, got {} for split of {}",
                batch_size,
                idx.len()
            )));
        }
        // Fisher-Yates with the batching substream
        let mut r = rng::stream(seed, "batching");
        for i in (1..idx.len()).rev() {
            let j = r.gen_range(0..=i);
            idx.swap(i, j);
        }
        let mut out = Vec::new();
        if disjoint_pairs {
            for chunk in idx.chunks_exact(2 * batch_size) {
                out.push(BatchPair {
                    w: chunk[..batch_size].to_vec(),
                    alpha: Some(chunk[batch_size..].to_vec()),
                });
            }
        } else {
            for chunk in idx.chunks_exact(batch_size) {
                out.push(BatchPair { w: chunk.to_vec(), alpha: None });
            }
        }
        Ok(out)
    }

    pub fn manifest(&self, relatedness: f64) -> DatasetManifest {
        DatasetManifest {
            seed: self.seed,
            relatedness,
            input_dim: self.inputs.cols(),
            n_samples: self.n(),
            split_sizes: (self.n_train, self.n_val, self.n() - self.n_train - self.n_val),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BatchPair {
    pub w: Vec<usize>,
    pub alpha: Option<Vec<usize>>,
}

/// Draw a dataset from the family: standard-normal inputs, teacher labels
/// plus Gaussian noise (regression) or argmax logits with optional flips
/// (classification), split 70/15/15.
pub fn generate(family: &TaskFamily, n_samples: usize, seed: u64) -> Result<Dataset> {
    if n_samples < 30 {
        return Err(Error::contract("generate: n_samples must be >= 30"));
    }
    let d = family.config.input_dim;
    let mut r = rng::stream(seed, "data");
    let mut data = Vec::with_capacity(n_samples * d);
    for _ in 0..n_samples * d {
        let u1: f64 = r.gen_range(f64::EPSILON..1.0);
        let u2: f64 = r.gen();
        data.push((-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos());
    }
    let inputs = Tensor::new(vec![n_samples, d], data)?;

    let mut noise_rng = rng::stream(seed, "noise");
    let mut flip_rng = rng::stream(seed, "flip");
    let mut labels = Vec::new();
    for (t, kind) in family.config.tasks.iter().enumerate() {
        let logits = family.teacher_logits(t, &inputs);
        match *kind {
            TaskKind::Regression { dim } => {
                let std = family.config.noise_std[t];
                let mut y = logits.data().to_vec();
                for v in &mut y {
                    let u1: f64 = noise_rng.gen_range(f64::EPSILON..1.0);
                    let u2: f64 = noise_rng.gen();
                    *v += std * (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos();
                }
                labels.push(TaskLabels::Regression(Tensor::new(vec![n_samples, dim], y)?));
            }
            TaskKind::Classification { classes } => {
                let mut y = Vec::with_capacity(n_samples);
                for rix in 0..n_samples {
                    let row = &logits.data()[rix * classes..(rix + 1) * classes];
                    let mut best = 0;
                    for j in 1..classes {
                        if row[j] > row[best] {
                            best = j;
                        }
                    }
                    if family.config.label_flip > 0.0
                        && flip_rng.gen::<f64>() < family.config.label_flip
                    {
                        best = flip_rng.gen_range(0..classes);
                    }
                    y.push(best);
                }
                labels.push(TaskLabels::Classification { labels: y, classes });
            }
        }
    }
    let (n_train, n_val, _) = split_sizes(n_samples);
    Ok(Dataset { inputs, labels, n_train, n_val, seed })
}

// --- CSV in/out (UTF-8, header row, '.' decimal, ',' separator) ---

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct CsvTask {
    pub kind: TaskKind,
    pub cols: Vec<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct CsvSchema {
    pub input_cols: Vec<String>,
    pub tasks: Vec<CsvTask>,
}

impl Dataset {
    /// Column naming used by `write_csv`; `load_csv` with this schema
    /// round-trips the dataset bit-exactly.
    pub fn default_schema(&self) -> CsvSchema {
        let d = self.inputs.cols();
        CsvSchema {
            input_cols: (0..d).map(|i| format!("x{i}")).collect(),
            tasks: self
                .labels
                .iter()
                .enumerate()
                .map(|(t, l)| match l {
                    TaskLabels::Regression(y) => CsvTask {
                        kind: TaskKind::Regression { dim: y.cols() },
                        cols: (0..y.cols()).map(|j| format!("t{t}_y{j}")).collect(),
                    },
                    TaskLabels::Classification { classes, .. } => CsvTask {
                        kind: TaskKind::Classification { classes: *classes },
                        cols: vec![format!("t{t}_label")],
                    },
                })
                .collect(),
        }
    }
}

pub fn write_csv(dataset: &Dataset, mut w: impl Write) -> Result<()> {
    let schema = dataset.default_schema();
    let mut header: Vec<String> = schema.input_cols.clone();
    for t in &schema.tasks {
        header.extend(t.cols.iter().cloned());
    }
    writeln!(w, "{}", header.join(","))?;
    let d = dataset.inputs.cols();
    for r in 0..dataset.n() {
        let mut fields: Vec<String> = (0..d).map(|c| format!("{}", dataset.inputs.at(r, c))).collect();
        for l in &dataset.labels {
            match l {
                TaskLabels::Regression(y) => {
                    for c in 0..y.cols() {
                        fields.push(format!("{}", y.at(r, c)));
                    }
                }
                TaskLabels::Classification { labels, .. } => fields.push(format!("{}", labels[r])),
            }
        }
        writeln!(w, "{}", fields.join(","))?;
    }
    Ok(())
}

pub fn load_csv(path: &Path, schema: &CsvSchema) -> Result<Dataset> {
    let file = std::fs::File::open(path)?;
    let mut lines = BufReader::new(file).lines();
    let header = lines
        .next()
        .ok_or_else(|| Error::Parse("empty CSV file".into()))??;
    let cols: Vec<&str> = header.split(',').collect();
    let col_index = |name: &str| -> Result<usize> {
        cols.iter()
            .position(|c| *c == name)
            .ok_or_else(|| Error::config(format!("CSV schema error: missing column {name:?}")))
    };
    let input_ix: Vec<usize> = schema
        .input_cols
        .iter()
        .map(|n| col_index(n))
        .collect::<Result<_>>()?;
    let task_ix: Vec<Vec<usize>> = schema
        .tasks
        .iter()
        .map(|t| t.cols.iter().map(|n| col_index(n)).collect::<Result<_>>())
        .collect::<Result<_>>()?;

    let mut rows: Vec<Vec<f64>> = Vec::new();
    for (lineno, line) in lines.enumerate() {
        let line = line?;
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != cols.len() {
            return Err(Error::Parse(format!(
                "line {}: expected {} fields, found {}",
                lineno + 2,
                cols.len(),
                fields.len()
            )));
        }
        let parsed: Vec<f64> = fields
            .iter()
            .map(|f| {
                f.parse::<f64>().map_err(|e| {
                    Error::Parse(format!("line {}: bad numeric field {f:?}: {e}", lineno + 2))
                })
            })
            .collect::<Result<_>>()?;
        rows.push(parsed);
    }
    let n = rows.len();
    if n == 0 {
        return Err(Error::Parse("CSV has no data rows".into()));
    }

    let d = input_ix.len();
    let mut data = Vec::with_capacity(n * d);
    for row in &rows {
        for &ix in &input_ix {
            data.push(row[ix]);
        }
    }
    let inputs = Tensor::new(vec![n, d], data)?;

    let mut labels = Vec::new();
    for (t, task) in schema.tasks.iter().enumerate() {
        match task.kind {
            TaskKind::Regression { dim } => {
                if task_ix[t].len() != dim {
                    return Err(Error::config(format!(
                        "CSV schema error: task {t} expects {dim} columns, schema lists {}",
                        task_ix[t].len()
                    )));
                }
                let mut y = Vec::with_capacity(n * dim);
                for row in &rows {
                    for &ix in &task_ix[t] {
                        y.push(row[ix]);
                    }
                }
                labels.push(TaskLabels::Regression(Tensor::new(vec![n, dim], y)?));
            }
            TaskKind::Classification { classes } => {
                let ix = task_ix[t][0];
                let mut y = Vec::with_capacity(n);
                for (rix, row) in rows.iter().enumerate() {
                    let v = row[ix];
                    if v.fract() != 0.0 || v < 0.0 || v as usize >= classes {
                        return Err(Error::Parse(format!(
                            "line {}: label {v} out of range for {classes} classes",
                            rix + 2
                        )));
                    }
                    y.push(v as usize);
                }
                labels.push(TaskLabels::Classification { labels: y, classes });
            }
        }
    }
    let (n_train, n_val, _) = split_sizes(n);
    Ok(Dataset { inputs, labels, n_train, n_val, seed: 0 })
}

/// Sample Pearson correlation.
pub fn pearson(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let mut cov = 0.0;
    let mut va = 0.0;
    let mut vb = 0.0;
    for (x, y) in a.iter().zip(b) {
        cov += (x - ma) * (y - mb);
        va += (x - ma) * (x - ma);
        vb += (y - mb) * (y - mb);
    }
    cov / (va.sqrt() * vb.sqrt())
}
