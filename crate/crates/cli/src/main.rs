//! `auxnas` command-line front end.
//!
//! Exit codes: 0 success, 2 configuration / schema error, 3 training
//! divergence, 4 internal invariant violation.

mod config;

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use serde::Serialize;

use auxnas::archnet::{
    flops, serialize, ActivKind, AuxNetwork, BranchSpec, BuildOptions, Granularity, HeadKind,
    NetMode,
};
use auxnas::error::{Error, Result};
use auxnas::evalbench::{
    self, AuxHeadNet, Method, Metrics, NetShape, ProtocolConfig, ResultTable,
};
use auxnas::gradcheck;
use auxnas::taskgen::{self, Dataset, Split, TaskLabels};
use auxnas::tensor::Tensor;
use auxnas::trainer::{self, TrainReport};
use auxnas::{rng, Tape};

use config::{DataSection, ExperimentConfig, Mode};

#[derive(Parser)]
#[command(name = "auxnas", version, about = "Asymmetric primary-auxiliary network training")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train a network from a JSON config; writes model, report, and step CSV.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Override a config field: --set train.optim.lr_w=0.05
        #[arg(long = "set", value_name = "PATH=VALUE")]
        set: Vec<String>,
    },
    /// Hard-zero alpha^P and strip the auxiliary branches from a model file.
    Prune {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Primary-task metrics of a model on one dataset split.
    Eval {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value = "test")]
        split: String,
        #[arg(long = "set", value_name = "PATH=VALUE")]
        set: Vec<String>,
    },
    /// Inference-cost report: symbolic from N,M,K or measured from a model.
    Flops {
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long, allow_hyphen_values = true)]
        n: Option<f64>,
        #[arg(long, allow_hyphen_values = true)]
        m: Option<f64>,
        #[arg(long)]
        k: Option<usize>,
    },
    /// Finite-difference check of every primitive and a full supernet.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 20)]
        rounds: usize,
        #[arg(long, default_value_t = 1e-5)]
        eps: f64,
    },
    /// Paired multi-seed method comparison; writes a result table.
    Protocol {
        #[arg(long)]
        config: PathBuf,
        /// Parallel per-seed jobs.
        #[arg(long, default_value_t = 1)]
        jobs: usize,
        #[arg(long = "set", value_name = "PATH=VALUE")]
        set: Vec<String>,
    },
}

fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_) | Error::Parse(_) | Error::Io(_) | Error::Json(_) => 2,
        Error::Diverged { .. } => 3,
        _ => 4,
    }
}

fn main() {
    let cli = Cli::parse();
    if let Err(e) = run(cli.cmd) {
        eprintln!("error: {e}");
        std::process::exit(exit_code(&e));
    }
}

fn run(cmd: Cmd) -> Result<()> {
    match cmd {
        Cmd::Train { config, set } => cmd_train(&config::load(&config, &set)?),
        Cmd::Prune { model, out } => cmd_prune(&model, &out),
        Cmd::Eval { model, config, split, set } => {
            cmd_eval(&model, &config::load(&config, &set)?, &split)
        }
        Cmd::Flops { model, n, m, k } => cmd_flops(model.as_deref(), n, m, k),
        Cmd::Gradcheck { seed, rounds, eps } => cmd_gradcheck(seed, rounds, eps),
        Cmd::Protocol { config, jobs, set } => cmd_protocol(&config::load(&config, &set)?, jobs),
    }
}

// --- data plumbing ---

fn load_dataset(cfg: &ExperimentConfig) -> Result<Dataset> {
    match &cfg.data {
        DataSection::Synthetic(s) => {
            let family = taskgen::TaskFamily::new(s.family.clone(), s.family_seed)?;
            taskgen::generate(&family, s.n_samples, cfg.seed)
        }
        DataSection::Csv(c) => taskgen::load_csv(&c.path, &c.schema),
    }
}

fn heads_of(data: &Dataset) -> Vec<HeadKind> {
    data.labels
        .iter()
        .map(|l| match l {
            TaskLabels::Regression(y) => HeadKind::Regression { dim: y.cols() },
            TaskLabels::Classification { classes, .. } => {
                HeadKind::Classification { classes: *classes }
            }
        })
        .collect()
}

fn parse_split(s: &str) -> Result<Split> {
    match s {
        "train" => Ok(Split::Train),
        "val" => Ok(Split::Val),
        "test" => Ok(Split::Test),
        other => Err(Error::config(format!(
            "unknown split {other:?} (expected train | val | test)"
        ))),
    }
}

fn input_dim(data: &Dataset) -> usize {
    data.inputs.cols()
}

fn write_file(path: &Path, contents: &str) -> Result<()> {
    let mut f = fs::File::create(path)?;
    f.write_all(contents.as_bytes())?;
    Ok(())
}

// --- train ---

fn write_artifacts(dir: &Path, model_json: &str, report: &TrainReport) -> Result<()> {
    fs::create_dir_all(dir)?;
    write_file(&dir.join("model.json"), model_json)?;
    write_file(&dir.join("report.json"), &serde_json::to_string_pretty(report)?)?;
    let f = fs::File::create(dir.join("steps.csv"))?;
    trainer::write_step_csv(&report.records, f)?;
    Ok(())
}

fn cmd_train(cfg: &ExperimentConfig) -> Result<()> {
    let data = load_dataset(cfg)?;
    let heads = heads_of(&data);
    let tcfg = cfg.train_config(cfg.seed);
    let dim = input_dim(&data);
    let primary = BranchSpec::uniform(cfg.net.n_layers, cfg.net.width, heads[0]);
    let aux_specs: Vec<BranchSpec> = heads[1..]
        .iter()
        .map(|h| BranchSpec::uniform(cfg.net.n_layers, cfg.net.width, *h))
        .collect();
    let mut rng = rng::stream(cfg.seed, "init");

    let (model_json, report) = match cfg.mode {
        Mode::AuxHead => {
            let mut net = AuxHeadNet::build(dim, primary, heads.clone(), &mut rng)?;
            let report = evalbench::train_aux_head(&mut net, &data, &tcfg)?;
            (evalbench::aux_head_to_json(&net)?, report)
        }
        Mode::Single => {
            let mut net = AuxNetwork::build_single(dim, primary, ActivKind::Relu, &mut rng)?;
            let report = trainer::train_joint(&mut net, &data, &tcfg)?;
            (serialize::to_json(&net)?, report)
        }
        Mode::Symmetric | Mode::AuxGStage | Mode::AuxGLayer | Mode::AuxNas => {
            let (mode, granularity) = match cfg.mode {
                Mode::Symmetric => (NetMode::Symmetric, Granularity::Layer),
                Mode::AuxGStage => (NetMode::AuxG, Granularity::Stage(cfg.net.stage)),
                Mode::AuxGLayer => (NetMode::AuxG, Granularity::Layer),
                _ => (NetMode::AuxNas, Granularity::Layer),
            };
            let opts = BuildOptions {
                window: cfg.net.window,
                granularity,
                ..Default::default()
            };
            let mut net = AuxNetwork::build(dim, primary, aux_specs, mode, &opts, &mut rng)?;
            let report = match mode {
                NetMode::AuxNas => trainer::train_aux_nas(&mut net, &data, &tcfg)?,
                _ => trainer::train_joint(&mut net, &data, &tcfg)?,
            };
            (serialize::to_json(&net)?, report)
        }
    };

    write_artifacts(&cfg.output_dir, &model_json, &report)?;
    println!(
        "trained mode={} seed={} steps={} -> {}",
        cfg.mode.name(),
        cfg.seed,
        report.records.len(),
        cfg.output_dir.display()
    );
    if let Some(l) = report.final_loss_p() {
        println!("final primary loss: {l:.6}");
    }
    Ok(())
}

// --- prune / eval ---

fn snapshot_format(path: &Path) -> Result<String> {
    let text = fs::read_to_string(path)?;
    let v: serde_json::Value = serde_json::from_str(&text)
        .map_err(|e| Error::Parse(format!("model {path:?}: {e}")))?;
    v.get("format")
        .and_then(|f| f.as_str())
        .map(str::to_string)
        .ok_or_else(|| Error::Parse(format!("model {path:?}: missing format tag")))
}

fn cmd_prune(model: &Path, out: &Path) -> Result<()> {
    if snapshot_format(model)? != serialize::FORMAT_TAG {
        return Err(Error::config(format!(
            "prune expects an {:?} snapshot",
            serialize::FORMAT_TAG
        )));
    }
    let net = serialize::from_json(&fs::read_to_string(model)?)?;
    let pruned = net.prune()?;
    if let Some(dir) = out.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir)?;
        }
    }
    write_file(out, &serialize::to_json(&pruned)?)?;
    println!(
        "pruned {} -> {} ({} branches removed, {} parameters kept)",
        model.display(),
        out.display(),
        net.aux_count(),
        pruned.params.len()
    );
    Ok(())
}

#[derive(Serialize)]
struct EvalOutput<'a> {
    model: String,
    split: &'a str,
    /// True when a supernet was pruned in memory before evaluation;
    /// metrics always describe single-task inference.
    pruned_for_eval: bool,
    metrics: Metrics,
}

fn cmd_eval(model: &Path, cfg: &ExperimentConfig, split: &str) -> Result<()> {
    let sp = parse_split(split)?;
    let data = load_dataset(cfg)?;
    let format = snapshot_format(model)?;
    let (metrics, pruned_for_eval) = if format == evalbench::AUX_HEAD_FORMAT_TAG {
        let net = evalbench::aux_head_from_json(&fs::read_to_string(model)?)?;
        (evalbench::eval_aux_head(&net, &data, sp)?, false)
    } else {
        let mut net = serialize::from_json(&fs::read_to_string(model)?)?;
        match net.mode {
            NetMode::Single | NetMode::Pruned => (evalbench::eval_primary(&mut net, &data, sp)?, false),
            NetMode::Symmetric => {
                return Err(Error::config(
                    "symmetric models have no prunable primary path; nothing to evaluate at single-task cost",
                ));
            }
            NetMode::AuxG | NetMode::AuxNas => {
                let mut pruned = net.prune()?;
                (evalbench::eval_primary(&mut pruned, &data, sp)?, true)
            }
        }
    };
    let out = EvalOutput {
        model: model.display().to_string(),
        split,
        pruned_for_eval,
        metrics,
    };
    let json = serde_json::to_string_pretty(&out)?;
    fs::create_dir_all(&cfg.output_dir)?;
    write_file(&cfg.output_dir.join("metrics.json"), &json)?;
    println!("{json}");
    Ok(())
}

// --- flops ---

#[derive(Serialize)]
struct FlopsRow {
    method: &'static str,
    flops: f64,
    exact: bool,
}

fn cmd_flops(model: Option<&Path>, n: Option<f64>, m: Option<f64>, k: Option<usize>) -> Result<()> {
    if let Some(path) = model {
        if snapshot_format(path)? != serialize::FORMAT_TAG {
            return Err(Error::config("flops --model expects a network snapshot"));
        }
        let mut net = serialize::from_json(&fs::read_to_string(path)?)?;
        let x = Tensor::zeros(vec![1, net.input_dim]);
        let cost = flops::measured_inference(&mut net, &x)?;
        println!("{}", serde_json::to_string_pretty(&cost)?);
        return Ok(());
    }
    let (n, m) = match (n, m) {
        (Some(n), Some(m)) => (n, m),
        _ => {
            return Err(Error::config(
                "flops needs either --model or all of --n, --m, --k",
            ));
        }
    };
    let k = k.ok_or_else(|| Error::config("flops needs --k with --n/--m"))?;
    let model = flops::FlopsModel { n, m, k };
    let rows: Vec<FlopsRow> = flops::CostMethod::ALL
        .iter()
        .map(|&method| {
            flops::symbolic(model, method).map(|est| FlopsRow {
                method: method.name(),
                flops: est.bound(),
                exact: matches!(est, flops::CostEstimate::Exact(_)),
            })
        })
        .collect::<Result<_>>()?;
    println!("{}", serde_json::to_string_pretty(&rows)?);
    Ok(())
}

// --- gradcheck ---

fn gradcheck_primitives(seed: u64, eps: f64) -> Result<f64> {
    use rand::Rng;
    let mut r = rng::stream(seed, "gradcheck");
    let mut t = |shape: Vec<usize>| {
        let numel = shape.iter().product();
        let data: Vec<f64> = (0..numel).map(|_| r.gen_range(-1.0..1.0)).collect();
        Tensor::new(shape, data).unwrap()
    };
    let target = t(vec![3, 2]);
    let unit_target = {
        let mut u = t(vec![2, 4]);
        for row in 0..2 {
            let s: f64 = (0..4).map(|c| u.at(row, c).powi(2)).sum::<f64>().sqrt();
            for c in 0..4 {
                u.data_mut()[row * 4 + c] /= s.max(1e-9);
            }
        }
        u
    };
    let labels = vec![1usize, 0, 2];

    let mut worst = 0.0f64;
    let mut check = |name: &str,
                     f: gradcheck::Closure,
                     inputs: Vec<Tensor>|
     -> Result<()> {
        // central differences are unreliable within eps of a ReLU/L1 kink
        if gradcheck::kink_distance(f, &inputs)? < 10.0 * eps {
            return Ok(());
        }
        let err = gradcheck::grad_check(f, &inputs, eps)?;
        if err > worst {
            worst = err;
        }
        let _ = name;
        Ok(())
    };

    check(
        "mse",
        &|tape, ids| tape.mse(ids[0], &Tensor::zeros(vec![3, 2])),
        vec![t(vec![3, 2])],
    )?;
    check(
        "linear",
        &|tape, ids| {
            let y = tape.linear(ids[0], ids[1], Some(ids[2]))?;
            tape.mse(y, &Tensor::zeros(vec![3, 2]))
        },
        vec![t(vec![3, 4]), t(vec![4, 2]), t(vec![2])],
    )?;
    check(
        "relu",
        &|tape, ids| {
            let y = tape.relu(ids[0])?;
            tape.mse(y, &Tensor::zeros(vec![3, 4]))
        },
        vec![t(vec![3, 4])],
    )?;
    let target2 = target.clone();
    check(
        "scale_concat_add",
        &move |tape, ids| {
            let s = tape.scale(ids[0], ids[1])?;
            let c = tape.concat(&[s, ids[2]])?;
            let y = tape.linear(c, ids[3], None)?;
            let y = tape.add(y, ids[4])?;
            tape.mse(y, &target2)
        },
        vec![t(vec![3, 2]), Tensor::scalar(0.7), t(vec![3, 2]), t(vec![4, 2]), t(vec![3, 2])],
    )?;
    check(
        "batchnorm",
        &|tape, ids| {
            let mut bn = auxnas::BnState::new(4);
            let y = tape.batchnorm(ids[0], ids[1], ids[2], true, &mut bn)?;
            tape.mse(y, &Tensor::zeros(vec![5, 4]))
        },
        vec![t(vec![5, 4]), t(vec![4]), t(vec![4])],
    )?;
    let labels2 = labels.clone();
    check(
        "softmax_xent",
        &move |tape, ids| tape.softmax_xent(ids[0], &labels2),
        vec![t(vec![3, 4])],
    )?;
    let unit2 = unit_target.clone();
    check(
        "cosine",
        &move |tape, ids| tape.cosine_loss(ids[0], &unit2),
        vec![t(vec![2, 4])],
    )?;
    check(
        "l1",
        &|tape, ids| {
            let n = tape.l1_norm(&[ids[0], ids[1]])?;
            tape.mul_const(n, 3.0)
        },
        vec![Tensor::scalar(0.4), Tensor::scalar(-0.3)],
    )?;
    Ok(worst)
}

fn gradcheck_network(seed: u64, eps: f64) -> Result<f64> {
    use rand::Rng;
    let family = taskgen::FamilyConfig {
        input_dim: 6,
        relatedness: 0.8,
        tasks: vec![
            taskgen::TaskKind::Regression { dim: 2 },
            taskgen::TaskKind::Classification { classes: 3 },
        ],
        noise_std: vec![0.05, 0.0],
        label_flip: 0.0, shared_heads: false,
    };
    let fam = taskgen::TaskFamily::new(family, 17)?;
    let primary = BranchSpec::uniform(4, 8, HeadKind::Regression { dim: 2 });
    let aux = BranchSpec::uniform(4, 8, HeadKind::Classification { classes: 3 });
    let opts = BuildOptions::default();

    // a fresh instance per attempt until the evaluation sits clear of kinks
    for attempt in 0..32u64 {
        let s = seed ^ attempt.wrapping_mul(0x9E37_79B9_7F4A_7C15);
        let data = taskgen::generate(&fam, 60, s)?;
        let mut init = rng::stream(s, "init");
        let mut net = AuxNetwork::build(
            6,
            primary.clone(),
            vec![aux.clone()],
            NetMode::AuxNas,
            &opts,
            &mut init,
        )?;
        // Nudge alphas off the shared 0.5 init and lift every zero-init
        // tensor (biases, norm betas, projections) off zero. Zero biases
        // let ReLU produce exactly-zero rows, which park downstream
        // pre-activations exactly on their kink, where central differences
        // disagree with the subgradient no matter how small eps is.
        for id in net.params.ids_where(|g| g.is_alpha()) {
            let v: f64 = init.gen_range(0.2..0.8);
            net.params.value_mut(id).data_mut()[0] = v;
        }
        for id in net.params.ids_where(|g| g.is_weight()) {
            let t = net.params.value_mut(id);
            if t.data().iter().all(|v| *v == 0.0) {
                for v in t.data_mut() {
                    *v = init.gen_range(0.02..0.2);
                }
            }
        }
        let idx = data.split_indices(Split::Train);
        let (x, labels) = data.batch(&idx[..16]);
        // cheap kink probe before the O(params) finite-difference sweep
        let mut tape = Tape::new();
        let pass = net.forward(&mut tape, &x, true)?;
        trainer::nas_objective(&mut tape, &net, pass.primary_out, &pass.aux_outs, &labels, 5.0, true)?;
        if tape.min_kink_distance() < 10.0 * eps {
            continue;
        }
        let res = gradcheck::grad_check_network(&mut net, &x, &labels, 5.0, eps)?;
        if res.kink_distance < 10.0 * eps {
            continue;
        }
        return Ok(res.max_rel_err);
    }
    Err(Error::invariant(
        "gradcheck: no kink-free instance found in 32 attempts",
    ))
}

fn cmd_gradcheck(seed: u64, rounds: usize, eps: f64) -> Result<()> {
    let mut worst_prim = 0.0f64;
    let mut worst_net = 0.0f64;
    for i in 0..rounds as u64 {
        worst_prim = worst_prim.max(gradcheck_primitives(seed + i, eps)?);
        worst_net = worst_net.max(gradcheck_network(seed + i, eps)?);
    }
    println!("primitives: max rel err {worst_prim:.3e} over {rounds} rounds");
    println!("supernet:   max rel err {worst_net:.3e} over {rounds} rounds");
    let tol = 1e-4;
    if worst_prim < tol && worst_net < tol {
        println!("gradcheck ok (tolerance {tol:.0e})");
        Ok(())
    } else {
        Err(Error::invariant(format!(
            "gradient check failed: max rel err {:.3e} >= {tol:.0e}",
            worst_prim.max(worst_net)
        )))
    }
}

// --- protocol ---

fn protocol_config(cfg: &ExperimentConfig) -> Result<ProtocolConfig> {
    let synth = match &cfg.data {
        DataSection::Synthetic(s) => s,
        DataSection::Csv(_) => {
            return Err(Error::config(
                "protocol resamples a dataset per seed and needs a synthetic family",
            ));
        }
    };
    let seeds = if cfg.seeds.is_empty() { vec![cfg.seed] } else { cfg.seeds.clone() };
    let methods = if cfg.methods.is_empty() { Method::ALL.to_vec() } else { cfg.methods.clone() };
    Ok(ProtocolConfig {
        family: synth.family.clone(),
        family_seed: synth.family_seed,
        n_samples: synth.n_samples,
        seeds,
        methods,
        shape: NetShape {
            n_layers: cfg.net.n_layers,
            width: cfg.net.width,
            window: cfg.net.window,
            stage: cfg.net.stage,
        },
        train: cfg.train_config(cfg.seed),
    })
}

fn run_protocol_jobs(pcfg: &ProtocolConfig, jobs: usize) -> Result<ResultTable> {
    if jobs <= 1 || pcfg.seeds.len() <= 1 {
        return evalbench::run_protocol(pcfg);
    }
    let results: Vec<Result<ResultTable>> = std::thread::scope(|scope| {
        let handles: Vec<_> = pcfg
            .seeds
            .chunks(pcfg.seeds.len().div_ceil(jobs))
            .map(|chunk| {
                let mut sub = pcfg.clone();
                sub.seeds = chunk.to_vec();
                scope.spawn(move || evalbench::run_protocol(&sub))
            })
            .collect();
        handles.into_iter().map(|h| h.join().expect("protocol worker panicked")).collect()
    });
    let mut cells = Vec::new();
    for r in results {
        cells.extend(r?.cells);
    }
    Ok(ResultTable { cells })
}

const RESULT_CSV_HEADER: &str = "method,seed,mse,rmse,accuracy,failed";

fn write_result_csv(table: &ResultTable, mut w: impl std::io::Write) -> Result<()> {
    writeln!(w, "{RESULT_CSV_HEADER}")?;
    for c in &table.cells {
        let (mse, rmse, acc) = match &c.metrics {
            Some(m) => (
                m.mse.map(|v| v.to_string()).unwrap_or_default(),
                m.rmse.map(|v| v.to_string()).unwrap_or_default(),
                m.accuracy.map(|v| v.to_string()).unwrap_or_default(),
            ),
            None => (String::new(), String::new(), String::new()),
        };
        writeln!(w, "{},{},{},{},{},{}", c.method.name(), c.seed, mse, rmse, acc, c.failed)?;
    }
    Ok(())
}

fn cmd_protocol(cfg: &ExperimentConfig, jobs: usize) -> Result<()> {
    let pcfg = protocol_config(cfg)?;
    let table = run_protocol_jobs(&pcfg, jobs)?;
    fs::create_dir_all(&cfg.output_dir)?;
    write_file(&cfg.output_dir.join("results.json"), &serde_json::to_string_pretty(&table)?)?;
    let f = fs::File::create(cfg.output_dir.join("results.csv"))?;
    write_result_csv(&table, f)?;
    for &m in &pcfg.methods {
        let mean = table.mean_score(m);
        match mean {
            Some(v) => print!("{:<16} mean score {v:.6}", m.name()),
            None => print!("{:<16} all seeds failed", m.name()),
        }
        if m != Method::Single && pcfg.methods.contains(&Method::Single) {
            if let Ok(p) = table.p_beats_single(m) {
                print!("   p(beats single) = {p:.4}");
            }
        }
        println!();
    }
    println!("wrote {}", cfg.output_dir.join("results.json").display());
    Ok(())
}
