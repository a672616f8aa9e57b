//! `preg`: train GCN/MLP models with propagation regularization, search μ,
//! run the smoothing-theory checks, and generate synthetic datasets.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 usage error.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use preg::analysis::{
    infinite_gcn, intra_class_distance, minimize_preg_descent, theorem1_sides, TracePoint,
};
use preg::data::{generate_sbm, load_dataset, load_split_files, write_dataset, Dataset, SbmConfig};
use preg::graph::Normalization;
use preg::nn::{finite_diff_gradcheck, forward_prepared, model_backward, Dropout, ModelKind, ModelParams, PreparedInput};
use preg::reg::{Phi, RegKind, RegSpec};
use preg::train::{
    composite_loss, default_mu_grid, grid_search_mu_repeated, predict, random_split, train, AdamConfig, LossContext,
    SplitSpec, TrainConfig,
};
use preg::{Error, Result};

#[derive(Parser)]
#[command(name = "preg", version, about = "Propagation regularization for graph neural networks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train one model and write its metrics as JSON.
    Train(TrainCmd),
    /// Train one run per μ (per split and seed) and pick μ by mean validation accuracy.
    Gridsearch(GridCmd),
    /// Run a numerical check and write a CSV.
    Analyze(AnalyzeCmd),
    /// Generate a stochastic-block-model dataset directory.
    GenSbm(GenSbmCmd),
    /// Compare analytic and finite-difference gradients of the training loss.
    Gradcheck(GradcheckCmd),
}

#[derive(Clone, Copy, ValueEnum)]
enum ModelArg {
    Gcn,
    Mlp,
}

#[derive(Clone, Copy, PartialEq, ValueEnum)]
enum RegArg {
    None,
    Preg,
    Lap,
    Ls,
    Cp,
}

#[derive(Clone, Copy, ValueEnum)]
enum PhiArg {
    Se,
    Ce,
    Kl,
}

#[derive(Clone, Copy, PartialEq, ValueEnum)]
enum SplitArg {
    Random,
    Files,
}

#[derive(Clone, Copy, ValueEnum)]
enum Check {
    Theorem1,
    InfiniteGcn,
    PregDescent,
    Omega,
    MaskedSweep,
    MuSweep,
}

impl From<PhiArg> for Phi {
    fn from(p: PhiArg) -> Self {
        match p {
            PhiArg::Se => Phi::SquaredError,
            PhiArg::Ce => Phi::CrossEntropy,
            PhiArg::Kl => Phi::KlDivergence,
        }
    }
}

fn nonneg(s: &str) -> std::result::Result<f64, String> {
    let v: f64 = s.parse().map_err(|e| format!("{e}"))?;
    if v.is_finite() && v >= 0.0 {
        Ok(v)
    } else {
        Err(format!("must be a finite number >= 0, got {s}"))
    }
}

fn positive(s: &str) -> std::result::Result<f64, String> {
    let v = nonneg(s)?;
    if v > 0.0 {
        Ok(v)
    } else {
        Err(format!("must be > 0, got {s}"))
    }
}

fn unit_closed(s: &str) -> std::result::Result<f64, String> {
    let v = nonneg(s)?;
    if v <= 1.0 {
        Ok(v)
    } else {
        Err(format!("must lie in [0, 1], got {s}"))
    }
}

fn unit_open(s: &str) -> std::result::Result<f64, String> {
    let v = nonneg(s)?;
    if v < 1.0 {
        Ok(v)
    } else {
        Err(format!("must lie in [0, 1), got {s}"))
    }
}

/// Shortest round-trip form, switching to exponent notation for very small or large magnitudes.
fn num(v: f64) -> String {
    if v != 0.0 && v.is_finite() && !(1e-4..1e15).contains(&v.abs()) {
        format!("{v:e}")
    } else {
        format!("{v}")
    }
}

#[derive(Args)]
struct DataArgs {
    /// Dataset directory (edges.tsv, features.txt, labels.txt).
    #[arg(long)]
    data: PathBuf,
    /// Random per-class split, or train_idx.txt/val_idx.txt/test_idx.txt from the data directory.
    #[arg(long, value_enum, default_value = "random")]
    split: SplitArg,
    /// Seed for the random split (defaults to --seed).
    #[arg(long)]
    split_seed: Option<u64>,
    /// Training nodes per class for random splits.
    #[arg(long, default_value_t = 20)]
    train_per_class: usize,
    /// Validation nodes per class for random splits.
    #[arg(long, default_value_t = 30)]
    val_per_class: usize,
}

#[derive(Args)]
struct ModelArgs {
    /// Model architecture.
    #[arg(long, value_enum, default_value = "gcn")]
    model: ModelArg,
    /// Hidden width (default 64 for gcn, 16 for mlp).
    #[arg(long)]
    hidden: Option<usize>,
    /// Dropout probability.
    #[arg(long, default_value_t = 0.5, value_parser = unit_open)]
    dropout: f64,
    /// Adam learning rate.
    #[arg(long, default_value_t = 0.01, value_parser = positive)]
    lr: f64,
    /// L2 weight decay added to the gradient.
    #[arg(long, default_value_t = 5e-4, value_parser = nonneg)]
    weight_decay: f64,
    /// Epoch cap.
    #[arg(long, default_value_t = 2000)]
    max_epochs: usize,
    /// Stop after this many epochs without a new best validation accuracy.
    #[arg(long, default_value_t = 200)]
    patience: usize,
    /// Seed for initialization, dropout and the unmask set.
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct RegArgs {
    /// Regularizer: P-reg, Laplacian, label smoothing, confidence penalty, or none.
    #[arg(long, value_enum, default_value = "none")]
    reg: RegArg,
    /// Difference measure for P-reg.
    #[arg(long, value_enum, default_value = "ce")]
    phi: PhiArg,
    /// Regularization weight μ (P-reg and Laplacian).
    #[arg(long, default_value_t = 0.5, value_parser = nonneg, allow_negative_numbers = true)]
    mu: f64,
    /// Fraction α of nodes P-reg is applied to.
    #[arg(long, default_value_t = 1.0, value_parser = unit_closed)]
    unmask_ratio: f64,
    /// Use the annealed weight μ^(1/epoch) (needs 0 < μ < 1).
    #[arg(long)]
    anneal: bool,
    /// Hinge threshold τ on the P-reg value.
    #[arg(long, value_parser = nonneg)]
    threshold: Option<f64>,
    /// Label smoothing strength.
    #[arg(long, default_value_t = 0.1, value_parser = unit_open)]
    ls_alpha: f64,
    /// Confidence penalty weight.
    #[arg(long, default_value_t = 0.1, value_parser = nonneg)]
    cp_beta: f64,
    /// Add self-loops to the P-reg propagation operator.
    #[arg(long)]
    preg_self_loops: bool,
}

#[derive(Args)]
struct TrainCmd {
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    model: ModelArgs,
    #[command(flatten)]
    reg: RegArgs,
    /// Output file (default stdout).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Also write the trained parameters as a JSON checkpoint.
    #[arg(long)]
    save_model: Option<PathBuf>,
}

#[derive(Args)]
struct GridCmd {
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    model: ModelArgs,
    #[command(flatten)]
    reg: RegArgs,
    /// Comma-separated μ values (default 0.05, 0.10, ..., 1.00).
    #[arg(long, value_delimiter = ',', value_parser = nonneg)]
    mu_grid: Option<Vec<f64>>,
    /// Comma-separated training seeds (default: --seed).
    #[arg(long, value_delimiter = ',')]
    seeds: Option<Vec<u64>>,
    /// Number of random splits, seeded split-seed, split-seed+1, ...
    #[arg(long, default_value_t = 1)]
    num_splits: u64,
    /// Output file (default stdout).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct AnalyzeCmd {
    /// Which check to run.
    #[arg(long, value_enum)]
    check: Check,
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    model: ModelArgs,
    #[command(flatten)]
    reg: RegArgs,
    /// Add self-loops before propagating (infinite-gcn, preg-descent, theorem1).
    #[arg(long)]
    self_loops: bool,
    /// Convergence tolerance on row dispersion (infinite-gcn).
    #[arg(long, default_value_t = 1e-8, value_parser = positive)]
    tol: f64,
    /// Iteration cap (infinite-gcn).
    #[arg(long, default_value_t = 10_000)]
    max_iter: usize,
    /// Gradient descent step size (preg-descent).
    #[arg(long, default_value_t = 0.01, value_parser = positive)]
    descent_lr: f64,
    /// Gradient descent steps (preg-descent).
    #[arg(long, default_value_t = 2000)]
    steps: usize,
    /// Trained checkpoint written by `train --save-model` (omega; repeatable).
    #[arg(long)]
    model_file: Vec<PathBuf>,
    /// Comma-separated μ values (mu-sweep; default 0.05, ..., 1.00).
    #[arg(long, value_delimiter = ',', value_parser = nonneg)]
    mu_grid: Option<Vec<f64>>,
    /// Comma-separated unmask ratios (masked-sweep; default 0, 0.1, ..., 1).
    #[arg(long, value_delimiter = ',', value_parser = nonneg)]
    alpha_grid: Option<Vec<f64>>,
    /// Output file (default stdout).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct GenSbmCmd {
    /// JSON generator config; flags below override its fields.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    blocks: Option<usize>,
    #[arg(long)]
    nodes_per_block: Option<usize>,
    #[arg(long, value_parser = unit_closed)]
    p_in: Option<f64>,
    #[arg(long, value_parser = unit_closed)]
    p_out: Option<f64>,
    #[arg(long)]
    feature_dim: Option<usize>,
    #[arg(long, value_parser = nonneg)]
    center_separation: Option<f64>,
    #[arg(long, value_parser = nonneg)]
    feature_noise_sd: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    /// Accept a disconnected sample instead of retrying.
    #[arg(long)]
    allow_disconnected: bool,
    /// Output dataset directory.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct GradcheckCmd {
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    model: ModelArgs,
    #[command(flatten)]
    reg: RegArgs,
    /// Central-difference step.
    #[arg(long, default_value_t = 1e-5, value_parser = positive)]
    eps: f64,
    /// Check at most this many evenly spaced coordinates.
    #[arg(long)]
    max_coords: Option<usize>,
    /// Output file (default stdout).
    #[arg(long)]
    out: Option<PathBuf>,
}

/// What `train --save-model` writes.
#[derive(Serialize, Deserialize)]
struct Checkpoint {
    model_norm: Normalization,
    params: ModelParams,
}

fn reg_spec(a: &RegArgs) -> RegSpec {
    let kind = match a.reg {
        RegArg::None => RegKind::None,
        RegArg::Preg => RegKind::Preg,
        RegArg::Lap => RegKind::Laplacian,
        RegArg::Ls => RegKind::LabelSmoothing,
        RegArg::Cp => RegKind::ConfidencePenalty,
    };
    RegSpec {
        kind,
        phi: a.phi.into(),
        mu: a.mu,
        unmask_ratio: a.unmask_ratio,
        anneal: a.anneal,
        threshold: a.threshold,
        ls_alpha: a.ls_alpha,
        cp_beta: a.cp_beta,
    }
}

fn train_config(m: &ModelArgs, r: &RegArgs) -> TrainConfig {
    TrainConfig {
        model: match m.model {
            ModelArg::Gcn => ModelKind::Gcn,
            ModelArg::Mlp => ModelKind::Mlp,
        },
        hidden: m.hidden,
        reg: reg_spec(r),
        adam: AdamConfig {
            lr: m.lr,
            weight_decay: m.weight_decay,
            ..AdamConfig::default()
        },
        dropout: m.dropout,
        max_epochs: m.max_epochs,
        patience: m.patience,
        seed: m.seed,
        preg_self_loops: r.preg_self_loops,
        ..TrainConfig::default()
    }
}

fn split_for(d: &DataArgs, data: &Dataset, seed: u64) -> Result<SplitSpec> {
    match d.split {
        SplitArg::Files => {
            let [train, val, test] = load_split_files(&d.data)?;
            Ok(SplitSpec { train, val, test })
        }
        SplitArg::Random => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            random_split(&data.labels, data.num_classes(), d.train_per_class, d.val_per_class, &mut rng)
        }
    }
}

fn emit(out: Option<&Path>, body: &str) -> Result<()> {
    match out {
        Some(path) => fs::write(path, body).map_err(|e| Error::io(path, e)),
        None => {
            print!("{body}");
            Ok(())
        }
    }
}

fn json<T: Serialize>(value: &T) -> String {
    serde_json::to_string_pretty(value).expect("serializable") + "\n"
}

fn trace_csv(trace: &[TracePoint]) -> String {
    let mut s = String::from("step,value,dispersion\n");
    for t in trace {
        writeln!(s, "{},{},{}", t.step, num(t.value), num(t.dispersion)).unwrap();
    }
    s
}

fn cmd_train(c: &TrainCmd) -> Result<()> {
    let data = load_dataset(&c.data.data)?;
    let cfg = train_config(&c.model, &c.reg);
    let split = split_for(&c.data, &data, c.data.split_seed.unwrap_or(c.model.seed))?;
    let (params, metrics) = train(&cfg, &data, &split)?;
    if let Some(path) = &c.save_model {
        let ckpt = Checkpoint {
            model_norm: cfg.model_norm,
            params,
        };
        fs::write(path, json(&ckpt)).map_err(|e| Error::io(path, e))?;
    }
    emit(c.out.as_deref(), &json(&metrics))
}

fn cmd_gridsearch(c: &GridCmd) -> Result<()> {
    let data = load_dataset(&c.data.data)?;
    let cfg = train_config(&c.model, &c.reg);
    if cfg.reg.kind == RegKind::None {
        return Err(Error::Config("gridsearch needs a regularizer (--reg)".into()));
    }
    let base = c.data.split_seed.unwrap_or(c.model.seed);
    let splits = if c.data.split == SplitArg::Files {
        vec![split_for(&c.data, &data, base)?]
    } else {
        (0..c.num_splits.max(1))
            .map(|k| split_for(&c.data, &data, base + k))
            .collect::<Result<Vec<_>>>()?
    };
    let seeds = c.seeds.clone().unwrap_or_else(|| vec![c.model.seed]);
    let grid = c.mu_grid.clone().unwrap_or_else(default_mu_grid);
    let result = grid_search_mu_repeated(&cfg, &grid, &data, &splits, &seeds)?;
    emit(c.out.as_deref(), &json(&result))
}

fn analysis_graph(c: &AnalyzeCmd, data: &Dataset) -> preg::graph::Graph {
    if c.self_loops {
        data.graph.with_self_loops()
    } else {
        data.graph.clone()
    }
}

fn sweep_csv(
    c: &AnalyzeCmd,
    data: &Dataset,
    column: &str,
    values: &[f64],
    apply: impl Fn(&mut TrainConfig, f64),
) -> Result<String> {
    let split = split_for(&c.data, data, c.data.split_seed.unwrap_or(c.model.seed))?;
    let mut s = format!("{column},train_acc,val_acc,test_acc,omega,best_epoch\n");
    for &v in values {
        let mut cfg = train_config(&c.model, &c.reg);
        apply(&mut cfg, v);
        let (_, m) = train(&cfg, data, &split)?;
        writeln!(
            s,
            "{},{},{},{},{},{}",
            num(v),
            num(m.train_acc),
            num(m.val_acc),
            num(m.test_acc),
            num(m.omega),
            m.best_epoch
        ).unwrap();
    }
    Ok(s)
}

fn cmd_analyze(c: &AnalyzeCmd) -> Result<()> {
    let data = load_dataset(&c.data.data)?;
    let body = match c.check {
        Check::Theorem1 => {
            let (lhs, rhs) = theorem1_sides(&analysis_graph(c, &data), &data.features)?;
            format!("lhs,rhs,residual\n{},{},{}\n", num(lhs), num(rhs), num((lhs - rhs).abs()))
        }
        Check::InfiniteGcn => {
            let rep = infinite_gcn(&analysis_graph(c, &data), &data.features, c.tol, c.max_iter)?;
            for w in &rep.warnings {
                eprintln!("warning: {w}");
            }
            trace_csv(&rep.trace)
        }
        Check::PregDescent => {
            let r = minimize_preg_descent(
                &analysis_graph(c, &data),
                &data.features,
                c.reg.phi.into(),
                c.descent_lr,
                c.steps,
            )?;
            trace_csv(&r.trace)
        }
        Check::Omega => {
            if c.model_file.is_empty() {
                return Err(Error::Config("--check omega needs at least one --model-file".into()));
            }
            let mut s = String::from("checkpoint,omega\n");
            for path in &c.model_file {
                let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
                let ckpt: Checkpoint = serde_json::from_str(&text)
                    .map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
                let z = predict(&ckpt.params, &data, ckpt.model_norm)?;
                writeln!(s, "{},{}", path.display(), num(intra_class_distance(&z, &data.labels)?)).unwrap();
            }
            s
        }
        Check::MaskedSweep => {
            let alphas = c
                .alpha_grid
                .clone()
                .unwrap_or_else(|| (0..=10).map(|k| k as f64 / 10.0).collect());
            if let Some(a) = alphas.iter().find(|&&a| a > 1.0) {
                return Err(Error::Config(format!("unmask ratio {a} outside [0, 1]")));
            }
            sweep_csv(c, &data, "alpha", &alphas, |cfg, a| {
                cfg.reg.kind = RegKind::Preg;
                cfg.reg.unmask_ratio = a;
            })?
        }
        Check::MuSweep => {
            let mut mus = vec![0.0];
            mus.extend(c.mu_grid.clone().unwrap_or_else(default_mu_grid));
            sweep_csv(c, &data, "mu", &mus, |cfg, mu| {
                if cfg.reg.kind == RegKind::None {
                    cfg.reg.kind = RegKind::Preg;
                }
                cfg.reg.mu = mu;
            })?
        }
    };
    emit(c.out.as_deref(), &body)
}

fn cmd_gen_sbm(c: &GenSbmCmd) -> Result<()> {
    let mut cfg = match &c.config {
        Some(path) => {
            let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
            serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?
        }
        None => SbmConfig::default(),
    };
    macro_rules! set {
        ($($f:ident),*) => { $(if let Some(v) = c.$f { cfg.$f = v; })* };
    }
    set!(blocks, nodes_per_block, p_in, p_out, feature_dim, center_separation, feature_noise_sd, seed);
    if c.allow_disconnected {
        cfg.require_connected = false;
    }
    let data = generate_sbm(&cfg)?;
    write_dataset(&data, &c.out)
}

#[derive(Serialize)]
struct GradcheckReport {
    max_rel_error: f64,
    num_params: usize,
}

fn cmd_gradcheck(c: &GradcheckCmd) -> Result<()> {
    let data = load_dataset(&c.data.data)?;
    let cfg = train_config(&c.model, &c.reg);
    cfg.validate()?;
    let split = split_for(&c.data, &data, c.data.split_seed.unwrap_or(c.model.seed))?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let params = ModelParams::init(cfg.model, data.num_features(), cfg.hidden_size(), data.num_classes(), &mut rng);
    let op = preg::graph::normalize_adjacency(&data.graph, cfg.model_norm);
    let input = PreparedInput::new(cfg.model, &data.features, &op)?;
    let ctx = LossContext::new(
        &cfg.reg,
        &data.graph,
        &data.labels,
        data.num_classes(),
        &split.train,
        cfg.preg_norm,
        cfg.preg_self_loops,
        cfg.seed,
    )?;
    let loss = |p: &ModelParams| {
        let (z, cache) = forward_prepared(p, &input, &op, Dropout::OFF, &mut rng)?;
        let out = composite_loss(&z, &ctx, 1)?;
        Ok((out.total, model_backward(&cache, p, &out.dz)?))
    };
    let report = GradcheckReport {
        max_rel_error: finite_diff_gradcheck(loss, &params, c.eps, c.max_coords)?,
        num_params: params.num_params(),
    };
    emit(c.out.as_deref(), &json(&report))
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    let result = match &cli.command {
        Command::Train(c) => cmd_train(c),
        Command::Gridsearch(c) => cmd_gridsearch(c),
        Command::Analyze(c) => cmd_analyze(c),
        Command::GenSbm(c) => cmd_gen_sbm(c),
        Command::Gradcheck(c) => cmd_gradcheck(c),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            // invalid flag combinations surface as config errors
            ExitCode::from(if matches!(e, Error::Config(_)) { 2 } else { 1 })
        }
    }
}
