//! `msce`: loss landscapes, gradient checks, synthetic data, training,
//! evaluation and the ablation grid.
//!
//! Exit codes: 0 success, 1 usage error, 2 data or format error, 3 check
//! failure.

mod ablate;
mod landscape;

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use msce_core::gradcheck::{self, CheckOptions};
use msce_core::net::{load_checkpoint, save_checkpoint};
use msce_core::{
    loss, synth, trainer, Error, HeadConfig, LossConfig, LossKind, Monitor, NetConfig, PoolKind,
    ReduceKind, SynthSpec, TrainConfig, DESK_LR0,
};

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Data(String),
    Check(String),
}

impl CliError {
    pub fn io(e: impl fmt::Display) -> Self {
        CliError::Data(e.to_string())
    }

    fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Data(_) => 2,
            CliError::Check(_) => 3,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Usage(m) | CliError::Data(m) | CliError::Check(m) => f.write_str(m),
        }
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        match e {
            Error::InvalidConfig(_) | Error::NotPowerOfTwo(_) | Error::ClassOutOfRange { .. } => {
                CliError::Usage(e.to_string())
            }
            _ => CliError::Data(e.to_string()),
        }
    }
}

type CliResult<T = ()> = Result<T, CliError>;

#[derive(Parser)]
#[command(
    name = "msce",
    version,
    about = "Coordinate regression as classification with multiscale softmax cross entropy"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Normalized loss of every candidate coordinate against one ground truth.
    Landscape(LandscapeArgs),
    /// Finite-difference check of every analytic gradient.
    Gradcheck(GradcheckArgs),
    /// Generate a synthetic fundus-like dataset.
    Gendata(GendataArgs),
    /// Train a network and write checkpoint.json, run.json and run.csv.
    Train(TrainArgs),
    /// Score a checkpoint on a dataset.
    Eval(EvalArgs),
    /// Run the nine-cell loss/network/batch grid.
    Ablate(AblateArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum LossArg {
    Mse,
    Sce,
    Msce,
}

impl From<LossArg> for LossKind {
    fn from(l: LossArg) -> Self {
        match l {
            LossArg::Mse => LossKind::MseSigmoid,
            LossArg::Sce => LossKind::Sce,
            LossArg::Msce => LossKind::Msce,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum PoolArg {
    Max,
    Average,
}

impl From<PoolArg> for PoolKind {
    fn from(p: PoolArg) -> Self {
        match p {
            PoolArg::Max => PoolKind::Max,
            PoolArg::Average => PoolKind::Average,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum ReduceArg {
    Sum,
    Mean,
}

impl From<ReduceArg> for ReduceKind {
    fn from(r: ReduceArg) -> Self {
        match r {
            ReduceArg::Sum => ReduceKind::Sum,
            ReduceArg::Mean => ReduceKind::Mean,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum MonitorArg {
    Val,
    Train,
}

#[derive(Args)]
struct LandscapeArgs {
    #[arg(long, value_enum)]
    loss: LossArg,
    /// Scale count; MSCE defaults to log2(classes), other losses use 1.
    #[arg(long)]
    scales: Option<usize>,
    #[arg(long, default_value_t = 256)]
    classes: usize,
    #[arg(long, default_value_t = 70)]
    gt: usize,
    #[arg(long, default_value_t = loss::DEFAULT_AMPLITUDE)]
    amplitude: f64,
    /// Pooling between MSCE branches.
    #[arg(long, value_enum, default_value = "max")]
    pool: PoolArg,
    /// Output prefix; writes <prefix>.csv and <prefix>.svg.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct GradcheckArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Image side of the end-to-end network check.
    #[arg(long, default_value_t = 8)]
    size: usize,
    #[arg(long, default_value_t = 20)]
    trials: usize,
    /// Adds this offset to every analytic gradient; exercises the failure path.
    #[arg(long, default_value_t = 0.0, hide = true)]
    perturb: f64,
}

#[derive(Args)]
struct GendataArgs {
    #[arg(long, default_value_t = 64)]
    size: usize,
    #[arg(long, default_value_t = 100)]
    count: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Fovea radius range as `min,max`, in normalized units.
    #[arg(long, value_parser = parse_range, default_value = "0.04,0.08")]
    fovea_radius: [f64; 2],
    /// Optic disc radius range as `min,max`, in normalized units.
    #[arg(long, value_parser = parse_range, default_value = "0.08,0.12")]
    disc_radius: [f64; 2],
    #[arg(long, default_value_t = 0.05)]
    noise: f64,
    #[arg(long, default_value_t = 0.1)]
    margin: f64,
    /// Place the disc within a narrow band of the fovea's distance.
    #[arg(long)]
    hard: bool,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Clone)]
struct NetArgs {
    /// Channel width of each U-Net level.
    #[arg(long, value_delimiter = ',', default_value = "8,16,32")]
    widths: Vec<usize>,
    #[arg(long, default_value_t = DESK_LR0)]
    lr: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    data: PathBuf,
    /// Optional held-out set scored with the best parameters.
    #[arg(long)]
    test: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_enum, default_value = "msce")]
    loss: LossArg,
    /// MSCE scale count; defaults to log2 of the image size.
    #[arg(long)]
    scales: Option<usize>,
    #[arg(long, default_value_t = 8)]
    batch: usize,
    #[arg(long, default_value_t = 1000)]
    epochs: usize,
    #[arg(long, default_value_t = 100)]
    patience: usize,
    #[arg(long, default_value_t = 400)]
    decay_steps: u64,
    #[arg(long, default_value_t = 0.9)]
    decay_rate: f64,
    #[arg(long, value_enum, default_value = "max")]
    pool: PoolArg,
    #[arg(long, value_enum, default_value = "sum")]
    reduce: ReduceArg,
    #[arg(long, value_enum, default_value = "val")]
    monitor: MonitorArg,
    #[arg(long, default_value_t = 0.2)]
    val_fraction: f64,
    /// Print one line per epoch to stderr.
    #[arg(long)]
    verbose: bool,
    #[command(flatten)]
    net: NetArgs,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
}

#[derive(Args)]
pub(crate) struct AblateArgs {
    #[arg(long)]
    data: PathBuf,
    /// Held-out set; defaults to the last 20% of --data.
    #[arg(long)]
    test: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 150)]
    epochs: usize,
    #[arg(long, default_value_t = 100)]
    patience: usize,
    /// MSCE scale count; defaults to log2 of the image size.
    #[arg(long)]
    scales: Option<usize>,
    #[command(flatten)]
    net: NetArgs,
}

fn parse_range(s: &str) -> Result<[f64; 2], String> {
    let parts: Vec<_> = s.split(',').map(str::trim).collect();
    match parts.as_slice() {
        [a, b] => {
            let a = a.parse::<f64>().map_err(|e| e.to_string())?;
            let b = b.parse::<f64>().map_err(|e| e.to_string())?;
            Ok([a, b])
        }
        _ => Err(format!("expected `min,max`, got `{s}`")),
    }
}

fn scales_for(kind: LossKind, requested: Option<usize>, classes: usize) -> CliResult<usize> {
    match (kind, requested) {
        (LossKind::Msce, Some(m)) => Ok(m),
        (LossKind::Msce, None) => {
            if !classes.is_power_of_two() {
                return Err(Error::NotPowerOfTwo(classes).into());
            }
            Ok(classes.trailing_zeros() as usize)
        }
        (_, None | Some(1)) => Ok(1),
        (k, Some(m)) => Err(CliError::Usage(format!(
            "--scales {m} only applies to msce, not {}",
            k.name()
        ))),
    }
}

fn with_extension(prefix: &Path, ext: &str) -> PathBuf {
    let mut s = prefix.as_os_str().to_owned();
    s.push(".");
    s.push(ext);
    PathBuf::from(s)
}

fn cmd_landscape(a: LandscapeArgs) -> CliResult {
    let kind = LossKind::from(a.loss);
    let scales = scales_for(kind, a.scales, a.classes)?;
    let cfg = LossConfig::new(kind, scales)?.with_pool(a.pool.into());
    let curve = loss::landscape(&cfg, a.classes, a.gt, a.amplitude)?;
    landscape::write_csv(&with_extension(&a.out, "csv"), &curve)?;
    let title = match kind {
        LossKind::Msce => format!("MSCE (M = {scales}), ground truth {}", a.gt),
        _ => format!("{}, ground truth {}", kind.name().to_uppercase(), a.gt),
    };
    landscape::write_svg(&with_extension(&a.out, "svg"), &title, &curve)
}

fn cmd_gradcheck(a: GradcheckArgs) -> CliResult {
    let opts = CheckOptions {
        seed: a.seed,
        size: a.size,
        trials: a.trials,
        perturb: a.perturb,
        ..CheckOptions::default()
    };
    let reports = gradcheck::run_suite(&opts)?;
    for r in &reports {
        println!(
            "{:<20} max_rel_error {:.3e}  tolerance {:.0e}  {}",
            r.name,
            r.max_rel_error,
            r.tolerance,
            if r.passed() { "ok" } else { "FAILED" }
        );
    }
    let failed: Vec<_> = reports
        .iter()
        .filter(|r| !r.passed())
        .map(|r| r.name.as_str())
        .collect();
    if failed.is_empty() {
        Ok(())
    } else {
        Err(CliError::Check(format!(
            "gradient check failed: {}",
            failed.join(", ")
        )))
    }
}

fn cmd_gendata(a: GendataArgs) -> CliResult {
    let spec = SynthSpec {
        size: a.size,
        count: a.count,
        seed: a.seed,
        fovea_radius: a.fovea_radius,
        disc_radius: a.disc_radius,
        noise_sigma: a.noise,
        margin: a.margin,
        hard: a.hard,
    };
    let data = synth::generate(&spec)?;
    synth::save(&data, &a.out)?;
    eprintln!(
        "wrote {} samples ({}px) to {}",
        data.len(),
        spec.size,
        a.out.display()
    );
    Ok(())
}

fn load_data(path: &Path) -> CliResult<msce_core::Dataset> {
    synth::load(path).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))
}

fn cmd_train(a: TrainArgs) -> CliResult {
    let data = load_data(&a.data)?;
    let test = a.test.as_deref().map(load_data).transpose()?;
    let size = data.image_size();
    let kind = LossKind::from(a.loss);
    let scales = scales_for(kind, a.scales, size)?;
    let net_cfg = NetConfig {
        input_size: size,
        widths: a.net.widths.clone(),
        head: HeadConfig {
            pool: a.pool.into(),
            reduce: a.reduce.into(),
            scales,
        },
        ..NetConfig::default()
    };
    let cfg = TrainConfig {
        loss: LossConfig::new(kind, scales)?,
        batch_size: a.batch,
        lr0: a.net.lr,
        decay_steps: a.decay_steps,
        decay_rate: a.decay_rate,
        max_epochs: a.epochs,
        patience: a.patience,
        seed: a.net.seed,
        val_fraction: a.val_fraction,
        monitor: match a.monitor {
            MonitorArg::Val => Monitor::Val,
            MonitorArg::Train => Monitor::Train,
        },
    };
    let verbose = a.verbose;
    let (params, mut record) = trainer::train_with(&data.samples, &net_cfg, &cfg, |e| {
        if verbose {
            eprintln!(
                "epoch {:>4}  train {:.5}  val {}  lr {:.3e}",
                e.epoch,
                e.train_loss,
                e.val_loss.map_or("-".into(), |v| format!("{v:.5}")),
                e.lr
            );
        }
    })?;
    if let Some(test) = &test {
        record.test_r_aed = Some(trainer::evaluate(&params, &test.samples)?.r_aed);
    }
    fs::create_dir_all(&a.out).map_err(CliError::io)?;
    save_checkpoint(&params, a.out.join("checkpoint.json"))?;
    fs::write(a.out.join("run.json"), record.to_json()?).map_err(CliError::io)?;
    fs::write(a.out.join("run.csv"), record.to_csv()?).map_err(CliError::io)?;
    eprintln!(
        "best epoch {} of {}{}",
        record.best_epoch,
        record.last_epoch(),
        record
            .test_r_aed
            .map_or(String::new(), |r| format!(", test R-AED {r:.4}"))
    );
    Ok(())
}

#[derive(Serialize)]
struct EvalReport {
    r_aed: f64,
    mean_distance: f64,
    samples: usize,
}

fn cmd_eval(a: EvalArgs) -> CliResult {
    let params = load_checkpoint(&a.checkpoint)
        .map_err(|e| CliError::Data(format!("{}: {e}", a.checkpoint.display())))?;
    let data = load_data(&a.data)?;
    let size = data.image_size();
    if size != params.config.input_size {
        return Err(CliError::Data(format!(
            "checkpoint expects {}px images, dataset has {size}px",
            params.config.input_size
        )));
    }
    let eval = trainer::evaluate(&params, &data.samples)?;
    let report = EvalReport {
        r_aed: eval.r_aed,
        mean_distance: eval.distances.iter().sum::<f64>() / eval.distances.len() as f64,
        samples: eval.distances.len(),
    };
    println!("{}", serde_json::to_string(&report).map_err(CliError::io)?);
    Ok(())
}

fn run(cli: Cli) -> CliResult {
    match cli.command {
        Command::Landscape(a) => cmd_landscape(a),
        Command::Gradcheck(a) => cmd_gradcheck(a),
        Command::Gendata(a) => cmd_gendata(a),
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Ablate(a) => ablate::run(a),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
