//! `invrom`: data generation, training sweeps and evaluation.

mod config;
mod run;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use invrom::autoencoders::decode_ae;
use invrom::burgers::{self, BurgersConfig, BurgersParams};
use invrom::container::{self, DENSE_AE_MAGIC, INV_AE_MAGIC, POD_MAGIC, ROM_MAGIC};
use invrom::dataset::{
    assemble, build_burgers_grid, burgers_test_params, read_snap, split, write_snap, SnapshotMatrix, TrajectoryData,
};
use invrom::dlrom::{decode_rom, rom_infer};
use invrom::error::{FormatError, MagicBytes};
use invrom::metrics::{projection_error, reduction_error};
use invrom::pod::{compute_pod, decode_basis, write_basis};

use crate::config::ExperimentConfig;
use crate::run::{Appender, Row};

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("config: {0}")]
    Config(String),
    #[error("{0}")]
    Input(String),
    #[error(transparent)]
    Core(#[from] invrom::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error("{0}")]
    Numerical(String),
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Core(e) if e.is_numerical() => 2,
            CliError::Numerical(_) => 2,
            _ => 1,
        }
    }
}

#[derive(Parser, Debug)]
#[command(name = "invrom", version, about = "Invertible-autoencoder model reduction experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Run the Burgers full-order model and write snapshot files.
    SimulateBurgers(SimulateArgs),
    /// Split simulated trajectories into train/valid/test snapshot files.
    MakeDataset(MakeDatasetArgs),
    /// Compute a POD basis from a training snapshot file.
    Pod(PodArgs),
    /// Train and evaluate every manifold dimension listed in the config.
    Train(TrainArgs),
    /// Train and evaluate over an explicit list of manifold dimensions.
    Sweep(SweepArgs),
    /// Evaluate a checkpoint on a test snapshot file.
    Evaluate(EvaluateArgs),
}

#[derive(Args, Debug)]
#[group(required = true, multiple = false, id = "which")]
struct Which {
    /// The 80-point training grid plus the two test parameters.
    #[arg(long)]
    grid: bool,
    /// A single parameter pair.
    #[arg(long, value_name = "MU1,MU2", value_parser = parse_mu)]
    mu: Option<BurgersParams>,
}

#[derive(Args, Debug)]
struct SimulateArgs {
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    which: Which,
}

#[derive(Args, Debug)]
struct MakeDatasetArgs {
    /// Output directory for train.snap, valid.snap and test.snap.
    #[arg(long)]
    out: PathBuf,
    /// Grid file from `simulate-burgers --grid`; simulated if absent.
    #[arg(long)]
    input: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args, Debug)]
struct PodArgs {
    #[arg(long)]
    train: PathBuf,
    #[arg(long)]
    r: usize,
    #[arg(long)]
    out: PathBuf,
    /// Report the projection error on this snapshot file.
    #[arg(long)]
    test: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long, default_value_t = 1)]
    jobs: usize,
}

#[derive(Args, Debug)]
struct SweepArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long, value_delimiter = ',', required = true)]
    dims: Vec<usize>,
    #[arg(long, default_value_t = 1)]
    jobs: usize,
}

#[derive(Args, Debug)]
struct EvaluateArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    test: PathBuf,
    /// Append the result row to this CSV file.
    #[arg(long)]
    csv: Option<PathBuf>,
}

fn parse_mu(s: &str) -> Result<BurgersParams, String> {
    let parts: Vec<&str> = s.split(',').collect();
    let [a, b] = parts.as_slice() else {
        return Err(format!("expected MU1,MU2, got {s:?}"));
    };
    let a: f64 = a.trim().parse().map_err(|e| format!("{a:?}: {e}"))?;
    let b: f64 = b.trim().parse().map_err(|e| format!("{b:?}: {e}"))?;
    Ok(BurgersParams::new(a, b))
}

fn simulate(params: &[BurgersParams]) -> Result<SnapshotMatrix, CliError> {
    let cfg = BurgersConfig::default();
    let trajs = params
        .iter()
        .map(|&mu| burgers::solve(mu, &cfg).map(|t| TrajectoryData::from(&t)))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(assemble(&trajs, cfg.dt, 0.0)?)
}

fn grid_with_test() -> Vec<BurgersParams> {
    let mut all = build_burgers_grid();
    all.extend(burgers_test_params());
    all
}

fn simulate_burgers(a: SimulateArgs) -> Result<(), CliError> {
    let params = match a.which.mu {
        Some(mu) => vec![mu],
        None => grid_with_test(),
    };
    let x = simulate(&params)?;
    write_snap(&a.out, &x)?;
    println!(
        "wrote {} trajectories ({} x {}) to {}",
        params.len(),
        x.n_rows(),
        x.n_cols(),
        a.out.display()
    );
    Ok(())
}

fn make_dataset(a: MakeDatasetArgs) -> Result<(), CliError> {
    let spec = split(&build_burgers_grid(), a.seed)?;
    let all = match &a.input {
        Some(p) => read_snap(p)?,
        None => simulate(&grid_with_test())?,
    };
    std::fs::create_dir_all(&a.out)?;
    let parts = [
        ("train", &spec.train_params),
        ("valid", &spec.valid_params),
        ("test", &spec.test_params),
    ];
    for (name, params) in parts {
        let wanted: Vec<Vec<f64>> = params.iter().map(|p| p.to_vec()).collect();
        let x = all.select(&wanted)?;
        let path = a.out.join(format!("{name}.snap"));
        write_snap(&path, &x)?;
        println!("{name}: {} trajectories -> {}", params.len(), path.display());
    }
    Ok(())
}

fn pod(a: PodArgs) -> Result<(), CliError> {
    let train = read_snap(&a.train)?;
    let basis = compute_pod(&train, a.r)?;
    write_basis(&a.out, &basis)?;
    println!("wrote rank-{} basis to {}", a.r, a.out.display());
    if let Some(t) = a.test {
        let test = read_snap(&t)?;
        let e = projection_error(&test, |x| basis.reconstruct_matrix(&basis.project_matrix(x)?))?;
        println!("projection error: {:.6e}", e.mean);
    }
    Ok(())
}

fn report(summary: run::SweepSummary, dir: &Path) -> Result<(), CliError> {
    println!(
        "{} rows written, {} already present ({})",
        summary.written,
        summary.skipped,
        dir.join(run::CSV_NAME).display()
    );
    if summary.numerical_failures > 0 {
        return Err(CliError::Numerical(format!(
            "{} runs failed numerically",
            summary.numerical_failures
        )));
    }
    Ok(())
}

fn evaluate(a: EvaluateArgs) -> Result<(), CliError> {
    let bytes = std::fs::read(&a.checkpoint)?;
    let test = read_snap(&a.test)?;
    let magic = container::sniff_magic(&bytes).unwrap_or_default();
    let mut row = Row {
        model: String::new(),
        variant: String::new(),
        manifold_dim: 0,
        seed: None,
        projection_error: f64::NAN,
        reduction_error: None,
        epochs_trained: None,
        wall_seconds: 0.0,
        config_hash: String::new(),
    };
    let start = std::time::Instant::now();
    let check_rows = |expected: usize| -> Result<(), CliError> {
        if test.n_rows() != expected {
            return Err(invrom::Error::Dimension {
                what: "test snapshot length",
                expected,
                got: test.n_rows(),
            }
            .into());
        }
        Ok(())
    };
    if &magic == POD_MAGIC {
        let b = decode_basis(&bytes)?;
        check_rows(b.n_rows())?;
        row.model = "pod".into();
        row.variant = "pod".into();
        row.manifold_dim = b.rank();
        row.projection_error = projection_error(&test, |x| b.reconstruct_matrix(&b.project_matrix(x)?))?.mean;
    } else if &magic == INV_AE_MAGIC || &magic == DENSE_AE_MAGIC {
        let m = decode_ae(&bytes)?;
        check_rows(m.pre.data_dim)?;
        row.model = "ae".into();
        let kind = if m.ae.is_invertible() { "inv" } else { "dense" };
        row.variant = if m.pre.pod.is_some() { format!("pod_{kind}") } else { kind.into() };
        row.manifold_dim = m.ae.latent_dim();
        row.projection_error = projection_error(&test, |x| m.reconstruct(x))?.mean;
    } else if &magic == ROM_MAGIC {
        let m = decode_rom(&bytes)?;
        check_rows(m.pre.data_dim)?;
        row.model = "rom".into();
        row.variant = m.variant.name().into();
        row.manifold_dim = m.ae.latent_dim();
        row.projection_error = projection_error(&test, |x| m.reconstruct(x))?.mean;
        row.reduction_error = Some(reduction_error(&test, |mu, t| rom_infer(&m, mu, t))?.mean);
    } else {
        return Err(invrom::Error::from(FormatError::BadMagic {
            expected: "PODBAS01|INVAE001|DAE00001|ROMBDL01",
            found: MagicBytes(magic.to_vec()),
        })
        .into());
    }
    row.wall_seconds = start.elapsed().as_secs_f64();
    print!(
        "{} {} n={}: projection error {:.6e}",
        row.model, row.variant, row.manifold_dim, row.projection_error
    );
    match row.reduction_error {
        Some(r) => println!(", reduction error {r:.6e}"),
        None => println!(),
    }
    let mut w = csv::WriterBuilder::new().has_headers(true).from_writer(std::io::stdout());
    w.serialize(&row)?;
    w.flush()?;
    if let Some(p) = a.csv {
        Appender::open(&p)?.append(&row)?;
    }
    Ok(())
}

fn dispatch(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::SimulateBurgers(a) => simulate_burgers(a),
        Command::MakeDataset(a) => make_dataset(a),
        Command::Pod(a) => pod(a),
        Command::Train(a) => {
            let cfg = ExperimentConfig::load(&a.config)?;
            let dims = cfg.model.dims.clone();
            report(run::sweep(&cfg, &dims, a.jobs)?, &cfg.output.dir)
        }
        Command::Sweep(a) => {
            let cfg = ExperimentConfig::load(&a.config)?;
            report(run::sweep(&cfg, &a.dims, a.jobs)?, &cfg.output.dir)
        }
        Command::Evaluate(a) => evaluate(a),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
