//! Training tasks and the append-only results table.

use std::collections::HashSet;
use std::fs::{self, OpenOptions};
use std::path::{Path, PathBuf};
use std::sync::Mutex;
use std::time::Instant;

use invrom::autoencoders::{train_autoencoder, write_ae, AeModel, Preprocessor};
use invrom::dataset::{read_snap, SnapshotMatrix};
use invrom::dlrom::{rom_infer, train_rom, write_rom, LatentRegressor, RomModel, RomSpec};
use invrom::metrics::{projection_error, reduction_error};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::{ExperimentConfig, Family};
use crate::CliError;

pub const CSV_NAME: &str = "errors.csv";

/// One line of `errors.csv`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Row {
    pub model: String,
    pub variant: String,
    pub manifold_dim: usize,
    pub seed: Option<u64>,
    pub projection_error: f64,
    pub reduction_error: Option<f64>,
    pub epochs_trained: Option<usize>,
    pub wall_seconds: f64,
    pub config_hash: String,
}

impl Row {
    fn key(&self) -> (String, usize, Option<u64>, String) {
        (self.model.clone(), self.manifold_dim, self.seed, self.config_hash.clone())
    }
}

pub fn read_rows(path: &Path) -> Result<Vec<Row>, CliError> {
    if !path.exists() {
        return Ok(Vec::new());
    }
    let mut r = csv::Reader::from_path(path)?;
    Ok(r.deserialize().collect::<Result<_, _>>()?)
}

/// Serialized appender; the header is written only to an empty file.
pub struct Appender {
    writer: Mutex<csv::Writer<fs::File>>,
}

impl Appender {
    pub fn open(path: &Path) -> Result<Self, CliError> {
        let fresh = fs::metadata(path).map(|m| m.len() == 0).unwrap_or(true);
        let file = OpenOptions::new().create(true).append(true).open(path)?;
        let writer = csv::WriterBuilder::new().has_headers(fresh).from_writer(file);
        Ok(Self {
            writer: Mutex::new(writer),
        })
    }

    pub fn append(&self, row: &Row) -> Result<(), CliError> {
        let mut w = self.writer.lock().expect("appender lock");
        w.serialize(row)?;
        w.flush()?;
        Ok(())
    }
}

pub struct Data {
    pub train: SnapshotMatrix,
    pub valid: SnapshotMatrix,
    pub test: SnapshotMatrix,
}

impl Data {
    pub fn load(cfg: &ExperimentConfig) -> Result<Self, CliError> {
        let read = |p: &PathBuf| read_snap(p).map_err(|e| CliError::Input(format!("{}: {e}", p.display())));
        let data = Self {
            train: read(&cfg.fom.train)?,
            valid: read(&cfg.fom.valid)?,
            test: read(&cfg.fom.test)?,
        };
        for (name, m) in [("valid", &data.valid), ("test", &data.test)] {
            if m.n_rows() != data.train.n_rows() {
                return Err(CliError::Input(format!(
                    "{name} snapshots have {} rows, train has {}",
                    m.n_rows(),
                    data.train.n_rows()
                )));
            }
        }
        Ok(data)
    }
}

/// Outcome of a sweep: rows written and whether any failed numerically.
#[derive(Debug, Default)]
pub struct SweepSummary {
    pub written: usize,
    pub skipped: usize,
    pub numerical_failures: usize,
}

/// Train and evaluate one model per manifold dimension, appending a row for
/// each (model, n, seed, config hash) not already in the table.
pub fn sweep(cfg: &ExperimentConfig, dims: &[usize], jobs: usize) -> Result<SweepSummary, CliError> {
    fs::create_dir_all(&cfg.output.dir)?;
    let csv_path = cfg.output.dir.join(CSV_NAME);
    let hash = cfg.hash();
    let seed = cfg.train.seed;
    let done: HashSet<_> = read_rows(&csv_path)?.iter().map(Row::key).collect();
    let todo: Vec<usize> = dims
        .iter()
        .copied()
        .filter(|&n| !done.contains(&(cfg.model_name().to_string(), n, Some(seed), hash.clone())))
        .collect();
    let mut summary = SweepSummary {
        skipped: dims.len() - todo.len(),
        ..Default::default()
    };
    if todo.is_empty() {
        log::info!("all {} rows already present", dims.len());
        return Ok(summary);
    }
    let data = Data::load(cfg)?;
    let pre = Preprocessor::fit(&data.train, cfg.pod.as_ref().map(|p| p.r))?;
    let appender = Appender::open(&csv_path)?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .map_err(|e| CliError::Usage(e.to_string()))?;
    let results: Vec<Result<bool, CliError>> = pool.install(|| {
        todo.par_iter()
            .map(|&n| {
                let start = Instant::now();
                let outcome = run_one(cfg, &data, &pre, n, &hash);
                let wall = start.elapsed().as_secs_f64();
                let mut numerical = false;
                let row = match outcome {
                    Ok(mut row) => {
                        row.wall_seconds = wall;
                        row
                    }
                    Err(e) => {
                        numerical = matches!(&e, CliError::Core(c) if c.is_numerical());
                        log::error!("n={n}: {e}");
                        Row {
                            model: cfg.model_name().into(),
                            variant: cfg.variant_name(),
                            manifold_dim: n,
                            seed: Some(seed),
                            projection_error: f64::NAN,
                            reduction_error: None,
                            epochs_trained: None,
                            wall_seconds: wall,
                            config_hash: hash.clone(),
                        }
                    }
                };
                appender.append(&row)?;
                Ok(numerical)
            })
            .collect()
    });
    for r in results {
        if r? {
            summary.numerical_failures += 1;
        }
        summary.written += 1;
    }
    Ok(summary)
}

fn checkpoint_path(cfg: &ExperimentConfig, n: usize, hash: &str) -> PathBuf {
    cfg.output.dir.join(format!(
        "{}_{}_n{}_s{}_{}.bin",
        cfg.model_name(),
        cfg.variant_name(),
        n,
        cfg.train.seed,
        hash
    ))
}

fn run_one(cfg: &ExperimentConfig, data: &Data, pre: &Preprocessor, n: usize, hash: &str) -> Result<Row, CliError> {
    let full = pre.model_dim();
    if n > full {
        return Err(CliError::Input(format!("manifold dimension {n} exceeds full dimension {full}")));
    }
    let tc = cfg.train_config();
    let mut row = Row {
        model: cfg.model_name().into(),
        variant: cfg.variant_name(),
        manifold_dim: n,
        seed: Some(cfg.train.seed),
        projection_error: f64::NAN,
        reduction_error: None,
        epochs_trained: None,
        wall_seconds: 0.0,
        config_hash: hash.to_string(),
    };
    let path = checkpoint_path(cfg, n, hash);
    match cfg.model.family {
        Family::Ae => {
            let mut model = AeModel::new(pre.clone(), &cfg.ae_spec(), n, tc.seed)?;
            let h = train_autoencoder(&mut model, &data.train, &data.valid, &tc)?;
            row.projection_error = projection_error(&data.test, |x| model.reconstruct(x))?.mean;
            row.epochs_trained = Some(h.epochs_trained());
            write_ae(&path, &model)?;
        }
        Family::Rom => {
            let spec = RomSpec {
                variant: cfg.model.variant.expect("validated"),
                latent_dim: n,
                autoencoder: cfg.ae_spec(),
                regressor_hidden: cfg.model.regressor_hidden.clone(),
            };
            let ranges = LatentRegressor::ranges_of(&data.train);
            let mut model = RomModel::new(&spec, pre.clone(), ranges, tc.seed)?;
            let h = train_rom(&mut model, &data.train, &data.valid, &tc)?;
            row.projection_error = projection_error(&data.test, |x| model.reconstruct(x))?.mean;
            row.reduction_error = Some(reduction_error(&data.test, |mu, t| rom_infer(&model, mu, t))?.mean);
            row.epochs_trained = Some(h.epochs_trained());
            write_rom(&path, &model)?;
        }
    }
    log::info!(
        "n={n}: projection {:.3e}{}",
        row.projection_error,
        row.reduction_error.map(|r| format!(", reduction {r:.3e}")).unwrap_or_default()
    );
    Ok(row)
}
