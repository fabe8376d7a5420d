//! Snapshot matrices, parameter splits, scaling and the snapshot file format.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::burgers::{self, BurgersConfig, BurgersParams, Trajectory, MU1_RANGE, MU2_RANGE};
use crate::container::{self, SNAPSHOT_MAGIC};
use crate::error::{Error, FormatError, Result};
use crate::tensor::Tensor;

/// Provenance of one column of a [`SnapshotMatrix`].
#[derive(Clone, Debug, PartialEq)]
pub struct ColumnMeta {
    pub param: Vec<f64>,
    /// 1-based timestep index `k`.
    pub step: usize,
    pub time: f64,
}

/// One parametric trajectory, before assembly.
#[derive(Clone, Debug)]
pub struct TrajectoryData {
    pub param: Vec<f64>,
    pub states: Vec<Vec<f64>>,
}

impl From<&Trajectory> for TrajectoryData {
    fn from(t: &Trajectory) -> Self {
        Self {
            param: t.parameter.to_vec(),
            states: t.states.clone(),
        }
    }
}

/// Column-stacked snapshots, trajectory-major then time.
///
/// Storage is column-major, so each snapshot is contiguous; viewed row-major
/// the same buffer is an `M x N` sample matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct SnapshotMatrix {
    n_rows: usize,
    data: Vec<f64>,
    params: Vec<Vec<f64>>,
    nt: usize,
    dt: f64,
    t0: f64,
}

impl SnapshotMatrix {
    /// Build from column-major data. Every trajectory contributes `nt`
    /// consecutive columns.
    pub fn from_parts(
        n_rows: usize,
        data: Vec<f64>,
        params: Vec<Vec<f64>>,
        nt: usize,
        dt: f64,
        t0: f64,
    ) -> Result<Self> {
        if params.is_empty() || nt == 0 || n_rows == 0 {
            return Err(Error::invalid("snapshot matrix needs at least one column"));
        }
        let p = params[0].len();
        if params.iter().any(|q| q.len() != p) {
            return Err(Error::invalid("parameter vectors differ in length"));
        }
        let expected = n_rows * nt * params.len();
        if data.len() != expected {
            return Err(Error::Dimension {
                what: "snapshot data length",
                expected,
                got: data.len(),
            });
        }
        Ok(Self {
            n_rows,
            data,
            params,
            nt,
            dt,
            t0,
        })
    }

    pub fn n_rows(&self) -> usize {
        self.n_rows
    }

    pub fn n_cols(&self) -> usize {
        self.params.len() * self.nt
    }

    pub fn nt(&self) -> usize {
        self.nt
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    pub fn t0(&self) -> f64 {
        self.t0
    }

    pub fn param_dim(&self) -> usize {
        self.params[0].len()
    }

    /// Parameter vector of each trajectory, in column order.
    pub fn params(&self) -> &[Vec<f64>] {
        &self.params
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn column(&self, j: usize) -> &[f64] {
        &self.data[j * self.n_rows..(j + 1) * self.n_rows]
    }

    pub fn column_meta(&self, j: usize) -> ColumnMeta {
        let step = j % self.nt + 1;
        ColumnMeta {
            param: self.params[j / self.nt].clone(),
            step,
            time: self.t0 + step as f64 * self.dt,
        }
    }

    pub fn columns_meta(&self) -> Vec<ColumnMeta> {
        (0..self.n_cols()).map(|j| self.column_meta(j)).collect()
    }

    /// Column indices belonging to trajectory `i`.
    pub fn trajectory_columns(&self, i: usize) -> std::ops::Range<usize> {
        i * self.nt..(i + 1) * self.nt
    }

    /// The columns of trajectory `i` as an `nt x N` row-major tensor.
    pub fn trajectory_rows(&self, i: usize) -> Tensor {
        let r = self.trajectory_columns(i);
        let data = self.data[r.start * self.n_rows..r.end * self.n_rows].to_vec();
        Tensor::matrix(self.nt, self.n_rows, data).expect("sized")
    }

    /// All snapshots as an `M x N` row-major tensor.
    pub fn to_rows(&self) -> Tensor {
        Tensor::matrix(self.n_cols(), self.n_rows, self.data.clone()).expect("sized")
    }

    /// Gather the given columns as a `len x N` row-major tensor.
    pub fn gather_rows(&self, cols: &[usize]) -> Tensor {
        let mut data = Vec::with_capacity(cols.len() * self.n_rows);
        for &j in cols {
            data.extend_from_slice(self.column(j));
        }
        Tensor::matrix(cols.len(), self.n_rows, data).expect("sized")
    }

    /// Same layout and metadata, new column data (e.g. scaled or projected).
    pub fn with_data(&self, n_rows: usize, data: Vec<f64>) -> Result<Self> {
        Self::from_parts(n_rows, data, self.params.clone(), self.nt, self.dt, self.t0)
    }

    /// Trajectories whose parameter is in `wanted`, in the order of `wanted`.
    pub fn select(&self, wanted: &[Vec<f64>]) -> Result<Self> {
        let mut data = Vec::new();
        for w in wanted {
            let i = self
                .params
                .iter()
                .position(|p| p == w)
                .ok_or_else(|| Error::invalid(format!("parameter {w:?} not in snapshot matrix")))?;
            let r = self.trajectory_columns(i);
            data.extend_from_slice(&self.data[r.start * self.n_rows..r.end * self.n_rows]);
        }
        Self::from_parts(self.n_rows, data, wanted.to_vec(), self.nt, self.dt, self.t0)
    }

    /// Append the trajectories of `other`.
    pub fn concat(&self, other: &Self) -> Result<Self> {
        if other.n_rows != self.n_rows || other.nt != self.nt {
            return Err(Error::invalid("cannot concatenate snapshot matrices of different shape"));
        }
        let mut data = self.data.clone();
        data.extend_from_slice(&other.data);
        let mut params = self.params.clone();
        params.extend(other.params.iter().cloned());
        Self::from_parts(self.n_rows, data, params, self.nt, self.dt, self.t0)
    }

    pub fn min_max(&self) -> (f64, f64) {
        self.data
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)))
    }
}

/// Stack trajectories column-wise. All must share the state length and the
/// number of steps.
pub fn assemble(trajectories: &[TrajectoryData], dt: f64, t0: f64) -> Result<SnapshotMatrix> {
    let first = trajectories
        .first()
        .ok_or_else(|| Error::invalid("no trajectories to assemble"))?;
    let nt = first.states.len();
    let n = first.states.first().map_or(0, Vec::len);
    let mut data = Vec::with_capacity(n * nt * trajectories.len());
    for t in trajectories {
        if t.states.len() != nt {
            return Err(Error::Dimension {
                what: "trajectory length",
                expected: nt,
                got: t.states.len(),
            });
        }
        for s in &t.states {
            if s.len() != n {
                return Err(Error::Dimension {
                    what: "state length",
                    expected: n,
                    got: s.len(),
                });
            }
            data.extend_from_slice(s);
        }
    }
    let params = trajectories.iter().map(|t| t.param.clone()).collect();
    SnapshotMatrix::from_parts(n, data, params, nt, dt, t0)
}

/// Global min-max scaling to `[0, 1]` with statistics from training data.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Normalizer {
    pub x_min: f64,
    pub x_max: f64,
}

impl Normalizer {
    pub fn fit(x: &SnapshotMatrix) -> Result<Self> {
        let (x_min, x_max) = x.min_max();
        Self::new(x_min, x_max)
    }

    pub fn new(x_min: f64, x_max: f64) -> Result<Self> {
        if !(x_max > x_min) {
            return Err(Error::invalid(format!(
                "degenerate normalization range [{x_min}, {x_max}]"
            )));
        }
        Ok(Self { x_min, x_max })
    }

    /// Identity scaling, for data that is already normalized.
    pub fn identity() -> Self {
        Self {
            x_min: 0.0,
            x_max: 1.0,
        }
    }

    pub fn scale(&self) -> f64 {
        self.x_max - self.x_min
    }

    pub fn normalize_value(&self, v: f64) -> f64 {
        (v - self.x_min) / self.scale()
    }

    pub fn denormalize_value(&self, v: f64) -> f64 {
        v * self.scale() + self.x_min
    }

    pub fn normalize_slice(&self, x: &mut [f64]) {
        x.iter_mut().for_each(|v| *v = self.normalize_value(*v));
    }

    pub fn denormalize_slice(&self, x: &mut [f64]) {
        x.iter_mut().for_each(|v| *v = self.denormalize_value(*v));
    }

    pub fn normalize(&self, x: &SnapshotMatrix) -> SnapshotMatrix {
        let mut data = x.data.clone();
        self.normalize_slice(&mut data);
        x.with_data(x.n_rows, data).expect("same shape")
    }

    pub fn denormalize(&self, x: &SnapshotMatrix) -> SnapshotMatrix {
        let mut data = x.data.clone();
        self.denormalize_slice(&mut data);
        x.with_data(x.n_rows, data).expect("same shape")
    }
}

/// Equispaced values over `[lo, hi]` including both endpoints.
pub fn linspace(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    match n {
        0 => Vec::new(),
        1 => vec![lo],
        _ => (0..n)
            .map(|i| {
                if i == n - 1 {
                    hi
                } else {
                    lo + (hi - lo) * i as f64 / (n - 1) as f64
                }
            })
            .collect(),
    }
}

/// The 10 x 8 training grid over the Burgers parameter box, `mu1` outer.
pub fn build_burgers_grid() -> Vec<BurgersParams> {
    let mu1 = linspace(MU1_RANGE.0, MU1_RANGE.1, 10);
    let mu2 = linspace(MU2_RANGE.0, MU2_RANGE.1, 8);
    mu1.iter()
        .flat_map(|&a| mu2.iter().map(move |&b| BurgersParams::new(a, b)))
        .collect()
}

/// The two held-out test parameters.
pub fn burgers_test_params() -> Vec<BurgersParams> {
    vec![BurgersParams::new(4.3, 0.021), BurgersParams::new(5.15, 0.0285)]
}

pub const N_VALID: usize = 8;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub train_params: Vec<BurgersParams>,
    pub valid_params: Vec<BurgersParams>,
    pub test_params: Vec<BurgersParams>,
    pub seed: u64,
}

/// Seeded choice of 8 validation parameters out of the 80-point grid; the
/// rest train. Both lists keep grid order.
pub fn split(grid: &[BurgersParams], seed: u64) -> Result<SplitSpec> {
    if grid.len() <= N_VALID {
        return Err(Error::invalid(format!(
            "grid of {} parameters is too small to split",
            grid.len()
        )));
    }
    let mut idx: Vec<usize> = (0..grid.len()).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut valid: Vec<usize> = idx[..N_VALID].to_vec();
    valid.sort_unstable();
    let train = (0..grid.len()).filter(|i| !valid.contains(i));
    Ok(SplitSpec {
        train_params: train.map(|i| grid[i]).collect(),
        valid_params: valid.iter().map(|&i| grid[i]).collect(),
        test_params: burgers_test_params(),
        seed,
    })
}

/// Snapshot matrices for each split.
#[derive(Clone, Debug)]
pub struct DataSplits {
    pub train: SnapshotMatrix,
    pub valid: SnapshotMatrix,
    pub test: SnapshotMatrix,
}

fn solve_all(params: &[BurgersParams], cfg: &BurgersConfig) -> Result<SnapshotMatrix> {
    let trajs = params
        .iter()
        .map(|&mu| burgers::solve(mu, cfg).map(|t| TrajectoryData::from(&t)))
        .collect::<Result<Vec<_>>>()?;
    assemble(&trajs, cfg.dt, 0.0)
}

/// Run the full-order model for every parameter of a split.
pub fn burgers_splits(spec: &SplitSpec, cfg: &BurgersConfig) -> Result<DataSplits> {
    Ok(DataSplits {
        train: solve_all(&spec.train_params, cfg)?,
        valid: solve_all(&spec.valid_params, cfg)?,
        test: solve_all(&spec.test_params, cfg)?,
    })
}

#[derive(Debug, Serialize, Deserialize)]
struct SnapHeader {
    rows: usize,
    cols: usize,
    dtype: String,
    order: String,
    params: Vec<Vec<f64>>,
    nt: usize,
    dt: f64,
    t0: f64,
}

pub fn encode_snap(x: &SnapshotMatrix) -> Result<Vec<u8>> {
    let header = SnapHeader {
        rows: x.n_rows,
        cols: x.n_cols(),
        dtype: "f64".into(),
        order: "col-major".into(),
        params: x.params.clone(),
        nt: x.nt,
        dt: x.dt,
        t0: x.t0,
    };
    container::encode(SNAPSHOT_MAGIC, &header, &x.data)
}

pub fn decode_snap(bytes: &[u8]) -> Result<SnapshotMatrix> {
    let raw = container::decode(bytes, &[SNAPSHOT_MAGIC])?;
    let h: SnapHeader = raw.header()?;
    if h.order != "col-major" {
        return Err(FormatError::Header(format!("unsupported order {:?}", h.order)).into());
    }
    if h.cols != h.params.len() * h.nt {
        return Err(FormatError::Header(format!(
            "cols {} != {} trajectories x nt {}",
            h.cols,
            h.params.len(),
            h.nt
        ))
        .into());
    }
    let data = raw.payload(h.rows * h.cols)?;
    SnapshotMatrix::from_parts(h.rows, data, h.params, h.nt, h.dt, h.t0)
}

pub fn write_snap(path: &Path, x: &SnapshotMatrix) -> Result<()> {
    std::fs::write(path, encode_snap(x)?)?;
    Ok(())
}

pub fn read_snap(path: &Path) -> Result<SnapshotMatrix> {
    decode_snap(&std::fs::read(path)?)
}
