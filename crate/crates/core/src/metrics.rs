//! Trajectory-level relative errors averaged over test parameters.

use serde::{Deserialize, Serialize};

use crate::dataset::SnapshotMatrix;
use crate::error::{Error, Result};

/// `sqrt(sum_k |x_k - y_k|^2 / sum_k |x_k|^2)` for one trajectory, given as
/// matching flat buffers.
pub fn trajectory_error(x: &[f64], approx: &[f64]) -> Result<f64> {
    if x.len() != approx.len() {
        return Err(Error::Dimension {
            what: "approximation length",
            expected: x.len(),
            got: approx.len(),
        });
    }
    let den: f64 = x.iter().map(|v| v * v).sum();
    if den == 0.0 {
        return Err(Error::invalid("relative error of a zero-norm trajectory"));
    }
    let num: f64 = x.iter().zip(approx).map(|(a, b)| (a - b) * (a - b)).sum();
    Ok((num / den).sqrt())
}

/// Relative error per test trajectory and their mean.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ErrorReport {
    pub per_parameter: Vec<(Vec<f64>, f64)>,
    pub mean: f64,
}

impl ErrorReport {
    fn from_entries(per_parameter: Vec<(Vec<f64>, f64)>) -> Result<Self> {
        if per_parameter.is_empty() {
            return Err(Error::invalid("no test trajectories"));
        }
        let mean = per_parameter.iter().map(|(_, e)| e).sum::<f64>() / per_parameter.len() as f64;
        Ok(Self { per_parameter, mean })
    }
}

/// Compare every trajectory of `x_test` against `approx`, which must have the
/// same layout. Both are in physical units.
pub fn relative_error(x_test: &SnapshotMatrix, approx: &SnapshotMatrix) -> Result<ErrorReport> {
    if approx.n_rows() != x_test.n_rows() || approx.n_cols() != x_test.n_cols() {
        return Err(Error::Dimension {
            what: "approximation columns",
            expected: x_test.n_cols() * x_test.n_rows(),
            got: approx.n_cols() * approx.n_rows(),
        });
    }
    let n = x_test.n_rows();
    let entries = (0..x_test.params().len())
        .map(|i| {
            let r = x_test.trajectory_columns(i);
            let span = r.start * n..r.end * n;
            let e = trajectory_error(&x_test.data()[span.clone()], &approx.data()[span])?;
            Ok((x_test.params()[i].clone(), e))
        })
        .collect::<Result<Vec<_>>>()?;
    ErrorReport::from_entries(entries)
}

/// Mean projection error of an encode/decode round trip.
pub fn projection_error<F>(x_test: &SnapshotMatrix, reconstruct: F) -> Result<ErrorReport>
where
    F: FnOnce(&SnapshotMatrix) -> Result<SnapshotMatrix>,
{
    let xr = reconstruct(x_test)?;
    relative_error(x_test, &xr)
}

/// Mean reduction error of a ROM. `infer` maps a parameter and the times of
/// its snapshots to the predicted trajectory, row-major `nt x N`.
pub fn reduction_error<F>(x_test: &SnapshotMatrix, mut infer: F) -> Result<ErrorReport>
where
    F: FnMut(&[f64], &[f64]) -> Result<Vec<f64>>,
{
    let n = x_test.n_rows();
    let times: Vec<f64> = (0..x_test.nt()).map(|k| x_test.column_meta(k).time).collect();
    let entries = (0..x_test.params().len())
        .map(|i| {
            let mu = &x_test.params()[i];
            let pred = infer(mu, &times)?;
            let r = x_test.trajectory_columns(i);
            let e = trajectory_error(&x_test.data()[r.start * n..r.end * n], &pred)?;
            Ok((mu.clone(), e))
        })
        .collect::<Result<Vec<_>>>()?;
    ErrorReport::from_entries(entries)
}
