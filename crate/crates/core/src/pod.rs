//! Proper orthogonal decomposition by the method of snapshots.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::container::{self, POD_MAGIC};
use crate::dataset::SnapshotMatrix;
use crate::error::{Error, FormatError, Result};
use crate::tensor::gemm;

/// Orthonormal POD modes (column-major `N x r`) and their singular values.
#[derive(Clone, Debug, PartialEq)]
pub struct PodBasis {
    n_rows: usize,
    modes: Vec<f64>,
    singular_values: Vec<f64>,
}

impl PodBasis {
    pub fn from_parts(n_rows: usize, modes: Vec<f64>, singular_values: Vec<f64>) -> Result<Self> {
        if modes.len() != n_rows * singular_values.len() {
            return Err(Error::Dimension {
                what: "POD mode storage",
                expected: n_rows * singular_values.len(),
                got: modes.len(),
            });
        }
        Ok(Self {
            n_rows,
            modes,
            singular_values,
        })
    }

    pub fn n_rows(&self) -> usize {
        self.n_rows
    }

    pub fn rank(&self) -> usize {
        self.singular_values.len()
    }

    pub fn singular_values(&self) -> &[f64] {
        &self.singular_values
    }

    pub fn mode(&self, j: usize) -> &[f64] {
        &self.modes[j * self.n_rows..(j + 1) * self.n_rows]
    }

    /// Column-major mode storage.
    pub fn modes(&self) -> &[f64] {
        &self.modes
    }

    /// Leading `r` modes.
    pub fn truncate(&self, r: usize) -> Result<Self> {
        if r == 0 || r > self.rank() {
            return Err(Error::invalid(format!("cannot truncate rank-{} basis to {r}", self.rank())));
        }
        Self::from_parts(
            self.n_rows,
            self.modes[..r * self.n_rows].to_vec(),
            self.singular_values[..r].to_vec(),
        )
    }

    /// `h = U^T x`.
    pub fn project(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.n_rows {
            return Err(Error::Dimension {
                what: "state length for POD projection",
                expected: self.n_rows,
                got: x.len(),
            });
        }
        Ok((0..self.rank())
            .map(|j| self.mode(j).iter().zip(x).map(|(a, b)| a * b).sum())
            .collect())
    }

    /// `x = U h`.
    pub fn reconstruct(&self, h: &[f64]) -> Result<Vec<f64>> {
        if h.len() != self.rank() {
            return Err(Error::Dimension {
                what: "POD coefficient length",
                expected: self.rank(),
                got: h.len(),
            });
        }
        let mut x = vec![0.0; self.n_rows];
        for (j, &c) in h.iter().enumerate() {
            for (xi, ui) in x.iter_mut().zip(self.mode(j)) {
                *xi += c * ui;
            }
        }
        Ok(x)
    }

    /// Coefficients of every snapshot, as an `r`-row snapshot matrix with the
    /// same metadata.
    pub fn project_matrix(&self, x: &SnapshotMatrix) -> Result<SnapshotMatrix> {
        self.check_rows(x.n_rows())?;
        let (m, n, r) = (x.n_cols(), self.n_rows, self.rank());
        // (M x N) samples times (N x r) modes; modes are stored as r x N row-major.
        let mut out = vec![0.0; m * r];
        gemm(m, n, r, x.data(), false, &self.modes, true, &mut out, 0.0);
        x.with_data(r, out)
    }

    /// Lift `r`-row coefficient columns back to the full space.
    pub fn reconstruct_matrix(&self, h: &SnapshotMatrix) -> Result<SnapshotMatrix> {
        if h.n_rows() != self.rank() {
            return Err(Error::Dimension {
                what: "POD coefficient rows",
                expected: self.rank(),
                got: h.n_rows(),
            });
        }
        let (m, r, n) = (h.n_cols(), self.rank(), self.n_rows);
        let mut out = vec![0.0; m * n];
        gemm(m, r, n, h.data(), false, &self.modes, false, &mut out, 0.0);
        h.with_data(n, out)
    }

    /// Row-major `rows x N` block `H U^T` for coefficient rows `h`.
    pub fn reconstruct_rows(&self, h: &[f64], rows: usize) -> Vec<f64> {
        let mut out = vec![0.0; rows * self.n_rows];
        gemm(rows, self.rank(), self.n_rows, h, false, &self.modes, false, &mut out, 0.0);
        out
    }

    fn check_rows(&self, n: usize) -> Result<()> {
        if n != self.n_rows {
            return Err(Error::Dimension {
                what: "snapshot rows for POD",
                expected: self.n_rows,
                got: n,
            });
        }
        Ok(())
    }
}

/// Truncated POD of `x` with `r` modes.
///
/// Eigen-decomposes whichever Gram matrix is smaller (`X X^T` or `X^T X`) by
/// cyclic Jacobi. Each mode's largest-magnitude entry is made positive.
pub fn compute_pod(x: &SnapshotMatrix, r: usize) -> Result<PodBasis> {
    let (n, m) = (x.n_rows(), x.n_cols());
    if r == 0 || r > n.min(m) {
        return Err(Error::invalid(format!(
            "POD rank {r} outside 1..={}",
            n.min(m)
        )));
    }
    let a = x.data(); // row-major M x N
    let mut modes = vec![0.0; n * r];
    let mut sigma = Vec::with_capacity(r);
    if n <= m {
        let mut gram = vec![0.0; n * n];
        gemm(n, m, n, a, true, a, false, &mut gram, 0.0);
        let (vals, vecs) = symmetric_eigen(&mut gram, n);
        for (j, &(lam, col)) in vals.iter().take(r).enumerate() {
            sigma.push(lam.max(0.0).sqrt());
            for i in 0..n {
                modes[j * n + i] = vecs[i * n + col];
            }
        }
    } else {
        let mut gram = vec![0.0; m * m];
        gemm(m, n, m, a, false, a, true, &mut gram, 0.0);
        let (vals, vecs) = symmetric_eigen(&mut gram, m);
        for (j, &(lam, col)) in vals.iter().take(r).enumerate() {
            let s = lam.max(0.0).sqrt();
            sigma.push(s);
            // u = X v / sigma
            let mode = &mut modes[j * n..(j + 1) * n];
            for (c, snapshot) in a.chunks_exact(n).enumerate() {
                let w = vecs[c * m + col];
                for (u, xv) in mode.iter_mut().zip(snapshot) {
                    *u += w * xv;
                }
            }
            let norm = mode.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm > 0.0 {
                mode.iter_mut().for_each(|v| *v /= norm);
            }
        }
    }
    for j in 0..r {
        let mode = &mut modes[j * n..(j + 1) * n];
        let big = mode
            .iter()
            .copied()
            .fold(0.0f64, |b, v| if v.abs() > b.abs() { v } else { b });
        if big < 0.0 {
            mode.iter_mut().for_each(|v| *v = -*v);
        }
    }
    let smax = sigma[0];
    if let Some((j, s)) = sigma.iter().enumerate().find(|(_, &s)| s < 1e-12 * smax) {
        log::warn!("POD mode {j} has singular value {s:e}, below 1e-12 * sigma_max");
    }
    PodBasis::from_parts(n, modes, sigma)
}

/// Cyclic Jacobi eigendecomposition of a symmetric row-major `n x n` matrix.
///
/// `a` is destroyed. Returns `(eigenvalue, column index)` pairs sorted by
/// decreasing eigenvalue, plus the row-major eigenvector matrix whose columns
/// are the eigenvectors.
pub(crate) fn symmetric_eigen(a: &mut [f64], n: usize) -> (Vec<(f64, usize)>, Vec<f64>) {
    let mut v = vec![0.0; n * n];
    for i in 0..n {
        v[i * n + i] = 1.0;
    }
    let total: f64 = a.iter().map(|x| x * x).sum();
    for _sweep in 0..100 {
        let off: f64 = (0..n)
            .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| a[i * n + j] * a[i * n + j])
            .sum();
        if off <= 1e-30 * total || off == 0.0 {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                let apq = a[p * n + q];
                if apq == 0.0 {
                    continue;
                }
                let app = a[p * n + p];
                let aqq = a[q * n + q];
                let theta = (aqq - app) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let akp = a[k * n + p];
                    let akq = a[k * n + q];
                    a[k * n + p] = c * akp - s * akq;
                    a[k * n + q] = s * akp + c * akq;
                }
                for k in 0..n {
                    let apk = a[p * n + k];
                    let aqk = a[q * n + k];
                    a[p * n + k] = c * apk - s * aqk;
                    a[q * n + k] = s * apk + c * aqk;
                }
                for k in 0..n {
                    let vkp = v[k * n + p];
                    let vkq = v[k * n + q];
                    v[k * n + p] = c * vkp - s * vkq;
                    v[k * n + q] = s * vkp + c * vkq;
                }
            }
        }
    }
    let mut vals: Vec<(f64, usize)> = (0..n).map(|i| (a[i * n + i], i)).collect();
    vals.sort_by(|x, y| y.0.total_cmp(&x.0).then(x.1.cmp(&y.1)));
    (vals, v)
}

#[derive(Debug, Serialize, Deserialize)]
struct PodHeader {
    rows: usize,
    r: usize,
    dtype: String,
    order: String,
}

pub fn encode_basis(b: &PodBasis) -> Result<Vec<u8>> {
    let header = PodHeader {
        rows: b.n_rows,
        r: b.rank(),
        dtype: "f64".into(),
        order: "col-major".into(),
    };
    let mut payload = b.modes.clone();
    payload.extend_from_slice(&b.singular_values);
    container::encode(POD_MAGIC, &header, &payload)
}

pub fn decode_basis(bytes: &[u8]) -> Result<PodBasis> {
    let raw = container::decode(bytes, &[POD_MAGIC])?;
    let h: PodHeader = raw.header()?;
    if h.order != "col-major" {
        return Err(FormatError::Header(format!("unsupported order {:?}", h.order)).into());
    }
    let mut payload = raw.payload(h.rows * h.r + h.r)?;
    let sigma = payload.split_off(h.rows * h.r);
    PodBasis::from_parts(h.rows, payload, sigma)
}

pub fn write_basis(path: &Path, b: &PodBasis) -> Result<()> {
    std::fs::write(path, encode_basis(b)?)?;
    Ok(())
}

pub fn read_basis(path: &Path) -> Result<PodBasis> {
    decode_basis(&std::fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn matrix(n: usize, cols: Vec<Vec<f64>>) -> SnapshotMatrix {
        let m = cols.len();
        SnapshotMatrix::from_parts(n, cols.concat(), vec![vec![0.0]], m, 1.0, 0.0).unwrap()
    }

    fn random_matrix(n: usize, m: usize, seed: u64) -> SnapshotMatrix {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        matrix(
            n,
            (0..m).map(|_| (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect(),
        )
    }

    fn residual_fro(b: &PodBasis, x: &SnapshotMatrix) -> f64 {
        let h = b.project_matrix(x).unwrap();
        let xr = b.reconstruct_matrix(&h).unwrap();
        x.data()
            .iter()
            .zip(xr.data())
            .map(|(a, c)| (a - c).powi(2))
            .sum::<f64>()
            .sqrt()
    }

    #[test]
    fn rank_one_is_exact() {
        let u = [1.0, -2.0, 0.5, 3.0];
        let v = [0.3, 1.0, -0.7, 2.0, 0.1];
        let x = matrix(4, v.iter().map(|&b| u.iter().map(|a| a * b).collect()).collect());
        let b = compute_pod(&x, 1).unwrap();
        assert!(residual_fro(&b, &x) < 1e-12);
    }

    #[test]
    fn full_rank_reconstructs_both_gram_branches() {
        for (n, m) in [(5, 9), (9, 5)] {
            let x = random_matrix(n, m, 3);
            let b = compute_pod(&x, n.min(m)).unwrap();
            assert!(residual_fro(&b, &x) < 1e-10, "{n}x{m}");
            let gram: Vec<f64> = (0..b.rank())
                .flat_map(|i| (0..b.rank()).map(move |j| (i, j)))
                .map(|(i, j)| b.mode(i).iter().zip(b.mode(j)).map(|(p, q)| p * q).sum())
                .collect();
            for i in 0..b.rank() {
                for j in 0..b.rank() {
                    let want = if i == j { 1.0 } else { 0.0 };
                    assert!((gram[i * b.rank() + j] - want).abs() < 1e-10);
                }
            }
        }
    }

    #[test]
    fn singular_values_sorted_and_sign_fixed() {
        let x = random_matrix(6, 9, 11);
        let b = compute_pod(&x, 6).unwrap();
        assert!(b.singular_values().windows(2).all(|w| w[0] >= w[1]));
        for j in 0..6 {
            let big = b.mode(j).iter().copied().fold(0.0f64, |m, v| if v.abs() > m.abs() { v } else { m });
            assert!(big > 0.0);
        }
    }

    #[test]
    fn rank_out_of_range() {
        let x = random_matrix(3, 4, 0);
        assert!(compute_pod(&x, 0).is_err());
        assert!(compute_pod(&x, 4).is_err());
    }

    #[test]
    fn projector_identities() {
        let x = random_matrix(8, 20, 5);
        let b = compute_pod(&x, 3).unwrap();
        // x in span(U)
        let inside = b.reconstruct(&[0.3, -1.2, 2.0]).unwrap();
        let back = b.reconstruct(&b.project(&inside).unwrap()).unwrap();
        for (a, c) in back.iter().zip(&inside) {
            assert!((a - c).abs() < 1e-12);
        }
        // x orthogonal to span(U)
        let full = compute_pod(&x, 8).unwrap();
        let perp = full.mode(5).to_vec();
        assert!(b.project(&perp).unwrap().iter().all(|h| h.abs() < 1e-12));
        // Pythagoras and idempotence on a random vector
        let y: Vec<f64> = (0..8).map(|i| (i as f64 * 1.7).cos()).collect();
        let h = b.project(&y).unwrap();
        let py = b.reconstruct(&h).unwrap();
        let res: f64 = y.iter().zip(&py).map(|(a, c)| (a - c).powi(2)).sum();
        let proj: f64 = py.iter().map(|v| v * v).sum();
        let total: f64 = y.iter().map(|v| v * v).sum();
        assert!((res + proj - total).abs() < 1e-10);
        let h2 = b.project(&py).unwrap();
        for (a, c) in h.iter().zip(&h2) {
            assert!((a - c).abs() < 1e-12);
        }
    }

    #[test]
    fn dimension_mismatch() {
        let x = random_matrix(4, 6, 1);
        let b = compute_pod(&x, 2).unwrap();
        assert!(b.project(&[1.0; 3]).is_err());
        assert!(b.reconstruct(&[1.0; 3]).is_err());
    }

    #[test]
    fn basis_file_roundtrip() {
        let x = random_matrix(5, 7, 2);
        let b = compute_pod(&x, 3).unwrap();
        let bytes = encode_basis(&b).unwrap();
        assert_eq!(&bytes[..8], b"PODBAS01");
        assert_eq!(decode_basis(&bytes).unwrap(), b);
    }
}
