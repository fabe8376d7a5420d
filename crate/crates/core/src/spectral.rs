//! Spectral normalization of weight matrices by power iteration.

use rand::Rng;

use crate::tensor::Tensor;

/// Smallest admissible spectral-norm estimate; zero matrices are divided by
/// this instead of by zero.
pub const SIGMA_FLOOR: f64 = 1e-12;

/// Persisted power-iteration vectors for one weight matrix.
///
/// `u` has the length of the matrix's rows and `v` of its columns, both of
/// unit 2-norm. The estimate is `sigma = u^T W v`.
#[derive(Clone, Debug, PartialEq)]
pub struct SpectralNormState {
    u: Vec<f64>,
    v: Vec<f64>,
    pub n_power_iters: usize,
}

impl SpectralNormState {
    pub fn new<R: Rng>(rows: usize, cols: usize, n_power_iters: usize, rng: &mut R) -> Self {
        let mut u: Vec<f64> = (0..rows).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let mut v: Vec<f64> = (0..cols).map(|_| rng.gen_range(-1.0..1.0)).collect();
        normalize(&mut u);
        normalize(&mut v);
        Self {
            u,
            v,
            n_power_iters,
        }
    }

    /// Rebuild from checkpointed vectors.
    pub fn from_vectors(u: Vec<f64>, v: Vec<f64>, n_power_iters: usize) -> Self {
        Self {
            u,
            v,
            n_power_iters,
        }
    }

    pub fn u(&self) -> &[f64] {
        &self.u
    }

    pub fn v(&self) -> &[f64] {
        &self.v
    }

    /// `iters` rounds of `v <- W^T u / |W^T u|`, `u <- W v / |W v|`.
    pub fn power_iterate(&mut self, w: &Tensor, iters: usize) {
        let (rows, cols) = (w.rows(), w.cols());
        debug_assert_eq!(rows, self.u.len());
        debug_assert_eq!(cols, self.v.len());
        let wd = w.data();
        let mut v_new = vec![0.0; cols];
        let mut u_new = vec![0.0; rows];
        for _ in 0..iters {
            v_new.fill(0.0);
            for (i, &ui) in self.u.iter().enumerate() {
                let row = &wd[i * cols..(i + 1) * cols];
                for (acc, &wij) in v_new.iter_mut().zip(row) {
                    *acc += wij * ui;
                }
            }
            if normalize(&mut v_new) == 0.0 {
                return;
            }
            for (i, out) in u_new.iter_mut().enumerate() {
                let row = &wd[i * cols..(i + 1) * cols];
                *out = row.iter().zip(&v_new).map(|(a, b)| a * b).sum();
            }
            if normalize(&mut u_new) == 0.0 {
                return;
            }
            self.v.copy_from_slice(&v_new);
            self.u.copy_from_slice(&u_new);
        }
    }

    /// Current estimate of the largest singular value of `w`, floored at
    /// [`SIGMA_FLOOR`].
    pub fn sigma(&self, w: &Tensor) -> f64 {
        clamp_sigma(bilinear(w, &self.u, &self.v)).0
    }
}

/// Run the state's power iterations, then return `W / sigma_max(W)`.
pub fn spectral_normalize(w: &Tensor, state: &mut SpectralNormState) -> Tensor {
    state.power_iterate(w, state.n_power_iters);
    let sigma = state.sigma(w);
    w.map(|x| x / sigma)
}

pub(crate) fn bilinear(w: &Tensor, u: &[f64], v: &[f64]) -> f64 {
    let cols = v.len();
    u.iter()
        .enumerate()
        .map(|(i, &ui)| {
            let row = &w.data()[i * cols..(i + 1) * cols];
            ui * row.iter().zip(v).map(|(a, b)| a * b).sum::<f64>()
        })
        .sum()
}

pub(crate) fn clamp_sigma(raw: f64) -> (f64, bool) {
    if raw < SIGMA_FLOOR {
        log::warn!("spectral norm estimate {raw:e} below floor, clamping to {SIGMA_FLOOR:e}");
        (SIGMA_FLOOR, true)
    } else {
        (raw, false)
    }
}

fn normalize(x: &mut [f64]) -> f64 {
    let n = x.iter().map(|v| v * v).sum::<f64>().sqrt();
    if n > 0.0 {
        x.iter_mut().for_each(|v| *v /= n);
    }
    n
}
