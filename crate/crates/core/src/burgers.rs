//! Parametric 1-D inviscid Burgers full-order model.
//!
//! `x_t + (x^2/2)_y = s * exp(mu2 * y)` on `[0, L]`, inflow `x(0, t) = mu1`,
//! `x(y, 0) = 1`. First-order Godunov finite volumes in space, implicit Euler
//! in time, each step solved by damped Newton on a tridiagonal Jacobian.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const MU1_RANGE: (f64, f64) = (4.25, 5.5);
pub const MU2_RANGE: (f64, f64) = (0.015, 0.03);

const MAX_HALVINGS: usize = 10;
/// Newton iteration count above which a step is logged as slow.
pub const NEWTON_ITER_WARN: usize = 15;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BurgersConfig {
    pub n_cells: usize,
    pub domain_length: f64,
    pub dt: f64,
    pub t_final: f64,
    pub source_scale: f64,
    pub initial_value: f64,
    pub newton_tol: f64,
    pub newton_max_iters: usize,
}

impl Default for BurgersConfig {
    fn default() -> Self {
        Self {
            n_cells: 256,
            domain_length: 100.0,
            dt: 0.07,
            t_final: 35.0,
            source_scale: 0.02,
            initial_value: 1.0,
            newton_tol: 1e-10,
            newton_max_iters: 50,
        }
    }
}

impl BurgersConfig {
    pub fn dx(&self) -> f64 {
        self.domain_length / self.n_cells as f64
    }

    pub fn n_steps(&self) -> usize {
        (self.t_final / self.dt).round() as usize
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_cells == 0 {
            return Err(Error::invalid("n_cells must be positive"));
        }
        if !(self.dt > 0.0 && self.domain_length > 0.0 && self.t_final > 0.0) {
            return Err(Error::invalid("dt, domain_length and t_final must be positive"));
        }
        let n = self.n_steps();
        if n == 0 || (self.dt * n as f64 - self.t_final).abs() > 1e-12 {
            return Err(Error::invalid(format!(
                "t_final {} is not an integer multiple of dt {}",
                self.t_final, self.dt
            )));
        }
        if !(self.newton_tol > 0.0) || self.newton_max_iters == 0 {
            return Err(Error::invalid("newton_tol and newton_max_iters must be positive"));
        }
        Ok(())
    }

    /// Cell-centre coordinates `(i + 1/2) dx`.
    pub fn cell_centers(&self) -> Vec<f64> {
        let dx = self.dx();
        (0..self.n_cells).map(|i| (i as f64 + 0.5) * dx).collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BurgersParams {
    pub mu1: f64,
    pub mu2: f64,
}

impl BurgersParams {
    pub fn new(mu1: f64, mu2: f64) -> Self {
        Self { mu1, mu2 }
    }

    pub fn to_vec(self) -> Vec<f64> {
        vec![self.mu1, self.mu2]
    }

    pub fn in_domain(self) -> bool {
        (MU1_RANGE.0..=MU1_RANGE.1).contains(&self.mu1)
            && (MU2_RANGE.0..=MU2_RANGE.1).contains(&self.mu2)
    }
}

/// Solution states after each implicit step; the initial condition is not
/// stored.
#[derive(Clone, Debug)]
pub struct Trajectory {
    pub parameter: BurgersParams,
    /// `states[k]` is the solution after `k + 1` steps, at `times[k]`.
    pub states: Vec<Vec<f64>>,
    pub times: Vec<f64>,
    pub dt: f64,
    pub t0: f64,
    /// Newton iterations used by each step.
    pub newton_iters: Vec<usize>,
}

impl Trajectory {
    pub fn n_cells(&self) -> usize {
        self.states.first().map_or(0, Vec::len)
    }

    pub fn n_steps(&self) -> usize {
        self.states.len()
    }
}

fn flux(u: f64) -> f64 {
    0.5 * u * u
}

/// Exact Godunov flux for `f(u) = u^2 / 2`.
pub fn godunov_flux(u_left: f64, u_right: f64) -> f64 {
    if u_left <= u_right {
        if u_left > 0.0 {
            flux(u_left)
        } else if u_right < 0.0 {
            flux(u_right)
        } else {
            0.0
        }
    } else {
        flux(u_left).max(flux(u_right))
    }
}

/// Partial derivatives `(dG/du_left, dG/du_right)` of [`godunov_flux`],
/// taking 0 at the sonic kink.
pub fn godunov_flux_derivative(u_left: f64, u_right: f64) -> (f64, f64) {
    if u_left <= u_right {
        if u_left > 0.0 {
            (u_left, 0.0)
        } else if u_right < 0.0 {
            (0.0, u_right)
        } else {
            (0.0, 0.0)
        }
    } else if flux(u_left) >= flux(u_right) {
        (u_left, 0.0)
    } else {
        (0.0, u_right)
    }
}

struct Stencil<'a> {
    cfg: &'a BurgersConfig,
    inflow: f64,
    source: Vec<f64>,
}

impl<'a> Stencil<'a> {
    fn new(cfg: &'a BurgersConfig, mu: BurgersParams) -> Self {
        let source = cfg
            .cell_centers()
            .into_iter()
            .map(|y| cfg.source_scale * (mu.mu2 * y).exp())
            .collect();
        Self {
            cfg,
            inflow: mu.mu1,
            source,
        }
    }

    /// Interface fluxes `F_{i-1/2}` for `i = 0..=N`, with the inflow ghost on
    /// the left and a zero-gradient ghost on the right.
    fn fluxes(&self, x: &[f64]) -> Vec<f64> {
        let n = x.len();
        let mut f = Vec::with_capacity(n + 1);
        f.push(godunov_flux(self.inflow, x[0]));
        for i in 0..n - 1 {
            f.push(godunov_flux(x[i], x[i + 1]));
        }
        f.push(godunov_flux(x[n - 1], x[n - 1]));
        f
    }

    fn residual(&self, x_next: &[f64], x_prev: &[f64]) -> Vec<f64> {
        let (dt, dx) = (self.cfg.dt, self.cfg.dx());
        let f = self.fluxes(x_next);
        (0..x_next.len())
            .map(|i| (x_next[i] - x_prev[i]) / dt + (f[i + 1] - f[i]) / dx - self.source[i])
            .collect()
    }

    /// Tridiagonal Jacobian of the residual as `(lower, diag, upper)`;
    /// `lower[0]` and `upper[n-1]` are unused.
    fn jacobian(&self, x: &[f64]) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
        let n = x.len();
        let (dt, dx) = (self.cfg.dt, self.cfg.dx());
        let mut lower = vec![0.0; n];
        let mut diag = vec![1.0 / dt; n];
        let mut upper = vec![0.0; n];
        for i in 0..n {
            // F_{i-1/2}
            let left = if i == 0 { self.inflow } else { x[i - 1] };
            let (da, db) = godunov_flux_derivative(left, x[i]);
            diag[i] -= db / dx;
            if i > 0 {
                lower[i] = -da / dx;
            }
            // F_{i+1/2}
            if i + 1 < n {
                let (da, db) = godunov_flux_derivative(x[i], x[i + 1]);
                diag[i] += da / dx;
                upper[i] = db / dx;
            } else {
                diag[i] += x[i] / dx;
            }
        }
        (lower, diag, upper)
    }
}

/// Implicit-Euler residual of one step; zero when `x_next` solves the step.
pub fn implicit_residual(
    x_next: &[f64],
    x_prev: &[f64],
    mu: BurgersParams,
    cfg: &BurgersConfig,
) -> Result<Vec<f64>> {
    check_len(x_next, cfg)?;
    check_len(x_prev, cfg)?;
    Ok(Stencil::new(cfg, mu).residual(x_next, x_prev))
}

fn check_len(x: &[f64], cfg: &BurgersConfig) -> Result<()> {
    if x.len() != cfg.n_cells {
        return Err(Error::Dimension {
            what: "Burgers state length",
            expected: cfg.n_cells,
            got: x.len(),
        });
    }
    Ok(())
}

fn inf_norm(r: &[f64]) -> f64 {
    r.iter().fold(0.0, |m, v| m.max(v.abs()))
}

/// Thomas algorithm; `rhs` is overwritten with the solution.
fn solve_tridiagonal(lower: &[f64], diag: &[f64], upper: &[f64], rhs: &mut [f64]) {
    let n = diag.len();
    let mut c = vec![0.0; n];
    let mut beta = diag[0];
    c[0] = upper[0] / beta;
    rhs[0] /= beta;
    for i in 1..n {
        beta = diag[i] - lower[i] * c[i - 1];
        c[i] = upper[i] / beta;
        rhs[i] = (rhs[i] - lower[i] * rhs[i - 1]) / beta;
    }
    for i in (0..n - 1).rev() {
        rhs[i] -= c[i] * rhs[i + 1];
    }
}

fn newton(stencil: &Stencil, x_prev: &[f64], step_index: usize) -> Result<(Vec<f64>, usize)> {
    let cfg = stencil.cfg;
    let mut x = x_prev.to_vec();
    let mut r = stencil.residual(&x, x_prev);
    let mut norm = inf_norm(&r);
    let mut iters = 0;
    while norm >= cfg.newton_tol {
        if iters == cfg.newton_max_iters || !norm.is_finite() {
            return Err(Error::NewtonDivergence {
                step: step_index,
                iterations: iters,
                residual: norm,
            });
        }
        iters += 1;
        let (lo, di, up) = stencil.jacobian(&x);
        let mut delta: Vec<f64> = r.iter().map(|v| -v).collect();
        solve_tridiagonal(&lo, &di, &up, &mut delta);

        let mut lambda = 1.0;
        let mut trial: Vec<f64>;
        let mut trial_r: Vec<f64>;
        let mut halvings = 0;
        loop {
            trial = x.iter().zip(&delta).map(|(a, d)| a + lambda * d).collect();
            trial_r = stencil.residual(&trial, x_prev);
            let tn = inf_norm(&trial_r);
            if tn < norm || halvings == MAX_HALVINGS {
                norm = tn;
                break;
            }
            lambda *= 0.5;
            halvings += 1;
        }
        x = trial;
        r = trial_r;
    }
    Ok((x, iters))
}

/// One implicit-Euler step from `x_prev`. Returns the new state and the
/// number of Newton iterations used.
pub fn step(x_prev: &[f64], mu: BurgersParams, cfg: &BurgersConfig) -> Result<(Vec<f64>, usize)> {
    check_len(x_prev, cfg)?;
    newton(&Stencil::new(cfg, mu), x_prev, 0)
}

/// Full trajectory from the uniform initial state over `[0, t_final]`.
pub fn solve(mu: BurgersParams, cfg: &BurgersConfig) -> Result<Trajectory> {
    cfg.validate()?;
    if !mu.in_domain() {
        log::warn!(
            "parameter ({}, {}) lies outside the training domain",
            mu.mu1,
            mu.mu2
        );
    }
    let stencil = Stencil::new(cfg, mu);
    let nt = cfg.n_steps();
    let mut x = vec![cfg.initial_value; cfg.n_cells];
    let mut states = Vec::with_capacity(nt);
    let mut newton_iters = Vec::with_capacity(nt);
    for k in 0..nt {
        let (next, iters) = newton(&stencil, &x, k + 1)?;
        if iters > NEWTON_ITER_WARN {
            log::warn!("step {} needed {iters} Newton iterations", k + 1);
        }
        newton_iters.push(iters);
        states.push(next.clone());
        x = next;
    }
    Ok(Trajectory {
        parameter: mu,
        times: (1..=nt).map(|k| k as f64 * cfg.dt).collect(),
        states,
        dt: cfg.dt,
        t0: 0.0,
        newton_iters,
    })
}
