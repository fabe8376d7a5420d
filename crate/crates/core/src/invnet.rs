//! Affine coupling layers and the invertible network built from them.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{ParamId, ParamStore, Tape, Var};
use crate::error::{Error, Result};
use crate::nn::Mlp;
use crate::spectral::SpectralNormState;
use crate::tensor::Tensor;

/// `exp(arctan(s))`, strictly inside `(e^{-pi/2}, e^{pi/2})`.
pub fn clamped_exp(s: f64) -> f64 {
    s.atan().exp()
}

/// Architecture of an [`InvertibleNet`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InvNetConfig {
    pub input_dim: usize,
    #[serde(default = "default_layers")]
    pub n_layers: usize,
    #[serde(default = "default_hidden")]
    pub hidden: usize,
    #[serde(default = "default_true")]
    pub swap_halves: bool,
    /// Power iterations per training step; `None` disables spectral
    /// normalization.
    #[serde(default)]
    pub spectral_iters: Option<usize>,
}

fn default_layers() -> usize {
    5
}
fn default_hidden() -> usize {
    512
}
fn default_true() -> bool {
    true
}

impl InvNetConfig {
    pub fn new(input_dim: usize) -> Self {
        Self {
            input_dim,
            n_layers: 5,
            hidden: 512,
            swap_halves: true,
            spectral_iters: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.input_dim % 2 != 0 {
            return Err(Error::invalid(format!(
                "invertible net input dimension must be even and positive, got {}",
                self.input_dim
            )));
        }
        if self.n_layers == 0 || self.hidden == 0 {
            return Err(Error::invalid("invertible net needs at least one layer and hidden unit"));
        }
        Ok(())
    }
}

/// One coupling block with scale nets `s1, s2` and shift nets `t1, t2`.
#[derive(Clone, Debug)]
pub struct CouplingLayer {
    pub s1: Mlp,
    pub s2: Mlp,
    pub t1: Mlp,
    pub t2: Mlp,
    pub half_dim: usize,
}

/// Multiplicative factors applied by one layer for one input.
#[derive(Clone, Debug)]
pub struct LayerScales {
    /// Factor on the first half, `exp(atan(s2(x2)))`.
    pub first: Tensor,
    /// Factor on the second half, `exp(atan(s1(y1)))`.
    pub second: Tensor,
}

impl CouplingLayer {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        dim: usize,
        hidden: usize,
        spectral_iters: Option<usize>,
        rng: &mut R,
    ) -> Result<Self> {
        if dim == 0 || dim % 2 != 0 {
            return Err(Error::invalid(format!("coupling layer needs an even dimension, got {dim}")));
        }
        let h = dim / 2;
        let widths = [h, hidden, h];
        let mut sub = |s: &str| Mlp::new(store, &format!("{name}.{s}"), &widths, spectral_iters, rng);
        let s1 = sub("s1");
        let s2 = sub("s2");
        let t1 = sub("t1");
        let t2 = sub("t2");
        Ok(Self {
            s1,
            s2,
            t1,
            t2,
            half_dim: h,
        })
    }

    pub fn subnets(&self) -> [&Mlp; 4] {
        [&self.s1, &self.s2, &self.t1, &self.t2]
    }

    fn subnets_mut(&mut self) -> [&mut Mlp; 4] {
        [&mut self.s1, &mut self.s2, &mut self.t1, &mut self.t2]
    }

    fn split(&self, tape: &mut Tape, x: Var) -> Result<(Var, Var)> {
        let n = tape.value(x).cols();
        if n != 2 * self.half_dim {
            return Err(Error::Dimension {
                what: "coupling layer input width",
                expected: 2 * self.half_dim,
                got: n,
            });
        }
        let a = tape.slice_cols(x, 0, self.half_dim)?;
        let b = tape.slice_cols(x, self.half_dim, n)?;
        Ok((a, b))
    }

    fn scale(&self, tape: &mut Tape, store: &ParamStore, net: &Mlp, x: Var, sign: f64) -> Result<Var> {
        let s = net.forward(tape, store, x)?;
        let a = tape.arctan(s);
        let a = if sign < 0.0 { tape.scale(a, -1.0) } else { a };
        Ok(tape.exp(a))
    }

    /// Rows of `x` are samples.
    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let (x1, x2) = self.split(tape, x)?;
        let e2 = self.scale(tape, store, &self.s2, x2, 1.0)?;
        let t2 = self.t2.forward(tape, store, x2)?;
        let y1 = tape.hadamard(x1, e2)?;
        let y1 = tape.add(y1, t2)?;
        let e1 = self.scale(tape, store, &self.s1, y1, 1.0)?;
        let t1 = self.t1.forward(tape, store, y1)?;
        let y2 = tape.hadamard(x2, e1)?;
        let y2 = tape.add(y2, t1)?;
        tape.concat_cols(y1, y2)
    }

    /// Exact inverse of [`forward`](Self::forward). The second half is
    /// recovered first since the first half depends on it.
    pub fn inverse(&self, tape: &mut Tape, store: &ParamStore, y: Var) -> Result<Var> {
        let (y1, y2) = self.split(tape, y)?;
        let t1 = self.t1.forward(tape, store, y1)?;
        let e1 = self.scale(tape, store, &self.s1, y1, -1.0)?;
        let x2 = tape.sub(y2, t1)?;
        let x2 = tape.hadamard(x2, e1)?;
        let t2 = self.t2.forward(tape, store, x2)?;
        let e2 = self.scale(tape, store, &self.s2, x2, -1.0)?;
        let x1 = tape.sub(y1, t2)?;
        let x1 = tape.hadamard(x1, e2)?;
        tape.concat_cols(x1, x2)
    }

    /// Forward pass that also reports the scale factors.
    pub fn forward_with_scales(&self, store: &ParamStore, x: &Tensor) -> Result<(Tensor, LayerScales)> {
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let (x1, x2) = self.split(&mut tape, xv)?;
        let e2 = self.scale(&mut tape, store, &self.s2, x2, 1.0)?;
        let t2 = self.t2.forward(&mut tape, store, x2)?;
        let y1 = tape.hadamard(x1, e2)?;
        let y1 = tape.add(y1, t2)?;
        let e1 = self.scale(&mut tape, store, &self.s1, y1, 1.0)?;
        let t1 = self.t1.forward(&mut tape, store, y1)?;
        let y2 = tape.hadamard(x2, e1)?;
        let y2 = tape.add(y2, t1)?;
        let y = tape.concat_cols(y1, y2)?;
        let scales = LayerScales {
            first: tape.value(e2).clone(),
            second: tape.value(e1).clone(),
        };
        Ok((tape.value(y).clone(), scales))
    }
}

/// A stack of coupling layers with the halves swapped between consecutive
/// layers.
#[derive(Clone, Debug)]
pub struct InvertibleNet {
    pub config: InvNetConfig,
    pub layers: Vec<CouplingLayer>,
}

impl InvertibleNet {
    pub fn new<R: Rng>(store: &mut ParamStore, name: &str, config: InvNetConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let layers = (0..config.n_layers)
            .map(|l| {
                CouplingLayer::new(
                    store,
                    &format!("{name}.layer{l}"),
                    config.input_dim,
                    config.hidden,
                    config.spectral_iters,
                    rng,
                )
            })
            .collect::<Result<_>>()?;
        Ok(Self { config, layers })
    }

    pub fn input_dim(&self) -> usize {
        self.config.input_dim
    }

    fn swap(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let h = self.config.input_dim / 2;
        let a = tape.slice_cols(x, 0, h)?;
        let b = tape.slice_cols(x, h, 2 * h)?;
        tape.concat_cols(b, a)
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let last = self.layers.len() - 1;
        let mut h = x;
        for (l, layer) in self.layers.iter().enumerate() {
            h = layer.forward(tape, store, h)?;
            if self.config.swap_halves && l < last {
                h = self.swap(tape, h)?;
            }
        }
        Ok(h)
    }

    pub fn inverse(&self, tape: &mut Tape, store: &ParamStore, y: Var) -> Result<Var> {
        let last = self.layers.len() - 1;
        let mut h = y;
        for (l, layer) in self.layers.iter().enumerate().rev() {
            if self.config.swap_halves && l < last {
                h = self.swap(tape, h)?;
            }
            h = layer.inverse(tape, store, h)?;
        }
        Ok(h)
    }

    /// Forward pass outside of training; rows of `x` are samples.
    pub fn forward_eval(&self, store: &ParamStore, x: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let v = tape.constant(x.clone());
        let y = self.forward(&mut tape, store, v)?;
        Ok(tape.value(y).clone())
    }

    pub fn inverse_eval(&self, store: &ParamStore, y: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let v = tape.constant(y.clone());
        let x = self.inverse(&mut tape, store, v)?;
        Ok(tape.value(x).clone())
    }

    /// Per-layer scale factors along the forward pass of `x`.
    pub fn scale_factors(&self, store: &ParamStore, x: &Tensor) -> Result<Vec<LayerScales>> {
        let h = self.config.input_dim / 2;
        let last = self.layers.len() - 1;
        let mut cur = x.clone();
        let mut out = Vec::with_capacity(self.layers.len());
        for (l, layer) in self.layers.iter().enumerate() {
            let (y, s) = layer.forward_with_scales(store, &cur)?;
            out.push(s);
            cur = if self.config.swap_halves && l < last {
                y.slice_cols(h, 2 * h).concat_cols(&y.slice_cols(0, h))
            } else {
                y
            };
        }
        Ok(out)
    }

    /// Parameter ids in checkpoint order: layer-major, then `s1, s2, t1, t2`,
    /// then weight before bias for each dense layer.
    pub fn param_ids(&self) -> Vec<ParamId> {
        self.layers
            .iter()
            .flat_map(|l| l.subnets())
            .flat_map(|m| m.layers.iter())
            .flat_map(|d| [d.weight, d.bias])
            .collect()
    }

    pub fn num_params(&self, store: &ParamStore) -> usize {
        self.param_ids().iter().map(|&id| store.get(id).len()).sum()
    }

    pub fn refresh_spectral(&mut self, store: &ParamStore, iters: usize) {
        for layer in &mut self.layers {
            for net in layer.subnets_mut() {
                net.refresh_spectral(store, iters);
            }
        }
    }

    /// Power-iteration states in checkpoint order.
    pub fn spectral_states(&self) -> Vec<&SpectralNormState> {
        self.layers
            .iter()
            .flat_map(|l| l.subnets())
            .flat_map(|m| m.spectral_states())
            .collect()
    }

    pub fn spectral_states_mut(&mut self) -> Vec<&mut SpectralNormState> {
        self.layers
            .iter_mut()
            .flat_map(|l| l.subnets_mut())
            .flat_map(|m| m.spectral_states_mut())
            .collect()
    }
}
