//! Dense layers and multilayer perceptrons on the tape.

use rand::Rng;

use crate::autodiff::{ParamId, ParamStore, Tape, Var};
use crate::error::Result;
use crate::spectral::SpectralNormState;
use crate::tensor::Tensor;

/// `y = x W + b` with `W` stored as `in_dim x out_dim`.
#[derive(Clone, Debug)]
pub struct Dense {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_dim: usize,
    pub out_dim: usize,
    pub spectral: Option<SpectralNormState>,
}

impl Dense {
    /// Weights and biases drawn uniformly from `[-1/sqrt(in), 1/sqrt(in)]`.
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        spectral_iters: Option<usize>,
        rng: &mut R,
    ) -> Self {
        let bound = 1.0 / (in_dim as f64).sqrt();
        let w: Vec<f64> = (0..in_dim * out_dim)
            .map(|_| rng.gen_range(-bound..=bound))
            .collect();
        let b: Vec<f64> = (0..out_dim).map(|_| rng.gen_range(-bound..=bound)).collect();
        let weight = store.add(
            format!("{name}.weight"),
            Tensor::matrix(in_dim, out_dim, w).expect("sized"),
        );
        let bias = store.add(format!("{name}.bias"), Tensor::row(b));
        let spectral = spectral_iters.map(|iters| {
            let mut st = SpectralNormState::new(in_dim, out_dim, iters, rng);
            st.power_iterate(store.get(weight), iters.max(1));
            st
        });
        Self {
            weight,
            bias,
            in_dim,
            out_dim,
            spectral,
        }
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let mut w = tape.param(store, self.weight);
        if let Some(sn) = &self.spectral {
            w = tape.spectral_norm(w, sn.u(), sn.v())?;
        }
        let b = tape.param(store, self.bias);
        let xw = tape.matmul(x, w)?;
        tape.add(xw, b)
    }

    /// The weight matrix actually used in the forward pass.
    pub fn effective_weight(&self, store: &ParamStore) -> Tensor {
        let w = store.get(self.weight);
        match &self.spectral {
            Some(sn) => {
                let s = sn.sigma(w);
                w.map(|x| x / s)
            }
            None => w.clone(),
        }
    }

    pub fn refresh_spectral(&mut self, store: &ParamStore, iters: usize) {
        if let Some(sn) = &mut self.spectral {
            sn.power_iterate(store.get(self.weight), iters);
        }
    }
}

/// Dense layers with GeLU between them and a linear output.
#[derive(Clone, Debug)]
pub struct Mlp {
    pub layers: Vec<Dense>,
}

impl Mlp {
    /// `widths` lists every layer width including input and output.
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        widths: &[usize],
        spectral_iters: Option<usize>,
        rng: &mut R,
    ) -> Self {
        assert!(widths.len() >= 2, "an MLP needs at least input and output widths");
        let layers = widths
            .windows(2)
            .enumerate()
            .map(|(i, w)| Dense::new(store, &format!("{name}.{i}"), w[0], w[1], spectral_iters, rng))
            .collect();
        Self { layers }
    }

    pub fn in_dim(&self) -> usize {
        self.layers[0].in_dim
    }

    pub fn out_dim(&self) -> usize {
        self.layers.last().expect("non-empty").out_dim
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let last = self.layers.len() - 1;
        let mut h = x;
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.forward(tape, store, h)?;
            if i < last {
                h = tape.gelu(h);
            }
        }
        Ok(h)
    }

    pub fn refresh_spectral(&mut self, store: &ParamStore, iters: usize) {
        for l in &mut self.layers {
            l.refresh_spectral(store, iters);
        }
    }

    pub fn spectral_states(&self) -> impl Iterator<Item = &SpectralNormState> {
        self.layers.iter().filter_map(|l| l.spectral.as_ref())
    }

    pub fn spectral_states_mut(&mut self) -> impl Iterator<Item = &mut SpectralNormState> {
        self.layers.iter_mut().filter_map(|l| l.spectral.as_mut())
    }
}
