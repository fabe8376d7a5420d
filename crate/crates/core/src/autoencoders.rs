//! Zero-masking invertible autoencoders, the dense baseline, optional POD
//! pre-reduction, and the shared training loop.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{ParamId, ParamStore, Tape, Var};
use crate::container::{self, DENSE_AE_MAGIC, INV_AE_MAGIC};
use crate::dataset::{Normalizer, SnapshotMatrix};
use crate::error::{Error, FormatError, Result};
use crate::invnet::{InvNetConfig, InvertibleNet};
use crate::nn::Mlp;
use crate::optim::{AdamW, AdamWConfig};
use crate::pod::{compute_pod, PodBasis};
use crate::spectral::SpectralNormState;
use crate::tensor::Tensor;

/// Rows per tape when evaluating large matrices.
const EVAL_CHUNK: usize = 1024;

/// Keep the first `latent_dim` of `full_dim` coordinates.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MaskSpec {
    pub full_dim: usize,
    pub latent_dim: usize,
}

impl MaskSpec {
    pub fn new(full_dim: usize, latent_dim: usize) -> Result<Self> {
        if latent_dim > full_dim {
            return Err(Error::invalid(format!(
                "latent dimension {latent_dim} exceeds full dimension {full_dim}"
            )));
        }
        Ok(Self { full_dim, latent_dim })
    }

    /// First `latent_dim` columns.
    pub fn keep(&self, tape: &mut Tape, y: Var) -> Result<Var> {
        tape.slice_cols(y, 0, self.latent_dim)
    }

    /// Append zero columns to an `latent_dim`-wide input.
    pub fn pad(&self, tape: &mut Tape, z: Var) -> Result<Var> {
        let rows = tape.value(z).rows();
        if self.latent_dim == self.full_dim {
            return Ok(z);
        }
        let zeros = tape.constant(Tensor::zeros(&[rows, self.full_dim - self.latent_dim]));
        if self.latent_dim == 0 {
            return Ok(zeros);
        }
        tape.concat_cols(z, zeros)
    }

    /// Zero every column past `latent_dim`.
    pub fn apply(&self, tape: &mut Tape, y: Var) -> Result<Var> {
        if self.latent_dim == self.full_dim {
            return Ok(y);
        }
        let z = self.keep(tape, y)?;
        self.pad(tape, z)
    }

    pub fn apply_tensor(&self, y: &Tensor) -> Tensor {
        let mut out = y.clone();
        let n = self.full_dim;
        for row in out.data_mut().chunks_exact_mut(n) {
            row[self.latent_dim..].fill(0.0);
        }
        out
    }
}

/// Dense encoder/decoder pair with independent parameters.
#[derive(Clone, Debug)]
pub struct BaselineAe {
    pub encoder: Mlp,
    pub decoder: Mlp,
    /// Encoder widths from input to latent; the decoder mirrors them.
    pub widths: Vec<usize>,
}

impl BaselineAe {
    /// Default hidden widths between the input and the latent layer.
    pub const DEFAULT_HIDDEN: [usize; 3] = [256, 128, 64];

    pub fn new<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        full_dim: usize,
        latent_dim: usize,
        hidden: &[usize],
        spectral_iters: Option<usize>,
        rng: &mut R,
    ) -> Result<Self> {
        if latent_dim == 0 || full_dim == 0 || hidden.contains(&0) {
            return Err(Error::invalid("dense autoencoder widths must be positive"));
        }
        let mut widths = vec![full_dim];
        widths.extend_from_slice(hidden);
        widths.push(latent_dim);
        let mirrored: Vec<usize> = widths.iter().rev().copied().collect();
        let encoder = Mlp::new(store, &format!("{name}.encoder"), &widths, spectral_iters, rng);
        let decoder = Mlp::new(store, &format!("{name}.decoder"), &mirrored, spectral_iters, rng);
        Ok(Self {
            encoder,
            decoder,
            widths,
        })
    }
}

#[derive(Clone, Debug)]
pub enum AeArch {
    Inv(InvertibleNet),
    Dense(BaselineAe),
}

/// An autoencoder acting on the model space (normalized data or POD
/// coefficients).
#[derive(Clone, Debug)]
pub struct Autoencoder {
    pub arch: AeArch,
    pub mask: MaskSpec,
}

impl Autoencoder {
    pub fn new_inv<R: Rng>(store: &mut ParamStore, config: InvNetConfig, latent_dim: usize, rng: &mut R) -> Result<Self> {
        let mask = MaskSpec::new(config.input_dim, latent_dim)?;
        let net = InvertibleNet::new(store, "inv", config, rng)?;
        Ok(Self {
            arch: AeArch::Inv(net),
            mask,
        })
    }

    pub fn new_dense<R: Rng>(
        store: &mut ParamStore,
        full_dim: usize,
        latent_dim: usize,
        hidden: &[usize],
        spectral_iters: Option<usize>,
        rng: &mut R,
    ) -> Result<Self> {
        let mask = MaskSpec::new(full_dim, latent_dim)?;
        let ae = BaselineAe::new(store, "dense", full_dim, latent_dim, hidden, spectral_iters, rng)?;
        Ok(Self {
            arch: AeArch::Dense(ae),
            mask,
        })
    }

    pub fn full_dim(&self) -> usize {
        self.mask.full_dim
    }

    pub fn latent_dim(&self) -> usize {
        self.mask.latent_dim
    }

    pub fn is_invertible(&self) -> bool {
        matches!(self.arch, AeArch::Inv(_))
    }

    /// `latent_dim`-wide code.
    pub fn encode(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        match &self.arch {
            AeArch::Inv(net) => {
                let y = net.forward(tape, store, x)?;
                self.mask.keep(tape, y)
            }
            AeArch::Dense(ae) => ae.encoder.forward(tape, store, x),
        }
    }

    /// For the invertible net, the zero-masked `full_dim` output; the dense
    /// encoder has no masked form and returns its code.
    pub fn encode_masked(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        match &self.arch {
            AeArch::Inv(net) => {
                let y = net.forward(tape, store, x)?;
                self.mask.apply(tape, y)
            }
            AeArch::Dense(ae) => ae.encoder.forward(tape, store, x),
        }
    }

    /// Decode a `latent_dim`-wide code.
    pub fn decode(&self, tape: &mut Tape, store: &ParamStore, z: Var) -> Result<Var> {
        match &self.arch {
            AeArch::Inv(net) => {
                let padded = self.mask.pad(tape, z)?;
                net.inverse(tape, store, padded)
            }
            AeArch::Dense(ae) => ae.decoder.forward(tape, store, z),
        }
    }

    pub fn reconstruct(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        match &self.arch {
            AeArch::Inv(net) => {
                let z = self.encode_masked(tape, store, x)?;
                net.inverse(tape, store, z)
            }
            AeArch::Dense(_) => {
                let z = self.encode(tape, store, x)?;
                self.decode(tape, store, z)
            }
        }
    }

    /// Row-wise reconstruction of a `rows x full_dim` tensor.
    pub fn reconstruct_eval(&self, store: &ParamStore, x: &Tensor) -> Result<Tensor> {
        map_rows(x, self.full_dim(), |tape, v| self.reconstruct(tape, store, v))
    }

    pub fn encode_eval(&self, store: &ParamStore, x: &Tensor) -> Result<Tensor> {
        map_rows(x, self.latent_dim(), |tape, v| self.encode(tape, store, v))
    }

    pub fn decode_eval(&self, store: &ParamStore, z: &Tensor) -> Result<Tensor> {
        map_rows(z, self.full_dim(), |tape, v| self.decode(tape, store, v))
    }

    /// Parameter ids in checkpoint order.
    pub fn param_ids(&self) -> Vec<ParamId> {
        match &self.arch {
            AeArch::Inv(net) => net.param_ids(),
            AeArch::Dense(ae) => ae
                .encoder
                .layers
                .iter()
                .chain(&ae.decoder.layers)
                .flat_map(|d| [d.weight, d.bias])
                .collect(),
        }
    }

    pub fn num_params(&self, store: &ParamStore) -> usize {
        self.param_ids().iter().map(|&id| store.get(id).len()).sum()
    }

    pub fn refresh_spectral(&mut self, store: &ParamStore) {
        match &mut self.arch {
            AeArch::Inv(net) => {
                if let Some(k) = net.config.spectral_iters {
                    net.refresh_spectral(store, k);
                }
            }
            AeArch::Dense(ae) => {
                for mlp in [&mut ae.encoder, &mut ae.decoder] {
                    for layer in &mut mlp.layers {
                        let k = layer.spectral.as_ref().map(|s| s.n_power_iters);
                        if let Some(k) = k {
                            layer.refresh_spectral(store, k);
                        }
                    }
                }
            }
        }
    }

    pub fn spectral_states(&self) -> Vec<&SpectralNormState> {
        match &self.arch {
            AeArch::Inv(net) => net.spectral_states(),
            AeArch::Dense(ae) => ae.encoder.spectral_states().chain(ae.decoder.spectral_states()).collect(),
        }
    }

    pub fn spectral_states_mut(&mut self) -> Vec<&mut SpectralNormState> {
        match &mut self.arch {
            AeArch::Inv(net) => net.spectral_states_mut(),
            AeArch::Dense(ae) => ae
                .encoder
                .spectral_states_mut()
                .chain(ae.decoder.spectral_states_mut())
                .collect(),
        }
    }
}

/// Apply a row-wise tape function in chunks.
pub(crate) fn map_rows<F>(x: &Tensor, out_cols: usize, mut f: F) -> Result<Tensor>
where
    F: FnMut(&mut Tape, Var) -> Result<Var>,
{
    let rows = x.rows();
    let cols = x.cols();
    let mut out = Vec::with_capacity(rows * out_cols);
    let mut tape = Tape::new();
    for chunk in x.data().chunks(EVAL_CHUNK * cols.max(1)) {
        let n = chunk.len() / cols.max(1);
        let v = tape.constant(Tensor::matrix(n, cols, chunk.to_vec())?);
        let y = f(&mut tape, v)?;
        out.extend_from_slice(tape.value(y).data());
        tape.clear();
    }
    Tensor::matrix(rows, out_cols, out)
}

/// `U psi(mask(phi(U^T x)))` for samples in the rows of `x`.
pub fn pod_inv_ae_roundtrip(
    x: &Tensor,
    basis: &PodBasis,
    net: &InvertibleNet,
    store: &ParamStore,
    mask: MaskSpec,
) -> Result<Tensor> {
    if net.input_dim() != basis.rank() || mask.full_dim != basis.rank() {
        return Err(Error::Dimension {
            what: "invertible net width for POD coefficients",
            expected: basis.rank(),
            got: net.input_dim(),
        });
    }
    if x.cols() != basis.n_rows() {
        return Err(Error::Dimension {
            what: "snapshot length",
            expected: basis.n_rows(),
            got: x.cols(),
        });
    }
    let h = x.matmul(&modes_tensor(basis))?;
    let y = net.forward_eval(store, &h)?;
    let hr = net.inverse_eval(store, &mask.apply_tensor(&y))?;
    let data = basis.reconstruct_rows(hr.data(), hr.rows());
    Tensor::matrix(x.rows(), basis.n_rows(), data)
}

/// `N x r` row-major copy of the modes.
fn modes_tensor(basis: &PodBasis) -> Tensor {
    let (n, r) = (basis.n_rows(), basis.rank());
    let mut data = vec![0.0; n * r];
    for j in 0..r {
        for (i, v) in basis.mode(j).iter().enumerate() {
            data[i * r + j] = *v;
        }
    }
    Tensor::matrix(n, r, data).expect("sized")
}

/// Physical data to model space and back: optional POD projection followed
/// by global min-max scaling.
#[derive(Clone, Debug, PartialEq)]
pub struct Preprocessor {
    pub pod: Option<PodBasis>,
    pub normalizer: Normalizer,
    pub data_dim: usize,
}

impl Preprocessor {
    /// Fit on the training matrix. With `pod_rank`, scaling statistics come
    /// from the training POD coefficients.
    pub fn fit(train: &SnapshotMatrix, pod_rank: Option<usize>) -> Result<Self> {
        let pod = pod_rank.map(|r| compute_pod(train, r)).transpose()?;
        let normalizer = match &pod {
            Some(b) => Normalizer::fit(&b.project_matrix(train)?)?,
            None => Normalizer::fit(train)?,
        };
        Ok(Self {
            pod,
            normalizer,
            data_dim: train.n_rows(),
        })
    }

    pub fn model_dim(&self) -> usize {
        self.pod.as_ref().map_or(self.data_dim, PodBasis::rank)
    }

    pub fn to_model(&self, x: &SnapshotMatrix) -> Result<SnapshotMatrix> {
        if x.n_rows() != self.data_dim {
            return Err(Error::Dimension {
                what: "snapshot length",
                expected: self.data_dim,
                got: x.n_rows(),
            });
        }
        let reduced = match &self.pod {
            Some(b) => b.project_matrix(x)?,
            None => x.clone(),
        };
        Ok(self.normalizer.normalize(&reduced))
    }

    /// Model-space rows back to physical row-major snapshots.
    pub fn to_physical(&self, rows: &Tensor) -> Result<Vec<f64>> {
        if rows.cols() != self.model_dim() {
            return Err(Error::Dimension {
                what: "model-space width",
                expected: self.model_dim(),
                got: rows.cols(),
            });
        }
        let mut h = rows.data().to_vec();
        self.normalizer.denormalize_slice(&mut h);
        Ok(match &self.pod {
            Some(b) => b.reconstruct_rows(&h, rows.rows()),
            None => h,
        })
    }
}

/// A trained or trainable autoencoder together with its preprocessing.
#[derive(Clone, Debug)]
pub struct AeModel {
    pub store: ParamStore,
    pub ae: Autoencoder,
    pub pre: Preprocessor,
}

impl AeModel {
    /// Encode/decode every snapshot of `x`, in physical units.
    pub fn reconstruct(&self, x: &SnapshotMatrix) -> Result<SnapshotMatrix> {
        let m = self.pre.to_model(x)?;
        let rec = self.ae.reconstruct_eval(&self.store, &m.to_rows())?;
        x.with_data(x.n_rows(), self.pre.to_physical(&rec)?)
    }
}

/// Optimization settings shared by autoencoders and ROMs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    #[serde(default = "default_rate")]
    pub lr: f64,
    #[serde(default = "default_rate")]
    pub weight_decay: f64,
    #[serde(default = "default_patience")]
    pub patience: usize,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_alpha")]
    pub alpha: f64,
}

fn default_epochs() -> usize {
    1000
}
fn default_rate() -> f64 {
    1e-4
}
fn default_patience() -> usize {
    500
}
fn default_batch() -> usize {
    128
}
fn default_alpha() -> f64 {
    0.5
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: default_epochs(),
            lr: default_rate(),
            weight_decay: default_rate(),
            patience: default_patience(),
            batch_size: default_batch(),
            seed: 0,
            alpha: default_alpha(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::invalid("batch size must be positive"));
        }
        if self.patience > self.epochs {
            return Err(Error::invalid(format!(
                "patience {} exceeds epochs {}",
                self.patience, self.epochs
            )));
        }
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::invalid(format!("alpha {} outside [0, 1]", self.alpha)));
        }
        if !(self.lr > 0.0) || self.weight_decay < 0.0 {
            return Err(Error::invalid("learning rate must be positive and weight decay non-negative"));
        }
        Ok(())
    }

    pub fn adamw(&self) -> AdamWConfig {
        AdamWConfig {
            learning_rate: self.lr,
            weight_decay: self.weight_decay,
            ..AdamWConfig::default()
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    /// 0 is the evaluation before any update.
    pub epoch: usize,
    pub train_loss: f64,
    pub valid_loss: f64,
}

#[derive(Clone, Debug, PartialEq, Default, Serialize, Deserialize)]
pub struct TrainHistory {
    pub records: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub stopped_early: bool,
}

impl TrainHistory {
    /// Epochs of optimization actually run.
    pub fn epochs_trained(&self) -> usize {
        self.records.last().map_or(0, |r| r.epoch)
    }

    pub fn best_valid(&self) -> f64 {
        self.records[self.best_epoch].valid_loss
    }
}

/// A loss over indexed training samples plus a validation loss.
pub trait Objective: Clone {
    fn num_samples(&self) -> usize;
    fn batch_loss(&self, tape: &mut Tape, store: &ParamStore, idx: &[usize]) -> Result<Var>;
    fn train_loss(&self, store: &ParamStore) -> Result<f64>;
    fn valid_loss(&self, store: &ParamStore) -> Result<f64>;
    /// Called before every optimizer step.
    fn refresh(&mut self, store: &ParamStore);
}

/// Minibatch AdamW with per-epoch validation and early stopping. On return
/// `store` and `obj` hold the best-validation state.
pub fn fit<O: Objective>(store: &mut ParamStore, obj: &mut O, cfg: &TrainConfig) -> Result<TrainHistory> {
    cfg.validate()?;
    let mut opt = AdamW::new(cfg.adamw(), store);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..obj.num_samples()).collect();
    if order.is_empty() {
        return Err(Error::invalid("no training samples"));
    }
    let mut history = TrainHistory::default();
    let v0 = obj.valid_loss(store)?;
    let t0 = obj.train_loss(store)?;
    if !v0.is_finite() || !t0.is_finite() {
        return Err(Error::NonFiniteLoss { epoch: 0, batch: 0 });
    }
    history.records.push(EpochRecord {
        epoch: 0,
        train_loss: t0,
        valid_loss: v0,
    });
    let mut best = (v0, store.snapshot(), obj.clone());
    let mut tape = Tape::new();
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for (b, idx) in order.chunks(cfg.batch_size).enumerate() {
            obj.refresh(store);
            let loss = obj.batch_loss(&mut tape, store, idx)?;
            let value = tape.value(loss).item();
            if !value.is_finite() {
                tape.clear();
                return Err(Error::NonFiniteLoss { epoch, batch: b });
            }
            total += value * idx.len() as f64;
            let grads = tape.backward(loss)?.for_store(store);
            opt.step(store, &grads).map_err(|e| Error::Training {
                epoch,
                source: Box::new(e),
            })?;
        }
        obj.refresh(store);
        let valid = obj.valid_loss(store)?;
        if !valid.is_finite() {
            return Err(Error::NonFiniteLoss { epoch, batch: usize::MAX });
        }
        history.records.push(EpochRecord {
            epoch,
            train_loss: total / order.len() as f64,
            valid_loss: valid,
        });
        log::debug!("epoch {epoch}: train {:.3e} valid {valid:.3e}", total / order.len() as f64);
        if valid < best.0 {
            best = (valid, store.snapshot(), obj.clone());
            history.best_epoch = epoch;
        } else if epoch - history.best_epoch >= cfg.patience {
            history.stopped_early = true;
            break;
        }
    }
    store.restore(&best.1);
    *obj = best.2;
    Ok(history)
}

/// Mean squared reconstruction error of `x` rows in model space.
pub fn reconstruction_loss(tape: &mut Tape, store: &ParamStore, ae: &Autoencoder, x: &Tensor) -> Result<Var> {
    let rows = x.rows();
    let xv = tape.constant(x.clone());
    let xr = ae.reconstruct(tape, store, xv)?;
    let d = tape.sub(xv, xr)?;
    let s = tape.sum_sq(d);
    Ok(tape.scale(s, 1.0 / rows as f64))
}

fn mean_reconstruction_loss(store: &ParamStore, ae: &Autoencoder, x: &Tensor) -> Result<f64> {
    if x.rows() == 0 {
        return Ok(0.0);
    }
    let xr = ae.reconstruct_eval(store, x)?;
    let ss: f64 = x.data().iter().zip(xr.data()).map(|(a, b)| (a - b) * (a - b)).sum();
    Ok(ss / x.rows() as f64)
}

#[derive(Clone)]
struct AeObjective<'a> {
    ae: Autoencoder,
    train: &'a Tensor,
    valid: &'a Tensor,
}

impl Objective for AeObjective<'_> {
    fn num_samples(&self) -> usize {
        self.train.rows()
    }

    fn batch_loss(&self, tape: &mut Tape, store: &ParamStore, idx: &[usize]) -> Result<Var> {
        let batch = gather(self.train, idx);
        reconstruction_loss(tape, store, &self.ae, &batch)
    }

    fn train_loss(&self, store: &ParamStore) -> Result<f64> {
        mean_reconstruction_loss(store, &self.ae, self.train)
    }

    fn valid_loss(&self, store: &ParamStore) -> Result<f64> {
        mean_reconstruction_loss(store, &self.ae, self.valid)
    }

    fn refresh(&mut self, store: &ParamStore) {
        self.ae.refresh_spectral(store);
    }
}

pub(crate) fn gather(x: &Tensor, idx: &[usize]) -> Tensor {
    let c = x.cols();
    let mut data = Vec::with_capacity(idx.len() * c);
    for &i in idx {
        data.extend_from_slice(x.row_slice(i));
    }
    Tensor::matrix(idx.len(), c, data).expect("sized")
}

/// Train `model.ae` on physical training and validation matrices.
pub fn train_autoencoder(
    model: &mut AeModel,
    train: &SnapshotMatrix,
    valid: &SnapshotMatrix,
    cfg: &TrainConfig,
) -> Result<TrainHistory> {
    let xt = model.pre.to_model(train)?.to_rows();
    let xv = model.pre.to_model(valid)?.to_rows();
    let mut obj = AeObjective {
        ae: model.ae.clone(),
        train: &xt,
        valid: &xv,
    };
    let history = fit(&mut model.store, &mut obj, cfg)?;
    model.ae = obj.ae;
    Ok(history)
}

/// How to build an autoencoder.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum AeSpec {
    Inv {
        n_layers: usize,
        hidden: usize,
        swap_halves: bool,
        spectral_iters: Option<usize>,
    },
    Dense {
        hidden: Vec<usize>,
        spectral_iters: Option<usize>,
    },
}

impl AeSpec {
    pub fn inv_default() -> Self {
        Self::Inv {
            n_layers: 5,
            hidden: 512,
            swap_halves: true,
            spectral_iters: None,
        }
    }

    pub fn dense_default() -> Self {
        Self::Dense {
            hidden: BaselineAe::DEFAULT_HIDDEN.to_vec(),
            spectral_iters: None,
        }
    }

    pub fn build<R: Rng>(&self, store: &mut ParamStore, full_dim: usize, latent_dim: usize, rng: &mut R) -> Result<Autoencoder> {
        match self {
            Self::Inv {
                n_layers,
                hidden,
                swap_halves,
                spectral_iters,
            } => {
                let cfg = InvNetConfig {
                    input_dim: full_dim,
                    n_layers: *n_layers,
                    hidden: *hidden,
                    swap_halves: *swap_halves,
                    spectral_iters: *spectral_iters,
                };
                Autoencoder::new_inv(store, cfg, latent_dim, rng)
            }
            Self::Dense { hidden, spectral_iters } => {
                Autoencoder::new_dense(store, full_dim, latent_dim, hidden, *spectral_iters, rng)
            }
        }
    }

    pub fn of(ae: &Autoencoder) -> Self {
        match &ae.arch {
            AeArch::Inv(net) => Self::Inv {
                n_layers: net.config.n_layers,
                hidden: net.config.hidden,
                swap_halves: net.config.swap_halves,
                spectral_iters: net.config.spectral_iters,
            },
            AeArch::Dense(d) => Self::Dense {
                hidden: d.widths[1..d.widths.len() - 1].to_vec(),
                spectral_iters: d.encoder.layers[0].spectral.as_ref().map(|s| s.n_power_iters),
            },
        }
    }
}

impl AeModel {
    /// Fresh model on top of a fitted preprocessor.
    pub fn new(pre: Preprocessor, spec: &AeSpec, latent_dim: usize, seed: u64) -> Result<Self> {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let ae = spec.build(&mut store, pre.model_dim(), latent_dim, &mut rng)?;
        Ok(Self { store, ae, pre })
    }
}

/// Shared checkpoint header for autoencoder and ROM containers.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub(crate) struct AeHeader {
    pub dtype: String,
    pub architecture: AeSpec,
    pub input_dim: usize,
    pub latent_dim: usize,
    pub data_dim: usize,
    pub x_min: f64,
    pub x_max: f64,
    pub pod_rank: Option<usize>,
}

impl AeHeader {
    pub fn new(ae: &Autoencoder, pre: &Preprocessor) -> Self {
        Self {
            dtype: "f64".into(),
            architecture: AeSpec::of(ae),
            input_dim: ae.full_dim(),
            latent_dim: ae.latent_dim(),
            data_dim: pre.data_dim,
            x_min: pre.normalizer.x_min,
            x_max: pre.normalizer.x_max,
            pod_rank: pre.pod.as_ref().map(PodBasis::rank),
        }
    }
}

/// Payload writer: parameters in the given order, then spectral vectors,
/// then the optional POD basis.
pub(crate) fn write_payload(
    out: &mut Vec<f64>,
    store: &ParamStore,
    ids: &[ParamId],
    spectral: &[&SpectralNormState],
    pod: Option<&PodBasis>,
) {
    for &id in ids {
        out.extend_from_slice(store.get(id).data());
    }
    for s in spectral {
        out.extend_from_slice(s.u());
        out.extend_from_slice(s.v());
    }
    if let Some(b) = pod {
        out.extend_from_slice(b.modes());
        out.extend_from_slice(b.singular_values());
    }
}

/// Counterpart of [`write_payload`]; returns the unread tail.
pub(crate) fn read_payload<'a>(
    payload: &'a [f64],
    store: &mut ParamStore,
    ids: &[ParamId],
    spectral: &mut [&mut SpectralNormState],
    pod_shape: Option<(usize, usize)>,
) -> Result<(&'a [f64], Option<PodBasis>)> {
    let mut rest = payload;
    let mut take = |n: usize| -> Result<&'a [f64]> {
        if rest.len() < n {
            return Err(FormatError::Truncated {
                expected: n * 8,
                found: rest.len() * 8,
            }
            .into());
        }
        let (head, tail) = rest.split_at(n);
        rest = tail;
        Ok(head)
    };
    for &id in ids {
        let n = store.get(id).len();
        let src = take(n)?;
        store.get_mut(id).data_mut().copy_from_slice(src);
    }
    for s in spectral.iter_mut() {
        let u = take(s.u().len())?.to_vec();
        let v = take(s.v().len())?.to_vec();
        let iters = s.n_power_iters;
        **s = SpectralNormState::from_vectors(u, v, iters);
    }
    let pod = match pod_shape {
        Some((rows, r)) => {
            let modes = take(rows * r)?.to_vec();
            let sigma = take(r)?.to_vec();
            Some(PodBasis::from_parts(rows, modes, sigma)?)
        }
        None => None,
    };
    Ok((rest, pod))
}

pub(crate) fn payload_len(store: &ParamStore, ids: &[ParamId], spectral: &[&SpectralNormState], pod: Option<(usize, usize)>) -> usize {
    ids.iter().map(|&id| store.get(id).len()).sum::<usize>()
        + spectral.iter().map(|s| s.u().len() + s.v().len()).sum::<usize>()
        + pod.map_or(0, |(n, r)| n * r + r)
}

fn magic_for(ae: &Autoencoder) -> &'static [u8; 8] {
    if ae.is_invertible() {
        INV_AE_MAGIC
    } else {
        DENSE_AE_MAGIC
    }
}

/// Checkpoint: `INVAE001` for invertible and `DAE00001` for dense models.
pub fn encode_ae(model: &AeModel) -> Result<Vec<u8>> {
    let header = AeHeader::new(&model.ae, &model.pre);
    let mut payload = Vec::new();
    write_payload(
        &mut payload,
        &model.store,
        &model.ae.param_ids(),
        &model.ae.spectral_states(),
        model.pre.pod.as_ref(),
    );
    container::encode(magic_for(&model.ae), &header, &payload)
}

pub fn decode_ae(bytes: &[u8]) -> Result<AeModel> {
    let raw = container::decode(bytes, &[INV_AE_MAGIC, DENSE_AE_MAGIC])?;
    let h: AeHeader = raw.header()?;
    let is_inv = matches!(h.architecture, AeSpec::Inv { .. });
    if is_inv != (&raw.magic == INV_AE_MAGIC) {
        return Err(FormatError::Header("architecture does not match magic".into()).into());
    }
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut ae = h.architecture.build(&mut store, h.input_dim, h.latent_dim, &mut rng)?;
    let pod_shape = h.pod_rank.map(|r| (h.data_dim, r));
    let ids = ae.param_ids();
    let n = payload_len(&store, &ids, &ae.spectral_states(), pod_shape);
    let payload = raw.payload(n)?;
    let (_, pod) = read_payload(&payload, &mut store, &ids, &mut ae.spectral_states_mut(), pod_shape)?;
    let pre = Preprocessor {
        pod,
        normalizer: Normalizer::new(h.x_min, h.x_max)?,
        data_dim: h.data_dim,
    };
    Ok(AeModel { store, ae, pre })
}

pub fn write_ae(path: &Path, model: &AeModel) -> Result<()> {
    std::fs::write(path, encode_ae(model)?)?;
    Ok(())
}

pub fn read_ae(path: &Path) -> Result<AeModel> {
    decode_ae(&std::fs::read(path)?)
}
