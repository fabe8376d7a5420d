//! Latent regressors and the DL-ROM family of reduced models.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{ParamId, ParamStore, Tape, Var};
use crate::autoencoders::{
    fit, gather, map_rows, payload_len, read_payload, write_payload, AeHeader, AeSpec, Autoencoder, Objective,
    Preprocessor, TrainConfig, TrainHistory,
};
use crate::container::{self, ROM_MAGIC};
use crate::dataset::{Normalizer, SnapshotMatrix};
use crate::error::{Error, FormatError, Result};
use crate::nn::Mlp;
use crate::tensor::Tensor;

pub const DEFAULT_REGRESSOR_HIDDEN: [usize; 4] = [128; 4];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RomVariant {
    Dlrom,
    PodDlrom,
    InvDlrom,
    PodInvDlrom,
}

impl RomVariant {
    pub const ALL: [RomVariant; 4] = [Self::Dlrom, Self::PodDlrom, Self::InvDlrom, Self::PodInvDlrom];

    pub fn uses_pod(self) -> bool {
        matches!(self, Self::PodDlrom | Self::PodInvDlrom)
    }

    pub fn invertible(self) -> bool {
        matches!(self, Self::InvDlrom | Self::PodInvDlrom)
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::Dlrom => "dlrom",
            Self::PodDlrom => "pod_dlrom",
            Self::InvDlrom => "inv_dlrom",
            Self::PodInvDlrom => "pod_inv_dlrom",
        }
    }
}

impl std::str::FromStr for RomVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::invalid(format!("unknown ROM variant `{s}`")))
    }
}

/// MLP from normalized `(t, mu)` to the latent code.
#[derive(Clone, Debug)]
pub struct LatentRegressor {
    pub mlp: Mlp,
    /// Training ranges of `t` followed by each parameter component.
    pub input_ranges: Vec<(f64, f64)>,
}

impl LatentRegressor {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        input_ranges: Vec<(f64, f64)>,
        latent_dim: usize,
        hidden: &[usize],
        rng: &mut R,
    ) -> Result<Self> {
        if latent_dim == 0 || input_ranges.is_empty() || hidden.contains(&0) {
            return Err(Error::invalid("regressor needs inputs and positive widths"));
        }
        let mut widths = vec![input_ranges.len()];
        widths.extend_from_slice(hidden);
        widths.push(latent_dim);
        let mlp = Mlp::new(store, "xi", &widths, None, rng);
        Ok(Self { mlp, input_ranges })
    }

    /// Ranges of time and parameters over a training matrix.
    pub fn ranges_of(train: &SnapshotMatrix) -> Vec<(f64, f64)> {
        let t_lo = train.column_meta(0).time;
        let t_hi = train.column_meta(train.nt() - 1).time;
        let mut out = vec![(t_lo, t_hi)];
        for c in 0..train.param_dim() {
            let (lo, hi) = train
                .params()
                .iter()
                .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), p| (lo.min(p[c]), hi.max(p[c])));
            out.push((lo, hi));
        }
        out
    }

    pub fn latent_dim(&self) -> usize {
        self.mlp.out_dim()
    }

    fn scale(&self, k: usize, v: f64) -> f64 {
        let (lo, hi) = self.input_ranges[k];
        if hi > lo {
            (v - lo) / (hi - lo)
        } else {
            v - lo
        }
    }

    /// One normalized input row per time, all at parameter `mu`.
    pub fn inputs(&self, mu: &[f64], times: &[f64]) -> Result<Tensor> {
        let width = self.input_ranges.len();
        if mu.len() + 1 != width {
            return Err(Error::Dimension {
                what: "parameter vector length",
                expected: width - 1,
                got: mu.len(),
            });
        }
        let mut data = Vec::with_capacity(times.len() * width);
        for &t in times {
            data.push(self.scale(0, t));
            data.extend(mu.iter().enumerate().map(|(c, &m)| self.scale(c + 1, m)));
        }
        Tensor::matrix(times.len(), width, data)
    }

    /// Inputs for every column of a snapshot matrix.
    pub fn inputs_for(&self, x: &SnapshotMatrix) -> Result<Tensor> {
        let times: Vec<f64> = (0..x.nt()).map(|k| x.column_meta(k).time).collect();
        let blocks = x
            .params()
            .iter()
            .map(|mu| self.inputs(mu, &times))
            .collect::<Result<Vec<_>>>()?;
        let data: Vec<f64> = blocks.iter().flat_map(|b| b.data().iter().copied()).collect();
        Tensor::matrix(x.n_cols(), self.input_ranges.len(), data)
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, inputs: Var) -> Result<Var> {
        self.mlp.forward(tape, store, inputs)
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        self.mlp.layers.iter().flat_map(|d| [d.weight, d.bias]).collect()
    }
}

/// `(1/M) sum (alpha/2 |x - psi(xi)|^2 + (1-alpha)/2 |phi(x) - xi|^2)`.
///
/// `x` holds model-space samples in its rows and `inputs` the matching
/// regressor inputs. For invertible autoencoders `psi` zero-pads the code and
/// `phi(x)` is cut to the first `n` outputs.
pub fn dlrom_loss(
    tape: &mut Tape,
    store: &ParamStore,
    ae: &Autoencoder,
    regressor: &LatentRegressor,
    x: &Tensor,
    inputs: &Tensor,
    alpha: f64,
) -> Result<Var> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::invalid(format!("alpha {alpha} outside [0, 1]")));
    }
    if x.rows() != inputs.rows() {
        return Err(Error::Dimension {
            what: "regressor input rows",
            expected: x.rows(),
            got: inputs.rows(),
        });
    }
    let m = x.rows() as f64;
    let xv = tape.constant(x.clone());
    let iv = tape.constant(inputs.clone());
    let z_pred = regressor.forward(tape, store, iv)?;
    let x_pred = ae.decode(tape, store, z_pred)?;
    let dx = tape.sub(xv, x_pred)?;
    let rec = tape.sum_sq(dx);
    let z = ae.encode(tape, store, xv)?;
    let dz = tape.sub(z, z_pred)?;
    let lat = tape.sum_sq(dz);
    let rec = tape.scale(rec, alpha / (2.0 * m));
    let lat = tape.scale(lat, (1.0 - alpha) / (2.0 * m));
    tape.add(rec, lat)
}

/// Architecture of a reduced model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RomSpec {
    pub variant: RomVariant,
    pub latent_dim: usize,
    pub autoencoder: AeSpec,
    pub regressor_hidden: Vec<usize>,
}

/// Autoencoder plus latent regressor, with optional POD and scaling.
#[derive(Clone, Debug)]
pub struct RomModel {
    pub variant: RomVariant,
    pub store: ParamStore,
    pub ae: Autoencoder,
    pub regressor: LatentRegressor,
    pub pre: Preprocessor,
    pub trained: bool,
}

impl RomModel {
    /// Untrained model. `pre` must carry a POD basis exactly for POD variants,
    /// and the autoencoder kind must match the variant.
    pub fn new(spec: &RomSpec, pre: Preprocessor, input_ranges: Vec<(f64, f64)>, seed: u64) -> Result<Self> {
        if spec.variant.uses_pod() != pre.pod.is_some() {
            return Err(Error::invalid(format!(
                "variant {} {} a POD basis",
                spec.variant.name(),
                if spec.variant.uses_pod() { "needs" } else { "must not have" }
            )));
        }
        if spec.variant.invertible() != matches!(spec.autoencoder, AeSpec::Inv { .. }) {
            return Err(Error::invalid(format!(
                "variant {} does not match the autoencoder kind",
                spec.variant.name()
            )));
        }
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let ae = spec.autoencoder.build(&mut store, pre.model_dim(), spec.latent_dim, &mut rng)?;
        let regressor = LatentRegressor::new(&mut store, input_ranges, spec.latent_dim, &spec.regressor_hidden, &mut rng)?;
        Ok(Self {
            variant: spec.variant,
            store,
            ae,
            regressor,
            pre,
            trained: false,
        })
    }

    pub fn spec(&self) -> RomSpec {
        RomSpec {
            variant: self.variant,
            latent_dim: self.ae.latent_dim(),
            autoencoder: AeSpec::of(&self.ae),
            regressor_hidden: {
                let l = &self.regressor.mlp.layers;
                l[..l.len() - 1].iter().map(|d| d.out_dim).collect()
            },
        }
    }

    /// Predicted physical trajectory at `mu`, row-major `times.len() x N`.
    /// Only the regressor and decoder are evaluated.
    pub fn infer(&self, mu: &[f64], times: &[f64]) -> Result<Vec<f64>> {
        if !self.trained {
            return Err(Error::Untrained);
        }
        let inputs = self.regressor.inputs(mu, times)?;
        let z = map_rows(&inputs, self.regressor.latent_dim(), |tape, v| {
            self.regressor.forward(tape, &self.store, v)
        })?;
        let h = self.ae.decode_eval(&self.store, &z)?;
        self.pre.to_physical(&h)
    }

    /// Autoencoder round trip in physical units, for projection errors.
    pub fn reconstruct(&self, x: &SnapshotMatrix) -> Result<SnapshotMatrix> {
        let m = self.pre.to_model(x)?;
        let rec = self.ae.reconstruct_eval(&self.store, &m.to_rows())?;
        x.with_data(x.n_rows(), self.pre.to_physical(&rec)?)
    }
}

/// Predicted trajectory; fails on untrained models.
pub fn rom_infer(model: &RomModel, mu: &[f64], times: &[f64]) -> Result<Vec<f64>> {
    model.infer(mu, times)
}

#[derive(Clone)]
struct RomObjective<'a> {
    ae: Autoencoder,
    regressor: LatentRegressor,
    alpha: f64,
    train: (&'a Tensor, &'a Tensor),
    valid: (&'a Tensor, &'a Tensor),
}

impl RomObjective<'_> {
    fn full_loss(&self, store: &ParamStore, (x, inp): (&Tensor, &Tensor)) -> Result<f64> {
        let rows = x.rows();
        if rows == 0 {
            return Ok(0.0);
        }
        let mut tape = Tape::new();
        let mut total = 0.0;
        let chunk = 1024;
        for start in (0..rows).step_by(chunk) {
            let idx: Vec<usize> = (start..(start + chunk).min(rows)).collect();
            let l = dlrom_loss(&mut tape, store, &self.ae, &self.regressor, &gather(x, &idx), &gather(inp, &idx), self.alpha)?;
            total += tape.value(l).item() * idx.len() as f64;
            tape.clear();
        }
        Ok(total / rows as f64)
    }
}

impl Objective for RomObjective<'_> {
    fn num_samples(&self) -> usize {
        self.train.0.rows()
    }

    fn batch_loss(&self, tape: &mut Tape, store: &ParamStore, idx: &[usize]) -> Result<Var> {
        let x = gather(self.train.0, idx);
        let inp = gather(self.train.1, idx);
        dlrom_loss(tape, store, &self.ae, &self.regressor, &x, &inp, self.alpha)
    }

    fn train_loss(&self, store: &ParamStore) -> Result<f64> {
        self.full_loss(store, self.train)
    }

    fn valid_loss(&self, store: &ParamStore) -> Result<f64> {
        self.full_loss(store, self.valid)
    }

    fn refresh(&mut self, store: &ParamStore) {
        self.ae.refresh_spectral(store);
    }
}

/// Joint training of autoencoder and regressor on physical matrices.
pub fn train_rom(
    model: &mut RomModel,
    train: &SnapshotMatrix,
    valid: &SnapshotMatrix,
    cfg: &TrainConfig,
) -> Result<TrainHistory> {
    let xt = model.pre.to_model(train)?.to_rows();
    let it = model.regressor.inputs_for(train)?;
    let xv = model.pre.to_model(valid)?.to_rows();
    let iv = model.regressor.inputs_for(valid)?;
    let mut obj = RomObjective {
        ae: model.ae.clone(),
        regressor: model.regressor.clone(),
        alpha: cfg.alpha,
        train: (&xt, &it),
        valid: (&xv, &iv),
    };
    let history = fit(&mut model.store, &mut obj, cfg)?;
    model.ae = obj.ae;
    model.trained = true;
    Ok(history)
}

#[derive(Debug, Serialize, Deserialize)]
struct RomHeader {
    dtype: String,
    variant: RomVariant,
    autoencoder: AeHeader,
    regressor_hidden: Vec<usize>,
    input_ranges: Vec<(f64, f64)>,
    trained: bool,
}

/// Bundle: autoencoder parameters and spectral vectors, regressor
/// parameters, then the optional POD basis.
pub fn encode_rom(model: &RomModel) -> Result<Vec<u8>> {
    let spec = model.spec();
    let header = RomHeader {
        dtype: "f64".into(),
        variant: model.variant,
        autoencoder: AeHeader::new(&model.ae, &model.pre),
        regressor_hidden: spec.regressor_hidden,
        input_ranges: model.regressor.input_ranges.clone(),
        trained: model.trained,
    };
    let mut ids = model.ae.param_ids();
    let mut payload = Vec::new();
    write_payload(&mut payload, &model.store, &ids, &model.ae.spectral_states(), None);
    ids = model.regressor.param_ids();
    write_payload(&mut payload, &model.store, &ids, &[], model.pre.pod.as_ref());
    container::encode(ROM_MAGIC, &header, &payload)
}

pub fn decode_rom(bytes: &[u8]) -> Result<RomModel> {
    let raw = container::decode(bytes, &[ROM_MAGIC])?;
    let h: RomHeader = raw.header()?;
    let a = &h.autoencoder;
    let pod_shape = a.pod_rank.map(|r| (a.data_dim, r));
    let spec = RomSpec {
        variant: h.variant,
        latent_dim: a.latent_dim,
        autoencoder: a.architecture.clone(),
        regressor_hidden: h.regressor_hidden.clone(),
    };
    // placeholder basis of the right shape so the variant check passes
    let placeholder = pod_shape
        .map(|(n, r)| crate::pod::PodBasis::from_parts(n, vec![0.0; n * r], vec![0.0; r]))
        .transpose()?;
    let pre = Preprocessor {
        pod: placeholder,
        normalizer: Normalizer::new(a.x_min, a.x_max)?,
        data_dim: a.data_dim,
    };
    if pre.model_dim() != a.input_dim {
        return Err(FormatError::Header("autoencoder width does not match data".into()).into());
    }
    let mut model = RomModel::new(&spec, pre, h.input_ranges, 0)?;
    let ae_ids = model.ae.param_ids();
    let reg_ids = model.regressor.param_ids();
    let n = payload_len(&model.store, &ae_ids, &model.ae.spectral_states(), None)
        + payload_len(&model.store, &reg_ids, &[], pod_shape);
    let payload = raw.payload(n)?;
    let (rest, _) = read_payload(&payload, &mut model.store, &ae_ids, &mut model.ae.spectral_states_mut(), None)?;
    let (_, pod) = read_payload(rest, &mut model.store, &reg_ids, &mut [], pod_shape)?;
    model.pre.pod = pod;
    model.trained = h.trained;
    Ok(model)
}

pub fn write_rom(path: &Path, model: &RomModel) -> Result<()> {
    std::fs::write(path, encode_rom(model)?)?;
    Ok(())
}

pub fn read_rom(path: &Path) -> Result<RomModel> {
    decode_rom(&std::fs::read(path)?)
}
