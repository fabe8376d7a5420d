//! Acceptance suite. Every test prints one `[criterion N]` line.
//!
//! Criteria 4 to 6 train paper-sized networks for 1000 epochs each, which
//! takes many CPU hours. They run only when `INVROM_ACCEPTANCE_FULL=1`.

use std::time::Instant;

use invrom::autoencoders::{train_autoencoder, AeModel, AeSpec, MaskSpec, Preprocessor, TrainConfig};
use invrom::burgers::BurgersConfig;
use invrom::dataset::{
    build_burgers_grid, burgers_splits, read_snap, split, write_snap, DataSplits, SnapshotMatrix,
};
use invrom::dlrom::{rom_infer, train_rom, LatentRegressor, RomModel, RomSpec, RomVariant, DEFAULT_REGRESSOR_HIDDEN};
use invrom::invnet::{InvNetConfig, InvertibleNet};
use invrom::metrics::{projection_error, reduction_error};
use invrom::pod::compute_pod;
use invrom::spectral::{spectral_normalize, SpectralNormState};
use invrom::{ParamStore, Tensor};
use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn report(n: u32, pass: bool, detail: &str) {
    println!("[criterion {n}] {} {detail}", if pass { "PASS" } else { "FAIL" });
}

fn list(v: &[f64]) -> String {
    let items: Vec<String> = v.iter().map(|e| format!("{e:.3e}")).collect();
    format!("[{}]", items.join(", "))
}

fn full_run() -> bool {
    std::env::var("INVROM_ACCEPTANCE_FULL").is_ok_and(|v| v == "1")
}

fn gated(n: u32, what: &str) -> bool {
    if full_run() {
        return false;
    }
    println!("[criterion {n}] GATED {what}; set INVROM_ACCEPTANCE_FULL=1 to run");
    true
}

fn burgers_data() -> DataSplits {
    let spec = split(&build_burgers_grid(), 0).unwrap();
    burgers_splits(&spec, &BurgersConfig::default()).unwrap()
}

fn sigma_max(w: &Tensor) -> f64 {
    let m = DMatrix::from_row_slice(w.rows(), w.cols(), w.data());
    m.singular_values().max()
}

#[test]
fn criterion_1_invertibility() {
    let start = Instant::now();
    let mut worst: f64 = 0.0;
    let mut pairs = 0;
    for dim in [256, 512] {
        for sn in [false, true] {
            // 10 parameter draws x 10 inputs = 100 (input, parameter) pairs.
            for draw in 0..10u64 {
                let mut rng = ChaCha8Rng::seed_from_u64(1000 * dim as u64 + 100 * sn as u64 + draw);
                let mut store = ParamStore::new();
                let cfg = InvNetConfig {
                    spectral_iters: sn.then_some(1),
                    ..InvNetConfig::new(dim)
                };
                let mut net = InvertibleNet::new(&mut store, "net", cfg, &mut rng).unwrap();
                if sn {
                    net.refresh_spectral(&store, 20);
                }
                let x = Tensor::matrix(10, dim, (0..10 * dim).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
                let back = net.inverse_eval(&store, &net.forward_eval(&store, &x).unwrap()).unwrap();
                let err = x.data().iter().zip(back.data()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
                worst = worst.max(err);
                pairs += 10;
            }
        }
    }
    let secs = start.elapsed().as_secs_f64();
    let pass = worst < 1e-10 && secs < 10.0;
    report(1, pass, &format!("{pairs} pairs over dims 256/512 with and without SN, max |x - inv(f(x))| = {worst:.2e}, {secs:.1} s"));
    assert!(pass);
}

#[test]
fn criterion_2_gradients() {
    // The checks live in tests/gradients.rs; this entry reruns a reduced
    // version so the criterion gets a line in this report.
    use invrom::autoencoders::reconstruction_loss;
    use invrom::dlrom::dlrom_loss;
    let start = Instant::now();
    let h = 1e-5;
    let mut worst: f64 = 0.0;
    for seed in 0..10u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let spec = AeSpec::Inv {
            n_layers: 2,
            hidden: 5,
            swap_halves: true,
            spectral_iters: Some(1),
        };
        let mut ae = spec.build(&mut store, 4, 2, &mut rng).unwrap();
        ae.refresh_spectral(&store);
        let reg = LatentRegressor::new(&mut store, vec![(0.0, 1.0), (0.0, 1.0)], 2, &[4], &mut rng).unwrap();
        let x = Tensor::matrix(3, 4, (0..12).map(|_| rng.gen_range(0.0..1.0)).collect()).unwrap();
        let inp = Tensor::matrix(3, 2, (0..6).map(|_| rng.gen_range(0.0..1.0)).collect()).unwrap();
        let losses: [&dyn Fn(&mut invrom::Tape, &ParamStore) -> invrom::Var; 2] = [
            &|t, s| reconstruction_loss(t, s, &ae, &x).unwrap(),
            &|t, s| dlrom_loss(t, s, &ae, &reg, &x, &inp, 0.5).unwrap(),
        ];
        for loss in losses {
            let mut tape = invrom::Tape::new();
            let l = loss(&mut tape, &store);
            let grads = tape.backward(l).unwrap().for_store(&store);
            for id in store.ids().collect::<Vec<_>>() {
                for j in 0..store.get(id).len() {
                    let orig = store.get(id).data()[j];
                    let at = |v: f64, store: &mut ParamStore| {
                        store.get_mut(id).data_mut()[j] = v;
                        let mut t = invrom::Tape::new();
                        let l = loss(&mut t, store);
                        t.value(l).item()
                    };
                    let fd = (at(orig + h, &mut store) - at(orig - h, &mut store)) / (2.0 * h);
                    store.get_mut(id).data_mut()[j] = orig;
                    let ad = grads[id.index()].data()[j];
                    worst = worst.max((ad - fd).abs() / ad.abs().max(fd.abs()).max(1e-4));
                }
            }
        }
    }
    let secs = start.elapsed().as_secs_f64();
    let pass = worst < 1e-5 && secs < 60.0;
    report(2, pass, &format!("10 seeds, worst relative error {worst:.2e}, {secs:.1} s"));
    assert!(pass);
}

#[test]
fn criterion_3_pod_table() {
    let start = Instant::now();
    let data = burgers_data();
    let fom_secs = start.elapsed().as_secs_f64();
    let start = Instant::now();
    let basis = compute_pod(&data.train, 100).unwrap();
    let pod_secs = start.elapsed().as_secs_f64();
    let mut pass = fom_secs <= 15.0 * 60.0 && pod_secs <= 60.0;
    let mut detail = Vec::new();
    for (r, target) in [(1, 1.48e-1), (5, 5.81e-2), (20, 1.55e-2), (100, 1.15e-4)] {
        let b = basis.truncate(r).unwrap();
        let e = projection_error(&data.test, |x| b.reconstruct_matrix(&b.project_matrix(x)?))
            .unwrap()
            .mean;
        let ok = e <= 2.0 * target && e >= target / 2.0;
        pass &= ok;
        detail.push(format!("r={r}: {e:.3e} (paper {target:.2e})"));
    }
    report(
        3,
        pass,
        &format!("{}; FOM {fom_secs:.1} s, POD {pod_secs:.1} s", detail.join(", ")),
    );
    assert!(pass);
}

fn paper_protocol() -> TrainConfig {
    TrainConfig::default()
}

fn trained_ae(data: &DataSplits, spec: &AeSpec, n: usize) -> f64 {
    let pre = Preprocessor::fit(&data.train, None).unwrap();
    let mut model = AeModel::new(pre, spec, n, 0).unwrap();
    train_autoencoder(&mut model, &data.train, &data.valid, &paper_protocol()).unwrap();
    projection_error(&data.test, |x| model.reconstruct(x)).unwrap().mean
}

#[test]
fn criterion_4_inv_ae_table() {
    if gated(4, "inv-AE at n=3,5,20 needs 1000 epochs of a 2.6M-parameter network per run") {
        return;
    }
    let data = burgers_data();
    let mut pass = true;
    let mut detail = Vec::new();
    for (n, accept) in [(3, 3.4e-3), (5, 1.6e-3), (20, 1.2e-3)] {
        let start = Instant::now();
        let e = trained_ae(&data, &AeSpec::inv_default(), n);
        let mins = start.elapsed().as_secs_f64() / 60.0;
        pass &= e <= accept && mins <= 30.0;
        detail.push(format!("n={n}: {e:.3e} (accept <= {accept:.1e}, {mins:.0} min)"));
    }
    report(4, pass, &detail.join(", "));
    assert!(pass);
}

#[test]
fn criterion_5_plateau_vs_decay() {
    if gated(5, "dense and inv-AE sweeps over n=5..100 at paper size") {
        return;
    }
    let data = burgers_data();
    let dims = [5, 10, 20, 50, 100];
    let dense: Vec<f64> = dims.iter().map(|&n| trained_ae(&data, &AeSpec::dense_default(), n)).collect();
    let inv: Vec<f64> = dims.iter().map(|&n| trained_ae(&data, &AeSpec::inv_default(), n)).collect();
    let dense_best = dense.iter().copied().fold(f64::INFINITY, f64::min);
    let plateau = dense_best > dense[0] / 10.0;
    let decay = inv[4] <= inv[0] / 2.0;
    report(
        5,
        plateau && decay,
        &format!("dense {}, inv {}", list(&dense), list(&inv)),
    );
    assert!(plateau && decay);
}

fn trained_rom(data: &DataSplits, variant: RomVariant, n: usize) -> f64 {
    let pre = Preprocessor::fit(&data.train, None).unwrap();
    let spec = RomSpec {
        variant,
        latent_dim: n,
        autoencoder: if variant.invertible() { AeSpec::inv_default() } else { AeSpec::dense_default() },
        regressor_hidden: DEFAULT_REGRESSOR_HIDDEN.to_vec(),
    };
    let mut model = RomModel::new(&spec, pre, LatentRegressor::ranges_of(&data.train), 0).unwrap();
    train_rom(&mut model, &data.train, &data.valid, &paper_protocol()).unwrap();
    reduction_error(&data.test, |mu, t| rom_infer(&model, mu, t)).unwrap().mean
}

#[test]
fn criterion_6_inv_dlrom_table() {
    if gated(6, "inv-DL-ROM and DL-ROM sweeps at paper size") {
        return;
    }
    let data = burgers_data();
    let mut pass = true;
    let mut detail = Vec::new();
    for n in [3, 4, 5, 10, 20] {
        let inv = trained_rom(&data, RomVariant::InvDlrom, n);
        let dense = trained_rom(&data, RomVariant::Dlrom, n);
        pass &= inv < dense;
        let target = match n {
            5 => Some(1.99e-3),
            20 => Some(1.64e-3),
            _ => None,
        };
        if let Some(t) = target {
            pass &= inv <= 5.0 * t && inv >= t / 5.0;
        }
        detail.push(format!("n={n}: inv {inv:.3e} vs dense {dense:.3e}"));
    }
    report(6, pass, &detail.join(", "));
    assert!(pass);
}

fn worst_network_sigma(net: &InvertibleNet, store: &ParamStore) -> (f64, usize) {
    let mut worst: f64 = 0.0;
    let mut count = 0;
    for layer in &net.layers {
        for mlp in layer.subnets() {
            for d in &mlp.layers {
                worst = worst.max((sigma_max(&d.effective_weight(store)) - 1.0).abs());
                count += 1;
            }
        }
    }
    (worst, count)
}

#[test]
fn criterion_7_spectral_norm() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let random_5x3 = |rng: &mut ChaCha8Rng| {
        let w = Tensor::matrix(5, 3, (0..15).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
        let mut st = SpectralNormState::new(5, 3, 20, rng);
        (sigma_max(&spectral_normalize(&w, &mut st)) - 1.0).abs()
    };
    let mut worst = random_5x3(&mut rng);
    let mut count = 1;

    // Network weights with the power-iteration state carried across
    // normalizations, as during training (10 steps of 20 iterations).
    let mut store = ParamStore::new();
    let cfg = InvNetConfig {
        hidden: 24,
        spectral_iters: Some(20),
        ..InvNetConfig::new(16)
    };
    let mut net = InvertibleNet::new(&mut store, "net", cfg, &mut rng).unwrap();
    for _ in 0..10 {
        net.refresh_spectral(&store, 20);
    }
    let (w, c) = worst_network_sigma(&net, &store);
    worst = worst.max(w);
    count += c;
    let mut scope = "one random 5x3, warm-started width-24 network";

    if full_run() {
        // Cold start everywhere: 50 random 5x3 matrices and a paper-width
        // network, each with only the 20 iterations of one normalization.
        for _ in 0..50 {
            worst = worst.max(random_5x3(&mut rng));
            count += 1;
        }
        let mut store = ParamStore::new();
        let cfg = InvNetConfig {
            spectral_iters: Some(20),
            ..InvNetConfig::new(256)
        };
        let net = InvertibleNet::new(&mut store, "net", cfg, &mut rng).unwrap();
        let (w, c) = worst_network_sigma(&net, &store);
        worst = worst.max(w);
        count += c;
        scope = "plus cold-start 5x3 draws and width-512 network";
    }
    let diag = Tensor::matrix(2, 2, vec![2.0, 0.0, 0.0, 1.0]).unwrap();
    let mut st = SpectralNormState::from_vectors(vec![1.0, 0.0], vec![1.0, 0.0], 20);
    let exact = spectral_normalize(&diag, &mut st).data() == [1.0, 0.0, 0.0, 0.5];
    let pass = worst <= 0.01 && exact;
    report(
        7,
        pass,
        &format!("{count} matrices ({scope}), max |sigma_max - 1| = {worst:.2e}, diag(2,1) -> diag(1,0.5) exact: {exact}"),
    );
    assert!(pass);
}

/// Independent brute-force relative error: loops over trajectories and
/// snapshots explicitly.
fn brute_force(x: &[[[f64; 2]; 1]; 2], xr: &[[[f64; 2]; 1]; 2]) -> f64 {
    let mut total = 0.0;
    for p in 0..2 {
        let (mut num, mut den) = (0.0, 0.0);
        for k in 0..1 {
            for i in 0..2 {
                num += (x[p][k][i] - xr[p][k][i]).powi(2);
                den += x[p][k][i].powi(2);
            }
        }
        total += (num / den).sqrt();
    }
    total / 2.0
}

#[test]
fn criterion_8_metrics_oracle() {
    let x = [[[3.0, 4.0]], [[1.0, 0.0]]];
    let xr = [[[3.0, 0.0]], [[0.0, 0.0]]];
    let mat = |v: &[[[f64; 2]; 1]; 2]| {
        SnapshotMatrix::from_parts(2, v.iter().flatten().flatten().copied().collect(), vec![vec![1.0], vec![2.0]], 1, 1.0, 0.0)
            .unwrap()
    };
    let (xm, xrm) = (mat(&x), mat(&xr));
    let oracle = brute_force(&x, &xr);
    let proj = projection_error(&xm, |_| Ok(xrm.clone())).unwrap().mean;
    let red = reduction_error(&xm, |mu, _| Ok(xr[mu[0] as usize - 1][0].to_vec())).unwrap().mean;
    let pass = (proj - oracle).abs() <= 1e-14 && (red - oracle).abs() <= 1e-14 && (oracle - 0.9).abs() <= 1e-14;
    report(8, pass, &format!("projection {proj}, reduction {red}, brute force {oracle}"));
    assert!(pass);
}

const MODES: usize = 12;

/// Two coupled fields on 64 points each. Mode `k` carries a sine in the
/// first field and a cosine in the second; its amplitude is `RHO^k` times
/// the parameter component `mu[k]` plus a time oscillation. Every mode has
/// its own parameter, so the solution set has more than 10 dimensions.
fn multi_field(params: &[Vec<f64>], nt: usize) -> SnapshotMatrix {
    const RHO: f64 = 0.75;
    let n = 64;
    let dt = 0.1;
    let pi = std::f64::consts::PI;
    let mut data = Vec::new();
    for mu in params {
        for step in 1..=nt {
            let t = step as f64 * dt;
            let amp: Vec<f64> = (0..MODES)
                .map(|k| RHO.powi(k as i32) * (mu[k] + 0.3 * ((1.0 + 0.37 * k as f64) * t).sin()))
                .collect();
            for field in 0..2 {
                for i in 0..n {
                    let x = (i as f64 + 0.5) / n as f64;
                    let v: f64 = amp
                        .iter()
                        .enumerate()
                        .map(|(k, c)| {
                            let w = (k + 1) as f64 * pi * x;
                            c * if field == 0 { w.sin() } else { 0.5 * w.cos() }
                        })
                        .sum();
                    data.push(v);
                }
            }
        }
    }
    SnapshotMatrix::from_parts(2 * n, data, params.to_vec(), nt, dt, 0.0).unwrap()
}

fn random_params(count: usize, seed: u64) -> Vec<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut draw = move || {
        let sign = if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
        sign * rng.gen_range(0.5..1.0)
    };
    (0..count).map(|_| (0..MODES).map(|_| draw()).collect()).collect()
}

#[test]
fn criterion_9_synthetic_multi_field() {
    let start = Instant::now();
    let dir = tempfile::tempdir().unwrap();
    let nt = 10;
    let files = [
        ("train", random_params(60, 1)),
        ("valid", random_params(4, 2)),
        ("test", random_params(6, 3)),
    ];
    for (name, params) in &files {
        write_snap(&dir.path().join(format!("{name}.snap")), &multi_field(params, nt)).unwrap();
    }
    let load = |name: &str| read_snap(&dir.path().join(format!("{name}.snap"))).unwrap();
    let (train, valid, test) = (load("train"), load("valid"), load("test"));
    let r = 64;
    let pre = Preprocessor::fit(&train, Some(r)).unwrap();

    // Structural invariants on this dataset.
    let basis = pre.pod.as_ref().unwrap();
    let mut ortho: f64 = 0.0;
    for i in 0..r {
        for j in 0..r {
            let d: f64 = basis.mode(i).iter().zip(basis.mode(j)).map(|(a, b)| a * b).sum();
            ortho = ortho.max((d - if i == j { 1.0 } else { 0.0 }).abs());
        }
    }
    let spec = AeSpec::Inv {
        n_layers: 5,
        hidden: 32,
        swap_halves: true,
        spectral_iters: None,
    };
    let full = AeModel::new(pre.clone(), &spec, r, 3).unwrap();
    let z = pre.to_model(&test).unwrap().to_rows();
    let back = full.ae.reconstruct_eval(&full.store, &z).unwrap();
    let roundtrip = z.data().iter().zip(back.data()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    let mask = MaskSpec::new(r, 4).unwrap();
    let masked = mask.apply_tensor(&z);
    let tail_zero = (0..masked.rows()).all(|i| masked.row_slice(i)[4..].iter().all(|v| v.to_bits() == 0));
    let structural = ortho < 1e-10 && roundtrip < 1e-10 && tail_zero;

    let cfg = TrainConfig {
        epochs: 150,
        patience: 75,
        batch_size: 25,
        lr: 3e-3,
        ..TrainConfig::default()
    };
    let dims = [2, 4, 6, 8, 10];
    let mut ae_err = Vec::new();
    let mut rom_proj = Vec::new();
    let mut rom_red = Vec::new();
    for &n in &dims {
        let mut ae = AeModel::new(pre.clone(), &spec, n, 0).unwrap();
        train_autoencoder(&mut ae, &train, &valid, &cfg).unwrap();
        ae_err.push(projection_error(&test, |x| ae.reconstruct(x)).unwrap().mean);

        let rs = RomSpec {
            variant: RomVariant::PodInvDlrom,
            latent_dim: n,
            autoencoder: spec.clone(),
            regressor_hidden: vec![32, 32],
        };
        let mut rom = RomModel::new(&rs, pre.clone(), LatentRegressor::ranges_of(&train), 0).unwrap();
        train_rom(&mut rom, &train, &valid, &cfg).unwrap();
        rom_proj.push(projection_error(&test, |x| rom.reconstruct(x)).unwrap().mean);
        rom_red.push(reduction_error(&test, |mu, t| rom_infer(&rom, mu, t)).unwrap().mean);
    }
    let decreasing = |v: &[f64]| v.windows(2).all(|w| w[1] < w[0]);
    let pass = structural && decreasing(&ae_err) && decreasing(&rom_proj) && decreasing(&rom_red);
    report(
        9,
        pass,
        &format!(
            "n={dims:?}: POD-inv-AE {}, POD-inv-DL-ROM projection {}, reduction {}; invariants ok: {structural}; {:.0} s",
            list(&ae_err),
            list(&rom_proj),
            list(&rom_red),
            start.elapsed().as_secs_f64()
        ),
    );
    assert!(pass);
}
