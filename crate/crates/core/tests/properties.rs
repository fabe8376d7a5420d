use invrom::autoencoders::MaskSpec;
use invrom::dataset::{decode_snap, encode_snap, Normalizer, SnapshotMatrix};
use invrom::invnet::{clamped_exp, InvNetConfig, InvertibleNet};
use invrom::metrics::relative_error;
use invrom::pod::compute_pod;
use invrom::{ParamStore, Tensor};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::f64::consts::FRAC_PI_2;

fn snapshots(n_rows: usize, n_traj: usize, nt: usize, seed: u64, scale: f64) -> SnapshotMatrix {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = (0..n_rows * n_traj * nt).map(|_| scale * rng.gen_range(-1.0..1.0)).collect();
    let params = (0..n_traj).map(|i| vec![i as f64, 0.5 * i as f64]).collect();
    SnapshotMatrix::from_parts(n_rows, data, params, nt, 0.25, 0.0).unwrap()
}

fn random_tensor(rows: usize, cols: usize, seed: u64, scale: f64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::matrix(rows, cols, (0..rows * cols).map(|_| scale * rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn invertible_net_round_trip(
        half in 1usize..8,
        n_layers in 1usize..7,
        swap in any::<bool>(),
        sn in any::<bool>(),
        seed in any::<u64>(),
        scale in 0.01f64..10.0,
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let cfg = InvNetConfig {
            input_dim: 2 * half,
            n_layers,
            hidden: 7,
            swap_halves: swap,
            spectral_iters: sn.then_some(3),
        };
        let mut net = InvertibleNet::new(&mut store, "net", cfg, &mut rng).unwrap();
        if sn {
            net.refresh_spectral(&store, 3);
        }
        let x = random_tensor(5, 2 * half, seed ^ 1, scale);
        let back = net.inverse_eval(&store, &net.forward_eval(&store, &x).unwrap()).unwrap();
        for (a, b) in x.data().iter().zip(back.data()) {
            prop_assert!((a - b).abs() <= 1e-10 * scale.max(1.0), "{a} vs {b}");
        }
    }

    #[test]
    fn clamped_exp_stays_in_band(s in -1e6f64..1e6) {
        let v = clamped_exp(s);
        prop_assert!(v > (-FRAC_PI_2).exp() && v < FRAC_PI_2.exp());
    }

    #[test]
    fn mask_is_idempotent_and_zeroes_the_tail(full in 1usize..12, n_frac in 0.0f64..=1.0, seed in any::<u64>()) {
        let n = (n_frac * full as f64).round() as usize;
        let mask = MaskSpec::new(full, n).unwrap();
        let y = random_tensor(3, full, seed, 2.0);
        let once = mask.apply_tensor(&y);
        prop_assert_eq!(&mask.apply_tensor(&once), &once);
        for r in 0..3 {
            for c in 0..full {
                let expected = if c < n { y.get(r, c) } else { 0.0 };
                prop_assert_eq!(once.get(r, c).to_bits(), expected.to_bits());
            }
        }
    }

    #[test]
    fn relative_error_is_scale_invariant(seed in any::<u64>(), c in 1e-3f64..1e3) {
        let x = snapshots(4, 3, 5, seed, 1.0);
        let approx = snapshots(4, 3, 5, seed ^ 7, 1.0);
        let scaled = |m: &SnapshotMatrix| m.with_data(4, m.data().iter().map(|v| c * v).collect()).unwrap();
        let e = relative_error(&x, &approx).unwrap().mean;
        let es = relative_error(&scaled(&x), &scaled(&approx)).unwrap().mean;
        prop_assert!((e - es).abs() <= 1e-12 * e.max(1.0));
        prop_assert_eq!(relative_error(&x, &x).unwrap().mean, 0.0);
    }

    #[test]
    fn normalizer_round_trip(seed in any::<u64>(), scale in 1e-3f64..1e3, shift in -1e3f64..1e3) {
        let x = snapshots(5, 2, 4, seed, scale);
        let x = x.with_data(5, x.data().iter().map(|v| v + shift).collect()).unwrap();
        let norm = Normalizer::fit(&x).unwrap();
        let z = norm.normalize(&x);
        prop_assert!(z.data().iter().all(|&v| (-1e-12..=1.0 + 1e-12).contains(&v)));
        let back = norm.denormalize(&z);
        for (a, b) in x.data().iter().zip(back.data()) {
            prop_assert!((a - b).abs() <= 1e-12 * (scale + shift.abs()));
        }
    }

    #[test]
    fn snapshot_container_is_bit_exact(seed in any::<u64>(), rows in 1usize..6, traj in 1usize..4, nt in 1usize..5) {
        let x = snapshots(rows, traj, nt, seed, 1e3);
        prop_assert_eq!(decode_snap(&encode_snap(&x).unwrap()).unwrap(), x);
    }

    #[test]
    fn pod_basis_is_orthonormal_and_projection_idempotent(seed in any::<u64>(), r in 1usize..6) {
        let x = snapshots(7, 2, 4, seed, 1.0);
        let basis = compute_pod(&x, r).unwrap();
        for i in 0..r {
            for j in 0..r {
                let d: f64 = basis.mode(i).iter().zip(basis.mode(j)).map(|(a, b)| a * b).sum();
                let target = if i == j { 1.0 } else { 0.0 };
                prop_assert!((d - target).abs() < 1e-10, "<{}, {}> = {}", i, j, d);
            }
        }
        let p = basis.reconstruct_matrix(&basis.project_matrix(&x).unwrap()).unwrap();
        let pp = basis.reconstruct_matrix(&basis.project_matrix(&p).unwrap()).unwrap();
        for (a, b) in p.data().iter().zip(pp.data()) {
            prop_assert!((a - b).abs() < 1e-10);
        }
    }
}
