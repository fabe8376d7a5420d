//! POD modes and singular values checked against a nalgebra SVD.

use invrom::dataset::SnapshotMatrix;
use invrom::pod::compute_pod;
use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn case(n: usize, m: usize, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data: Vec<f64> = (0..n * m).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let x = SnapshotMatrix::from_parts(n, data.clone(), vec![vec![0.0]], m, 1.0, 0.0).unwrap();
    let r = n.min(m);
    let basis = compute_pod(&x, r).unwrap();

    let a = DMatrix::from_column_slice(n, m, &data);
    let svd = a.svd(true, false);
    let mut order: Vec<usize> = (0..r).collect();
    order.sort_by(|&i, &j| svd.singular_values[j].total_cmp(&svd.singular_values[i]));
    let u = svd.u.unwrap();
    for (k, &j) in order.iter().enumerate() {
        let s = svd.singular_values[j];
        assert!((basis.singular_values()[k] - s).abs() < 1e-10 * s.max(1.0), "{n}x{m} sigma {k}");
        let col: Vec<f64> = u.column(j).iter().copied().collect();
        let dot: f64 = col.iter().zip(basis.mode(k)).map(|(p, q)| p * q).sum();
        assert!((dot.abs() - 1.0).abs() < 1e-9, "{n}x{m} mode {k}: |<u,u_ref>| = {}", dot.abs());
    }
}

#[test]
fn tall_gram_branch_matches_svd() {
    case(6, 9, 1);
    case(12, 40, 2);
}

#[test]
fn wide_gram_branch_matches_svd() {
    case(9, 6, 3);
    case(40, 12, 4);
}
