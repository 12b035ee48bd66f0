use dpglm::glm::GlmDataset;
use dpglm::subspace::{feature_projector, DEFAULT_REL_TOL};
use ndarray::{Array1, Array2};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

fn gaussian(rng: &mut impl Rng, n: usize, p: usize) -> Array2<f64> {
    Array2::from_shape_fn((n, p), |_| rng.sample(StandardNormal))
}

fn dataset(x: Array2<f64>) -> GlmDataset<f64> {
    let n = x.nrows();
    GlmDataset::new(x, Array1::ones(n)).unwrap()
}

/// Rank of a small Gram matrix by Cholesky with a relative pivot threshold.
fn gram_rank(x: &Array2<f64>) -> usize {
    let g = x.dot(&x.t());
    let n = g.nrows();
    let scale = (0..n).map(|i| g[[i, i]]).fold(0.0, f64::max);
    let mut l = Array2::<f64>::zeros((n, n));
    let mut rank = 0;
    for j in 0..n {
        let d = g[[j, j]] - (0..j).map(|k| l[[j, k]] * l[[j, k]]).sum::<f64>();
        if d <= 1e-10 * scale {
            continue;
        }
        rank += 1;
        l[[j, j]] = d.sqrt();
        for i in (j + 1)..n {
            let s = g[[i, j]] - (0..j).map(|k| l[[i, k]] * l[[j, k]]).sum::<f64>();
            l[[i, j]] = s / l[[j, j]];
        }
    }
    rank
}

#[test]
fn wide_gaussian_features_have_full_row_rank() {
    for seed in 0..10 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = rng.random_range(2..12);
        let p = n + rng.random_range(1..30);
        let x = gaussian(&mut rng, n, p);
        let m = feature_projector(&dataset(x.clone()), DEFAULT_REL_TOL).unwrap();
        assert_eq!(m.rank(), n);
        assert_eq!(gram_rank(&x), n);
        assert!(m.orthonormality_error() < 1e-10);
    }
}

#[test]
fn planted_rank_is_recovered_and_padding_preserves_it() {
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let (n, p, r) = (60, 25, 4);
    let x = gaussian(&mut rng, n, r).dot(&gaussian(&mut rng, r, p));
    let data = dataset(x);
    let m = feature_projector(&data, DEFAULT_REL_TOL).unwrap();
    assert_eq!(m.rank(), r);
    let padded = data.clone().with_dim(400).unwrap();
    let mp = feature_projector(&padded, DEFAULT_REL_TOL).unwrap();
    assert_eq!(mp.rank(), r);
    assert_eq!(mp.dim(), 400);
}

#[test]
fn projector_is_symmetric_and_idempotent() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let x = gaussian(&mut rng, 6, 3).dot(&gaussian(&mut rng, 3, 10));
    let m = feature_projector(&dataset(x), DEFAULT_REL_TOL)
        .unwrap()
        .projector_matrix();
    let sym = (&m - &m.t()).iter().fold(0.0f64, |a, v| a.max(v.abs()));
    let idem = (&m.dot(&m) - &m).iter().fold(0.0f64, |a, v| a.max(v.abs()));
    assert!(sym < 1e-10 && idem < 1e-10, "{sym} {idem}");
}

#[test]
fn gaussian_noise_energy_in_subspace_is_rank_times_variance() {
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let (p, r, sigma) = (40, 5, 0.7);
    let x = gaussian(&mut rng, 30, r).dot(&gaussian(&mut rng, r, p));
    let m = feature_projector(&dataset(x), DEFAULT_REL_TOL).unwrap();
    let draws = 100_000;
    let mut total = 0.0;
    for _ in 0..draws {
        let b = Array1::from_shape_fn(p, |_| sigma * rng.sample::<f64, _>(StandardNormal));
        total += m.seminorm(b.view()).unwrap().powi(2);
    }
    let mean = total / draws as f64;
    let want = r as f64 * sigma * sigma;
    assert!((mean / want - 1.0).abs() < 0.02, "{mean} vs {want}");
}

#[test]
fn seminorm_axioms_on_many_samples() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x = gaussian(&mut rng, 5, 12);
    let m = feature_projector(&dataset(x), DEFAULT_REL_TOL).unwrap();
    for _ in 0..10_000 {
        let u = Array1::from_shape_fn(12, |_| rng.random_range(-5.0..5.0));
        let v = Array1::from_shape_fn(12, |_| rng.random_range(-5.0..5.0));
        let a: f64 = rng.random_range(-10.0..10.0);
        let su = m.seminorm(u.view()).unwrap();
        let sv = m.seminorm(v.view()).unwrap();
        let suv = m.seminorm((&u + &v).view()).unwrap();
        assert!(suv <= su + sv + 1e-12);
        let sa = m.seminorm(u.mapv(|t| a * t).view()).unwrap();
        assert!((sa - a.abs() * su).abs() <= 1e-12 * (1.0 + sa));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn projection_identities(seed in 0u64..10_000, n in 1usize..8, p in 1usize..15) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let m = feature_projector(&dataset(gaussian(&mut rng, n, p)), DEFAULT_REL_TOL).unwrap();
        prop_assert!(m.rank() <= n.min(p));
        let v = Array1::from_shape_fn(p, |_| rng.random_range(-3.0..3.0));
        let mv = m.project(v.view()).unwrap();
        let mmv = m.project(mv.view()).unwrap();
        prop_assert!((&mmv - &mv).iter().all(|d| d.abs() < 1e-12));
        let r = &v - &mv;
        let lhs = v.dot(&v);
        let rhs = mv.dot(&mv) + r.dot(&r);
        prop_assert!((lhs - rhs).abs() <= 1e-10 * lhs.max(1.0));
        // vectors in the span are fixed points
        let inside = m.basis().dot(&Array1::from_shape_fn(m.rank(), |_| rng.random_range(-2.0..2.0)));
        let back = m.project(inside.view()).unwrap();
        prop_assert!((&back - &inside).iter().all(|d| d.abs() < 1e-12));
        prop_assert!((m.seminorm(inside.view()).unwrap() - inside.dot(&inside).sqrt()).abs() < 1e-12);
    }
}
