use coupling_core::linalg::{pca_fit_2d, svd_full, Matrix};
use proptest::prelude::*;

fn square(max_d: usize) -> impl Strategy<Value = Matrix> {
    (1..=max_d).prop_flat_map(|d| {
        prop::collection::vec(-10.0f64..10.0, d * d).prop_map(move |v| Matrix::new(d, d, v).unwrap())
    })
}

fn orthogonality_error(q: &Matrix) -> f64 {
    q.t_matmul(q)
        .unwrap()
        .sub(&Matrix::identity(q.cols()))
        .unwrap()
        .frobenius_norm()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn svd_reconstructs_and_is_orthogonal(m in square(24)) {
        let svd = svd_full(&m).unwrap();
        let err = svd.reconstruct().sub(&m).unwrap().frobenius_norm();
        prop_assert!(err <= 1e-10 * m.frobenius_norm().max(1.0));
        prop_assert!(orthogonality_error(&svd.u) <= 1e-10);
        prop_assert!(orthogonality_error(&svd.v) <= 1e-10);
        prop_assert!(svd.s.windows(2).all(|w| w[0] >= w[1]));
        prop_assert!(svd.s.iter().all(|&s| s >= 0.0));
    }

    #[test]
    fn svd_handles_low_rank(a in prop::collection::vec(-5.0f64..5.0, 12), b in prop::collection::vec(-5.0f64..5.0, 12)) {
        // rank one: a bᵀ
        let m = Matrix::from_fn(12, 12, |i, j| a[i] * b[j]);
        let svd = svd_full(&m).unwrap();
        prop_assert!(svd.reconstruct().sub(&m).unwrap().frobenius_norm() <= 1e-10 * m.frobenius_norm().max(1.0));
        prop_assert!(orthogonality_error(&svd.u) <= 1e-10);
        prop_assert!(orthogonality_error(&svd.v) <= 1e-10);
    }

    #[test]
    fn svd_is_bit_deterministic(m in square(10)) {
        let a = svd_full(&m).unwrap();
        let b = svd_full(&m).unwrap();
        prop_assert_eq!(a.u.data(), b.u.data());
        prop_assert_eq!(&a.s, &b.s);
        prop_assert_eq!(a.v.data(), b.v.data());
    }

    #[test]
    fn pca_of_planar_cloud_preserves_distances(
        coords in prop::collection::vec((-3.0f64..3.0, -3.0f64..3.0), 4..30),
        angle in 0.0f64..std::f64::consts::TAU,
    ) {
        // plane spanned by two orthonormal vectors in R^6, offset from origin
        let (c, s) = (angle.cos(), angle.sin());
        let e1 = [c, s, 0.0, 0.0, 0.0, 0.0];
        let e2 = [0.0, 0.0, c, 0.0, s, 0.0];
        let pts: Vec<Vec<f64>> = coords
            .iter()
            .map(|&(a, b)| (0..6).map(|k| 1.0 + a * e1[k] + b * e2[k]).collect())
            .collect();
        let spread = coords.iter().map(|&(a, b)| a.abs() + b.abs()).fold(0.0, f64::max);
        prop_assume!(spread > 0.5);
        let m = Matrix::from_rows(&pts).unwrap();
        let Ok(pca) = pca_fit_2d(&m) else { return Ok(()); };
        let proj: Vec<[f64; 2]> = pts.iter().map(|p| pca.project(p)).collect();
        for i in 0..pts.len() {
            for j in 0..pts.len() {
                let orig: f64 = pts[i].iter().zip(&pts[j]).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
                let low = ((proj[i][0] - proj[j][0]).powi(2) + (proj[i][1] - proj[j][1]).powi(2)).sqrt();
                prop_assert!((orig - low).abs() <= 1e-8);
            }
        }
    }
}

#[test]
fn svd_at_largest_property_size() {
    use rand::SeedableRng;
    use rand_distr::{Distribution, StandardNormal};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(256);
    let m = Matrix::from_fn(256, 256, |_, _| StandardNormal.sample(&mut rng));
    let svd = svd_full(&m).unwrap();
    assert!(svd.reconstruct().sub(&m).unwrap().frobenius_norm() <= 1e-10 * m.frobenius_norm());
    assert!(orthogonality_error(&svd.u) <= 1e-10);
    assert!(orthogonality_error(&svd.v) <= 1e-10);
}
