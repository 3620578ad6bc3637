use deirl::symops::{bilinear, build_compression, delta_matrix, mat_of_vec, tri, vec_of_mat};
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;

fn vector(n: usize) -> impl Strategy<Value = DVector<f64>> {
    prop::collection::vec(-10.0..10.0f64, n).prop_map(DVector::from_vec)
}

fn symmetric(n: usize) -> impl Strategy<Value = DMatrix<f64>> {
    prop::collection::vec(-10.0..10.0f64, n * n).prop_map(move |v| {
        let m = DMatrix::from_vec(n, n, v);
        (&m + m.transpose()) / 2.0
    })
}

fn kron(x: &DVector<f64>, y: &DVector<f64>) -> DVector<f64> {
    DVector::from_iterator(x.len() * y.len(), x.iter().flat_map(|a| y.iter().map(move |b| a * b)))
}

fn case() -> impl Strategy<Value = (DVector<f64>, DVector<f64>, DMatrix<f64>)> {
    (1usize..=6).prop_flat_map(|n| (vector(n), vector(n), symmetric(n)))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(512))]

    #[test]
    fn bilinear_is_compressed_kronecker((x, y, _p) in case()) {
        let w = build_compression(x.len());
        let lhs = bilinear(&x, &y).unwrap().into_inner();
        let rhs = &w.w * kron(&x, &y);
        prop_assert!((&lhs - &rhs).norm() <= 1e-12 * (1.0 + lhs.norm()));
    }

    #[test]
    fn bilinear_pairs_with_vec_to_give_the_quadratic_form((x, y, p) in case()) {
        let v = vec_of_mat(&p).unwrap().into_inner();
        let lhs = bilinear(&x, &y).unwrap().into_inner().dot(&v);
        let rhs = (x.transpose() * &p * &y)[(0, 0)];
        prop_assert!((lhs - rhs).abs() <= 1e-12 * (1.0 + rhs.abs()));
    }

    #[test]
    fn right_inverse_recovers_the_square((x, _y, _p) in case()) {
        let w = build_compression(x.len());
        let lhs = &w.w_rinv * bilinear(&x, &x).unwrap().into_inner();
        let want = kron(&x, &x);
        prop_assert!((&lhs - &want).norm() <= 1e-12 * (1.0 + want.norm()));
    }

    #[test]
    fn bilinear_is_symmetric((x, y, _p) in case()) {
        prop_assert_eq!(bilinear(&x, &y).unwrap(), bilinear(&y, &x).unwrap());
    }

    #[test]
    fn vec_round_trips_on_symmetric_matrices((_x, _y, p) in case()) {
        let back = mat_of_vec(&vec_of_mat(&p).unwrap());
        prop_assert!((&back - &p).norm() <= 1e-14 * (1.0 + p.norm()));
        prop_assert_eq!(vec_of_mat(&p).unwrap().data().len(), tri(p.nrows()));
    }

    #[test]
    fn lift_maps_square_to_mixed_form((x, _y, p) in case()) {
        let n = x.len();
        let m = DMatrix::from_fn(n, n, |i, j| p[(i, j)] + (i as f64) - 0.5 * j as f64);
        let w = build_compression(n);
        let lhs = w.lift(&m) * bilinear(&x, &x).unwrap().into_inner();
        let rhs = bilinear(&x, &(&m * &x)).unwrap().into_inner();
        prop_assert!((&lhs - &rhs).norm() <= 1e-11 * (1.0 + rhs.norm()));
    }

    #[test]
    fn delta_rows_difference_the_quadratic_form((x, y, p) in case()) {
        let d = delta_matrix(&[x.clone(), y.clone()]).unwrap();
        let v = vec_of_mat(&p).unwrap().into_inner();
        let lhs = (d * v)[0];
        let rhs = (y.transpose() * &p * &y)[(0, 0)] - (x.transpose() * &p * &x)[(0, 0)];
        prop_assert!((lhs - rhs).abs() <= 1e-11 * (1.0 + rhs.abs()));
    }
}

#[test]
fn compression_has_unit_spectral_norm_and_orthogonal_rows() {
    for n in 1..=6 {
        let w = build_compression(n).w;
        let s = w.clone().svd(false, false).singular_values;
        assert!((s.max() - 1.0).abs() <= 1e-12, "n {n}: {}", s.max());
        let g = &w * w.transpose();
        for i in 0..g.nrows() {
            assert!(g[(i, i)] > 0.0);
            for j in 0..g.ncols() {
                if i != j {
                    assert_eq!(g[(i, j)], 0.0);
                }
            }
        }
    }
}
