use deirl::hsv::{self, design, published_trim, HsvModel, HsvParams, DEG};
use deirl::lincontrol::{eigenvalues, is_hurwitz, solve_care, transmission_zeros, LqrProblem};
use deirl::simcore::PlantModel;
use nalgebra::{Complex, DMatrix, DVector};

fn close(a: f64, b: f64, rel: f64) -> bool {
    (a - b).abs() <= rel * b.abs()
}

#[test]
fn refined_trim_matches_published_values() {
    let p = HsvParams::nominal();
    let t = hsv::trim(&p).unwrap();
    assert!(t.residual < 1e-9, "residual {}", t.residual);
    assert!((t.x.alpha() / DEG - published_trim::ALPHA_DEG).abs() < 0.02);
    assert!((t.u.delta_t - published_trim::DELTA_T).abs() < 1e-3);
    assert!((t.u.delta_e / DEG - published_trim::DELTA_E_DEG).abs() < 0.02);
    let f = hsv::forces(&t.x, &t.u, &p).unwrap();
    assert!(close(f.thrust, published_trim::THRUST, 5e-3), "thrust {}", f.thrust);
}

#[test]
fn trim_is_a_fixed_point_of_the_feedback_model() {
    let m = HsvModel::trimmed(HsvParams::nominal()).unwrap();
    let f = m.drift(&DVector::zeros(5));
    assert!(f.rows(0, 4).amax() < 1e-9, "{f}");
}

#[test]
fn open_loop_modes_and_zeros() {
    let m = HsvModel::trimmed(HsvParams::nominal()).unwrap();
    let lin = m.physical_linearization().unwrap();
    assert!(lin.richardson_gap < 1e-4, "gap {}", lin.richardson_gap);
    let ev = eigenvalues(&lin.sys.a);
    let has = |want: Complex<f64>, tol: f64| ev.iter().any(|l| (l - want).norm() <= tol);
    assert!(has(Complex::new(-0.8291, 0.0), 0.02 * 0.8291), "{ev:?}");
    assert!(has(Complex::new(0.7165, 0.0), 0.02 * 0.7165), "{ev:?}");
    assert!(has(Complex::new(-1e-5, 0.0276), 5e-4), "{ev:?}");
    assert!(has(Complex::new(0.0005, 0.0), 5e-4), "{ev:?}");
    assert!(!is_hurwitz(&lin.sys.a).0);

    let mut c = DMatrix::zeros(2, 5);
    c[(0, 0)] = 1.0;
    c[(1, 1)] = 1.0;
    let z = transmission_zeros(&lin.sys, &c).unwrap();
    let hasz = |want: f64| z.iter().any(|l| l.im.abs() < 1e-9 && close(l.re, want, 0.02));
    assert!(hasz(8.3938) && hasz(-8.4620), "{z:?}");

    // Each zero makes the Rosenbrock system matrix singular.
    for zz in z.iter().filter(|l| l.norm() > 1.0) {
        let mut ros = DMatrix::<Complex<f64>>::zeros(7, 7);
        for i in 0..5 {
            for j in 0..5 {
                ros[(i, j)] = Complex::new(-lin.sys.a[(i, j)], 0.0) + if i == j { *zz } else { Complex::new(0.0, 0.0) };
            }
            for j in 0..2 {
                ros[(i, 5 + j)] = Complex::new(-lin.sys.b[(i, j)], 0.0);
            }
        }
        for i in 0..2 {
            for j in 0..5 {
                ros[(5 + i, j)] = Complex::new(c[(i, j)], 0.0);
            }
        }
        let sv = ros.svd(false, false).singular_values;
        assert!(sv.min() < 1e-8 * sv.max(), "{zz}: {sv}");
    }
}

#[test]
fn short_period_pole_falls_with_lift() {
    let want = [(1.0, 0.7165), (0.9, 0.7011), (0.75, 0.6681)];
    for (nu, pole) in want {
        let m = HsvModel::trimmed(HsvParams::nominal().with_nu(nu)).unwrap();
        let a = m.physical_linearization().unwrap().sys.a;
        let top = eigenvalues(&a).iter().map(|l| l.re).fold(f64::MIN, f64::max);
        assert!(close(top, pole, 0.02), "nu {nu}: {top}");
    }
}

#[test]
fn published_initial_gains_stabilize_their_blocks() {
    let aug = HsvModel::trimmed(HsvParams::nominal()).unwrap().augmented();
    let sys = hsv::linearize_at_origin(&aug).unwrap();
    let [l1, l2] = hsv::partition();
    let k1 = DMatrix::from_row_slice(1, 2, &design::K0_1);
    let k2 = DMatrix::from_row_slice(1, 4, &design::K0_2);
    assert!(is_hurwitz(&sys.block(&l1.states, &l1.controls).closed_loop(&k1)).0);
    assert!(is_hurwitz(&sys.block(&l2.states, &l2.controls).closed_loop(&k2)).0);
    let b11 = sys.block(&l1.states, &l1.controls).b;
    assert_eq!(b11.shape(), (2, 1));
    let q = DMatrix::from_diagonal(&DVector::from_row_slice(&design::Q1));
    let r = DMatrix::from_diagonal(&DVector::from_row_slice(&design::R1));
    let prob = LqrProblem::new(sys.block(&l1.states, &l1.controls), q, r).unwrap();
    let k = solve_care(&prob, &k1).unwrap().k;
    assert!((k[(0, 0)] - 0.2582).abs() < 1e-4 && (k[(0, 1)] - 4.3577).abs() < 1e-3, "{k}");
}
