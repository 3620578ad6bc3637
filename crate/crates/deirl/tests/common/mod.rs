#![allow(dead_code)]

use deirl::lincontrol::{is_hurwitz, LtiSystem};
use nalgebra::{DMatrix, DVector};
use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform(rng: &mut ChaCha8Rng, r: usize, c: usize, lo: f64, hi: f64) -> DMatrix<f64> {
    DMatrix::from_fn(r, c, |_, _| rng.random_range(lo..hi))
}

pub fn random_vector(rng: &mut ChaCha8Rng, n: usize) -> DVector<f64> {
    DVector::from_fn(n, |_, _| rng.random_range(-1.0..1.0))
}

pub fn random_symmetric(rng: &mut ChaCha8Rng, n: usize) -> DMatrix<f64> {
    let m = uniform(rng, n, n, -1.0, 1.0);
    (&m + m.transpose()) / 2.0
}

/// Ackermann placement of `−1, …, −n` through the first input.
pub fn place_first_input(sys: &LtiSystem) -> Option<DMatrix<f64>> {
    let n = sys.n();
    let b = sys.b.column(0).into_owned();
    let mut ctrb = DMatrix::zeros(n, n);
    let mut col = b.clone();
    for k in 0..n {
        ctrb.set_column(k, &col);
        col = &sys.a * col;
    }
    let mut phi = DMatrix::identity(n, n);
    for i in 1..=n {
        phi *= &sys.a + DMatrix::identity(n, n) * i as f64;
    }
    let inv = ctrb.try_inverse()?;
    let mut en = DMatrix::zeros(1, n);
    en[(0, n - 1)] = 1.0;
    let row = en * inv * phi;
    let mut k = DMatrix::zeros(sys.m(), n);
    k.set_row(0, &row.row(0));
    Some(k)
}

/// A random controllable system with a stabilizing gain placing the
/// closed-loop poles at `−1, …, −n`.
pub fn random_stabilizable(rng: &mut ChaCha8Rng, n: usize, m: usize) -> (LtiSystem, DMatrix<f64>) {
    loop {
        let sys = LtiSystem::new(uniform(rng, n, n, -2.0, 2.0), uniform(rng, n, m, -1.0, 1.0)).unwrap();
        let Some(k) = place_first_input(&sys) else { continue };
        if k.amax() > 1e3 {
            continue;
        }
        if is_hurwitz(&sys.closed_loop(&k)).0 {
            return (sys, k);
        }
    }
}

/// Stabilizing CARE solution from the matrix sign function of the
/// Hamiltonian, with determinant scaling.
pub fn care_by_sign_function(a: &DMatrix<f64>, b: &DMatrix<f64>, q: &DMatrix<f64>, r: &DMatrix<f64>) -> DMatrix<f64> {
    let n = a.nrows();
    let g = b * r.clone().try_inverse().unwrap() * b.transpose();
    let mut z = DMatrix::zeros(2 * n, 2 * n);
    z.view_mut((0, 0), (n, n)).copy_from(a);
    z.view_mut((0, n), (n, n)).copy_from(&-&g);
    z.view_mut((n, 0), (n, n)).copy_from(&-q);
    z.view_mut((n, n), (n, n)).copy_from(&-a.transpose());
    for _ in 0..200 {
        let inv = z.clone().try_inverse().unwrap();
        let c = z.determinant().abs().powf(-1.0 / (2 * n) as f64);
        let next = (&z * c + inv / c) / 2.0;
        let done = (&next - &z).norm() <= 1e-14 * next.norm();
        z = next;
        if done {
            break;
        }
    }
    let w11 = z.view((0, 0), (n, n)).into_owned();
    let w12 = z.view((0, n), (n, n)).into_owned();
    let w21 = z.view((n, 0), (n, n)).into_owned();
    let w22 = z.view((n, n), (n, n)).into_owned();
    let eye = DMatrix::<f64>::identity(n, n);
    let mut lhs = DMatrix::zeros(2 * n, n);
    lhs.view_mut((0, 0), (n, n)).copy_from(&w12);
    lhs.view_mut((n, 0), (n, n)).copy_from(&(w22 + &eye));
    let mut rhs = DMatrix::zeros(2 * n, n);
    rhs.view_mut((0, 0), (n, n)).copy_from(&-(w11 + &eye));
    rhs.view_mut((n, 0), (n, n)).copy_from(&-w21);
    let p = lhs.svd(true, true).solve(&rhs, 1e-14).unwrap();
    (&p + p.transpose()) / 2.0
}

/// `∫₀^∞ e^{Aᵀt} S e^{At} dt` by Simpson on `[0, h]` followed by doubling
/// `P(2T) = P(T) + e^{AᵀT} P(T) e^{AT}`.
pub fn lyapunov_integral(a: &DMatrix<f64>, s: &DMatrix<f64>) -> DMatrix<f64> {
    let h = 1e-3 / (1.0 + a.norm());
    let steps = 64;
    let dt = h / steps as f64;
    let mut p = DMatrix::zeros(a.nrows(), a.ncols());
    for i in 0..=steps {
        let e = (a * (i as f64 * dt)).exp();
        let w = if i == 0 || i == steps {
            1.0
        } else if i % 2 == 1 {
            4.0
        } else {
            2.0
        };
        p += e.transpose() * s * &e * (w * dt / 3.0);
    }
    let mut e = (a * h).exp();
    for _ in 0..80 {
        p = &p + e.transpose() * &p * &e;
        e = &e * &e;
        if e.norm() < 1e-18 {
            break;
        }
    }
    p
}

use deirl::eirl::{self, DriftResidualModel, Injection, LoopResult, LoopSpec};
use deirl::lincontrol::{kleinman, LqrProblem};
use deirl::simcore::{LtiPlant, OdeOptions, SignalSpec, SignalTerm, Trig};

pub fn tight_ode() -> OdeOptions {
    OdeOptions { rtol: 1e-11, atol: 1e-13, ..OdeOptions::default() }
}

/// Sum of three sinusoids with random amplitudes and periods in `[1, 12]` s.
pub fn random_probe(rng: &mut ChaCha8Rng) -> SignalSpec {
    let terms = (0..3)
        .map(|i| {
            let kind = if i % 2 == 0 { Trig::Sin } else { Trig::Cos };
            SignalTerm::with_period(rng.random_range(0.5..1.5), rng.random_range(1.0..12.0), kind)
        })
        .collect();
    SignalSpec { terms, bias: 0.0 }
}

/// `max_i ‖K_i^learned − K_i^Kleinman‖ / (1 + ‖K_i^Kleinman‖)`, with
/// Kleinman run on `block` from the same `K_0`.
pub fn discrepancy(res: &LoopResult, block: &LtiSystem, lp: &LoopSpec) -> f64 {
    let prob = LqrProblem::new(block.clone(), lp.q.clone(), lp.r.clone()).unwrap();
    let tr = kleinman(&prob, &lp.k0, lp.iterations).unwrap();
    assert_eq!(res.gains.len(), tr.k_seq.len(), "{:?}", res.failure);
    res.gains.iter().zip(&tr.k_seq).map(|(a, b)| (a - b).norm() / (1.0 + b.norm())).fold(0.0, f64::max)
}

/// Centralized EIRL on a random stabilizable plant against Kleinman.
pub fn random_eirl_discrepancy(rng: &mut ChaCha8Rng, n: usize, m: usize) -> f64 {
    let (sys, k0) = random_stabilizable(rng, n, m);
    let lp = LoopSpec {
        id: 0,
        states: (0..n).collect(),
        controls: (0..m).collect(),
        q: DMatrix::identity(n, n),
        r: DMatrix::identity(m, m),
        k0,
        ts: 0.5,
        samples: 2 * deirl::symops::tri(n) + 5,
        iterations: 5,
        probe: (0..m).map(|_| random_probe(rng)).collect(),
        reference: vec![],
    };
    let plant = LtiPlant(sys.clone());
    let drift = DriftResidualModel::new(plant.clone()).unwrap();
    let x0 = random_vector(rng, n);
    let res = eirl::run_eirl(&plant, &drift, &lp, &[], Injection::Si, &x0, &tight_ode(), None).unwrap();
    discrepancy(&res, &sys, &lp)
}
