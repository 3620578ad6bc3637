//! Linear-systems backbone: Lyapunov and Riccati solvers, Kleinman's policy
//! iteration, finite-difference linearization, transmission zeros and the
//! closed-loop frequency maps of the integral-augmented feedback loop.

use nalgebra::{Complex, DMatrix, DVector};

use crate::{Error, Result};

/// Margin below zero the spectral abscissa must clear to count as Hurwitz.
pub const EPS_HURWITZ: f64 = 1e-9;

#[derive(Debug, Clone)]
pub struct LtiSystem {
    pub a: DMatrix<f64>,
    pub b: DMatrix<f64>,
}

impl LtiSystem {
    pub fn new(a: DMatrix<f64>, b: DMatrix<f64>) -> Result<Self> {
        if !a.is_square() || b.nrows() != a.nrows() {
            return Err(Error::Dimension(format!(
                "A is {}x{}, B is {}x{}",
                a.nrows(),
                a.ncols(),
                b.nrows(),
                b.ncols()
            )));
        }
        if a.iter().chain(b.iter()).any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("system matrices".into()));
        }
        Ok(Self { a, b })
    }

    pub fn n(&self) -> usize {
        self.a.nrows()
    }

    pub fn m(&self) -> usize {
        self.b.ncols()
    }

    /// Sub-system on the given state and input index sets.
    pub fn block(&self, states: &[usize], inputs: &[usize]) -> LtiSystem {
        LtiSystem {
            a: self.a.select_rows(states).select_columns(states),
            b: self.b.select_rows(states).select_columns(inputs),
        }
    }

    pub fn closed_loop(&self, k: &DMatrix<f64>) -> DMatrix<f64> {
        &self.a - &self.b * k
    }
}

pub fn eigenvalues(a: &DMatrix<f64>) -> Vec<Complex<f64>> {
    let mut ev: Vec<_> = a.clone().complex_eigenvalues().iter().copied().collect();
    ev.sort_by(|x, y| x.re.total_cmp(&y.re).then(x.im.total_cmp(&y.im)));
    ev
}

/// Returns `(is_hurwitz, spectral abscissa)`.
pub fn is_hurwitz(a: &DMatrix<f64>) -> (bool, f64) {
    let abscissa = eigenvalues(a).iter().map(|l| l.re).fold(f64::NEG_INFINITY, f64::max);
    (abscissa < -EPS_HURWITZ, abscissa)
}

fn complex(a: &DMatrix<f64>) -> DMatrix<Complex<f64>> {
    a.map(|v| Complex::new(v, 0.0))
}

/// PBH rank test: `[A − λI, B]` has full row rank at every eigenvalue of `A`
/// with real part ≥ `-margin`.
fn pbh(a: &DMatrix<f64>, b: &DMatrix<f64>, margin: f64) -> bool {
    let n = a.nrows();
    let scale = a.norm().max(b.norm()).max(1.0);
    eigenvalues(a).into_iter().filter(|l| l.re >= -margin).all(|l| {
        let mut m = DMatrix::<Complex<f64>>::zeros(n, n + b.ncols());
        m.view_mut((0, 0), (n, n)).copy_from(&(complex(a) - DMatrix::identity(n, n) * l));
        m.view_mut((0, n), (n, b.ncols())).copy_from(&complex(b));
        let sv = m.svd(false, false).singular_values;
        sv.iter().filter(|s| **s > 1e-10 * scale).count() == n
    })
}

pub fn is_stabilizable(sys: &LtiSystem) -> bool {
    pbh(&sys.a, &sys.b, 0.0)
}

/// Detectability of `(C, A)` by duality with stabilizability of `(Aᵀ, Cᵀ)`.
pub fn is_detectable(c: &DMatrix<f64>, a: &DMatrix<f64>) -> bool {
    pbh(&a.transpose(), &c.transpose(), 0.0)
}

/// Symmetric positive semidefinite square root via the eigendecomposition.
pub fn psd_sqrt(q: &DMatrix<f64>) -> DMatrix<f64> {
    let e = q.clone().symmetric_eigen();
    let d = e.eigenvalues.map(|v| v.max(0.0).sqrt());
    &e.eigenvectors * DMatrix::from_diagonal(&d) * e.eigenvectors.transpose()
}

pub fn min_eig(p: &DMatrix<f64>) -> f64 {
    let s = (p + p.transpose()) / 2.0;
    s.symmetric_eigen().eigenvalues.min()
}

#[derive(Debug, Clone)]
pub struct LqrProblem {
    pub sys: LtiSystem,
    pub q: DMatrix<f64>,
    pub r: DMatrix<f64>,
}

impl LqrProblem {
    pub fn new(sys: LtiSystem, q: DMatrix<f64>, r: DMatrix<f64>) -> Result<Self> {
        let n = sys.n();
        let m = sys.m();
        if q.shape() != (n, n) || r.shape() != (m, m) {
            return Err(Error::Dimension(format!("Q must be {n}x{n} and R {m}x{m}")));
        }
        let q = crate::symops::symmetrize(&q)?;
        let r = crate::symops::symmetrize(&r)?;
        if min_eig(&q) < -1e-10 {
            return Err(Error::Config("Q is not positive semidefinite".into()));
        }
        if min_eig(&r) <= 0.0 {
            return Err(Error::Config("R is not positive definite".into()));
        }
        if !is_stabilizable(&sys) {
            return Err(Error::Config("(A, B) is not stabilizable".into()));
        }
        Ok(Self { sys, q, r })
    }

    /// PBH check of `(Q^{1/2}, A)`; the theory assumes it, we only report it.
    pub fn is_detectable(&self) -> bool {
        is_detectable(&psd_sqrt(&self.q), &self.sys.a)
    }

    pub fn gain_of(&self, p: &DMatrix<f64>) -> DMatrix<f64> {
        let rhs = self.sys.b.transpose() * p;
        self.r.clone().cholesky().expect("R is positive definite").solve(&rhs)
    }

    pub fn care_residual(&self, p: &DMatrix<f64>) -> f64 {
        let a = &self.sys.a;
        let b = &self.sys.b;
        let rb = self.r.clone().cholesky().expect("R is positive definite").solve(&b.transpose());
        (a.transpose() * p + p * a - p * b * rb * p + &self.q).norm()
    }

    /// CARE residual over the sum of its term norms.
    pub fn relative_care_residual(&self, p: &DMatrix<f64>) -> f64 {
        let b = &self.sys.b;
        let rb = self.r.clone().cholesky().expect("R is positive definite").solve(&b.transpose());
        let scale = self.q.norm() + 2.0 * (self.sys.a.transpose() * p).norm() + (p * b * rb * p).norm();
        self.care_residual(p) / scale.max(f64::MIN_POSITIVE)
    }

    pub fn cost_weight(&self, k: &DMatrix<f64>) -> DMatrix<f64> {
        &self.q + k.transpose() * &self.r * k
    }
}

/// Solves `A_clᵀ P + P A_cl + S = 0` by Kronecker vectorization.
/// Error-free product and sum accumulation of `Σ aᵢbᵢ` (Ogita–Rump–Oishi).
fn dot2(terms: impl Iterator<Item = (f64, f64)>) -> f64 {
    let (mut sum, mut err) = (0.0f64, 0.0f64);
    for (a, b) in terms {
        let prod = a * b;
        let prod_err = a.mul_add(b, -prod);
        let t = sum + prod;
        let z = t - sum;
        err += (sum - (t - z)) + (prod - z) + prod_err;
        sum = t;
    }
    sum + err
}

fn ale_residual_compensated(a: &DMatrix<f64>, p: &DMatrix<f64>, s: &DMatrix<f64>) -> DMatrix<f64> {
    let n = a.nrows();
    DMatrix::from_fn(n, n, |i, j| {
        let left = (0..n).map(|k| (a[(k, i)], p[(k, j)]));
        let right = (0..n).map(|k| (p[(i, k)], a[(k, j)]));
        dot2(left.chain(right).chain(std::iter::once((s[(i, j)], 1.0))))
    })
}

pub fn solve_ale(a_cl: &DMatrix<f64>, s: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let n = a_cl.nrows();
    if !a_cl.is_square() || s.shape() != (n, n) {
        return Err(Error::Dimension("solve_ale: shapes disagree".into()));
    }
    let (stable, abscissa) = is_hurwitz(a_cl);
    if !stable {
        return Err(Error::NotHurwitz(abscissa));
    }
    let s = crate::symops::symmetrize(s)?;
    let eye = DMatrix::<f64>::identity(n, n);
    let at = a_cl.transpose();
    // Column-major vec: vec(Aᵀ P) = (I ⊗ Aᵀ) vec P, vec(P A) = (Aᵀ ⊗ I) vec P.
    let lu = (eye.kronecker(&at) + at.kronecker(&eye)).lu();
    let solve = |r: &DMatrix<f64>| {
        lu.solve(&-DVector::from_column_slice(r.as_slice()))
            .map(|v| DMatrix::from_column_slice(n, n, v.as_slice()))
            .ok_or_else(|| Error::Singular("Lyapunov Kronecker system".into()))
    };
    let mut p = solve(&s)?;
    // Refine against a compensated residual; forward error ends near eps·‖P‖.
    for _ in 0..3 {
        p = (&p + p.transpose()) / 2.0;
        let r = ale_residual_compensated(a_cl, &p, &s);
        let dp = solve(&r)?;
        p += &dp;
        if dp.norm() <= f64::EPSILON * p.norm() {
            break;
        }
    }
    let p = (&p + p.transpose()) / 2.0;
    let resid = (a_cl.transpose() * &p + &p * a_cl + &s).norm();
    if resid > 1e-10 * s.norm().max(1.0) * (1.0 + p.norm() * a_cl.norm()) {
        return Err(Error::NonConvergence { what: "Lyapunov solve".into(), residual: resid });
    }
    Ok(p)
}

#[derive(Debug, Clone)]
pub struct KleinmanTrace {
    /// `P_0, …, P_{iters-1}`; `P_i` is the value of policy `K_i`.
    pub p_seq: Vec<DMatrix<f64>>,
    /// `K_0, …, K_iters`.
    pub k_seq: Vec<DMatrix<f64>>,
    pub hurwitz_flags: Vec<bool>,
}

pub fn kleinman(prob: &LqrProblem, k0: &DMatrix<f64>, iters: usize) -> Result<KleinmanTrace> {
    if k0.shape() != (prob.sys.m(), prob.sys.n()) {
        return Err(Error::Dimension("K0 shape".into()));
    }
    let mut trace = KleinmanTrace { p_seq: vec![], k_seq: vec![k0.clone()], hurwitz_flags: vec![] };
    let mut k = k0.clone();
    for _ in 0..iters {
        let a_cl = prob.sys.closed_loop(&k);
        let (stable, _) = is_hurwitz(&a_cl);
        trace.hurwitz_flags.push(stable);
        let p = solve_ale(&a_cl, &prob.cost_weight(&k))?;
        k = prob.gain_of(&p);
        trace.p_seq.push(p);
        trace.k_seq.push(k.clone());
    }
    Ok(trace)
}

#[derive(Debug, Clone)]
pub struct CareSolution {
    pub p: DMatrix<f64>,
    pub k: DMatrix<f64>,
    pub residual: f64,
    pub iterations: usize,
}

/// CARE by Kleinman iteration to convergence (at most 50 steps).
/// `residual` is [`LqrProblem::relative_care_residual`].
pub fn solve_care(prob: &LqrProblem, k0: &DMatrix<f64>) -> Result<CareSolution> {
    let mut k = k0.clone();
    let mut last: Option<DMatrix<f64>> = None;
    for it in 1..=50 {
        let p = solve_ale(&prob.sys.closed_loop(&k), &prob.cost_weight(&k))?;
        k = prob.gain_of(&p);
        let residual = prob.relative_care_residual(&p);
        let settled = last.as_ref().is_some_and(|lp| (lp - &p).norm() <= 1e-11 * p.norm());
        if residual <= 1e-14 || (settled && residual <= 1e-8) {
            return Ok(CareSolution { p, k, residual, iterations: it });
        }
        last = Some(p);
    }
    let p = last.expect("at least one iterate");
    Err(Error::NonConvergence { what: "CARE".into(), residual: prob.relative_care_residual(&p) })
}

#[derive(Debug, Clone)]
pub struct Linearization {
    pub sys: LtiSystem,
    /// Largest relative gap between the step-h and step-h/2 Jacobians over
    /// entries within 1e-3 of the largest one.
    pub richardson_gap: f64,
}

fn jacobian<F: Fn(&DVector<f64>) -> DVector<f64>>(f: &F, x0: &DVector<f64>, scale: f64) -> Result<DMatrix<f64>> {
    let f0 = f(x0);
    let mut j = DMatrix::zeros(f0.len(), x0.len());
    for i in 0..x0.len() {
        let h = scale * (1e-6f64).max(1e-7 * x0[i].abs());
        let mut xp = x0.clone();
        let mut xm = x0.clone();
        xp[i] += h;
        xm[i] -= h;
        let col = (f(&xp) - f(&xm)) / (2.0 * h);
        if col.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("dynamics near operating point, coordinate {i}")));
        }
        j.set_column(i, &col);
    }
    Ok(j)
}

fn dominant_gap(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    let big = a.amax();
    a.iter()
        .zip(b.iter())
        .filter(|(x, _)| x.abs() >= 1e-3 * big)
        .map(|(x, y)| (x - y).abs() / x.abs())
        .fold(0.0, f64::max)
}

/// Central-difference linearization of `ẋ = F(x, u)` at `(x_e, u_e)`.
pub fn linearize<F>(f: F, x_e: &DVector<f64>, u_e: &DVector<f64>) -> Result<Linearization>
where
    F: Fn(&DVector<f64>, &DVector<f64>) -> DVector<f64>,
{
    let fx = |x: &DVector<f64>| f(x, u_e);
    let fu = |u: &DVector<f64>| f(x_e, u);
    let a = jacobian(&fx, x_e, 1.0)?;
    let b = jacobian(&fu, u_e, 1.0)?;
    let gap = dominant_gap(&a, &jacobian(&fx, x_e, 0.5)?).max(dominant_gap(&b, &jacobian(&fu, u_e, 0.5)?));
    Ok(Linearization { sys: LtiSystem::new(a, b)?, richardson_gap: gap })
}

/// Orthonormal basis of `ker C`.
fn kernel_basis(c: &DMatrix<f64>) -> DMatrix<f64> {
    let n = c.ncols();
    let proj = DMatrix::<f64>::identity(n, n)
        - c.transpose() * (c * c.transpose()).try_inverse().expect("C has full row rank") * c;
    let e = proj.symmetric_eigen();
    let cols: Vec<_> =
        (0..n).filter(|&i| e.eigenvalues[i] > 0.5).map(|i| e.eigenvectors.column(i).into_owned()).collect();
    DMatrix::from_columns(&cols)
}

/// Transmission zeros of the square map `u ↦ y = C x` with `CB` invertible:
/// the eigenvalues of `A − B (CB)⁻¹ C A` restricted to the invariant
/// subspace `ker C`.
pub fn transmission_zeros(sys: &LtiSystem, c: &DMatrix<f64>) -> Result<Vec<Complex<f64>>> {
    if c.nrows() != sys.m() || c.ncols() != sys.n() {
        return Err(Error::Dimension("transmission_zeros needs a square map".into()));
    }
    let cb = c * &sys.b;
    let cb_inv = cb
        .clone()
        .try_inverse()
        .filter(|_| cb.clone().svd(false, false).singular_values.min() > 1e-12 * cb.norm())
        .ok_or_else(|| Error::Singular("CB (relative degree above one)".into()))?;
    let a_bar = &sys.a - &sys.b * cb_inv * c * &sys.a;
    let basis = kernel_basis(c);
    Ok(eigenvalues(&(basis.transpose() * a_bar * &basis)))
}

/// One measured output: the state slot `y` and, for integrator-augmented
/// loops, the slot `z` holding `∫y`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct OutputChannel {
    pub y: usize,
    pub z: Option<usize>,
}

#[derive(Debug, Clone)]
pub struct FreqResponse {
    pub omega: Vec<f64>,
    /// `T_{d_i y}(jω)`: outputs × inputs per frequency.
    pub t_dy: Vec<DMatrix<Complex<f64>>>,
    /// `T_{r y}(jω)`: outputs × references per frequency.
    pub t_ry: Vec<DMatrix<Complex<f64>>>,
}

impl FreqResponse {
    pub fn db(z: Complex<f64>) -> f64 {
        20.0 * z.norm().log10()
    }

    /// SISO view of loop `k`: input `k` (and reference `k`) to output `k`
    /// with every other loop closed.
    pub fn siso(&self, k: usize) -> (Vec<Complex<f64>>, Vec<Complex<f64>>) {
        (self.t_dy.iter().map(|m| m[(k, k)]).collect(), self.t_ry.iter().map(|m| m[(k, k)]).collect())
    }

    pub fn sigma_max(maps: &[DMatrix<Complex<f64>>]) -> Vec<f64> {
        maps.iter().map(|m| m.clone().svd(false, false).singular_values.max()).collect()
    }
}

/// Closed-loop maps for `u = −K (x − x_ref) + d_i`, where the reference
/// vector carries `∫r` in the integrator slots and `r` in the output slots.
///
/// With `z̃ = z − ∫r` the loop is `ẋ = (A − BK) x + (B K_Y − E) r`, so the
/// reference map has unit DC gain whenever integral action is present.
pub fn closed_loop_maps(
    sys: &LtiSystem,
    k: &DMatrix<f64>,
    outputs: &[OutputChannel],
    freqs: &[f64],
) -> Result<FreqResponse> {
    let n = sys.n();
    let a_cl = sys.closed_loop(k);
    let (stable, abscissa) = is_hurwitz(&a_cl);
    if !stable {
        return Err(Error::NotHurwitz(abscissa));
    }
    let p = outputs.len();
    let mut c = DMatrix::zeros(p, n);
    let mut b_r = DMatrix::zeros(n, p);
    for (i, pair) in outputs.iter().enumerate() {
        c[(i, pair.y)] = 1.0;
        b_r.set_column(i, &(&sys.b * k.column(pair.y)));
        if let Some(z) = pair.z {
            b_r[(z, i)] -= 1.0;
        }
    }
    let (cc, a_c, b_c, br_c) = (complex(&c), complex(&a_cl), complex(&sys.b), complex(&b_r));
    let mut t_dy = Vec::with_capacity(freqs.len());
    let mut t_ry = Vec::with_capacity(freqs.len());
    for &w in freqs {
        let s = DMatrix::<Complex<f64>>::identity(n, n) * Complex::new(0.0, w) - &a_c;
        let lu = s.lu();
        let xd = lu.solve(&b_c).ok_or_else(|| Error::Singular(format!("resolvent at ω = {w}")))?;
        let xr = lu.solve(&br_c).ok_or_else(|| Error::Singular(format!("resolvent at ω = {w}")))?;
        t_dy.push(&cc * xd);
        t_ry.push(&cc * xr);
    }
    Ok(FreqResponse { omega: freqs.to_vec(), t_dy, t_ry })
}

/// `count` log-spaced frequencies from `lo` to `hi` inclusive.
pub fn log_grid(lo: f64, hi: f64, count: usize) -> Vec<f64> {
    let (a, b) = (lo.log10(), hi.log10());
    (0..count).map(|i| 10f64.powf(a + (b - a) * i as f64 / (count - 1) as f64)).collect()
}
