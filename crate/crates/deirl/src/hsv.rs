//! Longitudinal winged-cone hypersonic vehicle: atmosphere, aero/propulsive
//! coefficients, equations of motion, trim and the decentralized partition.
//!
//! Physics runs in ft, s, slug and radians. [`HsvModel`] re-expresses the
//! plant in the feedback coordinates the published gains are designed in:
//! deviations from an operating point with V in kft/s, angles in degrees and
//! pitch rate in deg/s.

use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector};

use crate::lincontrol::{self, LtiSystem};
use crate::simcore::{augment_integrators, Augmented, PlantModel};
use crate::{Error, Result};

pub const DEG: f64 = PI / 180.0;

/// Published trim at `M = 15`, `h = 110 kft`.
pub mod published_trim {
    pub const V: f64 = 15060.0;
    pub const H: f64 = 110_000.0;
    pub const ALPHA_DEG: f64 = 1.7704;
    pub const DELTA_T: f64 = 0.1756;
    pub const DELTA_E_DEG: f64 = -0.3947;
    pub const THRUST: f64 = 4.4966e4;
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HsvState {
    pub v: f64,
    pub gamma: f64,
    pub theta: f64,
    pub q: f64,
    pub h: f64,
}

impl HsvState {
    pub fn alpha(&self) -> f64 {
        self.theta - self.gamma
    }

    pub fn to_vector(&self) -> DVector<f64> {
        DVector::from_vec(vec![self.v, self.gamma, self.theta, self.q, self.h])
    }

    pub fn from_slice(x: &[f64]) -> Self {
        Self { v: x[0], gamma: x[1], theta: x[2], q: x[3], h: x[4] }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HsvControls {
    pub delta_t: f64,
    pub delta_e: f64,
}

impl HsvControls {
    pub fn to_vector(&self) -> DVector<f64> {
        DVector::from_vec(vec![self.delta_t, self.delta_e])
    }

    pub fn from_slice(u: &[f64]) -> Self {
        Self { delta_t: u[0], delta_e: u[1] }
    }
}

/// How `C_T` behaves in the throttle.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ThrustModel {
    /// `1.15·k·δ_T` below full throttle, `k(1 + 0.15 δ_T)` above.
    Piecewise,
    /// `1.15·k·δ_T` everywhere: the lower branch continued, which keeps the
    /// plant control-affine when probing drives `δ_T` past 1.
    Affine,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HsvParams {
    pub s: f64,
    pub cbar: f64,
    pub r_e: f64,
    pub mu: f64,
    pub m: f64,
    pub iyy: f64,
    /// Lift-coefficient multiplier; 1 is the nominal model.
    pub nu: f64,
    pub thrust: ThrustModel,
}

pub const IYY: f64 = 7.0e6;

impl HsvParams {
    pub fn nominal() -> Self {
        let mut p = Self {
            s: 3603.0,
            cbar: 80.0,
            r_e: 20_903_500.0,
            mu: 1.39e16,
            m: 1.0,
            iyy: IYY,
            nu: 1.0,
            thrust: ThrustModel::Affine,
        };
        p.m = derived_mass(&p);
        p
    }

    pub fn with_nu(self, nu: f64) -> Self {
        Self { nu, ..self }
    }

    pub fn validate(&self) -> Result<()> {
        let pos = [self.s, self.cbar, self.r_e, self.mu, self.m, self.iyy];
        if pos.iter().any(|v| !(*v > 0.0)) || !(self.nu > 0.0 && self.nu <= 1.0) {
            return Err(Error::Config(format!("invalid HSV parameters {self:?}")));
        }
        Ok(())
    }
}

/// `(ρ [slug/ft³], a [ft/s])` at altitude `h` ft.
pub fn atmosphere(h: f64) -> (f64, f64) {
    (0.00238 * (-h / 24000.0).exp(), 8.99e-9 * h * h - 9.16e-4 * h + 996.0)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Coefficients {
    pub mach: f64,
    pub rho: f64,
    pub cl: f64,
    pub cd: f64,
    pub cm: f64,
    pub ct: f64,
}

pub fn aero_coefficients(x: &HsvState, u: &HsvControls, p: &HsvParams) -> Result<Coefficients> {
    let (rho, a_snd) = atmosphere(x.h);
    let mach = x.v / a_snd;
    if !(mach > 0.0) {
        return Err(Error::Config(format!("Mach number {mach} is not positive")));
    }
    Ok(coefficients(x, u, p, rho, mach))
}

fn coefficients(x: &HsvState, u: &HsvControls, p: &HsvParams, rho: f64, mach: f64) -> Coefficients {
    let a = x.alpha();
    let de = u.delta_e;
    let cl_a = p.nu * a * (0.493 + 1.91 / mach);
    let cl_de = de * (-0.2356 * a * a - 0.004518 * a - 0.02913);
    let cd = 0.0082 * (171.0 * a * a + 1.15 * a + 1.0) * (0.0012 * mach * mach - 0.054 * mach + 1.0);
    let cm_a = 1e-4 * (0.06 - (-mach / 3.0).exp()) * (-6565.0 * a * a + 6875.0 * a + 1.0);
    let cm_q = (x.q * p.cbar / (2.0 * x.v)) * (-0.025 * mach + 1.37) * (-6.83 * a * a + 0.303 * a - 0.23);
    let cm_de = 0.0292 * (de - a);
    let k = 0.0105 * (1.0 + 17.0 / mach);
    let ct = match p.thrust {
        ThrustModel::Piecewise if u.delta_t >= 1.0 => k * (1.0 + 0.15 * u.delta_t),
        _ => k * 1.15 * u.delta_t,
    };
    Coefficients { mach, rho, cl: cl_a + cl_de, cd, cm: cm_a + cm_q + cm_de, ct }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Forces {
    pub lift: f64,
    pub drag: f64,
    pub thrust: f64,
    pub moment: f64,
}

pub fn forces(x: &HsvState, u: &HsvControls, p: &HsvParams) -> Result<Forces> {
    let c = aero_coefficients(x, u, p)?;
    let qbar = 0.5 * c.rho * x.v * x.v * p.s;
    Ok(Forces { lift: qbar * c.cl, drag: qbar * c.cd, thrust: qbar * c.ct, moment: qbar * p.cbar * c.cm })
}

fn rates(x: &HsvState, u: &HsvControls, p: &HsvParams) -> [f64; 5] {
    let (rho, a_snd) = atmosphere(x.h);
    let c = coefficients(x, u, p, rho, x.v / a_snd);
    let qbar = 0.5 * rho * x.v * x.v * p.s;
    let (l, d, t, mm) = (qbar * c.cl, qbar * c.cd, qbar * c.ct, qbar * p.cbar * c.cm);
    let a = x.alpha();
    let r = x.h + p.r_e;
    [
        (t * a.cos() - d) / p.m - p.mu * x.gamma.sin() / (r * r),
        (l + t * a.sin()) / (p.m * x.v) - (p.mu - x.v * x.v * r) * x.gamma.cos() / (x.v * r * r),
        x.q,
        mm / p.iyy,
        x.v * x.gamma.sin(),
    ]
}

/// `(V̇, γ̇, θ̇, q̇, ḣ)`.
pub fn dynamics(x: &HsvState, u: &HsvControls, p: &HsvParams) -> Result<DVector<f64>> {
    if !(x.v > 0.0) {
        return Err(Error::Config(format!("airspeed {} is not positive", x.v)));
    }
    Ok(DVector::from_row_slice(&rates(x, u, p)))
}

fn dynamics_vec(x: &DVector<f64>, u: &DVector<f64>, p: &HsvParams) -> DVector<f64> {
    DVector::from_row_slice(&rates(&HsvState::from_slice(x.as_slice()), &HsvControls::from_slice(u.as_slice()), p))
}

/// Mass that makes the published trim satisfy the `γ̇` balance:
/// `m = (L + T sin α) r² / (μ − V² r)`.
pub fn derived_mass(p: &HsvParams) -> f64 {
    let x = published_trim_state(0.0);
    let u = published_trim_controls();
    let f =
        forces(&x, &u, &HsvParams { nu: 1.0, thrust: ThrustModel::Piecewise, ..*p }).expect("positive Mach at trim");
    let r = published_trim::H + p.r_e;
    (f.lift + f.thrust * x.alpha().sin()) * r * r / (p.mu - published_trim::V * published_trim::V * r)
}

fn published_trim_state(alpha: f64) -> HsvState {
    let alpha = if alpha == 0.0 { published_trim::ALPHA_DEG * DEG } else { alpha };
    HsvState { v: published_trim::V, gamma: 0.0, theta: alpha, q: 0.0, h: published_trim::H }
}

fn published_trim_controls() -> HsvControls {
    HsvControls { delta_t: published_trim::DELTA_T, delta_e: published_trim::DELTA_E_DEG * DEG }
}

#[derive(Debug, Clone)]
pub struct Trim {
    pub x: HsvState,
    pub u: HsvControls,
    /// `‖(V̇, γ̇, q̇)‖₂` at the returned point.
    pub residual: f64,
    pub iterations: usize,
}

/// Solves `(V̇, γ̇, q̇) = 0` over `(α, δ_T, δ_E)` at the published `V`, `h`,
/// `γ = 0` by damped Newton from the published trim.
pub fn trim(p: &HsvParams) -> Result<Trim> {
    p.validate()?;
    let resid = |z: &[f64; 3]| {
        let x = published_trim_state(z[0]);
        let r = rates(&x, &HsvControls { delta_t: z[1], delta_e: z[2] }, p);
        [r[0], r[1], r[3]]
    };
    let norm = |r: &[f64; 3]| r.iter().map(|v| v * v).sum::<f64>().sqrt();
    let mut z = [published_trim::ALPHA_DEG * DEG, published_trim::DELTA_T, published_trim::DELTA_E_DEG * DEG];
    let mut r = resid(&z);
    for it in 0..100 {
        if norm(&r) < 1e-12 {
            return Ok(Trim {
                x: published_trim_state(z[0]),
                u: HsvControls { delta_t: z[1], delta_e: z[2] },
                residual: norm(&r),
                iterations: it,
            });
        }
        let mut jac = DMatrix::zeros(3, 3);
        for j in 0..3 {
            let h = 1e-7 * z[j].abs().max(1e-3);
            let (mut zp, mut zm) = (z, z);
            zp[j] += h;
            zm[j] -= h;
            let (rp, rm) = (resid(&zp), resid(&zm));
            for i in 0..3 {
                jac[(i, j)] = (rp[i] - rm[i]) / (2.0 * h);
            }
        }
        let step =
            jac.lu().solve(&-DVector::from_row_slice(&r)).ok_or_else(|| Error::Singular("trim Jacobian".into()))?;
        let mut lambda = 1.0;
        loop {
            let zn = [z[0] + lambda * step[0], z[1] + lambda * step[1], z[2] + lambda * step[2]];
            let rn = resid(&zn);
            if norm(&rn) < norm(&r) || lambda < 1e-6 {
                z = zn;
                r = rn;
                break;
            }
            lambda /= 2.0;
        }
    }
    Err(Error::NonConvergence { what: "trim".into(), residual: norm(&r) })
}

/// Index sets of one decentralized loop.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LoopIndices {
    pub states: Vec<usize>,
    pub controls: Vec<usize>,
}

/// Augmented layout `[z_V, V, z_γ, γ, θ, q, h]`: the two loops, with altitude
/// (slot 6) simulated but never fed back.
pub fn partition() -> [LoopIndices; 2] {
    [LoopIndices { states: vec![0, 1], controls: vec![0] }, LoopIndices { states: vec![2, 3, 4, 5], controls: vec![1] }]
}

/// Augmented slots that carry feedback.
pub const FEEDBACK: [usize; 6] = [0, 1, 2, 3, 4, 5];
pub const ALTITUDE_SLOT: usize = 6;

/// Feedback-coordinate scales: `ξ = T_x (x − x_op)`, `μ = T_u (u − u_op)`.
pub const STATE_SCALE: [f64; 5] = [1e-3, 1.0 / DEG, 1.0 / DEG, 1.0 / DEG, 1.0];
pub const CONTROL_SCALE: [f64; 2] = [1.0, 1.0 / DEG];

/// The HSV about an operating point in feedback coordinates.
#[derive(Debug, Clone)]
pub struct HsvModel {
    pub params: HsvParams,
    pub x_op: HsvState,
    pub u_op: HsvControls,
}

impl HsvModel {
    /// The vehicle about its own trim.
    pub fn trimmed(params: HsvParams) -> Result<Self> {
        let t = trim(&params)?;
        Ok(Self { params, x_op: t.x, u_op: t.u })
    }

    /// The vehicle (possibly a different one) about a given operating point.
    pub fn about(params: HsvParams, x_op: HsvState, u_op: HsvControls) -> Self {
        Self { params, x_op, u_op }
    }

    pub fn physical_state(&self, xi: &DVector<f64>) -> DVector<f64> {
        let op = self.x_op.to_vector();
        DVector::from_iterator(5, (0..5).map(|i| op[i] + xi[i] / STATE_SCALE[i]))
    }

    pub fn physical_controls(&self, mu: &DVector<f64>) -> DVector<f64> {
        let op = self.u_op.to_vector();
        DVector::from_iterator(2, (0..2).map(|i| op[i] + mu[i] / CONTROL_SCALE[i]))
    }

    pub fn feedback_state(&self, x: &DVector<f64>) -> DVector<f64> {
        let op = self.x_op.to_vector();
        DVector::from_iterator(5, (0..5).map(|i| (x[i] - op[i]) * STATE_SCALE[i]))
    }

    fn scaled_rates(&self, x: &DVector<f64>, u: &DVector<f64>) -> DVector<f64> {
        let d = dynamics_vec(x, u, &self.params);
        DVector::from_iterator(5, (0..5).map(|i| d[i] * STATE_SCALE[i]))
    }

    /// Physical linearization `(A, B)` at the operating point.
    pub fn physical_linearization(&self) -> Result<lincontrol::Linearization> {
        let p = self.params;
        lincontrol::linearize(|x, u| dynamics_vec(x, u, &p), &self.x_op.to_vector(), &self.u_op.to_vector())
    }

    /// Integrator-augmented model `[z_V, V, z_γ, γ, θ, q, h]`.
    pub fn augmented(self) -> Augmented<HsvModel> {
        augment_integrators(self, &[0, 1]).expect("fixed output set")
    }
}

impl PlantModel for HsvModel {
    fn state_dim(&self) -> usize {
        5
    }

    fn input_dim(&self) -> usize {
        2
    }

    fn drift(&self, xi: &DVector<f64>) -> DVector<f64> {
        let u = self.u_op.to_vector();
        self.scaled_rates(&self.physical_state(xi), &u)
    }

    /// Exact, because the plant is affine in both controls: column `i` is
    /// `F(x, u_op + e_i/s_i) − F(x, u_op)`.
    fn input_map(&self, xi: &DVector<f64>) -> DMatrix<f64> {
        let x = self.physical_state(xi);
        let u0 = self.u_op.to_vector();
        let f0 = self.scaled_rates(&x, &u0);
        let mut g = DMatrix::zeros(5, 2);
        for i in 0..2 {
            let mut u = u0.clone();
            u[i] += 1.0 / CONTROL_SCALE[i];
            g.set_column(i, &(self.scaled_rates(&x, &u) - &f0));
        }
        g
    }

    fn rhs(&self, xi: &DVector<f64>, mu: &DVector<f64>) -> DVector<f64> {
        self.scaled_rates(&self.physical_state(xi), &self.physical_controls(mu))
    }
}

/// Linearization of a control-affine plant at its origin.
pub fn linearize_at_origin<M: PlantModel + ?Sized>(model: &M) -> Result<LtiSystem> {
    let n = model.state_dim();
    let m = model.input_dim();
    Ok(lincontrol::linearize(|x, u| model.rhs(x, u), &DVector::zeros(n), &DVector::zeros(m))?.sys)
}

/// Published gains and costs of the decentralized design.
pub mod design {
    pub const K0_1: [f64; 2] = [0.2582, 4.3570];
    pub const K0_2: [f64; 4] = [10.0, 26.3299, 1.6501, 1.0124];
    pub const Q1: [f64; 2] = [1.0, 1.0];
    pub const R1: [f64; 1] = [15.0];
    pub const Q2: [f64; 4] = [1.0, 1.0, 0.0, 0.0];
    pub const R2: [f64; 1] = [0.01];
}
