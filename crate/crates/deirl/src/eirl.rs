//! EIRL and dEIRL: regression assembly from trajectory integrals, the
//! least-squares solve with conditioning telemetry, the gain update and the
//! learning drivers.
//!
//! Data is collected once under the initial policy; every iteration reuses
//! the cached integrals `δ`, `I_B(x,x)`, `I_B(x,g u)` and `I_B(x,w)` and only
//! re-assembles `Θ` and `Ξ` algebraically.

use std::io::Write;

use nalgebra::{DMatrix, DVector};

use crate::lincontrol::{self, LqrProblem, LtiSystem, OutputChannel};
use crate::simcore::{
    integrate_closed_loop, Controller, DenseSolution, ExcitationMode, OdeOptions, PlantModel, SignalSpec, Trajectory,
    INNER_INTERVALS,
};
use crate::symops::{self, build_compression, CompressionMatrix, SymVec};
use crate::{Error, Result};

/// One decentralized subproblem.
#[derive(Debug, Clone)]
pub struct LoopSpec {
    pub id: usize,
    /// State slots of `x_j` in the (augmented) plant.
    pub states: Vec<usize>,
    /// Control slots of `u_j`.
    pub controls: Vec<usize>,
    pub q: DMatrix<f64>,
    pub r: DMatrix<f64>,
    pub k0: DMatrix<f64>,
    pub ts: f64,
    pub samples: usize,
    pub iterations: usize,
    /// Probing noise, one signal per control in `controls`.
    pub probe: Vec<SignalSpec>,
    /// Reference commands for the output channels inside this loop (MI only).
    pub reference: Vec<SignalSpec>,
}

impl LoopSpec {
    pub fn n(&self) -> usize {
        self.states.len()
    }

    pub fn m(&self) -> usize {
        self.controls.len()
    }

    pub fn validate(&self) -> Result<()> {
        let (n, m) = (self.n(), self.m());
        if n == 0 || m == 0 {
            return Err(Error::Config(format!("loop {} has no states or controls", self.id)));
        }
        if self.q.shape() != (n, n) || self.r.shape() != (m, m) || self.k0.shape() != (m, n) {
            return Err(Error::Dimension(format!("loop {}: Q, R or K0 shape", self.id)));
        }
        if self.samples < symops::tri(n) {
            return Err(Error::Config(format!(
                "loop {}: {} samples cannot determine {} unknowns",
                self.id,
                self.samples,
                symops::tri(n)
            )));
        }
        if self.probe.len() != m {
            return Err(Error::Config(format!("loop {}: one probing signal per control", self.id)));
        }
        if !(self.ts > 0.0) || self.iterations == 0 {
            return Err(Error::Config(format!("loop {}: sample period and iteration count", self.id)));
        }
        Ok(())
    }

    pub fn horizon(&self) -> f64 {
        self.ts * self.samples as f64
    }
}

/// The learner's knowledge of the plant: a (possibly nominal) model `f̃`,
/// anchored to vanish at the origin, and its linearization `Ã`, `B̃`.
///
/// `w_j(x) = f̃_j(x) − Ã_jj x_j`; `g_j(x)` are the loop's rows of `g̃(x)`.
pub struct DriftResidualModel<M> {
    model: M,
    anchor: DVector<f64>,
    lin: LtiSystem,
}

impl<M: PlantModel> DriftResidualModel<M> {
    pub fn new(model: M) -> Result<Self> {
        let n = model.state_dim();
        let anchor = model.drift(&DVector::zeros(n));
        let lin = lincontrol::linearize(
            |x, u| model.rhs(x, u) - &anchor,
            &DVector::zeros(n),
            &DVector::zeros(model.input_dim()),
        )?
        .sys;
        Ok(Self { model, anchor, lin })
    }

    pub fn linearization(&self) -> &LtiSystem {
        &self.lin
    }

    pub fn model(&self) -> &M {
        &self.model
    }

    pub fn residual(&self, x: &DVector<f64>, states: &[usize]) -> DVector<f64> {
        let f = self.model.drift(x) - &self.anchor;
        let xj = x.select_rows(states);
        f.select_rows(states) - self.lin.a.select_rows(states).select_columns(states) * xj
    }

    pub fn input_rows(&self, x: &DVector<f64>, states: &[usize]) -> DMatrix<f64> {
        self.model.input_map(x).select_rows(states)
    }

    pub fn b_block(&self, lp: &LoopSpec) -> DMatrix<f64> {
        self.lin.b.select_rows(&lp.states).select_columns(&lp.controls)
    }
}

/// Cached trajectory integrals of one loop.
#[derive(Debug, Clone)]
pub struct LoopData {
    pub delta: DMatrix<f64>,
    pub i_xx: DMatrix<f64>,
    pub i_xgu: DMatrix<f64>,
    pub i_xw: DMatrix<f64>,
    /// Largest Richardson estimate of relative quadrature error.
    pub quad_gap: f64,
}

impl LoopData {
    pub fn collect<M: PlantModel>(traj: &Trajectory, lp: &LoopSpec, drift: &DriftResidualModel<M>) -> Result<Self> {
        if traj.intervals() != lp.samples {
            return Err(Error::Dimension(format!(
                "loop {} expects {} intervals, trajectory has {}",
                lp.id,
                lp.samples,
                traj.intervals()
            )));
        }
        let st = &lp.states;
        let xj = |n: &crate::simcore::Node| n.x.select_rows(st);
        let samples: Vec<_> = traj.states.iter().map(|x| x.select_rows(st)).collect();
        let delta = symops::delta_matrix(&samples)?;
        let (i_xx, g1) = symops::integral_matrix(traj, xj, xj)?;
        let (i_xgu, g2) = symops::integral_matrix(traj, xj, |n| drift.input_rows(&n.x, st) * &n.u)?;
        let (i_xw, g3) = symops::integral_matrix(traj, xj, |n| drift.residual(&n.x, st))?;
        Ok(Self { delta, i_xx, i_xgu, i_xw, quad_gap: g1.max(g2).max(g3) })
    }

    /// `Θ_i = δ − 2[I_B(x,x) W_iᵀ + I_B(x,gu) + I_B(x,w)]`,
    /// `Ξ_i = −I_B(x,x) v(Q + K_iᵀ R K_i)`.
    pub fn regression(
        &self,
        lp: &LoopSpec,
        k_i: &DMatrix<f64>,
        b_jj: &DMatrix<f64>,
        comp: &CompressionMatrix,
        iteration: usize,
    ) -> Result<RegressionProblem> {
        let w_i = comp.lift(&(b_jj * k_i));
        let theta = &self.delta - (&self.i_xx * w_i.transpose() + &self.i_xgu + &self.i_xw) * 2.0;
        let q_i = &lp.q + k_i.transpose() * &lp.r * k_i;
        let xi = -(&self.i_xx * symops::vec_of_mat(&q_i)?.data());
        if theta.iter().chain(xi.iter()).any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("regression of loop {}", lp.id)));
        }
        let kappa = condition_number(&theta);
        Ok(RegressionProblem { theta, xi, kappa, iteration, loop_id: lp.id })
    }
}

/// `Θ v(P) = Ξ` for one iteration of one loop.
#[derive(Debug, Clone)]
pub struct RegressionProblem {
    pub theta: DMatrix<f64>,
    pub xi: DVector<f64>,
    pub kappa: f64,
    pub iteration: usize,
    pub loop_id: usize,
}

/// `σ_max / σ_min`; infinite when `σ_min = 0`.
pub fn condition_number(m: &DMatrix<f64>) -> f64 {
    let sv = m.clone().svd(false, false).singular_values;
    let (lo, hi) = (sv.min(), sv.max());
    if lo == 0.0 {
        f64::INFINITY
    } else {
        hi / lo
    }
}

pub fn build_regression<M: PlantModel>(
    traj: &Trajectory,
    lp: &LoopSpec,
    k_i: &DMatrix<f64>,
    drift: &DriftResidualModel<M>,
) -> Result<RegressionProblem> {
    let data = LoopData::collect(traj, lp, drift)?;
    data.regression(lp, k_i, &drift.b_block(lp), &build_compression(lp.n()), 0)
}

/// Least squares by column-pivoted QR, falling back to the SVD when the
/// pivoted diagonal flags near-deficiency.
pub fn solve_regression(reg: &RegressionProblem) -> Result<SymVec> {
    let deficient = Error::RankDeficient { loop_id: reg.loop_id, iteration: reg.iteration, kappa: reg.kappa };
    if !(reg.kappa < 1e12) {
        return Err(deficient);
    }
    let qr = reg.theta.clone().col_piv_qr();
    let r = qr.r();
    let nb = reg.theta.ncols();
    let diag: Vec<f64> = (0..nb).map(|i| r[(i, i)].abs()).collect();
    let dmax = diag.iter().cloned().fold(0.0, f64::max);
    let dmin = diag.iter().cloned().fold(f64::INFINITY, f64::min);
    let v = if dmin > 1e-10 * dmax {
        let mut y = qr.q().transpose() * &reg.xi;
        if !r.solve_upper_triangular_mut(&mut y) {
            return Err(deficient);
        }
        qr.p().inv_permute_rows(&mut y);
        y
    } else {
        reg.theta.clone().svd(true, true).solve(&reg.xi, 1e-12 * reg.theta.norm()).map_err(|_| deficient)?
    };
    let p = symops::mat_of_vec(&SymVec::new(v)?);
    symops::vec_of_mat(&p)
}

/// `K_{i+1} = R⁻¹ Bᵀ P_i`.
pub fn update_gain(p: &DMatrix<f64>, r: &DMatrix<f64>, b_jj: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let rhs = b_jj.transpose() * p;
    r.clone().lu().solve(&rhs).ok_or_else(|| Error::Singular("control penalty R".into()))
}

/// Everything one loop learned.
#[derive(Debug, Clone)]
pub struct LoopResult {
    pub loop_id: usize,
    /// `v(P_i)`, `i = 0..i*-1`.
    pub values: Vec<SymVec>,
    /// `K_0..K_{i*}`.
    pub gains: Vec<DMatrix<f64>>,
    /// `κ(Θ_i)`, `i = 0..i*-1`.
    pub kappas: Vec<f64>,
    pub k_star: Option<DMatrix<f64>>,
    /// `‖K_i − K*‖₂` for every entry of `gains`.
    pub errors: Vec<f64>,
    pub quad_gap: f64,
    /// Set when an iteration could not be completed; earlier iterates stand.
    pub failure: Option<String>,
}

impl LoopResult {
    pub fn final_gain(&self) -> &DMatrix<f64> {
        self.gains.last().expect("K0 always present")
    }

    pub fn max_kappa(&self) -> f64 {
        self.kappas.iter().cloned().fold(f64::NAN, f64::max)
    }

    pub fn min_kappa(&self) -> f64 {
        self.kappas.iter().cloned().fold(f64::NAN, f64::min)
    }

    pub fn final_error(&self) -> Option<f64> {
        self.errors.last().copied()
    }

    /// CSV with columns `iteration, kappa, k1..kN, error, v1..vM`.
    pub fn write_csv<W: Write>(&self, w: W, tag: &str) -> Result<()> {
        let mut wr = csv::Writer::from_writer(w);
        let nk = self.gains[0].len();
        let nv = self.values.first().map_or(0, |v| v.data().len());
        let mut head = vec!["iteration".to_string(), "kappa".into()];
        head.extend((1..=nk).map(|i| format!("k{i}")));
        head.push("error".into());
        head.extend((1..=nv).map(|i| format!("v{i}")));
        head.push("config_hash".into());
        wr.write_record(&head)?;
        let f = crate::simcore::fmt;
        for (i, k) in self.gains.iter().enumerate() {
            let mut rec = vec![i.to_string(), self.kappas.get(i).map_or(String::new(), |v| f(*v))];
            // Row-major gain entries.
            rec.extend(k.transpose().iter().map(|v| f(*v)));
            rec.push(self.errors.get(i).map_or(String::new(), |v| f(*v)));
            match self.values.get(i) {
                Some(v) => rec.extend(v.data().iter().map(|x| f(*x))),
                None => rec.extend(std::iter::repeat_n(String::new(), nv)),
            }
            rec.push(tag.to_string());
            wr.write_record(&rec)?;
        }
        wr.flush()?;
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct LearningResult {
    pub loops: Vec<LoopResult>,
}

fn gain_error(k: &DMatrix<f64>, k_star: &Option<DMatrix<f64>>) -> Option<f64> {
    k_star.as_ref().map(|ks| (k - ks).clone().svd(false, false).singular_values.max())
}

/// The oracle `K*_j`: CARE on the loop's block of a linearization.
pub fn oracle_gain(sys: &LtiSystem, lp: &LoopSpec) -> Result<DMatrix<f64>> {
    let prob = LqrProblem::new(sys.block(&lp.states, &lp.controls), lp.q.clone(), lp.r.clone())?;
    Ok(lincontrol::solve_care(&prob, &lp.k0)?.k)
}

/// Runs the policy-iteration cycles of one loop on cached data.
pub fn learn_loop(data: &LoopData, lp: &LoopSpec, b_jj: &DMatrix<f64>, k_star: Option<DMatrix<f64>>) -> LoopResult {
    let comp = build_compression(lp.n());
    let mut res = LoopResult {
        loop_id: lp.id,
        values: vec![],
        gains: vec![lp.k0.clone()],
        kappas: vec![],
        errors: vec![],
        quad_gap: data.quad_gap,
        failure: None,
        k_star,
    };
    for i in 0..lp.iterations {
        let step = || -> Result<(f64, SymVec, DMatrix<f64>)> {
            let reg = data.regression(lp, res.final_gain(), b_jj, &comp, i)?;
            let v = solve_regression(&reg)?;
            let k = update_gain(&symops::mat_of_vec(&v), &lp.r, b_jj)?;
            Ok((reg.kappa, v, k))
        };
        match step() {
            Ok((kappa, v, k)) => {
                res.kappas.push(kappa);
                res.values.push(v);
                res.gains.push(k);
            }
            Err(e) => {
                if let Error::RankDeficient { kappa, .. } = e {
                    res.kappas.push(kappa);
                }
                res.failure = Some(e.to_string());
                break;
            }
        }
    }
    res.errors = res.gains.iter().filter_map(|k| gain_error(k, &res.k_star)).collect();
    res
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Injection {
    Si,
    Mi,
}

/// The block-diagonal initial controller for `loops` with their excitation.
pub fn initial_controller(
    loops: &[LoopSpec],
    channels: &[OutputChannel],
    m: usize,
    injection: Injection,
) -> Result<Controller> {
    let feedback: Vec<usize> = loops.iter().flat_map(|l| l.states.iter().copied()).collect();
    let mut seen = std::collections::BTreeSet::new();
    if !feedback.iter().all(|s| seen.insert(*s)) {
        return Err(Error::Config("loops must partition the states disjointly".into()));
    }
    let mut k = DMatrix::zeros(m, feedback.len());
    let mut d = vec![SignalSpec::zero(); m];
    let mut col = 0;
    let mut used = vec![false; m];
    for lp in loops {
        lp.validate()?;
        for (a, &c) in lp.controls.iter().enumerate() {
            if c >= m || std::mem::replace(&mut used[c], true) {
                return Err(Error::Config("loops must partition the controls disjointly".into()));
            }
            for b in 0..lp.n() {
                k[(c, col + b)] = lp.k0[(a, b)];
            }
            d[c] = lp.probe[a].clone();
        }
        col += lp.n();
    }
    let mode = match injection {
        Injection::Si => ExcitationMode::Si { d },
        Injection::Mi => {
            let mut r = vec![SignalSpec::zero(); channels.len()];
            for lp in loops {
                let mine: Vec<usize> = (0..channels.len()).filter(|&c| lp.states.contains(&channels[c].y)).collect();
                if lp.reference.len() != mine.len() {
                    return Err(Error::Config(format!(
                        "loop {} needs {} reference signals for MI, has {}",
                        lp.id,
                        mine.len(),
                        lp.reference.len()
                    )));
                }
                for (c, sig) in mine.into_iter().zip(&lp.reference) {
                    r[c] = sig.clone();
                }
            }
            ExcitationMode::Mi { d, r }
        }
    };
    Controller::new(k, feedback, channels.to_vec(), mode)
}

/// One closed-loop run under `K_0` long enough for every loop.
pub fn collect_data<P: PlantModel>(
    plant: &P,
    loops: &[LoopSpec],
    channels: &[OutputChannel],
    injection: Injection,
    x0: &DVector<f64>,
    opts: &OdeOptions,
) -> Result<(DenseSolution, Controller)> {
    let ctrl = initial_controller(loops, channels, plant.input_dim(), injection)?;
    let horizon = loops.iter().map(|l| l.horizon()).fold(0.0, f64::max);
    let sol = integrate_closed_loop(plant, &ctrl, x0, horizon, opts)?;
    Ok((sol, ctrl))
}

/// Algorithm 1: one data collection under `K_0`, then independent learning in
/// every loop. A single loop covering all states is centralized EIRL.
///
/// `oracle` is the linearization the reference gains `K*_j` come from.
#[allow(clippy::too_many_arguments)]
pub fn run_deirl<P: PlantModel, M: PlantModel>(
    plant: &P,
    drift: &DriftResidualModel<M>,
    loops: &[LoopSpec],
    channels: &[OutputChannel],
    injection: Injection,
    x0: &DVector<f64>,
    opts: &OdeOptions,
    oracle: Option<&LtiSystem>,
) -> Result<LearningResult> {
    let (sol, ctrl) = collect_data(plant, loops, channels, injection, x0, opts)?;
    let mut out = vec![];
    for lp in loops {
        let k_star = match oracle {
            Some(sys) => Some(oracle_gain(sys, lp)?),
            None => None,
        };
        let b_jj = drift.b_block(lp);
        let res = Trajectory::from_dense(&sol, &ctrl, 0.0, lp.ts, lp.samples, INNER_INTERVALS)
            .and_then(|traj| LoopData::collect(&traj, lp, drift))
            .map(|data| learn_loop(&data, lp, &b_jj, k_star.clone()));
        out.push(res.unwrap_or_else(|e| LoopResult {
            loop_id: lp.id,
            values: vec![],
            gains: vec![lp.k0.clone()],
            kappas: vec![],
            errors: gain_error(&lp.k0, &k_star).into_iter().collect(),
            quad_gap: f64::NAN,
            failure: Some(e.to_string()),
            k_star,
        }));
    }
    Ok(LearningResult { loops: out })
}

/// Centralized EIRL: `run_deirl` with the single loop `lp`.
#[allow(clippy::too_many_arguments)]
pub fn run_eirl<P: PlantModel, M: PlantModel>(
    plant: &P,
    drift: &DriftResidualModel<M>,
    lp: &LoopSpec,
    channels: &[OutputChannel],
    injection: Injection,
    x0: &DVector<f64>,
    opts: &OdeOptions,
    oracle: Option<&LtiSystem>,
) -> Result<LoopResult> {
    Ok(run_deirl(plant, drift, std::slice::from_ref(lp), channels, injection, x0, opts, oracle)?.loops.remove(0))
}

/// Conditioning baseline for the original IRL: no excitation, the policy
/// frozen at `K_0`, and iteration `i` regressing on the `i`-th consecutive
/// window of `l` samples of one run from an off-trim state.
pub fn run_frozen_baseline<P: PlantModel, M: PlantModel>(
    plant: &P,
    drift: &DriftResidualModel<M>,
    lp: &LoopSpec,
    channels: &[OutputChannel],
    x0: &DVector<f64>,
    opts: &OdeOptions,
) -> Result<LoopResult> {
    let quiet = LoopSpec { probe: vec![SignalSpec::zero(); lp.m()], reference: vec![], ..lp.clone() };
    let ctrl = initial_controller(std::slice::from_ref(&quiet), channels, plant.input_dim(), Injection::Si)?;
    let span = lp.horizon();
    let sol = integrate_closed_loop(plant, &ctrl, x0, span * lp.iterations as f64, opts)?;
    let comp = build_compression(lp.n());
    let b_jj = drift.b_block(lp);
    let mut res = LoopResult {
        loop_id: lp.id,
        values: vec![],
        gains: vec![lp.k0.clone()],
        kappas: vec![],
        k_star: None,
        errors: vec![],
        quad_gap: 0.0,
        failure: None,
    };
    for i in 0..lp.iterations {
        let traj = Trajectory::from_dense(&sol, &ctrl, i as f64 * span, lp.ts, lp.samples, 20)?;
        let data = LoopData::collect(&traj, &quiet, drift)?;
        res.quad_gap = res.quad_gap.max(data.quad_gap);
        let reg = data.regression(&quiet, &lp.k0, &b_jj, &comp, i)?;
        res.kappas.push(reg.kappa);
        match solve_regression(&reg) {
            Ok(v) => res.values.push(v),
            Err(e) => {
                res.failure.get_or_insert(e.to_string());
            }
        }
        res.gains.push(lp.k0.clone());
    }
    Ok(res)
}
