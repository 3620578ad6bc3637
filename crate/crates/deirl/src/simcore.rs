//! Nonlinear closed-loop simulation: an adaptive Dormand–Prince 4(5)
//! integrator with dense output, deterministic excitation signals, integrator
//! augmentation, the SI/MI feedback structure, sampled trajectories for
//! learning, and step-response metrics.

use std::io::{Read, Write};

use nalgebra::{DMatrix, DVector};

use crate::lincontrol::OutputChannel;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Trig {
    Sin,
    Cos,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SignalTerm {
    pub amplitude: f64,
    /// Angular frequency in rad/s.
    pub omega: f64,
    pub kind: Trig,
}

impl SignalTerm {
    pub fn with_period(amplitude: f64, period: f64, kind: Trig) -> Self {
        Self { amplitude, omega: 2.0 * std::f64::consts::PI / period, kind }
    }
}

/// `bias + Σ aᵢ·trig(ωᵢ t)`.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct SignalSpec {
    pub terms: Vec<SignalTerm>,
    pub bias: f64,
}

impl SignalSpec {
    pub fn zero() -> Self {
        Self::default()
    }

    pub fn constant(bias: f64) -> Self {
        Self { terms: vec![], bias }
    }

    pub fn eval(&self, t: f64) -> f64 {
        self.bias
            + self
                .terms
                .iter()
                .map(|s| match s.kind {
                    Trig::Sin => s.amplitude * (s.omega * t).sin(),
                    Trig::Cos => s.amplitude * (s.omega * t).cos(),
                })
                .sum::<f64>()
    }

    /// `∫₀ᵗ` of the signal, in closed form.
    pub fn integral(&self, t: f64) -> f64 {
        self.bias * t
            + self
                .terms
                .iter()
                .map(|s| match s.kind {
                    Trig::Sin => s.amplitude * (1.0 - (s.omega * t).cos()) / s.omega,
                    Trig::Cos => s.amplitude * (s.omega * t).sin() / s.omega,
                })
                .sum::<f64>()
    }

    /// Same signal with every amplitude and the bias multiplied by `k`.
    pub fn scaled(&self, k: f64) -> Self {
        Self {
            terms: self.terms.iter().map(|s| SignalTerm { amplitude: s.amplitude * k, ..*s }).collect(),
            bias: self.bias * k,
        }
    }
}

pub fn eval_signal(sig: &SignalSpec, t: f64) -> f64 {
    sig.eval(t)
}

/// A control-affine plant `ẋ = f(x) + g(x) u`.
pub trait PlantModel: Sync {
    fn state_dim(&self) -> usize;
    fn input_dim(&self) -> usize;
    fn drift(&self, x: &DVector<f64>) -> DVector<f64>;
    fn input_map(&self, x: &DVector<f64>) -> DMatrix<f64>;

    fn rhs(&self, x: &DVector<f64>, u: &DVector<f64>) -> DVector<f64> {
        self.drift(x) + self.input_map(x) * u
    }
}

impl<M: PlantModel + ?Sized> PlantModel for &M {
    fn state_dim(&self) -> usize {
        (**self).state_dim()
    }
    fn input_dim(&self) -> usize {
        (**self).input_dim()
    }
    fn drift(&self, x: &DVector<f64>) -> DVector<f64> {
        (**self).drift(x)
    }
    fn input_map(&self, x: &DVector<f64>) -> DMatrix<f64> {
        (**self).input_map(x)
    }
    fn rhs(&self, x: &DVector<f64>, u: &DVector<f64>) -> DVector<f64> {
        (**self).rhs(x, u)
    }
}

/// `ẋ = A x + B u` as a plant.
#[derive(Debug, Clone)]
pub struct LtiPlant(pub crate::lincontrol::LtiSystem);

impl PlantModel for LtiPlant {
    fn state_dim(&self) -> usize {
        self.0.n()
    }
    fn input_dim(&self) -> usize {
        self.0.m()
    }
    fn drift(&self, x: &DVector<f64>) -> DVector<f64> {
        &self.0.a * x
    }
    fn input_map(&self, _x: &DVector<f64>) -> DMatrix<f64> {
        self.0.b.clone()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Slot {
    Plant(usize),
    Integral(usize),
}

/// A plant with an integrator `ż = y` placed directly in front of each
/// chosen output state.
#[derive(Debug, Clone)]
pub struct Augmented<M> {
    pub inner: M,
    outputs: Vec<usize>,
    slots: Vec<Slot>,
}

pub fn augment_integrators<M: PlantModel>(model: M, outputs: &[usize]) -> Result<Augmented<M>> {
    let n = model.state_dim();
    let mut seen = vec![false; n];
    for &y in outputs {
        if y >= n {
            return Err(Error::Dimension(format!("output index {y} out of range")));
        }
        if std::mem::replace(&mut seen[y], true) {
            return Err(Error::Dimension(format!("duplicate output index {y}")));
        }
    }
    let mut slots = Vec::with_capacity(n + outputs.len());
    for (i, &integrated) in seen.iter().enumerate() {
        if integrated {
            slots.push(Slot::Integral(i));
        }
        slots.push(Slot::Plant(i));
    }
    Ok(Augmented { inner: model, outputs: outputs.to_vec(), slots })
}

impl<M: PlantModel> Augmented<M> {
    fn find(&self, s: Slot) -> usize {
        self.slots.iter().position(|&x| x == s).expect("slot exists")
    }

    /// Augmented index of plant state `i`.
    pub fn plant_index(&self, i: usize) -> usize {
        self.find(Slot::Plant(i))
    }

    /// Output/integrator slots, in the order the outputs were given.
    pub fn channels(&self) -> Vec<OutputChannel> {
        self.outputs
            .iter()
            .map(|&y| OutputChannel { y: self.find(Slot::Plant(y)), z: Some(self.find(Slot::Integral(y))) })
            .collect()
    }

    pub fn inner_state(&self, x: &DVector<f64>) -> DVector<f64> {
        let mut p = DVector::zeros(self.inner.state_dim());
        for (k, s) in self.slots.iter().enumerate() {
            if let Slot::Plant(i) = s {
                p[*i] = x[k];
            }
        }
        p
    }

    /// Augmented state for plant state `p` with the given integrator values.
    pub fn lift_state(&self, p: &DVector<f64>, z: &[f64]) -> DVector<f64> {
        let mut x = DVector::zeros(self.slots.len());
        for (k, s) in self.slots.iter().enumerate() {
            x[k] = match s {
                Slot::Plant(i) => p[*i],
                Slot::Integral(i) => {
                    let pos = self.outputs.iter().position(|o| o == i).unwrap();
                    z.get(pos).copied().unwrap_or(0.0)
                }
            };
        }
        x
    }
}

impl<M: PlantModel> PlantModel for Augmented<M> {
    fn state_dim(&self) -> usize {
        self.slots.len()
    }
    fn input_dim(&self) -> usize {
        self.inner.input_dim()
    }
    fn drift(&self, x: &DVector<f64>) -> DVector<f64> {
        let p = self.inner_state(x);
        let f = self.inner.drift(&p);
        DVector::from_iterator(
            self.slots.len(),
            self.slots.iter().map(|s| match s {
                Slot::Plant(i) => f[*i],
                Slot::Integral(i) => p[*i],
            }),
        )
    }
    fn input_map(&self, x: &DVector<f64>) -> DMatrix<f64> {
        let g = self.inner.input_map(&self.inner_state(x));
        let mut out = DMatrix::zeros(self.slots.len(), g.ncols());
        for (k, s) in self.slots.iter().enumerate() {
            if let Slot::Plant(i) = s {
                out.set_row(k, &g.row(*i));
            }
        }
        out
    }
}

/// Excitation injected on top of the state feedback.
#[derive(Debug, Clone, PartialEq)]
pub enum ExcitationMode {
    /// `u = −K x + d`.
    Si { d: Vec<SignalSpec> },
    /// `u = −K (x − x_ref) + d`, `x_ref` built from one reference per output.
    Mi { d: Vec<SignalSpec>, r: Vec<SignalSpec> },
}

impl ExcitationMode {
    pub fn label(&self) -> &'static str {
        match self {
            ExcitationMode::Si { .. } => "si",
            ExcitationMode::Mi { .. } => "mi",
        }
    }

    pub fn none(m: usize) -> Self {
        ExcitationMode::Si { d: vec![SignalSpec::zero(); m] }
    }
}

/// Which slots of `x_ref` the reference drives.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReferenceFeed {
    /// `∫r` in integrator slots and `r` in output slots (multi-injection).
    Full,
    /// `∫r` in integrator slots only: the command acts through `ż = y − r`.
    IntegratorOnly,
}

#[derive(Debug, Clone)]
pub struct Controller {
    /// `m × |feedback|`.
    pub k: DMatrix<f64>,
    /// State slots the gain acts on; the rest (e.g. altitude) are not fed back.
    pub feedback: Vec<usize>,
    pub channels: Vec<OutputChannel>,
    pub mode: ExcitationMode,
    pub feed: ReferenceFeed,
}

impl Controller {
    pub fn new(
        k: DMatrix<f64>,
        feedback: Vec<usize>,
        channels: Vec<OutputChannel>,
        mode: ExcitationMode,
    ) -> Result<Self> {
        if k.ncols() != feedback.len() {
            return Err(Error::Dimension(format!(
                "gain has {} columns for {} feedback states",
                k.ncols(),
                feedback.len()
            )));
        }
        match &mode {
            ExcitationMode::Si { d } | ExcitationMode::Mi { d, .. } if d.len() != k.nrows() => {
                return Err(Error::Dimension("one probing signal per input required".into()))
            }
            ExcitationMode::Mi { r, .. } if r.len() != channels.len() => {
                return Err(Error::Dimension("one reference per output channel required".into()))
            }
            _ => {}
        }
        Ok(Self { k, feedback, channels, mode, feed: ReferenceFeed::Full })
    }

    pub fn with_feed(mut self, feed: ReferenceFeed) -> Self {
        self.feed = feed;
        self
    }

    pub fn reference_state(&self, t: f64, dim: usize) -> DVector<f64> {
        let mut x = DVector::zeros(dim);
        if let ExcitationMode::Mi { r, .. } = &self.mode {
            for (ch, sig) in self.channels.iter().zip(r) {
                if let Some(z) = ch.z {
                    x[z] = sig.integral(t);
                }
                if self.feed == ReferenceFeed::Full {
                    x[ch.y] = sig.eval(t);
                }
            }
        }
        x
    }

    pub fn control(&self, t: f64, x: &DVector<f64>) -> DVector<f64> {
        let e = x - self.reference_state(t, x.len());
        let e = DVector::from_iterator(self.feedback.len(), self.feedback.iter().map(|&i| e[i]));
        let d = match &self.mode {
            ExcitationMode::Si { d } | ExcitationMode::Mi { d, .. } => d,
        };
        -(&self.k * e) + DVector::from_iterator(d.len(), d.iter().map(|s| s.eval(t)))
    }
}

#[derive(Debug, Clone, Copy)]
pub struct OdeOptions {
    pub rtol: f64,
    pub atol: f64,
    pub max_step: f64,
    /// Divergence guard on ‖x‖∞.
    pub blowup_bound: f64,
}

impl Default for OdeOptions {
    fn default() -> Self {
        Self { rtol: 1e-8, atol: 1e-10, max_step: 0.1, blowup_bound: 1e6 }
    }
}

// Dormand–Prince 4(5) tableau with Hairer's 4th-order continuous extension.
const C: [f64; 7] = [0.0, 0.2, 0.3, 0.8, 8.0 / 9.0, 1.0, 1.0];
const A: [[f64; 6]; 7] = [
    [0.0; 6],
    [0.2, 0.0, 0.0, 0.0, 0.0, 0.0],
    [3.0 / 40.0, 9.0 / 40.0, 0.0, 0.0, 0.0, 0.0],
    [44.0 / 45.0, -56.0 / 15.0, 32.0 / 9.0, 0.0, 0.0, 0.0],
    [19372.0 / 6561.0, -25360.0 / 2187.0, 64448.0 / 6561.0, -212.0 / 729.0, 0.0, 0.0],
    [9017.0 / 3168.0, -355.0 / 33.0, 46732.0 / 5247.0, 49.0 / 176.0, -5103.0 / 18656.0, 0.0],
    [35.0 / 384.0, 0.0, 500.0 / 1113.0, 125.0 / 192.0, -2187.0 / 6784.0, 11.0 / 84.0],
];
const E: [f64; 7] =
    [71.0 / 57600.0, 0.0, -71.0 / 16695.0, 71.0 / 1920.0, -17253.0 / 339200.0, 22.0 / 525.0, -1.0 / 40.0];
const D: [f64; 7] = [
    -12715105075.0 / 11282082432.0,
    0.0,
    87487479700.0 / 32700410799.0,
    -10690763975.0 / 1880347072.0,
    701980252875.0 / 199316789632.0,
    -1453857185.0 / 822651844.0,
    69997945.0 / 29380423.0,
];

#[derive(Debug, Clone)]
struct DenseStep {
    t: f64,
    h: f64,
    r: [DVector<f64>; 5],
}

/// Accepted steps of one integration with their interpolation coefficients.
#[derive(Debug, Clone)]
pub struct DenseSolution {
    steps: Vec<DenseStep>,
    pub t0: f64,
    pub t1: f64,
    pub rejected: usize,
}

impl DenseSolution {
    pub fn eval(&self, t: f64) -> DVector<f64> {
        let t = t.clamp(self.t0, self.t1);
        let i = self.steps.partition_point(|s| s.t + s.h < t).min(self.steps.len() - 1);
        let s = &self.steps[i];
        let th = (t - s.t) / s.h;
        let th1 = 1.0 - th;
        &s.r[0] + (&s.r[1] + (&s.r[2] + (&s.r[3] + &s.r[4] * th1) * th) * th1) * th
    }

    pub fn accepted(&self) -> usize {
        self.steps.len()
    }
}

fn err_norm(err: &DVector<f64>, y0: &DVector<f64>, y1: &DVector<f64>, o: &OdeOptions) -> f64 {
    let n = err.len() as f64;
    (err.iter()
        .zip(y0.iter().zip(y1.iter()))
        .map(|(e, (a, b))| {
            let sc = o.atol + o.rtol * a.abs().max(b.abs());
            (e / sc).powi(2)
        })
        .sum::<f64>()
        / n)
        .sqrt()
}

/// Adaptive DOPRI5 from `t0` to `t1`.
pub fn integrate<F>(rhs: F, t0: f64, t1: f64, x0: &DVector<f64>, opts: &OdeOptions) -> Result<DenseSolution>
where
    F: Fn(f64, &DVector<f64>) -> DVector<f64>,
{
    let mut t = t0;
    let mut y = x0.clone();
    let mut k1 = rhs(t, &y);
    let mut h = {
        let d0 = err_norm(&y, &y, &y, opts);
        let d1 = err_norm(&k1, &y, &y, opts);
        let h0 = if d0 < 1e-5 || d1 < 1e-5 { 1e-6 } else { 0.01 * d0 / d1 };
        h0.min(opts.max_step).min(t1 - t0)
    };
    let mut sol = DenseSolution { steps: vec![], t0, t1, rejected: 0 };
    let mut k = vec![DVector::zeros(y.len()); 7];
    while t < t1 {
        if t + h > t1 || t1 - (t + h) < 1e-12 * t1.abs().max(1.0) {
            h = t1 - t;
        }
        k[0] = k1.clone();
        for s in 1..7 {
            let mut ys = y.clone();
            for j in 0..s {
                if A[s][j] != 0.0 {
                    ys.axpy(h * A[s][j], &k[j], 1.0);
                }
            }
            k[s] = rhs(t + C[s] * h, &ys);
        }
        let mut y1 = y.clone();
        for j in 0..6 {
            if A[6][j] != 0.0 {
                y1.axpy(h * A[6][j], &k[j], 1.0);
            }
        }
        let mut err = DVector::zeros(y.len());
        for j in 0..7 {
            if E[j] != 0.0 {
                err.axpy(h * E[j], &k[j], 1.0);
            }
        }
        let en = err_norm(&err, &y, &y1, opts);
        if !en.is_finite() {
            return Err(Error::NonFinite(format!("integration at t = {t}")));
        }
        if en <= 1.0 {
            let ydiff = &y1 - &y;
            let bspl = &k[0] * h - &ydiff;
            let r4 = &ydiff - &k[6] * h - &bspl;
            let mut r5 = DVector::zeros(y.len());
            for j in 0..7 {
                if D[j] != 0.0 {
                    r5.axpy(h * D[j], &k[j], 1.0);
                }
            }
            sol.steps.push(DenseStep { t, h, r: [y.clone(), ydiff, bspl, r4, r5] });
            t += h;
            y = y1;
            k1 = k[6].clone();
            if y.amax() > opts.blowup_bound {
                return Err(Error::Divergence { t, norm: y.amax() });
            }
            let fac = if en == 0.0 { 5.0 } else { (0.9 * en.powf(-0.2)).clamp(0.2, 5.0) };
            h = (h * fac).min(opts.max_step);
        } else {
            sol.rejected += 1;
            h *= (0.9 * en.powf(-0.2)).clamp(0.1, 1.0);
            if h < 1e-14 * t.abs().max(1.0) {
                return Err(Error::NonConvergence { what: format!("step size underflow at t = {t}"), residual: en });
            }
        }
    }
    Ok(sol)
}

/// One inner-grid point: time, state and the control actually applied.
#[derive(Debug, Clone, PartialEq)]
pub struct Node {
    pub t: f64,
    pub x: DVector<f64>,
    pub u: DVector<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Segment {
    pub t0: f64,
    pub t1: f64,
    pub nodes: Vec<Node>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub sample_times: Vec<f64>,
    pub states: Vec<DVector<f64>>,
    pub controls: Vec<DVector<f64>>,
    segments: Vec<Segment>,
    pub mode: String,
    pub loop_id: Option<usize>,
    pub controller: String,
}

/// Default number of quadrature sub-intervals per sample interval.
pub const INNER_INTERVALS: usize = 200;

impl Trajectory {
    /// Samples `sol` at `t_start + k·T_s`, `k = 0..=l`, with `inner`
    /// sub-intervals (a multiple of four) between consecutive samples.
    pub fn from_dense(
        sol: &DenseSolution,
        ctrl: &Controller,
        t_start: f64,
        ts: f64,
        l: usize,
        inner: usize,
    ) -> Result<Self> {
        if inner == 0 || !inner.is_multiple_of(4) {
            return Err(Error::Dimension(format!("inner interval count {inner} must be a positive multiple of 4")));
        }
        if !(ts > 0.0) || l == 0 {
            return Err(Error::Dimension("need a positive sample period and at least one interval".into()));
        }
        let t_end = t_start + l as f64 * ts;
        if t_start < sol.t0 - 1e-12 || t_end > sol.t1 + 1e-9 * sol.t1.abs().max(1.0) {
            return Err(Error::Dimension(format!("samples [{t_start}, {t_end}] outside integration span")));
        }
        let node = |t: f64| {
            let x = sol.eval(t);
            let u = ctrl.control(t, &x);
            Node { t, x, u }
        };
        let mut segments = Vec::with_capacity(l);
        let mut sample_times = Vec::with_capacity(l + 1);
        let mut states = Vec::with_capacity(l + 1);
        let mut controls = Vec::with_capacity(l + 1);
        for k in 0..=l {
            let n = node(t_start + k as f64 * ts);
            sample_times.push(n.t);
            states.push(n.x);
            controls.push(n.u);
        }
        for k in 0..l {
            let t0 = sample_times[k];
            let t1 = sample_times[k + 1];
            let nodes = (0..=inner).map(|i| node(t0 + (t1 - t0) * i as f64 / inner as f64)).collect();
            segments.push(Segment { t0, t1, nodes });
        }
        Ok(Self {
            sample_times,
            states,
            controls,
            segments,
            mode: ctrl.mode.label().into(),
            loop_id: None,
            controller: String::new(),
        })
    }

    pub fn segments(&self) -> &[Segment] {
        &self.segments
    }

    pub fn intervals(&self) -> usize {
        self.segments.len()
    }

    /// All inner-grid nodes in time order, shared endpoints once.
    pub fn nodes(&self) -> impl Iterator<Item = &Node> {
        self.segments.iter().enumerate().flat_map(|(k, s)| s.nodes.iter().skip(if k == 0 { 0 } else { 1 }))
    }

    /// CSV with columns `t, x1..xn, u1..um` over the inner grid.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        self.write_csv_tagged(w, None)
    }

    /// As [`Trajectory::write_csv`], with a trailing `config_hash` column.
    pub fn write_csv_tagged<W: Write>(&self, w: W, tag: Option<&str>) -> Result<()> {
        let mut wr = csv::Writer::from_writer(w);
        let n = self.states.first().map_or(0, |x| x.len());
        let m = self.controls.first().map_or(0, |u| u.len());
        let mut head = vec!["t".to_string()];
        head.extend((1..=n).map(|i| format!("x{i}")));
        head.extend((1..=m).map(|i| format!("u{i}")));
        if tag.is_some() {
            head.push("config_hash".into());
        }
        wr.write_record(&head)?;
        for nd in self.nodes() {
            let mut rec = vec![fmt(nd.t)];
            rec.extend(nd.x.iter().map(|v| fmt(*v)));
            rec.extend(nd.u.iter().map(|v| fmt(*v)));
            rec.extend(tag.map(str::to_string));
            wr.write_record(&rec)?;
        }
        wr.flush()?;
        Ok(())
    }

    /// Reads a trajectory back, regrouping nodes into `intervals` segments
    /// of equal node count.
    pub fn read_csv<R: Read>(r: R, intervals: usize) -> Result<Self> {
        let mut rd = csv::Reader::from_reader(r);
        let head = rd.headers()?.clone();
        let n = head.iter().filter(|h| h.starts_with('x')).count();
        let m = head.iter().filter(|h| h.starts_with('u')).count();
        let width = 1 + n + m;
        let mut nodes = vec![];
        for rec in rd.records() {
            let rec = rec?;
            let v: Vec<f64> = rec
                .iter()
                .take(width)
                .map(|s| s.parse::<f64>().map_err(|e| Error::Config(format!("bad number {s:?}: {e}"))))
                .collect::<Result<_>>()?;
            nodes.push(Node {
                t: v[0],
                x: DVector::from_column_slice(&v[1..1 + n]),
                u: DVector::from_column_slice(&v[1 + n..1 + n + m]),
            });
        }
        if intervals == 0 || nodes.len() < 2 || (nodes.len() - 1) % intervals != 0 {
            return Err(Error::Dimension(format!("{} nodes cannot form {intervals} equal intervals", nodes.len())));
        }
        let per = (nodes.len() - 1) / intervals;
        let segments: Vec<_> = (0..intervals)
            .map(|k| {
                let s = nodes[k * per..=(k + 1) * per].to_vec();
                Segment { t0: s[0].t, t1: s[per].t, nodes: s }
            })
            .collect();
        let picks: Vec<&Node> = (0..=intervals).map(|k| &nodes[k * per]).collect();
        Ok(Self {
            sample_times: picks.iter().map(|n| n.t).collect(),
            states: picks.iter().map(|n| n.x.clone()).collect(),
            controls: picks.iter().map(|n| n.u.clone()).collect(),
            segments,
            mode: String::new(),
            loop_id: None,
            controller: String::new(),
        })
    }
}

/// Shortest round-trip formatting, so CSVs are byte-stable.
pub fn fmt(v: f64) -> String {
    format!("{v:e}")
}

/// Integrates the closed loop `ẋ = f(x) + g(x)·u(t, x)` from `x0` at `t = 0`.
pub fn integrate_closed_loop<M: PlantModel + ?Sized>(
    model: &M,
    ctrl: &Controller,
    x0: &DVector<f64>,
    t_final: f64,
    opts: &OdeOptions,
) -> Result<DenseSolution> {
    integrate(|t, x| model.rhs(x, &ctrl.control(t, x)), 0.0, t_final, x0, opts)
}

/// Closed-loop run sampled at `t_k = k·T_s` up to `t_final`.
pub fn simulate<M: PlantModel + ?Sized>(
    model: &M,
    ctrl: &Controller,
    x0: &DVector<f64>,
    t_final: f64,
    ts: f64,
    opts: &OdeOptions,
) -> Result<Trajectory> {
    let l = ((t_final / ts) + 1e-9).floor() as usize;
    let sol = integrate_closed_loop(model, ctrl, x0, t_final, opts)?;
    Trajectory::from_dense(&sol, ctrl, 0.0, ts, l, INNER_INTERVALS.min(64))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepMetrics {
    pub rise_time_90: f64,
    pub settle_time_1pct: f64,
    pub overshoot_pct: f64,
}

/// Rise (first crossing of 90 %), settling (last exit from the ±1 % band)
/// and percent overshoot of state `channel` responding to a step of `step`.
/// Crossing times are linearly interpolated between grid nodes.
pub fn step_metrics(traj: &Trajectory, channel: usize, step: f64) -> Result<StepMetrics> {
    let pts: Vec<(f64, f64)> = traj.nodes().map(|n| (n.t, n.x[channel] / step)).collect();
    let cross = |i: usize, level: f64| {
        let ((ta, ya), (tb, yb)) = (pts[i - 1], pts[i]);
        if yb == ya {
            tb
        } else {
            ta + (tb - ta) * (level - ya) / (yb - ya)
        }
    };
    let rise = (1..pts.len())
        .find(|&i| pts[i].1 >= 0.9)
        .map(|i| if pts[i - 1].1 < 0.9 { cross(i, 0.9) } else { pts[i].0 })
        .ok_or_else(|| Error::NonConvergence {
            what: "step never reaches 90 %".into(),
            residual: pts.last().map_or(0.0, |p| p.1),
        })?;
    let settle = match pts.iter().rposition(|p| (p.1 - 1.0).abs() > 0.01) {
        None => pts[0].0,
        Some(i) if i + 1 == pts.len() => f64::INFINITY,
        Some(i) => {
            let level = if pts[i].1 > 1.0 { 1.01 } else { 0.99 };
            cross(i + 1, level)
        }
    };
    let peak = pts.iter().map(|p| p.1).fold(f64::NEG_INFINITY, f64::max);
    Ok(StepMetrics { rise_time_90: rise, settle_time_1pct: settle, overshoot_pct: ((peak - 1.0) * 100.0).max(0.0) })
}
