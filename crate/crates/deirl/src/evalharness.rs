//! Study configuration, the evaluation drivers and their CSV artifacts.
//!
//! Every study returns a [`StudyReport`]: the tables it produced (held in
//! memory and written in one pass at the end) and the checks it ran. Checks
//! carrying an acceptance criterion decide the CLI exit code.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use ini::Ini;
use nalgebra::{DMatrix, DVector};
use sha2::{Digest, Sha256};

use crate::eirl::{self, Injection, LearningResult, LoopResult, LoopSpec};
use crate::hsv::{self, design, HsvModel, HsvParams};
use crate::lincontrol::{self, LqrProblem, LtiSystem, OutputChannel};
use crate::simcore::{
    fmt, integrate_closed_loop, Augmented, Controller, ExcitationMode, LtiPlant, OdeOptions, PlantModel, ReferenceFeed,
    SignalSpec, SignalTerm, StepMetrics, Trajectory, Trig,
};
use crate::{Error, Result};

/// Published values the studies are checked against.
pub mod published {
    pub const K1_STAR: [f64; 2] = [0.2582, 4.3577];
    pub const K2_STAR: [f64; 4] = [10.0, 26.3393, 1.6514, 0.9921];
    pub const K_STAR: [[f64; 6]; 2] =
        [[0.2581, 4.3622, 0.0074, 0.0814, 0.0000, 0.0001], [-0.2865, -1.1120, 9.9959, 26.3120, 1.6512, 0.9921]];
    pub const NU_0P9_K1_STAR: [f64; 2] = [0.2582, 4.3580];
    pub const NU_0P9_K2_STAR: [f64; 4] = [10.0, 27.0327, 1.5685, 0.9671];
    pub const NU_0P75_K1_STAR: [f64; 2] = [0.2582, 4.3586];
    pub const NU_0P75_K2_STAR: [f64; 4] = [10.0, 28.2496, 1.4303, 0.9238];

    pub const KAPPA_DEIRL_1: f64 = 123.0;
    pub const KAPPA_DEIRL_2: f64 = 4.8e3;
    pub const KAPPA_SI_EIRL: f64 = 7.5e6;

    /// FPA step at ν = 0.75: (settle, overshoot) for nominal LQ and dEIRL.
    pub const FPA_NOMINAL_0P75: (f64, f64) = (16.75, 12.41);
    pub const FPA_DEIRL_0P75: (f64, f64) = (10.28, 7.98);
}

/// Which plant a study runs on.
#[derive(Debug, Clone)]
pub enum PlantSpec {
    Hsv,
    /// A linear plant; `outputs` get integrators in front of them.
    Lti {
        name: String,
        sys: LtiSystem,
        outputs: Vec<usize>,
    },
}

/// The plant a study simulates.
#[derive(Debug, Clone)]
pub enum StudyPlant {
    Hsv(HsvModel),
    Lti(LtiPlant),
}

impl PlantModel for StudyPlant {
    fn state_dim(&self) -> usize {
        match self {
            StudyPlant::Hsv(p) => p.state_dim(),
            StudyPlant::Lti(p) => p.state_dim(),
        }
    }
    fn input_dim(&self) -> usize {
        match self {
            StudyPlant::Hsv(p) => p.input_dim(),
            StudyPlant::Lti(p) => p.input_dim(),
        }
    }
    fn drift(&self, x: &DVector<f64>) -> DVector<f64> {
        match self {
            StudyPlant::Hsv(p) => p.drift(x),
            StudyPlant::Lti(p) => p.drift(x),
        }
    }
    fn input_map(&self, x: &DVector<f64>) -> DMatrix<f64> {
        match self {
            StudyPlant::Hsv(p) => p.input_map(x),
            StudyPlant::Lti(p) => p.input_map(x),
        }
    }
    fn rhs(&self, x: &DVector<f64>, u: &DVector<f64>) -> DVector<f64> {
        match self {
            StudyPlant::Hsv(p) => p.rhs(x, u),
            StudyPlant::Lti(p) => p.rhs(x, u),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LoopConfig {
    pub states: Vec<usize>,
    pub controls: Vec<usize>,
    pub ts: f64,
    pub samples: usize,
    pub iterations: usize,
    pub q: DMatrix<f64>,
    pub r: DMatrix<f64>,
    pub k0: DMatrix<f64>,
    pub probe: Vec<SignalSpec>,
    pub reference: Vec<SignalSpec>,
}

/// Sampling of a centralized run: `T_s`, `l`, `i*`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Windows {
    pub ts: f64,
    pub samples: usize,
    pub iterations: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepConfig {
    pub v_step: f64,
    pub v_horizon: f64,
    pub gamma_step: f64,
    pub gamma_horizon: f64,
    pub sample: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FreqConfig {
    pub omega_min: f64,
    pub omega_max: f64,
    pub points: usize,
}

#[derive(Debug, Clone)]
pub struct StudyConfig {
    pub plant: PlantSpec,
    /// Plant lift parameter for single-model studies.
    pub nu: f64,
    /// Perturbations visited by the recovery study.
    pub nu_list: Vec<f64>,
    pub mode: Injection,
    pub out: PathBuf,
    pub ode: OdeOptions,
    pub loops: Vec<LoopConfig>,
    pub eirl: Windows,
    pub old_irl: Windows,
    /// Off-trim initial state of the unexcited baseline (plant coordinates).
    pub old_irl_x0: Vec<f64>,
    pub step: StepConfig,
    pub freq: FreqConfig,
    pub sim_horizon: f64,
    pub sim_sample: f64,
}

fn sig(terms: &[(f64, f64, Trig)], bias: f64) -> SignalSpec {
    SignalSpec { terms: terms.iter().map(|&(a, p, k)| SignalTerm::with_period(a, p, k)).collect(), bias }
}

fn diag(v: &[f64]) -> DMatrix<f64> {
    DMatrix::from_diagonal(&DVector::from_row_slice(v))
}

/// The learning hyperparameters and excitation of the HSV studies.
fn hsv_loops() -> Vec<LoopConfig> {
    use Trig::*;
    let [p1, p2] = hsv::partition();
    vec![
        LoopConfig {
            states: p1.states,
            controls: p1.controls,
            ts: 6.0,
            samples: 15,
            iterations: 5,
            q: diag(&design::Q1),
            r: diag(&design::R1),
            k0: DMatrix::from_row_slice(1, 2, &design::K0_1),
            probe: vec![sig(&[(0.1, 25.0, Sin), (0.1, 250.0, Sin)], 0.2)],
            // kft/s
            reference: vec![sig(&[(0.01, 10.0, Cos), (0.01, 25.0, Sin), (0.05, 200.0, Sin)], 0.0)],
        },
        LoopConfig {
            states: p2.states,
            controls: p2.controls,
            ts: 2.0,
            samples: 25,
            iterations: 5,
            q: diag(&design::Q2),
            r: diag(&design::R2),
            k0: DMatrix::from_row_slice(1, 4, &design::K0_2),
            probe: vec![sig(&[(10.0, 6.0, Sin), (5.0, 50.0, Cos), (2.5, 25.0, Sin)], 0.0)],
            reference: vec![sig(&[(0.02, 3.0, Cos), (0.1, 6.0, Sin), (0.25, 15.0, Sin)], 0.0)],
        },
    ]
}

/// A weakly coupled two-loop plant with an unstable first block.
pub fn builtin_lti() -> LtiSystem {
    let a = DMatrix::from_row_slice(
        4,
        4,
        &[0.0, 1.0, 0.0, 0.0, 2.0, -1.0, 0.5, 0.0, 0.0, 0.0, 0.0, 1.0, 0.3, 0.0, -1.0, -0.5],
    );
    let b = DMatrix::from_row_slice(4, 2, &[0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 1.0]);
    LtiSystem::new(a, b).expect("fixed shapes")
}

fn builtin_loops() -> Vec<LoopConfig> {
    use Trig::*;
    let mk = |states: Vec<usize>, c: usize, k0: [f64; 2], probe: SignalSpec| LoopConfig {
        states,
        controls: vec![c],
        ts: 1.0,
        samples: 15,
        iterations: 5,
        q: DMatrix::identity(2, 2),
        r: DMatrix::identity(1, 1),
        k0: DMatrix::from_row_slice(1, 2, &k0),
        probe: vec![probe],
        reference: vec![],
    };
    vec![
        mk(vec![0, 1], 0, [6.0, 3.0], sig(&[(1.0, 7.0, Sin), (0.5, 3.0, Cos), (0.3, 11.0, Sin)], 0.0)),
        mk(vec![2, 3], 1, [1.0, 1.5], sig(&[(1.0, 5.0, Sin), (0.5, 2.0, Cos), (0.3, 13.0, Sin)], 0.0)),
    ]
}

impl StudyConfig {
    /// The published HSV setup.
    pub fn hsv_default() -> Self {
        Self {
            plant: PlantSpec::Hsv,
            nu: 1.0,
            nu_list: vec![0.9, 0.75],
            mode: Injection::Mi,
            out: PathBuf::from("results"),
            ode: OdeOptions::default(),
            loops: hsv_loops(),
            eirl: Windows { ts: 5.0, samples: 25, iterations: 5 },
            old_irl: Windows { ts: 0.15, samples: 25, iterations: 5 },
            // +1 kft/s, +2°
            old_irl_x0: vec![1.0, 2.0, 0.0, 0.0, 0.0],
            step: StepConfig { v_step: 0.1, v_horizon: 250.0, gamma_step: 1.0, gamma_horizon: 60.0, sample: 0.05 },
            freq: FreqConfig { omega_min: 1e-3, omega_max: 1e2, points: 2001 },
            sim_horizon: 90.0,
            sim_sample: 0.05,
        }
    }

    fn lti_default(name: &str, sys: LtiSystem, outputs: Vec<usize>, loops: Vec<LoopConfig>) -> Self {
        let n = sys.n();
        Self {
            plant: PlantSpec::Lti { name: name.into(), sys, outputs },
            loops,
            eirl: Windows { ts: 1.0, samples: 30, iterations: 5 },
            old_irl_x0: vec![1.0; n],
            sim_horizon: 30.0,
            ..Self::hsv_default()
        }
    }

    pub fn builtin_default() -> Self {
        Self::lti_default("builtin", builtin_lti(), vec![], builtin_loops())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::parse(&text, path.parent())
    }

    /// Parses the key-value format; unspecified keys keep their defaults.
    /// `base` resolves relative plant file paths.
    pub fn parse(text: &str, base: Option<&Path>) -> Result<Self> {
        let ini = Ini::load_from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        let study = ini.section(Some("study"));
        let get = |k: &str| study.and_then(|s| s.get(k));
        let mut cfg = match get("plant").unwrap_or("hsv") {
            "hsv" => Self::hsv_default(),
            "builtin" => Self::builtin_default(),
            "file" => {
                let file = get("lti_file").ok_or_else(|| Error::Config("plant = file needs lti_file".into()))?;
                let path = base.map_or_else(|| PathBuf::from(file), |b| b.join(file));
                let sys = load_lti(&std::fs::read_to_string(&path)?)?;
                let outputs = get("outputs").map(parse_indices).transpose()?.unwrap_or_default();
                Self::lti_default(file, sys, outputs, vec![])
            }
            other => return Err(Error::Config(format!("unknown plant {other:?}"))),
        };
        for (sec, props) in ini.iter() {
            let sec = sec.unwrap_or("study");
            for (k, v) in props.iter() {
                cfg.set(sec, k, v)?;
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    fn set(&mut self, sec: &str, key: &str, v: &str) -> Result<()> {
        let bad = || Error::Config(format!("unknown key [{sec}] {key}"));
        match sec {
            "study" => match key {
                "plant" | "lti_file" | "outputs" => {}
                "nu" => self.nu = num(v)?,
                "nu_list" => self.nu_list = parse_list(v)?,
                "mode" => self.mode = parse_mode(v)?,
                "out" => self.out = PathBuf::from(v),
                "rtol" => self.ode.rtol = num(v)?,
                "atol" => self.ode.atol = num(v)?,
                "max_step" => self.ode.max_step = num(v)?,
                _ => return Err(bad()),
            },
            "eirl" | "old_irl" => {
                let w = if sec == "eirl" { &mut self.eirl } else { &mut self.old_irl };
                match key {
                    "ts" => w.ts = num(v)?,
                    "samples" => w.samples = count(v)?,
                    "iterations" => w.iterations = count(v)?,
                    "x0" if sec == "old_irl" => self.old_irl_x0 = parse_list(v)?,
                    _ => return Err(bad()),
                }
            }
            "step" => match key {
                "v_step" => self.step.v_step = num(v)?,
                "v_horizon" => self.step.v_horizon = num(v)?,
                "gamma_step" => self.step.gamma_step = num(v)?,
                "gamma_horizon" => self.step.gamma_horizon = num(v)?,
                "sample" => self.step.sample = num(v)?,
                _ => return Err(bad()),
            },
            "freqresp" => match key {
                "omega_min" => self.freq.omega_min = num(v)?,
                "omega_max" => self.freq.omega_max = num(v)?,
                "points" => self.freq.points = count(v)?,
                _ => return Err(bad()),
            },
            "simulate" => match key {
                "horizon" => self.sim_horizon = num(v)?,
                "sample" => self.sim_sample = num(v)?,
                _ => return Err(bad()),
            },
            s if s.starts_with("loop") => {
                let j: usize = s[4..].parse().map_err(|_| bad())?;
                if j == 0 || j > self.loops.len() + 1 {
                    return Err(Error::Config(format!("loop sections must be numbered 1, 2, … (got {s})")));
                }
                if j == self.loops.len() + 1 {
                    self.loops.push(LoopConfig {
                        states: vec![],
                        controls: vec![],
                        ts: 1.0,
                        samples: 0,
                        iterations: 5,
                        q: DMatrix::zeros(0, 0),
                        r: DMatrix::zeros(0, 0),
                        k0: DMatrix::zeros(0, 0),
                        probe: vec![],
                        reference: vec![],
                    });
                }
                let lc = &mut self.loops[j - 1];
                match key {
                    "states" => lc.states = parse_indices(v)?,
                    "controls" => lc.controls = parse_indices(v)?,
                    "ts" => lc.ts = num(v)?,
                    "samples" => lc.samples = count(v)?,
                    "iterations" => lc.iterations = count(v)?,
                    "q" => lc.q = parse_matrix(v)?,
                    "r" => lc.r = parse_matrix(v)?,
                    "k0" => lc.k0 = parse_matrix(v)?,
                    "probe" => lc.probe = parse_signals(v)?,
                    "reference" => lc.reference = parse_signals(v)?,
                    _ => return Err(bad()),
                }
            }
            _ => return Err(bad()),
        }
        Ok(())
    }

    /// Fills shorthand (diagonal `Q`/`R`, default `l`) and checks shapes.
    pub fn validate(&mut self) -> Result<()> {
        if self.loops.is_empty() {
            return Err(Error::Config("at least one [loopN] section is required".into()));
        }
        let nx = self.plant_dim();
        for (j, lc) in self.loops.iter_mut().enumerate() {
            let (n, m) = (lc.states.len(), lc.controls.len());
            if lc.q.nrows() == 0 {
                lc.q = DMatrix::identity(n, n);
            }
            if lc.r.nrows() == 0 {
                lc.r = DMatrix::identity(m, m);
            }
            if lc.q.shape() == (1, n) && n > 1 {
                lc.q = DMatrix::from_diagonal(&lc.q.row(0).transpose());
            }
            if lc.r.shape() == (1, m) && m > 1 {
                lc.r = DMatrix::from_diagonal(&lc.r.row(0).transpose());
            }
            if lc.samples == 0 {
                lc.samples = 2 * crate::symops::tri(n).max(1);
            }
            if lc.states.iter().any(|&s| s >= nx) {
                return Err(Error::Config(format!("loop {}: state index beyond {nx}", j + 1)));
            }
        }
        for (j, lc) in self.loops.iter().enumerate() {
            self.loop_spec(j)?.validate()?;
            if !lc.reference.is_empty() && lc.reference.len() != self.loop_channels(j).len() {
                return Err(Error::Config(format!("loop {}: one reference per output channel", j + 1)));
            }
        }
        if self.old_irl_x0.len() != self.inner_dim() {
            return Err(Error::Config(format!("old_irl x0 needs {} entries", self.inner_dim())));
        }
        if !(self.ode.rtol > 0.0 && self.ode.atol > 0.0 && self.ode.max_step > 0.0) {
            return Err(Error::Config("integrator tolerances must be positive".into()));
        }
        Ok(())
    }

    fn outputs(&self) -> Vec<usize> {
        match &self.plant {
            PlantSpec::Hsv => vec![0, 1],
            PlantSpec::Lti { outputs, .. } => outputs.clone(),
        }
    }

    fn inner_dim(&self) -> usize {
        match &self.plant {
            PlantSpec::Hsv => 5,
            PlantSpec::Lti { sys, .. } => sys.n(),
        }
    }

    /// State dimension after integrator augmentation.
    pub fn plant_dim(&self) -> usize {
        self.inner_dim() + self.outputs().len()
    }

    pub fn is_hsv(&self) -> bool {
        matches!(self.plant, PlantSpec::Hsv)
    }

    /// The plant at lift parameter `nu` (ignored for linear plants), trimmed
    /// and augmented.
    pub fn plant(&self, nu: f64) -> Result<Augmented<StudyPlant>> {
        let inner = match &self.plant {
            PlantSpec::Hsv => StudyPlant::Hsv(HsvModel::trimmed(HsvParams::nominal().with_nu(nu))?),
            PlantSpec::Lti { sys, .. } => StudyPlant::Lti(LtiPlant(sys.clone())),
        };
        crate::simcore::augment_integrators(inner, &self.outputs())
    }

    fn loop_channels(&self, j: usize) -> Vec<usize> {
        let ch = self.channels();
        (0..ch.len()).filter(|&c| self.loops[j].states.contains(&ch[c].y)).collect()
    }

    fn channels(&self) -> Vec<OutputChannel> {
        let outs = self.outputs();
        let mut slot = 0;
        let mut out = vec![];
        for i in 0..self.inner_dim() {
            if outs.contains(&i) {
                slot += 1;
            }
            if outs.contains(&i) {
                out.push((outs.iter().position(|&o| o == i).unwrap(), OutputChannel { y: slot, z: Some(slot - 1) }));
            }
            slot += 1;
        }
        out.sort_by_key(|p| p.0);
        out.into_iter().map(|p| p.1).collect()
    }

    pub fn loop_spec(&self, j: usize) -> Result<LoopSpec> {
        let lc = &self.loops[j];
        let reference = if lc.reference.is_empty() {
            vec![SignalSpec::zero(); self.loop_channels(j).len()]
        } else {
            lc.reference.clone()
        };
        Ok(LoopSpec {
            id: j + 1,
            states: lc.states.clone(),
            controls: lc.controls.clone(),
            q: lc.q.clone(),
            r: lc.r.clone(),
            k0: lc.k0.clone(),
            ts: lc.ts,
            samples: lc.samples,
            iterations: lc.iterations,
            probe: lc.probe.clone(),
            reference,
        })
    }

    pub fn loop_specs(&self) -> Result<Vec<LoopSpec>> {
        (0..self.loops.len()).map(|j| self.loop_spec(j)).collect()
    }

    /// The centralized problem: block-diagonal `Q`, `R`, `K_0` over all loops.
    pub fn central_spec(&self, w: Windows) -> Result<LoopSpec> {
        let loops = self.loop_specs()?;
        let states: Vec<usize> = loops.iter().flat_map(|l| l.states.clone()).collect();
        let nu = self.plant_input_dim();
        let mut controls: Vec<usize> = loops.iter().flat_map(|l| l.controls.clone()).collect();
        controls.sort_unstable();
        if controls.len() != nu {
            return Err(Error::Config("loops must cover every control".into()));
        }
        let n = states.len();
        let mut q = DMatrix::zeros(n, n);
        let mut r = DMatrix::zeros(nu, nu);
        let mut k0 = DMatrix::zeros(nu, n);
        let mut probe = vec![SignalSpec::zero(); nu];
        let mut col = 0;
        for l in &loops {
            q.view_mut((col, col), (l.n(), l.n())).copy_from(&l.q);
            for (a, &c) in l.controls.iter().enumerate() {
                probe[c] = l.probe[a].clone();
                for (b, &c2) in l.controls.iter().enumerate() {
                    r[(c, c2)] = l.r[(a, b)];
                }
                for s in 0..l.n() {
                    k0[(c, col + s)] = l.k0[(a, s)];
                }
            }
            col += l.n();
        }
        let ch = self.channels();
        let mut reference = vec![SignalSpec::zero(); ch.len()];
        for (j, l) in loops.iter().enumerate() {
            for (c, s) in self.loop_channels(j).into_iter().zip(&l.reference) {
                reference[c] = s.clone();
            }
        }
        Ok(LoopSpec {
            id: 0,
            states,
            controls,
            q,
            r,
            k0,
            ts: w.ts,
            samples: w.samples,
            iterations: w.iterations,
            probe,
            reference,
        })
    }

    fn plant_input_dim(&self) -> usize {
        match &self.plant {
            PlantSpec::Hsv => 2,
            PlantSpec::Lti { sys, .. } => sys.m(),
        }
    }

    /// Every setting, in a fixed order and format.
    pub fn canonical(&self) -> String {
        let mut s = String::new();
        let list = |v: &[f64]| v.iter().map(|x| fmt(*x)).collect::<Vec<_>>().join(",");
        let idx = |v: &[usize]| v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",");
        let mat = |m: &DMatrix<f64>| {
            m.row_iter().map(|r| list(&r.iter().copied().collect::<Vec<_>>())).collect::<Vec<_>>().join(";")
        };
        match &self.plant {
            PlantSpec::Hsv => s.push_str("plant=hsv\n"),
            PlantSpec::Lti { name, sys, outputs } => {
                let _ = writeln!(s, "plant=lti:{name}\na={}\nb={}\noutputs={}", mat(&sys.a), mat(&sys.b), idx(outputs));
            }
        }
        let _ = writeln!(s, "nu={}\nnu_list={}\nmode={:?}", fmt(self.nu), list(&self.nu_list), self.mode);
        let o = &self.ode;
        let _ = writeln!(s, "ode={},{},{},{}", fmt(o.rtol), fmt(o.atol), fmt(o.max_step), fmt(o.blowup_bound));
        for (j, l) in self.loops.iter().enumerate() {
            let _ = writeln!(
                s,
                "loop{}: states={} controls={} ts={} l={} i={} q={} r={} k0={} probe={} reference={}",
                j + 1,
                idx(&l.states),
                idx(&l.controls),
                fmt(l.ts),
                l.samples,
                l.iterations,
                mat(&l.q),
                mat(&l.r),
                mat(&l.k0),
                format_signals(&l.probe),
                format_signals(&l.reference)
            );
        }
        for (name, w) in [("eirl", self.eirl), ("old_irl", self.old_irl)] {
            let _ = writeln!(s, "{name}: ts={} l={} i={}", fmt(w.ts), w.samples, w.iterations);
        }
        let st = &self.step;
        let _ = writeln!(
            s,
            "old_irl_x0={}\nstep={},{},{},{},{}\nfreq={},{},{}\nsimulate={},{}",
            list(&self.old_irl_x0),
            fmt(st.v_step),
            fmt(st.v_horizon),
            fmt(st.gamma_step),
            fmt(st.gamma_horizon),
            fmt(st.sample),
            fmt(self.freq.omega_min),
            fmt(self.freq.omega_max),
            self.freq.points,
            fmt(self.sim_horizon),
            fmt(self.sim_sample)
        );
        s
    }

    /// First 16 hex digits of the SHA-256 of [`StudyConfig::canonical`].
    pub fn hash(&self) -> String {
        hex::encode(&Sha256::digest(self.canonical().as_bytes())[..8])
    }
}

fn num(v: &str) -> Result<f64> {
    v.trim().parse().map_err(|_| Error::Config(format!("not a number: {v:?}")))
}

fn count(v: &str) -> Result<usize> {
    v.trim().parse().map_err(|_| Error::Config(format!("not a count: {v:?}")))
}

fn parse_mode(v: &str) -> Result<Injection> {
    match v.trim() {
        "si" => Ok(Injection::Si),
        "mi" => Ok(Injection::Mi),
        o => Err(Error::Config(format!("mode must be si or mi, got {o:?}"))),
    }
}

fn split(v: &str) -> impl Iterator<Item = &str> {
    v.split(|c: char| c == ',' || c.is_whitespace()).filter(|s| !s.is_empty())
}

fn parse_list(v: &str) -> Result<Vec<f64>> {
    split(v).map(num).collect()
}

fn parse_indices(v: &str) -> Result<Vec<usize>> {
    split(v).map(count).collect()
}

/// Rows separated by `;`, entries by commas or spaces.
pub fn parse_matrix(v: &str) -> Result<DMatrix<f64>> {
    let rows: Vec<Vec<f64>> = v.split(';').map(parse_list).collect::<Result<_>>()?;
    let c = rows.first().map_or(0, |r| r.len());
    if c == 0 || rows.iter().any(|r| r.len() != c) {
        return Err(Error::Config(format!("ragged or empty matrix {v:?}")));
    }
    Ok(DMatrix::from_row_iterator(rows.len(), c, rows.into_iter().flatten()))
}

/// `amp period sin|cos; …; bias b`, one signal per control separated by `|`.
/// `0` is the zero signal.
pub fn parse_signals(v: &str) -> Result<Vec<SignalSpec>> {
    v.split('|').map(parse_signal).collect()
}

fn parse_signal(v: &str) -> Result<SignalSpec> {
    let mut out = SignalSpec::zero();
    for term in v.split(';').map(str::trim).filter(|t| !t.is_empty() && *t != "0") {
        let w: Vec<&str> = term.split_whitespace().collect();
        match w.as_slice() {
            ["bias", b] => out.bias += num(b)?,
            [a, p, k] => {
                let kind = match *k {
                    "sin" => Trig::Sin,
                    "cos" => Trig::Cos,
                    _ => return Err(Error::Config(format!("signal kind must be sin or cos: {term:?}"))),
                };
                let period = num(p)?;
                if !(period > 0.0) {
                    return Err(Error::Config(format!("period must be positive: {term:?}")));
                }
                out.terms.push(SignalTerm::with_period(num(a)?, period, kind));
            }
            _ => return Err(Error::Config(format!("bad signal term {term:?}"))),
        }
    }
    Ok(out)
}

fn format_signals(s: &[SignalSpec]) -> String {
    s.iter()
        .map(|s| {
            let mut t: Vec<String> = s
                .terms
                .iter()
                .map(|t| {
                    let k = if t.kind == Trig::Sin { "sin" } else { "cos" };
                    format!("{} {} {k}", fmt(t.amplitude), fmt(2.0 * std::f64::consts::PI / t.omega))
                })
                .collect();
            t.push(format!("bias {}", fmt(s.bias)));
            t.join("; ")
        })
        .collect::<Vec<_>>()
        .join(" | ")
}

/// `a = …` and `b = …` in the matrix syntax.
pub fn load_lti(text: &str) -> Result<LtiSystem> {
    let ini = Ini::load_from_str(text).map_err(|e| Error::Config(e.to_string()))?;
    let sec = ini.general_section();
    let get = |k: &str| sec.get(k).ok_or_else(|| Error::Config(format!("LTI file needs key {k}")));
    LtiSystem::new(parse_matrix(get("a")?)?, parse_matrix(get("b")?)?)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Check {
    /// Acceptance criterion this check belongs to; untagged checks are
    /// informational.
    pub criterion: Option<u8>,
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

fn check(criterion: Option<u8>, name: impl Into<String>, passed: bool, detail: impl Into<String>) -> Check {
    Check { criterion, name: name.into(), passed, detail: detail.into() }
}

#[derive(Debug, Clone)]
pub struct StudyReport {
    pub study: &'static str,
    pub config_hash: String,
    pub checks: Vec<Check>,
    /// File name → CSV bytes.
    pub files: BTreeMap<String, Vec<u8>>,
    /// Sub-runs that failed; the study continued past them.
    pub failures: Vec<String>,
}

impl StudyReport {
    fn new(study: &'static str, cfg: &StudyConfig) -> Self {
        Self { study, config_hash: cfg.hash(), checks: vec![], files: BTreeMap::new(), failures: vec![] }
    }

    pub fn acceptance_failed(&self) -> bool {
        self.checks.iter().any(|c| c.criterion.is_some() && !c.passed)
    }

    pub fn write_to(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        for (name, bytes) in &self.files {
            std::fs::write(dir.join(name), bytes)?;
        }
        Ok(())
    }

    pub fn summary(&self) -> String {
        let mut s = format!("{} [{}]\n", self.study, self.config_hash);
        for c in &self.checks {
            let tag = c.criterion.map_or("info".to_string(), |k| format!("#{k}"));
            let _ = writeln!(s, "  {} {tag:>4} {}: {}", if c.passed { "PASS" } else { "FAIL" }, c.name, c.detail);
        }
        for f in &self.failures {
            let _ = writeln!(s, "  run failed: {f}");
        }
        s
    }
}

/// CSV under construction; every row ends with the config hash.
struct Table {
    wr: csv::Writer<Vec<u8>>,
    hash: String,
}

impl Table {
    fn new(head: &[&str], hash: &str) -> Result<Self> {
        let mut wr = csv::Writer::from_writer(vec![]);
        wr.write_record(head.iter().copied().chain(["config_hash"]))?;
        Ok(Self { wr, hash: hash.to_string() })
    }

    fn row(&mut self, fields: Vec<String>) -> Result<()> {
        self.wr.write_record(fields.into_iter().chain([self.hash.clone()]))?;
        Ok(())
    }

    fn finish(self) -> Result<Vec<u8>> {
        self.wr.into_inner().map_err(|e| Error::Io(e.into_error()))
    }
}

fn csv_bytes(f: impl FnOnce(&mut Vec<u8>) -> Result<()>) -> Result<Vec<u8>> {
    let mut buf = vec![];
    f(&mut buf)?;
    Ok(buf)
}

/// One learning method's outcome within a study.
#[derive(Debug, Clone)]
pub struct MethodRun {
    pub method: String,
    pub loops: Vec<LoopResult>,
    pub error: Option<String>,
}

impl MethodRun {
    pub fn loop_result(&self, id: usize) -> Option<&LoopResult> {
        self.loops.iter().find(|l| l.loop_id == id)
    }
}

fn record(method: &str, res: Result<Vec<LoopResult>>) -> MethodRun {
    match res {
        Ok(loops) => {
            let error = loops.iter().find_map(|l| l.failure.clone());
            MethodRun { method: method.into(), loops, error }
        }
        Err(e) => MethodRun { method: method.into(), loops: vec![], error: Some(e.to_string()) },
    }
}

fn learning_tables(report: &mut StudyReport, runs: &[MethodRun]) -> Result<()> {
    let h = report.config_hash.clone();
    let mut cond = Table::new(&["method", "loop", "iteration", "kappa"], &h)?;
    let mut gains = Table::new(&["method", "loop", "iteration", "entry", "value", "error"], &h)?;
    let mut term = Table::new(&["method", "loop", "initial_error", "final_error", "max_kappa", "status"], &h)?;
    for run in runs {
        if let Some(e) = &run.error {
            report.failures.push(format!("{}: {e}", run.method));
        }
        for l in &run.loops {
            for (i, k) in l.kappas.iter().enumerate() {
                cond.row(vec![run.method.clone(), l.loop_id.to_string(), i.to_string(), fmt(*k)])?;
            }
            for (i, k) in l.gains.iter().enumerate() {
                let err = l.errors.get(i).map_or(String::new(), |e| fmt(*e));
                for (e, v) in k.transpose().iter().enumerate() {
                    gains.row(vec![
                        run.method.clone(),
                        l.loop_id.to_string(),
                        i.to_string(),
                        e.to_string(),
                        fmt(*v),
                        err.clone(),
                    ])?;
                }
            }
            let opt = |v: Option<f64>| v.map_or(String::new(), fmt);
            term.row(vec![
                run.method.clone(),
                l.loop_id.to_string(),
                opt(l.errors.first().copied()),
                opt(l.final_error()),
                fmt(l.max_kappa()),
                l.failure.clone().map_or("ok".into(), |f| f.replace(',', ";")),
            ])?;
            let name = format!("learning_{}_loop{}.csv", run.method, l.loop_id);
            let bytes = csv_bytes(|b| l.write_csv(b, &h))?;
            report.files.insert(name, bytes);
        }
    }
    report.files.insert("conditioning.csv".into(), cond.finish()?);
    report.files.insert("gains.csv".into(), gains.finish()?);
    report.files.insert("terminal.csv".into(), term.finish()?);
    Ok(())
}

fn within_factor(x: f64, target: f64, factor: f64) -> bool {
    x >= target / factor && x <= target * factor
}

/// Evaluation 1 on the configured plant at `cfg.nu`: the unexcited frozen
/// baseline, centralized EIRL (SI, MI) and dEIRL (SI, MI).
pub fn run_eval1(cfg: &StudyConfig) -> Result<Vec<MethodRun>> {
    let plant = cfg.plant(cfg.nu)?;
    let drift = eirl::DriftResidualModel::new(plant.clone())?;
    let lin = hsv::linearize_at_origin(&plant)?;
    let ch = plant.channels();
    let x0 = DVector::zeros(plant.state_dim());
    let loops = cfg.loop_specs()?;
    let central = cfg.central_spec(cfg.eirl)?;
    let old = cfg.central_spec(cfg.old_irl)?;
    let off = plant.lift_state(&DVector::from_column_slice(&cfg.old_irl_x0), &[]);

    let baseline = eirl::run_frozen_baseline(&plant, &drift, &old, &ch, &off, &cfg.ode);
    let mut runs = vec![record("old-irl", baseline.map(|l| vec![l]))];
    for (label, inj) in [("si-eirl", Injection::Si), ("eirl", Injection::Mi)] {
        let r = eirl::run_eirl(&plant, &drift, &central, &ch, inj, &x0, &cfg.ode, Some(&lin));
        runs.push(record(label, r.map(|l| vec![l])));
    }
    for (label, inj) in [("si-deirl", Injection::Si), ("deirl", Injection::Mi)] {
        let r = eirl::run_deirl(&plant, &drift, &loops, &ch, inj, &x0, &cfg.ode, Some(&lin));
        runs.push(record(label, r.map(|l| l.loops)));
    }
    Ok(runs)
}

pub fn cmd_eval1(cfg: &StudyConfig) -> Result<StudyReport> {
    let runs = run_eval1(cfg)?;
    let mut rep = StudyReport::new("eval1", cfg);
    learning_tables(&mut rep, &runs)?;
    let get = |m: &str, j: usize| runs.iter().find(|r| r.method == m).and_then(|r| r.loop_result(j));
    let err = |m: &str, j: usize| get(m, j).and_then(|l| l.final_error()).unwrap_or(f64::INFINITY);
    let kap = |m: &str, j: usize| get(m, j).map_or(f64::NAN, |l| l.max_kappa());
    let published = cfg.is_hsv() && cfg.nu == 1.0;
    let tag = |k: u8| published.then_some(k);

    for (m, j, tol) in [("deirl", 1, 1e-4), ("deirl", 2, 1e-3), ("si-eirl", 0, 1e-2)] {
        let e = err(m, j);
        rep.checks.push(check(
            tag(8),
            format!("{m} loop {j} terminal gain error"),
            e <= tol,
            format!("{e:.3e} <= {tol:.0e}"),
        ));
    }
    if !published {
        for j in 1..=cfg.loops.len() {
            let e = err("deirl", j);
            rep.checks.push(check(None, format!("deirl loop {j} terminal gain error"), e <= 1e-3, format!("{e:.3e}")));
        }
        return Ok(rep);
    }
    let k = [kap("deirl", 1), kap("deirl", 2), kap("eirl", 0), kap("si-eirl", 0), kap("old-irl", 0)];
    let ordered = k.windows(2).all(|w| w[0] < w[1]);
    rep.checks.push(check(
        Some(9),
        "kappa ordering dEIRL1 < dEIRL2 < EIRL < SI-EIRL < old IRL",
        ordered,
        k.iter().map(|v| format!("{v:.3e}")).collect::<Vec<_>>().join(" < "),
    ));
    use published::*;
    for (name, v, target, factor) in [
        ("dEIRL loop 1", k[0], KAPPA_DEIRL_1, 3.0),
        ("dEIRL loop 2", k[1], KAPPA_DEIRL_2, 3.0),
        ("SI-EIRL", k[3], KAPPA_SI_EIRL, 10.0),
    ] {
        rep.checks.push(check(
            Some(9),
            format!("kappa {name}"),
            within_factor(v, target, factor),
            format!("{v:.3e} within x{factor} of {target:.3e}"),
        ));
    }
    rep.checks.push(check(Some(9), "kappa old IRL", k[4] >= 1e10, format!("{:.3e} >= 1e10", k[4])));
    Ok(rep)
}

/// Block-diagonal gain over the concatenated loop states.
pub fn assemble_gain(loops: &[LoopSpec], gains: &[DMatrix<f64>], m: usize) -> DMatrix<f64> {
    let n: usize = loops.iter().map(|l| l.n()).sum();
    let mut k = DMatrix::zeros(m, n);
    let mut col = 0;
    for (l, g) in loops.iter().zip(gains) {
        for (a, &c) in l.controls.iter().enumerate() {
            for b in 0..l.n() {
                k[(c, col + b)] = g[(a, b)];
            }
        }
        col += l.n();
    }
    k
}

/// Response to a constant command `step` on output channel `channel`, fed
/// through the integrators only.
#[allow(clippy::too_many_arguments)]
pub fn step_response<P: PlantModel>(
    plant: &P,
    k: &DMatrix<f64>,
    feedback: &[usize],
    channels: &[OutputChannel],
    channel: usize,
    step: f64,
    horizon: f64,
    sample: f64,
    opts: &OdeOptions,
) -> Result<(Trajectory, StepMetrics)> {
    let mut r = vec![SignalSpec::zero(); channels.len()];
    r[channel] = SignalSpec::constant(step);
    let mode = ExcitationMode::Mi { d: vec![SignalSpec::zero(); k.nrows()], r };
    let ctrl = Controller::new(k.clone(), feedback.to_vec(), channels.to_vec(), mode)?
        .with_feed(ReferenceFeed::IntegratorOnly);
    let x0 = DVector::zeros(plant.state_dim());
    let sol = integrate_closed_loop(plant, &ctrl, &x0, horizon, opts)?;
    let l = (horizon / sample).round() as usize;
    let traj = Trajectory::from_dense(&sol, &ctrl, 0.0, horizon / l as f64, l, 8)?;
    let m = crate::simcore::step_metrics(&traj, channels[channel].y, step)?;
    Ok((traj, m))
}

#[derive(Debug, Clone)]
pub struct StepRow {
    pub nu: f64,
    pub loop_id: usize,
    pub controller: &'static str,
    pub metrics: Option<StepMetrics>,
}

#[derive(Debug)]
pub struct RecoveryCase {
    pub nu: f64,
    pub learning: Result<LearningResult>,
    pub steps: Vec<StepRow>,
}

/// Evaluation 2 at one `ν`: learn with the nominal drift model about the
/// perturbed trim, then step the perturbed plant under nominal, learned and
/// optimal gains.
pub fn run_recovery(cfg: &StudyConfig, nu: f64) -> Result<RecoveryCase> {
    if !cfg.is_hsv() {
        return Err(Error::Config("the recovery study needs the hsv plant".into()));
    }
    let params = HsvParams::nominal().with_nu(nu);
    let t = hsv::trim(&params)?;
    let truth = HsvModel::about(params, t.x, t.u).augmented();
    let learner = eirl::DriftResidualModel::new(HsvModel::about(HsvParams::nominal(), t.x, t.u).augmented())?;
    let lin = hsv::linearize_at_origin(&truth)?;
    let ch = truth.channels();
    let loops = cfg.loop_specs()?;
    let x0 = DVector::zeros(truth.state_dim());
    let learning = eirl::run_deirl(&truth, &learner, &loops, &ch, cfg.mode, &x0, &cfg.ode, Some(&lin));

    let feedback: Vec<usize> = loops.iter().flat_map(|l| l.states.clone()).collect();
    let k0: Vec<_> = loops.iter().map(|l| l.k0.clone()).collect();
    let kopt: Vec<_> = loops.iter().map(|l| eirl::oracle_gain(&lin, l)).collect::<Result<_>>()?;
    let mut controllers = vec![("nominal-lq", assemble_gain(&loops, &k0, 2))];
    if let Ok(lr) = &learning {
        let learned: Vec<_> = lr.loops.iter().map(|l| l.final_gain().clone()).collect();
        controllers.push(("deirl", assemble_gain(&loops, &learned, 2)));
    }
    controllers.push(("optimal-lq", assemble_gain(&loops, &kopt, 2)));
    let st = cfg.step;
    let mut steps = vec![];
    for (name, k) in &controllers {
        for (loop_id, channel, size, horizon) in
            [(1, 0, st.v_step, st.v_horizon), (2, 1, st.gamma_step, st.gamma_horizon)]
        {
            let m =
                step_response(&truth, k, &feedback, &ch, channel, size, horizon, st.sample, &cfg.ode).map(|p| p.1).ok();
            steps.push(StepRow { nu, loop_id, controller: name, metrics: m });
        }
    }
    Ok(RecoveryCase { nu, learning, steps })
}

pub fn cmd_eval2(cfg: &StudyConfig) -> Result<StudyReport> {
    let mut rep = StudyReport::new("eval2", cfg);
    let h = rep.config_hash.clone();
    let mut red = Table::new(&["nu", "loop", "initial_error", "final_error", "reduction_pct", "max_kappa"], &h)?;
    let mut steps = Table::new(&["nu", "loop", "controller", "rise", "settle", "overshoot"], &h)?;
    let mut runs = vec![];
    let mut cases = vec![];
    for &nu in &cfg.nu_list {
        let case = run_recovery(cfg, nu)?;
        let label = format!("deirl-nu{nu}");
        match &case.learning {
            Ok(lr) => {
                for l in &lr.loops {
                    let (e0, e1) = (l.errors.first().copied().unwrap_or(f64::NAN), l.final_error().unwrap_or(f64::NAN));
                    red.row(vec![
                        fmt(nu),
                        l.loop_id.to_string(),
                        fmt(e0),
                        fmt(e1),
                        fmt(reduction(e0, e1)),
                        fmt(l.max_kappa()),
                    ])?;
                }
                runs.push(MethodRun { method: label, loops: lr.loops.clone(), error: None });
            }
            Err(e) => runs.push(MethodRun { method: label, loops: vec![], error: Some(e.to_string()) }),
        }
        for s in &case.steps {
            let (a, b, c) = s
                .metrics
                .map_or((f64::NAN, f64::NAN, f64::NAN), |m| (m.rise_time_90, m.settle_time_1pct, m.overshoot_pct));
            steps.row(vec![fmt(nu), s.loop_id.to_string(), s.controller.into(), fmt(a), fmt(b), fmt(c)])?;
            if s.metrics.is_none() {
                rep.failures.push(format!("step nu={nu} loop {} {}", s.loop_id, s.controller));
            }
        }
        cases.push(case);
    }
    learning_tables(&mut rep, &runs)?;
    rep.files.insert("reduction.csv".into(), red.finish()?);
    rep.files.insert("stepmetrics.csv".into(), steps.finish()?);

    for case in &cases {
        let floors = if case.nu == 0.9 {
            Some([95.0, 85.0])
        } else if case.nu == 0.75 {
            Some([90.0, 75.0])
        } else {
            None
        };
        if let (Some(floors), Ok(lr)) = (floors, &case.learning) {
            for (l, floor) in lr.loops.iter().zip(floors) {
                let p = reduction(l.errors[0], l.final_error().unwrap_or(f64::NAN));
                rep.checks.push(check(
                    Some(10),
                    format!("nu {} loop {} error reduction", case.nu, l.loop_id),
                    p >= floor,
                    format!("{p:.2}% >= {floor}%"),
                ));
            }
        } else if let Err(e) = &case.learning {
            if floors.is_some() {
                rep.checks.push(check(Some(10), format!("nu {} learning", case.nu), false, e.to_string()));
            }
        }
        if case.nu == 0.75 {
            rep.checks.extend(fpa_checks(case));
        }
    }
    Ok(rep)
}

fn reduction(e0: f64, e1: f64) -> f64 {
    100.0 * (1.0 - e1 / e0)
}

fn fpa_checks(case: &RecoveryCase) -> Vec<Check> {
    let get = |c: &str| case.steps.iter().find(|s| s.loop_id == 2 && s.controller == c).and_then(|s| s.metrics);
    let (Some(nom), Some(dei), Some(opt)) = (get("nominal-lq"), get("deirl"), get("optimal-lq")) else {
        return vec![check(Some(11), "FPA step responses", false, "a step simulation failed")];
    };
    let near = |x: f64, t: f64, rel: f64| (x - t).abs() <= rel * t;
    let (ns, nm) = published::FPA_NOMINAL_0P75;
    let (ds, dm) = published::FPA_DEIRL_0P75;
    let m = |s: &StepMetrics| [s.rise_time_90, s.settle_time_1pct, s.overshoot_pct];
    let closer = m(&dei).iter().zip(m(&nom)).zip(m(&opt)).all(|((d, n), o)| (d - o).abs() < (n - o).abs());
    vec![
        check(
            Some(11),
            "nominal LQ FPA settling",
            near(nom.settle_time_1pct, ns, 0.15),
            format!("{:.2} s vs {ns} s ±15%", nom.settle_time_1pct),
        ),
        check(
            Some(11),
            "nominal LQ FPA overshoot",
            (nom.overshoot_pct - nm).abs() <= 2.0,
            format!("{:.2}% vs {nm}% ±2", nom.overshoot_pct),
        ),
        check(
            Some(11),
            "dEIRL FPA settling",
            near(dei.settle_time_1pct, ds, 0.15),
            format!("{:.2} s vs {ds} s ±15%", dei.settle_time_1pct),
        ),
        check(
            Some(11),
            "dEIRL FPA overshoot",
            (dei.overshoot_pct - dm).abs() <= 1.5,
            format!("{:.2}% vs {dm}% ±1.5", dei.overshoot_pct),
        ),
        check(
            Some(11),
            "dEIRL closer to optimal than nominal (rise, settle, overshoot)",
            closer,
            format!("dEIRL {:.2?} nominal {:.2?} optimal {:.2?}", m(&dei), m(&nom), m(&opt)),
        ),
    ]
}

/// Closed-loop maps of the configured plant under the initial gains, on the
/// fed-back states only.
pub fn frequency_response(cfg: &StudyConfig) -> Result<lincontrol::FreqResponse> {
    let plant = cfg.plant(cfg.nu)?;
    let lin = hsv::linearize_at_origin(&plant)?;
    let loops = cfg.loop_specs()?;
    let feedback: Vec<usize> = loops.iter().flat_map(|l| l.states.clone()).collect();
    let controls: Vec<usize> = (0..plant.input_dim()).collect();
    let sys = lin.block(&feedback, &controls);
    let at = |s: usize| {
        feedback.iter().position(|&f| f == s).ok_or_else(|| Error::Config(format!("output slot {s} is not fed back")))
    };
    let channels: Vec<OutputChannel> = plant
        .channels()
        .iter()
        .map(|c| Ok(OutputChannel { y: at(c.y)?, z: c.z.map(at).transpose()? }))
        .collect::<Result<_>>()?;
    if channels.is_empty() {
        return Err(Error::Config("frequency maps need output channels".into()));
    }
    let k0: Vec<_> = loops.iter().map(|l| l.k0.clone()).collect();
    let k = assemble_gain(&loops, &k0, plant.input_dim());
    let grid = lincontrol::log_grid(cfg.freq.omega_min, cfg.freq.omega_max, cfg.freq.points);
    lincontrol::closed_loop_maps(&sys, &k, &channels, &grid)
}

pub fn cmd_freqresp(cfg: &StudyConfig) -> Result<StudyReport> {
    let fr = frequency_response(cfg)?;
    let mut rep = StudyReport::new("freqresp", cfg);
    let mut t = Table::new(&["map", "loop", "omega", "mag_db"], &rep.config_hash)?;
    let db = lincontrol::FreqResponse::db;
    let p = fr.t_dy[0].nrows();
    for j in 0..p {
        let (dy, ry) = fr.siso(j);
        for (name, v) in [("dy_siso", &dy), ("ry_siso", &ry)] {
            for (w, z) in fr.omega.iter().zip(v) {
                t.row(vec![name.into(), (j + 1).to_string(), fmt(*w), fmt(db(*z))])?;
            }
        }
        for (name, maps) in [("dy_mimo", &fr.t_dy), ("ry_mimo", &fr.t_ry)] {
            for i in 0..maps[0].ncols() {
                for (w, mm) in fr.omega.iter().zip(maps.iter()) {
                    t.row(vec![format!("{name}_in{}", i + 1), (j + 1).to_string(), fmt(*w), fmt(db(mm[(j, i)]))])?;
                }
            }
        }
    }
    for (name, maps) in [("dy_sigma", &fr.t_dy), ("ry_sigma", &fr.t_ry)] {
        for (w, s) in fr.omega.iter().zip(lincontrol::FreqResponse::sigma_max(maps)) {
            t.row(vec![name.into(), "0".into(), fmt(*w), fmt(20.0 * s.log10())])?;
        }
    }
    rep.files.insert("freqresp.csv".into(), t.finish()?);

    for j in 0..p {
        let g = db(fr.siso(j).1[0]);
        rep.checks.push(check(
            None,
            format!("loop {} reference map DC gain", j + 1),
            g.abs() < 0.05,
            format!("{g:.4} dB at {:.0e} rad/s", fr.omega[0]),
        ));
    }
    if cfg.is_hsv() && cfg.nu == 1.0 {
        let (peak, at, outside) = sensitivity_peak(&fr, 1);
        rep.checks.push(check(
            Some(12),
            "FPA P-sensitivity peak <= -25 dB",
            peak <= -25.0,
            format!("{peak:.2} dB at {at:.3} rad/s"),
        ));
        rep.checks.push(check(
            Some(12),
            "FPA P-sensitivity peak in [0.5, 2] rad/s",
            (0.5..=2.0).contains(&at),
            format!("{at:.3} rad/s"),
        ));
        rep.checks.push(check(
            Some(12),
            "FPA P-sensitivity <= -40 dB outside [0.1, 2.5]",
            outside <= -40.0,
            format!("{outside:.2} dB"),
        ));
    }
    Ok(rep)
}

/// Peak of the SISO input-disturbance map of loop `j` (dB, rad/s) and the
/// largest value outside `[0.1, 2.5]` rad/s.
pub fn sensitivity_peak(fr: &lincontrol::FreqResponse, j: usize) -> (f64, f64, f64) {
    let mags: Vec<f64> = fr.siso(j).0.iter().map(|z| lincontrol::FreqResponse::db(*z)).collect();
    let (i, peak) = mags.iter().enumerate().fold((0, f64::NEG_INFINITY), |a, (i, &m)| if m > a.1 { (i, m) } else { a });
    let outside = fr
        .omega
        .iter()
        .zip(&mags)
        .filter(|(w, _)| **w < 0.1 || **w > 2.5)
        .map(|p| *p.1)
        .fold(f64::NEG_INFINITY, f64::max);
    (peak, fr.omega[i], outside)
}

/// CARE solutions for each loop and for the centralized cost.
#[derive(Debug, Clone)]
pub struct OracleResult {
    pub problem: String,
    pub trace: lincontrol::KleinmanTrace,
    pub solution: lincontrol::CareSolution,
}

pub fn run_oracle(cfg: &StudyConfig) -> Result<Vec<OracleResult>> {
    let plant = cfg.plant(cfg.nu)?;
    let lin = hsv::linearize_at_origin(&plant)?;
    let mut specs: Vec<(String, LoopSpec)> =
        cfg.loop_specs()?.into_iter().map(|l| (format!("loop{}", l.id), l)).collect();
    specs.push(("central".into(), cfg.central_spec(cfg.eirl)?));
    specs
        .into_iter()
        .map(|(problem, l)| {
            let prob = LqrProblem::new(lin.block(&l.states, &l.controls), l.q.clone(), l.r.clone())?;
            let solution = lincontrol::solve_care(&prob, &l.k0)?;
            let trace = lincontrol::kleinman(&prob, &l.k0, solution.iterations)?;
            Ok(OracleResult { problem, trace, solution })
        })
        .collect()
}

pub fn cmd_oracle(cfg: &StudyConfig) -> Result<StudyReport> {
    let res = run_oracle(cfg)?;
    let mut rep = StudyReport::new("oracle", cfg);
    let h = rep.config_hash.clone();
    let mut g = Table::new(&["problem", "iteration", "entry", "value"], &h)?;
    let mut p = Table::new(&["problem", "row", "col", "value"], &h)?;
    let mut s = Table::new(&["problem", "iterations", "care_residual"], &h)?;
    for r in &res {
        for (i, k) in r.trace.k_seq.iter().enumerate() {
            for (e, v) in k.transpose().iter().enumerate() {
                g.row(vec![r.problem.clone(), i.to_string(), e.to_string(), fmt(*v)])?;
            }
        }
        let pm = &r.solution.p;
        for i in 0..pm.nrows() {
            for j in 0..pm.ncols() {
                p.row(vec![r.problem.clone(), i.to_string(), j.to_string(), fmt(pm[(i, j)])])?;
            }
        }
        s.row(vec![r.problem.clone(), r.solution.iterations.to_string(), fmt(r.solution.residual)])?;
        rep.checks.push(check(
            None,
            format!("{} CARE residual", r.problem),
            r.solution.residual <= 1e-8,
            format!("{:.2e}", r.solution.residual),
        ));
    }
    rep.files.insert("oracle_gains.csv".into(), g.finish()?);
    rep.files.insert("oracle_p.csv".into(), p.finish()?);
    rep.files.insert("oracle_summary.csv".into(), s.finish()?);

    if cfg.is_hsv() {
        use published::*;
        let central: Vec<f64> = K_STAR.iter().flatten().copied().collect();
        let want: Vec<(&str, &[f64])> = if cfg.nu == 1.0 {
            vec![("loop1", &K1_STAR), ("loop2", &K2_STAR), ("central", &central)]
        } else if cfg.nu == 0.9 {
            vec![("loop1", &NU_0P9_K1_STAR), ("loop2", &NU_0P9_K2_STAR)]
        } else if cfg.nu == 0.75 {
            vec![("loop1", &NU_0P75_K1_STAR), ("loop2", &NU_0P75_K2_STAR)]
        } else {
            vec![]
        };
        for (name, w) in want {
            let Some(r) = res.iter().find(|r| r.problem == name) else { continue };
            let got: Vec<f64> = r.solution.k.transpose().iter().copied().collect();
            let dev = got.iter().zip(w).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
            rep.checks.push(check(
                Some(7),
                format!("nu {} {name} optimal gain", cfg.nu),
                got.len() == w.len() && dev <= 1e-2,
                format!("max entry deviation {dev:.2e}"),
            ));
        }
    }
    Ok(rep)
}

/// One closed-loop run under the initial gains with the configured
/// excitation; exports the trajectory.
pub fn cmd_simulate(cfg: &StudyConfig) -> Result<StudyReport> {
    let plant = cfg.plant(cfg.nu)?;
    let loops = cfg.loop_specs()?;
    let ctrl = eirl::initial_controller(&loops, &plant.channels(), plant.input_dim(), cfg.mode)?;
    let x0 = DVector::zeros(plant.state_dim());
    let sol = integrate_closed_loop(&plant, &ctrl, &x0, cfg.sim_horizon, &cfg.ode)?;
    let l = (cfg.sim_horizon / cfg.sim_sample).round().max(1.0) as usize;
    let traj = Trajectory::from_dense(&sol, &ctrl, 0.0, cfg.sim_horizon / l as f64, l, 4)?;
    let mut rep = StudyReport::new("simulate", cfg);
    let h = rep.config_hash.clone();
    rep.files.insert("trajectory.csv".into(), csv_bytes(|b| traj.write_csv_tagged(b, Some(&h)))?);
    let peak = traj.states.iter().map(|x| x.amax()).fold(0.0, f64::max);
    rep.checks.push(check(
        None,
        "trajectory stays bounded",
        peak.is_finite(),
        format!("max |x| {peak:.3e} over {} accepted steps", sol.accepted()),
    ));
    Ok(rep)
}
