mod common;

use std::process::ExitCode;

use deirl::eirl::{self, DriftResidualModel, Injection, LoopData, LoopSpec};
use deirl::evalharness::{self, Check, StudyConfig, StudyReport};
use deirl::hsv::{self, published_trim, HsvModel, HsvParams, DEG};
use deirl::lincontrol::{eigenvalues, kleinman, min_eig, solve_care, transmission_zeros, LqrProblem, LtiSystem};
use deirl::simcore::{integrate_closed_loop, LtiPlant, SignalSpec, Trajectory, INNER_INTERVALS};
use deirl::symops::{bilinear, build_compression, tri, vec_of_mat};
use nalgebra::{Complex, DMatrix, DVector};

struct Outcome {
    id: u8,
    title: &'static str,
    passed: bool,
    detail: String,
    notes: Vec<String>,
}

fn outcome(id: u8, title: &'static str, passed: bool, detail: String) -> Outcome {
    Outcome { id, title, passed, detail, notes: vec![] }
}

fn from_checks(id: u8, title: &'static str, checks: &[&Check]) -> Outcome {
    let passed = !checks.is_empty() && checks.iter().all(|c| c.passed);
    let failed = checks.iter().filter(|c| !c.passed).count();
    Outcome {
        id,
        title,
        passed,
        detail: format!("{} checks, {failed} failed", checks.len()),
        notes: checks
            .iter()
            .map(|c| format!("{} {}: {}", if c.passed { "ok  " } else { "FAIL" }, c.name, c.detail))
            .collect(),
    }
}

fn kron(x: &DVector<f64>, y: &DVector<f64>) -> DVector<f64> {
    DVector::from_iterator(x.len() * y.len(), x.iter().flat_map(|a| y.iter().map(move |b| a * b)))
}

fn operator_identities() -> Outcome {
    let mut rng = common::rng(1);
    let mut worst: f64 = 0.0;
    let mut w_dev: f64 = 0.0;
    for n in 1..=6 {
        let comp = build_compression(n);
        w_dev = w_dev.max((comp.w.clone().svd(false, false).singular_values.max() - 1.0).abs());
        for _ in 0..1000 {
            let x = common::random_vector(&mut rng, n);
            let y = common::random_vector(&mut rng, n);
            let p = common::random_symmetric(&mut rng, n);
            let bxy = bilinear(&x, &y).unwrap().into_inner();
            let rel = |a: &DVector<f64>, b: &DVector<f64>| (a - b).norm() / b.norm().max(f64::MIN_POSITIVE);
            worst = worst.max(rel(&(&comp.w * kron(&x, &y)), &bxy));
            let q = (x.transpose() * &p * &y)[(0, 0)];
            let form = bxy.dot(vec_of_mat(&p).unwrap().data());
            worst = worst.max((form - q).abs() / q.abs().max(1e-300));
            let bxx = bilinear(&x, &x).unwrap().into_inner();
            worst = worst.max(rel(&(&comp.w_rinv * bxx), &kron(&x, &x)));
        }
    }
    outcome(
        1,
        "operator identities",
        worst <= 1e-12 && w_dev <= 1e-12,
        format!("max relative error {worst:.2e} over 6000 vectors; max |‖W‖₂ − 1| {w_dev:.1e}"),
    )
}

fn kleinman_random() -> Outcome {
    let mut rng = common::rng(2);
    let (mut all_hurwitz, mut worst_mono, mut worst_res, mut worst_oracle) = (true, f64::INFINITY, 0.0f64, 0.0f64);
    for i in 0..100 {
        let n = 1 + i % 5;
        let m = 1 + (i / 5) % n.min(3);
        let (sys, k0) = common::random_stabilizable(&mut rng, n, m);
        let q = DMatrix::from_diagonal(&DVector::from_fn(n, |_, _| {
            0.1 + common::uniform(&mut rng, 1, 1, 0.0, 2.0)[(0, 0)]
        }));
        let r = DMatrix::from_diagonal(&DVector::from_fn(m, |_, _| {
            0.1 + common::uniform(&mut rng, 1, 1, 0.0, 2.0)[(0, 0)]
        }));
        let want = common::care_by_sign_function(&sys.a, &sys.b, &q, &r);
        let prob = LqrProblem::new(sys, q, r).unwrap();
        let sol = match solve_care(&prob, &k0) {
            Ok(s) => s,
            Err(e) => return outcome(2, "Kleinman on random systems", false, format!("system {i}: {e}")),
        };
        let tr = kleinman(&prob, &k0, sol.iterations).unwrap();
        all_hurwitz &= tr.hurwitz_flags.iter().all(|&h| h);
        for w in tr.p_seq.windows(2) {
            worst_mono = worst_mono.min(min_eig(&(&w[0] - &w[1])));
        }
        worst_res = worst_res.max(prob.relative_care_residual(tr.p_seq.last().unwrap()));
        worst_oracle = worst_oracle.max((&sol.p - &want).norm() / want.norm());
    }
    outcome(
        2,
        "Kleinman on random systems",
        all_hurwitz && worst_mono >= -1e-8 && worst_res <= 1e-8,
        format!(
            "all iterates Hurwitz: {all_hurwitz}; min eig(P_i − P_i+1) {worst_mono:.2e}; terminal residual {worst_res:.2e}; vs Hamiltonian oracle {worst_oracle:.1e}"
        ),
    )
}

fn eirl_equals_kleinman() -> Outcome {
    let mut rng = common::rng(3);
    let mut worst: f64 = 0.0;
    for i in 0..20 {
        let n = 1 + i % 5;
        worst = worst.max(common::random_eirl_discrepancy(&mut rng, n, 1 + i % n.min(2)));
    }
    let random = worst;

    let cfg = StudyConfig::builtin_default();
    let plant = cfg.plant(1.0).unwrap();
    let drift = DriftResidualModel::new(plant.clone()).unwrap();
    let lin = hsv::linearize_at_origin(&plant).unwrap();
    let loops = cfg.loop_specs().unwrap();
    let res =
        eirl::run_deirl(&plant, &drift, &loops, &[], Injection::Si, &DVector::zeros(4), &common::tight_ode(), None)
            .unwrap();
    for (r, lp) in res.loops.iter().zip(&loops) {
        worst = worst.max(common::discrepancy(r, &lin.block(&lp.states, &lp.controls), lp));
    }

    let cfg = StudyConfig::hsv_default();
    let aug = cfg.plant(1.0).unwrap();
    let lin = hsv::linearize_at_origin(&aug).unwrap();
    let plant = deirl::simcore::augment_integrators(LtiPlant(lin.clone()), &[]).unwrap();
    let drift = DriftResidualModel::new(plant.clone()).unwrap();
    let ch = aug.channels();
    let x0 = DVector::zeros(7);
    let mut hsv_worst: f64 = 0.0;
    let loops = cfg.loop_specs().unwrap();
    for inj in [Injection::Si, Injection::Mi] {
        let res = eirl::run_deirl(&plant, &drift, &loops, &ch, inj, &x0, &common::tight_ode(), None).unwrap();
        for (r, lp) in res.loops.iter().zip(&loops) {
            hsv_worst = hsv_worst.max(common::discrepancy(r, &lin.block(&lp.states, &lp.controls), lp));
        }
        let central = cfg.central_spec(cfg.eirl).unwrap();
        let r = eirl::run_eirl(&plant, &drift, &central, &ch, inj, &x0, &common::tight_ode(), None).unwrap();
        hsv_worst = hsv_worst.max(common::discrepancy(&r, &lin.block(&central.states, &central.controls), &central));
    }
    worst = worst.max(hsv_worst);
    outcome(
        3,
        "EIRL/dEIRL iterates equal Kleinman on LTI plants",
        worst <= 1e-6,
        format!("max ‖ΔK_i‖/(1+‖K_i‖): random {random:.2e}, linearized vehicle {hsv_worst:.2e}, overall {worst:.2e}"),
    )
}

/// Numerical rank at the usual `max(rows, cols)·eps·σ_max` tolerance.
fn full_rank(m: &DMatrix<f64>) -> bool {
    let s = m.clone().svd(false, false).singular_values;
    s.min() > m.nrows().max(m.ncols()) as f64 * f64::EPSILON * s.max()
}

/// Counts (datasets checked, violations) of "I_B(x,x) full rank ⇒ Θ full rank".
fn rank_implication(data: &LoopData, lp: &LoopSpec, b: &DMatrix<f64>, gains: &[DMatrix<f64>]) -> (usize, usize, usize) {
    let comp = build_compression(lp.n());
    let ixx_full = full_rank(&data.i_xx);
    let mut bad = 0;
    for (i, k) in gains.iter().enumerate() {
        let reg = data.regression(lp, k, b, &comp, i).unwrap();
        if ixx_full && !full_rank(&reg.theta) {
            bad += 1;
        }
    }
    (gains.len(), bad, usize::from(!ixx_full))
}

fn regression_rank() -> Outcome {
    let mut acc = (0, 0, 0);
    let tally = |acc: &mut (usize, usize, usize), t: (usize, usize, usize)| {
        acc.0 += t.0;
        acc.1 += t.1;
        acc.2 += t.2;
    };
    let cfg = StudyConfig::hsv_default();
    let opts = cfg.ode;
    let loops = cfg.loop_specs().unwrap();
    let mut runs = vec![];
    for nu in [1.0, 0.9, 0.75] {
        let params = HsvParams::nominal().with_nu(nu);
        let t = hsv::trim(&params).unwrap();
        let truth = HsvModel::about(params, t.x, t.u).augmented();
        let learner = HsvModel::about(HsvParams::nominal(), t.x, t.u).augmented();
        runs.push((truth, learner));
    }
    for (truth, learner) in &runs {
        let drift = DriftResidualModel::new(learner.clone()).unwrap();
        let ch = truth.channels();
        let x0 = DVector::zeros(7);
        for inj in [Injection::Si, Injection::Mi] {
            let mut sets: Vec<Vec<LoopSpec>> = vec![loops.clone()];
            sets.push(vec![cfg.central_spec(cfg.eirl).unwrap()]);
            for set in sets {
                let (sol, ctrl) = eirl::collect_data(truth, &set, &ch, inj, &x0, &opts).unwrap();
                for lp in &set {
                    let traj = Trajectory::from_dense(&sol, &ctrl, 0.0, lp.ts, lp.samples, INNER_INTERVALS).unwrap();
                    let data = LoopData::collect(&traj, lp, &drift).unwrap();
                    let b = drift.b_block(lp);
                    let res = eirl::learn_loop(&data, lp, &b, None);
                    tally(&mut acc, rank_implication(&data, lp, &b, &res.gains[..res.gains.len() - 1]));
                }
            }
        }
    }
    // Unexcited frozen-policy windows.
    let (truth, _) = &runs[0];
    let drift = DriftResidualModel::new(truth.clone()).unwrap();
    let old = cfg.central_spec(cfg.old_irl).unwrap();
    let quiet = LoopSpec { probe: vec![SignalSpec::zero(); 2], reference: vec![], ..old.clone() };
    let ctrl = eirl::initial_controller(std::slice::from_ref(&quiet), &truth.channels(), 2, Injection::Si).unwrap();
    let off = truth.lift_state(&DVector::from_column_slice(&cfg.old_irl_x0), &[]);
    let span = old.horizon();
    let sol = integrate_closed_loop(truth, &ctrl, &off, span * old.iterations as f64, &opts).unwrap();
    for i in 0..old.iterations {
        let traj = Trajectory::from_dense(&sol, &ctrl, i as f64 * span, old.ts, old.samples, 20).unwrap();
        let data = LoopData::collect(&traj, &quiet, &drift).unwrap();
        tally(&mut acc, rank_implication(&data, &quiet, &drift.b_block(&quiet), std::slice::from_ref(&old.k0)));
    }
    let hsv_checked = acc.0;

    let mut rng = common::rng(4);
    for i in 0..100 {
        let n = 1 + i % 5;
        let m = 1 + (i / 5) % n.min(2);
        let (sys, k0) = common::random_stabilizable(&mut rng, n, m);
        let plant = LtiPlant(sys);
        let drift = DriftResidualModel::new(plant.clone()).unwrap();
        // Every fifth dataset is unexcited so that degenerate integrals occur.
        let probe =
            (0..m).map(|_| if i % 5 == 4 { SignalSpec::zero() } else { common::random_probe(&mut rng) }).collect();
        let lp = LoopSpec {
            id: 0,
            states: (0..n).collect(),
            controls: (0..m).collect(),
            q: DMatrix::identity(n, n),
            r: DMatrix::identity(m, m),
            k0,
            ts: 0.5,
            samples: tri(n) + 3,
            iterations: 3,
            probe,
            reference: vec![],
        };
        let x0 = common::random_vector(&mut rng, n);
        let (sol, ctrl) =
            eirl::collect_data(&plant, std::slice::from_ref(&lp), &[], Injection::Si, &x0, &opts).unwrap();
        let traj = Trajectory::from_dense(&sol, &ctrl, 0.0, lp.ts, lp.samples, INNER_INTERVALS).unwrap();
        let data = LoopData::collect(&traj, &lp, &drift).unwrap();
        let b = drift.b_block(&lp);
        let res = eirl::learn_loop(&data, &lp, &b, None);
        tally(&mut acc, rank_implication(&data, &lp, &b, &res.gains[..res.gains.len().saturating_sub(1).max(1)]));
    }
    let (checked, bad, deficient) = acc;
    outcome(
        4,
        "regression rank follows the state integral",
        bad == 0,
        format!(
            "{checked} regressions ({hsv_checked} from vehicle runs), {deficient} datasets with deficient I_B(x,x), {bad} violations"
        ),
    )
}

fn trim_matches() -> Outcome {
    let p = HsvParams::nominal();
    let t = hsv::trim(&p).unwrap();
    let f = hsv::forces(&t.x, &t.u, &p).unwrap();
    let da = (t.x.alpha() / DEG - published_trim::ALPHA_DEG).abs();
    let dt = (t.u.delta_t - published_trim::DELTA_T).abs();
    let de = (t.u.delta_e / DEG - published_trim::DELTA_E_DEG).abs();
    let dth = (f.thrust - published_trim::THRUST).abs() / published_trim::THRUST;
    outcome(
        5,
        "trim",
        t.residual < 1e-9 && da <= 0.02 && dt <= 1e-3 && de <= 0.02 && dth <= 5e-3,
        format!(
            "residual {:.1e}; α {:.4}° (Δ {da:.1e}), δT {:.4} (Δ {dt:.1e}), δE {:.4}° (Δ {de:.1e}); thrust {:.1} lb (Δ {:.2}%)",
            t.residual,
            t.x.alpha() / DEG,
            t.u.delta_t,
            t.u.delta_e / DEG,
            f.thrust,
            100.0 * dth
        ),
    )
}

fn modes_and_zeros() -> Outcome {
    let m = HsvModel::trimmed(HsvParams::nominal()).unwrap();
    let sys: LtiSystem = m.physical_linearization().unwrap().sys;
    let ev = eigenvalues(&sys.a);
    let nearest =
        |w: Complex<f64>, set: &[Complex<f64>]| set.iter().map(|l| (l - w).norm()).fold(f64::INFINITY, f64::min);
    let mut ok = true;
    let mut parts = vec![];
    for w in [-0.8291, 0.7165] {
        let d = nearest(Complex::new(w, 0.0), &ev);
        ok &= d <= 0.02 * f64::abs(w);
        parts.push(format!("λ {w}: Δ {d:.1e}"));
    }
    for w in [Complex::new(-1e-5, 0.0276), Complex::new(0.0005, 0.0)] {
        let d = nearest(w, &ev);
        ok &= d <= 5e-4;
        parts.push(format!("λ {w}: Δ {d:.1e}"));
    }
    let mut c = DMatrix::zeros(2, 5);
    c[(0, 0)] = 1.0;
    c[(1, 1)] = 1.0;
    let z = transmission_zeros(&sys, &c).unwrap();
    for w in [8.3938, -8.4620] {
        let d = nearest(Complex::new(w, 0.0), &z);
        ok &= d <= 0.02 * f64::abs(w);
        parts.push(format!("zero {w}: Δ {d:.1e}"));
    }
    outcome(6, "open-loop modes and zeros", ok, parts.join("; "))
}

fn tagged(reports: &[&StudyReport], id: u8) -> Vec<Check> {
    reports.iter().flat_map(|r| r.checks.iter()).filter(|c| c.criterion == Some(id)).cloned().collect()
}

fn with_nu(nu: f64) -> StudyConfig {
    StudyConfig { nu, ..StudyConfig::hsv_default() }
}

type Study = fn(&StudyConfig) -> deirl::Result<StudyReport>;

fn suite() -> Vec<(String, StudyReport)> {
    let studies: Vec<(&str, Study, StudyConfig)> = vec![
        ("eval1", evalharness::cmd_eval1, StudyConfig::hsv_default()),
        ("eval2", evalharness::cmd_eval2, StudyConfig::hsv_default()),
        ("freqresp", evalharness::cmd_freqresp, StudyConfig::hsv_default()),
        ("oracle", evalharness::cmd_oracle, with_nu(1.0)),
        ("oracle-0.9", evalharness::cmd_oracle, with_nu(0.9)),
        ("oracle-0.75", evalharness::cmd_oracle, with_nu(0.75)),
        ("simulate", evalharness::cmd_simulate, StudyConfig::hsv_default()),
        ("eval1-builtin", evalharness::cmd_eval1, StudyConfig::builtin_default()),
    ];
    studies.into_iter().map(|(n, f, c)| (n.to_string(), f(&c).unwrap_or_else(|e| panic!("{n}: {e}")))).collect()
}

fn main() -> ExitCode {
    let mut results = vec![operator_identities(), kleinman_random(), eirl_equals_kleinman(), regression_rank()];
    results.push(trim_matches());
    results.push(modes_and_zeros());

    let first = suite();
    let reports: Vec<&StudyReport> = first.iter().map(|p| &p.1).collect();
    for (id, title) in [
        (7u8, "optimal gains"),
        (8, "terminal gain errors"),
        (9, "conditioning ordering and magnitudes"),
        (10, "optimality error reduction"),
        (11, "FPA step at ν = 0.75"),
        (12, "FPA input-disturbance attenuation"),
    ] {
        let checks = tagged(&reports, id);
        results.push(from_checks(id, title, &checks.iter().collect::<Vec<_>>()));
    }

    let second = suite();
    let mut differing = vec![];
    let mut files = 0;
    for ((name, a), (_, b)) in first.iter().zip(&second) {
        files += a.files.len();
        if a.files != b.files {
            differing.push(name.clone());
        }
    }
    results.push(outcome(
        13,
        "determinism",
        differing.is_empty(),
        format!("{files} CSV files from {} studies compared byte for byte; differing: {differing:?}", first.len()),
    ));

    results.sort_by_key(|r| r.id);
    let mut failed = 0;
    for r in &results {
        println!("criterion {:>2} {} {}: {}", r.id, if r.passed { "PASS" } else { "FAIL" }, r.title, r.detail);
        for n in &r.notes {
            println!("             {n}");
        }
        failed += usize::from(!r.passed);
    }
    println!("{} of {} criteria passed", results.len() - failed, results.len());
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
