//! Acceptance run: every criterion at its stated tolerance, one line each.

mod common;

use std::f64::consts::PI;
use std::time::{Duration, Instant};

use dalab::coefficients::{compute_limit_coefficients, enhanced_diffusion_check, StateFields};
use dalab::config::{Experiment, ExperimentConfig};
use dalab::generator::{drift_functional, s_quadratic_form, GeneratorContext, StationarityProbe, TestFunction};
use dalab::harness::{
    kinetic_params, resolvent_residuals, run_convergence_study, run_kinetic_ensemble, sqrt_reconstruction_error,
    AggregateDiagnostics, ConvergenceRun,
};
use dalab::kinetic::simulate_path;
use dalab::pilot::{random_chain, random_field, random_reversible};
use dalab::stats::McEstimate;
use dalab::velocity::two_speed;
use dalab::{GridField, Hypothesis, PilotChain};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use common::{fixture, shipped_config, ClosedForm};

struct Outcome {
    passed: bool,
    detail: String,
}

impl Outcome {
    fn new(passed: bool, detail: impl Into<String>) -> Self {
        Self {
            passed,
            detail: detail.into(),
        }
    }
}

fn experiment(name: &str) -> Experiment {
    ExperimentConfig::load(&shipped_config(name)).unwrap().build().unwrap()
}

fn within(elapsed: Duration, budget: Option<Duration>) -> bool {
    budget.is_none_or(|b| elapsed <= b)
}

fn admissibility() -> Outcome {
    let mut notes = Vec::new();
    let mut ok = true;
    for name in ["zero_pilot", "two_state", "five_state"] {
        let adm = experiment(name).admissibility();
        ok &= adm.margin >= -1e-12;
        notes.push(format!("{name} margin {:.3e}", adm.margin));
    }
    for (file, hyp) in [
        ("broken_vdv", Hypothesis::Vdv),
        ("broken_hypm", Hypothesis::HypM),
        ("broken_ballr", Hypothesis::BallR),
        ("broken_rsmall", Hypothesis::Rsmall),
        ("broken_mcentred", Hypothesis::Mcentred),
        ("broken_mixcoupled", Hypothesis::MixCoupled),
    ] {
        let got = ExperimentConfig::load(&fixture(file)).and_then(|c| c.build()).err().and_then(|e| e.hypothesis());
        if got != Some(hyp) {
            ok = false;
            notes.push(format!("{file} gave {got:?}"));
        }
    }
    notes.push("6 broken fixtures rejected".into());
    Outcome::new(ok, notes.join(", "))
}

fn resolvent_algebra() -> Outcome {
    let g = common::grid64();
    let mut rng = ChaCha8Rng::seed_from_u64(202);
    let (mut inv, mut id) = (0.0f64, 0.0f64);
    for k in 0..50 {
        let n = 2 + k % 9;
        let chain = if k % 2 == 0 {
            random_chain(&g, n, 1.0, &mut rng)
        } else {
            random_reversible(&g, n, 1.0, &mut rng)
        }
        .unwrap();
        let (a, b) = resolvent_residuals(&chain, &mut rng).unwrap();
        inv = inv.max(a);
        id = id.max(b);
    }
    Outcome::new(
        inv <= 1e-12 && id <= 1e-10,
        format!("50 chains, max |(aI-Q)R_a - I| {inv:.2e}, max |R0R1 - (R0-R1)| {id:.2e}"),
    )
}

fn entropy(exp: &Experiment) -> (Outcome, AggregateDiagnostics) {
    let run = |factor: f64| {
        let mut cfg = exp.config.clone();
        cfg.time.kinetic_dt_factor = factor;
        let e = cfg.build().unwrap();
        run_kinetic_ensemble(&e, 2, 0.1, 50, false).unwrap().diagnostics
    };
    let coarse = run(0.25);
    let fine = run(0.125);
    let (a, b) = (coarse.max_entropy_violation, fine.max_entropy_violation);
    (
        Outcome::new(
            a <= 1e-3 && b <= 1e-3 && b <= a,
            format!("50 paths at eps 0.1, violation {a:.3e} (dt) -> {b:.3e} (dt/2)"),
        ),
        fine,
    )
}

fn conservation(diags: &[AggregateDiagnostics]) -> Outcome {
    let drift = diags.iter().map(|d| d.max_mass_drift).fold(0.0, f64::max);
    let min_f = diags.iter().map(|d| d.min_f).fold(f64::INFINITY, f64::min);
    let paths: usize = diags.iter().map(|d| d.paths).sum();
    Outcome::new(
        drift <= 1e-10 && min_f >= -1e-12,
        format!("{paths} paths, max relative mass drift {drift:.2e}, min f {min_f:.4e}"),
    )
}

fn slope(run: &ConvergenceRun) -> Outcome {
    match &run.report.slope {
        Some(fit) => Outcome::new(
            (1.7..=2.3).contains(&fit.slope),
            format!(
                "slope {:.3} +- {:.3} over eps {:?}",
                fit.slope,
                fit.slope_std_error,
                run.report.scaling.iter().map(|r| r.epsilon).collect::<Vec<_>>()
            ),
        ),
        None => Outcome::new(false, "no regression (non-positive local-equilibrium error)"),
    }
}

fn deterministic_limit() -> Outcome {
    let exp = experiment("zero_pilot");
    let mut params = kinetic_params(&exp, 0.05, true);
    params.t_end = exp.config.time.t_end;
    let tr = simulate_path(&exp.f_in(), &exp.problem, &params, &[], 1).unwrap();
    let gap = tr
        .records
        .iter()
        .zip(&tr.snapshots)
        .map(|(r, rho)| {
            let heat = GridField::from_fn(&exp.grid, |x| 1.0 + (-4.0 * PI * PI * r.t).exp() * (2.0 * PI * x[0]).cos());
            rho.sub(&heat).l2_norm()
        })
        .fold(0.0, f64::max);
    Outcome::new(gap <= 0.02, format!("sup_t ||rho - rho_heat|| = {gap:.4e} over {} record times", tr.records.len()))
}

fn test_chains() -> Vec<(String, PilotChain)> {
    let g = common::grid64();
    let mut rng = ChaCha8Rng::seed_from_u64(707);
    vec![
        ("two-state".into(), experiment("two_state").chain),
        ("random 5-state".into(), random_chain(&g, 5, 1.0, &mut rng).unwrap()),
    ]
}

fn xi_profile() -> GridField {
    GridField::from_fn(&common::grid64(), |x| (2.0 * PI * x[0]).cos() + 0.5 * (4.0 * PI * x[0]).sin())
}

fn poisson() -> Outcome {
    let model = two_speed();
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let mut worst = 0.0f64;
    for (_, chain) in test_chains() {
        let ctx = GeneratorContext::new(&chain, &model).unwrap();
        for psi in ["identity", "square", "tanh"] {
            let t = TestFunction::new(xi_profile(), psi).unwrap();
            worst = worst.max(ctx.verify_poisson_phi1(&t, 100, &mut rng).max_residual);
        }
    }
    Outcome::new(worst <= 1e-8, format!("2 chains x 3 psi x 100 samples, max residual {worst:.2e}"))
}

fn generator_cross_checks() -> Outcome {
    let model = two_speed();
    let g = common::grid64();
    let mut rng = ChaCha8Rng::seed_from_u64(88);
    let (mut eb, mut es) = (0.0f64, 0.0f64);
    for (_, chain) in test_chains() {
        let ctx = GeneratorContext::new(&chain, &model).unwrap();
        let co = compute_limit_coefficients(&chain, &model).unwrap();
        for _ in 0..20 {
            let rho = random_field(&g, 4, &mut rng).map(|v| 1.0 + 0.3 * v);
            let xi = random_field(&g, 4, &mut rng);
            let b = drift_functional(&co, &rho, &xi);
            let lin = ctx.eval_limit_generator(&rho, &TestFunction::new(xi.clone(), "identity").unwrap());
            eb = eb.max((lin.value - b).abs() / b.abs().max(1.0));
            let sq = ctx.eval_limit_generator(&rho, &TestFunction::new(xi.clone(), "square").unwrap());
            let u = rho.l2_inner(&xi);
            let s = s_quadratic_form(&co, &rho, &xi);
            es = es.max((sq.value - u * b - s).abs() / s.abs().max(1.0));
        }
    }
    Outcome::new(
        eb <= 1e-10 && es <= 1e-10,
        format!("2 chains x 20 draws, |L phi - b| {eb:.2e}, |second order - <S u, u>| {es:.2e}"),
    )
}

fn stationarity() -> Outcome {
    let model = two_speed();
    let g = common::grid64();
    let rho = GridField::from_fn(&g, |x| 1.0 + 0.3 * (2.0 * PI * x[0]).cos());
    let xi = xi_profile();
    let mut worst = 0.0f64;
    let mut ok = true;
    let mut seed = 9000;
    let mut check = |e: McEstimate| {
        worst = worst.max(e.z.abs());
        ok &= e.passes(3.0) && e.samples == 10_000;
    };
    for (_, chain) in test_chains() {
        let ctx = GeneratorContext::new(&chain, &model).unwrap();
        let theta: Vec<f64> = chain.states().iter().map(|n| n.l2_inner(&xi)).collect();
        let probe = StationarityProbe {
            rho: rho.clone(),
            xi: xi.clone(),
            theta,
        };
        seed += 10;
        let rep = ctx.verify_stationarity_identities(&probe, 10_000, ctx.stationary_burn_in(), seed).unwrap();
        check(rep.jd1);
        check(rep.jjd2);
        check(ctx.verify_centering(&rho, &TestFunction::new(xi.clone(), "identity").unwrap(), 10_000, seed + 1));
        check(ctx.verify_solvability(&rho, &TestFunction::new(xi.clone(), "square").unwrap(), 10_000, seed + 2));
    }
    Outcome::new(ok, format!("JD1, JJD2, centering, solvability on 2 chains at 1e4 samples, max |z| {worst:.2}"))
}

fn covariance() -> Outcome {
    let model = two_speed();
    let g = common::grid64();
    let mut rng = ChaCha8Rng::seed_from_u64(1010);
    let (mut asym, mut min_eig, mut sqrt_err, mut over) = (0.0f64, f64::INFINITY, 0.0f64, f64::NEG_INFINITY);
    let mut rank_ok = true;
    for k in 0..20 {
        let chain = random_reversible(&g, 2 + k % 9, 1.0, &mut rng).unwrap();
        let co = compute_limit_coefficients(&chain, &model).unwrap();
        let c = &co.covariance;
        asym = asym.max(c.asymmetry);
        min_eig = min_eig.min(c.min_eigenvalue);
        rank_ok &= c.rank <= chain.len();
        over = over.max(c.max_entry.max(c.op_norm) / c.bound - 1.0);
        let fields = StateFields::new(&chain, &model).unwrap();
        sqrt_err = sqrt_err.max(sqrt_reconstruction_error(&chain, &co, &fields));
    }
    Outcome::new(
        asym <= 1e-8 && min_eig >= -1e-10 && rank_ok && sqrt_err <= 1e-10 && over <= 1e-12,
        format!(
            "20 reversible chains, asymmetry {asym:.2e}, min eig {min_eig:.2e}, |(S^1/2)^2 - S| {sqrt_err:.2e}, max norm/bound - 1 = {over:.3}"
        ),
    )
}

fn enhanced_diffusion() -> Outcome {
    let model = two_speed();
    let g = common::grid64();
    let mut rng = ChaCha8Rng::seed_from_u64(1111);
    let mut worst = f64::INFINITY;
    for k in 0..20 {
        let chain = random_reversible(&g, 2 + k % 9, 1.0, &mut rng).unwrap();
        let co = compute_limit_coefficients(&chain, &model).unwrap();
        worst = worst.min(enhanced_diffusion_check(&co, &chain).min_eigenvalue);
    }
    let cf = ClosedForm::new(1e-3, 1.0);
    let co = compute_limit_coefficients(&cf.chain, &cf.model).unwrap();
    let c = cf.c();
    let closed = c.mul(&c).scaled(1.0 / (2.0 * cf.q * (1.0 + 2.0 * cf.q)));
    let err = co.k_star[0][0].map(|v| v - co.k_m[0][0]).sub(&closed).max_abs();
    Outcome::new(
        worst >= -1e-10 && err <= 1e-10,
        format!("min eig(K* - K(M)) {worst:.3e} over 20 chains, closed-form error {err:.2e}"),
    )
}

fn law(run: &ConvergenceRun) -> Outcome {
    let c = run.report.criteria.iter().find(|c| c.name == "law").expect("law criterion");
    let rows = &run.report.law.rows;
    let n = rows.first().map_or((0, 0), |r| (r.a.n, r.b.n));
    Outcome::new(c.passed, format!("{} kinetic vs {} limit paths at eps 0.05, {}", n.0, n.1, c.detail))
}

fn mean_equation(run: &ConvergenceRun) -> Outcome {
    let v = &run.report.mean_equation;
    let worst = v.rows.iter().map(|r| r.z.abs()).fold(0.0, f64::max);
    let n = v.rows.first().map_or(0, |r| r.ensemble.n);
    Outcome::new(v.passed, format!("{n} limit paths vs mean equation, max |z| {worst:.2}"))
}

fn main() {
    let mut lines = Vec::new();
    let mut report = |id: usize, name: &str, budget: Option<Duration>, elapsed: Duration, o: Outcome| {
        let passed = o.passed && within(elapsed, budget);
        let tag = if passed { "PASS" } else { "FAIL" };
        let line = format!("[{tag}] {id:>2}. {name}: {} ({:.1} s)", o.detail, elapsed.as_secs_f64());
        println!("{line}");
        lines.push(passed);
    };
    let timed = |f: &dyn Fn() -> Outcome| {
        let t = Instant::now();
        let o = f();
        (o, t.elapsed())
    };
    let secs = |s: u64| Some(Duration::from_secs(s));

    let (o, t) = timed(&admissibility);
    report(1, "admissibility", secs(1), t, o);
    let (o, t) = timed(&resolvent_algebra);
    report(2, "resolvent algebra", secs(5), t, o);

    let two_state = experiment("two_state");
    let start = Instant::now();
    let (entropy_outcome, entropy_diag) = entropy(&two_state);
    let t_entropy = start.elapsed();
    let start = Instant::now();
    let run = run_convergence_study(&two_state).expect("convergence study");
    let t_study = start.elapsed();
    let mut diags: Vec<AggregateDiagnostics> = run.report.scaling.iter().map(|r| r.diagnostics).collect();
    diags.push(entropy_diag);
    report(3, "kinetic conservation and positivity", None, t_study, conservation(&diags));
    report(4, "entropy estimate", None, t_entropy, entropy_outcome);
    report(5, "local-equilibrium scaling", None, t_study, slope(&run));

    let (o, t) = timed(&deterministic_limit);
    report(6, "deterministic limit", secs(60), t, o);
    let (o, t) = timed(&poisson);
    report(7, "corrector Poisson residual", secs(30), t, o);
    let (o, t) = timed(&generator_cross_checks);
    report(8, "limit-generator cross-checks", secs(30), t, o);
    let (o, t) = timed(&stationarity);
    report(9, "stationarity identities and solvability", None, t, o);
    let (o, t) = timed(&covariance);
    report(10, "covariance operator", secs(60), t, o);
    let (o, t) = timed(&enhanced_diffusion);
    report(11, "enhanced diffusion", secs(30), t, o);
    report(12, "law convergence", None, t_study, law(&run));
    report(13, "limit mean equation", None, t_study, mean_equation(&run));

    let failed = lines.iter().filter(|p| !**p).count();
    println!("acceptance: {} passed, {failed} failed", lines.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
