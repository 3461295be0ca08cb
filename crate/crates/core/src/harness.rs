//! Ensemble orchestration: reproducible parallel path ensembles, the
//! epsilon-scaling study, kinetic-versus-limit law comparison, the
//! verification battery and the CSV/JSON writers.

use std::fmt::Write as _;
use std::path::Path;

use nalgebra::DMatrix;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::coefficients::{compute_limit_coefficients, enhanced_diffusion_check, kernel_dense, LimitCoefficients, StateFields};
use crate::config::{mesh_index, AdmissibilityReport, Experiment, GridSpec, PathCounts};
use crate::error::{Error, Result};
use crate::generator::{drift_functional, s_quadratic_form, psi_profiles, GeneratorContext, StationarityProbe, TestFunction};
use crate::grid::GridField;
use crate::kinetic::{simulate_path_with, KineticParams, Trajectory};
use crate::pilot::{path_rng, random_field};
use crate::spde::{simulate_spde_with, solve_deterministic, DeterministicMode, SpdeSolver, SpdeTrajectory};
use crate::stats::{loglog_fit, two_sample_z, variance_ratio, LinearFit, McEstimate, Summary};

/// Environment variable holding the worker count.
pub const WORKERS_ENV: &str = "DALAB_WORKERS";

const STREAM_KINETIC: u64 = 1 << 40;
const STREAM_SPDE: u64 = 2 << 40;
const STREAM_VERIFY: u64 = 3 << 40;

/// Worker count from the environment, if set.
pub fn worker_count() -> Result<Option<usize>> {
    match std::env::var(WORKERS_ENV) {
        Ok(v) => v
            .trim()
            .parse::<usize>()
            .ok()
            .filter(|&n| n > 0)
            .map(Some)
            .ok_or_else(|| Error::InvalidArgument(format!("{WORKERS_ENV} must be a positive integer, got `{v}`"))),
        Err(_) => Ok(None),
    }
}

/// Run `f(0..n)` on a bounded pool; results land in index order and the
/// first failure (by index) is returned with its replay coordinates.
pub fn run_indexed<T, F>(n: usize, base_seed: u64, stream_base: u64, f: F) -> Result<Vec<T>>
where
    T: Send,
    F: Fn(usize) -> Result<T> + Sync + Send,
{
    let work = || (0..n).into_par_iter().map(&f).collect::<Vec<Result<T>>>();
    let results = match worker_count()? {
        Some(k) => rayon::ThreadPoolBuilder::new()
            .num_threads(k)
            .build()
            .map_err(|e| Error::InvalidArgument(format!("worker pool: {e}")))?
            .install(work),
        None => work(),
    };
    results
        .into_iter()
        .enumerate()
        .map(|(i, r)| {
            r.map_err(|e| Error::PathFailed {
                path: (stream_base + i as u64) as usize,
                seed: base_seed,
                source: Box::new(e),
            })
        })
        .collect()
}

/// Per-(t, xi) summaries of `<rho_t, xi>` over an ensemble.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnsembleStats {
    pub times: Vec<f64>,
    /// `cells[t][k]` for test function `k`.
    pub cells: Vec<Vec<Summary>>,
    pub paths: usize,
}

impl EnsembleStats {
    /// `observables[path][t][k]`.
    pub fn from_observables(times: &[f64], observables: &[&Vec<Vec<f64>>]) -> Result<Self> {
        let paths = observables.len();
        let xis = observables.first().and_then(|o| o.first()).map_or(0, Vec::len);
        for o in observables {
            if o.len() != times.len() || o.iter().any(|row| row.len() != xis) {
                return Err(Error::Shape("ensemble paths have mismatched meshes".into()));
            }
        }
        let cells = (0..times.len())
            .map(|t| {
                (0..xis)
                    .map(|k| {
                        let v: Vec<f64> = observables.iter().map(|o| o[t][k]).collect();
                        Summary::new(&v)
                    })
                    .collect()
            })
            .collect();
        Ok(Self {
            times: times.to_vec(),
            cells,
            paths,
        })
    }

    /// Restrict to the given times, which must lie on the mesh.
    pub fn at_times(&self, ts: &[f64]) -> Result<Self> {
        let cells = ts
            .iter()
            .map(|&t| {
                self.times
                    .iter()
                    .position(|&s| (s - t).abs() <= 1e-9 * t.abs().max(1.0))
                    .map(|i| self.cells[i].clone())
                    .ok_or_else(|| Error::InvalidArgument(format!("time {t} is not on the ensemble mesh")))
            })
            .collect::<Result<_>>()?;
        Ok(Self {
            times: ts.to_vec(),
            cells,
            paths: self.paths,
        })
    }
}

/// Gates of the law comparison.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LawCriteria {
    pub z_max: f64,
    pub ratio_min: f64,
    pub ratio_max: f64,
    /// Used when both ensembles are deterministic (zero variance).
    pub deterministic_tol: f64,
}

impl Default for LawCriteria {
    fn default() -> Self {
        Self {
            z_max: 3.0,
            ratio_min: 0.6,
            ratio_max: 1.6,
            deterministic_tol: 0.02,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LawRow {
    pub t: f64,
    pub xi: usize,
    pub a: Summary,
    pub b: Summary,
    pub z: f64,
    pub variance_ratio: f64,
    pub passed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LawVerdict {
    pub criteria: LawCriteria,
    pub rows: Vec<LawRow>,
    pub passed: bool,
}

/// Two-sample z on means and variance ratio per `(t, xi)`.
pub fn compare_laws(a: &EnsembleStats, b: &EnsembleStats, criteria: LawCriteria) -> Result<LawVerdict> {
    let same_mesh = a.times.len() == b.times.len()
        && a.times.iter().zip(&b.times).all(|(x, y)| (x - y).abs() <= 1e-9 * x.abs().max(1.0))
        && a.cells.iter().zip(&b.cells).all(|(x, y)| x.len() == y.len());
    if !same_mesh {
        return Err(Error::Shape("law comparison needs matching (t, xi) meshes".into()));
    }
    let mut rows = Vec::new();
    for (ti, &t) in a.times.iter().enumerate() {
        for (k, (sa, sb)) in a.cells[ti].iter().zip(&b.cells[ti]).enumerate() {
            let z = two_sample_z(sa, sb);
            let ratio = variance_ratio(sa, sb);
            let passed = if sa.variance == 0.0 && sb.variance == 0.0 {
                (sa.mean - sb.mean).abs() <= criteria.deterministic_tol
            } else {
                z.abs() <= criteria.z_max && (criteria.ratio_min..=criteria.ratio_max).contains(&ratio)
            };
            rows.push(LawRow {
                t,
                xi: k,
                a: *sa,
                b: *sb,
                z,
                variance_ratio: ratio,
                passed,
            });
        }
    }
    let passed = rows.iter().all(|r| r.passed);
    Ok(LawVerdict {
        criteria,
        rows,
        passed,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ReferenceRow {
    pub t: f64,
    pub xi: usize,
    pub ensemble: Summary,
    pub reference: f64,
    pub z: f64,
    pub passed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReferenceVerdict {
    pub rows: Vec<ReferenceRow>,
    pub passed: bool,
}

/// Ensemble means against deterministic reference values `reference[t][k]`.
/// Rows with zero standard error pass when the gap is below `tol`.
pub fn compare_to_reference(stats: &EnsembleStats, reference: &[Vec<f64>], z_max: f64, tol: f64) -> Result<ReferenceVerdict> {
    if reference.len() != stats.times.len() {
        return Err(Error::Shape("reference and ensemble meshes differ".into()));
    }
    let mut rows = Vec::new();
    for (ti, &t) in stats.times.iter().enumerate() {
        for (k, s) in stats.cells[ti].iter().enumerate() {
            let r = reference[ti][k];
            let z = two_sample_z(s, &Summary { n: 1, mean: r, variance: 0.0, std_error: 0.0 });
            let passed = if s.std_error == 0.0 { (s.mean - r).abs() <= tol } else { z.abs() <= z_max };
            rows.push(ReferenceRow {
                t,
                xi: k,
                ensemble: *s,
                reference: r,
                z,
                passed,
            });
        }
    }
    let passed = rows.iter().all(|r| r.passed);
    Ok(ReferenceVerdict { rows, passed })
}

/// Worst-case per-path diagnostics over an ensemble.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AggregateDiagnostics {
    pub paths: usize,
    pub max_mass_drift: f64,
    pub min_f: f64,
    pub max_entropy_violation: f64,
    pub max_rho_over_h: f64,
    pub total_steps: usize,
    pub total_jumps: usize,
}

impl AggregateDiagnostics {
    pub fn from_trajectories(trs: &[Trajectory]) -> Self {
        let mut a = Self {
            paths: trs.len(),
            max_mass_drift: 0.0,
            min_f: f64::INFINITY,
            max_entropy_violation: 0.0,
            max_rho_over_h: 0.0,
            total_steps: 0,
            total_jumps: 0,
        };
        for t in trs {
            let d = &t.diagnostics;
            a.max_mass_drift = a.max_mass_drift.max(d.max_mass_drift);
            a.min_f = a.min_f.min(d.min_f);
            a.max_entropy_violation = a.max_entropy_violation.max(d.entropy_violation);
            a.max_rho_over_h = a.max_rho_over_h.max(d.max_rho_over_h);
            a.total_steps += d.steps;
            a.total_jumps += d.jumps;
        }
        a
    }
}

/// Kinetic parameters for one epsilon of an experiment.
pub fn kinetic_params(exp: &Experiment, epsilon: f64, keep_snapshots: bool) -> KineticParams {
    let t = &exp.config.time;
    let mut p = KineticParams::new(epsilon, t.t_end);
    p.dt = Some(t.kinetic_dt_factor * epsilon * epsilon);
    p.record_dt = t.record_dt;
    p.burn_in = t.burn_in;
    p.keep_snapshots = keep_snapshots;
    p
}

#[derive(Debug, Clone)]
pub struct KineticEnsemble {
    pub epsilon: f64,
    pub trajectories: Vec<Trajectory>,
    pub stats: EnsembleStats,
    /// Summary of `∫_0^T ||f - rho M_bar||^2 dt` over paths.
    pub local_eq: Summary,
    pub diagnostics: AggregateDiagnostics,
}

impl KineticEnsemble {
    fn from_trajectories(epsilon: f64, trajectories: Vec<Trajectory>) -> Result<Self> {
        let times: Vec<f64> = trajectories
            .first()
            .map(|t| t.records.iter().map(|r| r.t).collect())
            .unwrap_or_default();
        let obs: Vec<&Vec<Vec<f64>>> = trajectories.iter().map(|t| &t.observables).collect();
        let stats = EnsembleStats::from_observables(&times, &obs)?;
        let le: Vec<f64> = trajectories.iter().map(|t| t.diagnostics.local_eq_integral).collect();
        Ok(Self {
            epsilon,
            local_eq: Summary::new(&le),
            diagnostics: AggregateDiagnostics::from_trajectories(&trajectories),
            stats,
            trajectories,
        })
    }

    /// The first `n` paths as an ensemble of their own.
    pub fn truncated(&self, n: usize) -> Result<Self> {
        Self::from_trajectories(self.epsilon, self.trajectories[..n.min(self.trajectories.len())].to_vec())
    }

    /// Ensemble mean of `rho` at each record time (needs snapshots).
    pub fn mean_density(&self) -> Vec<GridField> {
        let Some(first) = self.trajectories.first() else {
            return Vec::new();
        };
        let n = self.trajectories.len() as f64;
        (0..first.snapshots.len())
            .map(|k| {
                let mut acc = GridField::zeros(first.snapshots[k].grid());
                for t in &self.trajectories {
                    acc.axpy(1.0 / n, &t.snapshots[k]);
                }
                acc
            })
            .collect()
    }
}

/// Kinetic ensemble; path `i` at epsilon index `e` uses stream
/// `KINETIC | e << 24 | i`, so any prefix of an ensemble is reproducible.
pub fn run_kinetic_ensemble(exp: &Experiment, eps_index: usize, epsilon: f64, paths: usize, keep_snapshots: bool) -> Result<KineticEnsemble> {
    let params = kinetic_params(exp, epsilon, keep_snapshots);
    params.validate()?;
    let f_in = exp.f_in();
    let base = STREAM_KINETIC | ((eps_index as u64) << 24);
    let seed = exp.config.base_seed;
    let trs = run_indexed(paths, seed, base, |i| {
        let mut rng = path_rng(seed, base + i as u64);
        simulate_path_with(&f_in, &exp.problem, &params, &exp.xis, &mut rng)
    })?;
    KineticEnsemble::from_trajectories(epsilon, trs)
}

#[derive(Debug, Clone)]
pub struct SpdeEnsemble {
    pub trajectories: Vec<SpdeTrajectory>,
    pub stats: EnsembleStats,
    pub max_mass_drift: f64,
    pub max_h1: f64,
}

pub fn run_spde_ensemble(exp: &Experiment, coeffs: &LimitCoefficients, paths: usize) -> Result<SpdeEnsemble> {
    let t = &exp.config.time;
    let solver = SpdeSolver::new(coeffs.clone(), t.spde_dt)?;
    let seed = exp.config.base_seed;
    let trs = run_indexed(paths, seed, STREAM_SPDE, |i| {
        let mut rng = path_rng(seed, STREAM_SPDE + i as u64);
        simulate_spde_with(&exp.rho_in, &solver, t.t_end, t.record_dt, &exp.xis, false, &mut rng)
    })?;
    let times = trs.first().map(|t| t.times.clone()).unwrap_or_default();
    let obs: Vec<&Vec<Vec<f64>>> = trs.iter().map(|t| &t.observables).collect();
    let stats = EnsembleStats::from_observables(&times, &obs)?;
    let mut max_mass_drift: f64 = 0.0;
    let mut max_h1: f64 = 0.0;
    for tr in &trs {
        let m0 = tr.mass[0];
        for m in &tr.mass {
            max_mass_drift = max_mass_drift.max((m - m0).abs() / m0.abs().max(f64::MIN_POSITIVE));
        }
        max_h1 = max_h1.max(tr.max_h1);
    }
    Ok(SpdeEnsemble {
        trajectories: trs,
        stats,
        max_mass_drift,
        max_h1,
    })
}

/// Pass/fail line of a report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Criterion {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

impl Criterion {
    pub fn new(name: &str, passed: bool, detail: impl Into<String>) -> Self {
        Self {
            name: name.to_string(),
            passed,
            detail: detail.into(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScalingRow {
    pub epsilon: f64,
    pub local_eq: Summary,
    pub diagnostics: AggregateDiagnostics,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvergenceReport {
    pub schema: String,
    pub config_name: String,
    pub config_hash: String,
    pub admissibility: AdmissibilityReport,
    pub k_star_margin: f64,
    pub noise_eigenvalues: Vec<f64>,
    pub scaling: Vec<ScalingRow>,
    pub slope: Option<LinearFit>,
    pub law: LawVerdict,
    pub mean_equation: ReferenceVerdict,
    /// `sup_t ||E rho^eps_t - r_t||_{L^2}` at the smallest epsilon.
    pub mean_density_gap: f64,
    pub criteria: Vec<Criterion>,
    pub passed: bool,
}

/// Tables produced alongside a convergence report.
#[derive(Debug, Clone)]
pub struct ConvergenceRun {
    pub report: ConvergenceReport,
    pub kinetic: EnsembleStats,
    pub spde: EnsembleStats,
    pub mean_reference: Vec<Vec<f64>>,
}

/// Slope window for the local-equilibrium regression.
pub const SLOPE_WINDOW: (f64, f64) = (1.7, 2.3);

/// Kinetic ensembles over the epsilon ladder, one limit-equation ensemble,
/// the law comparison at the smallest epsilon and the mean-equation check.
pub fn run_convergence_study(exp: &Experiment) -> Result<ConvergenceRun> {
    let cfg = &exp.config;
    let coeffs = compute_limit_coefficients(&exp.chain, &exp.model)?;
    let last = cfg.epsilons.len() - 1;
    let mut scaling = Vec::new();
    let mut law_ensemble = None;
    for (e, &eps) in cfg.epsilons.iter().enumerate() {
        let n = if e == last { cfg.paths.kinetic.max(cfg.paths.law) } else { cfg.paths.kinetic };
        let ens = run_kinetic_ensemble(exp, e, eps, n, e == last)?;
        let sub = ens.truncated(cfg.paths.kinetic)?;
        scaling.push(ScalingRow {
            epsilon: eps,
            local_eq: sub.local_eq,
            diagnostics: ens.diagnostics,
        });
        if e == last {
            law_ensemble = Some(ens.truncated(cfg.paths.law)?);
        }
    }
    let kin = law_ensemble.expect("epsilon ladder is non-empty");
    let spde = run_spde_ensemble(exp, &coeffs, cfg.paths.spde)?;
    let det = solve_deterministic(
        &exp.rho_in,
        DeterministicMode::Mean,
        &coeffs,
        cfg.time.t_end,
        cfg.time.spde_dt,
        cfg.time.record_dt,
        &exp.xis,
    )?;

    let obs_times = &cfg.observation_times;
    let kin_obs = kin.stats.at_times(obs_times)?;
    let spde_obs = spde.stats.at_times(obs_times)?;
    let law = compare_laws(&kin_obs, &spde_obs, LawCriteria::default())?;
    let det_ref: Vec<Vec<f64>> = obs_times
        .iter()
        .map(|&t| {
            let i = mesh_index(t, cfg.time.record_dt).expect("validated observation time");
            det.observables[i].clone()
        })
        .collect();
    let mean_equation = compare_to_reference(&spde_obs, &det_ref, 3.0, 1e-8)?;
    let mean_density_gap = kin
        .mean_density()
        .iter()
        .zip(&det.snapshots)
        .map(|(a, b)| a.sub(b).l2_norm())
        .fold(0.0, f64::max);

    let slope = if scaling.len() >= 2 && scaling.iter().all(|r| r.local_eq.mean > 0.0) {
        let xs: Vec<f64> = scaling.iter().map(|r| r.epsilon).collect();
        let ys: Vec<f64> = scaling.iter().map(|r| r.local_eq.mean).collect();
        Some(loglog_fit(&xs, &ys)?)
    } else {
        None
    };

    let adm = exp.admissibility();
    let drift = scaling
        .iter()
        .map(|r| r.diagnostics.max_mass_drift)
        .fold(spde.max_mass_drift, f64::max);
    let min_f = scaling.iter().map(|r| r.diagnostics.min_f).fold(f64::INFINITY, f64::min);
    let violation = scaling.iter().map(|r| r.diagnostics.max_entropy_violation).fold(0.0, f64::max);
    let mut criteria = vec![
        Criterion::new("admissibility", true, format!("R = {:.4e}, alpha/4 - R = {:.4e}", adm.radius, adm.margin)),
        Criterion::new("conservation", drift <= 1e-10, format!("max relative mass drift {drift:.3e}")),
        Criterion::new(
            "positivity",
            adm.min_tilted_equilibrium < 0.0 || min_f >= -1e-12,
            format!("min f {min_f:.3e}"),
        ),
        Criterion::new("entropy", violation <= 1e-3, format!("max violation {violation:.3e}")),
    ];
    if let Some(fit) = &slope {
        criteria.push(Criterion::new(
            "local_equilibrium_slope",
            (SLOPE_WINDOW.0..=SLOPE_WINDOW.1).contains(&fit.slope),
            format!("slope {:.3} +- {:.3}", fit.slope, fit.slope_std_error),
        ));
    }
    let deterministic = |r: &&LawRow| r.a.variance == 0.0 && r.b.variance == 0.0;
    let worst_z = law.rows.iter().filter(|r| !deterministic(r)).map(|r| r.z.abs()).fold(0.0, f64::max);
    let worst_gap = law
        .rows
        .iter()
        .filter(deterministic)
        .map(|r| (r.a.mean - r.b.mean).abs())
        .fold(0.0, f64::max);
    let ratio_range = law
        .rows
        .iter()
        .filter(|r| r.variance_ratio.is_finite())
        .fold((f64::INFINITY, 0.0f64), |(lo, hi), r| (lo.min(r.variance_ratio), hi.max(r.variance_ratio)));
    criteria.push(Criterion::new(
        "law",
        law.passed,
        format!(
            "max |z| {worst_z:.2}, variance ratios in [{:.3}, {:.3}], deterministic gap {worst_gap:.3e}",
            ratio_range.0, ratio_range.1
        ),
    ));
    let worst_mean_z = mean_equation.rows.iter().map(|r| r.z.abs()).fold(0.0, f64::max);
    criteria.push(Criterion::new(
        "mean_equation",
        mean_equation.passed,
        format!("max |z| {worst_mean_z:.2}"),
    ));
    let passed = criteria.iter().all(|c| c.passed);
    let report = ConvergenceReport {
        schema: "dalab.convergence/1".into(),
        config_name: cfg.name.clone(),
        config_hash: cfg.hash(),
        admissibility: adm,
        k_star_margin: coeffs.k_star_margin,
        noise_eigenvalues: coeffs.eigenvalues.clone(),
        scaling,
        slope,
        law,
        mean_equation,
        mean_density_gap,
        criteria,
        passed,
    };
    Ok(ConvergenceRun {
        report,
        kinetic: kin.stats,
        spde: spde.stats,
        mean_reference: det.observables,
    })
}

/// Check of the verification battery.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Check {
    pub name: String,
    pub value: f64,
    pub threshold: f64,
    pub passed: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub estimate: Option<McEstimate>,
}

impl Check {
    fn at_most(name: &str, value: f64, threshold: f64) -> Self {
        Self {
            name: name.to_string(),
            value,
            threshold,
            passed: value <= threshold,
            estimate: None,
        }
    }

    fn at_least(name: &str, value: f64, threshold: f64) -> Self {
        Self {
            passed: value >= threshold,
            ..Self::at_most(name, value, threshold)
        }
    }

    fn monte_carlo(name: &str, est: McEstimate, z_max: f64) -> Self {
        Self {
            name: name.to_string(),
            value: est.z.abs(),
            threshold: z_max,
            passed: est.passes(z_max),
            estimate: Some(est),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerificationReport {
    pub schema: String,
    pub config_name: String,
    pub config_hash: String,
    pub checks: Vec<Check>,
    pub passed: bool,
}

/// Residual of `(alpha I - Q) R_alpha theta = theta` and of
/// `R_0 R_1 theta = R_0 theta - R_1 theta` on random centred data.
pub fn resolvent_residuals<R: Rng + ?Sized>(chain: &crate::pilot::PilotChain, rng: &mut R) -> Result<(f64, f64)> {
    let n = chain.len();
    let q = chain.rates();
    let mut inverse_res: f64 = 0.0;
    for alpha in [0.1, 1.0, 10.0] {
        let r = chain.resolvent(alpha)?;
        let lhs = (DMatrix::identity(n, n) * alpha - q) * r.matrix();
        inverse_res = inverse_res.max((lhs - DMatrix::identity(n, n)).amax());
        let theta: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        let x = r.apply(&theta)?;
        for i in 0..n {
            let row: f64 = (0..n).map(|j| (if i == j { alpha } else { 0.0 } - q[(i, j)]) * x[j]).sum();
            inverse_res = inverse_res.max((row - theta[i]).abs());
        }
    }
    let lam = chain.stationary();
    let raw: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
    let mean: f64 = raw.iter().zip(lam).map(|(a, l)| a * l).sum();
    let theta: Vec<f64> = raw.iter().map(|a| a - mean).collect();
    let r0 = chain.resolvent(0.0)?;
    let r1 = chain.resolvent(1.0)?;
    let r1t = r1.apply(&theta)?;
    let lhs = r0.apply(&r1t)?;
    let r0t = r0.apply(&theta)?;
    let identity_res = (0..n).map(|i| (lhs[i] - (r0t[i] - r1t[i])).abs()).fold(0.0, f64::max);
    Ok((inverse_res, identity_res))
}

/// `||(S^{1/2})^2 - S||_F` against the symmetrised dense kernel.
pub fn sqrt_reconstruction_error(exp_chain: &crate::pilot::PilotChain, coeffs: &LimitCoefficients, fields: &StateFields) -> f64 {
    let c = kernel_dense(exp_chain, fields);
    let cell = coeffs.grid().cell_volume();
    let s = (&c + c.transpose()) * (0.5 * cell);
    let h = coeffs.sqrt_matrix();
    (&h * &h - s).norm()
}

/// The algebraic and Monte-Carlo checks on the experiment's chain.
pub fn verify_experiment(exp: &Experiment) -> Result<VerificationReport> {
    let cfg = &exp.config;
    let chain = &exp.chain;
    let model = &exp.model;
    let grid = &exp.grid;
    let seed = cfg.base_seed;
    let mut rng = path_rng(seed, STREAM_VERIFY);
    let mut checks = Vec::new();

    let (inv, ident) = resolvent_residuals(chain, &mut rng)?;
    checks.push(Check::at_most("resolvent_inverse", inv, 1e-12));
    checks.push(Check::at_most("resolvent_identity", ident, 1e-10));

    let coeffs = compute_limit_coefficients(chain, model)?;
    let cov = coeffs.covariance;
    let fields = StateFields::new(chain, model)?;
    checks.push(Check::at_least("covariance_min_eigenvalue", cov.min_eigenvalue, -1e-10));
    checks.push(Check::at_most("covariance_rank", cov.rank as f64, chain.len() as f64));
    checks.push(Check::at_most(
        "covariance_sqrt_reconstruction",
        sqrt_reconstruction_error(chain, &coeffs, &fields),
        1e-10,
    ));
    if cov.reversible {
        checks.push(Check::at_most("covariance_asymmetry", cov.asymmetry, 1e-8));
        checks.push(Check::at_most("covariance_norm_bound", cov.op_norm - cov.bound, 1e-12));
        let enh = enhanced_diffusion_check(&coeffs, chain);
        checks.push(Check::at_least("enhanced_diffusion", enh.min_eigenvalue, -1e-10));
    }
    checks.push(Check::at_least("k_star_margin", coeffs.k_star_margin, f64::MIN_POSITIVE));

    let ctx = GeneratorContext::new(chain, model)?;
    let xi = exp.xis[0].clone();
    let mut poisson: f64 = 0.0;
    let mut sharp_phi: f64 = 0.0;
    for (name, _) in psi_profiles().iter() {
        let test = TestFunction::new(xi.clone(), name)?;
        poisson = poisson.max(ctx.verify_poisson_phi1(&test, 100, &mut rng).max_residual);
        for _ in 0..10 {
            let (f, n) = ctx.random_sample(&mut rng);
            sharp_phi = sharp_phi.max(ctx.l_sharp_phi(&f, n, &test).abs());
        }
    }
    checks.push(Check::at_most("poisson_phi1", poisson, 1e-8));
    checks.push(Check::at_most("sharp_phi", sharp_phi, 1e-12));

    let band = grid.default_band().min(4);
    let mut drift_err: f64 = 0.0;
    let mut quad_err: f64 = 0.0;
    for _ in 0..20 {
        let rho = random_field(grid, band, &mut rng);
        let xi_r = random_field(grid, band, &mut rng);
        let id = TestFunction::new(xi_r.clone(), "identity")?;
        let sq = TestFunction::new(xi_r.clone(), "square")?;
        drift_err = drift_err.max((ctx.eval_limit_generator(&rho, &id).value - drift_functional(&coeffs, &rho, &xi_r)).abs());
        quad_err = quad_err.max((ctx.eval_limit_generator(&rho, &sq).second_order - s_quadratic_form(&coeffs, &rho, &xi_r)).abs());
    }
    checks.push(Check::at_most("limit_generator_drift", drift_err, 1e-10));
    checks.push(Check::at_most("limit_generator_quadratic", quad_err, 1e-10));

    let mc = cfg.paths.monte_carlo;
    let theta: Vec<f64> = chain.states().iter().map(|n| n.l2_inner(&xi)).collect();
    let probe = StationarityProbe {
        rho: exp.rho_in.clone(),
        xi: xi.clone(),
        theta,
    };
    let st = ctx.verify_stationarity_identities(&probe, mc, ctx.stationary_burn_in(), seed.wrapping_add(1))?;
    checks.push(Check::monte_carlo("stationarity_jd1", st.jd1, 3.0));
    checks.push(Check::monte_carlo("stationarity_jjd2", st.jjd2, 3.0));
    let id = TestFunction::new(xi.clone(), "identity")?;
    checks.push(Check::monte_carlo(
        "centering",
        ctx.verify_centering(&exp.rho_in, &id, mc, seed.wrapping_add(2)),
        3.0,
    ));
    let sq = TestFunction::new(xi, "square")?;
    checks.push(Check::monte_carlo(
        "solvability",
        ctx.verify_solvability(&exp.rho_in, &sq, mc, seed.wrapping_add(3)),
        3.0,
    ));

    let passed = checks.iter().all(|c| c.passed);
    Ok(VerificationReport {
        schema: "dalab.verify/1".into(),
        config_name: cfg.name.clone(),
        config_hash: cfg.hash(),
        checks,
        passed,
    })
}

/// Run manifest written next to every set of outputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub schema: String,
    pub command: String,
    pub tool_version: String,
    pub config_name: String,
    pub config_hash: String,
    pub base_seed: u64,
    pub seed_scheme: String,
    pub grid: GridSpec,
    pub epsilons: Vec<f64>,
    pub kinetic_dt_factor: f64,
    pub spde_dt: f64,
    pub paths: PathCounts,
    pub workers: Option<usize>,
    pub wall_time_seconds: f64,
    pub outputs: Vec<String>,
    pub passed: bool,
}

impl Manifest {
    pub fn new(exp: &Experiment, command: &str, outputs: Vec<String>, wall_time_seconds: f64, passed: bool) -> Result<Self> {
        let cfg = &exp.config;
        Ok(Self {
            schema: "dalab.manifest/1".into(),
            command: command.to_string(),
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            config_name: cfg.name.clone(),
            config_hash: cfg.hash(),
            base_seed: cfg.base_seed,
            seed_scheme: "ChaCha8 keyed by base_seed; stream = tag << 40 | epsilon_index << 24 | path".into(),
            grid: cfg.grid,
            epsilons: cfg.epsilons.clone(),
            kinetic_dt_factor: cfg.time.kinetic_dt_factor,
            spde_dt: cfg.time.spde_dt,
            paths: cfg.paths,
            workers: worker_count()?,
            wall_time_seconds,
            outputs,
            passed,
        })
    }
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    std::fs::write(path, text)?;
    Ok(())
}

/// Ensemble table: `t, xi, paths, mean, variance, std_error`.
pub fn ensemble_csv(stats: &EnsembleStats) -> String {
    let mut s = String::from("t,xi,paths,mean,variance,std_error\n");
    for (ti, t) in stats.times.iter().enumerate() {
        for (k, c) in stats.cells[ti].iter().enumerate() {
            let _ = writeln!(s, "{t},{k},{},{},{},{}", c.n, c.mean, c.variance, c.std_error);
        }
    }
    s
}

/// Per-path entropy records: `path, t, H, D, local_eq_err, mass, min_f, rho_l2`.
pub fn kinetic_records_csv(trs: &[Trajectory]) -> String {
    let mut s = String::from("path,t,H,D,local_eq_err,mass,min_f,rho_l2\n");
    for (p, tr) in trs.iter().enumerate() {
        for r in &tr.records {
            let _ = writeln!(
                s,
                "{p},{},{},{},{},{},{},{}",
                r.t, r.h, r.d, r.local_eq_err, r.mass, r.min_f, r.rho_l2
            );
        }
    }
    s
}

/// Per-path limit-equation records: `path, t, mass, xi_1, xi_2, ...`.
pub fn spde_paths_csv(trs: &[SpdeTrajectory], xis: usize) -> String {
    let mut s = String::from("path,t,mass");
    for k in 1..=xis {
        let _ = write!(s, ",xi_{k}");
    }
    s.push('\n');
    for (p, tr) in trs.iter().enumerate() {
        for (i, t) in tr.times.iter().enumerate() {
            let _ = write!(s, "{p},{t},{}", tr.mass[i]);
            for v in &tr.observables[i] {
                let _ = write!(s, ",{v}");
            }
            s.push('\n');
        }
    }
    s
}

/// `epsilon, paths, mean, std_error, max_mass_drift, min_f, max_entropy_violation`.
pub fn scaling_csv(rows: &[ScalingRow]) -> String {
    let mut s = String::from("epsilon,paths,local_eq_mean,local_eq_std_error,max_mass_drift,min_f,max_entropy_violation\n");
    for r in rows {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{}",
            r.epsilon,
            r.local_eq.n,
            r.local_eq.mean,
            r.local_eq.std_error,
            r.diagnostics.max_mass_drift,
            r.diagnostics.min_f,
            r.diagnostics.max_entropy_violation
        );
    }
    s
}

/// `t, xi, mean_a, se_a, var_a, mean_b, se_b, var_b, z, variance_ratio, passed`.
pub fn law_csv(v: &LawVerdict) -> String {
    let mut s = String::from("t,xi,kinetic_mean,kinetic_se,kinetic_var,spde_mean,spde_se,spde_var,z,variance_ratio,passed\n");
    for r in &v.rows {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{},{},{},{},{}",
            r.t, r.xi, r.a.mean, r.a.std_error, r.a.variance, r.b.mean, r.b.std_error, r.b.variance, r.z, r.variance_ratio, r.passed
        );
    }
    s
}

/// `t, xi, spde_mean, spde_se, deterministic, z, passed`.
pub fn reference_csv(v: &ReferenceVerdict) -> String {
    let mut s = String::from("t,xi,spde_mean,spde_se,deterministic,z,passed\n");
    for r in &v.rows {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{}",
            r.t, r.xi, r.ensemble.mean, r.ensemble.std_error, r.reference, r.z, r.passed
        );
    }
    s
}
