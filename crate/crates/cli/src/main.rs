//! `dalab`: command-line front end of the kinetic diffusion-approximation
//! laboratory.

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use dalab::coefficients::{compute_limit_coefficients, enhanced_diffusion_check};
use dalab::config::{Experiment, ExperimentConfig};
use dalab::harness::{
    ensemble_csv, kinetic_records_csv, law_csv, reference_csv, run_convergence_study, run_kinetic_ensemble,
    run_spde_ensemble, scaling_csv, spde_paths_csv, verify_experiment, write_json, ConvergenceReport, Manifest,
    VerificationReport,
};

#[derive(Debug, Parser)]
#[command(name = "dalab", version, about = "Kinetic equations driven by a Markov field and their diffusion limit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct Common {
    /// Experiment config (JSON).
    #[arg(long, short)]
    config: PathBuf,
    /// Override the base seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Override the output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Override every path count.
    #[arg(long)]
    paths: Option<usize>,
    /// Replace the epsilon ladder with a single value.
    #[arg(long)]
    epsilon: Option<f64>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Check admissibility of the model and chain.
    Validate(Common),
    /// Kinetic path ensemble at the smallest epsilon.
    SimulateKinetic {
        #[command(flatten)]
        common: Common,
        /// Also write density snapshots of path 0.
        #[arg(long)]
        snapshots: bool,
    },
    /// Limit coefficients and covariance diagnostics.
    Coeffs(Common),
    /// Ensemble of the limit equation.
    SimulateSpde(Common),
    /// Corrector algebra, limit generator and Monte-Carlo identities.
    Verify(Common),
    /// Full convergence study.
    Converge(Common),
    /// Summarise reports in an output directory.
    Report {
        /// Config whose output directory is read.
        #[arg(long, short)]
        config: Option<PathBuf>,
        /// Output directory to read.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

impl Common {
    fn load(&self) -> Result<ExperimentConfig> {
        let mut cfg = ExperimentConfig::load(&self.config)?;
        if let Some(s) = self.seed {
            cfg.base_seed = s;
        }
        if let Some(o) = &self.out {
            cfg.output_dir = o.clone();
        }
        if let Some(p) = self.paths {
            cfg.paths.kinetic = p;
            cfg.paths.law = p;
            cfg.paths.spde = p;
            cfg.paths.monte_carlo = p;
        }
        if let Some(e) = self.epsilon {
            cfg.epsilons = vec![e];
        }
        cfg.validate()?;
        Ok(cfg)
    }

    fn experiment(&self) -> Result<Experiment> {
        Ok(self.load()?.build()?)
    }
}

struct Outputs {
    dir: PathBuf,
    files: Vec<String>,
}

impl Outputs {
    fn new(dir: &Path) -> Result<Self> {
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        Ok(Self {
            dir: dir.to_path_buf(),
            files: Vec::new(),
        })
    }

    fn text(&mut self, name: &str, body: &str) -> Result<()> {
        std::fs::write(self.dir.join(name), body).with_context(|| format!("writing {name}"))?;
        self.files.push(name.to_string());
        Ok(())
    }

    fn json<T: serde::Serialize>(&mut self, name: &str, value: &T) -> Result<()> {
        write_json(&self.dir.join(name), value)?;
        self.files.push(name.to_string());
        Ok(())
    }

    fn manifest(self, exp: &Experiment, command: &str, started: Instant, passed: bool) -> Result<()> {
        let m = Manifest::new(exp, command, self.files, started.elapsed().as_secs_f64(), passed)?;
        write_json(&self.dir.join(format!("manifest_{command}.json")), &m)?;
        Ok(())
    }
}

fn line(name: &str, passed: bool, detail: &str) {
    println!("[{}] {name}: {detail}", if passed { "PASS" } else { "FAIL" });
}

fn smallest_epsilon(exp: &Experiment) -> (usize, f64) {
    let e = &exp.config.epsilons;
    (e.len() - 1, e[e.len() - 1])
}

fn validate(common: &Common) -> Result<bool> {
    let exp = common.experiment()?;
    let a = exp.admissibility();
    println!("config      {}", exp.config.name);
    println!("states      {}", a.states);
    println!("R           {:.6e}", a.radius);
    println!("alpha       {}", a.alpha);
    println!("alpha/4 - R {:.6e}", a.margin);
    match a.spectral_gap {
        Some(g) => println!("gap         {g:.6e}"),
        None => println!("gap         inf"),
    }
    println!("reversible  {}", a.reversible);
    println!("min M_check {:.6e}", a.min_tilted_equilibrium);
    if a.scale_factor != 1.0 {
        println!("fit_to_ball scaled states by {:.6e}", a.scale_factor);
    }
    line("admissibility", true, "vdv, HypM, BallR, Rsmall, mcentred, mixCoupled hold");
    Ok(true)
}

fn simulate_kinetic(common: &Common, snapshots: bool) -> Result<bool> {
    let started = Instant::now();
    let exp = common.experiment()?;
    let (idx, eps) = smallest_epsilon(&exp);
    let ens = run_kinetic_ensemble(&exp, idx, eps, exp.config.paths.kinetic, snapshots)?;
    let mut out = Outputs::new(&exp.config.output_dir)?;
    out.text("kinetic_records.csv", &kinetic_records_csv(&ens.trajectories))?;
    out.text("kinetic_observables.csv", &ensemble_csv(&ens.stats))?;
    if snapshots {
        let mut s = String::from("t,point,rho\n");
        let tr = &ens.trajectories[0];
        for (r, rho) in tr.records.iter().zip(&tr.snapshots) {
            for (p, v) in rho.values().iter().enumerate() {
                s.push_str(&format!("{},{p},{v}\n", r.t));
            }
        }
        out.text("rho_snapshots.csv", &s)?;
    }
    let d = ens.diagnostics;
    let positivity_asserted = exp.problem.min_tilted_equilibrium() >= 0.0;
    let checks = [
        ("conservation", d.max_mass_drift <= 1e-10, format!("max relative mass drift {:.3e}", d.max_mass_drift)),
        ("positivity", !positivity_asserted || d.min_f >= -1e-12, format!("min f {:.3e}", d.min_f)),
        ("entropy", d.max_entropy_violation <= 1e-3, format!("max violation {:.3e}", d.max_entropy_violation)),
    ];
    println!(
        "epsilon {eps}, {} paths, E int ||f - rho M_bar||^2 = {:.6e} +- {:.1e}",
        d.paths, ens.local_eq.mean, ens.local_eq.std_error
    );
    let mut passed = true;
    for (n, p, s) in &checks {
        line(n, *p, s);
        passed &= *p;
    }
    out.json("kinetic_summary.json", &serde_json::json!({
        "epsilon": eps,
        "local_eq": ens.local_eq,
        "diagnostics": d,
        "passed": passed,
    }))?;
    out.manifest(&exp, "simulate-kinetic", started, passed)?;
    Ok(passed)
}

fn coeffs(common: &Common) -> Result<bool> {
    let started = Instant::now();
    let exp = common.experiment()?;
    let c = compute_limit_coefficients(&exp.chain, &exp.model)?;
    let enh = enhanced_diffusion_check(&c, &exp.chain);
    let mut out = Outputs::new(&exp.config.output_dir)?;
    out.json("coefficients.json", &c.bundle())?;
    out.json("enhancement.json", &enh)?;
    let d = c.dim();
    for a in 0..d {
        let row: Vec<String> = (0..d).map(|b| format!("{:.6e}", c.k_m[a][b])).collect();
        println!("K(M)[{a}]     {}", row.join(" "));
    }
    println!("K* margin   {:.6e}", c.k_star_margin);
    println!("noise rank  {}", c.rank());
    for (k, mu) in c.eigenvalues.iter().enumerate() {
        println!("mu_{k}        {mu:.6e}");
    }
    let cov = c.covariance;
    println!("|C| max     {:.6e} (R^2/gap = {:.6e})", cov.max_entry, cov.bound);
    let mut passed = true;
    let mut check = |n: &str, p: bool, s: String| {
        line(n, p, &s);
        passed &= p;
    };
    check("covariance_psd", cov.min_eigenvalue >= -1e-10, format!("min eigenvalue {:.3e}", cov.min_eigenvalue));
    check("covariance_rank", cov.rank <= cov.states, format!("rank {} <= {}", cov.rank, cov.states));
    if cov.reversible {
        check("covariance_symmetry", cov.asymmetry <= 1e-8, format!("asymmetry {:.3e}", cov.asymmetry));
        check(
            "covariance_bound",
            cov.op_norm <= cov.bound + 1e-12,
            format!("norm {:.3e} <= {:.3e}", cov.op_norm, cov.bound),
        );
        check(
            "enhanced_diffusion",
            enh.passed.unwrap_or(true),
            format!("min eig(K* - K(M)) {:.3e}", enh.min_eigenvalue),
        );
    } else {
        println!("chain is not reversible: asymmetry {:.3e} recorded, kernel symmetrised", cov.asymmetry);
    }
    out.manifest(&exp, "coeffs", started, passed)?;
    Ok(passed)
}

fn simulate_spde(common: &Common) -> Result<bool> {
    let started = Instant::now();
    let exp = common.experiment()?;
    let c = compute_limit_coefficients(&exp.chain, &exp.model)?;
    let ens = run_spde_ensemble(&exp, &c, exp.config.paths.spde)?;
    let mut out = Outputs::new(&exp.config.output_dir)?;
    out.text("spde_paths.csv", &spde_paths_csv(&ens.trajectories, exp.xis.len()))?;
    out.text("spde_observables.csv", &ensemble_csv(&ens.stats))?;
    let passed = ens.max_mass_drift <= 1e-10;
    line("conservation", passed, &format!("max relative mass drift {:.3e}", ens.max_mass_drift));
    println!("max discrete H1 norm {:.6e}", ens.max_h1);
    out.manifest(&exp, "simulate-spde", started, passed)?;
    Ok(passed)
}

fn print_verify(r: &VerificationReport) {
    for c in &r.checks {
        let detail = match &c.estimate {
            Some(e) => format!(
                "MC {:.6e} +- {:.1e} vs exact {:.6e}, |z| = {:.2}",
                e.estimate, e.std_error, e.exact, c.value
            ),
            None => format!("{:.3e} (threshold {:.1e})", c.value, c.threshold),
        };
        line(&c.name, c.passed, &detail);
    }
}

fn verify(common: &Common) -> Result<bool> {
    let started = Instant::now();
    let exp = common.experiment()?;
    let report = verify_experiment(&exp)?;
    print_verify(&report);
    let mut out = Outputs::new(&exp.config.output_dir)?;
    out.json("verify.json", &report)?;
    out.manifest(&exp, "verify", started, report.passed)?;
    Ok(report.passed)
}

fn print_convergence(r: &ConvergenceReport) {
    for row in &r.scaling {
        println!(
            "epsilon {:<6} E int ||f - rho M_bar||^2 = {:.6e} +- {:.1e}",
            row.epsilon, row.local_eq.mean, row.local_eq.std_error
        );
    }
    println!("sup_t ||E rho - r||_L2 = {:.3e}", r.mean_density_gap);
    for c in &r.criteria {
        line(&c.name, c.passed, &c.detail);
    }
}

fn converge(common: &Common) -> Result<bool> {
    let started = Instant::now();
    let exp = common.experiment()?;
    let run = run_convergence_study(&exp)?;
    let mut out = Outputs::new(&exp.config.output_dir)?;
    out.json("report.json", &run.report)?;
    out.text("scaling.csv", &scaling_csv(&run.report.scaling))?;
    out.text("law.csv", &law_csv(&run.report.law))?;
    out.text("mean_equation.csv", &reference_csv(&run.report.mean_equation))?;
    out.text("kinetic_observables.csv", &ensemble_csv(&run.kinetic))?;
    out.text("spde_observables.csv", &ensemble_csv(&run.spde))?;
    print_convergence(&run.report);
    out.manifest(&exp, "converge", started, run.report.passed)?;
    Ok(run.report.passed)
}

fn report(config: Option<&Path>, out: Option<&Path>) -> Result<bool> {
    let dir = match (out, config) {
        (Some(o), _) => o.to_path_buf(),
        (None, Some(c)) => ExperimentConfig::load(c)?.output_dir,
        (None, None) => bail!("report needs --out or --config"),
    };
    let mut found = false;
    let mut passed = true;
    let conv = dir.join("report.json");
    if conv.exists() {
        let r: ConvergenceReport = serde_json::from_str(&std::fs::read_to_string(&conv)?)
            .with_context(|| format!("parsing {}", conv.display()))?;
        println!("convergence report for `{}` ({})", r.config_name, r.config_hash);
        print_convergence(&r);
        found = true;
        passed &= r.passed;
    }
    let ver = dir.join("verify.json");
    if ver.exists() {
        let r: VerificationReport = serde_json::from_str(&std::fs::read_to_string(&ver)?)
            .with_context(|| format!("parsing {}", ver.display()))?;
        println!("verification report for `{}` ({})", r.config_name, r.config_hash);
        print_verify(&r);
        found = true;
        passed &= r.passed;
    }
    if !found {
        bail!("no report.json or verify.json in {}", dir.display());
    }
    Ok(passed)
}

fn run(cli: Cli) -> Result<bool> {
    match &cli.command {
        Command::Validate(c) => validate(c),
        Command::SimulateKinetic { common, snapshots } => simulate_kinetic(common, *snapshots),
        Command::Coeffs(c) => coeffs(c),
        Command::SimulateSpde(c) => simulate_spde(c),
        Command::Verify(c) => verify(c),
        Command::Converge(c) => converge(c),
        Command::Report { config, out } => report(config.as_deref(), out.as_deref()),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            if let Some(h) = e.downcast_ref::<dalab::Error>().and_then(dalab::Error::hypothesis) {
                eprintln!("error: inadmissible ({}): {e:#}", h.tag());
            } else {
                eprintln!("error: {e:#}");
            }
            ExitCode::from(2)
        }
    }
}
