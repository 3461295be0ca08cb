//! IMEX Euler-Maruyama solver for the limit equation
//!
//! ```text
//! d rho = div(K* grad rho + Psi rho) dt + sqrt(2) sum_k sqrt(mu_k) div(rho p_k) d beta_k
//! ```
//!
//! on the periodic grid. Diffusion uses conservative face fluxes (full tensor
//! in 2-d) and is implicit; the operator is factored once. Drift and noise
//! are explicit central-flux divergences, so every term telescopes and mass
//! is conserved to round-off.

use nalgebra::{DMatrix, DVector, Dyn, LU};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::coefficients::LimitCoefficients;
use crate::error::{Error, Result};
use crate::grid::{Grid, GridField, VectorField};

/// Periodic neighbour of `p` shifted by `(s0, s1)` grid cells.
fn shift(grid: &Grid, p: usize, s0: isize, s1: isize) -> usize {
    let n = grid.resolution() as isize;
    if grid.dim() == 1 {
        ((p as isize + s0).rem_euclid(n)) as usize
    } else {
        let i = (p as isize / n + s0).rem_euclid(n);
        let j = (p as isize % n + s1).rem_euclid(n);
        (i * n + j) as usize
    }
}

/// Dense matrix of the conservative discretisation of `div(K grad .)`.
pub fn diffusion_matrix(k: &[Vec<GridField>]) -> DMatrix<f64> {
    let grid = k[0][0].grid().clone();
    let g = grid.len();
    let h = grid.spacing();
    let kv = |a: usize, b: usize, p: usize| k[a][b].values()[p];
    let mut m = DMatrix::zeros(g, g);
    // flux across the face between `p` and its +axis neighbour
    let add_face = |m: &mut DMatrix<f64>, p: usize, q: usize, terms: &[(usize, f64)]| {
        for &(idx, c) in terms {
            m[(p, idx)] += c / h;
            m[(q, idx)] -= c / h;
        }
    };
    for p in 0..g {
        if grid.dim() == 1 {
            let q = shift(&grid, p, 1, 0);
            let kf = 0.5 * (kv(0, 0, p) + kv(0, 0, q));
            add_face(&mut m, p, q, &[(q, kf / h), (p, -kf / h)]);
        } else {
            // x-face (i + 1/2, j)
            let q = shift(&grid, p, 1, 0);
            let k00 = 0.5 * (kv(0, 0, p) + kv(0, 0, q));
            let k01 = 0.5 * (kv(0, 1, p) + kv(0, 1, q));
            let c = k01 / (4.0 * h);
            add_face(
                &mut m,
                p,
                q,
                &[
                    (q, k00 / h),
                    (p, -k00 / h),
                    (shift(&grid, p, 0, 1), c),
                    (shift(&grid, p, 0, -1), -c),
                    (shift(&grid, q, 0, 1), c),
                    (shift(&grid, q, 0, -1), -c),
                ],
            );
            // y-face (i, j + 1/2)
            let q = shift(&grid, p, 0, 1);
            let k11 = 0.5 * (kv(1, 1, p) + kv(1, 1, q));
            let k10 = 0.5 * (kv(1, 0, p) + kv(1, 0, q));
            let c = k10 / (4.0 * h);
            add_face(
                &mut m,
                p,
                q,
                &[
                    (q, k11 / h),
                    (p, -k11 / h),
                    (shift(&grid, p, 1, 0), c),
                    (shift(&grid, p, -1, 0), -c),
                    (shift(&grid, q, 1, 0), c),
                    (shift(&grid, q, -1, 0), -c),
                ],
            );
        }
    }
    m
}

/// Central-flux divergence `div_h u`, conservative on the torus.
pub fn divergence_fd(u: &VectorField) -> GridField {
    let grid = u.grid().clone();
    let h2 = 2.0 * grid.spacing();
    let vals = (0..grid.len())
        .map(|p| {
            let mut s = 0.0;
            for a in 0..grid.dim() {
                let (s0, s1) = if a == 0 { (1, 0) } else { (0, 1) };
                let c = u.component(a).values();
                s += (c[shift(&grid, p, s0, s1)] - c[shift(&grid, p, -s0, -s1)]) / h2;
            }
            s
        })
        .collect();
    GridField::from_values(&grid, vals).expect("finite divergence")
}

/// Central-difference gradient matching [`divergence_fd`].
pub fn gradient_fd(f: &GridField) -> VectorField {
    let grid = f.grid().clone();
    let h2 = 2.0 * grid.spacing();
    let v = f.values();
    VectorField::new(
        (0..grid.dim())
            .map(|a| {
                let (s0, s1) = if a == 0 { (1, 0) } else { (0, 1) };
                let vals = (0..grid.len())
                    .map(|p| (v[shift(&grid, p, s0, s1)] - v[shift(&grid, p, -s0, -s1)]) / h2)
                    .collect();
                GridField::from_values(&grid, vals).expect("finite gradient")
            })
            .collect(),
    )
}

/// Discrete `H^1` norm with forward differences.
pub fn h1_norm(f: &GridField) -> f64 {
    let grid = f.grid();
    let h = grid.spacing();
    let v = f.values();
    let mut s = 0.0;
    for p in 0..grid.len() {
        s += v[p] * v[p];
        for a in 0..grid.dim() {
            let (s0, s1) = if a == 0 { (1, 0) } else { (0, 1) };
            let d = (v[shift(grid, p, s0, s1)] - v[p]) / h;
            s += d * d;
        }
    }
    (s * grid.cell_volume()).sqrt()
}

/// Which comparison equation to integrate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DeterministicMode {
    /// `d_t rho = div(K(M) grad rho)`.
    Plain,
    /// `d_t r = div(K* grad r + Psi r)`.
    Mean,
}

/// Factored IMEX stepper for one set of coefficients and one time step.
pub struct SpdeSolver {
    coeffs: LimitCoefficients,
    dt: f64,
    lu: LU<f64, Dyn, Dyn>,
    /// `sqrt(2 mu_k)` per retained mode.
    noise_scale: Vec<f64>,
}

impl std::fmt::Debug for SpdeSolver {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("SpdeSolver")
            .field("grid", self.coeffs.grid())
            .field("dt", &self.dt)
            .field("modes", &self.noise_scale.len())
            .finish()
    }
}

impl SpdeSolver {
    pub fn new(coeffs: LimitCoefficients, dt: f64) -> Result<Self> {
        if !(dt > 0.0 && dt.is_finite()) {
            return Err(Error::InvalidArgument(format!("dt must be positive, got {dt}")));
        }
        let grid = coeffs.grid().clone();
        let psi_max = coeffs.psi.components().iter().map(GridField::max_abs).fold(0.0, f64::max);
        let limit = grid.spacing() / (2.0 * psi_max + 1e-12);
        if dt > limit {
            return Err(Error::StepTooLarge { dt, limit });
        }
        let a = diffusion_matrix(&coeffs.k_star);
        let g = grid.len();
        let system = DMatrix::identity(g, g) - a * dt;
        let lu = system.lu();
        if !lu.is_invertible() {
            return Err(Error::NotPositiveDefinite("implicit diffusion operator is singular".into()));
        }
        let noise_scale = coeffs.eigenvalues.iter().map(|m| (2.0 * m).sqrt()).collect();
        Ok(Self {
            coeffs,
            dt,
            lu,
            noise_scale,
        })
    }

    pub fn coefficients(&self) -> &LimitCoefficients {
        &self.coeffs
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    pub fn grid(&self) -> &Grid {
        self.coeffs.grid()
    }

    pub fn modes(&self) -> usize {
        self.noise_scale.len()
    }

    /// One step with prescribed Brownian increments (one per mode).
    pub fn step_with_increments(&self, rho: &GridField, increments: &[f64]) -> GridField {
        let mut rhs = rho.clone();
        rhs.axpy(self.dt, &divergence_fd(&self.coeffs.psi.times(rho)));
        for ((s, db), p) in self.noise_scale.iter().zip(increments).zip(&self.coeffs.eigenvectors) {
            rhs.axpy(s * db, &divergence_fd(&p.times(rho)));
        }
        let sol = self
            .lu
            .solve(&DVector::from_column_slice(rhs.values()))
            .expect("factored system is invertible");
        GridField::from_values(self.grid(), sol.iter().copied().collect())
            .unwrap_or_else(|_| GridField::constant(self.grid(), f64::NAN))
    }

    pub fn step<R: Rng + ?Sized>(&self, rho: &GridField, rng: &mut R) -> GridField {
        let sd = self.dt.sqrt();
        let inc: Vec<f64> = (0..self.modes())
            .map(|_| sd * rng.sample::<f64, _>(StandardNormal))
            .collect();
        self.step_with_increments(rho, &inc)
    }
}

/// Free-function form of one IMEX step.
pub fn spde_step<R: Rng + ?Sized>(rho: &GridField, solver: &SpdeSolver, rng: &mut R) -> GridField {
    solver.step(rho, rng)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpdeTrajectory {
    pub times: Vec<f64>,
    pub mass: Vec<f64>,
    /// `<rho_t, xi_k>` per record time.
    pub observables: Vec<Vec<f64>>,
    pub max_h1: f64,
    #[serde(skip)]
    pub snapshots: Vec<GridField>,
}

/// Record mesh as whole numbers of steps.
fn record_steps(t_end: f64, record_dt: f64, dt: f64) -> Result<(usize, usize)> {
    let every = (record_dt / dt).round() as usize;
    let total = (t_end / dt).round() as usize;
    if every == 0 || ((every as f64) * dt - record_dt).abs() > 1e-9 * record_dt {
        return Err(Error::InvalidArgument(format!(
            "record spacing {record_dt} is not a multiple of dt = {dt}"
        )));
    }
    if total == 0 || ((total as f64) * dt - t_end).abs() > 1e-9 * t_end || !total.is_multiple_of(every) {
        return Err(Error::InvalidArgument(format!(
            "horizon {t_end} is not a multiple of the record spacing {record_dt}"
        )));
    }
    Ok((every, total))
}

fn integrate(
    rho_in: &GridField,
    solver: &SpdeSolver,
    t_end: f64,
    record_dt: f64,
    xis: &[GridField],
    keep_snapshots: bool,
    mut step: impl FnMut(&GridField) -> GridField,
) -> Result<SpdeTrajectory> {
    solver.grid().same_as(rho_in.grid())?;
    let (every, total) = record_steps(t_end, record_dt, solver.dt())?;
    let mut out = SpdeTrajectory {
        times: Vec::new(),
        mass: Vec::new(),
        observables: Vec::new(),
        max_h1: 0.0,
        snapshots: Vec::new(),
    };
    let record = |out: &mut SpdeTrajectory, k: usize, rho: &GridField| {
        out.times.push(k as f64 * solver.dt());
        out.mass.push(rho.mean());
        out.observables.push(xis.iter().map(|xi| rho.l2_inner(xi)).collect());
        if keep_snapshots {
            out.snapshots.push(rho.clone());
        }
    };
    let mut rho = rho_in.clone();
    out.max_h1 = h1_norm(&rho);
    record(&mut out, 0, &rho);
    for k in 1..=total {
        rho = step(&rho);
        if !rho.is_finite() {
            return Err(Error::BlowUp {
                step: k,
                detail: "non-finite density".into(),
            });
        }
        out.max_h1 = out.max_h1.max(h1_norm(&rho));
        if k % every == 0 {
            record(&mut out, k, &rho);
        }
    }
    Ok(out)
}

/// Simulate one path of the limit equation.
pub fn simulate_spde(
    rho_in: &GridField,
    solver: &SpdeSolver,
    t_end: f64,
    record_dt: f64,
    xis: &[GridField],
    seed: u64,
) -> Result<SpdeTrajectory> {
    simulate_spde_with(rho_in, solver, t_end, record_dt, xis, false, &mut ChaCha8Rng::seed_from_u64(seed))
}

pub fn simulate_spde_with<R: Rng + ?Sized>(
    rho_in: &GridField,
    solver: &SpdeSolver,
    t_end: f64,
    record_dt: f64,
    xis: &[GridField],
    keep_snapshots: bool,
    rng: &mut R,
) -> Result<SpdeTrajectory> {
    integrate(rho_in, solver, t_end, record_dt, xis, keep_snapshots, |r| solver.step(r, rng))
}

/// Deterministic comparison equations with the same scheme and no noise.
pub fn solve_deterministic(
    rho_in: &GridField,
    mode: DeterministicMode,
    coeffs: &LimitCoefficients,
    t_end: f64,
    dt: f64,
    record_dt: f64,
    xis: &[GridField],
) -> Result<SpdeTrajectory> {
    let c = match mode {
        DeterministicMode::Plain => coeffs.plain(),
        DeterministicMode::Mean => coeffs.without_noise(),
    };
    let solver = SpdeSolver::new(c, dt)?;
    integrate(rho_in, &solver, t_end, record_dt, xis, true, |r| solver.step_with_increments(r, &[]))
}
