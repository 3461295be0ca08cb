//! Pathwise solver for the rescaled kinetic equation
//!
//! ```text
//! d_t f + (v / eps) . grad f = (rho M - f) / eps^2 + rho v . grad m(t / eps^2) / eps^2
//! ```
//!
//! by event-driven Strang splitting. Free transport is an exact spectral
//! translation, relaxation towards `rho (M + v . grad n)` is integrated in
//! closed form, and steps are cut at pilot jumps so the relaxation kernel is
//! never averaged across a jump.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{Grid, GridField, VectorField};
use crate::moments::PhaseField;
use crate::pilot::PilotChain;
use crate::velocity::VelocityModel;

/// Translate every velocity slice by `v_j dt / eps`.
pub fn transport_exact(f: &PhaseField, model: &VelocityModel, epsilon: f64, dt: f64) -> PhaseField {
    if dt == 0.0 {
        return f.clone();
    }
    let s = dt / epsilon;
    let slices = f
        .slices()
        .iter()
        .enumerate()
        .map(|(j, slice)| {
            let disp: Vec<f64> = model.velocity(j).iter().map(|v| v * s).collect();
            if disp.iter().all(|&d| d == 0.0) {
                slice.clone()
            } else {
                slice.spectral_shift(&disp)
            }
        })
        .collect();
    PhaseField::new(slices, model).expect("shapes preserved by transport")
}

/// `M_j + v_j . g` for every velocity.
fn tilted_profile(grad: &VectorField, model: &VelocityModel) -> Vec<GridField> {
    (0..model.len())
        .map(|j| {
            let v = model.velocity(j);
            let mut p = GridField::constant(grad.grid(), model.equilibrium()[j]);
            for (a, &va) in v.iter().enumerate() {
                if va != 0.0 {
                    p.axpy(va, grad.component(a));
                }
            }
            p
        })
        .collect()
}

fn relax_with_grad(f: &PhaseField, grad_n: &VectorField, model: &VelocityModel, epsilon: f64, dt: f64) -> PhaseField {
    if dt == 0.0 {
        return f.clone();
    }
    let decay = (-dt / (epsilon * epsilon)).exp();
    let rho = f.rho(model);
    let check = tilted_profile(grad_n, model);
    let slices = f
        .slices()
        .iter()
        .zip(&check)
        .map(|(s, mc)| {
            let mut out = s.clone();
            for ((o, &r), &m) in out.values_mut().iter_mut().zip(rho.values()).zip(mc.values()) {
                let eq = r * m;
                *o = eq + decay * (*o - eq);
            }
            out
        })
        .collect();
    PhaseField::new(slices, model).expect("shapes preserved by relaxation")
}

/// Exact relaxation towards `rho(f) (M + v . grad n)` over `dt`.
pub fn relax_exact(f: &PhaseField, n: &GridField, model: &VelocityModel, epsilon: f64, dt: f64) -> PhaseField {
    relax_with_grad(f, &n.gradient(), model, epsilon, dt)
}

/// One Strang step `T(dt/2) o R(dt) o T(dt/2)` with the pilot frozen.
pub fn step_strang(f: &PhaseField, grad_n: &VectorField, model: &VelocityModel, epsilon: f64, dt: f64) -> PhaseField {
    let half = transport_exact(f, model, epsilon, 0.5 * dt);
    let relaxed = relax_with_grad(&half, grad_n, model, epsilon, dt);
    transport_exact(&relaxed, model, epsilon, 0.5 * dt)
}

/// `M_bar(x, v_j) = M_j + v_j . grad w(x)`.
pub fn equilibrium_profile(w: &GridField, model: &VelocityModel) -> PhaseField {
    equilibrium_from_grad(&w.gradient(), model)
}

pub fn equilibrium_from_grad(grad_w: &VectorField, model: &VelocityModel) -> PhaseField {
    PhaseField::new(tilted_profile(grad_w, model), model).expect("one slice per velocity")
}

/// Quadratic entropy functionals of `f` relative to `M_bar`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EntropyDiagnostics {
    /// `∬ f^2 / (2 M_bar)`.
    pub h: f64,
    /// `∬ |rho M_bar - f|^2 / M_bar`.
    pub d: f64,
    /// `∬ |f - rho M_bar|^2`.
    pub local_eq_err: f64,
    /// `∫ rho^2`.
    pub rho_l2_sq: f64,
}

pub fn entropy_diagnostics(f: &PhaseField, mbar: &PhaseField, model: &VelocityModel) -> Result<EntropyDiagnostics> {
    let min_m = mbar.min();
    if !(min_m > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "equilibrium profile must be positive (min {min_m:e})"
        )));
    }
    let rho = f.rho(model);
    let cell = f.grid().cell_volume();
    let (mut h, mut d, mut le) = (0.0, 0.0, 0.0);
    for (j, (fs, ms)) in f.slices().iter().zip(mbar.slices()).enumerate() {
        let w = model.weights()[j] * cell;
        let (mut hj, mut dj, mut lj) = (0.0, 0.0, 0.0);
        for ((&fv, &mv), &r) in fs.values().iter().zip(ms.values()).zip(rho.values()) {
            let diff = r * mv - fv;
            hj += fv * fv / (2.0 * mv);
            dj += diff * diff / mv;
            lj += diff * diff;
        }
        h += w * hj;
        d += w * dj;
        le += w * lj;
    }
    Ok(EntropyDiagnostics {
        h,
        d,
        local_eq_err: le,
        rho_l2_sq: rho.l2_inner(&rho),
    })
}

/// Time-stepping parameters of a kinetic run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KineticParams {
    pub epsilon: f64,
    pub t_end: f64,
    /// Macroscopic step; defaults to `eps^2 / 4`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dt: Option<f64>,
    /// Spacing of the record mesh.
    #[serde(default = "default_record_dt")]
    pub record_dt: f64,
    /// Burn-in length in units of the joint mixing time `1 / min(gap, 1)`.
    #[serde(default = "default_burn_in")]
    pub burn_in: f64,
    /// Keep a copy of `rho` at every record time.
    #[serde(default)]
    pub keep_snapshots: bool,
}

fn default_record_dt() -> f64 {
    0.05
}

fn default_burn_in() -> f64 {
    10.0
}

impl KineticParams {
    pub fn new(epsilon: f64, t_end: f64) -> Self {
        Self {
            epsilon,
            t_end,
            dt: None,
            record_dt: default_record_dt(),
            burn_in: default_burn_in(),
            keep_snapshots: false,
        }
    }

    pub fn step(&self) -> f64 {
        self.dt.unwrap_or(self.epsilon * self.epsilon / 4.0)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if !(self.epsilon > 0.0 && self.epsilon.is_finite()) {
            return bad(format!("epsilon must be positive, got {}", self.epsilon));
        }
        if !(self.t_end > 0.0 && self.t_end.is_finite()) {
            return bad(format!("t_end must be positive, got {}", self.t_end));
        }
        if !(self.record_dt > 0.0) {
            return bad(format!("record_dt must be positive, got {}", self.record_dt));
        }
        if !(self.burn_in >= 0.0) {
            return bad(format!("burn_in must be non-negative, got {}", self.burn_in));
        }
        let dt = self.step();
        let limit = 0.5 * self.epsilon * self.epsilon;
        if !(dt > 0.0) {
            return bad(format!("dt must be positive, got {dt}"));
        }
        if dt > limit * (1.0 + 1e-12) {
            return Err(Error::StepTooLarge { dt, limit });
        }
        Ok(())
    }

    /// Record times `0, record_dt, ..., t_end` (the end point always included).
    pub fn record_times(&self) -> Vec<f64> {
        let mut out = vec![0.0];
        let mut k = 1usize;
        loop {
            let t = k as f64 * self.record_dt;
            if t >= self.t_end * (1.0 - 1e-12) {
                break;
            }
            out.push(t);
            k += 1;
        }
        out.push(self.t_end);
        out
    }
}

/// Chain and velocity model with the per-state gradients precomputed.
#[derive(Debug, Clone)]
pub struct KineticProblem {
    chain: PilotChain,
    model: VelocityModel,
    grad_states: Vec<VectorField>,
}

impl KineticProblem {
    pub fn new(chain: PilotChain, model: VelocityModel) -> Result<Self> {
        if chain.grid().dim() != model.dim() {
            return Err(Error::Shape(format!(
                "pilot grid has dimension {}, velocity model {}",
                chain.grid().dim(),
                model.dim()
            )));
        }
        let grad_states = chain.states().iter().map(GridField::gradient).collect();
        Ok(Self {
            chain,
            model,
            grad_states,
        })
    }

    pub fn chain(&self) -> &PilotChain {
        &self.chain
    }

    pub fn model(&self) -> &VelocityModel {
        &self.model
    }

    pub fn grid(&self) -> &Grid {
        self.chain.grid()
    }

    pub fn grad_state(&self, i: usize) -> &VectorField {
        &self.grad_states[i]
    }

    /// `min_{i, j, x} (M_j + v_j . grad n_i(x))`.
    pub fn min_tilted_equilibrium(&self) -> f64 {
        self.grad_states
            .iter()
            .map(|g| {
                tilted_profile(g, &self.model)
                    .iter()
                    .map(GridField::min)
                    .fold(f64::INFINITY, f64::min)
            })
            .fold(f64::INFINITY, f64::min)
    }

    /// Run the pilot from its stationary law for `burn` microscopic time
    /// units starting at `w = 0`; returns `(grad w, state)` at the end.
    pub fn stationary_pair<R: Rng + ?Sized>(&self, burn: f64, rng: &mut R) -> (VectorField, usize) {
        let mut state = self.chain.draw_stationary(rng);
        let mut gw = VectorField::zeros(self.grid());
        let mut remaining = burn;
        loop {
            match self.chain.next_jump(state, rng) {
                Some((h, next)) if h < remaining => {
                    gw = ou_vector(&gw, &self.grad_states[state], h);
                    remaining -= h;
                    state = next;
                }
                _ => {
                    gw = ou_vector(&gw, &self.grad_states[state], remaining);
                    return (gw, state);
                }
            }
        }
    }
}

/// Exact filter update applied componentwise to a gradient field.
pub(crate) fn ou_vector(w: &VectorField, m: &VectorField, dt: f64) -> VectorField {
    let decay = (-dt).exp();
    VectorField::new(
        w.components()
            .iter()
            .zip(m.components())
            .map(|(wc, mc)| wc.zip_with(mc, |a, b| b + decay * (a - b)))
            .collect(),
    )
}

/// Diagnostics at one record time.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EntropyRecord {
    pub t: f64,
    pub h: f64,
    pub d: f64,
    pub local_eq_err: f64,
    pub mass: f64,
    pub min_f: f64,
    pub rho_l2: f64,
    /// `∫_0^t D ds`.
    pub dissipation_integral: f64,
    /// `∫_0^t ||f - rho M_bar||^2 ds`.
    pub local_eq_integral: f64,
}

/// Per-path aggregates over every step, not only record times.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PathDiagnostics {
    pub steps: usize,
    pub jumps: usize,
    pub max_mass_drift: f64,
    pub min_f: f64,
    /// `max_t (H(t) + ∫D / (2 eps^2)) / (e^t H(0)) - 1`, clipped below at 0.
    pub entropy_violation: f64,
    /// `max_t ||rho_t||^2 / H(t)`; at most 2 by Cauchy-Schwarz.
    pub max_rho_over_h: f64,
    pub local_eq_integral: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub records: Vec<EntropyRecord>,
    /// `<rho_t, xi_k>` per record time and test function.
    pub observables: Vec<Vec<f64>>,
    pub snapshots: Vec<GridField>,
    pub diagnostics: PathDiagnostics,
    pub final_state: PhaseField,
}

pub fn simulate_path(
    f_in: &PhaseField,
    problem: &KineticProblem,
    params: &KineticParams,
    xis: &[GridField],
    seed: u64,
) -> Result<Trajectory> {
    simulate_path_with(f_in, problem, params, xis, &mut ChaCha8Rng::seed_from_u64(seed))
}

struct StepProbe {
    diag: EntropyDiagnostics,
    mass: f64,
    min_f: f64,
}

fn probe(f: &PhaseField, gw: &VectorField, model: &VelocityModel, step: usize) -> Result<StepProbe> {
    let mut min_f = f64::INFINITY;
    for s in f.slices() {
        for &v in s.values() {
            if !v.is_finite() {
                return Err(Error::BlowUp {
                    step,
                    detail: "non-finite value in f".into(),
                });
            }
            min_f = min_f.min(v);
        }
    }
    let mbar = equilibrium_from_grad(gw, model);
    let diag = entropy_diagnostics(f, &mbar, model)?;
    Ok(StepProbe {
        diag,
        mass: f.mass(model),
        min_f,
    })
}

/// Integrate one path on `[0, t_end]` with a freshly sampled pilot.
pub fn simulate_path_with<R: Rng + ?Sized>(
    f_in: &PhaseField,
    problem: &KineticProblem,
    params: &KineticParams,
    xis: &[GridField],
    rng: &mut R,
) -> Result<Trajectory> {
    params.validate()?;
    let model = &problem.model;
    let chain = &problem.chain;
    problem.grid().same_as(f_in.grid())?;
    for xi in xis {
        problem.grid().same_as(xi.grid())?;
    }
    if f_in.slices().len() != model.len() {
        return Err(Error::Shape("initial datum does not match the velocity model".into()));
    }
    let eps2 = params.epsilon * params.epsilon;
    let dt_target = params.step();

    let burn = params.burn_in / chain.joint_mixing_rate();
    let (mut gw, mut state) = problem.stationary_pair(burn, rng);
    let mut next_jump = chain.next_jump(state, rng).map(|(h, j)| (h * eps2, j));

    let mut f = f_in.clone();
    let first = probe(&f, &gw, model, 0)?;
    let mass0 = first.mass;
    let h0 = first.diag.h;
    let mut diag = PathDiagnostics {
        steps: 0,
        jumps: 0,
        max_mass_drift: 0.0,
        min_f: first.min_f,
        entropy_violation: 0.0,
        max_rho_over_h: if h0 > 0.0 { first.diag.rho_l2_sq / h0 } else { 0.0 },
        local_eq_integral: 0.0,
    };
    let mut d_int = 0.0;
    let mut le_int = 0.0;
    let mut prev = first.diag;

    let times = params.record_times();
    let mut records = Vec::with_capacity(times.len());
    let mut observables = Vec::with_capacity(times.len());
    let mut snapshots = Vec::new();
    let mut push_record = |t: f64, f: &PhaseField, p: &StepProbe, d_int: f64, le_int: f64| {
        let rho = f.rho(model);
        records.push(EntropyRecord {
            t,
            h: p.diag.h,
            d: p.diag.d,
            local_eq_err: p.diag.local_eq_err,
            mass: p.mass,
            min_f: p.min_f,
            rho_l2: p.diag.rho_l2_sq.sqrt(),
            dissipation_integral: d_int,
            local_eq_integral: le_int,
        });
        observables.push(xis.iter().map(|xi| rho.l2_inner(xi)).collect::<Vec<_>>());
        if params.keep_snapshots {
            snapshots.push(rho);
        }
    };
    push_record(0.0, &f, &first, 0.0, 0.0);

    let mut t = 0.0;
    for &t_rec in &times[1..] {
        while t < t_rec {
            let mut t_next = (t + dt_target).min(t_rec);
            let mut jump_now = false;
            if let Some((tj, _)) = next_jump {
                if tj <= t_next {
                    t_next = tj.max(t);
                    jump_now = true;
                }
            }
            let dt = t_next - t;
            if dt > 0.0 {
                f = step_strang(&f, &problem.grad_states[state], model, params.epsilon, dt);
                gw = ou_vector(&gw, &problem.grad_states[state], dt / eps2);
                diag.steps += 1;
                let p = probe(&f, &gw, model, diag.steps)?;
                d_int += 0.5 * dt * (prev.d + p.diag.d);
                le_int += 0.5 * dt * (prev.local_eq_err + p.diag.local_eq_err);
                prev = p.diag;
                diag.max_mass_drift = diag.max_mass_drift.max((p.mass - mass0).abs() / mass0.abs().max(f64::MIN_POSITIVE));
                diag.min_f = diag.min_f.min(p.min_f);
                if h0 > 0.0 {
                    let lhs = p.diag.h + d_int / (2.0 * eps2);
                    let rhs = t_next.exp() * h0;
                    diag.entropy_violation = diag.entropy_violation.max(lhs / rhs - 1.0);
                }
                if p.diag.h > 0.0 {
                    diag.max_rho_over_h = diag.max_rho_over_h.max(p.diag.rho_l2_sq / p.diag.h);
                }
                t = t_next;
                if t == t_rec {
                    push_record(t, &f, &p, d_int, le_int);
                }
            }
            if jump_now {
                let (tj, j) = next_jump.expect("jump scheduled");
                state = j;
                diag.jumps += 1;
                next_jump = chain.next_jump(state, rng).map(|(h, j)| (tj + h * eps2, j));
            }
        }
    }
    diag.local_eq_integral = le_int;
    Ok(Trajectory {
        records,
        observables,
        snapshots,
        diagnostics: diag,
        final_state: f,
    })
}

/// Mild-solution reference by Picard iteration, with the pilot frozen at a
/// single state. Returns `rho` at `steps + 1` uniform times on `[0, t_end]`.
///
/// Every iterate evaluates
/// `f(t) = e^{-t/eps^2} S_t f_in + eps^{-2} ∫_0^t e^{-(t-s)/eps^2} S_{t-s}[rho(s) M_check] ds`
/// with `S_t` the free-transport flow and the time integral by trapezoid.
/// Intended for coarse grids and short horizons only.
pub fn mild_solution_oracle(
    f_in: &PhaseField,
    n: &GridField,
    model: &VelocityModel,
    epsilon: f64,
    t_end: f64,
    steps: usize,
    iterations: usize,
) -> Vec<GridField> {
    let eps2 = epsilon * epsilon;
    let h = t_end / steps as f64;
    let check = tilted_profile(&n.gradient(), model);
    let free: Vec<PhaseField> = (0..=steps)
        .map(|k| {
            let t = k as f64 * h;
            transport_exact(f_in, model, epsilon, t).scaled((-t / eps2).exp())
        })
        .collect();
    let mut rho: Vec<GridField> = free.iter().map(|f| f.rho(model)).collect();
    for _ in 0..iterations {
        let sources: Vec<PhaseField> = rho
            .iter()
            .map(|r| {
                PhaseField::new(check.iter().map(|m| m.mul(r)).collect(), model).expect("one slice per velocity")
            })
            .collect();
        let next: Vec<GridField> = (0..=steps)
            .map(|k| {
                let mut f = free[k].clone();
                for m in 0..=k {
                    let w = if m == 0 || m == k { 0.5 * h } else { h };
                    if k == 0 {
                        break;
                    }
                    let lag = (k - m) as f64 * h;
                    let src = transport_exact(&sources[m], model, epsilon, lag);
                    f.axpy(w * (-lag / eps2).exp() / eps2, &src);
                }
                f.rho(model)
            })
            .collect();
        rho = next;
    }
    rho
}
