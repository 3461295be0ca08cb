//! Perturbed-test-function algebra: the first corrector, the fast and slow
//! generator actions, the limit generator and the Monte-Carlo identities
//! that hold under the stationary law of `(w, m)`.

use std::fmt::Debug;
use std::sync::{Arc, OnceLock};

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::coefficients::{LimitCoefficients, StateFields};
use crate::error::{Error, Result};
use crate::grid::{Grid, GridField, ModeSpec, VectorField};
use crate::kinetic::KineticProblem;
use crate::moments::PhaseField;
use crate::pilot::{path_rng, random_field, PilotChain};
use crate::registry::Registry;
use crate::stats::McEstimate;
use crate::velocity::VelocityModel;

/// Scalar profile `psi` with analytic first and second derivatives.
pub trait PsiProfile: Send + Sync + Debug {
    fn value(&self, u: f64) -> f64;
    fn d1(&self, u: f64) -> f64;
    fn d2(&self, u: f64) -> f64;
    /// `sup_{|u| <= r} |psi'(u)|`.
    fn d1_sup(&self, r: f64) -> f64;
    /// `sup_{|u| <= r} |psi''(u)|`.
    fn d2_sup(&self, r: f64) -> f64;
}

#[derive(Debug)]
struct Identity;

impl PsiProfile for Identity {
    fn value(&self, u: f64) -> f64 {
        u
    }
    fn d1(&self, _: f64) -> f64 {
        1.0
    }
    fn d2(&self, _: f64) -> f64 {
        0.0
    }
    fn d1_sup(&self, _: f64) -> f64 {
        1.0
    }
    fn d2_sup(&self, _: f64) -> f64 {
        0.0
    }
}

#[derive(Debug)]
struct HalfSquare;

impl PsiProfile for HalfSquare {
    fn value(&self, u: f64) -> f64 {
        0.5 * u * u
    }
    fn d1(&self, u: f64) -> f64 {
        u
    }
    fn d2(&self, _: f64) -> f64 {
        1.0
    }
    fn d1_sup(&self, r: f64) -> f64 {
        r
    }
    fn d2_sup(&self, _: f64) -> f64 {
        1.0
    }
}

#[derive(Debug)]
struct Tanh;

impl PsiProfile for Tanh {
    fn value(&self, u: f64) -> f64 {
        u.tanh()
    }
    fn d1(&self, u: f64) -> f64 {
        1.0 / u.cosh().powi(2)
    }
    fn d2(&self, u: f64) -> f64 {
        -2.0 * u.tanh() / u.cosh().powi(2)
    }
    fn d1_sup(&self, _: f64) -> f64 {
        1.0
    }
    fn d2_sup(&self, _: f64) -> f64 {
        4.0 / (3.0 * 3f64.sqrt())
    }
}

/// Registered profiles: `identity`, `square` (`u^2/2`) and `tanh`.
pub fn psi_profiles() -> &'static Registry<dyn PsiProfile> {
    static REG: OnceLock<Registry<dyn PsiProfile>> = OnceLock::new();
    REG.get_or_init(|| {
        let mut r: Registry<dyn PsiProfile> = Registry::new("psi profile");
        r.register("identity", Arc::new(Identity))
            .register("square", Arc::new(HalfSquare))
            .register("tanh", Arc::new(Tanh));
        r
    })
}

/// `phi(rho) = psi(<rho, xi>)`.
#[derive(Debug, Clone)]
pub struct TestFunction {
    pub xi: GridField,
    pub psi: Arc<dyn PsiProfile>,
    pub psi_name: String,
}

impl TestFunction {
    /// Requires `xi` to be band-limited below half the Nyquist mode.
    pub fn new(xi: GridField, psi_name: &str) -> Result<Self> {
        let limit = xi.grid().default_band();
        let band = xi.bandwidth(1e-12);
        if band > limit {
            return Err(Error::InvalidArgument(format!(
                "test profile has modes up to {band}, limit is {limit}"
            )));
        }
        Ok(Self {
            psi: psi_profiles().get(psi_name)?,
            psi_name: psi_name.to_string(),
            xi,
        })
    }

    pub fn from_modes(grid: &Grid, modes: &ModeSpec, psi_name: &str) -> Result<Self> {
        Self::new(GridField::from_modes(grid, modes)?, psi_name)
    }

    pub fn pairing(&self, rho: &GridField) -> f64 {
        rho.l2_inner(&self.xi)
    }

    /// `phi(f) = psi(<rho(f), xi>)`.
    pub fn phi(&self, f: &PhaseField, model: &VelocityModel) -> f64 {
        self.psi.value(self.pairing(&f.rho(model)))
    }

    /// `||xi||_inf + ||grad xi||_inf`.
    pub fn w1_inf(&self) -> f64 {
        let g = self.xi.gradient();
        let grad = (0..self.xi.grid().len())
            .map(|p| {
                g.components()
                    .iter()
                    .map(|c| c.values()[p].powi(2))
                    .sum::<f64>()
                    .sqrt()
            })
            .fold(0.0, f64::max);
        self.xi.max_abs() + grad
    }
}

fn second_derivative(xi: &GridField, a: usize, b: usize) -> GridField {
    let mut o = [0, 0];
    o[a] += 1;
    o[b] += 1;
    xi.derivative(o)
}

/// Chain, model and per-state resolvent fields used by every evaluation.
#[derive(Debug, Clone)]
pub struct GeneratorContext {
    problem: KineticProblem,
    fields: StateFields,
}

impl GeneratorContext {
    pub fn new(chain: &PilotChain, model: &VelocityModel) -> Result<Self> {
        let problem = KineticProblem::new(chain.clone(), model.clone())?;
        let fields = StateFields::new(chain, model)?;
        Ok(Self { problem, fields })
    }

    pub fn chain(&self) -> &PilotChain {
        self.problem.chain()
    }

    pub fn model(&self) -> &VelocityModel {
        self.problem.model()
    }

    pub fn grid(&self) -> &Grid {
        self.problem.grid()
    }

    pub fn fields(&self) -> &StateFields {
        &self.fields
    }

    /// `(R_0 chi)(n_i)`.
    pub fn r0_chi(&self, state: usize) -> &VectorField {
        &self.fields.r0[state]
    }

    /// Fast-variable burn-in used for stationary sampling.
    pub fn stationary_burn_in(&self) -> f64 {
        20.0 / self.chain().joint_mixing_rate()
    }

    /// `phi_1(f, n) = psi'(u) <J(f) + rho(f) (R_0 chi)(n), grad xi>`.
    pub fn eval_phi1(&self, f: &PhaseField, state: usize, test: &TestFunction) -> f64 {
        let model = self.model();
        let rho = f.rho(model);
        let u = test.pairing(&rho);
        let mut flux = f.current(model);
        flux.axpy(1.0, &self.fields.r0[state].times(&rho));
        test.psi.d1(u) * flux.l2_inner(&test.xi.gradient())
    }

    /// Frechet derivative `D_f phi_1(f, n) . h`, hand-derived:
    /// `psi'' <rho(h), xi> <J + rho r, grad xi> + psi' <J(h) + rho(h) r, grad xi>`.
    pub fn phi1_derivative(&self, f: &PhaseField, state: usize, test: &TestFunction, h: &PhaseField) -> f64 {
        let model = self.model();
        let r = &self.fields.r0[state];
        let grad_xi = test.xi.gradient();
        let rho = f.rho(model);
        let rho_h = h.rho(model);
        let u = test.pairing(&rho);
        let mut flux = f.current(model);
        flux.axpy(1.0, &r.times(&rho));
        let mut flux_h = h.current(model);
        flux_h.axpy(1.0, &r.times(&rho_h));
        test.psi.d2(u) * test.pairing(&rho_h) * flux.l2_inner(&grad_xi) + test.psi.d1(u) * flux_h.l2_inner(&grad_xi)
    }

    /// Fast relaxation direction `L f + rho(f) v . grad n = rho M_check - f`.
    pub fn relaxation_direction(&self, f: &PhaseField, state: usize) -> PhaseField {
        let model = self.model();
        let rho = f.rho(model);
        let mut h = f.relaxation(model);
        let g = self.problem.grad_state(state);
        for (j, s) in h.slices_mut().iter_mut().enumerate() {
            let v = model.velocity(j);
            let mut tilt = GridField::zeros(g.grid());
            for (a, c) in g.components().iter().enumerate() {
                tilt.axpy(v[a], c);
            }
            s.axpy(1.0, &tilt.mul(&rho));
        }
        h
    }

    /// Transport direction `-v . grad_x f`.
    pub fn transport_direction(&self, f: &PhaseField) -> PhaseField {
        let model = self.model();
        let slices = f
            .slices()
            .iter()
            .enumerate()
            .map(|(j, s)| {
                let v = model.velocity(j);
                let mut out = GridField::zeros(s.grid());
                for a in 0..model.dim() {
                    out.axpy(-v[a], &s.partial(a));
                }
                out
            })
            .collect();
        PhaseField::new(slices, model).expect("slices match the model")
    }

    /// `L_flat phi = D_f phi . (-v . grad f) = psi'(u) <J(f), grad xi>`.
    pub fn l_flat_phi(&self, f: &PhaseField, test: &TestFunction) -> f64 {
        let model = self.model();
        let u = test.pairing(&f.rho(model));
        let g = self.transport_direction(f);
        test.psi.d1(u) * test.pairing(&g.rho(model))
    }

    /// `L_sharp phi = (Q phi)(n) + D_f phi . (L f + rho v . grad n)` for
    /// `phi` depending on `f` through `rho(f)` only.
    pub fn l_sharp_phi(&self, f: &PhaseField, state: usize, test: &TestFunction) -> f64 {
        let model = self.model();
        let u = test.pairing(&f.rho(model));
        let per_state = vec![test.psi.value(u); self.chain().len()];
        let q = self.chain().apply_generator(&per_state)[state];
        let h = self.relaxation_direction(f, state);
        q + test.psi.d1(u) * test.pairing(&h.rho(model))
    }

    /// `L_sharp phi_1 = (Q phi_1(f, .))(n) + D_f phi_1 . (L f + rho v . grad n)`.
    pub fn l_sharp_phi1(&self, f: &PhaseField, state: usize, test: &TestFunction) -> f64 {
        let per_state: Vec<f64> = (0..self.chain().len()).map(|i| self.eval_phi1(f, i, test)).collect();
        let q = self.chain().apply_generator(&per_state)[state];
        let h = self.relaxation_direction(f, state);
        q + self.phi1_derivative(f, state, test, &h)
    }

    /// `L_flat phi_1 = D_f phi_1 . (-v . grad f)`.
    pub fn l_flat_phi1(&self, f: &PhaseField, state: usize, test: &TestFunction) -> f64 {
        let g = self.transport_direction(f);
        self.phi1_derivative(f, state, test, &g)
    }

    pub fn evaluate(&self, f: &PhaseField, state: usize, test: &TestFunction) -> CorrectorEval {
        let rho = f.rho(self.model());
        CorrectorEval {
            phi: test.phi(f, self.model()),
            phi1: self.eval_phi1(f, state, test),
            l_flat_phi: self.l_flat_phi(f, test),
            l_sharp_phi1: self.l_sharp_phi1(f, state, test),
            l_phi: self.eval_limit_generator(&rho, test).value,
        }
    }

    /// Right-hand side of the corrector bound with `theta = ||f||_{L^1}`.
    pub fn phi1_bound(&self, f: &PhaseField, test: &TestFunction) -> f64 {
        let theta = f.l1_norm(self.model());
        let r = self.chain().radius();
        let gap = self.chain().spectral_gap();
        let gamma = if gap.is_finite() { 1.0 / gap } else { 0.0 };
        let xi_w = test.w1_inf();
        let u_max = theta * (2.0 + r) * test.xi.max_abs();
        let c_phi = (test.psi.d2_sup(u_max) * xi_w * xi_w + test.psi.d1_sup(u_max) * xi_w)
            * (1.0 + theta * theta * (2.0 + r).powi(2));
        c_phi * ((2.0 + r * (1.0 + gamma)) * theta + r * gamma)
    }

    /// Limit generator evaluated term by term as exact `lambda`-sums.
    pub fn eval_limit_generator(&self, rho: &GridField, test: &TestFunction) -> LimitGeneratorEval {
        let chain = self.chain();
        let model = self.model();
        let d = model.dim();
        let xi = &test.xi;
        let grad_xi = xi.gradient();
        let k_m = model.k_m();
        let u = test.pairing(rho);
        let mut second = 0.0;
        let mut first = 0.0;
        for a in 0..d {
            for b in 0..d {
                first += k_m[a][b] * rho.l2_inner(&second_derivative(xi, a, b));
            }
        }
        for (i, &l) in chain.stationary().iter().enumerate() {
            let chi = &self.fields.chi[i];
            let r0 = &self.fields.r0[i];
            let r = &self.fields.r01[i];
            second += l * chi.times(rho).l2_inner(&grad_xi) * r0.times(rho).l2_inner(&grad_xi);
            for a in 0..d {
                let rchi_a = chi.component(a).mul(rho);
                for b in 0..d {
                    first += l * rchi_a.mul(r.component(b)).l2_inner(&second_derivative(xi, a, b));
                    first += l * rchi_a.l2_inner(&r.component(b).partial(a).mul(grad_xi.component(b)));
                }
            }
        }
        LimitGeneratorEval {
            value: test.psi.d2(u) * second + test.psi.d1(u) * first,
            second_order: second,
            first_order: first,
        }
    }

    /// Random sample `(f, n)` with `f = a M + smooth perturbation`.
    pub fn random_sample<R: Rng + ?Sized>(&self, rng: &mut R) -> (PhaseField, usize) {
        let model = self.model();
        let grid = self.grid();
        let band = grid.default_band().min(4);
        let a = rng.random_range(0.5..2.0);
        let slices = model
            .equilibrium()
            .iter()
            .map(|&m| {
                let mut s = random_field(grid, band, rng).scaled(0.3);
                s.axpy(a * m, &GridField::constant(grid, 1.0));
                s
            })
            .collect();
        let f = PhaseField::new(slices, model).expect("slices match the model");
        let state = rng.random_range(0..self.chain().len());
        (f, state)
    }

    /// Max over samples of `|L_sharp phi_1 + L_flat phi|`.
    pub fn verify_poisson_phi1<R: Rng + ?Sized>(&self, test: &TestFunction, samples: usize, rng: &mut R) -> PoissonReport {
        let mut max_residual: f64 = 0.0;
        let mut max_scale: f64 = 0.0;
        for _ in 0..samples {
            let (f, n) = self.random_sample(rng);
            let a = self.l_sharp_phi1(&f, n, test);
            let b = self.l_flat_phi(&f, test);
            max_residual = max_residual.max((a + b).abs());
            max_scale = max_scale.max(b.abs());
        }
        PoissonReport {
            psi: test.psi_name.clone(),
            samples,
            max_residual,
            max_scale,
        }
    }

    /// Stationary pair `(grad w, n)` after the configured burn-in.
    fn pair_for(&self, burn: f64, seed: u64, index: usize) -> (VectorField, usize) {
        let mut rng = path_rng(seed, index as u64);
        self.problem.stationary_pair(burn, &mut rng)
    }

    /// `chi(w) = K(1) grad w`.
    fn chi_from_grad(&self, grad_w: &VectorField) -> VectorField {
        let k1 = self.model().k_one();
        let d = self.model().dim();
        let rows: Vec<Vec<f64>> = (0..d).map(|a| k1[a][..d].to_vec()).collect();
        VectorField::apply_matrix(&rows, grad_w)
    }

    fn sample_pairs(&self, n_paths: usize, burn: f64, seed: u64) -> Vec<(VectorField, usize)> {
        (0..n_paths)
            .into_par_iter()
            .map(|i| self.pair_for(burn, seed, i))
            .collect()
    }

    /// Monte-Carlo checks of
    /// `E[<J(rho M_bar), grad xi> Theta(m)] = E[<rho chi, grad xi> (R_1 Theta)]` and
    /// `E[a(w)^2] = E[a (R_1 a)]` with `a(w) = <rho chi(w), grad xi>`.
    pub fn verify_stationarity_identities(
        &self,
        probe: &StationarityProbe,
        n_paths: usize,
        burn_in: f64,
        seed: u64,
    ) -> Result<StationarityReport> {
        let chain = self.chain();
        if probe.theta.len() != chain.len() {
            return Err(Error::Shape(format!(
                "theta has {} entries, chain has {} states",
                probe.theta.len(),
                chain.len()
            )));
        }
        let grad_xi = probe.xi.gradient();
        let a: Vec<f64> = self
            .fields
            .chi
            .iter()
            .map(|c| c.times(&probe.rho).l2_inner(&grad_xi))
            .collect();
        let r1_theta = chain.resolvent(1.0)?.apply(&probe.theta)?;
        let r1_a: Vec<f64> = self
            .fields
            .r1
            .iter()
            .map(|c| c.times(&probe.rho).l2_inner(&grad_xi))
            .collect();
        let lam = chain.stationary();
        let exact_jd1: f64 = (0..chain.len()).map(|i| lam[i] * a[i] * r1_theta[i]).sum();
        let exact_jjd2: f64 = (0..chain.len()).map(|i| lam[i] * a[i] * r1_a[i]).sum();
        let pairs = self.sample_pairs(n_paths, burn_in, seed);
        let (jd1, jjd2): (Vec<f64>, Vec<f64>) = pairs
            .iter()
            .map(|(gw, n)| {
                let aw = self.chi_from_grad(gw).times(&probe.rho).l2_inner(&grad_xi);
                (aw * probe.theta[*n], aw * aw)
            })
            .unzip();
        Ok(StationarityReport {
            jd1: McEstimate::new(&jd1, exact_jd1),
            jjd2: McEstimate::new(&jjd2, exact_jjd2),
            burn_in,
        })
    }

    /// `E[L_flat phi(rho M_bar, m)]`, exactly zero for a centred chain.
    pub fn verify_centering(&self, rho: &GridField, test: &TestFunction, n_paths: usize, seed: u64) -> McEstimate {
        let burn = self.stationary_burn_in();
        let values: Vec<f64> = (0..n_paths)
            .into_par_iter()
            .map(|i| {
                let (gw, _) = self.pair_for(burn, seed, i);
                let f = self.local_equilibrium(rho, &gw);
                self.l_flat_phi(&f, test)
            })
            .collect();
        McEstimate::new(&values, 0.0)
    }

    /// `E[L_flat phi_1(rho M_bar, m) - L phi(rho)]`, zero by solvability.
    pub fn verify_solvability(&self, rho: &GridField, test: &TestFunction, n_paths: usize, seed: u64) -> McEstimate {
        let burn = self.stationary_burn_in();
        let l_phi = self.eval_limit_generator(rho, test).value;
        let values: Vec<f64> = (0..n_paths)
            .into_par_iter()
            .map(|i| {
                let (gw, n) = self.pair_for(burn, seed, i);
                let f = self.local_equilibrium(rho, &gw);
                self.l_flat_phi1(&f, n, test) - l_phi
            })
            .collect();
        McEstimate::new(&values, 0.0)
    }

    /// `rho (M + v . grad w)`.
    pub fn local_equilibrium(&self, rho: &GridField, grad_w: &VectorField) -> PhaseField {
        let profile = crate::kinetic::equilibrium_from_grad(grad_w, self.model());
        PhaseField::weighted(rho, &profile)
    }
}

/// Values of the corrector algebra at one point `(f, n)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CorrectorEval {
    pub phi: f64,
    pub phi1: f64,
    pub l_flat_phi: f64,
    pub l_sharp_phi1: f64,
    pub l_phi: f64,
}

/// Limit generator split as `psi'' * second_order + psi' * first_order`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LimitGeneratorEval {
    pub value: f64,
    pub second_order: f64,
    pub first_order: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PoissonReport {
    pub psi: String,
    pub samples: usize,
    pub max_residual: f64,
    /// Largest `|L_flat phi|` seen, for scale.
    pub max_scale: f64,
}

/// Inputs of the stationarity identities: a density, a test profile and a
/// per-state scalar `Theta`.
#[derive(Debug, Clone)]
pub struct StationarityProbe {
    pub rho: GridField,
    pub xi: GridField,
    pub theta: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StationarityReport {
    pub jd1: McEstimate,
    pub jjd2: McEstimate,
    pub burn_in: f64,
}

/// `b(rho, xi) = <rho, div(K*^T grad xi) - Psi . grad xi>`.
pub fn drift_functional(coeffs: &LimitCoefficients, rho: &GridField, xi: &GridField) -> f64 {
    let d = coeffs.dim();
    let grad = xi.gradient();
    let flux = VectorField::new(
        (0..d)
            .map(|a| {
                let mut c = GridField::zeros(xi.grid());
                for b in 0..d {
                    c.axpy(1.0, &coeffs.k_star[b][a].mul(grad.component(b)));
                }
                c
            })
            .collect(),
    );
    let mut g = flux.divergence();
    g.axpy(-1.0, &coeffs.psi.dot(&grad));
    rho.l2_inner(&g)
}

/// `<S(rho grad xi), rho grad xi>` from the eigendecomposition.
pub fn s_quadratic_form(coeffs: &LimitCoefficients, rho: &GridField, xi: &GridField) -> f64 {
    let u = xi.gradient().times(rho);
    coeffs.apply_s(&u).l2_inner(&u)
}
