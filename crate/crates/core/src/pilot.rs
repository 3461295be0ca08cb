//! Finite-state pilot chains: validation, exact path sampling, resolvents.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Hypothesis, Result};
use crate::grid::{Grid, GridField, ModeSpec, VectorField};

/// Tolerance on generator row sums, detailed balance and centring.
pub const CHAIN_TOL: f64 = 1e-12;

/// Reproducible per-path generator: ChaCha8 keyed by the base seed with the
/// path index as stream, so path `i` is the same under any schedule.
pub fn path_rng(base_seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(base_seed);
    rng.set_stream(stream);
    rng
}

/// Per-state values that the chain operators act on linearly.
pub trait StateValue: Clone {
    fn zero_like(&self) -> Self;
    fn axpy(&mut self, c: f64, other: &Self);
    fn max_abs(&self) -> f64;
}

impl StateValue for f64 {
    fn zero_like(&self) -> Self {
        0.0
    }
    fn axpy(&mut self, c: f64, other: &Self) {
        *self += c * other;
    }
    fn max_abs(&self) -> f64 {
        self.abs()
    }
}

impl StateValue for GridField {
    fn zero_like(&self) -> Self {
        GridField::zeros(self.grid())
    }
    fn axpy(&mut self, c: f64, other: &Self) {
        GridField::axpy(self, c, other);
    }
    fn max_abs(&self) -> f64 {
        GridField::max_abs(self)
    }
}

impl StateValue for VectorField {
    fn zero_like(&self) -> Self {
        VectorField::new(self.components().iter().map(|c| c.zero_like()).collect())
    }
    fn axpy(&mut self, c: f64, other: &Self) {
        VectorField::axpy(self, c, other);
    }
    fn max_abs(&self) -> f64 {
        self.components().iter().map(GridField::max_abs).fold(0.0, f64::max)
    }
}

/// `out_i = sum_j m[i, j] theta_j`.
fn combine<T: StateValue>(m: &DMatrix<f64>, theta: &[T]) -> Vec<T> {
    (0..m.nrows())
        .map(|i| {
            let mut acc = theta[0].zero_like();
            for (j, t) in theta.iter().enumerate() {
                let c = m[(i, j)];
                if c != 0.0 {
                    acc.axpy(c, t);
                }
            }
            acc
        })
        .collect()
}

/// Validated admissible pilot chain.
#[derive(Debug, Clone)]
pub struct PilotChain {
    states: Vec<GridField>,
    rates: DMatrix<f64>,
    stationary: Vec<f64>,
    radius: f64,
    alpha: f64,
    group_inverse: DMatrix<f64>,
}

/// Pilot states must not carry energy above this Fourier band, otherwise the
/// grid estimate of the C^3 norm is not trustworthy.
pub fn pilot_band(grid: &Grid) -> usize {
    grid.resolution() / 8
}

fn rates_matrix(rates: &[Vec<f64>]) -> Result<DMatrix<f64>> {
    let n = rates.len();
    if n == 0 || rates.iter().any(|r| r.len() != n) {
        return Err(Error::InvalidRates(format!("rate matrix must be square and non-empty ({n} rows)")));
    }
    Ok(DMatrix::from_fn(n, n, |i, j| rates[i][j]))
}

fn check_generator(q: &DMatrix<f64>) -> Result<()> {
    let n = q.nrows();
    for i in 0..n {
        let mut sum = 0.0;
        let mut scale: f64 = 1.0;
        for j in 0..n {
            let v = q[(i, j)];
            if !v.is_finite() {
                return Err(Error::NonFinite(format!("rate Q[{i}][{j}]")));
            }
            if i != j && v < 0.0 {
                return Err(Error::InvalidRates(format!("off-diagonal Q[{i}][{j}] = {v} is negative")));
            }
            sum += v;
            scale = scale.max(v.abs());
        }
        if sum.abs() > CHAIN_TOL * scale {
            return Err(Error::InvalidRates(format!("row {i} sums to {sum:e}, not 0")));
        }
    }
    Ok(())
}

fn irreducible(q: &DMatrix<f64>) -> bool {
    let n = q.nrows();
    let reach = |forward: bool| {
        let mut seen = vec![false; n];
        let mut stack = vec![0usize];
        seen[0] = true;
        while let Some(i) = stack.pop() {
            for j in 0..n {
                let edge = if forward { q[(i, j)] } else { q[(j, i)] };
                if j != i && edge > 0.0 && !seen[j] {
                    seen[j] = true;
                    stack.push(j);
                }
            }
        }
        seen.into_iter().all(|s| s)
    };
    reach(true) && reach(false)
}

/// Stationary law: null vector of `Q^T` normalised to sum one.
fn stationary_law(q: &DMatrix<f64>) -> Result<Vec<f64>> {
    let n = q.nrows();
    let mut a = q.transpose();
    for j in 0..n {
        a[(n - 1, j)] = 1.0;
    }
    let mut rhs = DVector::zeros(n);
    rhs[n - 1] = 1.0;
    let lam = a
        .lu()
        .solve(&rhs)
        .ok_or_else(|| Error::InvalidRates("stationary law is not unique".into()))?;
    Ok(lam.iter().copied().collect())
}

/// Build and validate a chain; every hypothesis of admissibility is checked.
pub fn build_chain(states: Vec<GridField>, rates: &[Vec<f64>], alpha: f64) -> Result<PilotChain> {
    let q = rates_matrix(rates)?;
    PilotChain::new(states, q, alpha)
}

impl PilotChain {
    pub fn new(states: Vec<GridField>, q: DMatrix<f64>, alpha: f64) -> Result<Self> {
        let n = states.len();
        if n == 0 {
            return Err(Error::InvalidArgument("chain needs at least one state".into()));
        }
        if q.nrows() != n || q.ncols() != n {
            return Err(Error::InvalidRates(format!(
                "{}x{} rate matrix for {n} states",
                q.nrows(),
                q.ncols()
            )));
        }
        if !(alpha > 0.0 && alpha <= 1.0) {
            return Err(Error::InvalidArgument(format!("alpha must lie in (0, 1], got {alpha}")));
        }
        let grid = states[0].grid().clone();
        for s in &states[1..] {
            grid.same_as(s.grid())?;
        }
        check_generator(&q)?;
        if !irreducible(&q) {
            return Err(Error::inadmissible(
                Hypothesis::MixCoupled,
                "rate matrix is reducible (more than one communicating class)",
            ));
        }
        let stationary = stationary_law(&q)?;
        if let Some(i) = stationary.iter().position(|&l| !(l > 0.0)) {
            return Err(Error::InvalidRates(format!("stationary weight {i} is not positive")));
        }

        let band = pilot_band(&grid);
        for (i, s) in states.iter().enumerate() {
            let bw = s.bandwidth(1e-10);
            if bw > band {
                return Err(Error::inadmissible(
                    Hypothesis::BallR,
                    format!("state {i} carries Fourier mode {bw} above the admissible band {band}"),
                ));
            }
        }

        let mut mean = GridField::zeros(&grid);
        for (s, &l) in states.iter().zip(&stationary) {
            mean.axpy(l, s);
        }
        let off = mean.max_abs();
        if off > CHAIN_TOL {
            return Err(Error::inadmissible(
                Hypothesis::Mcentred,
                format!("stationary mean of the states has sup {off:e}"),
            ));
        }

        let radius = states.iter().map(GridField::c3_norm).fold(0.0, f64::max);
        if radius > alpha / 4.0 + CHAIN_TOL {
            return Err(Error::inadmissible(
                Hypothesis::Rsmall,
                format!("R = {radius:.6e} exceeds alpha/4 = {:.6e}", alpha / 4.0),
            ));
        }

        let mut a = -q.clone();
        for i in 0..n {
            for j in 0..n {
                a[(i, j)] += stationary[j];
            }
        }
        let inv = a
            .try_inverse()
            .ok_or_else(|| Error::InvalidRates("group inverse does not exist".into()))?;
        let group_inverse = DMatrix::from_fn(n, n, |i, j| inv[(i, j)] - stationary[j]);

        Ok(Self {
            states,
            rates: q,
            stationary,
            radius,
            alpha,
            group_inverse,
        })
    }

    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    pub fn grid(&self) -> &Grid {
        self.states[0].grid()
    }

    pub fn states(&self) -> &[GridField] {
        &self.states
    }

    pub fn rates(&self) -> &DMatrix<f64> {
        &self.rates
    }

    pub fn stationary(&self) -> &[f64] {
        &self.stationary
    }

    /// `R = max_i ||n_i||_{C^3}`.
    pub fn radius(&self) -> f64 {
        self.radius
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    /// `alpha / 4 - R`, non-negative for every built chain.
    pub fn margin(&self) -> f64 {
        self.alpha / 4.0 - self.radius
    }

    /// Group inverse `G` of `-Q`: `G theta = R_0 theta` for centred `theta`,
    /// and `lambda^T G = 0`, `G 1 = 0`.
    pub fn group_inverse(&self) -> &DMatrix<f64> {
        &self.group_inverse
    }

    /// Stationary mean `sum lambda_i theta_i`.
    pub fn expectation<T: StateValue>(&self, theta: &[T]) -> T {
        let mut acc = theta[0].zero_like();
        for (t, &l) in theta.iter().zip(&self.stationary) {
            acc.axpy(l, t);
        }
        acc
    }

    /// `Q phi`.
    pub fn apply_generator<T: StateValue>(&self, phi: &[T]) -> Vec<T> {
        combine(&self.rates, phi)
    }

    /// Resolvent operator `R_alpha`; `alpha = 0` gives the centred inverse.
    pub fn resolvent(&self, alpha: f64) -> Result<Resolvent> {
        if !(alpha >= 0.0) || !alpha.is_finite() {
            return Err(Error::InvalidArgument(format!("resolvent parameter must be >= 0, got {alpha}")));
        }
        let n = self.len();
        let matrix = if alpha == 0.0 {
            self.group_inverse.clone()
        } else {
            let a = DMatrix::identity(n, n) * alpha - &self.rates;
            a.try_inverse()
                .ok_or_else(|| Error::InvalidRates(format!("alpha I - Q singular at alpha = {alpha}")))?
        };
        Ok(Resolvent {
            alpha,
            matrix,
            stationary: self.stationary.clone(),
        })
    }

    /// Detailed balance `lambda_i Q_ij = lambda_j Q_ji`.
    pub fn is_reversible(&self) -> bool {
        let n = self.len();
        let scale = self.rates.iter().fold(1.0f64, |m, v| m.max(v.abs()));
        (0..n).all(|i| {
            (0..n).all(|j| {
                (self.stationary[i] * self.rates[(i, j)] - self.stationary[j] * self.rates[(j, i)]).abs()
                    <= CHAIN_TOL * scale
            })
        })
    }

    /// Smallest non-zero real part among the eigenvalues of `-Q`; `+inf` for
    /// a single state.
    pub fn spectral_gap(&self) -> f64 {
        let n = self.len();
        if n == 1 {
            return f64::INFINITY;
        }
        let scale = self.rates.iter().fold(1.0f64, |m, v| m.max(v.abs()));
        let eig = (-&self.rates).complex_eigenvalues();
        eig.iter()
            .map(|z| z.re)
            .filter(|re| re.abs() > 1e-9 * scale)
            .fold(f64::INFINITY, f64::min)
    }

    /// Mixing rate of the joint (filter, pilot) process: `min(gap, 1)`.
    pub fn joint_mixing_rate(&self) -> f64 {
        self.spectral_gap().min(1.0)
    }

    pub fn sample_path(&self, t_end: f64, seed: u64) -> Result<PilotPath> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut path = self.sample_path_with(t_end, &mut rng)?;
        path.seed = seed;
        Ok(path)
    }

    /// Exact jump-chain sampling from the stationary law on `[0, t_end]`.
    pub fn sample_path_with<R: Rng + ?Sized>(&self, t_end: f64, rng: &mut R) -> Result<PilotPath> {
        if !(t_end > 0.0) || !t_end.is_finite() {
            return Err(Error::InvalidArgument(format!("t_end must be positive, got {t_end}")));
        }
        let mut state = self.draw_stationary(rng);
        let mut path = PilotPath {
            jump_times: Vec::new(),
            state_indices: vec![state],
            seed: 0,
        };
        let mut t = 0.0;
        while let Some((dt, next)) = self.next_jump(state, rng) {
            t += dt;
            if t >= t_end {
                break;
            }
            state = next;
            path.jump_times.push(t);
            path.state_indices.push(state);
        }
        Ok(path)
    }

    pub fn draw_stationary<R: Rng + ?Sized>(&self, rng: &mut R) -> usize {
        draw_categorical(&self.stationary, rng)
    }

    /// Holding time and destination out of `state`; `None` if absorbing.
    pub fn next_jump<R: Rng + ?Sized>(&self, state: usize, rng: &mut R) -> Option<(f64, usize)> {
        let rate = -self.rates[(state, state)];
        if rate <= 0.0 {
            return None;
        }
        let dt = Exp::new(rate).expect("positive rate").sample(rng);
        let n = self.len();
        let mut u = rng.random::<f64>() * rate;
        let mut next = state;
        for j in 0..n {
            if j == state {
                continue;
            }
            let w = self.rates[(state, j)];
            if w <= 0.0 {
                continue;
            }
            next = j;
            if u < w {
                break;
            }
            u -= w;
        }
        Some((dt, next))
    }
}

fn draw_categorical<R: Rng + ?Sized>(p: &[f64], rng: &mut R) -> usize {
    let mut u = rng.random::<f64>();
    for (i, &w) in p.iter().enumerate() {
        if u < w {
            return i;
        }
        u -= w;
    }
    p.len() - 1
}

/// Piecewise-constant pilot trajectory; `state_indices[k]` holds on
/// `[jump_times[k-1], jump_times[k])` with `jump_times[-1] = 0`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PilotPath {
    pub jump_times: Vec<f64>,
    pub state_indices: Vec<usize>,
    pub seed: u64,
}

impl PilotPath {
    pub fn state_at(&self, t: f64) -> usize {
        let k = self.jump_times.partition_point(|&s| s <= t);
        self.state_indices[k]
    }

    /// Holding durations, excluding the final censored one.
    pub fn holding_times(&self) -> Vec<f64> {
        let mut prev = 0.0;
        let mut out = Vec::with_capacity(self.jump_times.len());
        for (k, &t) in self.jump_times.iter().enumerate() {
            if k > 0 {
                out.push(t - prev);
            }
            prev = t;
        }
        out
    }
}

/// Dense resolvent `R_alpha` of a chain.
#[derive(Debug, Clone)]
pub struct Resolvent {
    alpha: f64,
    matrix: DMatrix<f64>,
    stationary: Vec<f64>,
}

impl Resolvent {
    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.matrix
    }

    /// Apply to per-state data. At `alpha = 0` the data must be
    /// lambda-centred.
    pub fn apply<T: StateValue>(&self, theta: &[T]) -> Result<Vec<T>> {
        if theta.len() != self.matrix.nrows() {
            return Err(Error::Shape(format!(
                "{} per-state values for a {}-state chain",
                theta.len(),
                self.matrix.nrows()
            )));
        }
        if self.alpha == 0.0 {
            let mut mean = theta[0].zero_like();
            let mut scale = 0.0;
            for (t, &l) in theta.iter().zip(&self.stationary) {
                mean.axpy(l, t);
                scale += l * t.max_abs();
            }
            let m = mean.max_abs();
            if m > 1e-10 * scale + 1e-14 {
                return Err(Error::NotCentred { mean: m });
            }
        }
        Ok(combine(&self.matrix, theta))
    }
}

/// Chain as written in a config: Fourier-mode dictionaries per state plus a
/// dense rate matrix and an optional fit-to-ball rescaling.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ChainSpec {
    pub states: Vec<ModeSpec>,
    pub rates: Vec<Vec<f64>>,
    /// If set, states are rescaled by `min(1, fit * (alpha/4) / R)`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fit_to_ball: Option<f64>,
}

impl ChainSpec {
    /// Build the chain; returns it together with the scaling factor applied.
    pub fn build(&self, grid: &Grid, alpha: f64) -> Result<(PilotChain, f64)> {
        let mut states: Vec<GridField> = self
            .states
            .iter()
            .map(|m| GridField::from_modes(grid, m))
            .collect::<Result<_>>()?;
        let mut factor = 1.0;
        if let Some(fit) = self.fit_to_ball {
            if !(fit > 0.0 && fit <= 1.0) {
                return Err(Error::InvalidArgument(format!("fit_to_ball must lie in (0, 1], got {fit}")));
            }
            let r = states.iter().map(GridField::c3_norm).fold(0.0, f64::max);
            if r > 0.0 {
                factor = (fit * alpha / 4.0 / r).min(1.0);
                states = states.iter().map(|s| s.scaled(factor)).collect();
            }
        }
        Ok((build_chain(states, &self.rates, alpha)?, factor))
    }
}

/// Symmetric two-state chain `{+n, -n}` with switching rate `q`.
pub fn two_state(n: GridField, q: f64, alpha: f64) -> Result<PilotChain> {
    let neg = n.scaled(-1.0);
    build_chain(vec![n, neg], &[vec![-q, q], vec![q, -q]], alpha)
}

/// Single-state chain sitting at the zero field.
pub fn zero_pilot(grid: &Grid, alpha: f64) -> PilotChain {
    build_chain(vec![GridField::zeros(grid)], &[vec![0.0]], alpha).expect("zero pilot is admissible")
}

/// Unidirectional cycle over three states with rate `q` (uniform law,
/// never reversible). States are `n`, `n` shifted by 1/3 and 2/3.
pub fn three_cycle(n: &GridField, q: f64, alpha: f64) -> Result<PilotChain> {
    let d = n.grid().dim();
    let shift = |s: f64| {
        let mut v = vec![s; d];
        if d == 2 {
            v[1] = 0.0;
        }
        n.spectral_shift(&v)
    };
    let states = vec![n.clone(), shift(1.0 / 3.0), shift(2.0 / 3.0)];
    let mut mean = states[0].add(&states[1]).add(&states[2]).scaled(1.0 / 3.0);
    mean = mean.scaled(-1.0);
    let states = states.into_iter().map(|s| s.add(&mean)).collect();
    build_chain(
        states,
        &[vec![-q, q, 0.0], vec![0.0, -q, q], vec![q, 0.0, -q]],
        alpha,
    )
}

/// Random smooth field with modes up to `band`, unit-ish amplitude.
pub fn random_field<R: Rng + ?Sized>(grid: &Grid, band: usize, rng: &mut R) -> GridField {
    let mut modes = ModeSpec::new();
    let b = band as i64;
    if grid.dim() == 1 {
        for k in 1..=b {
            modes.insert(format!("cos:{k}"), rng.random_range(-1.0..1.0) / k as f64);
            modes.insert(format!("sin:{k}"), rng.random_range(-1.0..1.0) / k as f64);
        }
    } else {
        for k0 in -b..=b {
            for k1 in 0..=b {
                if k1 == 0 && k0 <= 0 {
                    continue;
                }
                let s = 1.0 / (k0.abs() + k1) as f64;
                modes.insert(format!("cos:{k0},{k1}"), rng.random_range(-1.0..1.0) * s);
                modes.insert(format!("sin:{k0},{k1}"), rng.random_range(-1.0..1.0) * s);
            }
        }
    }
    GridField::from_modes(grid, &modes).expect("generated modes are well formed")
}

/// Centre random fields against `lambda` and scale them so that the C^3
/// radius equals `radius`.
fn centred_states<R: Rng + ?Sized>(grid: &Grid, lambda: &[f64], band: usize, radius: f64, rng: &mut R) -> Vec<GridField> {
    let raw: Vec<GridField> = lambda.iter().map(|_| random_field(grid, band, rng)).collect();
    let mut mean = GridField::zeros(grid);
    for (s, &l) in raw.iter().zip(lambda) {
        mean.axpy(l, s);
    }
    let centred: Vec<GridField> = raw.iter().map(|s| s.sub(&mean)).collect();
    let r = centred.iter().map(GridField::c3_norm).fold(0.0, f64::max);
    if r == 0.0 {
        return centred;
    }
    centred.iter().map(|s| s.scaled(radius / r)).collect()
}

/// Random reversible chain: a random law `lambda` and symmetric
/// conductances `S_ij`, with `Q_ij = S_ij / lambda_i`.
pub fn random_reversible<R: Rng + ?Sized>(
    grid: &Grid,
    n_states: usize,
    alpha: f64,
    rng: &mut R,
) -> Result<PilotChain> {
    let mut lam: Vec<f64> = (0..n_states).map(|_| rng.random_range(0.5..1.5)).collect();
    let total: f64 = lam.iter().sum();
    lam.iter_mut().for_each(|l| *l /= total);
    let mut q = DMatrix::zeros(n_states, n_states);
    for i in 0..n_states {
        for j in (i + 1)..n_states {
            let s = rng.random_range(0.05..1.0) / n_states as f64;
            q[(i, j)] = s / lam[i];
            q[(j, i)] = s / lam[j];
        }
    }
    for i in 0..n_states {
        let row: f64 = (0..n_states).filter(|&j| j != i).map(|j| q[(i, j)]).sum();
        q[(i, i)] = -row;
    }
    let exact = stationary_law(&q)?;
    let radius = rng.random_range(0.3..0.95) * alpha / 4.0;
    let band = pilot_band(grid).min(3);
    let states = if n_states == 1 {
        vec![GridField::zeros(grid)]
    } else {
        centred_states(grid, &exact, band, radius, rng)
    };
    PilotChain::new(states, q, alpha)
}

/// Random irreducible chain with no symmetry imposed on the rates.
pub fn random_chain<R: Rng + ?Sized>(grid: &Grid, n_states: usize, alpha: f64, rng: &mut R) -> Result<PilotChain> {
    let mut q = DMatrix::zeros(n_states, n_states);
    for i in 0..n_states {
        for j in 0..n_states {
            if i != j {
                q[(i, j)] = rng.random_range(0.05..2.0) / n_states as f64;
            }
        }
        let row: f64 = (0..n_states).filter(|&j| j != i).map(|j| q[(i, j)]).sum();
        q[(i, i)] = -row;
    }
    let lam = stationary_law(&q)?;
    let radius = rng.random_range(0.3..0.95) * alpha / 4.0;
    let band = pilot_band(grid).min(3);
    let states = if n_states == 1 {
        vec![GridField::zeros(grid)]
    } else {
        centred_states(grid, &lam, band, radius, rng)
    };
    PilotChain::new(states, q, alpha)
}

/// Exact update of `w' = m - w` over `dt` with `m` frozen.
pub fn ou_filter_step(w: &GridField, m: &GridField, dt: f64) -> GridField {
    if dt == 0.0 {
        return w.clone();
    }
    let decay = (-dt).exp();
    w.zip_with(m, |wv, mv| mv + decay * (wv - mv))
}
