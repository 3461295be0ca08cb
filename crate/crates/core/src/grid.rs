//! Real fields on the periodic unit torus `T^d` (d = 1 or 2) sampled on a
//! uniform grid, with FFT-based differentiation and sub-cell translation.
//!
//! Storage is row-major with axis 0 as the slow index, i.e. the value at
//! `(i0, i1)` lives at `i0 * n + i1` and sits at `x = (i0 / n, i1 / n)`.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::fmt;
use std::sync::Arc;

use num_complex::Complex64;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

struct Plans {
    fwd: Arc<dyn Fft<f64>>,
    inv: Arc<dyn Fft<f64>>,
}

/// Uniform periodic grid with cached FFT plans. Cheap to clone.
#[derive(Clone)]
pub struct Grid {
    dim: usize,
    n: usize,
    plans: Arc<Plans>,
}

impl fmt::Debug for Grid {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Grid")
            .field("dim", &self.dim)
            .field("resolution", &self.n)
            .finish()
    }
}

impl PartialEq for Grid {
    fn eq(&self, other: &Self) -> bool {
        self.dim == other.dim && self.n == other.n
    }
}

impl Grid {
    pub fn new(dim: usize, resolution: usize) -> Result<Self> {
        if dim != 1 && dim != 2 {
            return Err(Error::InvalidArgument(format!(
                "spatial dimension must be 1 or 2, got {dim}"
            )));
        }
        if resolution < 4 || !resolution.is_power_of_two() {
            return Err(Error::InvalidArgument(format!(
                "resolution must be a power of two >= 4, got {resolution}"
            )));
        }
        let mut planner = FftPlanner::new();
        let plans = Plans {
            fwd: planner.plan_fft_forward(resolution),
            inv: planner.plan_fft_inverse(resolution),
        };
        Ok(Self {
            dim,
            n: resolution,
            plans: Arc::new(plans),
        })
    }

    /// Default grid for a dimension: 64 points in 1-d, 32 per axis in 2-d.
    pub fn default_for(dim: usize) -> Result<Self> {
        Self::new(dim, if dim == 2 { 32 } else { 64 })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn resolution(&self) -> usize {
        self.n
    }

    /// Total number of grid points.
    pub fn len(&self) -> usize {
        self.n.pow(self.dim as u32)
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn spacing(&self) -> f64 {
        1.0 / self.n as f64
    }

    /// Quadrature weight of one cell (`h^d`).
    pub fn cell_volume(&self) -> f64 {
        1.0 / self.len() as f64
    }

    /// Default band limit for smooth data: half the Nyquist mode.
    pub fn default_band(&self) -> usize {
        self.n / 4
    }

    pub fn coords(&self, idx: usize) -> [f64; 2] {
        let h = self.spacing();
        if self.dim == 1 {
            [idx as f64 * h, 0.0]
        } else {
            [(idx / self.n) as f64 * h, (idx % self.n) as f64 * h]
        }
    }

    /// Signed integer wavenumber of FFT bin `i`; the Nyquist bin is reported
    /// as `+n/2` with the flag set.
    pub fn wavenumber(&self, i: usize) -> (i64, bool) {
        let n = self.n as i64;
        let i = i as i64;
        if i == n / 2 {
            (i, true)
        } else if i < n / 2 {
            (i, false)
        } else {
            (i - n, false)
        }
    }

    /// Per-point wavenumbers (k0, k1) and Nyquist flags for every spectral bin.
    fn bin(&self, idx: usize) -> ([i64; 2], [bool; 2]) {
        if self.dim == 1 {
            let (k, q) = self.wavenumber(idx);
            ([k, 0], [q, false])
        } else {
            let (k0, q0) = self.wavenumber(idx / self.n);
            let (k1, q1) = self.wavenumber(idx % self.n);
            ([k0, k1], [q0, q1])
        }
    }

    pub fn forward(&self, values: &[f64]) -> Vec<Complex64> {
        let mut buf: Vec<Complex64> = values.iter().map(|&v| Complex64::new(v, 0.0)).collect();
        self.transform(&mut buf, &self.plans.fwd);
        buf
    }

    /// Inverse transform, normalised, keeping the real part.
    pub fn inverse(&self, mut spec: Vec<Complex64>) -> Vec<f64> {
        self.transform(&mut spec, &self.plans.inv);
        let scale = 1.0 / self.len() as f64;
        spec.into_iter().map(|c| c.re * scale).collect()
    }

    fn transform(&self, buf: &mut [Complex64], plan: &Arc<dyn Fft<f64>>) {
        let n = self.n;
        let mut scratch = vec![Complex64::default(); plan.get_inplace_scratch_len()];
        if self.dim == 1 {
            plan.process_with_scratch(buf, &mut scratch);
            return;
        }
        // rows (axis 1), then columns (axis 0) through a transposed copy
        plan.process_with_scratch(buf, &mut scratch);
        let mut t = vec![Complex64::default(); n * n];
        for i in 0..n {
            for j in 0..n {
                t[j * n + i] = buf[i * n + j];
            }
        }
        plan.process_with_scratch(&mut t, &mut scratch);
        for i in 0..n {
            for j in 0..n {
                buf[i * n + j] = t[j * n + i];
            }
        }
    }

    /// Spectral multiplier for the mixed derivative `d^orders[0]/dx0 d^orders[1]/dx1`.
    /// Odd derivatives annihilate the Nyquist bin on that axis.
    fn derivative_multiplier(&self, idx: usize, orders: [u32; 2]) -> Complex64 {
        let (k, nyq) = self.bin(idx);
        let mut m = Complex64::new(1.0, 0.0);
        for a in 0..self.dim {
            let o = orders[a];
            if o == 0 {
                continue;
            }
            if nyq[a] && o % 2 == 1 {
                return Complex64::default();
            }
            m *= Complex64::new(0.0, 2.0 * PI * k[a] as f64).powu(o);
        }
        m
    }

    fn apply_multiplier(&self, values: &[f64], mult: impl Fn(usize) -> Complex64) -> Vec<f64> {
        let mut spec = self.forward(values);
        for (i, c) in spec.iter_mut().enumerate() {
            *c *= mult(i);
        }
        self.inverse(spec)
    }

    fn check_same(&self, other: &Grid) -> Result<()> {
        if self != other {
            return Err(Error::Shape(format!("grid mismatch: {self:?} vs {other:?}")));
        }
        Ok(())
    }
}

/// Fourier-mode dictionary describing a smooth real field.
///
/// Keys are `"const"`, `"cos:k"` / `"sin:k"` in 1-d and `"cos:k0,k1"` /
/// `"sin:k0,k1"` in 2-d; each term contributes `a * cos(2 pi k.x)` or
/// `a * sin(2 pi k.x)`.
pub type ModeSpec = BTreeMap<String, f64>;

#[derive(Debug, Clone, Copy, PartialEq)]
enum ModeKind {
    Const,
    Cos,
    Sin,
}

fn parse_mode(key: &str, dim: usize) -> Result<(ModeKind, [i64; 2])> {
    let bad = || Error::InvalidArgument(format!("bad Fourier mode key `{key}` for dim {dim}"));
    if key == "const" {
        return Ok((ModeKind::Const, [0, 0]));
    }
    let (kind, rest) = key.split_once(':').ok_or_else(bad)?;
    let kind = match kind {
        "cos" => ModeKind::Cos,
        "sin" => ModeKind::Sin,
        _ => return Err(bad()),
    };
    let ks: Vec<i64> = rest
        .split(',')
        .map(|s| s.trim().parse::<i64>().map_err(|_| bad()))
        .collect::<Result<_>>()?;
    if ks.len() != dim {
        return Err(bad());
    }
    Ok((kind, [ks[0], if dim == 2 { ks[1] } else { 0 }]))
}

/// Real scalar field on a periodic grid.
#[derive(Clone, Debug)]
pub struct GridField {
    grid: Grid,
    values: Vec<f64>,
}

impl PartialEq for GridField {
    fn eq(&self, other: &Self) -> bool {
        self.grid == other.grid && self.values == other.values
    }
}

impl GridField {
    pub fn zeros(grid: &Grid) -> Self {
        Self::constant(grid, 0.0)
    }

    pub fn constant(grid: &Grid, c: f64) -> Self {
        Self {
            grid: grid.clone(),
            values: vec![c; grid.len()],
        }
    }

    pub fn from_values(grid: &Grid, values: Vec<f64>) -> Result<Self> {
        if values.len() != grid.len() {
            return Err(Error::Shape(format!(
                "expected {} values, got {}",
                grid.len(),
                values.len()
            )));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("field value at index {i}")));
        }
        Ok(Self {
            grid: grid.clone(),
            values,
        })
    }

    pub fn from_fn(grid: &Grid, f: impl Fn([f64; 2]) -> f64) -> Self {
        let values = (0..grid.len()).map(|i| f(grid.coords(i))).collect();
        Self {
            grid: grid.clone(),
            values,
        }
    }

    pub fn from_modes(grid: &Grid, modes: &ModeSpec) -> Result<Self> {
        let terms: Vec<(ModeKind, [i64; 2], f64)> = modes
            .iter()
            .map(|(k, &a)| {
                if !a.is_finite() {
                    return Err(Error::NonFinite(format!("amplitude of mode `{k}`")));
                }
                parse_mode(k, grid.dim()).map(|(kind, kv)| (kind, kv, a))
            })
            .collect::<Result<_>>()?;
        Ok(Self::from_fn(grid, |x| {
            terms
                .iter()
                .map(|&(kind, k, a)| {
                    let phase = 2.0 * PI * (k[0] as f64 * x[0] + k[1] as f64 * x[1]);
                    match kind {
                        ModeKind::Const => a,
                        ModeKind::Cos => a * phase.cos(),
                        ModeKind::Sin => a * phase.sin(),
                    }
                })
                .sum()
        }))
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    pub fn mean(&self) -> f64 {
        self.values.iter().sum::<f64>() / self.values.len() as f64
    }

    /// Discrete `L^2(T^d)` inner product with cell-volume weights.
    pub fn l2_inner(&self, other: &GridField) -> f64 {
        debug_assert_eq!(self.grid, other.grid);
        self.values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| a * b)
            .sum::<f64>()
            * self.grid.cell_volume()
    }

    pub fn l2_norm(&self) -> f64 {
        self.l2_inner(self).sqrt()
    }

    pub fn max_abs(&self) -> f64 {
        self.values.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn min(&self) -> f64 {
        self.values.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn scaled(&self, c: f64) -> Self {
        self.map(|v| v * c)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            grid: self.grid.clone(),
            values: self.values.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_with(&self, other: &GridField, f: impl Fn(f64, f64) -> f64) -> Self {
        debug_assert_eq!(self.grid, other.grid);
        Self {
            grid: self.grid.clone(),
            values: self
                .values
                .iter()
                .zip(&other.values)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        }
    }

    pub fn add(&self, other: &GridField) -> Self {
        self.zip_with(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &GridField) -> Self {
        self.zip_with(other, |a, b| a - b)
    }

    pub fn mul(&self, other: &GridField) -> Self {
        self.zip_with(other, |a, b| a * b)
    }

    /// `self += c * other`
    pub fn axpy(&mut self, c: f64, other: &GridField) {
        debug_assert_eq!(self.grid, other.grid);
        for (a, b) in self.values.iter_mut().zip(&other.values) {
            *a += c * b;
        }
    }

    /// Mixed partial derivative of the given orders along each axis.
    pub fn derivative(&self, orders: [u32; 2]) -> Self {
        let values = self
            .grid
            .apply_multiplier(&self.values, |i| self.grid.derivative_multiplier(i, orders));
        Self {
            grid: self.grid.clone(),
            values,
        }
    }

    pub fn partial(&self, axis: usize) -> Self {
        let mut o = [0, 0];
        o[axis] = 1;
        self.derivative(o)
    }

    pub fn gradient(&self) -> VectorField {
        VectorField::new((0..self.grid.dim()).map(|a| self.partial(a)).collect())
    }

    /// Hessian entries `[d00, d01, d11]` (2-d) or `[d00]` (1-d).
    pub fn hessian(&self) -> Vec<GridField> {
        if self.grid.dim() == 1 {
            vec![self.derivative([2, 0])]
        } else {
            vec![
                self.derivative([2, 0]),
                self.derivative([1, 1]),
                self.derivative([0, 2]),
            ]
        }
    }

    /// Translate by a real displacement: returns `x -> self(x - s)`.
    ///
    /// Implemented as a phase rotation of every Fourier coefficient. The
    /// Nyquist bin has no real-valued translate and is left untouched, which
    /// keeps the operation unitary and additive in `s`.
    pub fn spectral_shift(&self, displacement: &[f64]) -> Self {
        let grid = &self.grid;
        let values = grid.apply_multiplier(&self.values, |i| {
            let (k, nyq) = grid.bin(i);
            let mut phase = 0.0;
            for a in 0..grid.dim() {
                if !nyq[a] {
                    phase -= 2.0 * PI * k[a] as f64 * displacement[a];
                }
            }
            Complex64::from_polar(1.0, phase)
        });
        Self {
            grid: grid.clone(),
            values,
        }
    }

    /// Grid estimate of `sup_x max_{k<=3} |D^k n(x)|`, where `|D^k n|` is the
    /// Euclidean norm of the k-th derivative tensor.
    pub fn c3_norm(&self) -> f64 {
        let g = &self.grid;
        let spec = g.forward(&self.values);
        let deriv = |orders: [u32; 2]| -> Vec<f64> {
            let s: Vec<Complex64> = spec
                .iter()
                .enumerate()
                .map(|(i, c)| c * g.derivative_multiplier(i, orders))
                .collect();
            g.inverse(s)
        };
        let mut best = self.max_abs();
        for order in 1..=3u32 {
            let mut sq = vec![0.0; g.len()];
            let multi: Vec<([u32; 2], f64)> = if g.dim() == 1 {
                vec![([order, 0], 1.0)]
            } else {
                (0..=order)
                    .map(|a| ([a, order - a], binomial(order, a)))
                    .collect()
            };
            for (orders, mult) in multi {
                for (s, v) in sq.iter_mut().zip(deriv(orders)) {
                    *s += mult * v * v;
                }
            }
            best = sq.into_iter().fold(best, |m, s| m.max(s.sqrt()));
        }
        best
    }

    /// Largest `|k|_inf` carrying a coefficient above `tol` relative to the
    /// largest coefficient. Zero for constant fields.
    pub fn bandwidth(&self, tol: f64) -> usize {
        let g = &self.grid;
        let spec = g.forward(&self.values);
        let peak = spec.iter().fold(0.0f64, |m, c| m.max(c.norm()));
        if peak == 0.0 {
            return 0;
        }
        spec.iter()
            .enumerate()
            .filter(|(_, c)| c.norm() > tol * peak)
            .map(|(i, _)| {
                let (k, _) = g.bin(i);
                k[0].unsigned_abs().max(k[1].unsigned_abs()) as usize
            })
            .max()
            .unwrap_or(0)
    }
}

fn binomial(n: u32, k: u32) -> f64 {
    (0..k).fold(1.0, |acc, i| acc * (n - i) as f64 / (i + 1) as f64)
}

/// Field with `d` components per grid point.
#[derive(Clone, Debug, PartialEq)]
pub struct VectorField {
    components: Vec<GridField>,
}

impl VectorField {
    pub fn new(components: Vec<GridField>) -> Self {
        assert!(!components.is_empty(), "vector field needs at least one component");
        Self { components }
    }

    pub fn zeros(grid: &Grid) -> Self {
        Self::new(vec![GridField::zeros(grid); grid.dim()])
    }

    pub fn grid(&self) -> &Grid {
        self.components[0].grid()
    }

    pub fn dim(&self) -> usize {
        self.components.len()
    }

    pub fn component(&self, a: usize) -> &GridField {
        &self.components[a]
    }

    pub fn components(&self) -> &[GridField] {
        &self.components
    }

    pub fn divergence(&self) -> GridField {
        let mut out = self.components[0].partial(0);
        for (a, c) in self.components.iter().enumerate().skip(1) {
            out.axpy(1.0, &c.partial(a));
        }
        out
    }

    /// Pointwise Euclidean dot product.
    pub fn dot(&self, other: &VectorField) -> GridField {
        let mut out = self.components[0].mul(&other.components[0]);
        for (a, b) in self.components.iter().zip(&other.components).skip(1) {
            out.axpy(1.0, &a.mul(b));
        }
        out
    }

    pub fn l2_inner(&self, other: &VectorField) -> f64 {
        self.components
            .iter()
            .zip(&other.components)
            .map(|(a, b)| a.l2_inner(b))
            .sum()
    }

    pub fn scaled(&self, c: f64) -> Self {
        Self::new(self.components.iter().map(|f| f.scaled(c)).collect())
    }

    /// Multiply every component by a scalar field.
    pub fn times(&self, s: &GridField) -> Self {
        Self::new(self.components.iter().map(|f| f.mul(s)).collect())
    }

    pub fn axpy(&mut self, c: f64, other: &VectorField) {
        for (a, b) in self.components.iter_mut().zip(&other.components) {
            a.axpy(c, b);
        }
    }

    /// Matrix field applied to this vector field: `out_a = sum_b m[a][b] * v_b`.
    pub fn apply_matrix(m: &[Vec<f64>], v: &VectorField) -> VectorField {
        let grid = v.grid().clone();
        VectorField::new(
            (0..v.dim())
                .map(|a| {
                    let mut out = GridField::zeros(&grid);
                    for b in 0..v.dim() {
                        out.axpy(m[a][b], v.component(b));
                    }
                    out
                })
                .collect(),
        )
    }

    /// Gradient matrix `G[b][a] = d_b v_a`.
    pub fn jacobian(&self) -> Vec<Vec<GridField>> {
        (0..self.dim())
            .map(|b| self.components.iter().map(|va| va.partial(b)).collect())
            .collect()
    }

    /// Flattened values, component-major (`d * G` entries).
    pub fn flatten(&self) -> Vec<f64> {
        self.components
            .iter()
            .flat_map(|c| c.values().iter().copied())
            .collect()
    }

    pub fn from_flat(grid: &Grid, flat: &[f64]) -> Result<Self> {
        let g = grid.len();
        if flat.len() != g * grid.dim() {
            return Err(Error::Shape(format!(
                "vector field needs {} values, got {}",
                g * grid.dim(),
                flat.len()
            )));
        }
        Ok(Self::new(
            flat.chunks(g)
                .map(|c| GridField::from_values(grid, c.to_vec()))
                .collect::<Result<_>>()?,
        ))
    }
}

/// Serialised field: dim/resolution header plus row-major values.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct FieldRecord {
    pub dim: usize,
    pub resolution: usize,
    pub values: Vec<f64>,
}

impl From<&GridField> for FieldRecord {
    fn from(f: &GridField) -> Self {
        Self {
            dim: f.grid().dim(),
            resolution: f.grid().resolution(),
            values: f.values().to_vec(),
        }
    }
}

impl FieldRecord {
    pub fn into_field(self) -> Result<GridField> {
        let grid = Grid::new(self.dim, self.resolution)?;
        GridField::from_values(&grid, self.values)
    }
}

impl Grid {
    pub(crate) fn same_as(&self, other: &Grid) -> Result<()> {
        self.check_same(other)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn g1() -> Grid {
        Grid::new(1, 64).unwrap()
    }

    #[test]
    fn rejects_bad_grids() {
        assert!(Grid::new(3, 64).is_err());
        assert!(Grid::new(1, 48).is_err());
        assert!(Grid::new(1, 2).is_err());
    }

    #[test]
    fn gradient_of_sine_matches_analytic() {
        let g = g1();
        let f = GridField::from_fn(&g, |x| (2.0 * PI * x[0]).sin());
        let d = f.gradient();
        let exact = GridField::from_fn(&g, |x| 2.0 * PI * (2.0 * PI * x[0]).cos());
        let err = d.component(0).sub(&exact).max_abs();
        assert!(err < 1e-12, "err = {err:e}");
    }

    #[test]
    fn gradient_2d_is_exact_below_nyquist() {
        let g = Grid::new(2, 16).unwrap();
        let f = GridField::from_fn(&g, |x| (2.0 * PI * (x[0] + 2.0 * x[1])).cos());
        let grad = f.gradient();
        let e0 = GridField::from_fn(&g, |x| -2.0 * PI * (2.0 * PI * (x[0] + 2.0 * x[1])).sin());
        let e1 = e0.scaled(2.0);
        assert!(grad.component(0).sub(&e0).max_abs() < 1e-11);
        assert!(grad.component(1).sub(&e1).max_abs() < 1e-11);
        let div = grad.divergence();
        let lap = f.scaled(-4.0 * PI * PI * 5.0);
        assert!(div.sub(&lap).max_abs() < 1e-9);
    }

    #[test]
    fn zero_shift_is_identity() {
        let g = g1();
        let f = GridField::from_fn(&g, |x| 1.0 + (2.0 * PI * x[0]).cos() + 0.3 * (6.0 * PI * x[0]).sin());
        let s = f.spectral_shift(&[0.0]);
        assert!(s.sub(&f).max_abs() < 1e-15);
    }

    #[test]
    fn shift_translates_trig_polynomial() {
        let g = g1();
        let f = GridField::from_fn(&g, |x| (2.0 * PI * x[0]).sin());
        let s = f.spectral_shift(&[0.1234]);
        let exact = GridField::from_fn(&g, |x| (2.0 * PI * (x[0] - 0.1234)).sin());
        assert!(s.sub(&exact).max_abs() < 1e-13);
    }

    #[test]
    fn unit_inner_product() {
        let g = Grid::new(2, 8).unwrap();
        let one = GridField::constant(&g, 1.0);
        assert!((one.l2_inner(&one) - 1.0).abs() < 1e-15);
    }

    #[test]
    fn c3_norm_of_sine_is_third_derivative_peak() {
        let g = g1();
        let delta = 1e-3;
        let f = GridField::from_fn(&g, |x| delta * (2.0 * PI * x[0]).sin());
        let expected = delta * (2.0 * PI).powi(3);
        assert!((f.c3_norm() - expected).abs() < 1e-12);
        assert_eq!(GridField::zeros(&g).c3_norm(), 0.0);
    }

    #[test]
    fn modes_build_expected_field() {
        let g = g1();
        let mut m = ModeSpec::new();
        m.insert("const".into(), 1.0);
        m.insert("cos:1".into(), 1.0);
        let f = GridField::from_modes(&g, &m).unwrap();
        let exact = GridField::from_fn(&g, |x| 1.0 + (2.0 * PI * x[0]).cos());
        assert!(f.sub(&exact).max_abs() < 1e-15);
        assert_eq!(f.bandwidth(1e-12), 1);
        m.insert("cos:1,1".into(), 1.0);
        assert!(GridField::from_modes(&g, &m).is_err());
    }

    #[test]
    fn non_finite_rejected() {
        let g = g1();
        let mut v = vec![0.0; 64];
        v[3] = f64::NAN;
        assert!(matches!(GridField::from_values(&g, v), Err(Error::NonFinite(_))));
    }
}
