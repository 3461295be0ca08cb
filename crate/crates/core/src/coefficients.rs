//! Exact coefficients of the limit equation for a finite pilot chain:
//! effective diffusion `K*`, drift `Psi`, their Stratonovich variants, and
//! the covariance operator `S` with its spectral square root.

use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{Grid, GridField, VectorField};
use crate::pilot::PilotChain;
use crate::velocity::{SmallMat, VelocityModel};

/// Largest `d * G` for which the covariance operator is diagonalised densely.
pub const DENSE_LIMIT: usize = 512;
/// Eigenvalues below this are dropped from the noise basis.
pub const RANK_TOL: f64 = 1e-12;
/// Most negative eigenvalue tolerated before clipping.
pub const NEGATIVE_TOL: f64 = -1e-10;
/// Kernel asymmetry tolerated for reversible chains.
pub const ASYMMETRY_TOL: f64 = 1e-8;

/// `chi(n) = K(1) grad n`.
pub fn chi(n: &GridField, model: &VelocityModel) -> VectorField {
    VectorField::apply_matrix(&small_rows(&model.k_one(), model.dim()), &n.gradient())
}

fn small_rows(m: &SmallMat, d: usize) -> Vec<Vec<f64>> {
    (0..d).map(|a| m[a][..d].to_vec()).collect()
}

/// Smallest eigenvalue of the symmetric part of a 1x1 or 2x2 matrix.
pub fn min_sym_eig(a: f64, b: f64, c: f64, dim: usize) -> f64 {
    if dim == 1 {
        a
    } else {
        let m = 0.5 * (a + c);
        let r = (0.25 * (a - c) * (a - c) + b * b).sqrt();
        m - r
    }
}

/// Per-state ingredients shared by the coefficient formulas.
#[derive(Debug, Clone)]
pub struct StateFields {
    pub chi: Vec<VectorField>,
    /// `R_1 chi`.
    pub r1: Vec<VectorField>,
    /// `R_0 chi`.
    pub r0: Vec<VectorField>,
    /// `R_0 R_1 chi`.
    pub r01: Vec<VectorField>,
}

impl StateFields {
    pub fn new(chain: &PilotChain, model: &VelocityModel) -> Result<Self> {
        let chi: Vec<VectorField> = chain.states().iter().map(|n| chi(n, model)).collect();
        let r1 = chain.resolvent(1.0)?.apply(&chi)?;
        let r0res = chain.resolvent(0.0)?;
        let r0 = r0res.apply(&chi)?;
        let r01 = r0res.apply(&r1)?;
        Ok(Self { chi, r1, r0, r01 })
    }
}

/// `K(M) + E[r (x) chi]` as a d x d grid of fields.
fn expectation_outer(chain: &PilotChain, base: &SmallMat, r: &[VectorField], chi: &[VectorField]) -> Vec<Vec<GridField>> {
    let d = chi[0].dim();
    let grid = chain.grid();
    (0..d)
        .map(|a| {
            (0..d)
                .map(|b| {
                    let mut acc = GridField::constant(grid, base[a][b]);
                    for (i, &l) in chain.stationary().iter().enumerate() {
                        acc.axpy(l, &r[i].component(a).mul(chi[i].component(b)));
                    }
                    acc
                })
                .collect()
        })
        .collect()
}

/// `E[div chi * r]`.
fn expectation_drift(chain: &PilotChain, r: &[VectorField], chi: &[VectorField]) -> VectorField {
    let mut acc = VectorField::zeros(chain.grid());
    for (i, &l) in chain.stationary().iter().enumerate() {
        acc.axpy(l, &r[i].times(&chi[i].divergence()));
    }
    acc
}

/// Diagnostics of the covariance operator.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CovarianceReport {
    /// `max |C_ab(x,y) - C_ba(y,x)|` before symmetrisation.
    pub asymmetry: f64,
    /// Smallest eigenvalue before clipping.
    pub min_eigenvalue: f64,
    /// Largest eigenvalue (operator norm).
    pub op_norm: f64,
    /// `max |C_ab(x,y)|`.
    pub max_entry: f64,
    /// `R^2 / gap`.
    pub bound: f64,
    pub rank: usize,
    pub states: usize,
    pub reversible: bool,
    pub dense: bool,
}

/// Limit-equation data on the chain's grid.
#[derive(Debug, Clone)]
pub struct LimitCoefficients {
    grid: Grid,
    pub k_m: SmallMat,
    /// `K*[a][b](x)`.
    pub k_star: Vec<Vec<GridField>>,
    pub psi: VectorField,
    pub k_strato: Vec<Vec<GridField>>,
    pub psi_strato: VectorField,
    /// Retained eigenvalues `mu_k > RANK_TOL`, in decreasing order.
    pub eigenvalues: Vec<f64>,
    /// Eigenvectors, orthonormal in the discrete `[L^2]^d`.
    pub eigenvectors: Vec<VectorField>,
    pub covariance: CovarianceReport,
    /// `min_x` of the smallest eigenvalue of the symmetric part of `K*(x)`.
    pub k_star_margin: f64,
    pub spectral_gap: f64,
}

/// Low-rank factors of the kernel: `C = X B X^T` with `X` the columns
/// `chi_j` (flattened component-major) and `B = G^T Lambda`.
pub fn kernel_factors(chain: &PilotChain, fields: &StateFields) -> (DMatrix<f64>, DMatrix<f64>) {
    let n = chain.len();
    let flat: Vec<Vec<f64>> = fields.chi.iter().map(VectorField::flatten).collect();
    let rows = flat[0].len();
    let x = DMatrix::from_fn(rows, n, |r, j| flat[j][r]);
    let g = chain.group_inverse();
    let lam = chain.stationary();
    let b = DMatrix::from_fn(n, n, |j, i| lam[i] * g[(i, j)]);
    (x, b)
}

/// Dense kernel `C[(a,x),(b,y)] = sum_i lambda_i (R_0 chi_a)_i(x) chi_b,i(y)`,
/// assembled directly from the per-state resolvent fields.
pub fn kernel_dense(chain: &PilotChain, fields: &StateFields) -> DMatrix<f64> {
    let r0: Vec<Vec<f64>> = fields.r0.iter().map(VectorField::flatten).collect();
    let chi: Vec<Vec<f64>> = fields.chi.iter().map(VectorField::flatten).collect();
    let rows = chi[0].len();
    let mut c = DMatrix::zeros(rows, rows);
    for (i, &l) in chain.stationary().iter().enumerate() {
        for p in 0..rows {
            let a = l * r0[i][p];
            if a == 0.0 {
                continue;
            }
            for q in 0..rows {
                c[(p, q)] += a * chi[i][q];
            }
        }
    }
    c
}

pub fn compute_limit_coefficients(chain: &PilotChain, model: &VelocityModel) -> Result<LimitCoefficients> {
    let grid = chain.grid().clone();
    if grid.dim() != model.dim() {
        return Err(Error::Shape(format!(
            "pilot grid has dimension {}, velocity model {}",
            grid.dim(),
            model.dim()
        )));
    }
    let d = grid.dim();
    let fields = StateFields::new(chain, model)?;
    let k_m = model.k_m();
    let k_star = expectation_outer(chain, &k_m, &fields.r01, &fields.chi);
    let psi = expectation_drift(chain, &fields.r01, &fields.chi);
    let k_strato = expectation_outer(chain, &k_m, &fields.r1, &fields.chi);
    let psi_strato = expectation_drift(chain, &fields.r1, &fields.chi);

    let reversible = chain.is_reversible();
    let gap = chain.spectral_gap();
    let bound = if gap.is_finite() {
        chain.radius().powi(2) / gap
    } else {
        0.0
    };

    let (x, b) = kernel_factors(chain, &fields);
    let rows = x.nrows();
    let c = &x * &b * x.transpose();
    let asym = &c - c.transpose();
    let asymmetry = asym.amax();
    let max_entry = c.amax();
    if reversible && asymmetry > ASYMMETRY_TOL {
        return Err(Error::AsymmetricKernel { asymmetry });
    }
    let cell = grid.cell_volume();
    let dense = rows <= DENSE_LIMIT;
    let (mus, vecs): (Vec<f64>, Vec<Vec<f64>>) = if dense {
        let s = (&c + c.transpose()) * (0.5 * cell);
        let eig = SymmetricEigen::new(s);
        let scale = 1.0 / cell.sqrt();
        (
            eig.eigenvalues.iter().copied().collect(),
            (0..rows)
                .map(|k| eig.eigenvectors.column(k).iter().map(|v| v * scale).collect())
                .collect(),
        )
    } else {
        low_rank_eigen(&x, &b, cell)
    };
    let mut min_eigenvalue = mus.iter().copied().fold(f64::INFINITY, f64::min);
    if rows > mus.len() {
        // the low-rank path leaves the orthogonal complement implicit (zero)
        min_eigenvalue = min_eigenvalue.min(0.0);
    }
    if min_eigenvalue < NEGATIVE_TOL {
        return Err(Error::NegativeSpectrum { value: min_eigenvalue });
    }
    let mut order: Vec<usize> = (0..mus.len()).filter(|&k| mus[k] > RANK_TOL).collect();
    order.sort_by(|&p, &q| mus[q].total_cmp(&mus[p]));
    let eigenvectors: Vec<VectorField> = order
        .iter()
        .map(|&k| VectorField::from_flat(&grid, &vecs[k]))
        .collect::<Result<_>>()?;
    let eigenvalues: Vec<f64> = order.iter().map(|&k| mus[k]).collect();
    let op_norm = eigenvalues.first().copied().unwrap_or(0.0);

    let mut k_star_margin = f64::INFINITY;
    for p in 0..grid.len() {
        let e = |a: usize, b: usize| k_star[a][b].values()[p];
        let m = if d == 1 {
            e(0, 0)
        } else {
            min_sym_eig(e(0, 0), 0.5 * (e(0, 1) + e(1, 0)), e(1, 1), 2)
        };
        k_star_margin = k_star_margin.min(m);
    }
    if !(k_star_margin > 0.0) {
        return Err(Error::NotPositiveDefinite(format!(
            "smallest eigenvalue of K* is {k_star_margin:e}"
        )));
    }

    Ok(LimitCoefficients {
        grid,
        k_m,
        k_star,
        psi,
        k_strato,
        psi_strato,
        covariance: CovarianceReport {
            asymmetry,
            min_eigenvalue,
            op_norm,
            max_entry,
            bound,
            rank: eigenvalues.len(),
            states: chain.len(),
            reversible,
            dense,
        },
        eigenvalues,
        eigenvectors,
        k_star_margin,
        spectral_gap: gap,
    })
}

/// Eigenpairs of `cell * sym(X B X^T)` through a weighted QR of `X`.
fn low_rank_eigen(x: &DMatrix<f64>, b: &DMatrix<f64>, cell: f64) -> (Vec<f64>, Vec<Vec<f64>>) {
    let qr = (x * cell.sqrt()).qr();
    let q = qr.q();
    let r = qr.r();
    let bs = (b + b.transpose()) * 0.5;
    let small = &r * bs * r.transpose();
    let eig = SymmetricEigen::new(small);
    let scale = 1.0 / cell.sqrt();
    let vecs = (0..eig.eigenvalues.len())
        .map(|k| {
            let v = &q * eig.eigenvectors.column(k);
            v.iter().map(|e| e * scale).collect()
        })
        .collect();
    (eig.eigenvalues.iter().copied().collect(), vecs)
}

impl LimitCoefficients {
    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    pub fn dim(&self) -> usize {
        self.grid.dim()
    }

    pub fn rank(&self) -> usize {
        self.eigenvalues.len()
    }

    /// Coefficients of the deterministic equation `d_t rho = div(K(M) grad rho)`.
    pub fn plain(&self) -> Self {
        let d = self.dim();
        let constant = |m: &SmallMat| -> Vec<Vec<GridField>> {
            (0..d)
                .map(|a| (0..d).map(|b| GridField::constant(&self.grid, m[a][b])).collect())
                .collect()
        };
        Self {
            grid: self.grid.clone(),
            k_m: self.k_m,
            k_star: constant(&self.k_m),
            psi: VectorField::zeros(&self.grid),
            k_strato: constant(&self.k_m),
            psi_strato: VectorField::zeros(&self.grid),
            eigenvalues: Vec::new(),
            eigenvectors: Vec::new(),
            covariance: CovarianceReport {
                rank: 0,
                op_norm: 0.0,
                ..self.covariance
            },
            k_star_margin: min_sym_eig(self.k_m[0][0], self.k_m[0][1], self.k_m[1][1], d),
            spectral_gap: self.spectral_gap,
        }
    }

    /// Same drift and diffusion, no noise.
    pub fn without_noise(&self) -> Self {
        let mut c = self.clone();
        c.eigenvalues.clear();
        c.eigenvectors.clear();
        c
    }

    /// `S u = sum mu_k <u, p_k> p_k` (symmetrised operator).
    pub fn apply_s(&self, u: &VectorField) -> VectorField {
        self.spectral_apply(u, |m| m)
    }

    /// `S^{1/2} u = sum sqrt(mu_k) <u, p_k> p_k`.
    pub fn apply_sqrt(&self, u: &VectorField) -> VectorField {
        self.spectral_apply(u, f64::sqrt)
    }

    fn spectral_apply(&self, u: &VectorField, f: impl Fn(f64) -> f64) -> VectorField {
        let mut out = VectorField::zeros(&self.grid);
        for (mu, p) in self.eigenvalues.iter().zip(&self.eigenvectors) {
            out.axpy(f(*mu) * u.l2_inner(p), p);
        }
        out
    }

    /// Matrix of `S^{1/2}` acting on flattened fields with quadrature.
    pub fn sqrt_matrix(&self) -> DMatrix<f64> {
        let rows = self.dim() * self.grid.len();
        let cell = self.grid.cell_volume();
        let mut m = DMatrix::zeros(rows, rows);
        for (mu, p) in self.eigenvalues.iter().zip(&self.eigenvectors) {
            let v = DMatrix::from_column_slice(rows, 1, &p.flatten());
            m += &v * v.transpose() * (mu.sqrt() * cell);
        }
        m
    }

    /// `min_x` smallest eigenvalue of `sym(K*(x) - K(M))` and its field.
    pub fn enhancement(&self) -> (f64, GridField) {
        let d = self.dim();
        let field = GridField::from_values(
            &self.grid,
            (0..self.grid.len())
                .map(|p| {
                    let e = |a: usize, b: usize| self.k_star[a][b].values()[p] - self.k_m[a][b];
                    if d == 1 {
                        e(0, 0)
                    } else {
                        min_sym_eig(e(0, 0), 0.5 * (e(0, 1) + e(1, 0)), e(1, 1), 2)
                    }
                })
                .collect(),
        )
        .expect("finite coefficients");
        (field.min(), field)
    }

    pub fn bundle(&self) -> CoefficientBundle {
        let mat = |m: &Vec<Vec<GridField>>| -> Vec<Vec<Vec<f64>>> {
            m.iter()
                .map(|row| row.iter().map(|f| f.values().to_vec()).collect())
                .collect()
        };
        let vec_f = |v: &VectorField| -> Vec<Vec<f64>> {
            v.components().iter().map(|c| c.values().to_vec()).collect()
        };
        let d = self.dim();
        CoefficientBundle {
            schema: BUNDLE_SCHEMA.to_string(),
            dim: d,
            resolution: self.grid.resolution(),
            k_m: small_rows(&self.k_m, d),
            k_star: mat(&self.k_star),
            psi: vec_f(&self.psi),
            k_strato: mat(&self.k_strato),
            psi_strato: vec_f(&self.psi_strato),
            eigenvalues: self.eigenvalues.clone(),
            eigenvectors: self.eigenvectors.iter().map(VectorField::flatten).collect(),
            covariance: self.covariance,
            k_star_margin: self.k_star_margin,
            spectral_gap: if self.spectral_gap.is_finite() {
                Some(self.spectral_gap)
            } else {
                None
            },
        }
    }
}

pub const BUNDLE_SCHEMA: &str = "dalab.coefficients/1";

/// JSON form of [`LimitCoefficients`]; fields are row-major per component.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoefficientBundle {
    pub schema: String,
    pub dim: usize,
    pub resolution: usize,
    pub k_m: Vec<Vec<f64>>,
    pub k_star: Vec<Vec<Vec<f64>>>,
    pub psi: Vec<Vec<f64>>,
    pub k_strato: Vec<Vec<Vec<f64>>>,
    pub psi_strato: Vec<Vec<f64>>,
    pub eigenvalues: Vec<f64>,
    pub eigenvectors: Vec<Vec<f64>>,
    pub covariance: CovarianceReport,
    pub k_star_margin: f64,
    /// Absent for a single-state chain (infinite gap).
    pub spectral_gap: Option<f64>,
}

impl CoefficientBundle {
    pub fn into_coefficients(self) -> Result<LimitCoefficients> {
        if self.schema != BUNDLE_SCHEMA {
            return Err(Error::InvalidArgument(format!("unknown bundle schema `{}`", self.schema)));
        }
        let grid = Grid::new(self.dim, self.resolution)?;
        let d = self.dim;
        let field = |v: Vec<f64>| GridField::from_values(&grid, v);
        let mat = |m: Vec<Vec<Vec<f64>>>| -> Result<Vec<Vec<GridField>>> {
            if m.len() != d || m.iter().any(|r| r.len() != d) {
                return Err(Error::Shape("matrix field has wrong shape".into()));
            }
            m.into_iter()
                .map(|row| row.into_iter().map(field).collect())
                .collect()
        };
        let vecf = |v: Vec<Vec<f64>>| -> Result<VectorField> {
            if v.len() != d {
                return Err(Error::Shape("vector field has wrong shape".into()));
            }
            Ok(VectorField::new(v.into_iter().map(field).collect::<Result<_>>()?))
        };
        let mut k_m = [[0.0; 2]; 2];
        for a in 0..d {
            for b in 0..d {
                k_m[a][b] = self.k_m[a][b];
            }
        }
        if self.eigenvalues.len() != self.eigenvectors.len() {
            return Err(Error::Shape("eigenvalue and eigenvector counts differ".into()));
        }
        Ok(LimitCoefficients {
            k_m,
            k_star: mat(self.k_star)?,
            psi: vecf(self.psi)?,
            k_strato: mat(self.k_strato)?,
            psi_strato: vecf(self.psi_strato)?,
            eigenvalues: self.eigenvalues,
            eigenvectors: self
                .eigenvectors
                .iter()
                .map(|v| VectorField::from_flat(&grid, v))
                .collect::<Result<_>>()?,
            covariance: self.covariance,
            k_star_margin: self.k_star_margin,
            spectral_gap: self.spectral_gap.unwrap_or(f64::INFINITY),
            grid,
        })
    }
}

/// Outcome of the enhanced-diffusion check.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnhancementReport {
    pub reversible: bool,
    /// `min_x lambda_min(sym(K*(x) - K(M)))`.
    pub min_eigenvalue: f64,
    /// Pointwise smallest eigenvalue, row-major.
    pub field: Vec<f64>,
    /// `Some(pass)` for reversible chains, `None` otherwise.
    pub passed: Option<bool>,
}

pub fn enhanced_diffusion_check(coeffs: &LimitCoefficients, chain: &PilotChain) -> EnhancementReport {
    let (min_eigenvalue, field) = coeffs.enhancement();
    let reversible = chain.is_reversible();
    EnhancementReport {
        reversible,
        min_eigenvalue,
        field: field.into_values(),
        passed: reversible.then_some(min_eigenvalue >= -1e-10),
    }
}
