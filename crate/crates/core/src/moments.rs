//! Velocity moments, the relaxation operator and phase-space fields.

use crate::error::{Error, Result};
use crate::grid::{Grid, GridField, VectorField};
use crate::velocity::{SmallMat, VelocityModel};

/// First three moments `rho = <f>`, `J = <v f>`, `K = <v (x) v f>`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Moments {
    pub rho: f64,
    pub j: [f64; 2],
    pub k: SmallMat,
}

fn check_len(n: usize, model: &VelocityModel) -> Result<()> {
    if n != model.len() {
        return Err(Error::Shape(format!(
            "profile has {n} entries, velocity model has {}",
            model.len()
        )));
    }
    Ok(())
}

/// Moments of an x-independent velocity profile.
pub fn moments(f: &[f64], model: &VelocityModel) -> Result<Moments> {
    check_len(f.len(), model)?;
    let d = model.dim();
    let mut m = Moments {
        rho: 0.0,
        j: [0.0; 2],
        k: [[0.0; 2]; 2],
    };
    for (jv, &fj) in f.iter().enumerate() {
        let w = model.weights()[jv] * fj;
        let v = model.velocity(jv);
        m.rho += w;
        for a in 0..d {
            m.j[a] += w * v[a];
            for b in 0..d {
                m.k[a][b] += w * v[a] * v[b];
            }
        }
    }
    Ok(m)
}

/// `L f = rho(f) M - f`.
pub fn relaxation(f: &[f64], model: &VelocityModel) -> Result<Vec<f64>> {
    let rho = moments(f, model)?.rho;
    Ok(f.iter()
        .zip(model.equilibrium())
        .map(|(&fj, &mj)| rho * mj - fj)
        .collect())
}

/// Distribution `f(x, v_j)` stored as one grid field per velocity.
#[derive(Debug, Clone, PartialEq)]
pub struct PhaseField {
    slices: Vec<GridField>,
}

impl PhaseField {
    pub fn new(slices: Vec<GridField>, model: &VelocityModel) -> Result<Self> {
        check_len(slices.len(), model)?;
        let g = slices[0].grid().clone();
        for s in &slices[1..] {
            g.same_as(s.grid())?;
        }
        if g.dim() != model.dim() {
            return Err(Error::Shape(format!(
                "grid dimension {} differs from velocity dimension {}",
                g.dim(),
                model.dim()
            )));
        }
        Ok(Self { slices })
    }

    pub fn from_fn(grid: &Grid, model: &VelocityModel, f: impl Fn([f64; 2], usize) -> f64) -> Result<Self> {
        let slices = (0..model.len())
            .map(|j| GridField::from_fn(grid, |x| f(x, j)))
            .collect();
        Self::new(slices, model)
    }

    /// `rho(x) M_j` for a given density.
    pub fn local_equilibrium(rho: &GridField, model: &VelocityModel) -> Self {
        Self {
            slices: model.equilibrium().iter().map(|&m| rho.scaled(m)).collect(),
        }
    }

    /// `rho(x) P_j(x)` for an x-dependent profile `P`.
    pub fn weighted(rho: &GridField, profile: &PhaseField) -> Self {
        Self {
            slices: profile.slices.iter().map(|p| p.mul(rho)).collect(),
        }
    }

    pub fn grid(&self) -> &Grid {
        self.slices[0].grid()
    }

    pub fn slices(&self) -> &[GridField] {
        &self.slices
    }

    pub fn slices_mut(&mut self) -> &mut [GridField] {
        &mut self.slices
    }

    pub fn slice(&self, j: usize) -> &GridField {
        &self.slices[j]
    }

    pub fn rho(&self, model: &VelocityModel) -> GridField {
        let mut out = GridField::zeros(self.grid());
        for (s, &w) in self.slices.iter().zip(model.weights()) {
            out.axpy(w, s);
        }
        out
    }

    pub fn current(&self, model: &VelocityModel) -> VectorField {
        VectorField::new(
            (0..model.dim())
                .map(|a| {
                    let mut c = GridField::zeros(self.grid());
                    for (j, s) in self.slices.iter().enumerate() {
                        c.axpy(model.weights()[j] * model.velocity(j)[a], s);
                    }
                    c
                })
                .collect(),
        )
    }

    /// Second moment `K(f)[a][b]`.
    pub fn second_moment(&self, model: &VelocityModel) -> Vec<Vec<GridField>> {
        let d = model.dim();
        (0..d)
            .map(|a| {
                (0..d)
                    .map(|b| {
                        let mut c = GridField::zeros(self.grid());
                        for (j, s) in self.slices.iter().enumerate() {
                            let v = model.velocity(j);
                            c.axpy(model.weights()[j] * v[a] * v[b], s);
                        }
                        c
                    })
                    .collect()
            })
            .collect()
    }

    /// `∬ f dx dnu`.
    pub fn mass(&self, model: &VelocityModel) -> f64 {
        self.rho(model).mean()
    }

    /// `∬ |f| dx dnu`.
    pub fn l1_norm(&self, model: &VelocityModel) -> f64 {
        self.slices
            .iter()
            .zip(model.weights())
            .map(|(s, &w)| w * s.map(f64::abs).mean())
            .sum()
    }

    /// `(∬ f^2 dx dnu)^(1/2)`.
    pub fn l2_norm(&self, model: &VelocityModel) -> f64 {
        self.slices
            .iter()
            .zip(model.weights())
            .map(|(s, &w)| w * s.l2_inner(s))
            .sum::<f64>()
            .sqrt()
    }

    pub fn min(&self) -> f64 {
        self.slices.iter().map(GridField::min).fold(f64::INFINITY, f64::min)
    }

    pub fn is_finite(&self) -> bool {
        self.slices.iter().all(GridField::is_finite)
    }

    pub fn sub(&self, other: &PhaseField) -> Self {
        Self {
            slices: self.slices.iter().zip(&other.slices).map(|(a, b)| a.sub(b)).collect(),
        }
    }

    pub fn scaled(&self, c: f64) -> Self {
        Self {
            slices: self.slices.iter().map(|s| s.scaled(c)).collect(),
        }
    }

    pub fn axpy(&mut self, c: f64, other: &PhaseField) {
        for (a, b) in self.slices.iter_mut().zip(&other.slices) {
            a.axpy(c, b);
        }
    }

    /// `L f = rho(f) M - f` applied pointwise in x.
    pub fn relaxation(&self, model: &VelocityModel) -> Self {
        let rho = self.rho(model);
        Self {
            slices: self
                .slices
                .iter()
                .zip(model.equilibrium())
                .map(|(s, &m)| rho.scaled(m).sub(s))
                .collect(),
        }
    }
}
