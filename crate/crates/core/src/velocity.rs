//! Discrete velocity models `(V, nu, M)` and their validation.

use std::f64::consts::PI;
use std::sync::{Arc, OnceLock};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Hypothesis, Result};
use crate::registry::Registry;

/// Tolerance applied to every moment identity.
pub const MOMENT_TOL: f64 = 1e-12;

/// Small dense matrix; only the leading `d x d` block is meaningful.
pub type SmallMat = [[f64; 2]; 2];

/// Validated finite velocity model.
#[derive(Debug, Clone, PartialEq)]
pub struct VelocityModel {
    dim: usize,
    velocities: Vec<[f64; 2]>,
    weights: Vec<f64>,
    equilibrium: Vec<f64>,
    alpha: f64,
    k_one: SmallMat,
    k_m: SmallMat,
}

/// Serialised form of a velocity model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VelocityModelRecord {
    pub velocities: Vec<Vec<f64>>,
    pub weights: Vec<f64>,
    pub equilibrium: Vec<f64>,
    pub alpha: f64,
}

fn vdv(detail: String) -> Error {
    Error::inadmissible(Hypothesis::Vdv, detail)
}

/// Validate and build a velocity model.
///
/// Velocity sets must be symmetric (`v` and `-v` both present with equal
/// weight and equal `M`); the moment identities are then re-checked by
/// direct summation at [`MOMENT_TOL`].
pub fn make_velocity_model(
    velocities: &[Vec<f64>],
    weights: &[f64],
    equilibrium: &[f64],
    alpha: f64,
) -> Result<VelocityModel> {
    let n = velocities.len();
    if n == 0 || weights.len() != n || equilibrium.len() != n {
        return Err(Error::Shape(format!(
            "velocity model needs equal non-empty lists (velocities {n}, weights {}, equilibrium {})",
            weights.len(),
            equilibrium.len()
        )));
    }
    let dim = velocities[0].len();
    if dim != 1 && dim != 2 {
        return Err(Error::InvalidArgument(format!("velocity dimension must be 1 or 2, got {dim}")));
    }
    if !(alpha > 0.0 && alpha <= 1.0) {
        return Err(Error::InvalidArgument(format!("alpha must lie in (0, 1], got {alpha}")));
    }
    let mut vs = Vec::with_capacity(n);
    for (j, v) in velocities.iter().enumerate() {
        if v.len() != dim {
            return Err(Error::Shape(format!("velocity {j} has {} components, expected {dim}", v.len())));
        }
        if v.iter().any(|c| !c.is_finite()) || !weights[j].is_finite() || !equilibrium[j].is_finite() {
            return Err(Error::NonFinite(format!("velocity model entry {j}")));
        }
        if weights[j] <= 0.0 {
            return Err(Error::InvalidArgument(format!("weight {j} = {} is not positive", weights[j])));
        }
        let norm = v.iter().map(|c| c * c).sum::<f64>().sqrt();
        if norm > 1.0 + MOMENT_TOL {
            return Err(vdv(format!("|v_{j}| = {norm} exceeds 1")));
        }
        vs.push([v[0], if dim == 2 { v[1] } else { 0.0 }]);
    }
    for (j, &m) in equilibrium.iter().enumerate() {
        if m < alpha - MOMENT_TOL || m > 1.0 / alpha + MOMENT_TOL {
            return Err(Error::inadmissible(
                Hypothesis::HypM,
                format!("M_{j} = {m} outside [{alpha}, {}]", 1.0 / alpha),
            ));
        }
    }

    let sum = |f: &dyn Fn(usize) -> f64| (0..n).map(|j| weights[j] * f(j)).sum::<f64>();
    let check = |name: &str, value: f64, target: f64| -> Result<()> {
        if (value - target).abs() > MOMENT_TOL {
            Err(vdv(format!("{name} = {value:e}, expected {target}")))
        } else {
            Ok(())
        }
    };
    check("sum nu", sum(&|_| 1.0), 1.0)?;
    check("sum nu M", sum(&|j| equilibrium[j]), 1.0)?;
    for a in 0..dim {
        check(&format!("sum nu v_{a}"), sum(&|j| vs[j][a]), 0.0)?;
        check(&format!("sum nu v_{a} M"), sum(&|j| vs[j][a] * equilibrium[j]), 0.0)?;
        for b in 0..dim {
            for c in 0..dim {
                check(
                    &format!("sum nu v_{a} v_{b} v_{c} M"),
                    sum(&|j| vs[j][a] * vs[j][b] * vs[j][c] * equilibrium[j]),
                    0.0,
                )?;
                check(
                    &format!("sum nu v_{a} v_{b} v_{c}"),
                    sum(&|j| vs[j][a] * vs[j][b] * vs[j][c]),
                    0.0,
                )?;
            }
        }
    }
    // symmetry of (V, nu, M) under v -> -v
    for j in 0..n {
        let partner = (0..n).find(|&i| {
            (vs[i][0] + vs[j][0]).abs() <= MOMENT_TOL && (vs[i][1] + vs[j][1]).abs() <= MOMENT_TOL
        });
        match partner {
            Some(i)
                if (weights[i] - weights[j]).abs() <= MOMENT_TOL
                    && (equilibrium[i] - equilibrium[j]).abs() <= MOMENT_TOL => {}
            _ => {
                return Err(vdv(format!(
                    "velocity set is not symmetric: no mirror of v_{j} with equal weight and M"
                )))
            }
        }
    }

    let second = |g: &dyn Fn(usize) -> f64| {
        let mut k = [[0.0; 2]; 2];
        for a in 0..dim {
            for b in 0..dim {
                k[a][b] = sum(&|j| vs[j][a] * vs[j][b] * g(j));
            }
        }
        k
    };
    let k_one = second(&|_| 1.0);
    let k_m = second(&|j| equilibrium[j]);
    if !spd(&k_m, dim) {
        return Err(vdv("K(M) is not positive definite".into()));
    }
    Ok(VelocityModel {
        dim,
        velocities: vs,
        weights: weights.to_vec(),
        equilibrium: equilibrium.to_vec(),
        alpha,
        k_one,
        k_m,
    })
}

fn spd(k: &SmallMat, dim: usize) -> bool {
    if dim == 1 {
        k[0][0] > 0.0
    } else {
        k[0][0] > 0.0 && k[0][0] * k[1][1] - k[0][1] * k[1][0] > 0.0
    }
}

impl VelocityModel {
    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    pub fn velocity(&self, j: usize) -> &[f64] {
        &self.velocities[j][..self.dim]
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn equilibrium(&self) -> &[f64] {
        &self.equilibrium
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    /// `K(1) = sum nu v (x) v`.
    pub fn k_one(&self) -> SmallMat {
        self.k_one
    }

    /// `K(M) = sum nu v (x) v M`.
    pub fn k_m(&self) -> SmallMat {
        self.k_m
    }

    pub fn record(&self) -> VelocityModelRecord {
        VelocityModelRecord {
            velocities: (0..self.len()).map(|j| self.velocity(j).to_vec()).collect(),
            weights: self.weights.clone(),
            equilibrium: self.equilibrium.clone(),
            alpha: self.alpha,
        }
    }
}

impl VelocityModelRecord {
    pub fn build(&self) -> Result<VelocityModel> {
        make_velocity_model(&self.velocities, &self.weights, &self.equilibrium, self.alpha)
    }
}

/// Largest admissible `alpha` for a given equilibrium profile.
pub fn natural_alpha(equilibrium: &[f64]) -> f64 {
    equilibrium
        .iter()
        .fold(1.0f64, |a, &m| a.min(m).min(1.0 / m))
}

/// Named family of symmetric velocity models.
///
/// `anisotropy` perturbs `M` by an even profile of zero mean; families that
/// admit no such perturbation reject non-zero values.
pub trait VelocityFamily: Send + Sync {
    fn dim(&self) -> usize;
    fn describe(&self) -> &'static str;
    fn build(&self, anisotropy: f64, alpha: Option<f64>) -> Result<VelocityModel>;
}

fn finish(vs: Vec<Vec<f64>>, m: Vec<f64>, alpha: Option<f64>) -> Result<VelocityModel> {
    let w = vec![1.0 / vs.len() as f64; vs.len()];
    let alpha = alpha.unwrap_or_else(|| natural_alpha(&m));
    make_velocity_model(&vs, &w, &m, alpha)
}

struct TwoSpeed;

impl VelocityFamily for TwoSpeed {
    fn dim(&self) -> usize {
        1
    }
    fn describe(&self) -> &'static str {
        "1-d, V = {+1, -1}, uniform weights, M = 1"
    }
    fn build(&self, anisotropy: f64, alpha: Option<f64>) -> Result<VelocityModel> {
        if anisotropy != 0.0 {
            return Err(Error::InvalidArgument(
                "two-speed model has no even zero-mean perturbation of M".into(),
            ));
        }
        finish(vec![vec![1.0], vec![-1.0]], vec![1.0, 1.0], alpha)
    }
}

struct FourSpeed;

impl VelocityFamily for FourSpeed {
    fn dim(&self) -> usize {
        1
    }
    fn describe(&self) -> &'static str {
        "1-d, V = {+-1, +-1/2}, uniform weights, M = 1 + a on the fast pair and 1 - a on the slow pair"
    }
    fn build(&self, a: f64, alpha: Option<f64>) -> Result<VelocityModel> {
        let vs = vec![vec![1.0], vec![-1.0], vec![0.5], vec![-0.5]];
        finish(vs, vec![1.0 + a, 1.0 + a, 1.0 - a, 1.0 - a], alpha)
    }
}

struct Square;

impl VelocityFamily for Square {
    fn dim(&self) -> usize {
        2
    }
    fn describe(&self) -> &'static str {
        "2-d, V = {+-e1, +-e2}, uniform weights, M = 1 + a (v1^2 - v2^2)"
    }
    fn build(&self, a: f64, alpha: Option<f64>) -> Result<VelocityModel> {
        let vs = vec![vec![1.0, 0.0], vec![-1.0, 0.0], vec![0.0, 1.0], vec![0.0, -1.0]];
        finish(vs, vec![1.0 + a, 1.0 + a, 1.0 - a, 1.0 - a], alpha)
    }
}

struct Octagon;

impl VelocityFamily for Octagon {
    fn dim(&self) -> usize {
        2
    }
    fn describe(&self) -> &'static str {
        "2-d, eight unit velocities at angles k pi/4, uniform weights, M = 1 + a cos(2 theta)"
    }
    fn build(&self, a: f64, alpha: Option<f64>) -> Result<VelocityModel> {
        let (vs, m): (Vec<_>, Vec<_>) = (0..8)
            .map(|k| {
                let t = k as f64 * PI / 4.0;
                let (s, c) = t.sin_cos();
                // snap tiny round-off so mirrored pairs match exactly
                let snap = |x: f64| if x.abs() < 1e-15 { 0.0 } else { x };
                (vec![snap(c), snap(s)], 1.0 + a * snap((2.0 * t).cos()))
            })
            .unzip();
        finish(vs, m, alpha)
    }
}

/// Registry of the built-in velocity families.
pub fn velocity_families() -> &'static Registry<dyn VelocityFamily> {
    static REG: OnceLock<Registry<dyn VelocityFamily>> = OnceLock::new();
    REG.get_or_init(|| {
        let mut r: Registry<dyn VelocityFamily> = Registry::new("velocity model");
        r.register("two-speed", Arc::new(TwoSpeed))
            .register("four-speed", Arc::new(FourSpeed))
            .register("square", Arc::new(Square))
            .register("octagon", Arc::new(Octagon));
        r
    })
}

/// Velocity model as written in a config: a named family or explicit lists.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum VelocitySpec {
    Named {
        family: String,
        #[serde(default)]
        anisotropy: f64,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        alpha: Option<f64>,
    },
    Explicit(VelocityModelRecord),
}

impl VelocitySpec {
    pub fn build(&self) -> Result<VelocityModel> {
        match self {
            VelocitySpec::Named {
                family,
                anisotropy,
                alpha,
            } => velocity_families().get(family)?.build(*anisotropy, *alpha),
            VelocitySpec::Explicit(r) => r.build(),
        }
    }
}

/// Symmetric two-speed model `V = {+1, -1}`, `M = 1`, `alpha = 1`.
pub fn two_speed() -> VelocityModel {
    TwoSpeed.build(0.0, None).expect("two-speed model is valid")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn two_speed_valid() {
        let m = two_speed();
        assert_eq!(m.k_one()[0][0], 1.0);
        assert_eq!(m.k_m()[0][0], 1.0);
        assert_eq!(m.alpha(), 1.0);
    }

    #[test]
    fn asymmetric_equilibrium_rejected() {
        let err = make_velocity_model(&[vec![1.0], vec![-1.0]], &[0.5, 0.5], &[1.2, 0.8], 0.5)
            .unwrap_err();
        assert_eq!(err.hypothesis(), Some(Hypothesis::Vdv));
    }

    #[test]
    fn octagon_moment_sums() {
        for a in [0.0, 0.3, -0.4] {
            let m = velocity_families().get("octagon").unwrap().build(a, None).unwrap();
            let mut s = [0.0; 5];
            for j in 0..m.len() {
                let v = m.velocity(j);
                let (w, mj) = (m.weights()[j], m.equilibrium()[j]);
                s[0] += w;
                s[1] += w * v[0];
                s[2] += w * mj;
                s[3] += w * v[1] * mj;
                s[4] += w * v[0] * v[0] * v[1] * mj;
            }
            assert!((s[0] - 1.0).abs() < 1e-15);
            assert!(s[1].abs() < 1e-15 && s[3].abs() < 1e-15 && s[4].abs() < 1e-15);
            assert!((s[2] - 1.0).abs() < 1e-15);
        }
    }

    #[test]
    fn speed_above_one_rejected() {
        let err = make_velocity_model(&[vec![1.5], vec![-1.5]], &[0.5, 0.5], &[1.0, 1.0], 1.0)
            .unwrap_err();
        assert_eq!(err.hypothesis(), Some(Hypothesis::Vdv));
    }

    #[test]
    fn equilibrium_bounds_enforced() {
        let err = velocity_families()
            .get("four-speed")
            .unwrap()
            .build(0.5, Some(0.8))
            .unwrap_err();
        assert_eq!(err.hypothesis(), Some(Hypothesis::HypM));
    }

    #[test]
    fn record_round_trip() {
        let m = velocity_families().get("square").unwrap().build(0.2, None).unwrap();
        let json = serde_json::to_string(&m.record()).unwrap();
        let back: VelocityModelRecord = serde_json::from_str(&json).unwrap();
        assert_eq!(back.build().unwrap(), m);
    }
}
