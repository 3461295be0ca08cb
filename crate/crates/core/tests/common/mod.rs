#![allow(dead_code)]

use std::f64::consts::PI;
use std::path::PathBuf;

use dalab::pilot::two_state;
use dalab::velocity::two_speed;
use dalab::{Grid, GridField, PilotChain, VelocityModel};

pub fn grid64() -> Grid {
    Grid::new(1, 64).unwrap()
}

pub fn cos1(g: &Grid) -> GridField {
    GridField::from_fn(g, |x| (2.0 * PI * x[0]).cos())
}

pub fn sin1(g: &Grid) -> GridField {
    GridField::from_fn(g, |x| (2.0 * PI * x[0]).sin())
}

/// The closed-form example: `{+n, -n}` with `n = delta sin 2 pi x`.
pub struct ClosedForm {
    pub grid: Grid,
    pub model: VelocityModel,
    pub chain: PilotChain,
    pub delta: f64,
    pub q: f64,
}

impl ClosedForm {
    pub fn new(delta: f64, q: f64) -> Self {
        let grid = grid64();
        let n = sin1(&grid).scaled(delta);
        let chain = two_state(n, q, 1.0).unwrap();
        Self {
            grid,
            model: two_speed(),
            chain,
            delta,
            q,
        }
    }

    /// `c(x) = chi(n)(x) = 2 pi delta cos 2 pi x`.
    pub fn c(&self) -> GridField {
        cos1(&self.grid).scaled(2.0 * PI * self.delta)
    }

    pub fn c_prime(&self) -> GridField {
        sin1(&self.grid).scaled(-4.0 * PI * PI * self.delta)
    }
}

pub fn fixture(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures").join(format!("{name}.json"))
}

pub fn shipped_config(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../configs").join(format!("{name}.json"))
}
