//! Equilibrium distribution family and perturbation arithmetic.
//!
//! The family is parameterized by number density `n`, spatial four-velocity
//! part `u` (with `u0 = sqrt(1 + |u|^2)` implied), and inverse temperature
//! `gamma`:
//!
//! ```text
//! F(n, u, gamma) = (n / M(gamma)) exp(-gamma (1 + I)(u0 p0 - u . p))
//! ```
//!
//! Exponents are evaluated relative to the grid's smallest `(1+I)p0` so the
//! normalizer never underflows inside the supported `gamma` bracket, and so
//! the `u = 0` evaluation reproduces the global equilibrium bitwise.

use crate::error::{Error, Result};
use crate::grid::PhaseGrid;
use crate::juttner::{self, EquilibriumConstants};
use serde::Serialize;

/// Absolute distribution values on the `(p, I)` fiber (space-homogeneous)
/// in the grid's node order.
#[derive(Clone, Debug)]
pub struct DistributionField {
    pub values: Vec<f64>,
}

/// Perturbation values `f = (F - F0) / sqrt(F0)` in node order.
#[derive(Clone, Debug)]
pub struct PerturbationField {
    pub values: Vec<f64>,
}

/// Macroscopic state of a distribution. `gamma` and `eta` are redundant
/// (`eta_of_gamma(gamma) = eta`); carrying both avoids repeated inversions.
#[derive(Clone, Copy, Debug, Serialize)]
pub struct Macrostate {
    pub n: f64,
    pub u: [f64; 3],
    pub gamma: f64,
    pub eta: f64,
}

impl Macrostate {
    /// Builds a state from `(n, u, gamma)`, filling `eta` from the grid's
    /// own `eta_of_gamma`.
    pub fn with_gamma(grid: &PhaseGrid, n: f64, u: [f64; 3], gamma: f64) -> Result<Self> {
        if !(n.is_finite() && n > 0.0) {
            return Err(Error::Domain {
                what: "n",
                value: n,
            });
        }
        if u.iter().any(|c| !c.is_finite()) {
            return Err(Error::NonFinite {
                context: "four-velocity",
            });
        }
        let eta = juttner::eta_of_gamma(grid, gamma)?;
        Ok(Macrostate { n, u, gamma, eta })
    }

    /// Time component `sqrt(1 + |u|^2)` of the four-velocity.
    pub fn u0(&self) -> f64 {
        (1.0 + self.u[0] * self.u[0] + self.u[1] * self.u[1] + self.u[2] * self.u[2]).sqrt()
    }

    /// Checks the redundant `(gamma, eta)` pair against the grid.
    pub fn validate(&self, grid: &PhaseGrid) -> Result<()> {
        let eta = juttner::eta_of_gamma(grid, self.gamma)?;
        if (eta - self.eta).abs() > 1e-10 * eta.abs() {
            return Err(Error::Domain {
                what: "eta (inconsistent with gamma)",
                value: self.eta,
            });
        }
        Ok(())
    }
}

/// Reference global equilibrium with its scalar constants and the
/// pointwise `F0`, `sqrt(F0)` tables reused across every module.
#[derive(Clone, Debug)]
pub struct GlobalEquilibrium {
    pub consts: EquilibriumConstants,
    pub f0: Vec<f64>,
    pub sqrt_f0: Vec<f64>,
}

/// Builds the normalized global equilibrium at `gamma0`:
/// `F0 = exp(-gamma0 (1+I) p0) / M(gamma0)`, so the grid integral of `F0`
/// is 1 to rounding.
pub fn global_equilibrium(grid: &PhaseGrid, gamma0: f64) -> Result<GlobalEquilibrium> {
    let consts = juttner::equilibrium_constants(grid, gamma0)?;
    let core = juttner::m_core(grid, gamma0)?;
    // Multiply by the reciprocal, matching eval_juttner_into's rounding
    // order so the u = 0 family member reproduces f0 bitwise.
    let inv_m = 1.0 / core.m0;
    let mut f0 = Vec::with_capacity(grid.n_nodes);
    let mut sqrt_f0 = Vec::with_capacity(grid.n_nodes);
    for k in 0..grid.n_nodes {
        let v = (-gamma0 * (grid.ip0[k] - core.shift)).exp() * inv_m;
        f0.push(v);
        sqrt_f0.push(v.sqrt());
    }
    Ok(GlobalEquilibrium {
        consts,
        f0,
        sqrt_f0,
    })
}

/// Evaluates the equilibrium family member for `state` on the grid fiber.
pub fn eval_juttner(grid: &PhaseGrid, state: &Macrostate) -> Result<DistributionField> {
    let mut values = vec![0.0; grid.n_nodes];
    eval_juttner_into(grid, state.n, state.u, state.gamma, &mut values)?;
    Ok(DistributionField { values })
}

/// Slice-level evaluation used by the per-cell equilibrium solver. The
/// positivity guard on `u0 p0 - u . p` cannot fire for finite inputs
/// (Cauchy-Schwarz keeps it above `p0 - |p| > 0`); it catches corrupted
/// node data.
pub(crate) fn eval_juttner_into(
    grid: &PhaseGrid,
    n: f64,
    u: [f64; 3],
    gamma: f64,
    out: &mut [f64],
) -> Result<()> {
    debug_assert_eq!(out.len(), grid.n_nodes);
    let core = juttner::m_core(grid, gamma)?;
    let scale = n / core.m0;
    let u0 = (1.0 + u[0] * u[0] + u[1] * u[1] + u[2] * u[2]).sqrt();
    for k in 0..grid.n_nodes {
        let a = u0 * grid.p0[k] - u[0] * grid.p[0][k] - u[1] * grid.p[1][k] - u[2] * grid.p[2][k];
        if !(a > 0.0) {
            return Err(Error::Domain {
                what: "u^mu p_mu",
                value: a,
            });
        }
        let expo = -gamma * ((1.0 + grid.i_energy[k]) * a - core.shift);
        out[k] = scale * expo.exp();
    }
    Ok(())
}

/// `f = (F - F0) / sqrt(F0)`.
pub fn to_perturbation(eq: &GlobalEquilibrium, f_abs: &DistributionField) -> PerturbationField {
    let values = f_abs
        .values
        .iter()
        .zip(&eq.f0)
        .zip(&eq.sqrt_f0)
        .map(|((f, f0), s)| (f - f0) / s)
        .collect();
    PerturbationField { values }
}

/// `F = F0 + sqrt(F0) f`. May produce negative values; positivity is a
/// diagnostic for the solver, never enforced here.
pub fn from_perturbation(eq: &GlobalEquilibrium, f: &PerturbationField) -> DistributionField {
    let values = f
        .values
        .iter()
        .zip(&eq.f0)
        .zip(&eq.sqrt_f0)
        .map(|((f, f0), s)| f0 + s * f)
        .collect();
    DistributionField { values }
}
