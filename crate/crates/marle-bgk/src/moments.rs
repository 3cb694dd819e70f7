//! Macroscopic moments, frame decomposition, and entropy.
//!
//! Conventions (metric signature +---, c = m = k_B = 1):
//!
//! ```text
//! V^mu  = integral of p^mu F / p0,           so V^0 = <F>, V^i = <p^i F / p0>
//! T^munu = integral of (1+I) p^mu p^nu F / p0
//! h0    = -<F ln F>
//! ```
//!
//! Angle brackets denote the grid quadrature with the state density already
//! inside the weights. The Eckart frame is `V^mu = n u^mu`.

use crate::dist::Macrostate;
use crate::error::{Error, Result};
use crate::grid::PhaseGrid;
use crate::juttner;

/// Nodes with `F` at or below this floor contribute zero to `F ln F`,
/// matching the `x ln x -> 0` limit.
pub const ENTROPY_FLOOR: f64 = 1e-300;

/// First and second moments plus entropy density of one fiber field.
#[derive(Clone, Copy, Debug)]
pub struct MomentSet {
    pub v: [f64; 4],
    pub t: [[f64; 4]; 4],
    pub h0: f64,
}

/// Single-pass evaluation of `V^mu`, `T^munu`, and the entropy density.
pub fn compute_moments(grid: &PhaseGrid, values: &[f64]) -> Result<MomentSet> {
    if values.len() != grid.n_nodes {
        return Err(Error::Spec {
            field: "values",
            message: format!("expected {} nodes, got {}", grid.n_nodes, values.len()),
        });
    }
    let mut v = [0.0; 4];
    let mut t = [[0.0; 4]; 4];
    let mut h0 = 0.0;
    for k in 0..grid.n_nodes {
        let f = values[k];
        if !f.is_finite() {
            return Err(Error::NonFinite {
                context: "moment integrand",
            });
        }
        let w = grid.weight[k];
        let fw = f * w;
        let p0 = grid.p0[k];
        let pm = [p0, grid.p[0][k], grid.p[1][k], grid.p[2][k]];
        let opi = 1.0 + grid.i_energy[k];
        v[0] += fw;
        for i in 1..4 {
            v[i] += pm[i] / p0 * fw;
        }
        let c = opi / p0 * fw;
        for mu in 0..4 {
            for nu in mu..4 {
                t[mu][nu] += pm[mu] * pm[nu] * c;
            }
        }
        if f > ENTROPY_FLOOR {
            h0 -= f * f.ln() * w;
        }
    }
    for mu in 0..4 {
        for nu in 0..mu {
            t[mu][nu] = t[nu][mu];
        }
    }
    Ok(MomentSet { v, t, h0 })
}

/// Inverts `V^mu = n u^mu`: `n = sqrt(V.V)`, `u = V_spatial / n`.
pub fn eckart_decompose(m: &MomentSet) -> Result<(f64, [f64; 3])> {
    let v = &m.v;
    let space = v[1] * v[1] + v[2] * v[2] + v[3] * v[3];
    let s = v[0] * v[0] - space;
    if !(s > 0.0 && v[0] > 0.0) {
        return Err(Error::DegenerateMoments {
            v0: v[0],
            v_norm: space.max(0.0).sqrt(),
        });
    }
    let n = s.sqrt();
    Ok((n, [v[1] / n, v[2] / n, v[3] / n]))
}

/// `eta = (1/n) <F / ((1+I) p0)>`, the working variable of the temperature
/// inversion.
pub fn compute_eta(grid: &PhaseGrid, values: &[f64], n: f64) -> Result<f64> {
    if !(n.is_finite() && n > 0.0) {
        return Err(Error::Domain {
            what: "n",
            value: n,
        });
    }
    let eta = grid.integrate_with(values, |k| grid.inv_ip0[k]) / n;
    if !eta.is_finite() {
        return Err(Error::NonFinite { context: "eta" });
    }
    Ok(eta)
}

/// Full macroscopic recovery: Eckart `(n, u)`, then `eta`, then the
/// bracketed `gamma` inversion.
pub fn macrostate_of(grid: &PhaseGrid, values: &[f64]) -> Result<Macrostate> {
    let m = compute_moments(grid, values)?;
    let (n, u) = eckart_decompose(&m)?;
    let eta = compute_eta(grid, values, n)?;
    let gamma = juttner::solve_gamma(grid, eta)?;
    Ok(Macrostate { n, u, gamma, eta })
}

/// Entropy density `-<F ln F>` with the documented floor.
pub fn entropy_density(grid: &PhaseGrid, values: &[f64]) -> f64 {
    debug_assert_eq!(values.len(), grid.n_nodes);
    let mut h0 = 0.0;
    for k in 0..grid.n_nodes {
        let f = values[k];
        if f > ENTROPY_FLOOR {
            h0 -= f * f.ln() * grid.weight[k];
        }
    }
    h0
}
