//! Relaxation right-hand side and per-cell local equilibrium.
//!
//! The collision term is `(1/(tau (1+I) p0)) (F_E - F)`. Its five
//! cancellation moments (weights `1` and `(1+I)p^mu`) vanish exactly when
//! `F_E` matches `F` in the equivalent weights `{1/((1+I)p0), 1, p^i/p0}`.
//! The local equilibrium is therefore solved from the grid's own quadrature
//! moments by a damped Newton iteration, never from continuum closed forms;
//! the residual defect is then quadrature-free and limited only by the
//! solver tolerance.

use crate::dist::{self, Macrostate};
use crate::error::{Error, Result};
use crate::grid::PhaseGrid;
use crate::juttner;
use crate::moments;
use serde::{Deserialize, Serialize};

/// Relative moment-matching tolerance of the local-equilibrium solver.
pub const MATCH_TOL: f64 = 1e-13;

/// Time discretization of the relaxation substep.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CollisionMode {
    /// Exact exponential solution with `F_E` frozen at substep start.
    Frozen,
    /// Exponential integrator with `F_E` linear in time, re-solving the
    /// endpoint equilibrium the given number of times. `Picard(0)` is
    /// `Frozen`.
    Picard(u32),
}

/// Matched local equilibrium for one spatial cell.
#[derive(Clone, Debug)]
pub struct LocalEquilibrium {
    pub state: Macrostate,
    pub field: Vec<f64>,
    pub iterations: u32,
    /// Largest matching residual relative to the moment scales.
    pub residual: f64,
}

/// Moments of the relaxation term against `{1, (1+I)p^0, (1+I)p^i}`.
#[derive(Clone, Copy, Debug)]
pub struct ConservationDefect {
    pub absolute: [f64; 5],
    /// Each component divided by the size of the same moment of `|F|`
    /// pushed through the collision frequency, i.e. the magnitude the
    /// moment would have without cancellation.
    pub relative: [f64; 5],
}

impl ConservationDefect {
    pub fn max_relative(&self) -> f64 {
        self.relative.iter().fold(0.0f64, |m, v| m.max(v.abs()))
    }
}

/// The five matching weights `{1, 1/((1+I)p0), p^1/p0, p^2/p0, p^3/p0}`
/// evaluated at one node.
fn match_weights(grid: &PhaseGrid, k: usize) -> [f64; 5] {
    let p0 = grid.p0[k];
    [
        1.0,
        grid.inv_ip0[k],
        grid.p[0][k] / p0,
        grid.p[1][k] / p0,
        grid.p[2][k] / p0,
    ]
}

fn match_moments(grid: &PhaseGrid, f: &[f64]) -> [f64; 5] {
    let mut m = [0.0; 5];
    for k in 0..grid.n_nodes {
        let fw = f[k] * grid.weight[k];
        let psi = match_weights(grid, k);
        for (acc, w) in m.iter_mut().zip(psi) {
            *acc += w * fw;
        }
    }
    m
}

/// Scale of each matching moment: the same quadrature applied to |F|
/// with |weights|. Guards the relative convergence test against zeros.
fn match_scales(grid: &PhaseGrid, f: &[f64]) -> [f64; 5] {
    let mut s = [0.0; 5];
    for k in 0..grid.n_nodes {
        let fw = f[k].abs() * grid.weight[k];
        let psi = match_weights(grid, k);
        for (acc, w) in s.iter_mut().zip(psi) {
            *acc += w.abs() * fw;
        }
    }
    for v in s.iter_mut() {
        *v = v.max(f64::MIN_POSITIVE);
    }
    s
}

/// Solves the grid-moment-matched equilibrium starting from the Eckart
/// macrostate of `f`.
pub fn local_equilibrium(grid: &PhaseGrid, f: &[f64]) -> Result<LocalEquilibrium> {
    local_equilibrium_with_guess(grid, f, None)
}

/// As [`local_equilibrium`], reusing a previous cell state as the Newton
/// starting point (the usual case inside a time loop, where the state
/// moves O(dt) per step).
pub fn local_equilibrium_with_guess(
    grid: &PhaseGrid,
    f: &[f64],
    guess: Option<&Macrostate>,
) -> Result<LocalEquilibrium> {
    let targets = match_moments(grid, f);
    let scales = match_scales(grid, f);
    let start = match guess {
        Some(s) => *s,
        None => moments::macrostate_of(grid, f)?,
    };

    let mut z = [start.n, start.u[0], start.u[1], start.u[2], start.gamma];
    let mut fe = vec![0.0; grid.n_nodes];
    let (mut res, mut max_rel) = residual(grid, &z, &targets, &scales, &mut fe)?;

    let mut iterations = 0u32;
    while max_rel > MATCH_TOL && iterations < 50 {
        let jac = jacobian(grid, &z, &fe);
        let rhs = nalgebra::Vector5::from_column_slice(&res);
        let delta = jac.lu().solve(&-rhs).ok_or(Error::SolveStalled {
            what: "local equilibrium (singular jacobian)",
            iterations: iterations as usize,
            residual: max_rel,
        })?;

        // Backtracking line search on the relative residual.
        let mut alpha = 1.0;
        let mut accepted = false;
        for _ in 0..8 {
            let mut zn = z;
            for j in 0..5 {
                zn[j] += alpha * delta[j];
            }
            if admissible(&zn) {
                if let Ok((rn, mn)) = residual(grid, &zn, &targets, &scales, &mut fe) {
                    if mn < max_rel || mn <= MATCH_TOL {
                        z = zn;
                        res = rn;
                        max_rel = mn;
                        accepted = true;
                        break;
                    }
                }
            }
            alpha *= 0.5;
        }
        iterations += 1;
        if !accepted {
            return Err(Error::SolveStalled {
                what: "local equilibrium (line search)",
                iterations: iterations as usize,
                residual: max_rel,
            });
        }
    }
    if max_rel > MATCH_TOL {
        return Err(Error::SolveStalled {
            what: "local equilibrium",
            iterations: iterations as usize,
            residual: max_rel,
        });
    }
    // Re-evaluate the field at the accepted state (fe already holds it:
    // residual() always evaluates before returning).
    let eta = juttner::eta_of_gamma(grid, z[4])?;
    Ok(LocalEquilibrium {
        state: Macrostate {
            n: z[0],
            u: [z[1], z[2], z[3]],
            gamma: z[4],
            eta,
        },
        field: fe,
        iterations,
        residual: max_rel,
    })
}

fn admissible(z: &[f64; 5]) -> bool {
    z.iter().all(|v| v.is_finite())
        && z[0] > 0.0
        && z[4] > 1e-6
        && z[4] < 1e6
        && (z[1] * z[1] + z[2] * z[2] + z[3] * z[3]) < 1e8
}

/// Evaluates `F_E(z)` into `fe` and returns the moment residuals plus the
/// max relative residual.
fn residual(
    grid: &PhaseGrid,
    z: &[f64; 5],
    targets: &[f64; 5],
    scales: &[f64; 5],
    fe: &mut [f64],
) -> Result<([f64; 5], f64)> {
    dist::eval_juttner_into(grid, z[0], [z[1], z[2], z[3]], z[4], fe)?;
    let m = match_moments(grid, fe);
    let mut res = [0.0; 5];
    let mut max_rel = 0.0f64;
    for a in 0..5 {
        res[a] = m[a] - targets[a];
        max_rel = max_rel.max(res[a].abs() / scales[a]);
    }
    Ok((res, max_rel))
}

/// Jacobian of the matching moments with respect to `(n, u, gamma)`.
/// Columns use the analytic derivatives of the equilibrium family:
/// `dF/dn = F/n`, `dF/du_i = -gamma (1+I)(p0 u_i/u0 - p_i) F`,
/// `dF/dgamma = (-M'/M - (1+I)(u0 p0 - u.p)) F`.
fn jacobian(grid: &PhaseGrid, z: &[f64; 5], fe: &[f64]) -> nalgebra::Matrix5<f64> {
    let (n, u, gamma) = (z[0], [z[1], z[2], z[3]], z[4]);
    let u0 = (1.0 + u[0] * u[0] + u[1] * u[1] + u[2] * u[2]).sqrt();
    // M'/M at the current gamma; the shift cancels in the ratio.
    let core = juttner::m_core(grid, gamma).expect("gamma admissible inside Newton");
    let dlog_m = core.m1 / core.m0;
    let mut jac = nalgebra::Matrix5::<f64>::zeros();
    for k in 0..grid.n_nodes {
        let few = fe[k] * grid.weight[k];
        let opi = 1.0 + grid.i_energy[k];
        let p0 = grid.p0[k];
        let a = u0 * p0 - u[0] * grid.p[0][k] - u[1] * grid.p[1][k] - u[2] * grid.p[2][k];
        let cols = [
            few / n,
            -gamma * opi * (p0 * u[0] / u0 - grid.p[0][k]) * few,
            -gamma * opi * (p0 * u[1] / u0 - grid.p[1][k]) * few,
            -gamma * opi * (p0 * u[2] / u0 - grid.p[2][k]) * few,
            (-dlog_m - opi * a) * few,
        ];
        let psi = match_weights(grid, k);
        for a_idx in 0..5 {
            for (j, col) in cols.iter().enumerate() {
                jac[(a_idx, j)] += psi[a_idx] * col;
            }
        }
    }
    jac
}

/// `(1/(tau (1+I) p0)) (F_E - F)` with `F_E` solved internally.
pub fn bgk_rhs(grid: &PhaseGrid, f: &[f64], tau: f64) -> Result<Vec<f64>> {
    let eqm = local_equilibrium(grid, f)?;
    Ok(bgk_rhs_from(grid, f, &eqm.field, tau))
}

/// The relaxation term when the local equilibrium is already available.
pub fn bgk_rhs_from(grid: &PhaseGrid, f: &[f64], fe: &[f64], tau: f64) -> Vec<f64> {
    (0..grid.n_nodes)
        .map(|k| grid.inv_ip0[k] / tau * (fe[k] - f[k]))
        .collect()
}

/// Direct quadrature of the five cancellation moments of the relaxation
/// term, with the no-cancellation magnitudes as scales.
pub fn conservation_defect(grid: &PhaseGrid, f: &[f64], tau: f64) -> Result<ConservationDefect> {
    let eqm = local_equilibrium(grid, f)?;
    let rhs = bgk_rhs_from(grid, f, &eqm.field, tau);
    let mut absolute = [0.0; 5];
    let mut scale = [0.0; 5];
    for k in 0..grid.n_nodes {
        let psi = [
            1.0,
            grid.ip0[k],
            (1.0 + grid.i_energy[k]) * grid.p[0][k],
            (1.0 + grid.i_energy[k]) * grid.p[1][k],
            (1.0 + grid.i_energy[k]) * grid.p[2][k],
        ];
        let rw = rhs[k] * grid.weight[k];
        let sw = f[k].abs() * grid.inv_ip0[k] / tau * grid.weight[k];
        for a in 0..5 {
            absolute[a] += psi[a] * rw;
            scale[a] += psi[a].abs() * sw;
        }
    }
    let mut relative = [0.0; 5];
    for a in 0..5 {
        relative[a] = absolute[a] / scale[a].max(f64::MIN_POSITIVE);
    }
    Ok(ConservationDefect { absolute, relative })
}

/// Totals of the five conserved weights `{1, (1+I)p^0, (1+I)p^i}` of a
/// fiber field; the quantities the relaxation must leave unchanged.
pub fn conserved_moments(grid: &PhaseGrid, f: &[f64]) -> [f64; 5] {
    let mut m = [0.0; 5];
    for k in 0..grid.n_nodes {
        let fw = f[k] * grid.weight[k];
        let opi = 1.0 + grid.i_energy[k];
        m[0] += fw;
        m[1] += grid.ip0[k] * fw;
        m[2] += opi * grid.p[0][k] * fw;
        m[3] += opi * grid.p[1][k] * fw;
        m[4] += opi * grid.p[2][k] * fw;
    }
    m
}

/// Correction operator restoring the five conserved moments exactly.
/// Corrections live in the span of `psi_a F0`, so they scale with the
/// equilibrium tail and cannot drive far-tail nodes negative on their own.
#[derive(Clone, Debug)]
pub struct ConservedGram {
    basis: Vec<Vec<f64>>,
    lu: nalgebra::LU<f64, nalgebra::U5, nalgebra::U5>,
}

impl ConservedGram {
    pub fn build(grid: &PhaseGrid, f0: &[f64]) -> Self {
        let mut basis = vec![vec![0.0; grid.n_nodes]; 5];
        for k in 0..grid.n_nodes {
            let opi = 1.0 + grid.i_energy[k];
            let psi = [
                1.0,
                grid.ip0[k],
                opi * grid.p[0][k],
                opi * grid.p[1][k],
                opi * grid.p[2][k],
            ];
            for a in 0..5 {
                basis[a][k] = psi[a] * f0[k];
            }
        }
        let mut gram = nalgebra::Matrix5::<f64>::zeros();
        for a in 0..5 {
            for b in 0..5 {
                gram[(a, b)] = grid.integrate_with(&basis[a], |k| basis[b][k] / f0[k]);
            }
        }
        ConservedGram {
            basis,
            lu: gram.lu(),
        }
    }

    /// Shifts `f` inside the correction span so its conserved moments
    /// equal `target`.
    pub fn project(&self, grid: &PhaseGrid, f: &mut [f64], target: &[f64; 5]) {
        let current = conserved_moments(grid, f);
        let mut d = nalgebra::Vector5::<f64>::zeros();
        for a in 0..5 {
            d[a] = current[a] - target[a];
        }
        let coef = self
            .lu
            .solve(&d)
            .expect("conserved gram matrix is positive definite");
        for k in 0..grid.n_nodes {
            let mut corr = 0.0;
            for a in 0..5 {
                corr += coef[a] * self.basis[a][k];
            }
            f[k] -= corr;
        }
    }
}

/// One relaxation substep of length `dt` on a single cell, in place.
/// Returns the matched state for warm-start reuse. Both modes are convex
/// combinations of `F` and equilibria, hence positivity-preserving.
pub fn relaxation_step(
    grid: &PhaseGrid,
    f: &mut [f64],
    dt: f64,
    tau: f64,
    mode: CollisionMode,
    guess: Option<&Macrostate>,
) -> Result<Macrostate> {
    if !(dt > 0.0 && tau > 0.0) {
        return Err(Error::Domain {
            what: "dt or tau",
            value: dt.min(tau),
        });
    }
    let eqm = local_equilibrium_with_guess(grid, f, guess)?;
    let picard_rounds = match mode {
        CollisionMode::Frozen => 0,
        CollisionMode::Picard(k) => k,
    };

    if picard_rounds == 0 {
        for k in 0..grid.n_nodes {
            let decay = (-dt * grid.inv_ip0[k] / tau).exp();
            f[k] = eqm.field[k] + decay * (f[k] - eqm.field[k]);
        }
        return Ok(eqm.state);
    }

    // Exponential integrator with F_E linear in time between the start
    // value A and the end value B:
    //   F(dt) = e^{-x} F + (alpha - beta) A + beta B,
    //   x = nu dt, alpha = 1 - e^{-x}, beta = 1 - alpha/x.
    // All three coefficients are non-negative and sum to one.
    let a_field = eqm.field;
    let mut state = eqm.state;
    let mut g = vec![0.0; grid.n_nodes];
    let mut b_field = a_field.clone();
    for _ in 0..=picard_rounds {
        for k in 0..grid.n_nodes {
            let x = dt * grid.inv_ip0[k] / tau;
            let em = (-x).exp();
            let alpha = 1.0 - em;
            let beta = if x < 1e-5 {
                // Series for 1 - (1 - e^{-x})/x.
                x * (0.5 - x * (1.0 / 6.0 - x / 24.0))
            } else {
                1.0 - alpha / x
            };
            g[k] = em * f[k] + (alpha - beta) * a_field[k] + beta * b_field[k];
        }
        let end = local_equilibrium_with_guess(grid, &g, Some(&state))?;
        b_field = end.field;
        state = end.state;
    }
    // Final blend with the last refined endpoint equilibrium.
    for k in 0..grid.n_nodes {
        let x = dt * grid.inv_ip0[k] / tau;
        let em = (-x).exp();
        let alpha = 1.0 - em;
        let beta = if x < 1e-5 {
            x * (0.5 - x * (1.0 / 6.0 - x / 24.0))
        } else {
            1.0 - alpha / x
        };
        f[k] = em * f[k] + (alpha - beta) * a_field[k] + beta * b_field[k];
    }
    Ok(state)
}
