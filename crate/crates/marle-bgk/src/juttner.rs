//! Grid sums of the equilibrium generating function and its derivatives.
//!
//! With `c = (1 + I) p0`, the k-th derivative of `M(gamma)` is the
//! quadrature sum of `(-c)^k exp(-gamma c)`, and `Mtilde` carries an extra
//! `1/c`. Every macroscopic identity downstream is phrased in ratios of
//! these sums, so they are evaluated with a common factored-out exponent
//! `exp(-gamma c_min)` that cancels in ratios; the raw values underflow
//! gracefully to zero for very large `gamma` instead of producing NaNs.

use crate::error::{Error, Result};
use crate::grid::PhaseGrid;

/// Scalar constants of the reference equilibrium, all evaluated with the
/// grid's own quadrature so that downstream operator identities close.
#[derive(Clone, Copy, Debug)]
pub struct EquilibriumConstants {
    pub gamma0: f64,
    /// `Mtilde(gamma0) / M(gamma0)`, in (0, 1).
    pub eta0: f64,
    /// Mean of `(1 + I) p0` under the normalized equilibrium; at least 1.
    pub delta: f64,
    pub m0: f64,
    pub mprime0: f64,
    pub mtilde0: f64,
    /// `M^2 / (M^2 + M' Mtilde)` at `gamma0`; strictly negative.
    pub kappa: f64,
    /// Second moment `M'' / M` of `(1 + I) p0` under the equilibrium.
    pub ip0_sq_mean: f64,
    /// `ln M(gamma0)`, computed without underflow.
    pub ln_m0: f64,
    /// Per-axis response `sum (1 + I) (p^i)^2 / p0 * F0 * W`; the exact
    /// normalizer of the momentum block of the macroscopic projection.
    pub current_response: [f64; 3],
}

/// Shift-stabilized sums at a single `gamma`: each field is the quadrature
/// sum with `exp(-gamma (c - shift))` in place of `exp(-gamma c)`, so the
/// true value carries an extra factor `exp(-gamma shift)`. Ratios of fields
/// are exact.
pub(crate) struct MCore {
    pub m0: f64,
    pub m1: f64,
    pub m2: f64,
    pub mtilde: f64,
    pub shift: f64,
}

impl MCore {
    pub fn eta(&self) -> f64 {
        self.mtilde / self.m0
    }

    /// `d eta / d gamma = -(M^2 + M' Mtilde) / M^2` from the raw sums.
    /// Subject to cancellation when the occupied nodes share nearly one
    /// value of `(1+I)p0`; adequate for safeguarded Newton steps only.
    pub fn eta_slope(&self) -> f64 {
        -(self.m0 * self.m0 + self.m1 * self.mtilde) / (self.m0 * self.m0)
    }
}

pub(crate) fn m_core(grid: &PhaseGrid, gamma: f64) -> Result<MCore> {
    check_gamma(gamma)?;
    let shift = grid.ip0.iter().fold(f64::INFINITY, |acc, &c| acc.min(c));
    let mut m0 = 0.0;
    let mut m1 = 0.0;
    let mut m2 = 0.0;
    let mut mtilde = 0.0;
    for k in 0..grid.n_nodes {
        let c = grid.ip0[k];
        let e = (-gamma * (c - shift)).exp() * grid.weight[k];
        m0 += e;
        m1 -= c * e;
        m2 += c * c * e;
        mtilde += grid.inv_ip0[k] * e;
    }
    if !(m0.is_finite() && m0 > 0.0) {
        return Err(Error::NonFinite {
            context: "equilibrium generating sum",
        });
    }
    Ok(MCore {
        m0,
        m1,
        m2,
        mtilde,
        shift,
    })
}

fn check_gamma(gamma: f64) -> Result<()> {
    if !(gamma.is_finite() && gamma > 0.0) {
        return Err(Error::Domain {
            what: "gamma",
            value: gamma,
        });
    }
    Ok(())
}

/// k-th derivative of `M` at `gamma`: quadrature sum of
/// `(-(1+I)p0)^order exp(-gamma (1+I)p0)`. Sign is `(-1)^order`.
pub fn eval_m(grid: &PhaseGrid, gamma: f64, order: u32) -> Result<f64> {
    check_gamma(gamma)?;
    let mut acc = 0.0;
    for k in 0..grid.n_nodes {
        let c = grid.ip0[k];
        acc += (-c).powi(order as i32) * (-gamma * c).exp() * grid.weight[k];
    }
    Ok(acc)
}

/// k-th derivative of `Mtilde`. Differentiating once cancels the `1/c`
/// factor, so every order past zero reuses `eval_m` one order down.
pub fn eval_mtilde(grid: &PhaseGrid, gamma: f64, order: u32) -> Result<f64> {
    if order >= 1 {
        return Ok(-eval_m(grid, gamma, order - 1)?);
    }
    check_gamma(gamma)?;
    let mut acc = 0.0;
    for k in 0..grid.n_nodes {
        let c = grid.ip0[k];
        acc += grid.inv_ip0[k] * (-gamma * c).exp() * grid.weight[k];
    }
    Ok(acc)
}

/// `eta(gamma) = Mtilde / M`, strictly increasing with values in (0, 1).
pub fn eta_of_gamma(grid: &PhaseGrid, gamma: f64) -> Result<f64> {
    Ok(m_core(grid, gamma)?.eta())
}

/// Analytic slope `d eta / d gamma`. Evaluated in the covariance form
/// `E[c] E[1/c] - 1 = sum w_hat (c - E[c]) (E[1/c] - 1/c)` over the
/// normalized occupation, which avoids the catastrophic cancellation of
/// the raw-sum formula when the occupation is nearly monochromatic.
pub fn eta_slope(grid: &PhaseGrid, gamma: f64) -> Result<f64> {
    let core = m_core(grid, gamma)?;
    let c_mean = -core.m1 / core.m0;
    let inv_mean = core.mtilde / core.m0;
    let mut acc = 0.0;
    for k in 0..grid.n_nodes {
        let c = grid.ip0[k];
        let e = (-gamma * (c - core.shift)).exp() * grid.weight[k];
        acc += e * (c - c_mean) * (inv_mean - grid.inv_ip0[k]);
    }
    Ok(acc / core.m0)
}

/// First and second response coefficients of the equilibrium family at one
/// `gamma`, phrased as moments of `c = (1+I)p0` under the normalized
/// occupation. All derived quantities come in covariance form.
pub(crate) struct GammaResponse {
    /// `E[c] = -M'/M`.
    pub mean_c: f64,
    /// `Var[c] = (M'/M)' `, the slope of the log-derivative.
    pub var_c: f64,
    /// `d eta / d gamma = E[c] E[1/c] - 1 > 0`.
    pub slope: f64,
    /// `d^2 eta / d gamma^2 = -Var[c] E[1/c] + E[c] (d eta / d gamma)`.
    pub slope_prime: f64,
}

impl GammaResponse {
    /// `M'/M`.
    pub fn r(&self) -> f64 {
        -self.mean_c
    }

    /// `(M'/M)' = Var[c]`.
    pub fn r_prime(&self) -> f64 {
        self.var_c
    }

    /// `M^2 / (M^2 + M' Mtilde) = -1 / (d eta / d gamma)`, strictly negative.
    pub fn kappa(&self) -> f64 {
        -1.0 / self.slope
    }

    /// `d kappa / d gamma`.
    pub fn kappa_prime(&self) -> f64 {
        self.slope_prime / (self.slope * self.slope)
    }
}

pub(crate) fn gamma_response(grid: &PhaseGrid, gamma: f64) -> Result<GammaResponse> {
    let core = m_core(grid, gamma)?;
    let eta = core.eta();
    let mean_c = -core.m1 / core.m0;
    let mut var = 0.0;
    let mut slope = 0.0;
    for k in 0..grid.n_nodes {
        let c = grid.ip0[k];
        let e = (-gamma * (c - core.shift)).exp() * grid.weight[k];
        let dc = c - mean_c;
        var += e * dc * dc;
        slope += e * dc * (eta - grid.inv_ip0[k]);
    }
    var /= core.m0;
    slope /= core.m0;
    if !(slope > 0.0 && var > 0.0) {
        return Err(Error::DegenerateMoments {
            v0: slope,
            v_norm: var,
        });
    }
    Ok(GammaResponse {
        mean_c,
        var_c: var,
        slope,
        slope_prime: -var * eta + mean_c * slope,
    })
}

/// Default search bracket for the inverse temperature.
pub const GAMMA_BRACKET: (f64, f64) = (1e-3, 1e3);

/// Inverts `eta_of_gamma` on the default bracket.
pub fn solve_gamma(grid: &PhaseGrid, eta: f64) -> Result<f64> {
    solve_gamma_bracketed(grid, eta, GAMMA_BRACKET.0, GAMMA_BRACKET.1)
}

/// Safeguarded Newton inversion of the strictly increasing `eta(gamma)`.
/// Steps that leave the current sign-change bracket fall back to bisection,
/// so the iteration cannot escape or cycle.
pub fn solve_gamma_bracketed(grid: &PhaseGrid, eta: f64, lo: f64, hi: f64) -> Result<f64> {
    if !(eta.is_finite() && eta > 0.0 && eta < 1.0) {
        return Err(Error::Domain {
            what: "eta",
            value: eta,
        });
    }
    if !(lo.is_finite() && hi.is_finite() && 0.0 < lo && lo < hi) {
        return Err(Error::Domain {
            what: "gamma bracket",
            value: lo,
        });
    }
    let eta_lo = eta_of_gamma(grid, lo)?;
    let eta_hi = eta_of_gamma(grid, hi)?;
    if !(eta_lo <= eta && eta <= eta_hi) {
        return Err(Error::EtaOutOfBracket {
            eta,
            lo: eta_lo,
            hi: eta_hi,
        });
    }
    let mut a = lo;
    let mut b = hi;
    // Start in the middle of the bracket on a log scale; eta varies over
    // decades of gamma.
    let mut x = (a.ln() + b.ln()).mul_add(0.5, 0.0).exp();
    for _ in 0..200 {
        let core = m_core(grid, x)?;
        let g = core.eta() - eta;
        if g == 0.0 {
            return Ok(x);
        }
        if g > 0.0 {
            b = x;
        } else {
            a = x;
        }
        let slope = core.eta_slope();
        let mut xn = x - g / slope;
        if !(xn.is_finite() && xn > a && xn < b) {
            xn = 0.5 * (a + b);
        }
        if (xn - x).abs() <= 1e-14 * x.abs() {
            return Ok(xn);
        }
        x = xn;
    }
    Err(Error::SolveStalled {
        what: "gamma inversion",
        iterations: 200,
        residual: b - a,
    })
}

/// Evaluates every scalar constant of the reference equilibrium at
/// `gamma0` in one pass over the grid.
pub fn equilibrium_constants(grid: &PhaseGrid, gamma0: f64) -> Result<EquilibriumConstants> {
    let core = m_core(grid, gamma0)?;
    let scale = (-gamma0 * core.shift).exp();
    let eta0 = core.eta();
    let delta = -core.m1 / core.m0;
    let s = (core.m0 * core.m0 + core.m1 * core.mtilde) / (core.m0 * core.m0);
    if !(s < 0.0) {
        return Err(Error::DegenerateMoments {
            v0: s,
            v_norm: core.m0,
        });
    }
    let mut current = [0.0; 3];
    for k in 0..grid.n_nodes {
        let e = (-gamma0 * (grid.ip0[k] - core.shift)).exp() * grid.weight[k];
        let opi_over_p0 = (1.0 + grid.i_energy[k]) / grid.p0[k];
        for (ax, c) in current.iter_mut().enumerate() {
            *c += grid.p[ax][k] * grid.p[ax][k] * opi_over_p0 * e;
        }
    }
    for c in current.iter_mut() {
        *c /= core.m0;
    }
    let constants = EquilibriumConstants {
        gamma0,
        eta0,
        delta,
        m0: core.m0 * scale,
        mprime0: core.m1 * scale,
        mtilde0: core.mtilde * scale,
        kappa: 1.0 / s,
        ip0_sq_mean: core.m2 / core.m0,
        ln_m0: core.m0.ln() - gamma0 * core.shift,
        current_response: current,
    };
    if !(constants.eta0 > 0.0 && constants.eta0 < 1.0 && constants.delta >= 1.0) {
        return Err(Error::DegenerateMoments {
            v0: constants.eta0,
            v_norm: constants.delta,
        });
    }
    Ok(constants)
}

impl EquilibriumConstants {
    /// `M'(gamma0)/M(gamma0)`, i.e. `-delta`; appears throughout the
    /// linearized operator.
    pub fn r(&self) -> f64 {
        -self.delta
    }

    /// `(M^2 + M' Mtilde)/M^2` at `gamma0`, the reciprocal of `kappa`.
    pub fn s(&self) -> f64 {
        1.0 / self.kappa
    }

    /// Variance of `(1 + I) p0` under the equilibrium; the squared norm of
    /// the thermal basis direction before normalization.
    pub fn ip0_variance(&self) -> f64 {
        self.ip0_sq_mean - self.delta * self.delta
    }
}
