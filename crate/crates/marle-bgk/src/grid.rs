//! Truncated phase-space grid and quadrature.
//!
//! Momentum lives on a symmetric tensor product over `[-p_max, p_max]^3`,
//! internal energy on `[0, i_max]` with the state density `I^((d-2)/2)`
//! absorbed into the quadrature weights via a Gauss-Jacobi rule, so the
//! weight is integrable for every `d > 0` and no downstream integral ever
//! multiplies the density again. Space is a uniform periodic slab.
//!
//! Momentum nodes and weights are stored exactly mirror-symmetric under
//! `p -> -p`; odd-moment cancellations in the rest frame then hold to
//! floating-point rounding, which the operator identities rely on.

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};

/// One-dimensional node family used for each momentum axis.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MomentumRule {
    /// Midpoint rule on uniform cells.
    Uniform,
    /// Gauss-Legendre nodes.
    Legendre,
    /// Gauss-Lobatto nodes; includes the endpoints, which pins the corner
    /// of the truncated domain independently of resolution.
    Lobatto,
    /// Gauss-Legendre under `p = p_max sinh(a t)/sinh(a)`; clusters nodes
    /// near the origin while keeping a large cutoff affordable.
    SinhLegendre { stretch: f64 },
}

/// Grid and model parameters. `d` is the internal degrees-of-freedom
/// parameter of the state density, `gamma0` the reference inverse
/// temperature, `tau` the relaxation time scale used by the solver.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GridSpec {
    pub d: f64,
    pub gamma0: f64,
    pub tau: f64,
    pub p_max: f64,
    pub n_p: usize,
    pub p_rule: MomentumRule,
    pub i_max: f64,
    pub n_i: usize,
    pub n_x: usize,
    pub l_x: f64,
    /// Upper bound accepted for the pointwise truncation tails
    /// `exp(-gamma0 (1 + i_max))` and `exp(-gamma0 p0(p_max))`.
    pub tail_tol: f64,
}

impl Default for GridSpec {
    fn default() -> Self {
        GridSpec {
            d: 2.0,
            gamma0: 1.0,
            tau: 1.0,
            p_max: 20.0,
            n_p: 32,
            p_rule: MomentumRule::SinhLegendre { stretch: 3.5 },
            i_max: 16.0,
            n_i: 24,
            n_x: 1,
            l_x: 1.0,
            tail_tol: 1e-6,
        }
    }
}

impl GridSpec {
    pub fn validate(&self) -> Result<()> {
        fn positive(field: &'static str, v: f64) -> Result<()> {
            if !v.is_finite() || v <= 0.0 {
                return Err(Error::Spec {
                    field,
                    message: format!("must be positive and finite, got {v}"),
                });
            }
            Ok(())
        }
        positive("d", self.d)?;
        positive("gamma0", self.gamma0)?;
        positive("tau", self.tau)?;
        positive("p_max", self.p_max)?;
        positive("i_max", self.i_max)?;
        positive("l_x", self.l_x)?;
        if self.n_p < 2 {
            return Err(Error::Spec {
                field: "n_p",
                message: format!("need at least 2 nodes per axis, got {}", self.n_p),
            });
        }
        if self.n_i < 1 {
            return Err(Error::Spec {
                field: "n_i",
                message: "need at least 1 internal-energy node".into(),
            });
        }
        if self.n_x < 1 {
            return Err(Error::Spec {
                field: "n_x",
                message: "need at least 1 spatial cell".into(),
            });
        }
        if let MomentumRule::SinhLegendre { stretch } = self.p_rule {
            positive("p_rule.stretch", stretch)?;
        }
        if !(self.tail_tol > 0.0 && self.tail_tol < 1.0) {
            return Err(Error::Spec {
                field: "tail_tol",
                message: format!("must lie in (0, 1), got {}", self.tail_tol),
            });
        }
        let i_tail = (-self.gamma0 * (1.0 + self.i_max)).exp();
        if i_tail > self.tail_tol {
            return Err(Error::TailBound {
                which: "internal-energy cutoff",
                value: i_tail,
                tol: self.tail_tol,
            });
        }
        let p_tail = (-self.gamma0 * (1.0 + self.p_max * self.p_max).sqrt()).exp();
        if p_tail > self.tail_tol {
            return Err(Error::TailBound {
                which: "momentum cutoff",
                value: p_tail,
                tol: self.tail_tol,
            });
        }
        Ok(())
    }
}

/// Discrete phase space. Per-node arrays are laid out with the
/// internal-energy index fastest, then px, py, pz.
#[derive(Clone, Debug)]
pub struct PhaseGrid {
    pub spec: GridSpec,
    pub n_nodes: usize,
    /// Momentum components per node.
    pub p: [Vec<f64>; 3],
    /// Energy `sqrt(1 + |p|^2)` per node.
    pub p0: Vec<f64>,
    /// Internal energy per node.
    pub i_energy: Vec<f64>,
    /// `(1 + I) p0` per node: the collision-frequency denominator.
    pub ip0: Vec<f64>,
    /// `1 / ((1 + I) p0)` per node.
    pub inv_ip0: Vec<f64>,
    /// Quadrature weight per node, state density included.
    pub weight: Vec<f64>,
    /// Spatial cell coordinates on `[0, l_x)`.
    pub x: Vec<f64>,
    pub dx: f64,
    mirror: Vec<u32>,
}

impl PhaseGrid {
    pub fn build(spec: GridSpec) -> Result<Self> {
        spec.validate()?;
        let (pn, pw) = momentum_axis(&spec)?;
        let (inodes, iweights) = internal_energy_axis(&spec)?;

        let np = spec.n_p;
        let ni = spec.n_i;
        let n_nodes = np * np * np * ni;
        let mut p = [
            Vec::with_capacity(n_nodes),
            Vec::with_capacity(n_nodes),
            Vec::with_capacity(n_nodes),
        ];
        let mut p0 = Vec::with_capacity(n_nodes);
        let mut i_energy = Vec::with_capacity(n_nodes);
        let mut ip0 = Vec::with_capacity(n_nodes);
        let mut inv_ip0 = Vec::with_capacity(n_nodes);
        let mut weight = Vec::with_capacity(n_nodes);
        let mut mirror = Vec::with_capacity(n_nodes);

        for iz in 0..np {
            for iy in 0..np {
                for ix in 0..np {
                    let (pz, py, px) = (pn[iz], pn[iy], pn[ix]);
                    let wp = pw[iz] * pw[iy] * pw[ix];
                    let e = (1.0 + px * px + py * py + pz * pz).sqrt();
                    let mi = ((np - 1 - iz) * np + (np - 1 - iy)) * np + (np - 1 - ix);
                    for j in 0..ni {
                        p[0].push(px);
                        p[1].push(py);
                        p[2].push(pz);
                        p0.push(e);
                        i_energy.push(inodes[j]);
                        let c = (1.0 + inodes[j]) * e;
                        ip0.push(c);
                        inv_ip0.push(1.0 / c);
                        weight.push(wp * iweights[j]);
                        mirror.push((mi * ni + j) as u32);
                    }
                }
            }
        }

        let dx = spec.l_x / spec.n_x as f64;
        let x = (0..spec.n_x).map(|i| i as f64 * dx).collect();

        Ok(PhaseGrid {
            spec,
            n_nodes,
            p,
            p0,
            i_energy,
            ip0,
            inv_ip0,
            weight,
            x,
            dx,
            mirror,
        })
    }

    /// Index of the node with reflected momentum and the same internal energy.
    pub fn mirror(&self, node: usize) -> usize {
        self.mirror[node] as usize
    }

    /// `1 + I` at a node.
    pub fn one_plus_i(&self, node: usize) -> f64 {
        1.0 + self.i_energy[node]
    }

    /// Phase-space integral of tabulated values (weights already contain the
    /// state density). No validity checks; see [`PhaseGrid::try_integrate`].
    pub fn integrate(&self, values: &[f64]) -> f64 {
        debug_assert_eq!(values.len(), self.n_nodes);
        values.iter().zip(&self.weight).map(|(v, w)| v * w).sum()
    }

    /// Checked integral: rejects length mismatches and non-finite entries.
    pub fn try_integrate(&self, values: &[f64]) -> Result<f64> {
        if values.len() != self.n_nodes {
            return Err(Error::Spec {
                field: "values",
                message: format!("expected {} nodes, got {}", self.n_nodes, values.len()),
            });
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                context: "integrand",
            });
        }
        Ok(self.integrate(values))
    }

    /// Integral of `values * extra(node)`; `extra` sees the node index and
    /// can pull any per-node quantity off the grid.
    pub fn integrate_with(&self, values: &[f64], extra: impl Fn(usize) -> f64) -> f64 {
        debug_assert_eq!(values.len(), self.n_nodes);
        values
            .iter()
            .enumerate()
            .map(|(k, v)| v * extra(k) * self.weight[k])
            .sum()
    }

    /// Quadrature inner product on the (p, I) fiber.
    pub fn inner(&self, f: &[f64], g: &[f64]) -> f64 {
        debug_assert_eq!(f.len(), self.n_nodes);
        debug_assert_eq!(g.len(), self.n_nodes);
        f.iter()
            .zip(g)
            .zip(&self.weight)
            .map(|((a, b), w)| a * b * w)
            .sum()
    }

    pub fn norm(&self, f: &[f64]) -> f64 {
        self.inner(f, f).max(0.0).sqrt()
    }
}

fn momentum_axis(spec: &GridSpec) -> Result<(Vec<f64>, Vec<f64>)> {
    let n = spec.n_p;
    let (mut t, mut w) = match spec.p_rule {
        MomentumRule::Uniform => midpoint(n),
        MomentumRule::Legendre => gauss_legendre(n)?,
        MomentumRule::Lobatto => gauss_lobatto(n)?,
        MomentumRule::SinhLegendre { stretch } => {
            let (tt, tw) = gauss_legendre(n)?;
            let s = stretch;
            let sh = s.sinh();
            let nodes = tt.iter().map(|&x| (s * x).sinh() / sh).collect::<Vec<_>>();
            let weights = tt
                .iter()
                .zip(&tw)
                .map(|(&x, &om)| om * s * (s * x).cosh() / sh)
                .collect::<Vec<_>>();
            (nodes, weights)
        }
    };
    symmetrize(&mut t, &mut w);
    for x in t.iter_mut() {
        *x *= spec.p_max;
    }
    for om in w.iter_mut() {
        *om *= spec.p_max;
    }
    Ok((t, w))
}

/// Gauss-Jacobi rule on `[0, i_max]` with the density `I^((d-2)/2)` folded
/// into the weights. Nodes exclude both endpoints, so the weight stays
/// finite even when the density diverges at the origin (`d < 2`).
fn internal_energy_axis(spec: &GridSpec) -> Result<(Vec<f64>, Vec<f64>)> {
    let beta = (spec.d - 2.0) / 2.0;
    let (x, w) = gauss_jacobi(spec.n_i, 0.0, beta)?;
    let half = spec.i_max / 2.0;
    let scale = half.powf(beta + 1.0);
    let nodes = x.iter().map(|&t| half * (1.0 + t)).collect();
    let weights = w.iter().map(|&om| om * scale).collect();
    Ok((nodes, weights))
}

/// Enforces exact `+/-` symmetry of a nominally symmetric rule so reflected
/// nodes negate bitwise.
fn symmetrize(nodes: &mut [f64], weights: &mut [f64]) {
    let n = nodes.len();
    let mut idx: Vec<usize> = (0..n).collect();
    idx.sort_by(|&a, &b| nodes[a].total_cmp(&nodes[b]));
    let sn: Vec<f64> = idx.iter().map(|&i| nodes[i]).collect();
    let sw: Vec<f64> = idx.iter().map(|&i| weights[i]).collect();
    nodes.copy_from_slice(&sn);
    weights.copy_from_slice(&sw);
    for i in 0..n / 2 {
        let j = n - 1 - i;
        let m = 0.5 * (nodes[j] - nodes[i]);
        nodes[j] = m;
        nodes[i] = -m;
        let wm = 0.5 * (weights[i] + weights[j]);
        weights[i] = wm;
        weights[j] = wm;
    }
    if n % 2 == 1 {
        nodes[n / 2] = 0.0;
    }
}

fn midpoint(n: usize) -> (Vec<f64>, Vec<f64>) {
    let h = 2.0 / n as f64;
    let nodes = (0..n).map(|k| -1.0 + (k as f64 + 0.5) * h).collect();
    (nodes, vec![h; n])
}

/// Legendre polynomial and derivative by upward recurrence.
fn legendre_pair(n: usize, x: f64) -> (f64, f64) {
    if n == 0 {
        return (1.0, 0.0);
    }
    let mut pm = 1.0;
    let mut pc = x;
    for k in 2..=n {
        let kf = k as f64;
        let pn = ((2.0 * kf - 1.0) * x * pc - (kf - 1.0) * pm) / kf;
        pm = pc;
        pc = pn;
    }
    let dp = n as f64 * (x * pc - pm) / (x * x - 1.0);
    (pc, dp)
}

pub(crate) fn gauss_legendre(n: usize) -> Result<(Vec<f64>, Vec<f64>)> {
    let mut nodes = vec![0.0; n];
    let mut weights = vec![0.0; n];
    for i in 0..n {
        let mut x = (std::f64::consts::PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
        let mut ok = false;
        for _ in 0..100 {
            let (p, dp) = legendre_pair(n, x);
            let dx = p / dp;
            x -= dx;
            if dx.abs() < 1e-15 {
                ok = true;
                break;
            }
        }
        if !ok {
            return Err(Error::SolveStalled {
                what: "gauss-legendre node",
                iterations: 100,
                residual: f64::NAN,
            });
        }
        let (_, dp) = legendre_pair(n, x);
        nodes[i] = x;
        weights[i] = 2.0 / ((1.0 - x * x) * dp * dp);
    }
    Ok((nodes, weights))
}

fn gauss_lobatto(n: usize) -> Result<(Vec<f64>, Vec<f64>)> {
    if n < 2 {
        return Err(Error::Spec {
            field: "n_p",
            message: "lobatto rule needs at least 2 nodes".into(),
        });
    }
    let m = n - 1;
    let mut nodes = vec![0.0; n];
    let mut weights = vec![0.0; n];
    nodes[0] = -1.0;
    nodes[n - 1] = 1.0;
    let endpoint_w = 2.0 / (n as f64 * m as f64);
    weights[0] = endpoint_w;
    weights[n - 1] = endpoint_w;
    for i in 1..m {
        // Interior nodes are the extrema of the degree-m Legendre polynomial.
        let mut x = (std::f64::consts::PI * (m - i) as f64 / m as f64).cos();
        let mut ok = false;
        for _ in 0..100 {
            let (p, dp) = legendre_pair(m, x);
            let ddp = (2.0 * x * dp - (m as f64) * (m as f64 + 1.0) * p) / (1.0 - x * x);
            let dx = dp / ddp;
            x -= dx;
            if dx.abs() < 1e-15 {
                ok = true;
                break;
            }
        }
        if !ok {
            return Err(Error::SolveStalled {
                what: "gauss-lobatto node",
                iterations: 100,
                residual: f64::NAN,
            });
        }
        let (p, _) = legendre_pair(m, x);
        nodes[i] = x;
        weights[i] = 2.0 / (n as f64 * m as f64 * p * p);
    }
    Ok((nodes, weights))
}

/// Gauss-Jacobi rule for the weight `(1-x)^alpha (1+x)^beta` on `[-1, 1]`
/// by the Golub-Welsch eigenvalue method.
fn gauss_jacobi(n: usize, alpha: f64, beta: f64) -> Result<(Vec<f64>, Vec<f64>)> {
    if !(alpha > -1.0 && beta > -1.0) {
        return Err(Error::Domain {
            what: "jacobi weight exponent",
            value: beta.min(alpha),
        });
    }
    let ab = alpha + beta;
    let mut diag = vec![0.0; n];
    let mut off = vec![0.0; n.saturating_sub(1)];
    diag[0] = (beta - alpha) / (ab + 2.0);
    for k in 1..n {
        let kf = k as f64;
        let denom = (2.0 * kf + ab) * (2.0 * kf + ab + 2.0);
        diag[k] = (beta * beta - alpha * alpha) / denom;
        let b = if k == 1 {
            4.0 * (1.0 + alpha) * (1.0 + beta) / ((ab + 2.0) * (ab + 2.0) * (ab + 3.0))
        } else {
            4.0 * kf * (kf + alpha) * (kf + beta) * (kf + ab)
                / ((2.0 * kf + ab)
                    * (2.0 * kf + ab)
                    * (2.0 * kf + ab + 1.0)
                    * (2.0 * kf + ab - 1.0))
        };
        off[k - 1] = b.sqrt();
    }
    // Total mass of the weight: 2^(a+b+1) B(a+1, b+1).
    let mu0 = jacobi_mass(alpha, beta);

    let mut m = nalgebra::DMatrix::<f64>::zeros(n, n);
    for k in 0..n {
        m[(k, k)] = diag[k];
        if k + 1 < n {
            m[(k, k + 1)] = off[k];
            m[(k + 1, k)] = off[k];
        }
    }
    let eig = nalgebra::SymmetricEigen::new(m);
    let mut pairs: Vec<(f64, f64)> = (0..n)
        .map(|i| {
            let v0 = eig.eigenvectors[(0, i)];
            (eig.eigenvalues[i], mu0 * v0 * v0)
        })
        .collect();
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
    let nodes = pairs.iter().map(|p| p.0).collect();
    let weights = pairs.iter().map(|p| p.1).collect();
    Ok((nodes, weights))
}

fn jacobi_mass(alpha: f64, beta: f64) -> f64 {
    // 2^(a+b+1) Gamma(a+1) Gamma(b+1) / Gamma(a+b+2)
    let ln = (alpha + beta + 1.0) * std::f64::consts::LN_2
        + ln_gamma(alpha + 1.0)
        + ln_gamma(beta + 1.0)
        - ln_gamma(alpha + beta + 2.0);
    ln.exp()
}

/// Lanczos approximation, sufficient here for arguments above zero.
/// Coefficients carry their published digits in full.
#[allow(clippy::excessive_precision, clippy::inconsistent_digit_grouping)]
fn ln_gamma(x: f64) -> f64 {
    const G: [f64; 9] = [
        0.999_999_999_999_809_93,
        676.520_368_121_885_1,
        -1259.139_216_722_402_8,
        771.323_428_777_653_13,
        -176.615_029_162_140_6,
        12.507_343_278_686_905,
        -0.138_571_095_265_720_12,
        9.984_369_578_019_571_6e-6,
        1.505_632_735_149_311_6e-7,
    ];
    if x < 0.5 {
        let pi = std::f64::consts::PI;
        return (pi / (pi * x).sin()).ln() - ln_gamma(1.0 - x);
    }
    let x = x - 1.0;
    let mut a = G[0];
    let t = x + 7.5;
    for (i, &g) in G.iter().enumerate().skip(1) {
        a += g / (x + i as f64);
    }
    0.5 * (2.0 * std::f64::consts::PI).ln() + (x + 0.5) * t.ln() - t + a.ln()
}
