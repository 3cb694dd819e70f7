//! Shared helpers for the integration suites: an adaptive quadrature and
//! closed-form reductions of the two normalizer integrals for the flat
//! internal-energy weight (D = 2), where the energy integral collapses
//! analytically and leaves one radial momentum integral.
//!
//! These routines share no code with the crate under test; they exist to
//! cross-check the grid quadrature against an independent evaluation.

#![allow(dead_code)]

/// Adaptive Simpson on [a, b]. `tol` is absolute; the recursion stops at
/// the rounding floor of the running estimate so it cannot subdivide
/// forever chasing noise.
pub fn integrate<F: Fn(f64) -> f64 + Copy>(f: F, a: f64, b: f64, tol: f64) -> f64 {
    fn simpson<F: Fn(f64) -> f64>(f: &F, a: f64, fa: f64, b: f64, fb: f64) -> (f64, f64, f64) {
        let m = 0.5 * (a + b);
        let fm = f(m);
        ((b - a) / 6.0 * (fa + 4.0 * fm + fb), m, fm)
    }
    #[allow(clippy::too_many_arguments)]
    fn recurse<F: Fn(f64) -> f64>(
        f: &F,
        a: f64,
        fa: f64,
        b: f64,
        fb: f64,
        whole: f64,
        m: f64,
        fm: f64,
        tol: f64,
        depth: u32,
    ) -> f64 {
        let (left, lm, flm) = simpson(f, a, fa, m, fm);
        let (right, rm, frm) = simpson(f, m, fm, b, fb);
        let delta = left + right - whole;
        let floor = 1e-15 * (left.abs() + right.abs());
        if depth == 0 || delta.abs() <= (15.0 * tol).max(floor) {
            return left + right + delta / 15.0;
        }
        recurse(f, a, fa, m, fm, left, lm, flm, 0.5 * tol, depth - 1)
            + recurse(f, m, fm, b, fb, right, rm, frm, 0.5 * tol, depth - 1)
    }
    let fa = f(a);
    let fb = f(b);
    let (whole, m, fm) = simpson(&f, a, fa, b, fb);
    recurse(&f, a, fa, b, fb, whole, m, fm, tol, 28)
}

/// Modified Bessel function of the second kind, order one, from its
/// integral representation `K1(x) = int_0^inf exp(-x cosh t) cosh t dt`.
/// Intended for the moderate arguments used by the oracle checks.
pub fn bessel_k1(x: f64) -> f64 {
    assert!(x > 0.05 && x < 200.0);
    let t_max = (750.0 / x).max(2.0).acosh();
    let scale = (-x).exp();
    integrate(
        |t| (-x * t.cosh()).exp() * t.cosh(),
        0.0,
        t_max,
        1e-13 * scale,
    )
}

/// Exponential integral `E1(y) = int_1^inf exp(-y s)/s ds` by the power
/// series below 1.5 and a Lentz continued fraction above.
pub fn expint_e1(y: f64) -> f64 {
    assert!(y > 0.0);
    if y > 700.0 {
        return 0.0;
    }
    if y < 1.5 {
        const EULER_GAMMA: f64 = 0.577_215_664_901_532_9;
        let mut sum = 0.0;
        let mut term = 1.0;
        for k in 1..60 {
            term *= -y / k as f64;
            sum -= term / k as f64;
            if term.abs() < 1e-18 {
                break;
            }
        }
        return -EULER_GAMMA - y.ln() + sum;
    }
    // E1(y) = exp(-y) / (y + 1 - 1/(y + 3 - 4/(y + 5 - 9/(...)))),
    // evaluated by modified Lentz on the denominator fraction.
    let tiny = 1e-300;
    let mut h = y + 1.0;
    let mut c = h;
    let mut d = 0.0;
    for k in 1..200u32 {
        let a = -((k * k) as f64);
        let b = y + (2 * k + 1) as f64;
        d = b + a * d;
        if d.abs() < tiny {
            d = tiny;
        }
        c = b + a / c;
        if c.abs() < tiny {
            c = tiny;
        }
        d = 1.0 / d;
        let delta = c * d;
        h *= delta;
        if (delta - 1.0).abs() < 1e-16 {
            break;
        }
    }
    (-y).exp() / h
}

/// Normalizer `M(gamma)` for the flat energy weight: the energy integral
/// gives `1/(gamma p0)` and the angular integral `4 pi p^2`, leaving
/// `4 pi K1(gamma) / gamma^2`.
pub fn m_oracle_d2(gamma: f64) -> f64 {
    4.0 * std::f64::consts::PI * bessel_k1(gamma) / (gamma * gamma)
}

/// Companion normalizer `Mtilde(gamma)`: the extra `1/((1+I)p0)` turns the
/// energy integral into `E1(gamma p0)`, leaving a radial integral.
pub fn mtilde_oracle_d2(gamma: f64) -> f64 {
    let p_max = 80.0 / gamma.min(1.0);
    let scale = m_oracle_d2(gamma);
    let f = |p: f64| {
        let p0 = (1.0 + p * p).sqrt();
        p * p / p0 * expint_e1(gamma * p0)
    };
    // Dyadic panels keep the subdivision anchored inside the decay scale of
    // the integrand; a single adaptive pass over the whole range can match
    // near-zero samples on its first splits and stop before ever seeing the
    // mass near the origin.
    let mut panels = vec![0.0, 1.0];
    while *panels.last().unwrap() < p_max {
        let next = (2.0 * panels.last().unwrap()).min(p_max);
        panels.push(next);
    }
    let tol = 1e-13 * scale / panels.len() as f64;
    let total: f64 = panels
        .windows(2)
        .map(|w| integrate(f, w[0], w[1], tol))
        .sum();
    4.0 * std::f64::consts::PI * total
}
