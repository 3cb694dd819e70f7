//! Exit-gate acceptance suite. Each test verifies one numbered release
//! criterion end to end through the public API and prints a single
//! `criterion NN PASS` line with the measured margin, so a full run reads
//! as a checklist. Expected values that have an independent closed form
//! are recomputed by the oracles in `common` rather than taken from the
//! crate under test.

// Frozen reference values keep their full source digits; indexed loops walk
// parallel per-node arrays.
#![allow(clippy::excessive_precision)]
#![allow(clippy::needless_range_loop)]

mod common;

use std::process::Command;
use std::sync::OnceLock;
use std::time::Instant;

use marle_bgk::rng::SplitMix64;
use marle_bgk::{
    apply_p, build_basis, conservation_defect, entropy_density, equilibrium_constants,
    eta_of_gamma, eval_juttner, eval_m, eval_mtilde, from_perturbation, gamma_defect, gamma_direct,
    global_equilibrium, macrostate_of, nonlinear_parts, preset, relaxation_step, run_simulation,
    solve_gamma, spectral_gap, transitional_state, CollisionMode, GlobalEquilibrium, GridSpec,
    HessianQ, InitialCondition, LowRankOperator, Macrostate, MomentumRule, OrthonormalBasis,
    PerturbationField, PhaseGrid, ProfileShape, RunConfig, Scheme, DEFAULT_THETA_ORDER,
};

/// Values of the closed-form reduction at the reference temperatures,
/// frozen from a 30-digit arbitrary-precision evaluation. The `common`
/// oracle must land on these before it is trusted against the grid.
const M_REF: [(f64, f64); 3] = [
    (0.5, 83.261812059302707134),
    (1.0, 7.5637893301208507819),
    (2.0, 0.43940162680264510295),
];
const MTILDE_REF: [(f64, f64); 3] = [
    (0.5, 16.632416014987476335),
    (1.0, 2.4717356033985328925),
    (2.0, 0.21209176867820521669),
];

/// Fiber-only grid used for the temperature-inversion and sign checks.
fn inversion_spec(d: f64) -> GridSpec {
    GridSpec {
        d,
        n_p: 16,
        p_max: 12.0,
        p_rule: MomentumRule::SinhLegendre { stretch: 2.5 },
        n_i: 12,
        i_max: 12.0,
        tail_tol: 1e-3,
        n_x: 1,
        ..GridSpec::default()
    }
}

/// Fiber-only grid shared by the operator-level criteria. Lobatto nodes pin
/// the domain corner, which is where the collision frequency is smallest.
fn operator_spec() -> GridSpec {
    GridSpec {
        n_p: 10,
        p_max: 10.0,
        p_rule: MomentumRule::Lobatto,
        n_i: 8,
        i_max: 8.0,
        tail_tol: 1e-3,
        n_x: 1,
        ..GridSpec::default()
    }
}

struct OperatorFixture {
    grid: PhaseGrid,
    eq: GlobalEquilibrium,
    op: LowRankOperator,
    basis: OrthonormalBasis,
}

fn operator_fixture() -> &'static OperatorFixture {
    static FIXTURE: OnceLock<OperatorFixture> = OnceLock::new();
    FIXTURE.get_or_init(|| {
        let grid = PhaseGrid::build(operator_spec()).expect("operator fixture grid");
        let eq = global_equilibrium(&grid, grid.spec.gamma0).expect("fixture equilibrium");
        let op = LowRankOperator::build(&grid, &eq);
        let basis = build_basis(&grid, &eq);
        OperatorFixture {
            grid,
            eq,
            op,
            basis,
        }
    })
}

fn random_fiber_field(grid: &PhaseGrid, seed: u64, label: u64) -> Vec<f64> {
    let mut rng = SplitMix64::stream(seed, label);
    let mut f = vec![0.0; grid.n_nodes];
    rng.fill_sym(&mut f);
    f
}

fn least_squares_slope(points: &[(f64, f64)]) -> f64 {
    let m = points.len() as f64;
    let sx: f64 = points.iter().map(|p| p.0).sum();
    let sy: f64 = points.iter().map(|p| p.1).sum();
    let sxx: f64 = points.iter().map(|p| p.0 * p.0).sum();
    let sxy: f64 = points.iter().map(|p| p.0 * p.1).sum();
    (m * sxy - sx * sy) / (m * sxx - sx * sx)
}

#[test]
fn acceptance_01_temperature_inversion_round_trip() {
    let grids: Vec<(f64, PhaseGrid)> = [2.0, 3.0, 5.0]
        .into_iter()
        .map(|d| (d, PhaseGrid::build(inversion_spec(d)).unwrap()))
        .collect();
    let start = Instant::now();
    let mut worst = 0.0f64;
    for (d, grid) in &grids {
        for gamma in [0.5, 1.0, 2.0, 5.0] {
            let eta = eta_of_gamma(grid, gamma).unwrap();
            let back = solve_gamma(grid, eta).unwrap();
            let rel = (back - gamma).abs() / gamma;
            assert!(
                rel <= 1e-10,
                "d = {d}, gamma = {gamma}: round trip error {rel:.3e}"
            );
            worst = worst.max(rel);
        }
    }
    let elapsed = start.elapsed();
    assert!(
        elapsed.as_secs_f64() < 1.0,
        "round trips took {elapsed:?}, budget 1 s"
    );
    println!("criterion 01 PASS: 12 round trips, worst relative error {worst:.3e}, {elapsed:?}");
}

#[test]
fn acceptance_02_eta_of_gamma_is_increasing() {
    let grid = PhaseGrid::build(inversion_spec(2.0)).unwrap();
    let (lo, hi) = (0.1f64, 10.0f64);
    let mut min_slope = f64::INFINITY;
    for j in 0..50 {
        let t = j as f64 / 49.0;
        let gamma = lo * (hi / lo).powf(t);
        let h = 1e-3 * gamma;
        let up = eta_of_gamma(&grid, gamma + h).unwrap();
        let down = eta_of_gamma(&grid, gamma - h).unwrap();
        let slope = (up - down) / (2.0 * h);
        assert!(
            slope > 0.0,
            "gamma = {gamma}: slope {slope:.3e} not positive"
        );
        min_slope = min_slope.min(slope);
    }
    println!("criterion 02 PASS: 50 finite-difference slopes positive, smallest {min_slope:.3e}");
}

#[test]
fn acceptance_03_moment_combination_is_negative() {
    let mut closest = f64::NEG_INFINITY;
    let mut samples = 0usize;
    for d in [2.0, 3.0, 5.0] {
        let grid = PhaseGrid::build(inversion_spec(d)).unwrap();
        let gammas: Vec<f64> = if d == 2.0 {
            (0..50)
                .map(|j| 0.1f64 * (10.0f64 / 0.1).powf(j as f64 / 49.0))
                .collect()
        } else {
            vec![0.5, 1.0, 2.0, 5.0]
        };
        for gamma in gammas {
            let c = equilibrium_constants(&grid, gamma).unwrap();
            let value = c.m0 * c.m0 + c.mprime0 * c.mtilde0;
            assert!(
                value < 0.0,
                "d = {d}, gamma = {gamma}: combination {value:.3e} not negative"
            );
            assert!(
                c.kappa < 0.0,
                "d = {d}, gamma = {gamma}: kappa not negative"
            );
            closest = closest.max(value / (c.m0 * c.m0));
            samples += 1;
        }
    }
    println!(
        "criterion 03 PASS: combination negative at {samples} (gamma, d) samples, \
         largest normalized value {closest:.3e}"
    );
}

#[test]
fn acceptance_04_moment_quadrature_matches_closed_form() {
    // The oracle itself must reproduce the frozen high-precision values
    // before it is used to judge the grid.
    for (gamma, expect) in M_REF {
        let rel = (common::m_oracle_d2(gamma) - expect).abs() / expect;
        assert!(rel <= 1e-11, "oracle M({gamma}): {rel:.3e}");
    }
    for (gamma, expect) in MTILDE_REF {
        let rel = (common::mtilde_oracle_d2(gamma) - expect).abs() / expect;
        assert!(rel <= 1e-11, "oracle Mtilde({gamma}): {rel:.3e}");
    }

    let default_grid = PhaseGrid::build(GridSpec::default()).unwrap();
    let refined_grid = PhaseGrid::build(GridSpec {
        n_p: 48,
        n_i: 36,
        ..GridSpec::default()
    })
    .unwrap();
    let m_exact = common::m_oracle_d2(1.0);
    let mt_exact = common::mtilde_oracle_d2(1.0);
    let rel = |grid: &PhaseGrid| -> (f64, f64) {
        let m = eval_m(grid, 1.0, 0).unwrap();
        let mt = eval_mtilde(grid, 1.0, 0).unwrap();
        (
            (m - m_exact).abs() / m_exact,
            (mt - mt_exact).abs() / mt_exact,
        )
    };
    let (m_err, mt_err) = rel(&default_grid);
    assert!(m_err <= 1e-6, "default grid M(1) error {m_err:.3e}");
    assert!(mt_err <= 1e-6, "default grid Mtilde(1) error {mt_err:.3e}");
    let (m_ref_err, mt_ref_err) = rel(&refined_grid);
    assert!(
        m_ref_err <= 0.5 * m_err,
        "refinement did not improve M(1): {m_err:.3e} -> {m_ref_err:.3e}"
    );
    assert!(
        mt_ref_err <= 0.5 * mt_err,
        "refinement did not improve Mtilde(1): {mt_err:.3e} -> {mt_ref_err:.3e}"
    );
    println!(
        "criterion 04 PASS: default grid errors M {m_err:.3e}, Mtilde {mt_err:.3e}; \
         refined {m_ref_err:.3e}, {mt_ref_err:.3e}"
    );
}

#[test]
fn acceptance_05_projection_fixes_the_kernel_fields() {
    let fx = operator_fixture();
    let mut worst = 0.0f64;
    for (a, e) in fx.basis.e.iter().enumerate() {
        let projected = fx.op.apply_p0(&fx.grid, e);
        let diff: Vec<f64> = projected.iter().zip(e).map(|(p, v)| p - v).collect();
        let rel = fx.grid.norm(&diff) / fx.grid.norm(e);
        assert!(rel <= 1e-10, "kernel field {a}: residual {rel:.3e}");
        worst = worst.max(rel);
    }
    println!("criterion 05 PASS: 5 kernel fields fixed, worst residual {worst:.3e}");
}

#[test]
fn acceptance_06_linearized_operator_is_self_adjoint() {
    let fx = operator_fixture();
    let mut worst = 0.0f64;
    for pair in 0..100u64 {
        let f = random_fiber_field(&fx.grid, 600, 2 * pair);
        let g = random_fiber_field(&fx.grid, 600, 2 * pair + 1);
        let lf = fx.op.apply_l(&fx.grid, &f);
        let lg = fx.op.apply_l(&fx.grid, &g);
        let asym = (fx.grid.inner(&lf, &g) - fx.grid.inner(&f, &lg)).abs();
        let bound = 1e-12 * fx.grid.norm(&f) * fx.grid.norm(&g);
        assert!(
            asym <= bound,
            "pair {pair}: asymmetry {asym:.3e} > {bound:.3e}"
        );
        worst = worst.max(asym / bound);
    }
    println!("criterion 06 PASS: 100 pairs self-adjoint, worst asymmetry at {worst:.3} of bound");
}

#[test]
fn acceptance_07_spectral_gap_is_positive_and_coercive() {
    let start = Instant::now();
    let fx = operator_fixture();
    let gap = spectral_gap(&fx.grid, &fx.op, &fx.basis, 1234).unwrap();
    assert!(gap.lambda > 0.0, "gap {:.3e} not positive", gap.lambda);

    let mut worst = f64::NEG_INFINITY;
    for trial in 0..200u64 {
        let mut f = random_fiber_field(&fx.grid, 700, trial);
        let norm = fx.grid.norm(&f);
        for v in f.iter_mut() {
            *v /= norm;
        }
        let lf = fx.op.apply_l(&fx.grid, &f);
        let pf = apply_p(&fx.grid, &fx.basis, &f);
        let micro: Vec<f64> = f.iter().zip(&pf).map(|(v, p)| v - p).collect();
        let micro_sq = fx.grid.inner(&micro, &micro);
        let margin = fx.grid.inner(&lf, &f) + gap.lambda * micro_sq;
        assert!(
            margin <= 1e-10,
            "trial {trial}: coercivity violated by {margin:.3e}"
        );
        worst = worst.max(margin);
    }

    // The gap must be a property of the model, not of the resolution.
    let refined = PhaseGrid::build(GridSpec {
        n_p: 15,
        n_i: 12,
        ..operator_spec()
    })
    .unwrap();
    let req = global_equilibrium(&refined, refined.spec.gamma0).unwrap();
    let rop = LowRankOperator::build(&refined, &req);
    let rbasis = build_basis(&refined, &req);
    let rgap = spectral_gap(&refined, &rop, &rbasis, 1234).unwrap();
    let drift = (rgap.lambda - gap.lambda).abs() / gap.lambda;
    assert!(
        drift <= 0.05,
        "gap moved {drift:.3} under refinement: {:.6e} -> {:.6e}",
        gap.lambda,
        rgap.lambda
    );
    let elapsed = start.elapsed();
    assert!(
        elapsed.as_secs_f64() < 30.0,
        "took {elapsed:?}, budget 30 s"
    );
    println!(
        "criterion 07 PASS: lambda = {:.6e}, worst coercivity margin {worst:.3e}, \
         refinement drift {drift:.4}, {elapsed:?}",
        gap.lambda
    );
}

#[test]
fn acceptance_08_relaxation_target_conserves_the_invariants() {
    let fx = operator_fixture();
    let mut worst = 0.0f64;
    for trial in 0..50u64 {
        let mut rng = SplitMix64::stream(800, trial);
        let f: Vec<f64> = fx
            .eq
            .f0
            .iter()
            .map(|f0| f0 * (1.0 + 0.05 * rng.next_sym()))
            .collect();
        let defect = conservation_defect(&fx.grid, &f, fx.grid.spec.tau).unwrap();
        let rel = defect.max_relative();
        assert!(rel <= 1e-9, "trial {trial}: relative defect {rel:.3e}");
        worst = worst.max(rel);
    }
    println!("criterion 08 PASS: 50 near-equilibrium fields, worst relative defect {worst:.3e}");
}

#[test]
fn acceptance_09_entropy_is_nondecreasing_under_relaxation() {
    let fx = operator_fixture();
    let mut smallest_increment = f64::INFINITY;
    for trial in 0..20u64 {
        let mut rng = SplitMix64::stream(900, trial);
        let mut f: Vec<f64> = fx
            .eq
            .f0
            .iter()
            .map(|f0| f0 * (1.0 + 0.3 * rng.next_sym()))
            .collect();
        let mut entropy = entropy_density(&fx.grid, &f);
        let mut state: Option<Macrostate> = None;
        for step in 0..40 {
            let next_state = relaxation_step(
                &fx.grid,
                &mut f,
                0.05,
                fx.grid.spec.tau,
                CollisionMode::Frozen,
                state.as_ref(),
            )
            .unwrap();
            let next = entropy_density(&fx.grid, &f);
            assert!(
                next >= entropy - 1e-12,
                "trial {trial}, step {step}: entropy fell by {:.3e}",
                entropy - next
            );
            smallest_increment = smallest_increment.min(next - entropy);
            entropy = next;
            state = Some(next_state);
        }
    }
    println!(
        "criterion 09 PASS: 20 relaxation histories, smallest entropy increment {smallest_increment:.3e}"
    );
}

#[test]
fn acceptance_10_macroscopic_decomposition_is_exact() {
    let fx = operator_fixture();
    let eta0 = fx.eq.consts.eta0;

    // First moments of the perturbation against the equilibrium-weighted
    // functionals, recomputed here from grid data so the split is checked
    // against an independent evaluation.
    let linear_parts = |f: &[f64]| -> (f64, [f64; 3], f64) {
        let mut n = 0.0;
        let mut u = [0.0; 3];
        let mut eta_centered = 0.0;
        for k in 0..fx.grid.n_nodes {
            let fsw = f[k] * fx.eq.sqrt_f0[k] * fx.grid.weight[k];
            n += fsw;
            for (ax, uc) in u.iter_mut().enumerate() {
                *uc += fx.grid.p[ax][k] / fx.grid.p0[k] * fsw;
            }
            eta_centered += (fx.grid.inv_ip0[k] - eta0) * fsw;
        }
        (n, u, eta_centered)
    };

    let mut worst = 0.0f64;
    for trial in 0..30u64 {
        let mut f = random_fiber_field(&fx.grid, 1000, trial);
        for v in f.iter_mut() {
            *v *= 1e-3;
        }
        let (lin_n, lin_u, lin_eta) = linear_parts(&f);
        let nl = nonlinear_parts(&fx.grid, &fx.eq, &f).unwrap();
        let pert = PerturbationField { values: f };
        let absolute = from_perturbation(&fx.eq, &pert);
        let state = macrostate_of(&fx.grid, &absolute.values).unwrap();

        let n_res = ((state.n - 1.0) - (lin_n + nl.n_n)).abs();
        assert!(
            n_res <= 1e-13,
            "trial {trial}: density residual {n_res:.3e}"
        );
        worst = worst.max(n_res);
        for ax in 0..3 {
            let u_res = (state.u[ax] - (lin_u[ax] + nl.n_u[ax])).abs();
            assert!(
                u_res <= 1e-13,
                "trial {trial}: velocity {ax} residual {u_res:.3e}"
            );
            worst = worst.max(u_res);
        }
        let eta_res = ((state.eta - eta0) - (lin_eta + nl.n_eta)).abs();
        assert!(
            eta_res <= 1e-13,
            "trial {trial}: eta residual {eta_res:.3e}"
        );
        worst = worst.max(eta_res);
    }

    // Both evaluations of the quadratic remainder must agree to the
    // tolerance of the integral representation's quadrature.
    let mut worst_route = 0.0f64;
    for trial in 0..5u64 {
        let mut f = random_fiber_field(&fx.grid, 1100, trial);
        for v in f.iter_mut() {
            *v *= 1e-2;
        }
        let direct = gamma_direct(&fx.grid, &fx.eq, &fx.op, &f, DEFAULT_THETA_ORDER).unwrap();
        let defect = gamma_defect(&fx.grid, &fx.eq, &fx.op, &f).unwrap();
        let diff: Vec<f64> = direct.iter().zip(&defect).map(|(a, b)| a - b).collect();
        let rel = fx.grid.norm(&diff) / fx.grid.norm(&defect);
        assert!(rel <= 1e-8, "trial {trial}: route disagreement {rel:.3e}");
        worst_route = worst_route.max(rel);
    }
    println!(
        "criterion 10 PASS: worst decomposition residual {worst:.3e}, \
         worst remainder route disagreement {worst_route:.3e}"
    );
}

#[test]
fn acceptance_11_quadratic_remainder_scales_quadratically() {
    let grid = PhaseGrid::build(GridSpec::default()).unwrap();
    let eq = global_equilibrium(&grid, grid.spec.gamma0).unwrap();
    let op = LowRankOperator::build(&grid, &eq);
    let basis = build_basis(&grid, &eq);

    // The remainder depends on the field only through its five moments, so
    // the probe needs macroscopic content of order one; pure noise projects
    // to nearly nothing on a fine grid and would sit at the roundoff floor.
    let mut f = random_fiber_field(&grid, 99, 11);
    let noise_norm = grid.norm(&f);
    for (k, v) in f.iter_mut().enumerate() {
        *v = 0.5 * *v / noise_norm + 0.6 * basis.e[0][k] + 0.4 * basis.e[1][k]
            - 0.3 * basis.e[2][k]
            + 0.5 * basis.e[4][k];
    }
    let norm = grid.norm(&f);
    for v in f.iter_mut() {
        *v /= norm;
    }

    let mut points = Vec::new();
    for eps in [1e-4, 1e-3, 1e-2, 1e-1] {
        let scaled: Vec<f64> = f.iter().map(|v| eps * v).collect();
        let remainder = gamma_defect(&grid, &eq, &op, &scaled).unwrap();
        points.push((eps.ln(), grid.norm(&remainder).ln()));
    }
    let slope = least_squares_slope(&points);
    assert!(
        (slope - 2.0).abs() <= 0.1,
        "log-log slope {slope:.4} outside 2.0 +- 0.1"
    );
    println!("criterion 11 PASS: remainder norm slope {slope:.4} over eps in [1e-4, 1e-1]");
}

#[test]
fn acceptance_12_hessian_matches_finite_differences() {
    let fx = operator_fixture();
    let c = &fx.eq.consts;
    let eta_target = c.eta0 + 0.02;
    let target = Macrostate {
        n: 1.05,
        u: [0.05, -0.03, 0.02],
        gamma: solve_gamma(&fx.grid, eta_target).unwrap(),
        eta: eta_target,
    };
    let st = transitional_state(&fx.grid, &fx.eq, &target, 0.6).unwrap();
    let hess = HessianQ::new(&fx.grid, &st).unwrap();

    // Equilibrium family as a function of the five parameters; the thermal
    // direction moves through the grid's own temperature inversion.
    let eval_family = |dz: [f64; 5]| -> Vec<f64> {
        let eta = st.eta + dz[4];
        let state = Macrostate {
            n: st.n + dz[0],
            u: [st.u[0] + dz[1], st.u[1] + dz[2], st.u[2] + dz[3]],
            gamma: if dz[4] == 0.0 {
                st.gamma
            } else {
                solve_gamma(&fx.grid, eta).unwrap()
            },
            eta,
        };
        eval_juttner(&fx.grid, &state).unwrap().values
    };
    let steps = [1e-3f64, 1e-4, 1e-4, 1e-4, 1e-3];
    let richardson = |coarse: f64, fine: f64| (4.0 * fine - coarse) / 3.0;

    // Centered differences lose validity in the far occupancy tail, where
    // higher derivatives of the family grow with powers of the node energy;
    // the samples stay in the occupied region.
    let fmax = hess.f_theta.iter().fold(0.0f64, |m, v| m.max(*v));
    let qualifying: Vec<usize> = (0..fx.grid.n_nodes)
        .filter(|&k| hess.f_theta[k] > 1e-8 * fmax)
        .collect();
    let stride = (qualifying.len() / 12).max(1);
    let nodes: Vec<usize> = qualifying
        .iter()
        .step_by(stride)
        .take(12)
        .copied()
        .collect();
    assert!(nodes.len() >= 8, "only {} usable sample nodes", nodes.len());

    let base = eval_family([0.0; 5]);
    let mut worst = 0.0f64;
    for &k in &nodes {
        let q = hess.eval(
            [fx.grid.p[0][k], fx.grid.p[1][k], fx.grid.p[2][k]],
            fx.grid.i_energy[k],
        );
        let mut fd = [[0.0; 5]; 5];
        for i in 0..5 {
            for j in i..5 {
                let second = |hi: f64, hj: f64| -> f64 {
                    if i == j {
                        let mut dz = [0.0; 5];
                        dz[i] = hi;
                        let plus = eval_family(dz)[k];
                        dz[i] = -hi;
                        let minus = eval_family(dz)[k];
                        (plus - 2.0 * base[k] + minus) / (hi * hi)
                    } else {
                        let mut dz = [0.0; 5];
                        dz[i] = hi;
                        dz[j] = hj;
                        let pp = eval_family(dz)[k];
                        dz[j] = -hj;
                        let pm = eval_family(dz)[k];
                        dz[i] = -hi;
                        let mm = eval_family(dz)[k];
                        dz[j] = hj;
                        let mp = eval_family(dz)[k];
                        (pp - pm - mp + mm) / (4.0 * hi * hj)
                    }
                };
                let d = richardson(
                    second(steps[i], steps[j]),
                    second(0.5 * steps[i], 0.5 * steps[j]),
                );
                fd[i][j] = d;
                fd[j][i] = d;
            }
        }
        let mut num = 0.0;
        let mut den = 0.0;
        for i in 0..5 {
            for j in 0..5 {
                let analytic = q[i][j] * hess.f_theta[k];
                num += (fd[i][j] - analytic) * (fd[i][j] - analytic);
                den += analytic * analytic;
            }
        }
        let rel = num.sqrt() / den.sqrt();
        assert!(rel <= 1e-6, "node {k}: relative error {rel:.3e}");
        worst = worst.max(rel);
    }
    println!(
        "criterion 12 PASS: {} sampled nodes, worst relative Hessian error {worst:.3e}",
        nodes.len()
    );
}

#[test]
fn acceptance_13_mild_form_iterates_contract() {
    let config = RunConfig {
        t_end: 0.5,
        scheme: Scheme::Duhamel { iterations: 5 },
        ..RunConfig::default()
    };
    let trace = run_simulation(&config).unwrap();
    let diffs = &trace.iterate_diffs;
    assert!(diffs.len() >= 2, "need at least two iterate distances");
    let mut min_ratio = f64::INFINITY;
    for w in diffs.windows(2) {
        let ratio = w[0] / w[1];
        assert!(
            ratio >= 2.0,
            "iterate distances {:.3e} -> {:.3e} contracted only {ratio:.2}x",
            w[0],
            w[1]
        );
        min_ratio = min_ratio.min(ratio);
    }
    println!(
        "criterion 13 PASS: {} iterate distances, weakest contraction {min_ratio:.1}x",
        diffs.len()
    );
}

#[test]
fn acceptance_14_decay_preset_is_monotone_and_decaying() {
    let start = Instant::now();
    let config = preset("decay1d").unwrap();
    let trace = run_simulation(&config).unwrap();
    assert!(
        trace.monitors.passed,
        "run monitors failed: {:?}",
        trace.monitors.failures
    );
    for w in trace.energy.windows(2) {
        assert!(
            w[1] <= w[0] + 1e-10,
            "energy increased by {:.3e}",
            w[1] - w[0]
        );
    }
    for component in &trace.pert_totals {
        for &v in component {
            assert!(v.abs() <= 1e-9, "perturbation total reached {v:.3e}");
        }
    }
    for &v in &trace.min_f {
        assert!(v >= -1e-14, "distribution minimum {v:.3e}");
    }
    let lambda0 = trace.lambda0.expect("decay rate fitted");
    assert!(lambda0 > 0.0, "fitted rate {lambda0:.3e} not positive");
    let elapsed = start.elapsed();
    assert!(
        elapsed.as_secs_f64() <= 600.0,
        "took {elapsed:?}, budget 10 min"
    );
    println!(
        "criterion 14 PASS: energy {:.3e} -> {:.3e}, lambda0 = {lambda0:.4}, {elapsed:?}",
        trace.energy.first().unwrap(),
        trace.energy.last().unwrap()
    );
}

#[test]
fn acceptance_15_fixed_seed_runs_are_bit_identical() {
    let config = RunConfig {
        grid: GridSpec {
            n_p: 8,
            p_max: 8.0,
            p_rule: MomentumRule::Lobatto,
            n_i: 4,
            i_max: 8.0,
            tail_tol: 1e-3,
            n_x: 8,
            ..GridSpec::default()
        },
        t_end: 0.5,
        dt: 0.05,
        ic: InitialCondition {
            epsilon: 1e-3,
            mode: 1,
            shape: ProfileShape::Sine,
        },
        ..RunConfig::default()
    };
    let dir = tempfile::tempdir().unwrap();
    let config_path = dir.path().join("config.json");
    std::fs::write(&config_path, serde_json::to_vec_pretty(&config).unwrap()).unwrap();

    let run = |out: &str| -> Vec<u8> {
        let out_dir = dir.path().join(out);
        let status = Command::new(env!("CARGO_BIN_EXE_marle-bgk"))
            .args([
                "decay1d",
                "--config",
                config_path.to_str().unwrap(),
                "--out",
                out_dir.to_str().unwrap(),
                "--quiet",
            ])
            .status()
            .unwrap();
        assert!(status.success(), "run into {out} exited with {status}");
        std::fs::read(out_dir.join("trace.csv")).unwrap()
    };
    let first = run("first");
    let second = run("second");
    assert!(!first.is_empty(), "trace.csv is empty");
    assert_eq!(first, second, "repeated runs differ");
    println!(
        "criterion 15 PASS: two seeded runs produced identical trace.csv ({} bytes)",
        first.len()
    );
}
