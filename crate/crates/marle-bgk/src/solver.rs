//! Time integration on the periodic slab.
//!
//! Transport is solved exactly per phase node by a spectral phase shift,
//! so the only discretization errors in a split step are the splitting
//! commutator and the local-equilibrium matching tolerance. The relaxation
//! substep is itself exact for the BGK flow: pure relaxation preserves the
//! five conserved moments, hence the local equilibrium is constant along
//! the substep and the frozen exponential is the true sub-flow.
//!
//! The alternative integrator re-solves the mild (Duhamel) form by fixed-
//! point iteration over a stored trajectory. Its kernel integral uses
//! integrating-factor weights on a piecewise-linear equilibrium history,
//! which keeps the global equilibrium an exact fixed point of the map; a
//! plain trapezoid rule would break that identity at quadrature order.

use std::sync::Arc;

use crate::collision::{conserved_moments, relaxation_step, CollisionMode, ConservedGram};
use crate::dist::{global_equilibrium, GlobalEquilibrium, Macrostate};
use crate::error::{Error, Result};
use crate::grid::{GridSpec, MomentumRule, PhaseGrid};
use crate::linear::build_basis;
use crate::moments::{entropy_density, macrostate_of};
use crate::rng::SplitMix64;
use rayon::prelude::*;
use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

/// Values over the slab, cell-major: `values[c * n_nodes + k]` is phase
/// node `k` in spatial cell `c`. Cells are disjoint slices, which is what
/// the per-cell collision and the parallel loops rely on.
#[derive(Clone, Debug, PartialEq)]
pub struct SlabField {
    n_x: usize,
    n_nodes: usize,
    pub values: Vec<f64>,
}

impl SlabField {
    pub fn zeros(grid: &PhaseGrid) -> Self {
        SlabField {
            n_x: grid.x.len(),
            n_nodes: grid.n_nodes,
            values: vec![0.0; grid.x.len() * grid.n_nodes],
        }
    }

    /// Replicates one fiber into every cell.
    pub fn uniform(grid: &PhaseGrid, fiber: &[f64]) -> Self {
        let mut field = SlabField::zeros(grid);
        for cell in field.values.chunks_mut(grid.n_nodes) {
            cell.copy_from_slice(fiber);
        }
        field
    }

    pub fn n_x(&self) -> usize {
        self.n_x
    }

    pub fn n_nodes(&self) -> usize {
        self.n_nodes
    }

    pub fn cell(&self, c: usize) -> &[f64] {
        &self.values[c * self.n_nodes..(c + 1) * self.n_nodes]
    }

    pub fn cell_mut(&mut self, c: usize) -> &mut [f64] {
        &mut self.values[c * self.n_nodes..(c + 1) * self.n_nodes]
    }
}

/// Slab L2 norm in the phase-space quadrature and the cell measure.
pub fn slab_norm(grid: &PhaseGrid, field: &SlabField) -> f64 {
    let mut acc = 0.0;
    for cell in field.values.chunks(grid.n_nodes) {
        for (v, w) in cell.iter().zip(&grid.weight) {
            acc += v * v * w;
        }
    }
    (acc * grid.dx).sqrt()
}

fn slab_diff_norm(grid: &PhaseGrid, a: &SlabField, b: &SlabField) -> f64 {
    let mut acc = 0.0;
    for (ca, cb) in a
        .values
        .chunks(grid.n_nodes)
        .zip(b.values.chunks(grid.n_nodes))
    {
        for k in 0..grid.n_nodes {
            let d = ca[k] - cb[k];
            acc += d * d * grid.weight[k];
        }
    }
    (acc * grid.dx).sqrt()
}

/// Shifts every phase node's spatial profile by `(p1/p0) dt`, exactly for
/// every resolvable Fourier mode. On even cell counts the unpaired
/// highest mode carries no phase direction; it is attenuated by the real
/// part (cosine) of its shift factor. Fields produced by the initial-
/// condition builder have no content there.
pub fn transport_step(grid: &PhaseGrid, field: &mut SlabField, dt: f64) {
    let n_x = field.n_x;
    if n_x == 1 || dt == 0.0 {
        return;
    }
    let n_nodes = grid.n_nodes;
    let mut lines = vec![Complex::new(0.0, 0.0); n_nodes * n_x];
    for c in 0..n_x {
        let cell = &field.values[c * n_nodes..(c + 1) * n_nodes];
        for k in 0..n_nodes {
            lines[k * n_x + c].re = cell[k];
        }
    }
    shift_lines(grid, &mut lines, dt);
    let inv = 1.0 / n_x as f64;
    for c in 0..n_x {
        let cell = &mut field.values[c * n_nodes..(c + 1) * n_nodes];
        for k in 0..n_nodes {
            cell[k] = lines[k * n_x + c].re * inv;
        }
    }
}

/// Forward transform, phase multiply, inverse transform on node-major
/// lines; output is unnormalized by `n_x`.
fn shift_lines(grid: &PhaseGrid, lines: &mut [Complex<f64>], dt: f64) {
    let n_x = lines.len() / grid.n_nodes;
    let mut planner = FftPlanner::new();
    let fft: Arc<dyn Fft<f64>> = planner.plan_fft_forward(n_x);
    let ifft: Arc<dyn Fft<f64>> = planner.plan_fft_inverse(n_x);
    let scratch_len = fft
        .get_inplace_scratch_len()
        .max(ifft.get_inplace_scratch_len());
    let l_x = grid.spec.l_x;
    let half = n_x / 2;
    let even = n_x.is_multiple_of(2);
    lines.par_chunks_mut(n_x).enumerate().for_each_init(
        || vec![Complex::new(0.0, 0.0); scratch_len],
        |scratch, (k, line)| {
            fft.process_with_scratch(line, scratch);
            let shift = grid.p[0][k] / grid.p0[k] * dt;
            let base = std::f64::consts::TAU / l_x * shift;
            for (m, bin) in line.iter_mut().enumerate().skip(1) {
                if even && m == half {
                    *bin *= (base * half as f64).cos();
                } else {
                    let mm = if m <= half {
                        m as f64
                    } else {
                        m as f64 - n_x as f64
                    };
                    *bin *= Complex::from_polar(1.0, -base * mm);
                }
            }
            ifft.process_with_scratch(line, scratch);
        },
    );
}

fn shifted_copy(grid: &PhaseGrid, src: &SlabField, dt: f64) -> SlabField {
    let mut out = src.clone();
    transport_step(grid, &mut out, dt);
    out
}

/// Splitting scheme of a time step, or the mild-form iteration count.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scheme {
    /// Transport half step, relaxation, transport half step; second order.
    Strang,
    /// Transport then relaxation; first order.
    Lie,
    /// Fixed-point iteration on the mild form over the whole horizon.
    Duhamel { iterations: u32 },
}

/// Split integrator with per-cell warm starts and optional exact
/// restoration of the five conserved moments after each relaxation.
pub struct Stepper<'a> {
    grid: &'a PhaseGrid,
    scheme: Scheme,
    mode: CollisionMode,
    tau: f64,
    gram: Option<ConservedGram>,
    states: Vec<Option<Macrostate>>,
}

impl<'a> Stepper<'a> {
    pub fn new(
        grid: &'a PhaseGrid,
        eq: &GlobalEquilibrium,
        scheme: Scheme,
        mode: CollisionMode,
        conservative: bool,
    ) -> Result<Self> {
        if let Scheme::Duhamel { .. } = scheme {
            return Err(Error::Config {
                message: "the duhamel scheme integrates whole trajectories; use run_simulation \
                          or duhamel_iterate"
                    .into(),
            });
        }
        let gram = conservative.then(|| ConservedGram::build(grid, &eq.f0));
        Ok(Stepper {
            grid,
            scheme,
            mode,
            tau: grid.spec.tau,
            gram,
            states: vec![None; grid.x.len()],
        })
    }

    /// Advances the absolute distribution by one step of length `dt`.
    pub fn step(&mut self, field: &mut SlabField, dt: f64) -> Result<()> {
        match self.scheme {
            Scheme::Strang => {
                transport_step(self.grid, field, 0.5 * dt);
                self.collide(field, dt)?;
                transport_step(self.grid, field, 0.5 * dt);
            }
            Scheme::Lie => {
                transport_step(self.grid, field, dt);
                self.collide(field, dt)?;
            }
            Scheme::Duhamel { .. } => unreachable!("rejected in Stepper::new"),
        }
        Ok(())
    }

    fn collide(&mut self, field: &mut SlabField, dt: f64) -> Result<()> {
        let grid = self.grid;
        let tau = self.tau;
        let mode = self.mode;
        let gram = self.gram.as_ref();
        field
            .values
            .par_chunks_mut(grid.n_nodes)
            .zip(self.states.par_iter_mut())
            .try_for_each(|(cell, state)| -> Result<()> {
                let target = conserved_moments(grid, cell);
                let matched = relaxation_step(grid, cell, dt, tau, mode, state.as_ref())?;
                if let Some(g) = gram {
                    g.project(grid, cell, &target);
                }
                *state = Some(matched);
                Ok(())
            })
    }
}

/// Spatial profile of the initial perturbation.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProfileShape {
    /// `sin(2 pi mode x / l_x)`.
    Sine,
    /// `cos(2 pi mode x / l_x)`.
    Cosine,
    /// `exp(-((x - l_x/2)/width)^2)`; mode is ignored.
    Gaussian { width: f64 },
    /// Seeded symmetric noise per cell and node; mode is ignored.
    Random,
}

/// Perturbation descriptor. The momentum fiber of the smooth shapes is a
/// fixed mix of a momentum-flux mode and a heat mode, multiplied by
/// `sqrt(F0)`; the builder then projects the five conserved totals of the
/// perturbation to zero.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InitialCondition {
    pub epsilon: f64,
    pub mode: u32,
    pub shape: ProfileShape,
}

impl Default for InitialCondition {
    fn default() -> Self {
        InitialCondition {
            epsilon: 1e-3,
            mode: 1,
            shape: ProfileShape::Sine,
        }
    }
}

/// Largest perturbation amplitude accepted by the builder.
pub const EPSILON_GUARD: f64 = 0.1;

/// Builds the absolute initial distribution `F0 + sqrt(F0) f` with the
/// five conserved totals of `f` projected to exactly zero.
pub fn initial_condition(
    grid: &PhaseGrid,
    eq: &GlobalEquilibrium,
    ic: &InitialCondition,
    seed: u64,
) -> Result<SlabField> {
    if !(ic.epsilon.is_finite() && ic.epsilon.abs() <= EPSILON_GUARD) {
        return Err(Error::SmallData {
            what: "initial perturbation amplitude",
            value: ic.epsilon,
        });
    }
    let n_x = grid.x.len();
    match ic.shape {
        ProfileShape::Sine | ProfileShape::Cosine => {
            // Keep the profile inside the resolvable, phase-unambiguous
            // Fourier range so transport is exact on it.
            let max_mode = if n_x.is_multiple_of(2) {
                n_x / 2
            } else {
                n_x.div_ceil(2)
            };
            if ic.mode as usize >= max_mode && n_x > 1 {
                return Err(Error::Config {
                    message: format!(
                        "ic.mode = {} is not resolvable on {} cells (need mode < {})",
                        ic.mode, n_x, max_mode
                    ),
                });
            }
            if n_x == 1 && ic.mode != 0 {
                return Err(Error::Config {
                    message: "ic.mode must be 0 on a single-cell slab".into(),
                });
            }
        }
        ProfileShape::Gaussian { width } => {
            if !(width.is_finite() && width > 0.0) {
                return Err(Error::Config {
                    message: format!("ic.shape gaussian width must be positive, got {width}"),
                });
            }
        }
        ProfileShape::Random => {}
    }

    let mut pert = SlabField::zeros(grid);
    match ic.shape {
        ProfileShape::Random => {
            let mut rng = SplitMix64::stream(seed, 0x6963_7264);
            for cell in pert.values.chunks_mut(grid.n_nodes) {
                for (v, s) in cell.iter_mut().zip(&eq.sqrt_f0) {
                    *v = ic.epsilon * rng.next_sym() * s;
                }
            }
        }
        _ => {
            let c = &eq.consts;
            let fiber: Vec<f64> = (0..grid.n_nodes)
                .map(|k| {
                    let flux = grid.p[0][k] / grid.p0[k];
                    let heat = grid.inv_ip0[k] - c.eta0;
                    (flux + heat) * eq.sqrt_f0[k]
                })
                .collect();
            for (ci, cell) in pert.values.chunks_mut(grid.n_nodes).enumerate() {
                let xs = grid.x[ci];
                let shape = match ic.shape {
                    ProfileShape::Sine => {
                        (std::f64::consts::TAU * ic.mode as f64 * xs / grid.spec.l_x).sin()
                    }
                    ProfileShape::Cosine => {
                        (std::f64::consts::TAU * ic.mode as f64 * xs / grid.spec.l_x).cos()
                    }
                    ProfileShape::Gaussian { width } => {
                        let r = (xs - 0.5 * grid.spec.l_x) / width;
                        (-r * r).exp()
                    }
                    ProfileShape::Random => unreachable!(),
                };
                for (v, g) in cell.iter_mut().zip(&fiber) {
                    *v = ic.epsilon * shape * g;
                }
            }
        }
    }

    // Project the five conserved totals of the perturbation to zero by a
    // uniform-in-x correction along the orthonormal invariant directions.
    let basis = build_basis(grid, eq);
    for e in basis.e.iter() {
        let mut total = 0.0;
        for cell in pert.values.chunks(grid.n_nodes) {
            total += grid.inner(cell, e);
        }
        let coeff = total / n_x as f64;
        for cell in pert.values.chunks_mut(grid.n_nodes) {
            for (v, b) in cell.iter_mut().zip(e) {
                *v -= coeff * b;
            }
        }
    }

    let mut field = SlabField::uniform(grid, &eq.f0);
    for (cell, pcell) in field
        .values
        .chunks_mut(grid.n_nodes)
        .zip(pert.values.chunks(grid.n_nodes))
    {
        for k in 0..grid.n_nodes {
            cell[k] += eq.sqrt_f0[k] * pcell[k];
        }
    }
    Ok(field)
}

/// Perturbation variables of an absolute slab: `(F - F0)/sqrt(F0)` per
/// cell, zero where the equilibrium has underflowed.
pub fn perturbation_of(grid: &PhaseGrid, eq: &GlobalEquilibrium, field: &SlabField) -> SlabField {
    let mut out = SlabField::zeros(grid);
    for (dst, src) in out
        .values
        .chunks_mut(grid.n_nodes)
        .zip(field.values.chunks(grid.n_nodes))
    {
        for k in 0..grid.n_nodes {
            let s = eq.sqrt_f0[k];
            dst[k] = if s > 0.0 {
                (src[k] - eq.f0[k]) / s
            } else {
                0.0
            };
        }
    }
    out
}

/// Sobolev-type energy of a perturbation slab: the squared L2 norms of the
/// spatial derivatives up to the given order, evaluated spectrally.
pub fn energy_functional(grid: &PhaseGrid, f: &SlabField, order: u32) -> f64 {
    let n_x = f.n_x;
    let n_nodes = grid.n_nodes;
    if n_x == 1 {
        // Single cell: only the zeroth derivative exists.
        let mut acc = 0.0;
        for (v, w) in f.values.iter().zip(&grid.weight) {
            acc += v * v * w;
        }
        return acc * grid.spec.l_x;
    }
    let mut lines = vec![Complex::new(0.0, 0.0); n_nodes * n_x];
    for c in 0..n_x {
        let cell = &f.values[c * n_nodes..(c + 1) * n_nodes];
        for k in 0..n_nodes {
            lines[k * n_x + c].re = cell[k];
        }
    }
    let mut planner = FftPlanner::new();
    let fft = planner.plan_fft_forward(n_x);
    let scratch_len = fft.get_inplace_scratch_len();
    let half = n_x / 2;
    let l_x = grid.spec.l_x;
    let mut per_node = vec![0.0; n_nodes];
    lines
        .par_chunks_mut(n_x)
        .zip(per_node.par_iter_mut())
        .for_each_init(
            || vec![Complex::new(0.0, 0.0); scratch_len],
            |scratch, (line, out)| {
                fft.process_with_scratch(line, scratch);
                let mut acc = 0.0;
                for (m, bin) in line.iter().enumerate() {
                    let mm = if m <= half {
                        m as f64
                    } else {
                        m as f64 - n_x as f64
                    };
                    let ksq = (std::f64::consts::TAU * mm / l_x).powi(2);
                    let mut series = 1.0;
                    let mut pow = 1.0;
                    for _ in 0..order {
                        pow *= ksq;
                        series += pow;
                    }
                    acc += series * bin.norm_sqr();
                }
                *out = acc;
            },
        );
    let scale = l_x / (n_x as f64 * n_x as f64);
    let mut energy = 0.0;
    for (p, w) in per_node.iter().zip(&grid.weight) {
        energy += p * w;
    }
    energy * scale
}

/// Time series of the run diagnostics with the fitted tail decay rate.
#[derive(Clone, Debug, Serialize)]
pub struct EnergyTrace {
    pub times: Vec<f64>,
    pub energy: Vec<f64>,
    pub mass: Vec<f64>,
    /// Totals of `(1+I)p^mu F`, time-indexed per component.
    pub four_momentum: [Vec<f64>; 4],
    pub entropy: Vec<f64>,
    /// Conserved totals of the perturbation, order `{1, (1+I)p^0, (1+I)p^i}`;
    /// initialized to zero, so any excursion is a defect.
    pub pert_totals: [Vec<f64>; 5],
    pub min_f: Vec<f64>,
    /// Per-cell macrostates at the thinned macro cadence.
    pub macro_rows: Vec<MacroRow>,
    /// Sup-over-time trajectory distances between successive mild-form
    /// iterates; empty for splitting schemes.
    pub iterate_diffs: Vec<f64>,
    pub lambda0: Option<f64>,
    pub fit_residual: Option<f64>,
    pub monitors: MonitorReport,
}

#[derive(Clone, Copy, Debug, Serialize)]
pub struct MacroRow {
    pub t: f64,
    pub cell: usize,
    pub x: f64,
    pub state: Macrostate,
}

/// Outcome of the run-time guards.
#[derive(Clone, Debug, Serialize)]
pub struct MonitorReport {
    pub passed: bool,
    pub failures: Vec<String>,
}

/// Monitor budgets: energy growth slack between samples, perturbation
/// total excursion, distribution negativity, relative drift of conserved
/// totals.
pub const ENERGY_GROWTH_SLACK: f64 = 1e-10;
pub const PERT_TOTAL_TOL: f64 = 1e-9;
pub const NEGATIVITY_TOL: f64 = -1e-14;
pub const TOTAL_DRIFT_TOL: f64 = 1e-8;

/// Full run description; serializes as the versioned JSON config.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub version: u32,
    pub grid: GridSpec,
    pub t_end: f64,
    pub dt: f64,
    pub scheme: Scheme,
    pub collision: CollisionMode,
    /// Derivative order of the energy functional.
    pub energy_order: u32,
    /// Trace sampling cadence in steps.
    pub output_every: usize,
    /// Macrostate snapshot cadence in samples; 0 disables.
    pub macro_every: usize,
    /// Restore the five conserved moments exactly after each relaxation.
    pub conservative: bool,
    pub ic: InitialCondition,
    pub seed: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            version: 1,
            grid: GridSpec {
                d: 2.0,
                gamma0: 1.0,
                tau: 1.0,
                p_max: 12.0,
                n_p: 12,
                p_rule: MomentumRule::SinhLegendre { stretch: 2.5 },
                i_max: 10.0,
                n_i: 8,
                n_x: 32,
                l_x: 1.0,
                tail_tol: 1e-4,
            },
            t_end: 10.0,
            dt: 0.05,
            scheme: Scheme::Strang,
            collision: CollisionMode::Frozen,
            energy_order: 3,
            output_every: 1,
            macro_every: 10,
            conservative: true,
            ic: InitialCondition::default(),
            seed: 7,
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        if self.version != 1 {
            return Err(Error::Config {
                message: format!("unsupported config version {}", self.version),
            });
        }
        self.grid.validate()?;
        if !(self.dt.is_finite() && self.dt > 0.0) {
            return Err(Error::Config {
                message: format!("dt must be positive, got {}", self.dt),
            });
        }
        if !(self.t_end.is_finite() && self.t_end >= self.dt) {
            return Err(Error::Config {
                message: format!("t_end must be at least dt, got {}", self.t_end),
            });
        }
        if self.energy_order > 12 {
            return Err(Error::Config {
                message: format!(
                    "energy_order {} is outside the supported range 0..=12",
                    self.energy_order
                ),
            });
        }
        if self.output_every == 0 {
            return Err(Error::Config {
                message: "output_every must be at least 1".into(),
            });
        }
        if let Scheme::Duhamel { iterations } = self.scheme {
            if iterations == 0 {
                return Err(Error::Config {
                    message: "duhamel iterations must be at least 1".into(),
                });
            }
        }
        if !(self.ic.epsilon.is_finite() && self.ic.epsilon.abs() <= EPSILON_GUARD) {
            return Err(Error::Config {
                message: format!(
                    "ic.epsilon = {} exceeds the small-data guard {}",
                    self.ic.epsilon, EPSILON_GUARD
                ),
            });
        }
        Ok(())
    }

    /// Step count and the exactly matching step size.
    fn steps(&self) -> (usize, f64) {
        let n = (self.t_end / self.dt).round().max(1.0) as usize;
        (n, self.t_end / n as f64)
    }
}

struct Monitors {
    failures: Vec<String>,
    energy_prev: Option<f64>,
    energy_first: Option<f64>,
    totals_first: Option<[f64; 5]>,
    check_monotone: bool,
}

impl Monitors {
    fn new(check_monotone: bool) -> Self {
        Monitors {
            failures: Vec::new(),
            energy_prev: None,
            energy_first: None,
            totals_first: None,
            check_monotone,
        }
    }

    fn observe(
        &mut self,
        t: f64,
        energy: f64,
        totals: &[f64; 5],
        pert: &[f64; 5],
        min_f: f64,
    ) -> Result<()> {
        if let Some(e0) = self.energy_first {
            if e0 > 0.0 && energy > 10.0 * e0 {
                return Err(Error::SmallData {
                    what: "energy blow-up guard",
                    value: energy / e0,
                });
            }
        } else {
            self.energy_first = Some(energy);
        }
        if self.check_monotone {
            if let Some(prev) = self.energy_prev {
                if energy > prev + ENERGY_GROWTH_SLACK {
                    self.fail(format!(
                        "energy increased by {:.3e} at t = {:.6}",
                        energy - prev,
                        t
                    ));
                }
            }
        }
        self.energy_prev = Some(energy);
        for (a, v) in pert.iter().enumerate() {
            if v.abs() > PERT_TOTAL_TOL {
                self.fail(format!(
                    "perturbation total {} reached {:.3e} at t = {:.6}",
                    a, v, t
                ));
                break;
            }
        }
        if min_f < NEGATIVITY_TOL {
            self.fail(format!(
                "distribution minimum {:.3e} at t = {:.6}",
                min_f, t
            ));
        }
        if let Some(first) = self.totals_first {
            for a in 0..5 {
                let scale = first[a].abs().max(1.0);
                if (totals[a] - first[a]).abs() > TOTAL_DRIFT_TOL * scale {
                    self.fail(format!(
                        "conserved total {} drifted {:.3e} at t = {:.6}",
                        a,
                        totals[a] - first[a],
                        t
                    ));
                    break;
                }
            }
        } else {
            self.totals_first = Some(*totals);
        }
        Ok(())
    }

    fn fail(&mut self, message: String) {
        // One report per failure kind keeps the trace readable.
        let kind = message.split(' ').next().unwrap_or("").to_string();
        if !self.failures.iter().any(|f| f.starts_with(&kind)) {
            self.failures.push(message);
        }
    }

    fn report(self) -> MonitorReport {
        MonitorReport {
            passed: self.failures.is_empty(),
            failures: self.failures,
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn sample(
    grid: &PhaseGrid,
    eq: &GlobalEquilibrium,
    field: &SlabField,
    t: f64,
    order: u32,
    trace: &mut EnergyTrace,
    monitors: &mut Monitors,
    with_macro: bool,
) -> Result<()> {
    let pert = perturbation_of(grid, eq, field);
    let energy = energy_functional(grid, &pert, order);

    let mut totals = [0.0; 5];
    let mut entropy = 0.0;
    for cell in field.values.chunks(grid.n_nodes) {
        let m = conserved_moments(grid, cell);
        for a in 0..5 {
            totals[a] += m[a];
        }
        entropy += entropy_density(grid, cell);
    }
    for v in totals.iter_mut() {
        *v *= grid.dx;
    }
    entropy *= grid.dx;

    let mut pert_totals = [0.0; 5];
    for cell in pert.values.chunks(grid.n_nodes) {
        let m = conserved_moments_weighted(grid, eq, cell);
        for a in 0..5 {
            pert_totals[a] += m[a];
        }
    }
    for v in pert_totals.iter_mut() {
        *v *= grid.dx;
    }

    let min_f = field.values.iter().fold(f64::INFINITY, |m, v| m.min(*v));

    monitors.observe(t, energy, &totals, &pert_totals, min_f)?;

    trace.times.push(t);
    trace.energy.push(energy);
    trace.mass.push(totals[0]);
    for mu in 0..4 {
        trace.four_momentum[mu].push(totals[1 + mu]);
    }
    trace.entropy.push(entropy);
    for a in 0..5 {
        trace.pert_totals[a].push(pert_totals[a]);
    }
    trace.min_f.push(min_f);

    if with_macro {
        for (c, cell) in field.values.chunks(grid.n_nodes).enumerate() {
            let state = macrostate_of(grid, cell)?;
            trace.macro_rows.push(MacroRow {
                t,
                cell: c,
                x: grid.x[c],
                state,
            });
        }
    }
    Ok(())
}

/// Conserved-weight moments of a perturbation against `sqrt(F0)`.
fn conserved_moments_weighted(grid: &PhaseGrid, eq: &GlobalEquilibrium, f: &[f64]) -> [f64; 5] {
    let mut m = [0.0; 5];
    for k in 0..grid.n_nodes {
        let fw = f[k] * eq.sqrt_f0[k] * grid.weight[k];
        let opi = 1.0 + grid.i_energy[k];
        m[0] += fw;
        m[1] += grid.ip0[k] * fw;
        m[2] += opi * grid.p[0][k] * fw;
        m[3] += opi * grid.p[1][k] * fw;
        m[4] += opi * grid.p[2][k] * fw;
    }
    m
}

fn empty_trace() -> EnergyTrace {
    EnergyTrace {
        times: Vec::new(),
        energy: Vec::new(),
        mass: Vec::new(),
        four_momentum: std::array::from_fn(|_| Vec::new()),
        entropy: Vec::new(),
        pert_totals: std::array::from_fn(|_| Vec::new()),
        min_f: Vec::new(),
        macro_rows: Vec::new(),
        iterate_diffs: Vec::new(),
        lambda0: None,
        fit_residual: None,
        monitors: MonitorReport {
            passed: true,
            failures: Vec::new(),
        },
    }
}

/// Integrates the configured run and returns the full trace. The energy
/// monotonicity guard applies to the splitting schemes only; a truncated
/// mild-form iteration is not a flow and its transient is not asserted.
pub fn run_simulation(config: &RunConfig) -> Result<EnergyTrace> {
    config.validate()?;
    let grid = PhaseGrid::build(config.grid.clone())?;
    let eq = global_equilibrium(&grid, grid.spec.gamma0)?;
    let field0 = initial_condition(&grid, &eq, &config.ic, config.seed)?;
    let (n_steps, dt) = config.steps();

    match config.scheme {
        Scheme::Duhamel { iterations } => {
            run_duhamel(&grid, &eq, config, field0, n_steps, dt, iterations)
        }
        _ => run_splitting(&grid, &eq, config, field0, n_steps, dt),
    }
}

fn run_splitting(
    grid: &PhaseGrid,
    eq: &GlobalEquilibrium,
    config: &RunConfig,
    mut field: SlabField,
    n_steps: usize,
    dt: f64,
) -> Result<EnergyTrace> {
    let mut stepper = Stepper::new(
        grid,
        eq,
        config.scheme,
        config.collision,
        config.conservative,
    )?;
    let mut trace = empty_trace();
    let mut monitors = Monitors::new(true);
    let mut samples_taken = 0usize;
    let macro_due =
        |samples: usize| config.macro_every != 0 && samples.is_multiple_of(config.macro_every);
    sample(
        grid,
        eq,
        &field,
        0.0,
        config.energy_order,
        &mut trace,
        &mut monitors,
        macro_due(0),
    )?;
    samples_taken += 1;
    for step_idx in 1..=n_steps {
        stepper.step(&mut field, dt)?;
        if step_idx % config.output_every == 0 || step_idx == n_steps {
            sample(
                grid,
                eq,
                &field,
                step_idx as f64 * dt,
                config.energy_order,
                &mut trace,
                &mut monitors,
                macro_due(samples_taken),
            )?;
            samples_taken += 1;
        }
    }
    finish_trace(&mut trace, monitors);
    Ok(trace)
}

/// Upper bound on the mild-form trajectory storage.
const DUHAMEL_STORAGE_BYTES: usize = 2 << 30;

fn run_duhamel(
    grid: &PhaseGrid,
    eq: &GlobalEquilibrium,
    config: &RunConfig,
    field0: SlabField,
    n_steps: usize,
    dt: f64,
    iterations: u32,
) -> Result<EnergyTrace> {
    let slab_bytes = field0.values.len() * std::mem::size_of::<f64>();
    if (n_steps + 1).saturating_mul(slab_bytes).saturating_mul(3) > DUHAMEL_STORAGE_BYTES {
        return Err(Error::Config {
            message: format!(
                "duhamel trajectory storage for {} slices of {} bytes exceeds the budget; \
                 shorten the horizon or coarsen dt",
                n_steps + 1,
                slab_bytes
            ),
        });
    }
    // First iterate: collisionless flow of the initial data, each slice
    // shifted from t = 0 in one exact step.
    let mut traj: Vec<SlabField> = (0..=n_steps)
        .map(|j| shifted_copy(grid, &field0, j as f64 * dt))
        .collect();
    let mut diffs = Vec::with_capacity(iterations as usize);
    for _ in 0..iterations {
        let next = duhamel_iterate(grid, &field0, &traj, dt, grid.spec.tau)?;
        let mut diff = 0.0f64;
        for (a, b) in next.iter().zip(&traj) {
            diff = diff.max(slab_diff_norm(grid, a, b));
        }
        diffs.push(diff);
        traj = next;
    }

    let mut trace = empty_trace();
    let mut monitors = Monitors::new(false);
    let mut samples_taken = 0usize;
    for (j, slab) in traj.iter().enumerate() {
        if j.is_multiple_of(config.output_every) || j == n_steps {
            let with_macro =
                config.macro_every != 0 && samples_taken.is_multiple_of(config.macro_every);
            sample(
                grid,
                eq,
                slab,
                j as f64 * dt,
                config.energy_order,
                &mut trace,
                &mut monitors,
                with_macro,
            )?;
            samples_taken += 1;
        }
    }
    trace.iterate_diffs = diffs;
    finish_trace(&mut trace, monitors);
    Ok(trace)
}

fn finish_trace(trace: &mut EnergyTrace, monitors: Monitors) {
    if let Ok((lambda, residual)) = fit_decay_rate_tail(&trace.times, &trace.energy) {
        trace.lambda0 = Some(lambda);
        trace.fit_residual = Some(residual);
    }
    trace.monitors = monitors.report();
}

/// One pass of the mild-form map over a stored trajectory: damped exact
/// transport of the initial data plus the integrating-factor sum of the
/// shifted local-equilibrium history, piecewise linear in time.
pub fn duhamel_iterate(
    grid: &PhaseGrid,
    initial: &SlabField,
    traj: &[SlabField],
    dt: f64,
    tau: f64,
) -> Result<Vec<SlabField>> {
    if traj.is_empty() {
        return Err(Error::Config {
            message: "duhamel trajectory must contain the initial slice".into(),
        });
    }
    if !(dt > 0.0 && tau > 0.0) {
        return Err(Error::Domain {
            what: "dt or tau",
            value: dt.min(tau),
        });
    }
    let n_nodes = grid.n_nodes;
    let last = traj.len() - 1;

    // Equilibrium history: per-slice, per-cell matched equilibria.
    let mut eqs: Vec<SlabField> = Vec::with_capacity(traj.len());
    for slab in traj {
        let mut fe = SlabField::zeros(grid);
        fe.values
            .par_chunks_mut(n_nodes)
            .zip(slab.values.par_chunks(n_nodes))
            .try_for_each(|(dst, src)| -> Result<()> {
                let matched = crate::collision::local_equilibrium(grid, src)?;
                dst.copy_from_slice(&matched.field);
                Ok(())
            })?;
        eqs.push(fe);
    }

    // Per-node substep coefficients: x = dt w / tau, alpha = 1 - e^{-x},
    // beta = 1 - alpha/x, shared with the relaxation integrator.
    let x: Vec<f64> = grid.inv_ip0.iter().map(|w| dt * w / tau).collect();
    let alpha_minus_beta: Vec<f64> = x
        .iter()
        .map(|&x| {
            let alpha = -(-x).exp_m1();
            alpha - beta_of(x, alpha)
        })
        .collect();
    let beta: Vec<f64> = x.iter().map(|&x| beta_of(x, -(-x).exp_m1())).collect();

    let mut out = Vec::with_capacity(traj.len());
    for j in 0..=last {
        let t_j = j as f64 * dt;
        let mut acc = shifted_copy(grid, initial, t_j);
        for (cell, _) in acc.values.chunks_mut(n_nodes).zip(0..) {
            for k in 0..n_nodes {
                cell[k] *= (-t_j * grid.inv_ip0[k] / tau).exp();
            }
        }
        for i in 0..=j {
            let m = j - i;
            let shifted = if m == 0 {
                eqs[i].clone()
            } else {
                shifted_copy(grid, &eqs[i], m as f64 * dt)
            };
            for (dst, src) in acc
                .values
                .chunks_mut(n_nodes)
                .zip(shifted.values.chunks(n_nodes))
            {
                for k in 0..n_nodes {
                    // Left-endpoint weight of interval [i, i+1] plus
                    // right-endpoint weight of interval [i-1, i].
                    let mut c = 0.0;
                    if m >= 1 {
                        c += alpha_minus_beta[k] * (-((m - 1) as f64) * x[k]).exp();
                    }
                    if i >= 1 {
                        c += beta[k] * (-(m as f64) * x[k]).exp();
                    }
                    dst[k] += c * src[k];
                }
            }
        }
        out.push(acc);
    }
    Ok(out)
}

/// `1 - (1 - e^{-x})/x`, series-stabilized near zero.
fn beta_of(x: f64, alpha: f64) -> f64 {
    if x < 1e-5 {
        x * (0.5 - x * (1.0 / 6.0 - x / 24.0))
    } else {
        1.0 - alpha / x
    }
}

/// Least-squares decay rate of `log energy` over samples with `t >=
/// t_start`; returns the rate (positive for decay) and the RMS residual
/// of the fit.
pub fn fit_decay_rate_from(times: &[f64], energy: &[f64], t_start: f64) -> Result<(f64, f64)> {
    let pts: Vec<(f64, f64)> = times
        .iter()
        .zip(energy)
        .filter(|(t, e)| **t >= t_start && **e > 0.0)
        .map(|(t, e)| (*t, e.ln()))
        .collect();
    if pts.len() < 10 {
        return Err(Error::SmallData {
            what: "decay-fit sample count",
            value: pts.len() as f64,
        });
    }
    let n = pts.len() as f64;
    let mean_t = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let mean_y = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let mut cov = 0.0;
    let mut var = 0.0;
    for (t, y) in &pts {
        cov += (t - mean_t) * (y - mean_y);
        var += (t - mean_t) * (t - mean_t);
    }
    if !(var > 0.0) {
        return Err(Error::SmallData {
            what: "decay-fit time spread",
            value: var,
        });
    }
    let slope = cov / var;
    let mut rss = 0.0;
    for (t, y) in &pts {
        let r = y - (mean_y + slope * (t - mean_t));
        rss += r * r;
    }
    Ok((-slope, (rss / n).sqrt()))
}

/// Tail fit skipping the leading 30% of the horizon as transient.
fn fit_decay_rate_tail(times: &[f64], energy: &[f64]) -> Result<(f64, f64)> {
    let (first, last) = match (times.first(), times.last()) {
        (Some(a), Some(b)) => (*a, *b),
        _ => {
            return Err(Error::SmallData {
                what: "decay-fit sample count",
                value: 0.0,
            })
        }
    };
    fit_decay_rate_from(times, energy, first + 0.3 * (last - first))
}

/// Decay rate of a finished trace on the default tail window.
pub fn fit_decay_rate(trace: &EnergyTrace) -> Result<(f64, f64)> {
    fit_decay_rate_tail(&trace.times, &trace.energy)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::MomentumRule;

    fn test_grid(n_x: usize) -> PhaseGrid {
        PhaseGrid::build(GridSpec {
            d: 2.0,
            p_max: 8.0,
            n_p: 6,
            p_rule: MomentumRule::Lobatto,
            i_max: 8.0,
            n_i: 3,
            n_x,
            l_x: 1.0,
            tail_tol: 1e-3,
            ..GridSpec::default()
        })
        .unwrap()
    }

    fn smooth_slab(grid: &PhaseGrid, seed: u64) -> SlabField {
        // Modes strictly below the unpaired one, random per-node phases
        // and amplitudes: transport is exact on this class.
        let n_x = grid.x.len();
        let mut rng = SplitMix64::stream(seed, 0x736c_6162);
        let mut field = SlabField::zeros(grid);
        for k in 0..grid.n_nodes {
            for m in 0..(n_x / 2) {
                let amp = rng.next_sym();
                let phase = std::f64::consts::PI * rng.next_sym();
                for c in 0..n_x {
                    let arg = std::f64::consts::TAU * m as f64 * grid.x[c] / grid.spec.l_x;
                    field.cell_mut(c)[k] += amp * (arg + phase).cos();
                }
            }
        }
        field
    }

    #[test]
    fn transport_leaves_uniform_fields() {
        let g = test_grid(8);
        let mut rng = SplitMix64::stream(3, 1);
        let fiber: Vec<f64> = (0..g.n_nodes).map(|_| rng.next_sym()).collect();
        let mut field = SlabField::uniform(&g, &fiber);
        let before = field.clone();
        transport_step(&g, &mut field, 0.37);
        let scale = fiber.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        for (a, b) in field.values.iter().zip(&before.values) {
            assert!((a - b).abs() <= 1e-13 * scale);
        }
    }

    #[test]
    fn transport_shifts_single_mode_exactly() {
        let g = test_grid(8);
        let n_x = 8;
        let mut field = SlabField::zeros(&g);
        let kx = std::f64::consts::TAU / g.spec.l_x;
        for c in 0..n_x {
            for k in 0..g.n_nodes {
                field.cell_mut(c)[k] = (kx * g.x[c] + 0.3).cos();
            }
        }
        let dt = 0.21;
        transport_step(&g, &mut field, dt);
        for c in 0..n_x {
            for k in 0..g.n_nodes {
                let v = g.p[0][k] / g.p0[k];
                let expect = (kx * (g.x[c] - v * dt) + 0.3).cos();
                assert!(
                    (field.cell(c)[k] - expect).abs() <= 1e-12,
                    "cell {c} node {k}"
                );
            }
        }
    }

    #[test]
    fn transport_composes_and_conserves() {
        let g = test_grid(8);
        let field = smooth_slab(&g, 11);
        let dt = 0.173;

        let mut whole = field.clone();
        transport_step(&g, &mut whole, dt);
        let mut halves = field.clone();
        transport_step(&g, &mut halves, 0.5 * dt);
        transport_step(&g, &mut halves, 0.5 * dt);
        let scale = slab_norm(&g, &field);
        assert!(slab_diff_norm(&g, &whole, &halves) <= 1e-13 * scale);

        // Per-node spatial integral and L2 norm are invariant.
        for k in 0..g.n_nodes {
            let (mut s0, mut s1, mut q0, mut q1) = (0.0, 0.0, 0.0, 0.0);
            for c in 0..8 {
                s0 += field.cell(c)[k];
                s1 += whole.cell(c)[k];
                q0 += field.cell(c)[k] * field.cell(c)[k];
                q1 += whole.cell(c)[k] * whole.cell(c)[k];
            }
            assert!((s0 - s1).abs() <= 1e-12 * s0.abs().max(1.0), "node {k}");
            assert!((q0 - q1).abs() <= 1e-12 * q0.max(1.0), "node {k}");
        }
    }

    #[test]
    fn uniform_equilibrium_is_a_step_fixed_point() {
        let g = test_grid(8);
        let eq = global_equilibrium(&g, 1.0).unwrap();
        let mut field = SlabField::uniform(&g, &eq.f0);
        let before = field.clone();
        let mut stepper =
            Stepper::new(&g, &eq, Scheme::Strang, CollisionMode::Frozen, true).unwrap();
        for _ in 0..3 {
            stepper.step(&mut field, 0.1).unwrap();
        }
        let drift = slab_diff_norm(&g, &field, &before);
        assert!(drift <= 1e-12 * slab_norm(&g, &before), "drift {drift:.3e}");
    }

    fn convergence_slope(scheme: Scheme) -> f64 {
        let g = test_grid(8);
        let eq = global_equilibrium(&g, 1.0).unwrap();
        let ic = InitialCondition {
            epsilon: 1e-2,
            mode: 1,
            shape: ProfileShape::Sine,
        };
        let field0 = initial_condition(&g, &eq, &ic, 1).unwrap();
        let t_end = 0.4;
        let run = |dt: f64| {
            let mut field = field0.clone();
            let mut stepper = Stepper::new(&g, &eq, scheme, CollisionMode::Frozen, false).unwrap();
            let n = (t_end / dt).round() as usize;
            for _ in 0..n {
                stepper.step(&mut field, dt).unwrap();
            }
            field
        };
        let coarse = run(0.1);
        let mid = run(0.05);
        let fine = run(0.025);
        let e1 = slab_diff_norm(&g, &coarse, &mid);
        let e2 = slab_diff_norm(&g, &mid, &fine);
        (e1 / e2).log2()
    }

    #[test]
    fn strang_is_second_order() {
        let slope = convergence_slope(Scheme::Strang);
        assert!((slope - 2.0).abs() <= 0.2, "slope {slope}");
    }

    #[test]
    fn lie_is_first_order() {
        let slope = convergence_slope(Scheme::Lie);
        assert!((slope - 1.0).abs() <= 0.2, "slope {slope}");
    }

    #[test]
    fn energy_matches_closed_form_and_is_monotone_in_order() {
        let g = test_grid(8);
        let eq = global_equilibrium(&g, 1.0).unwrap();
        let eps = 1e-3;
        let mut f = SlabField::zeros(&g);
        let kx = std::f64::consts::TAU / g.spec.l_x;
        for c in 0..8 {
            let s = (kx * g.x[c]).sin();
            for k in 0..g.n_nodes {
                f.cell_mut(c)[k] = eps * s * eq.sqrt_f0[k];
            }
        }
        let gsq = g.integrate(&eq.f0);
        let mut series = 0.0;
        let mut pow = 1.0;
        for j in 0..=3 {
            if j > 0 {
                pow *= kx * kx;
            }
            series += pow;
        }
        let expect = eps * eps * gsq * 0.5 * g.spec.l_x * series;
        let e3 = energy_functional(&g, &f, 3);
        assert!((e3 - expect).abs() <= 1e-12 * expect, "{e3} vs {expect}");

        let e0 = energy_functional(&g, &f, 0);
        let norm = slab_norm(&g, &f);
        assert!((e0 - norm * norm).abs() <= 1e-12 * e0);
        let e1 = energy_functional(&g, &f, 1);
        assert!(e0 < e1 && e1 < e3);
    }

    #[test]
    fn initial_condition_has_zero_totals() {
        let g = test_grid(8);
        let eq = global_equilibrium(&g, 1.0).unwrap();
        for shape in [
            ProfileShape::Sine,
            ProfileShape::Cosine,
            ProfileShape::Gaussian { width: 0.2 },
            ProfileShape::Random,
        ] {
            let ic = InitialCondition {
                epsilon: 1e-2,
                mode: 2,
                shape,
            };
            let field = initial_condition(&g, &eq, &ic, 5).unwrap();
            let pert = perturbation_of(&g, &eq, &field);
            let mut totals = [0.0; 5];
            for cell in pert.values.chunks(g.n_nodes) {
                let m = conserved_moments_weighted(&g, &eq, cell);
                for a in 0..5 {
                    totals[a] += m[a] * g.dx;
                }
            }
            for (a, v) in totals.iter().enumerate() {
                assert!(v.abs() <= 1e-14, "{shape:?} total {a}: {v:.3e}");
            }
        }
        let bad = InitialCondition {
            epsilon: 0.5,
            mode: 1,
            shape: ProfileShape::Sine,
        };
        assert!(initial_condition(&g, &eq, &bad, 0).is_err());
    }

    #[test]
    fn duhamel_fixes_the_global_equilibrium() {
        let g = test_grid(8);
        let eq = global_equilibrium(&g, 1.0).unwrap();
        let field0 = SlabField::uniform(&g, &eq.f0);
        let traj: Vec<SlabField> = (0..5).map(|_| field0.clone()).collect();
        let next = duhamel_iterate(&g, &field0, &traj, 0.1, 1.0).unwrap();
        let scale = slab_norm(&g, &field0);
        for (j, slab) in next.iter().enumerate() {
            let d = slab_diff_norm(&g, slab, &field0);
            assert!(d <= 1e-12 * scale, "slice {j}: {d:.3e}");
        }
    }

    #[test]
    fn duhamel_iterates_contract() {
        let g = test_grid(8);
        let eq = global_equilibrium(&g, 1.0).unwrap();
        let ic = InitialCondition {
            epsilon: 1e-3,
            mode: 1,
            shape: ProfileShape::Sine,
        };
        let field0 = initial_condition(&g, &eq, &ic, 2).unwrap();
        let dt = 0.1;
        let n = 4;
        let mut traj: Vec<SlabField> = (0..=n)
            .map(|j| shifted_copy(&g, &field0, j as f64 * dt))
            .collect();
        let mut diffs = Vec::new();
        for _ in 0..4 {
            let next = duhamel_iterate(&g, &field0, &traj, dt, 1.0).unwrap();
            let mut d = 0.0f64;
            for (a, b) in next.iter().zip(&traj) {
                d = d.max(slab_diff_norm(&g, a, b));
            }
            diffs.push(d);
            traj = next;
        }
        for w in diffs.windows(2) {
            assert!(
                w[1] <= w[0] / 2.0,
                "iterate differences {:?} not contracting",
                diffs
            );
        }
    }

    #[test]
    fn zero_amplitude_run_is_quiescent() {
        let config = RunConfig {
            grid: GridSpec {
                n_x: 8,
                ..test_grid(8).spec
            },
            t_end: 0.5,
            dt: 0.1,
            ic: InitialCondition {
                epsilon: 0.0,
                ..InitialCondition::default()
            },
            macro_every: 0,
            ..RunConfig::default()
        };
        let trace = run_simulation(&config).unwrap();
        assert!(trace.monitors.passed, "{:?}", trace.monitors.failures);
        for e in &trace.energy {
            assert!(*e <= 1e-24, "energy {e:.3e}");
        }
        assert!(trace.lambda0.is_none());
        let m0 = trace.mass[0];
        for m in &trace.mass {
            assert!((m - m0).abs() <= 1e-10 * m0.abs());
        }
    }

    #[test]
    fn short_decay_run_reports_decay() {
        let config = RunConfig {
            grid: GridSpec {
                n_x: 8,
                tau: 0.1,
                ..test_grid(8).spec
            },
            t_end: 6.0,
            dt: 0.05,
            ic: InitialCondition {
                epsilon: 1e-3,
                mode: 1,
                shape: ProfileShape::Sine,
            },
            macro_every: 20,
            ..RunConfig::default()
        };
        let trace = run_simulation(&config).unwrap();
        assert!(trace.monitors.passed, "{:?}", trace.monitors.failures);
        let lambda = trace.lambda0.expect("fit should succeed");
        assert!(lambda > 0.0, "lambda0 {lambda}");
        assert!(!trace.macro_rows.is_empty());
        // Energy decays overall, not just in the fit. The coarse test
        // fiber is weakly damped; ten percent over the horizon matches
        // the observed rate with margin.
        assert!(trace.energy.last().unwrap() < &(trace.energy[0] * 0.92));
    }

    #[test]
    fn decay_fit_recovers_synthetic_rates() {
        let times: Vec<f64> = (0..101).map(|i| 0.1 * i as f64).collect();
        let exact: Vec<f64> = times.iter().map(|t| (-2.0 * t).exp()).collect();
        let (lambda, residual) = fit_decay_rate_from(&times, &exact, 0.0).unwrap();
        assert!((lambda - 2.0).abs() <= 1e-6, "lambda {lambda}");
        assert!(residual <= 1e-10);

        let slow: Vec<f64> = times.iter().map(|t| (1.0 + t) * (-2.0 * t).exp()).collect();
        let (early, _) = fit_decay_rate_from(&times, &slow, 0.0).unwrap();
        let (late, _) = fit_decay_rate_from(&times, &slow, 8.0).unwrap();
        assert!((late - 2.0).abs() < (early - 2.0).abs());
        assert!((late - 2.0).abs() <= 0.15, "late-window lambda {late}");

        let short = fit_decay_rate_from(&times[..5], &exact[..5], 0.0);
        assert!(matches!(short, Err(Error::SmallData { .. })));
    }

    #[test]
    fn config_validation_names_the_field() {
        let bad = RunConfig {
            dt: -0.1,
            ..RunConfig::default()
        };
        match bad.validate() {
            Err(Error::Config { message }) => assert!(message.contains("dt")),
            other => panic!("expected config error, got {other:?}"),
        }
        let bad = RunConfig {
            ic: InitialCondition {
                epsilon: 0.5,
                ..InitialCondition::default()
            },
            ..RunConfig::default()
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn config_round_trips_through_json() {
        let config = RunConfig::default();
        let text = serde_json::to_string_pretty(&config).unwrap();
        let back: RunConfig = serde_json::from_str(&text).unwrap();
        assert_eq!(
            serde_json::to_string(&back).unwrap(),
            serde_json::to_string(&config).unwrap()
        );
    }
}
