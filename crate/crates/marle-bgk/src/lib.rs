//! Deterministic kinetic solver for a relativistic BGK gas with internal
//! energy, discretized on a truncated momentum / internal-energy grid with
//! one periodic spatial direction.
//!
//! The central design rule: every macroscopic quantity, equilibrium
//! parameter, and linear-operator coefficient is computed from the grid's
//! own quadrature sums rather than from continuum closed forms. The
//! conservation, self-adjointness, projection, and entropy identities then
//! hold on the discrete level to rounding error, independent of resolution.

// Indexed loops walk parallel per-node arrays, and guards of the form
// `!(x > a)` must stay negated so NaN takes the rejecting branch.
#![allow(clippy::needless_range_loop)]
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod cli;
pub mod collision;
pub mod dist;
pub mod error;
pub mod grid;
pub mod juttner;
pub mod linear;
pub mod moments;
pub mod rng;
pub mod solver;

pub use collision::{
    bgk_rhs, conservation_defect, conserved_moments, local_equilibrium, relaxation_step,
    CollisionMode, ConservationDefect, ConservedGram, LocalEquilibrium,
};
pub use dist::{
    eval_juttner, from_perturbation, global_equilibrium, to_perturbation, DistributionField,
    GlobalEquilibrium, Macrostate, PerturbationField,
};
pub use error::{Error, Result};
pub use grid::{GridSpec, MomentumRule, PhaseGrid};
pub use juttner::{
    equilibrium_constants, eta_of_gamma, eval_m, eval_mtilde, solve_gamma, EquilibriumConstants,
};
pub use linear::{
    apply_p, build_basis, gamma_defect, gamma_direct, micro_macro, nonlinear_parts, spectral_gap,
    transitional_state, HessianQ, LowRankOperator, MicroMacroCoeffs, NonlinearParts,
    OrthonormalBasis, SpectralGap, DEFAULT_THETA_ORDER,
};
pub use moments::{
    compute_eta, compute_moments, eckart_decompose, entropy_density, macrostate_of, MomentSet,
};
pub use solver::{
    duhamel_iterate, energy_functional, fit_decay_rate, fit_decay_rate_from, initial_condition,
    perturbation_of, run_simulation, slab_norm, transport_step, EnergyTrace, InitialCondition,
    MacroRow, MonitorReport, ProfileShape, RunConfig, Scheme, SlabField, Stepper,
};

pub use cli::{cli_main, preset};
