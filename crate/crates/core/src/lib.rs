//! Numerical solver for infinite-horizon Epstein-Zin consumption-investment
//! under leverage constraints.
//!
//! The library solves the stationary constrained HJB equation by monotone
//! upwind policy iteration, extracts feedback consumption and portfolio
//! policies, classifies the constrained/unconstrained regions with their
//! free boundary, and validates everything against closed-form oracles and
//! an independent Monte Carlo evaluation of the recursive utility through
//! its BSDE representation.

pub mod closed_form;
pub mod grid;
pub mod mc;
pub mod model;
pub mod policy;
pub mod regions;
pub mod report;
pub mod solver;

pub use closed_form::{
    aggregator, aggregator_truncated, benchmark_solution, benchmark_value, bond_only_solution,
    bond_only_utility, proportional_solution, value_bounds, ClosedFormError, ClosedFormSolution,
    SolutionKind,
};
pub use grid::{build_grid, GridError, GridSpacing, WealthGrid};
pub use mc::{
    evaluate_utility_picard, simulate_wealth, validate_solution, MCConfig, McError, PathEnsemble,
    UtilityEstimate,
};
pub use model::{
    derive_params, DerivedParams, LeverageSpec, MarketParams, ModelError, ModelParams,
    PreferenceParams,
};
pub use policy::PolicyField;
pub use regions::{
    binding_indicator, check_bound_chains, check_region_odes, find_free_boundary,
    homogeneity_check, region_map, BindingIndicator, Boundary, RegionError, RegionMap,
};
pub use report::{CheckResult, ValidationReport};
pub use solver::{
    hamiltonian_residual, optimal_consumption, optimal_portfolio, policy_evaluation,
    policy_iteration_solve, RegionLabel, SolutionField, SolverConfig, SolverError,
};
