//! Numerical laboratory for the linearized and desk-scale nonlinear
//! Vlasov-Poisson-Boltzmann system: velocity quadrature and macro-micro
//! projections, collision operators, per-mode hypocoercive energy functionals,
//! decay experiments, a nonlinear torus bench and the stationary elliptic problem.

pub mod collision_ops;
pub mod decay_experiments;
pub mod dense;
pub mod error;
pub mod mode_dynamics;
pub mod nonlinear_bench;
pub mod quadrature;
pub mod scalar;
pub mod stationary_profile;
pub mod velocity_space;

pub use collision_ops::{
    apply_gamma, apply_l, assemble_bgk, assemble_hard_sphere, coercivity_estimate,
    collision_frequency, AssemblyReport, BackendKind, CollisionBackend, GammaTensor,
};
pub use decay_experiments::{
    build_k_set, data_norm_zq, evolve_field, fit_decay, make_initial_data, reconstruct_norm,
    refinement_stability, run_duhamel_case, run_linear_decay_case, run_torus_case, sigma,
    BackendSpec, CaseKind, DataSpec, DecayReport, Domain, DuhamelConfig, DuhamelStats, FieldSeries,
    FitModel, FitResult, KNode, KSet, KSetSpec, LinearDecayConfig, RefinementReport,
    SpatialProfile, SpectralField, TorusConfig, VelocityProfile,
};
pub use error::{LabError, Result};
pub use mode_dynamics::{
    assemble_mode_operator, calibrate_functional, energy_forms, equivalence, evolve, free_energy,
    free_energy_of, lyapunov_audit, source_norm_sq, spectrum, step, total_energy, AuditViolation,
    AuditedInequality, CalibrationConfig, EnergyForms, EnergyFunctionalParams, InequalityConstants,
    LyapunovReport, ModeOperator, ModeState, ModeTrajectory, AUDIT_TOLERANCE, CERTIFICATE_BUDGET,
};
pub use nonlinear_bench::{
    balance_residuals, calibrate_bench, energy_ledger, microscopic_rhs_audit, nonlinear_rhs,
    run_nonlinear, solve_poisson, source_split, z1_norm, BalanceReport, BenchCalibration,
    BenchConstants, BenchFunctionals, EnergyLedger, FunctionalValues, MicroAudit, NonlinearConfig,
    NonlinearMargins, NonlinearReport, NonlinearState, PoissonSolution, RhsTerms, SourceSplit,
    Spectral, TorusBench,
};
pub use scalar::{Complex64, Scalar};
pub use stationary_profile::{
    run_stationary, scaling_study, solve_stationary, solve_stationary_from, weighted_sup_norm,
    BackgroundSpec, BumpShape, Geometry, ScalingReport, StationaryConfig, StationaryProfile,
    StationaryReport,
};
pub use velocity_space::{
    build_grid, maxwellian_moment_table, BasisSet, DistributionSlice, GridDescription,
    GridStrategy, HighMoments, MacroState, MomentCheck, Projection, VelocityGrid,
};
