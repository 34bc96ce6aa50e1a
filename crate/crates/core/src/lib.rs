//! Numerical laboratory for degenerate third-order evolution equations.
//!
//! The crate classifies the well-posedness space of a degenerate Cauchy
//! problem from its degeneracy and decay parameters, builds the weight
//! symbols used to conjugate the operator, quantizes them on a periodic grid,
//! inverts the resulting infinite-order operator and solves model problems
//! pseudospectrally.

pub mod classification;
pub mod cutoffs;
pub mod error;
pub mod evolution;
pub mod export;
pub mod pseudo_op;
pub mod quadrature;
pub mod symbols;

pub use classification::{
    classify, compute_q1, compute_q2, theta_range, Branch, ClassKind, DegeneracyProfile,
    OpenInterval, Regime, WellPosednessClass,
};
pub use cutoffs::{make_cutoffs, CutoffFamily};
pub use error::{Error, Result};
pub use evolution::{
    gevrey_sobolev_norm, probe_threshold, solve, step, transformed_energy_check, Datum,
    EnergyCheckReport, EnergyTrace, GevreyProbeResult, ModelProblem, ProbeVerdict,
};
pub use pseudo_op::{
    build_conjugator, conjugation_probe, exp_weight, quantize, quantize_reverse, Conjugator,
    GridFunction, OperatorHandle, OperatorKind, Quantizer,
};
pub use symbols::{
    verify_symbol_estimate, EstimateGrid, SymbolEstimateReport, SymbolField, TransformConstants,
    WeightSymbols,
};
