//! Coordinate-chart laboratory for the tension-field operator family of
//! weighted harmonic maps.
//!
//! The crate is organised around a symbolic expression core and a stack of
//! differential-geometric layers built on top of it:
//!
//! * [`expr`] — closed-form scalar expressions over chart coordinates, with
//!   exact symbolic differentiation and a compiled evaluation tape.
//! * [`geometry`] — Riemannian charts: metrics, Christoffel symbols,
//!   curvature, gradients, the Laplace–Beltrami operator and conformal
//!   rescaling.
//! * [`mapcalc`] — calculus of maps between charts: differentials, tension
//!   fields, weighted tension fields, pullback connections, rough Laplacians,
//!   the Jacobi operator, second-order tension fields and the weighted scalar
//!   Laplacians.
//! * [`identities`] — a catalogue of operator identities and inequalities
//!   verified numerically by deterministic seeded sampling, plus a
//!   finite-difference oracle used in tests.
//! * [`quadrature`] — midpoint tensor-grid energy functionals and radial
//!   growth profiles.
//! * [`problems`] — the problem-document format, the built-in gallery of
//!   fixture problems, and a deterministic random problem generator.

// Tensor arithmetic indexes several arrays by the same summation variable;
// iterator forms would obscure the correspondence with the formulas.
#![allow(clippy::needless_range_loop)]

pub mod expr;
pub mod geometry;
pub mod identities;
pub mod mapcalc;
pub mod problems;
pub mod quadrature;

pub use expr::{Expr, ParamEnv};
pub use geometry::ChartManifold;
pub use identities::{
    fd_oracle, verify, IdentityId, OracleQuantity, ProblemTraits, VerificationReport,
};
pub use mapcalc::{MapProblem, SectionField, SectionValue};
pub use quadrature::{energy, growth_profile, EnergyKind, GrowthProfile, Region};
