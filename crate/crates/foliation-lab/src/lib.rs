//! Foliation lab: numerical and symbolic study of the foliations induced by
//! the cofactor vector fields of a smooth map F: R^n -> R^n.
//!
//! The library builds the cofactor fields of a map given in a small
//! expression DSL, traces their integral curves, examines fiber topology of
//! individual components, searches for global-solvability obstructions, and
//! detects or constructs half-Reeb components together with the region
//! integrals that obstruct volume-preserving extensions.

pub mod expr;
pub mod geom;
pub mod numeric;
pub mod map;
pub mod jacobian;
pub mod flow;
pub mod fiber;
pub mod solvability;
pub mod reeb;
pub mod injectivity;
pub mod gallery;
pub mod report;
pub mod svg;

pub use expr::{Expr, Rational};
pub use geom::AxisBox;
pub use map::SmoothMap;
pub use jacobian::JacobianBundle;
