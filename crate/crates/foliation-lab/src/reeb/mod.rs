//! Half-Reeb structure: detection in the plane, region files describing
//! nested exhaustions, and the quadrature that powers their integrals.

pub mod hrc;
pub mod integrate;
pub mod region;

pub use hrc::{construct_hrc, detect_hrc_2d, validity_suite, DetectError, Hrc2d, HrcReject};
pub use integrate::{adaptive_cube, Quadrature};
pub use region::{check_region, parse_region, Integrand, RegionReport, RegionSpec};
