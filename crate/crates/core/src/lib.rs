//! Conway–Maxwell Poisson (CMP) count regression.
//!
//! * [`dist`]: normalizing constant, pmf, cumulants and sampling.
//! * [`wls`]: weighted least squares through a pivoted QR factorization.
//! * [`regression`]: two-step IRLS for `ln λ = Xβ`, `ln ν = Zγ` and its inference.
//! * [`spline`]: weighted cubic smoothing splines targeted by effective df.
//! * [`gam`]: the CMP additive model fit by local scoring and backfitting.
//! * [`simulation`]: scenario generators and replicated studies.
//! * [`data`]: CSV loading, the model-formula parser and design construction.

pub mod data;
pub mod dist;
pub mod error;
pub mod gam;
pub mod regression;
pub mod simulation;
pub mod spline;
pub mod wls;

pub use dist::{CmpParams, CumulantMethod, CumulantPolicy, Cumulants, Truncation, ZEvaluation, ZMethod};
pub use error::{CmpError, Result};
