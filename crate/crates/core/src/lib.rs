//! Worst-case loss certificates over base-rate-fair distributions.
//!
//! Given per-subpopulation loss statistics of a classifier on its training
//! distribution `P`, the certifiers in this crate bound the expected loss on
//! every test distribution `Q` that
//!
//! * lies within Hellinger distance `rho` of `P`, and
//! * has equal base rates `Pr[Y = y | X_s = s]` across sensitive groups.
//!
//! Two shift models are supported. Under *sensitive shifting* only the
//! (group, label) proportions move ([`sensitive`]); the bound is exact. Under
//! *general shifting* the within-cell feature distributions may move too
//! ([`general`]); the bound is a grid relaxation of a per-cell Gramian bound.
//!
//! The model itself never appears: it is represented only by its loss
//! statistics ([`stats::StatsTable`]).
//!
//! [`fairgen`] generates fair shifted distributions from a labelled dataset so
//! the certificates can be checked against empirical losses.

pub mod bounds;
pub mod certificate;
pub mod error;
pub mod fairgen;
pub mod general;
pub mod hellinger;
pub mod io;
pub mod plot;
pub mod sensitive;
pub mod solver;
pub mod stats;

pub use certificate::{Certificate, Scenario, SkewOptions};
pub use error::{Error, Result};
pub use stats::{LossKind, StatsTable, SubpopStats};
