//! Competitive online allocation over the positive semidefinite cone.
//!
//! The crate implements two primal-dual online algorithms for
//!
//! ```text
//! maximize H(sum_t A_t x_t)  subject to  sum_t c_t x_t <= b,  0 <= x_t <= 1
//! ```
//!
//! where `H` is a concave trace function and the pairs `(A_t, c_t)` arrive
//! one at a time. The algorithms are driven by a smoothed surrogate `H_S`
//! (designed offline as a nonnegative Löwner measure, see [`designer`]) and a
//! smoothed budget penalty `G_S` (see [`budget`]). Offline optima and dual
//! audits live in [`oracle`]; instance generation and the experiment pipeline
//! live in [`bench`].

pub mod bench;
pub mod budget;
pub mod designer;
pub mod error;
pub mod lowner;
pub mod objectives;
pub mod online;
pub mod oracle;
pub mod par;
pub mod quadrature;
pub mod random;
pub mod spectral;

pub use error::{Error, Result};
pub use objectives::TraceObjective;
pub use par::Execution;
pub use spectral::SymMatrix;

/// Euler's number minus one, the recurring constant in the ratio bounds.
pub const E_MINUS_ONE: f64 = std::f64::consts::E - 1.0;
