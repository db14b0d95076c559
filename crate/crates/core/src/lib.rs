//! Skew-product systems T(x, y) = (E x mod 1, C y + f(x)) on 𝕋^u × ℝ^d:
//! Markov coding of the base, stable graphs and their derivatives,
//! transversality certificates, SRB sampling and genericity tools.

// `!(x > 0.0)` rejects NaN along with non-positive values.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod config;
pub mod error;
pub mod genericity;
pub mod graph;
pub mod linalg;
pub mod markov;
pub mod srb;
pub mod system;
pub mod transversality;

pub use error::{Error, Result};
pub use linalg::Mat;
pub use markov::{build_partition, MarkovCode, Word};
pub use system::{derive_constants, Constants, Contraction, ExpandingMap, SkewProduct, TrigPolynomial};
