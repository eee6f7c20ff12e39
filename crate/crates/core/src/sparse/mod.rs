//! Polynomial library, the gradient transform `T`, coefficient constraints
//! and the constrained SR3 solver.

mod constraints;
mod library;
mod sr3;

pub use constraints::{build_constraints, library_subset_mask, ConstraintSet};
pub use library::{format_polynomial, CoefficientBlock, PolynomialLibrary};
pub use sr3::{init_coefficients, sr3_solve, Sr3Config, Sr3Result};
