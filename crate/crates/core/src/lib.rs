//! Spectral diagnostics for constant-coefficient vector fields on products
//! of compact Lie groups, in ultradifferentiable (Komatsu) classes.
//!
//! The crate builds weight sequences and their associated function,
//! enumerates small-divisor spectra of `L = X1 + a X2` on products of the
//! circle and SU(2), tests Roumieu/Beurling lower bounds on the divisors,
//! solves `Lu = f` in coefficient space, classifies coefficient decay, and
//! handles low-order perturbations `X + q` through the primitive/conjugation
//! reduction. Everything that depends on an irrational coupling runs on
//! exact continued-fraction enclosures; verdicts at finite truncation are
//! labeled as such.

pub mod diophantine;
pub mod duals;
pub mod numeric;
pub mod operator;
pub mod perturbation;
pub mod report;
pub mod solver;
pub mod transforms;
pub mod weights;
pub mod wigner;

pub use transforms::CoefficientField;
pub use weights::{AssociatedFunction, SequenceSpec, WeightSequence};
