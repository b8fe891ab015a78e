//! Numerical machinery behind the budget-constrained report solvers: report
//! parameterizations, derivative-free grid refinement with a stage that
//! follows the active boundary, and an active-set optimality-condition
//! solver used to polish the exhaustive oracle.

pub(crate) mod boundary;
pub(crate) mod kkt;
pub(crate) mod refine;
pub(crate) mod space;

pub(crate) use space::Space;
