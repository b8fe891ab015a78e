//! Market scoring rules under budget constraints.
//!
//! Beliefs live on the probability simplex ([`simplex`]) and are scored by a
//! strictly proper rule ([`scoring`]). A trader who may lose at most `b`
//! chooses the report maximizing expected score subject to that loss bound
//! ([`budget`]). [`msr`] runs the classic market scoring rule, [`ssm`] the
//! scaled mechanism that makes truthful reporting optimal under any budget,
//! and [`lab`] searches for and certifies non-truthful optimal reports.

pub mod budget;
pub mod error;
mod grid;
pub mod lab;
pub mod msr;
pub mod scoring;
mod search;
pub mod simplex;
pub mod ssm;

pub use budget::{
    budget_bound, max_alpha, natural_budget, oracle_constrained, solve_constrained, ConstrainedReport,
};
pub use error::{Error, Result};
pub use msr::{MarketState, Mechanism, TradeRecord};
pub use scoring::{Rule, RuleSpec, ScoringRule};
pub use simplex::{mix, Distribution, ProductBelief, TangentDirection};
