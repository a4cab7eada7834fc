//! Individualized causal algorithmic recourse on the Loan structural causal
//! model: population generation, a white-box decision classifier, per-user
//! actionability preferences, an exhaustive grid-search oracle, an amortized
//! mask/action-network solver, and population metrics.

pub mod amortized;
pub mod autodiff;
pub mod classifier;
pub mod dataset;
pub mod experiments;
pub mod metrics;
pub mod nn;
pub mod oracle;
pub mod preferences;
pub mod result;
pub mod scm;
