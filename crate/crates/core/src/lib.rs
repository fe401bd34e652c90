//! Regression Monte Carlo for discrete-time, finite-horizon optimal stopping.
//!
//! The engine prices Bermudan/American-style claims by learning continuation
//! values backward in time. Each time step regresses a simulated cash flow
//! onto an approximation space; a look-ahead schedule controls how far into
//! the future that cash flow is realized before it is replaced by the
//! already-fitted continuation estimate. The two classical schedules fall out
//! as endpoints: full look-ahead reproduces Longstaff-Schwartz, zero
//! look-ahead reproduces Tsitsiklis-Van Roy.
//!
//! Alongside the estimator the crate ships exact machinery for validating it:
//! backward dynamic programming on finite-state chains, a Cox-Ross-Rubinstein
//! binomial tree for one-dimensional geometric Brownian motion, and
//! closed-form calculators for the covering-number, error, and
//! sample-complexity bounds that govern the estimator's convergence.
//!
//! Module map:
//! - [`paths`]: model specs, reproducible path simulation, exact chain marginals
//! - [`payoff`]: per-time reward functions and the truncation operator
//! - [`policy`]: Markov stopping rules and induced cash flow functions
//! - [`regress`]: approximation spaces and empirical L2 minimization
//! - [`lookahead`]: the backward fitting loop, pricing, centered-loss diagnostics
//! - [`bounds`]: closed-form error / sample-complexity bound evaluation
//! - [`oracle`]: exact dynamic programming and CRR tree references

pub mod bounds;
pub mod error;
pub mod lookahead;
pub mod oracle;
pub mod paths;
pub mod payoff;
pub mod policy;
pub mod regress;

pub use error::{Error, Result};
pub use lookahead::{
    eval_seed, fit_continuation, make_schedule, price, FittedContinuation, LookaheadSchedule,
    PriceEstimate, ScheduleKind,
};
pub use paths::{simulate, FiniteChain, GbmSpec, ModelSpec, PathBatch};
pub use payoff::{truncate, PayoffKind, PayoffSpec};
pub use policy::FunctionVector;
pub use regress::{ApproxSpace, BasisKind, ConstraintMode, FittedFunction};
