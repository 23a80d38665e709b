//! Efficiency-first code synthesis: formalize a task, explore algorithms,
//! turn them into optimized candidates, check synthetic tests in both
//! directions, refine, and select; plus the sandbox and metrics used to
//! score the result.

pub mod audit;
pub mod bench;
pub mod corpus;
pub mod domain;
pub mod gateway;
pub mod harness;
pub mod metrics;
pub mod mock;
pub mod pipeline;
pub mod prompt;
pub mod sandbox;
pub mod session;
pub mod testgen;
pub mod verification;
