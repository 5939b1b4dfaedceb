//! Passenger-flow forecasting for metro networks under delay conditions,
//! driven by generated and refined prompt templates.

pub mod backend;
pub mod baselines;
pub mod bins;
pub mod eval;
pub mod ingest;
pub mod pipeline;
pub mod prompt;
pub mod refine;
pub mod synth;
pub mod topology;
