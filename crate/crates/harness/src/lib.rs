//! Experiment driver for the joint NLU model: data-regime sweeps,
//! two-round active learning, small/medium splits and aggregation.

pub mod aggregate;
pub mod experiment;
pub mod queue;
