pub mod cli;
pub mod confidence;
pub mod corpus;
pub mod domain;
pub mod gateway;
pub mod metrics;
pub mod pipeline;
pub mod prompt;
pub mod routing;
pub mod service;
pub mod simulator;
pub mod synth;
