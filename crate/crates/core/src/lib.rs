pub mod cohort;
pub mod config;
pub mod encoders;
pub mod eval;
pub mod featurize;
pub mod fusion;
pub mod ingest;
pub mod lvlm;
pub mod pipeline;
pub mod synth;
mod util;
