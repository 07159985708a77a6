pub mod config;
pub mod evaluator;
pub mod losses;
pub mod nn;
pub mod pipeline;
pub mod rectifier;
pub mod selftest;
pub mod synth;
pub mod tensor;
