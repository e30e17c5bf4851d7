pub mod tensor;
pub mod geometry;
pub mod encoders;
pub mod matcher;
pub mod losses;
pub mod synth;
pub mod metrics;
pub mod model;
pub mod trainer;
pub mod gradcheck;

#[cfg(test)]
mod invariants;
