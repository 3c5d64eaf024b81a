pub mod eval;
pub mod experiment;
pub mod geometry;
pub mod ggt;
pub mod ranking;
pub mod relation;
pub mod seed;
pub mod synth;
pub mod tensor;
