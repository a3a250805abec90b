pub mod cli;
pub mod data;
pub mod error;
pub mod likelihood;
pub mod linalg;
pub mod posterior;
pub mod rng;
pub mod samplers;
pub mod simulation;
pub mod trees;
