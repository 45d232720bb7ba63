pub mod attack;
pub mod data;
pub mod defense;
pub mod format;
pub mod metrics;
pub mod models;
pub mod rng;
pub mod sanitize;
pub mod tensor;
