pub mod demand_model;
pub mod error;
pub mod seed;
pub mod elliptic;
pub mod transport;
pub mod stats;
pub mod rotation;
pub mod identification;
pub mod symmetry;
