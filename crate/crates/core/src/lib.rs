pub mod losses;
pub mod metrics;
pub mod model;
pub mod morphology;
pub mod orchestrator;
pub mod query;
pub mod rng;
pub mod tree;
pub mod volume;
