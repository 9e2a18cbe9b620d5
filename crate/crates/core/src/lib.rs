pub mod experiments;
pub mod metrics;
pub mod overlay;
pub mod policies;
pub mod protocol;
pub mod scheduler;
pub mod simulator;
