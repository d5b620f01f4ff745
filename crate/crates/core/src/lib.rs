pub mod config;
pub mod datapipe;
pub mod encoder;
pub mod heads;
pub mod losses;
pub mod metrics;
pub mod params;
pub mod pipeline;
pub mod rng;
pub mod task;
pub mod tensor;
pub mod trainer;
