pub mod checkpoint;
pub mod data;
pub mod discriminator;
pub mod encoder;
pub mod evaluator;
pub mod generator;
pub mod metrics;
pub mod nn;
pub mod rng;
pub mod tensor;
pub mod trainer;
pub mod textcnn;
