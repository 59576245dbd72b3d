pub mod checkpoint;
pub mod data;
pub mod fusion;
pub mod model;
pub mod retrieval;
pub mod sampler;
pub mod trainer;
pub mod tensor;
