pub mod data;
pub mod density;
pub mod dep;
pub mod expr;
pub mod problem;
pub mod rng;
pub mod sample_size;
pub mod sdds;
pub mod store;
pub mod learn;
pub mod pipeline;
