pub mod autodiff;
pub mod data;
pub mod error;
pub mod loss;
pub mod metrics;
pub mod model;
pub mod scalar;
pub mod strategy;
pub mod tensor;
pub mod verify;
