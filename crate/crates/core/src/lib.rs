pub mod attacks;
pub mod checkpoint;
pub mod codec;
pub mod config;
pub mod data;
pub mod decoder;
pub mod dlwt;
pub mod error;
pub mod gradcheck;
pub mod image_io;
pub mod lora;
pub mod metrics;
pub mod nn;
pub mod optim;
pub mod pipeline;
pub mod report;
pub mod rng;
pub mod svd;
pub mod tensor;
pub mod trainer;
pub mod verify;

pub use error::{Error, Result};
pub use rng::Rng;
pub use tensor::{Real, Tensor};
