pub mod adapters;
pub mod audit;
pub mod augment;
pub mod cli;
pub mod error;
pub mod image;
pub mod io;
pub mod metrics;
pub mod params;
pub mod pretrain;
pub mod rng;
pub mod ssl;
pub mod synth;
pub mod tensor;
pub mod vit;

pub use error::{Error, Result};
pub use image::GrayImage;
pub use params::ParamStore;
pub use tensor::{Graph, Tensor, Var};
