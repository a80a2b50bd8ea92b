//! Fabric-aware multi-modal conditioning for sketch-to-garment diffusion.

pub mod attention;
pub mod autograd;
pub mod checkpoint;
pub mod config;
pub mod diffusion;
pub mod encoders;
pub mod error;
pub mod eval;
pub mod fabric;
pub mod gradcheck;
pub mod gradsuite;
pub mod hca;
pub mod image;
pub mod manifest;
pub mod mmse;
pub mod model;
pub mod optim;
pub mod params;
pub mod rng;
pub mod sample;
pub mod synth;
pub mod tensor;
pub mod train;

pub use attention::TokenSeq;
pub use autograd::{Gradients, Graph, Var};
pub use error::{Error, Result};
pub use config::RunConfig;
pub use image::Image;
pub use model::Model;
pub use params::{ParamId, ParamStore, Parameter};
pub use rng::Rng;
pub use tensor::Tensor;
