//! Channel/patch transformer encoder for multi-channel waveforms.

pub mod attention;
pub mod bench;
pub mod config;
pub mod data_io;
pub mod encoder;
pub mod error;
pub mod finetune;
pub mod optim;
pub mod oracle;
pub mod params;
pub mod pretrain;
pub mod rng;
pub mod tensor;
pub mod tokenizer;
pub mod verify;

pub use error::{Error, Result};
pub use tensor::{no_grad, Gradients, Scalar, Tensor, Var};
