//! Dual-branch ConvLSTM attention segmentation of lung lesions in CT, with
//! the surrounding preprocessing, training, quantification and evaluation
//! pipeline.

pub mod autograd;
pub mod baselines;
pub mod bench;
pub mod cli;
pub mod config;
pub mod error;
pub mod evaluate;
pub mod gradcheck;
pub mod model;
pub mod network;
pub mod nn;
pub mod ops;
pub mod plots;
pub mod preprocess;
pub mod quantify;
pub mod synthdata;
pub mod tensor;
pub mod training;
pub mod volume_io;

pub use error::{Error, Result};
