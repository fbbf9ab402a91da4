//! Learned lossy image codec: a small convolutional VAE with a factorized
//! logistic entropy bottleneck, a bit-exact range coder, and the training,
//! evaluation and file-format plumbing around them.

pub mod cli;
pub mod coder;
pub mod entropy;
pub mod io;
pub mod metrics;
pub mod model;
pub mod synth;
pub mod tensor;
pub mod training;
