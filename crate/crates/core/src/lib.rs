//! Grasp detection with a shifted-window transformer encoder and a
//! convolutional multi-scale decoder, on a small reverse-mode autodiff core.

pub mod data;
pub mod decoder;
pub mod encoder;
pub mod eval;
pub mod geom;
pub mod loss;
pub mod nn;
pub mod pipeline;
pub mod tensor;
