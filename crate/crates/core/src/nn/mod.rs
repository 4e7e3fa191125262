//! Minimal CPU neural-network toolkit: NCHW tensors, convolution, batch
//! normalization, dense layers, and Adam. Every layer exposes an explicit
//! backward pass; models wire them together by hand.

mod adam;
mod chain;
mod conv;
mod layers;
mod param;
mod tensor;

pub use adam::Adam;
pub use chain::{shuffled_batches, ChainCache, ConvChain, LayerSpec};
pub use conv::Conv2d;
pub use layers::{
    bce_with_logits, concat_channels, relu, relu_backward, sigmoid, split_channels, upsample2,
    upsample2_backward, BatchNorm2d, BatchNormCache, Linear, Mode,
};
pub use param::{Module, Param};
pub use tensor::Tensor;

use crate::error::{Error, Result};

/// Copies parameter values from `src` into `dst`, matching by name and shape.
pub fn load_params(dst: Vec<&mut Param>, src: &[(String, Vec<usize>, Vec<f32>)]) -> Result<()> {
    if dst.len() != src.len() {
        return Err(Error::Format(format!(
            "expected {} tensors, found {}",
            dst.len(),
            src.len()
        )));
    }
    for (p, (name, shape, values)) in dst.into_iter().zip(src) {
        if &p.name != name || &p.shape != shape {
            return Err(Error::Format(format!(
                "tensor {name} {shape:?} does not match expected {} {:?}",
                p.name, p.shape
            )));
        }
        p.value = values.iter().map(|&v| v as f64).collect();
    }
    Ok(())
}

/// Snapshot of parameter values as `f32` (lossless by construction).
pub fn export_params(params: Vec<&Param>) -> Vec<(String, Vec<usize>, Vec<f32>)> {
    params
        .into_iter()
        .map(|p| (p.name.clone(), p.shape.clone(), p.value.iter().map(|&v| v as f32).collect()))
        .collect()
}
