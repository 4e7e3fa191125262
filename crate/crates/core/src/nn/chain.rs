use rand::Rng;

use super::conv::Conv2d;
use super::layers::{relu, relu_backward, upsample2, upsample2_backward};
use super::param::Param;
use super::tensor::Tensor;
use crate::error::Result;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LayerSpec {
    pub in_ch: usize,
    pub out_ch: usize,
    pub kernel: usize,
    pub stride: usize,
    /// Nearest 2x upsampling before the convolution.
    pub upsample: bool,
    pub relu: bool,
}

impl LayerSpec {
    pub fn down(in_ch: usize, out_ch: usize) -> Self {
        Self {
            in_ch,
            out_ch,
            kernel: 3,
            stride: 2,
            upsample: false,
            relu: true,
        }
    }

    pub fn up(in_ch: usize, out_ch: usize) -> Self {
        Self {
            in_ch,
            out_ch,
            kernel: 3,
            stride: 1,
            upsample: true,
            relu: true,
        }
    }

    pub fn pointwise(in_ch: usize, out_ch: usize) -> Self {
        Self {
            in_ch,
            out_ch,
            kernel: 1,
            stride: 1,
            upsample: false,
            relu: true,
        }
    }

    pub fn linear(mut self) -> Self {
        self.relu = false;
        self
    }
}

#[derive(Debug, Clone, PartialEq)]
struct ChainLayer {
    conv: Conv2d,
    upsample: bool,
    relu: bool,
}

/// A plain feed-forward stack of (upsample?) -> conv -> (ReLU?) layers.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvChain {
    layers: Vec<ChainLayer>,
}

pub struct ChainCache {
    conv_inputs: Vec<Tensor>,
    outputs: Vec<Tensor>,
}

impl ConvChain {
    pub fn new(prefix: &str, specs: &[LayerSpec], rng: &mut impl Rng) -> Self {
        let layers = specs
            .iter()
            .enumerate()
            .map(|(i, s)| ChainLayer {
                conv: Conv2d::new(&format!("{prefix}{i}"), s.in_ch, s.out_ch, s.kernel, s.stride, rng),
                upsample: s.upsample,
                relu: s.relu,
            })
            .collect();
        Self { layers }
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        self.forward_cached(x).map(|(y, _)| y)
    }

    pub fn forward_cached(&self, x: &Tensor) -> Result<(Tensor, ChainCache)> {
        let mut conv_inputs = Vec::with_capacity(self.layers.len());
        let mut outputs = Vec::with_capacity(self.layers.len());
        let mut cur = x.clone();
        for layer in &self.layers {
            let input = if layer.upsample { upsample2(&cur) } else { cur };
            let mut y = layer.conv.forward(&input)?;
            if layer.relu {
                y = relu(&y);
            }
            conv_inputs.push(input);
            outputs.push(y.clone());
            cur = y;
        }
        Ok((cur, ChainCache { conv_inputs, outputs }))
    }

    pub fn backward(&mut self, cache: &ChainCache, dy: &Tensor) -> Tensor {
        let mut grad = dy.clone();
        for (i, layer) in self.layers.iter_mut().enumerate().rev() {
            if layer.relu {
                grad = relu_backward(&cache.outputs[i], &grad);
            }
            grad = layer.conv.backward(&cache.conv_inputs[i], &grad);
            if layer.upsample {
                grad = upsample2_backward(&grad);
            }
        }
        grad
    }

    pub fn params(&self) -> Vec<&Param> {
        self.layers
            .iter()
            .flat_map(|l| [&l.conv.weight, &l.conv.bias])
            .collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        self.layers
            .iter_mut()
            .flat_map(|l| [&mut l.conv.weight, &mut l.conv.bias])
            .collect()
    }

    pub fn out_channels(&self) -> usize {
        self.layers.last().map_or(0, |l| l.conv.out_ch)
    }

    /// Product of the strides, i.e. the spatial downsampling factor when no
    /// layer upsamples.
    pub fn total_stride(&self) -> usize {
        self.layers.iter().map(|l| l.conv.stride).product()
    }
}

/// Deterministic mini-batch schedule: a seeded shuffle split into chunks.
pub fn shuffled_batches(n: usize, batch_size: usize, rng: &mut impl Rng) -> Vec<Vec<usize>> {
    use rand::seq::SliceRandom;
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    order.chunks(batch_size.max(1)).map(<[usize]>::to_vec).collect()
}
