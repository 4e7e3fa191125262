use rand::Rng;

use super::param::Param;
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Square-kernel 2-D convolution with zero padding, computed as im2col + GEMM.
#[derive(Debug, Clone, PartialEq)]
pub struct Conv2d {
    pub weight: Param,
    pub bias: Param,
    pub in_ch: usize,
    pub out_ch: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2d {
    pub fn new(name: &str, in_ch: usize, out_ch: usize, kernel: usize, stride: usize, rng: &mut impl Rng) -> Self {
        let fan_in = in_ch * kernel * kernel;
        Self {
            weight: Param::he_normal(format!("{name}.weight"), vec![out_ch, in_ch, kernel, kernel], fan_in, rng),
            bias: Param::filled(format!("{name}.bias"), vec![out_ch], 0.0),
            in_ch,
            out_ch,
            kernel,
            stride,
            pad: kernel / 2,
        }
    }

    pub fn output_dims(&self, h: usize, w: usize) -> (usize, usize) {
        (
            (h + 2 * self.pad - self.kernel) / self.stride + 1,
            (w + 2 * self.pad - self.kernel) / self.stride + 1,
        )
    }

    fn im2col(&self, x: &[f64], h: usize, w: usize, oh: usize, ow: usize, cols: &mut [f64]) {
        let k = self.kernel;
        let ohw = oh * ow;
        for ci in 0..self.in_ch {
            let plane = &x[ci * h * w..(ci + 1) * h * w];
            for ky in 0..k {
                for kx in 0..k {
                    let row = &mut cols[((ci * k + ky) * k + kx) * ohw..][..ohw];
                    for oy in 0..oh {
                        let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                        let dst = &mut row[oy * ow..(oy + 1) * ow];
                        if iy < 0 || iy >= h as isize {
                            dst.fill(0.0);
                            continue;
                        }
                        let src = &plane[iy as usize * w..(iy as usize + 1) * w];
                        for (ox, d) in dst.iter_mut().enumerate() {
                            let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                            *d = if ix < 0 || ix >= w as isize { 0.0 } else { src[ix as usize] };
                        }
                    }
                }
            }
        }
    }

    fn col2im(&self, cols: &[f64], h: usize, w: usize, oh: usize, ow: usize, dx: &mut [f64]) {
        let k = self.kernel;
        let ohw = oh * ow;
        for ci in 0..self.in_ch {
            let plane = &mut dx[ci * h * w..(ci + 1) * h * w];
            for ky in 0..k {
                for kx in 0..k {
                    let row = &cols[((ci * k + ky) * k + kx) * ohw..][..ohw];
                    for oy in 0..oh {
                        let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let dst = &mut plane[iy as usize * w..(iy as usize + 1) * w];
                        for ox in 0..ow {
                            let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                            if ix >= 0 && ix < w as isize {
                                dst[ix as usize] += row[oy * ow + ox];
                            }
                        }
                    }
                }
            }
        }
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        if x.c != self.in_ch {
            return Err(Error::Dimension(format!(
                "{} expects {} input channels, got {}",
                self.weight.name, self.in_ch, x.c
            )));
        }
        let (oh, ow) = self.output_dims(x.h, x.w);
        let ohw = oh * ow;
        let kdim = self.in_ch * self.kernel * self.kernel;
        let mut out = Tensor::zeros(x.n, self.out_ch, oh, ow);
        let mut cols = vec![0.0; kdim * ohw];
        for i in 0..x.n {
            self.im2col(x.item(i), x.h, x.w, oh, ow, &mut cols);
            let y = out.item_mut(i);
            for (co, row) in y.chunks_exact_mut(ohw).enumerate() {
                row.fill(self.bias.value[co]);
            }
            // y[out_ch x ohw] += W[out_ch x kdim] * cols[kdim x ohw]
            unsafe {
                matrixmultiply::dgemm(
                    self.out_ch,
                    kdim,
                    ohw,
                    1.0,
                    self.weight.value.as_ptr(),
                    kdim as isize,
                    1,
                    cols.as_ptr(),
                    ohw as isize,
                    1,
                    1.0,
                    y.as_mut_ptr(),
                    ohw as isize,
                    1,
                );
            }
        }
        Ok(out)
    }

    /// Accumulates parameter gradients and returns the input gradient.
    pub fn backward(&mut self, x: &Tensor, dy: &Tensor) -> Tensor {
        let (oh, ow) = (dy.h, dy.w);
        let ohw = oh * ow;
        let kdim = self.in_ch * self.kernel * self.kernel;
        let mut dx = Tensor::zeros(x.n, x.c, x.h, x.w);
        let mut cols = vec![0.0; kdim * ohw];
        let mut dcols = vec![0.0; kdim * ohw];
        for i in 0..x.n {
            let g = dy.item(i);
            for (co, row) in g.chunks_exact(ohw).enumerate() {
                self.bias.grad[co] += row.iter().sum::<f64>();
            }
            self.im2col(x.item(i), x.h, x.w, oh, ow, &mut cols);
            unsafe {
                // dW[out_ch x kdim] += dy[out_ch x ohw] * cols^T[ohw x kdim]
                matrixmultiply::dgemm(
                    self.out_ch,
                    ohw,
                    kdim,
                    1.0,
                    g.as_ptr(),
                    ohw as isize,
                    1,
                    cols.as_ptr(),
                    1,
                    ohw as isize,
                    1.0,
                    self.weight.grad.as_mut_ptr(),
                    kdim as isize,
                    1,
                );
                // dcols[kdim x ohw] = W^T[kdim x out_ch] * dy[out_ch x ohw]
                matrixmultiply::dgemm(
                    kdim,
                    self.out_ch,
                    ohw,
                    1.0,
                    self.weight.value.as_ptr(),
                    1,
                    kdim as isize,
                    g.as_ptr(),
                    ohw as isize,
                    1,
                    0.0,
                    dcols.as_mut_ptr(),
                    ohw as isize,
                    1,
                );
            }
            self.col2im(&dcols, x.h, x.w, oh, ow, dx.item_mut(i));
        }
        dx
    }
}
