use rand::Rng;

use super::param::Param;
use super::tensor::Tensor;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Batch statistics; running statistics are updated.
    Train,
    /// Running statistics; no state changes.
    Eval,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BatchNorm2d {
    pub gamma: Param,
    pub beta: Param,
    pub running_mean: Param,
    pub running_var: Param,
    pub momentum: f64,
    pub eps: f64,
}

pub struct BatchNormCache {
    xhat: Vec<f64>,
    inv_std: Vec<f64>,
    batch_mean: Vec<f64>,
    batch_var: Vec<f64>,
    count: usize,
    mode: Mode,
}

impl BatchNorm2d {
    pub fn new(name: &str, channels: usize) -> Self {
        Self {
            gamma: Param::filled(format!("{name}.gamma"), vec![channels], 1.0),
            beta: Param::filled(format!("{name}.beta"), vec![channels], 0.0),
            running_mean: Param::buffer(format!("{name}.running_mean"), vec![channels], 0.0),
            running_var: Param::buffer(format!("{name}.running_var"), vec![channels], 1.0),
            momentum: 0.1,
            eps: 1e-5,
        }
    }

    /// Normalizes with batch statistics (`Train`) or running statistics
    /// (`Eval`). Running statistics are only changed by [`Self::update_running`].
    pub fn forward(&self, x: &Tensor, mode: Mode) -> (Tensor, BatchNormCache) {
        let c = x.c;
        let plane = x.plane();
        let count = x.n * plane;
        let (mean, var) = match mode {
            Mode::Train => {
                let mut mean = vec![0.0; c];
                let mut var = vec![0.0; c];
                for i in 0..x.n {
                    for (ch, m) in mean.iter_mut().enumerate() {
                        *m += x.channel(i, ch).iter().sum::<f64>();
                    }
                }
                mean.iter_mut().for_each(|m| *m /= count as f64);
                for i in 0..x.n {
                    for ch in 0..c {
                        var[ch] += x.channel(i, ch).iter().map(|v| (v - mean[ch]).powi(2)).sum::<f64>();
                    }
                }
                var.iter_mut().for_each(|v| *v /= count as f64);
                (mean, var)
            }
            Mode::Eval => (self.running_mean.value.clone(), self.running_var.value.clone()),
        };
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + self.eps).sqrt()).collect();
        let mut xhat = vec![0.0; x.data.len()];
        let mut y = Tensor::zeros(x.n, x.c, x.h, x.w);
        for i in 0..x.n {
            for ch in 0..c {
                let off = (i * c + ch) * plane;
                let (g, b) = (self.gamma.value[ch], self.beta.value[ch]);
                for p in off..off + plane {
                    let h = (x.data[p] - mean[ch]) * inv_std[ch];
                    xhat[p] = h;
                    y.data[p] = g * h + b;
                }
            }
        }
        let cache = BatchNormCache {
            xhat,
            inv_std,
            batch_mean: mean,
            batch_var: var,
            count,
            mode,
        };
        (y, cache)
    }

    /// Folds the batch statistics of a training forward pass into the running
    /// statistics.
    pub fn update_running(&mut self, cache: &BatchNormCache) {
        if cache.mode != Mode::Train {
            return;
        }
        let n = cache.count as f64;
        let unbias = if n > 1.0 { n / (n - 1.0) } else { 1.0 };
        for ch in 0..cache.batch_mean.len() {
            let rm = &mut self.running_mean.value[ch];
            *rm = ((1.0 - self.momentum) * *rm + self.momentum * cache.batch_mean[ch]) as f32 as f64;
            let rv = &mut self.running_var.value[ch];
            *rv = ((1.0 - self.momentum) * *rv + self.momentum * cache.batch_var[ch] * unbias) as f32 as f64;
        }
    }

    pub fn backward(&mut self, cache: &BatchNormCache, dy: &Tensor) -> Tensor {
        let c = dy.c;
        let plane = dy.plane();
        let count = (dy.n * plane) as f64;
        let mut sum_dy = vec![0.0; c];
        let mut sum_dy_xhat = vec![0.0; c];
        for i in 0..dy.n {
            for ch in 0..c {
                let off = (i * c + ch) * plane;
                for p in off..off + plane {
                    sum_dy[ch] += dy.data[p];
                    sum_dy_xhat[ch] += dy.data[p] * cache.xhat[p];
                }
            }
        }
        for ch in 0..c {
            self.gamma.grad[ch] += sum_dy_xhat[ch];
            self.beta.grad[ch] += sum_dy[ch];
        }
        let mut dx = Tensor::zeros(dy.n, dy.c, dy.h, dy.w);
        for i in 0..dy.n {
            for ch in 0..c {
                let off = (i * c + ch) * plane;
                let scale = self.gamma.value[ch] * cache.inv_std[ch];
                for p in off..off + plane {
                    dx.data[p] = match cache.mode {
                        Mode::Eval => scale * dy.data[p],
                        Mode::Train => {
                            scale
                                * (dy.data[p]
                                    - sum_dy[ch] / count
                                    - cache.xhat[p] * sum_dy_xhat[ch] / count)
                        }
                    };
                }
            }
        }
        dx
    }

    pub fn params(&self) -> [&Param; 4] {
        [&self.gamma, &self.beta, &self.running_mean, &self.running_var]
    }

    pub fn params_mut(&mut self) -> [&mut Param; 4] {
        [
            &mut self.gamma,
            &mut self.beta,
            &mut self.running_mean,
            &mut self.running_var,
        ]
    }
}

/// Fully connected layer `y = W x (+ b)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub weight: Param,
    pub bias: Option<Param>,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new(name: &str, in_dim: usize, out_dim: usize, with_bias: bool, rng: &mut impl Rng) -> Self {
        Self {
            weight: Param::he_normal(format!("{name}.weight"), vec![out_dim, in_dim], in_dim, rng),
            bias: with_bias.then(|| Param::filled(format!("{name}.bias"), vec![out_dim], 0.0)),
            in_dim,
            out_dim,
        }
    }

    /// Forward for a batch stored row-major as `[n x in_dim]`.
    pub fn forward(&self, x: &[f64], n: usize) -> Result<Vec<f64>> {
        if x.len() != n * self.in_dim {
            return Err(Error::Dimension(format!(
                "{} expects {} inputs per row, got {}",
                self.weight.name,
                self.in_dim,
                x.len() / n.max(1)
            )));
        }
        let mut y = vec![0.0; n * self.out_dim];
        for i in 0..n {
            let xi = &x[i * self.in_dim..(i + 1) * self.in_dim];
            for (o, yo) in y[i * self.out_dim..(i + 1) * self.out_dim].iter_mut().enumerate() {
                let row = &self.weight.value[o * self.in_dim..(o + 1) * self.in_dim];
                let b = self.bias.as_ref().map_or(0.0, |b| b.value[o]);
                *yo = row.iter().zip(xi).map(|(w, v)| w * v).sum::<f64>() + b;
            }
        }
        Ok(y)
    }

    pub fn backward(&mut self, x: &[f64], dy: &[f64], n: usize) -> Vec<f64> {
        let mut dx = vec![0.0; n * self.in_dim];
        for i in 0..n {
            let xi = &x[i * self.in_dim..(i + 1) * self.in_dim];
            let dxi = &mut dx[i * self.in_dim..(i + 1) * self.in_dim];
            for o in 0..self.out_dim {
                let g = dy[i * self.out_dim + o];
                if let Some(b) = self.bias.as_mut() {
                    b.grad[o] += g;
                }
                let row = o * self.in_dim;
                for j in 0..self.in_dim {
                    self.weight.grad[row + j] += g * xi[j];
                    dxi[j] += g * self.weight.value[row + j];
                }
            }
        }
        dx
    }

    pub fn params(&self) -> Vec<&Param> {
        std::iter::once(&self.weight).chain(self.bias.as_ref()).collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        std::iter::once(&mut self.weight).chain(self.bias.as_mut()).collect()
    }
}

pub fn relu(x: &Tensor) -> Tensor {
    let mut y = x.clone();
    y.data.iter_mut().for_each(|v| *v = v.max(0.0));
    y
}

/// Gradient of ReLU given its output.
pub fn relu_backward(y: &Tensor, dy: &Tensor) -> Tensor {
    let mut dx = dy.clone();
    for (d, &v) in dx.data.iter_mut().zip(&y.data) {
        if v <= 0.0 {
            *d = 0.0;
        }
    }
    dx
}

/// Nearest-neighbour 2x upsampling.
pub fn upsample2(x: &Tensor) -> Tensor {
    let (h, w) = (x.h * 2, x.w * 2);
    let mut y = Tensor::zeros(x.n, x.c, h, w);
    for nc in 0..x.n * x.c {
        let src = &x.data[nc * x.h * x.w..(nc + 1) * x.h * x.w];
        let dst = &mut y.data[nc * h * w..(nc + 1) * h * w];
        for yy in 0..h {
            for xx in 0..w {
                dst[yy * w + xx] = src[(yy / 2) * x.w + xx / 2];
            }
        }
    }
    y
}

pub fn upsample2_backward(dy: &Tensor) -> Tensor {
    let (h, w) = (dy.h / 2, dy.w / 2);
    let mut dx = Tensor::zeros(dy.n, dy.c, h, w);
    for nc in 0..dy.n * dy.c {
        let src = &dy.data[nc * dy.h * dy.w..(nc + 1) * dy.h * dy.w];
        let dst = &mut dx.data[nc * h * w..(nc + 1) * h * w];
        for yy in 0..dy.h {
            for xx in 0..dy.w {
                dst[(yy / 2) * w + xx / 2] += src[yy * dy.w + xx];
            }
        }
    }
    dx
}

/// Concatenates along the channel axis.
pub fn concat_channels(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if (a.n, a.h, a.w) != (b.n, b.h, b.w) {
        return Err(Error::Dimension(format!(
            "cannot concatenate {:?} with {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let mut out = Tensor::zeros(a.n, a.c + b.c, a.h, a.w);
    for i in 0..a.n {
        let dst = out.item_mut(i);
        let (left, right) = dst.split_at_mut(a.item_len());
        left.copy_from_slice(a.item(i));
        right.copy_from_slice(b.item(i));
    }
    Ok(out)
}

/// Splits a channel-concatenated gradient back into its two parts.
pub fn split_channels(x: &Tensor, first: usize) -> (Tensor, Tensor) {
    let mut a = Tensor::zeros(x.n, first, x.h, x.w);
    let mut b = Tensor::zeros(x.n, x.c - first, x.h, x.w);
    for i in 0..x.n {
        let src = x.item(i);
        let (l, r) = src.split_at(first * x.plane());
        a.item_mut(i).copy_from_slice(l);
        b.item_mut(i).copy_from_slice(r);
    }
    (a, b)
}

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Mean binary cross-entropy computed from logits, and its gradient.
pub fn bce_with_logits(logits: &[f64], targets: &[f64]) -> (f64, Vec<f64>) {
    let n = logits.len() as f64;
    let mut loss = 0.0;
    let grad = logits
        .iter()
        .zip(targets)
        .map(|(&z, &y)| {
            // log(1 + e^z) - y z, evaluated stably
            loss += z.max(0.0) - y * z + (-z.abs()).exp().ln_1p();
            (sigmoid(z) - y) / n
        })
        .collect();
    (loss / n, grad)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn batchnorm_train_backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut bn = BatchNorm2d::new("bn", 2);
        bn.gamma.value = vec![1.3, -0.7];
        bn.beta.value = vec![0.2, 0.1];
        let data: Vec<f64> = (0..2 * 2 * 3 * 3).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let x = Tensor::from_vec(2, 2, 3, 3, data).unwrap();
        let r: Vec<f64> = (0..x.data.len()).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let obj = |bn: &BatchNorm2d, x: &Tensor| -> f64 {
            let (y, _) = bn.forward(x, Mode::Train);
            y.data.iter().zip(&r).map(|(a, b)| a * b).sum()
        };
        let (_, cache) = bn.forward(&x, Mode::Train);
        let dy = Tensor::from_vec(2, 2, 3, 3, r.clone()).unwrap();
        let dx = bn.backward(&cache, &dy);
        let eps = 1e-6;
        for idx in 0..x.data.len() {
            let mut xp = x.clone();
            xp.data[idx] += eps;
            let mut xm = x.clone();
            xm.data[idx] -= eps;
            let fd = (obj(&bn, &xp) - obj(&bn, &xm)) / (2.0 * eps);
            assert!((fd - dx.data[idx]).abs() < 1e-6, "{idx}: {fd} vs {}", dx.data[idx]);
        }
    }

    #[test]
    fn bce_at_half_is_ln2() {
        let (loss, _) = bce_with_logits(&[0.0; 16], &[1.0; 16]);
        assert!((loss - std::f64::consts::LN_2).abs() < 1e-15);
    }

    #[test]
    fn upsample_backward_is_adjoint() {
        let x = Tensor::from_vec(1, 1, 2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let up = upsample2(&x);
        assert_eq!(up.data[0..4], [1.0, 1.0, 2.0, 2.0]);
        let back = upsample2_backward(&up);
        assert_eq!(back.data, vec![4.0, 8.0, 12.0, 16.0]);
    }
}
