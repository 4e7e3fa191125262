use crate::error::{Error, Result};
use crate::grid::Grid;

/// Dense NCHW activation tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(n: usize, c: usize, h: usize, w: usize) -> Self {
        Self {
            n,
            c,
            h,
            w,
            data: vec![0.0; n * c * h * w],
        }
    }

    pub fn from_vec(n: usize, c: usize, h: usize, w: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != n * c * h * w {
            return Err(Error::Dimension(format!(
                "tensor {n}x{c}x{h}x{w} needs {} values, got {}",
                n * c * h * w,
                data.len()
            )));
        }
        Ok(Self { n, c, h, w, data })
    }

    pub fn shape(&self) -> [usize; 4] {
        [self.n, self.c, self.h, self.w]
    }

    pub fn plane(&self) -> usize {
        self.h * self.w
    }

    pub fn item_len(&self) -> usize {
        self.c * self.h * self.w
    }

    pub fn item(&self, i: usize) -> &[f64] {
        let len = self.item_len();
        &self.data[i * len..(i + 1) * len]
    }

    pub fn item_mut(&mut self, i: usize) -> &mut [f64] {
        let len = self.item_len();
        &mut self.data[i * len..(i + 1) * len]
    }

    pub fn channel(&self, i: usize, ch: usize) -> &[f64] {
        let p = self.plane();
        let off = (i * self.c + ch) * p;
        &self.data[off..off + p]
    }

    /// Copies out batch items `idx` into a new tensor.
    pub fn select(&self, idx: &[usize]) -> Tensor {
        let mut data = Vec::with_capacity(idx.len() * self.item_len());
        for &i in idx {
            data.extend_from_slice(self.item(i));
        }
        Tensor {
            n: idx.len(),
            c: self.c,
            h: self.h,
            w: self.w,
            data,
        }
    }

    /// Stacks single-item tensors of identical shape along the batch axis.
    pub fn stack(items: &[Tensor]) -> Result<Tensor> {
        let first = items
            .first()
            .ok_or_else(|| Error::InvalidArgument("cannot stack an empty list".into()))?;
        let mut data = Vec::with_capacity(items.len() * first.data.len());
        let mut n = 0;
        for t in items {
            if (t.c, t.h, t.w) != (first.c, first.h, first.w) {
                return Err(Error::Dimension("stacked tensors differ in shape".into()));
            }
            n += t.n;
            data.extend_from_slice(&t.data);
        }
        Ok(Tensor {
            n,
            c: first.c,
            h: first.h,
            w: first.w,
            data,
        })
    }

    /// Packs single-channel grids into an `n x 1 x h x w` tensor.
    pub fn from_grids(grids: &[&Grid]) -> Result<Tensor> {
        let first = grids
            .first()
            .ok_or_else(|| Error::InvalidArgument("no images given".into()))?;
        let (h, w) = first.dims();
        let mut data = Vec::with_capacity(grids.len() * h * w);
        for g in grids {
            if g.dims() != (h, w) {
                return Err(Error::Dimension(format!(
                    "image {}x{} in a batch of {h}x{w}",
                    g.height(),
                    g.width()
                )));
            }
            data.extend(g.data().iter().map(|&v| v as f64));
        }
        Ok(Tensor {
            n: grids.len(),
            c: 1,
            h,
            w,
            data,
        })
    }
}
