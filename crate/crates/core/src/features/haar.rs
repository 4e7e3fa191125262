//! Orthonormal 2-D discrete Haar wavelet transform.

use crate::error::{Error, Result};
use crate::grid::Grid;

/// One `h x w` coefficient plane stored row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Plane {
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
}

impl Plane {
    pub fn from_grid(g: &Grid) -> Self {
        Self {
            height: g.height(),
            width: g.width(),
            data: g.data().iter().map(|&v| v as f64).collect(),
        }
    }

    pub fn mean_abs(&self) -> f64 {
        self.data.iter().map(|v| v.abs()).sum::<f64>() / self.data.len().max(1) as f64
    }
}

/// Detail subbands of one decomposition level: horizontal, vertical, diagonal.
#[derive(Debug, Clone, PartialEq)]
pub struct Details {
    pub horizontal: Plane,
    pub vertical: Plane,
    pub diagonal: Plane,
}

impl Details {
    pub fn subbands(&self) -> [&Plane; 3] {
        [&self.horizontal, &self.vertical, &self.diagonal]
    }
}

/// Multi-level decomposition; `details[0]` is the finest level.
#[derive(Debug, Clone, PartialEq)]
pub struct HaarPyramid {
    pub approx: Plane,
    pub details: Vec<Details>,
}

/// Single-level analysis of each 2x2 block `[[a, b], [c, d]]`:
/// approximation `(a+b+c+d)/2`, horizontal `(a-b+c-d)/2`,
/// vertical `(a+b-c-d)/2`, diagonal `(a-b-c+d)/2`.
pub fn analyze(p: &Plane) -> Result<(Plane, Details)> {
    if p.height % 2 != 0 || p.width % 2 != 0 || p.height == 0 || p.width == 0 {
        return Err(Error::Dimension(format!(
            "Haar analysis needs even dimensions, got {}x{}",
            p.height, p.width
        )));
    }
    let (h, w) = (p.height / 2, p.width / 2);
    let mk = || Plane {
        height: h,
        width: w,
        data: vec![0.0; h * w],
    };
    let (mut ap, mut hz, mut vt, mut dg) = (mk(), mk(), mk(), mk());
    for y in 0..h {
        for x in 0..w {
            let a = p.data[2 * y * p.width + 2 * x];
            let b = p.data[2 * y * p.width + 2 * x + 1];
            let c = p.data[(2 * y + 1) * p.width + 2 * x];
            let d = p.data[(2 * y + 1) * p.width + 2 * x + 1];
            let i = y * w + x;
            ap.data[i] = (a + b + c + d) * 0.5;
            hz.data[i] = (a - b + c - d) * 0.5;
            vt.data[i] = (a + b - c - d) * 0.5;
            dg.data[i] = (a - b - c + d) * 0.5;
        }
    }
    Ok((
        ap,
        Details {
            horizontal: hz,
            vertical: vt,
            diagonal: dg,
        },
    ))
}

pub fn synthesize(approx: &Plane, det: &Details) -> Plane {
    let (h, w) = (approx.height, approx.width);
    let mut out = Plane {
        height: 2 * h,
        width: 2 * w,
        data: vec![0.0; 4 * h * w],
    };
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            let (s, hz, vt, dg) = (
                approx.data[i],
                det.horizontal.data[i],
                det.vertical.data[i],
                det.diagonal.data[i],
            );
            out.data[2 * y * 2 * w + 2 * x] = (s + hz + vt + dg) * 0.5;
            out.data[2 * y * 2 * w + 2 * x + 1] = (s - hz + vt - dg) * 0.5;
            out.data[(2 * y + 1) * 2 * w + 2 * x] = (s + hz - vt - dg) * 0.5;
            out.data[(2 * y + 1) * 2 * w + 2 * x + 1] = (s - hz - vt + dg) * 0.5;
        }
    }
    out
}

pub fn forward(image: &Grid, levels: usize) -> Result<HaarPyramid> {
    if levels == 0 {
        return Err(Error::InvalidArgument("at least one Haar level is required".into()));
    }
    let mut approx = Plane::from_grid(image);
    let mut details = Vec::with_capacity(levels);
    for _ in 0..levels {
        let (a, d) = analyze(&approx)?;
        approx = a;
        details.push(d);
    }
    Ok(HaarPyramid { approx, details })
}

pub fn inverse(pyramid: &HaarPyramid) -> Plane {
    pyramid
        .details
        .iter()
        .rev()
        .fold(pyramid.approx.clone(), |a, d| synthesize(&a, d))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn four_by_four_matches_hand_computation() {
        let g = Grid::from_fn(4, 4, |y, x| (y * 4 + x) as f32);
        let pyr = forward(&g, 1).unwrap();
        // top-left block [[0,1],[4,5]]
        assert_eq!(pyr.approx.data[0], 5.0);
        assert_eq!(pyr.details[0].horizontal.data[0], -1.0);
        assert_eq!(pyr.details[0].vertical.data[0], -4.0);
        assert_eq!(pyr.details[0].diagonal.data[0], 0.0);
        // level two approximation is the global sum / 4
        let pyr2 = forward(&g, 2).unwrap();
        assert_eq!(pyr2.approx.data, vec![(0..16).sum::<usize>() as f64 / 4.0]);
    }

    #[test]
    fn inverse_reconstructs() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let g = Grid::from_fn(32, 16, |_, _| rng.gen());
        let rec = inverse(&forward(&g, 3).unwrap());
        for (a, b) in rec.data.iter().zip(g.data()) {
            assert!((a - *b as f64).abs() < 1e-12);
        }
    }

    #[test]
    fn odd_dims_rejected() {
        assert!(forward(&Grid::filled(6, 6, 0.0), 2).is_err());
    }
}
