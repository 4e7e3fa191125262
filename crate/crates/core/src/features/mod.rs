//! Query features (Haar wavelet keys) and texture features for memory records.
//! Shape features come from [`crate::sae`].

pub mod haar;
mod texture;

pub use texture::{
    train_texture_encoder, PretrainedBackbone, DEFAULT_PCA_DIM, DEFAULT_TEXTURE_DIM, SmallTextureEncoder, TextureExtractor, TextureTrainConfig,
};

use crate::error::Result;
use crate::grid::Grid;

pub const DEFAULT_HAAR_LEVELS: usize = 2;

/// Wavelet key used for nearest-neighbour lookup.
#[derive(Debug, Clone, PartialEq)]
pub struct QueryFeature(pub Vec<f32>);

#[derive(Debug, Clone, PartialEq)]
pub struct TextureFeature {
    pub values: Vec<f32>,
    pub extractor_id: String,
}

/// Length of the query feature for an `h x w` image at `levels` depth.
pub fn query_dim(h: usize, w: usize, levels: usize) -> usize {
    (h >> levels) * (w >> levels) + 3 * levels
}

/// Mean absolute coefficient of every detail subband, finest level first.
pub fn detail_energies(pyramid: &haar::HaarPyramid) -> Vec<f64> {
    pyramid
        .details
        .iter()
        .flat_map(|d| d.subbands().map(haar::Plane::mean_abs))
        .collect()
}

/// Coarsest approximation coefficients followed by the detail-band energies,
/// L2-normalized unless all zero.
pub fn query_features(image: &Grid, levels: usize) -> Result<QueryFeature> {
    let pyramid = haar::forward(image, levels)?;
    let mut v: Vec<f64> = pyramid.approx.data.clone();
    v.extend(detail_energies(&pyramid));
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm > 0.0 {
        v.iter_mut().for_each(|x| *x /= norm);
    }
    Ok(QueryFeature(v.into_iter().map(|x| x as f32).collect()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_image_has_zero_detail_energy() {
        let g = Grid::filled(64, 64, 0.42);
        let q = query_features(&g, 2).unwrap();
        assert_eq!(q.0.len(), query_dim(64, 64, 2));
        assert!(q.0[q.0.len() - 6..].iter().all(|&e| e == 0.0));
        let norm: f32 = q.0.iter().map(|x| x * x).sum::<f32>().sqrt();
        assert!((norm - 1.0).abs() < 1e-5);
    }

    #[test]
    fn zero_image_stays_zero() {
        let q = query_features(&Grid::filled(16, 16, 0.0), 2).unwrap();
        assert!(q.0.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn checkerboard_and_inverse_share_detail_energies() {
        let board = Grid::from_fn(32, 32, |y, x| ((y / 3 + x / 5) % 2) as f32);
        let inv = Grid::from_fn(32, 32, |y, x| 1.0 - board.get(y, x));
        let e1 = detail_energies(&haar::forward(&board, 2).unwrap());
        let e2 = detail_energies(&haar::forward(&inv, 2).unwrap());
        assert_eq!(e1, e2);
        assert!(e1.iter().any(|&e| e > 0.0));
        let fine = Grid::from_fn(32, 32, |y, x| ((y + x) % 2) as f32);
        let fine_inv = Grid::from_fn(32, 32, |y, x| 1.0 - fine.get(y, x));
        let (q1, q2) = (query_features(&fine, 2).unwrap(), query_features(&fine_inv, 2).unwrap());
        assert_eq!(q1.0[q1.0.len() - 6..], q2.0[q2.0.len() - 6..]);
    }

    #[test]
    fn dimension_is_resolution_dependent_only() {
        let a = query_features(&Grid::filled(256, 256, 0.1), 2).unwrap();
        assert_eq!(a.0.len(), 64 * 64 + 6);
    }
}
