//! Light-weight convolutional shape auto-encoder. Its encoder output is the
//! shape feature stored in supervised memories.
//!
//! Masks are resampled onto a fixed 64x64 canvas, encoded by three stride-2
//! convolutions and a pointwise projection to a `latent_dim / 64`-channel 8x8
//! code, and decoded by the mirrored upsampling path.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::grid::{Grid, Mask};
use crate::nn::{self, bce_with_logits, shuffled_batches, Adam, ConvChain, LayerSpec, Param, Tensor};

pub const SAE_CANVAS: usize = 64;
const CODE_SIDE: usize = 8;
pub const DEFAULT_LATENT_DIM: usize = 256;

#[derive(Debug, Clone, PartialEq)]
pub struct SaeConfig {
    pub latent_dim: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
}

impl Default for SaeConfig {
    fn default() -> Self {
        Self {
            latent_dim: DEFAULT_LATENT_DIM,
            epochs: 60,
            batch_size: 5,
            learning_rate: 1e-3,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SaeModel {
    encoder: ConvChain,
    decoder: ConvChain,
    latent_dim: usize,
    resolution: (usize, usize),
    trained: bool,
}

impl SaeModel {
    /// Seed-initialized model for masks of the given resolution.
    pub fn untrained(latent_dim: usize, resolution: (usize, usize), seed: u64) -> Result<Self> {
        let per_cell = CODE_SIDE * CODE_SIDE;
        if latent_dim == 0 || latent_dim % per_cell != 0 {
            return Err(Error::InvalidArgument(format!(
                "latent_dim must be a positive multiple of {per_cell}, got {latent_dim}"
            )));
        }
        let code_ch = latent_dim / per_cell;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let encoder = ConvChain::new(
            "sae.enc",
            &[
                LayerSpec::down(1, 8),
                LayerSpec::down(8, 16),
                LayerSpec::down(16, 16),
                LayerSpec::pointwise(16, code_ch).linear(),
            ],
            &mut rng,
        );
        let decoder = ConvChain::new(
            "sae.dec",
            &[
                LayerSpec::pointwise(code_ch, 16),
                LayerSpec::up(16, 16),
                LayerSpec::up(16, 8),
                LayerSpec::up(8, 1).linear(),
            ],
            &mut rng,
        );
        Ok(Self {
            encoder,
            decoder,
            latent_dim,
            resolution,
            trained: false,
        })
    }

    pub fn latent_dim(&self) -> usize {
        self.latent_dim
    }

    pub fn resolution(&self) -> (usize, usize) {
        self.resolution
    }

    pub fn is_trained(&self) -> bool {
        self.trained
    }

    pub fn parameter_count(&self) -> usize {
        self.params().iter().map(|p| p.len()).sum()
    }

    pub fn params(&self) -> Vec<&Param> {
        self.encoder.params().into_iter().chain(self.decoder.params()).collect()
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        self.encoder
            .params_mut()
            .into_iter()
            .chain(self.decoder.params_mut())
            .collect()
    }

    fn to_canvas(&self, mask: &Mask) -> Result<Grid> {
        if mask.dims() != self.resolution {
            return Err(Error::Dimension(format!(
                "SAE expects {}x{} masks, got {}x{}",
                self.resolution.0,
                self.resolution.1,
                mask.height(),
                mask.width()
            )));
        }
        let g = mask.to_grid();
        let (h, w) = self.resolution;
        Ok(if h == w && h % SAE_CANVAS == 0 {
            g.downsample_mean(h / SAE_CANVAS)
        } else {
            g.resize_bilinear(SAE_CANVAS, SAE_CANVAS)
        })
    }

    pub fn encode(&self, mask: &Mask) -> Result<Vec<f32>> {
        let canvas = self.to_canvas(mask)?;
        let code = self.encoder.forward(&Tensor::from_grids(&[&canvas])?)?;
        Ok(code.data.iter().map(|&v| v as f32).collect())
    }

    /// Probability map at the model's mask resolution.
    pub fn decode(&self, latent: &[f32]) -> Result<Grid> {
        if latent.len() != self.latent_dim {
            return Err(Error::Dimension(format!(
                "latent has length {}, SAE expects {}",
                latent.len(),
                self.latent_dim
            )));
        }
        let code = Tensor::from_vec(
            1,
            self.latent_dim / (CODE_SIDE * CODE_SIDE),
            CODE_SIDE,
            CODE_SIDE,
            latent.iter().map(|&v| v as f64).collect(),
        )?;
        let logits = self.decoder.forward(&code)?;
        let probs = Grid::new(
            SAE_CANVAS,
            SAE_CANVAS,
            logits.data.iter().map(|&z| nn::sigmoid(z) as f32).collect(),
        )?;
        Ok(probs.resize_bilinear(self.resolution.0, self.resolution.1))
    }

    /// Encoder output used as the memory shape feature; fails on an untrained model.
    pub fn shape_features(&self, mask: &Mask) -> Result<Vec<f32>> {
        if !self.trained {
            return Err(Error::Untrained("shape auto-encoder has not been trained".into()));
        }
        self.encode(mask)
    }

    pub fn to_entries(&self) -> Vec<(String, Vec<usize>, Vec<f32>)> {
        nn::export_params(self.params())
    }

    pub fn meta(&self) -> Vec<(String, String)> {
        vec![
            ("sae.latent_dim".into(), self.latent_dim.to_string()),
            ("sae.height".into(), self.resolution.0.to_string()),
            ("sae.width".into(), self.resolution.1.to_string()),
        ]
    }

    /// Restores a trained model from bundle tensors.
    pub fn from_entries(
        latent_dim: usize,
        resolution: (usize, usize),
        entries: &[(String, Vec<usize>, Vec<f32>)],
    ) -> Result<Self> {
        let mut m = Self::untrained(latent_dim, resolution, 0)?;
        nn::load_params(m.params_mut(), entries)?;
        m.trained = true;
        Ok(m)
    }
}

/// Trains by pixelwise binary cross-entropy reconstruction.
pub fn train_sae(masks: &[&Mask], cfg: &SaeConfig) -> Result<SaeModel> {
    train_sae_logged(masks, cfg).map(|(m, _)| m)
}

/// Like [`train_sae`], also returning the mean training loss of every epoch.
pub fn train_sae_logged(masks: &[&Mask], cfg: &SaeConfig) -> Result<(SaeModel, Vec<f64>)> {
    if masks.len() < 2 {
        return Err(Error::Data(format!(
            "shape auto-encoder needs at least 2 masks, got {}",
            masks.len()
        )));
    }
    let resolution = masks[0].dims();
    let mut model = SaeModel::untrained(cfg.latent_dim, resolution, cfg.seed)?;
    let canvases: Vec<Grid> = masks.iter().map(|m| model.to_canvas(m)).collect::<Result<_>>()?;
    let data = Tensor::from_grids(&canvases.iter().collect::<Vec<_>>())?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5AE);
    let mut opt = Adam::new(cfg.learning_rate);
    let mut history = Vec::with_capacity(cfg.epochs);
    for _ in 0..cfg.epochs {
        let mut total = 0.0;
        let batches = shuffled_batches(masks.len(), cfg.batch_size, &mut rng);
        for batch in &batches {
            let x = data.select(batch);
            let (code, enc_cache) = model.encoder.forward_cached(&x)?;
            let (logits, dec_cache) = model.decoder.forward_cached(&code)?;
            let (loss, grad) = bce_with_logits(&logits.data, &x.data);
            total += loss * batch.len() as f64;
            let dlogits = Tensor::from_vec(logits.n, 1, logits.h, logits.w, grad)?;
            model.params_mut().into_iter().for_each(Param::zero_grad);
            let dcode = model.decoder.backward(&dec_cache, &dlogits);
            model.encoder.backward(&enc_cache, &dcode);
            opt.step(model.params_mut());
        }
        history.push(total / masks.len() as f64);
    }
    model.trained = true;
    Ok((model, history))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{synth_domain_with, ShiftSpec, SynthOptions};

    fn masks(n: usize, res: usize) -> Vec<Mask> {
        let opts = SynthOptions {
            resolution: res,
            ..Default::default()
        };
        synth_domain_with(n, &ShiftSpec::identity(), 3, &opts)
            .unwrap()
            .samples()
            .iter()
            .map(|s| s.mask.clone().unwrap())
            .collect()
    }

    #[test]
    fn parameter_budget_near_ten_thousand() {
        let m = SaeModel::untrained(256, (64, 64), 0).unwrap();
        let n = m.parameter_count();
        assert!((5_000..=20_000).contains(&n), "{n}");
    }

    #[test]
    fn latent_length_and_finiteness() {
        let ms = masks(2, 64);
        let refs: Vec<&Mask> = ms.iter().collect();
        let cfg = SaeConfig {
            epochs: 0,
            ..Default::default()
        };
        let sae = train_sae(&refs, &cfg).unwrap();
        assert_eq!(sae, {
            let mut s = SaeModel::untrained(256, (64, 64), 0).unwrap();
            s.trained = true;
            s
        });
        let z = sae.shape_features(&ms[0]).unwrap();
        assert_eq!(z.len(), 256);
        assert_eq!(z, sae.encode(&ms[0]).unwrap());
        let empty = sae.encode(&Mask::zeros(64, 64)).unwrap();
        assert!(empty.iter().all(|v| v.is_finite()));
        let out = sae.decode(&z).unwrap();
        assert_eq!(out.dims(), (64, 64));
        assert!(out.data().iter().all(|&p| (0.0..=1.0).contains(&p)));
        assert_eq!(out, sae.decode(&z).unwrap());
        assert!(matches!(sae.decode(&z[..10]), Err(Error::Dimension(_))));
        assert!(matches!(sae.encode(&Mask::zeros(32, 32)), Err(Error::Dimension(_))));
    }

    #[test]
    fn untrained_model_refuses_shape_features() {
        let sae = SaeModel::untrained(64, (64, 64), 1).unwrap();
        assert!(matches!(sae.shape_features(&Mask::zeros(64, 64)), Err(Error::Untrained(_))));
        assert!(train_sae(&[], &SaeConfig::default()).is_err());
    }

    #[test]
    fn training_reduces_loss_and_is_deterministic() {
        let ms = masks(6, 128);
        let refs: Vec<&Mask> = ms.iter().collect();
        let cfg = SaeConfig {
            latent_dim: 64,
            epochs: 4,
            ..Default::default()
        };
        let (a, hist) = train_sae_logged(&refs, &cfg).unwrap();
        assert!(hist.last().unwrap() < &hist[0]);
        let b = train_sae(&refs, &cfg).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.parameter_count(), SaeModel::untrained(64, (128, 128), 9).unwrap().parameter_count());
        assert_eq!(a.decode(&a.encode(&ms[0]).unwrap()).unwrap().dims(), (128, 128));
    }
}
