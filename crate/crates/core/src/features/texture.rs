use std::path::{Path, PathBuf};

use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::TextureFeature;
use crate::archive::{TensorArchive, TensorEntry};
use crate::error::{Error, Result};
use crate::grid::Grid;
use crate::nn::{self, bce_with_logits, shuffled_batches, Adam, Conv2d, ConvChain, LayerSpec, Linear, Tensor};

pub const BACKBONE_MAGIC: &[u8; 4] = b"CTXW";
pub const DEFAULT_TEXTURE_DIM: usize = 128;
pub const DEFAULT_PCA_DIM: usize = 512;

#[derive(Debug, Clone, PartialEq)]
pub struct TextureTrainConfig {
    pub dim: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
}

impl Default for TextureTrainConfig {
    fn default() -> Self {
        Self {
            dim: DEFAULT_TEXTURE_DIM,
            epochs: 30,
            batch_size: 5,
            learning_rate: 1e-3,
            seed: 0,
        }
    }
}

/// Four stride-2 convolutions, globally average pooled.
#[derive(Debug, Clone, PartialEq)]
pub struct SmallTextureEncoder {
    encoder: ConvChain,
    dim: usize,
}

fn encoder_specs(dim: usize) -> [LayerSpec; 4] {
    [
        LayerSpec::down(1, 8),
        LayerSpec::down(8, 16),
        LayerSpec::down(16, 32),
        LayerSpec::down(32, dim),
    ]
}

impl SmallTextureEncoder {
    pub fn untrained(dim: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self {
            encoder: ConvChain::new("texture.enc", &encoder_specs(dim), &mut rng),
            dim,
        }
    }

    pub fn extract(&self, image: &Grid) -> Result<Vec<f32>> {
        let x = Tensor::from_grids(&[image])?;
        let map = self.encoder.forward(&x)?;
        let plane = map.plane() as f64;
        Ok((0..map.c)
            .map(|c| (map.channel(0, c).iter().sum::<f64>() / plane) as f32)
            .collect())
    }
}

/// Trains the encoder as half of an image auto-encoder and keeps the encoder.
pub fn train_texture_encoder(images: &[&Grid], cfg: &TextureTrainConfig) -> Result<SmallTextureEncoder> {
    if images.is_empty() {
        return Err(Error::Data("texture encoder needs at least one image".into()));
    }
    let (h, w) = images[0].dims();
    if h % 16 != 0 || w % 16 != 0 {
        return Err(Error::Dimension(format!("texture encoder needs dims divisible by 16, got {h}x{w}")));
    }
    let mut model = SmallTextureEncoder::untrained(cfg.dim, cfg.seed);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x7E87);
    let mut decoder = ConvChain::new(
        "texture.dec",
        &[
            LayerSpec::up(cfg.dim, 32),
            LayerSpec::up(32, 16),
            LayerSpec::up(16, 8),
            LayerSpec::up(8, 1).linear(),
        ],
        &mut rng,
    );
    let mut opt = Adam::new(cfg.learning_rate);
    let data = Tensor::from_grids(images)?;
    for _ in 0..cfg.epochs {
        for batch in shuffled_batches(images.len(), cfg.batch_size, &mut rng) {
            let x = data.select(&batch);
            let (code, enc_cache) = model.encoder.forward_cached(&x)?;
            let (logits, dec_cache) = decoder.forward_cached(&code)?;
            let (_, grad) = bce_with_logits(&logits.data, &x.data);
            let dlogits = Tensor::from_vec(logits.n, logits.c, logits.h, logits.w, grad)?;
            model.encoder.params_mut().into_iter().for_each(nn::Param::zero_grad);
            decoder.params_mut().into_iter().for_each(nn::Param::zero_grad);
            let dcode = decoder.backward(&dec_cache, &dlogits);
            model.encoder.backward(&enc_cache, &dcode);
            let params: Vec<&mut nn::Param> = model
                .encoder
                .params_mut()
                .into_iter()
                .chain(decoder.params_mut())
                .collect();
            opt.step(params);
        }
    }
    Ok(model)
}

/// Frozen VGG-style backbone: 3x3 convolutions with ReLU and 2x2 max pooling,
/// then one fully connected layer whose ReLU activations are the features.
#[derive(Debug, Clone, PartialEq)]
pub struct PretrainedBackbone {
    source: String,
    input_size: usize,
    convs: Vec<Conv2d>,
    pool_after: Vec<usize>,
    fc: Linear,
    pca: Option<Pca>,
}

#[derive(Debug, Clone, PartialEq)]
struct Pca {
    mean: Vec<f32>,
    /// `dim x in_dim`, rows beyond the available rank are zero.
    components: Vec<f32>,
    dim: usize,
}

impl PretrainedBackbone {
    /// Loads weights from a tensor archive (`conv{i}.weight`, `conv{i}.bias`,
    /// `fc1.weight`, `fc1.bias`; metadata `input_size` and `pool_after`).
    pub fn load(path: &Path) -> Result<Self> {
        if !path.is_file() {
            return Err(Error::PretrainedUnavailable {
                path: path.to_path_buf(),
            });
        }
        let archive = TensorArchive::load(path, BACKBONE_MAGIC)?;
        let source = path
            .file_stem()
            .and_then(|s| s.to_str())
            .unwrap_or("backbone")
            .to_string();
        Self::from_archive(&archive, source)
    }

    fn from_archive(archive: &TensorArchive, source: String) -> Result<Self> {
        let input_size: usize = archive
            .meta("input_size")?
            .parse()
            .map_err(|_| Error::Format("input_size is not an integer".into()))?;
        let pool_after = parse_list(archive.meta("pool_after")?)?;
        let mut convs = Vec::new();
        while let Some(w) = archive.get(&format!("conv{}.weight", convs.len())) {
            let i = convs.len();
            let b = archive
                .get(&format!("conv{i}.bias"))
                .ok_or_else(|| Error::Format(format!("conv{i}.bias missing")))?;
            if w.shape.len() != 4 || w.shape[2] != w.shape[3] {
                return Err(Error::Format(format!("conv{i}.weight must be [out, in, k, k]")));
            }
            let mut rng = ChaCha8Rng::seed_from_u64(0);
            let mut conv = Conv2d::new(&format!("conv{i}"), w.shape[1], w.shape[0], w.shape[2], 1, &mut rng);
            conv.weight.value = w.values.iter().map(|&v| v as f64).collect();
            conv.bias.value = b.values.iter().map(|&v| v as f64).collect();
            convs.push(conv);
        }
        if convs.is_empty() {
            return Err(Error::Format("backbone has no convolution layers".into()));
        }
        let fw = archive
            .get("fc1.weight")
            .ok_or_else(|| Error::Format("fc1.weight missing".into()))?;
        let fb = archive
            .get("fc1.bias")
            .ok_or_else(|| Error::Format("fc1.bias missing".into()))?;
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut fc = Linear::new("fc1", fw.shape[1], fw.shape[0], true, &mut rng);
        fc.weight.value = fw.values.iter().map(|&v| v as f64).collect();
        fc.bias.as_mut().expect("bias").value = fb.values.iter().map(|&v| v as f64).collect();
        let pca = match (archive.get("pca.mean"), archive.get("pca.components")) {
            (Some(m), Some(c)) => Some(Pca {
                mean: m.values.clone(),
                components: c.values.clone(),
                dim: c.shape[0],
            }),
            _ => None,
        };
        Ok(Self {
            source,
            input_size,
            convs,
            pool_after,
            fc,
            pca,
        })
    }

    pub fn raw_dim(&self) -> usize {
        self.fc.out_dim
    }

    fn fc_activations(&self, image: &Grid) -> Result<Vec<f64>> {
        let resized = image.resize_bilinear(self.input_size, self.input_size);
        let mut x = Tensor::from_grids(&[&resized])?;
        if self.convs[0].in_ch > 1 {
            let reps = self.convs[0].in_ch;
            x = Tensor::from_vec(1, reps, x.h, x.w, x.data.repeat(reps))?;
        }
        for (i, conv) in self.convs.iter().enumerate() {
            x = nn::relu(&conv.forward(&x)?);
            if self.pool_after.contains(&i) {
                x = max_pool2(&x);
            }
        }
        let mut y = self.fc.forward(&x.data, 1)?;
        y.iter_mut().for_each(|v| *v = v.max(0.0));
        Ok(y)
    }

    /// Fits a PCA projection to `dim` components on source images.
    pub fn fit_pca(&mut self, images: &[&Grid], dim: usize) -> Result<()> {
        if images.is_empty() {
            return Err(Error::Data("PCA needs at least one image".into()));
        }
        let rows: Vec<Vec<f64>> = images.iter().map(|g| self.fc_activations(g)).collect::<Result<_>>()?;
        let d = self.raw_dim();
        let n = rows.len();
        let mut mean = vec![0.0; d];
        for r in &rows {
            mean.iter_mut().zip(r).for_each(|(m, v)| *m += v / n as f64);
        }
        let centered = DMatrix::from_fn(n, d, |i, j| rows[i][j] - mean[j]);
        let svd = centered.svd(false, true);
        let v_t = svd.v_t.expect("requested V^T");
        let rank = v_t.nrows().min(dim);
        let mut components = vec![0.0f32; dim * d];
        for k in 0..rank {
            for j in 0..d {
                components[k * d + j] = v_t[(k, j)] as f32;
            }
        }
        self.pca = Some(Pca {
            mean: mean.into_iter().map(|v| v as f32).collect(),
            components,
            dim,
        });
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.pca.as_ref().map_or(self.raw_dim(), |p| p.dim)
    }

    pub fn extract(&self, image: &Grid) -> Result<Vec<f32>> {
        let raw = self.fc_activations(image)?;
        Ok(match &self.pca {
            None => raw.into_iter().map(|v| v as f32).collect(),
            Some(p) => {
                let d = raw.len();
                (0..p.dim)
                    .map(|k| {
                        let row = &p.components[k * d..(k + 1) * d];
                        row.iter()
                            .zip(raw.iter().zip(&p.mean))
                            .map(|(&c, (&v, &m))| c as f64 * (v - m as f64))
                            .sum::<f64>() as f32
                    })
                    .collect()
            }
        })
    }

    fn archive(&self) -> TensorArchive {
        let mut a = TensorArchive::new();
        a.meta.insert("input_size".into(), self.input_size.to_string());
        a.meta.insert(
            "pool_after".into(),
            self.pool_after.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(","),
        );
        for (i, c) in self.convs.iter().enumerate() {
            a.push(f32_entry(format!("conv{i}.weight"), &c.weight.shape, &c.weight.value));
            a.push(f32_entry(format!("conv{i}.bias"), &c.bias.shape, &c.bias.value));
        }
        a.push(f32_entry("fc1.weight".into(), &self.fc.weight.shape, &self.fc.weight.value));
        let b = self.fc.bias.as_ref().expect("bias");
        a.push(f32_entry("fc1.bias".into(), &b.shape, &b.value));
        if let Some(p) = &self.pca {
            a.push(TensorEntry::new("pca.mean", vec![p.mean.len()], p.mean.clone()));
            a.push(TensorEntry::new("pca.components", vec![p.dim, p.mean.len()], p.components.clone()));
        }
        a
    }

    /// Writes the backbone (including any fitted PCA) as a weight file.
    pub fn save(&self, path: &Path) -> Result<()> {
        self.archive().save(path, BACKBONE_MAGIC)
    }
}

fn f32_entry(name: String, shape: &[usize], values: &[f64]) -> TensorEntry {
    TensorEntry::new(name, shape.to_vec(), values.iter().map(|&v| v as f32).collect())
}

fn parse_list(s: &str) -> Result<Vec<usize>> {
    s.split(',')
        .filter(|t| !t.trim().is_empty())
        .map(|t| {
            t.trim()
                .parse()
                .map_err(|_| Error::Format(format!("bad integer list entry {t:?}")))
        })
        .collect()
}

fn max_pool2(x: &Tensor) -> Tensor {
    let (h, w) = (x.h / 2, x.w / 2);
    let mut y = Tensor::zeros(x.n, x.c, h, w);
    for nc in 0..x.n * x.c {
        let src = &x.data[nc * x.h * x.w..(nc + 1) * x.h * x.w];
        for yy in 0..h {
            for xx in 0..w {
                let m = [(0, 0), (0, 1), (1, 0), (1, 1)]
                    .iter()
                    .map(|&(dy, dx)| src[(2 * yy + dy) * x.w + 2 * xx + dx])
                    .fold(f64::NEG_INFINITY, f64::max);
                y.data[nc * h * w + yy * w + xx] = m;
            }
        }
    }
    y
}

/// Frozen texture descriptor.
#[derive(Debug, Clone, PartialEq)]
pub enum TextureExtractor {
    SmallEncoder(SmallTextureEncoder),
    Pretrained(PretrainedBackbone),
}

impl TextureExtractor {
    pub fn pretrained(path: impl Into<PathBuf>) -> Result<Self> {
        PretrainedBackbone::load(&path.into()).map(Self::Pretrained)
    }

    pub fn dim(&self) -> usize {
        match self {
            Self::SmallEncoder(e) => e.dim,
            Self::Pretrained(b) => b.dim(),
        }
    }

    /// Names the extractor kind and its exact weights.
    pub fn id(&self) -> String {
        let mut h = crc32fast::Hasher::new();
        for (_, _, values) in self.to_entries() {
            for v in values {
                h.update(&v.to_le_bytes());
            }
        }
        match self {
            Self::SmallEncoder(e) => format!("small-encoder-d{}-{:08x}", e.dim, h.finalize()),
            Self::Pretrained(b) => format!("pretrained-{}-d{}-{:08x}", b.source, b.dim(), h.finalize()),
        }
    }

    pub fn extract(&self, image: &Grid) -> Result<TextureFeature> {
        let values = match self {
            Self::SmallEncoder(e) => e.extract(image)?,
            Self::Pretrained(b) => b.extract(image)?,
        };
        Ok(TextureFeature {
            values,
            extractor_id: self.id(),
        })
    }

    /// Metadata and tensors for embedding in a model bundle.
    pub fn to_entries(&self) -> Vec<(String, Vec<usize>, Vec<f32>)> {
        match self {
            Self::SmallEncoder(e) => nn::export_params(e.encoder.params()),
            Self::Pretrained(b) => b
                .archive()
                .tensors
                .into_iter()
                .map(|t| (t.name, t.shape, t.values))
                .collect(),
        }
    }

    pub fn meta(&self) -> Vec<(String, String)> {
        match self {
            Self::SmallEncoder(e) => vec![
                ("texture.kind".into(), "trained-small-encoder".into()),
                ("texture.dim".into(), e.dim.to_string()),
            ],
            Self::Pretrained(b) => {
                let a = b.archive();
                vec![
                    ("texture.kind".into(), "pretrained-backbone".into()),
                    ("texture.source".into(), b.source.clone()),
                    ("texture.input_size".into(), a.meta["input_size"].clone()),
                    ("texture.pool_after".into(), a.meta["pool_after"].clone()),
                ]
            }
        }
    }

    pub fn from_parts(meta: &TensorArchive, entries: Vec<(String, Vec<usize>, Vec<f32>)>) -> Result<Self> {
        match meta.meta("texture.kind")? {
            "trained-small-encoder" => {
                let dim: usize = meta
                    .meta("texture.dim")?
                    .parse()
                    .map_err(|_| Error::Format("texture.dim is not an integer".into()))?;
                let mut e = SmallTextureEncoder::untrained(dim, 0);
                nn::load_params(e.encoder.params_mut(), &entries)?;
                Ok(Self::SmallEncoder(e))
            }
            "pretrained-backbone" => {
                let mut a = TensorArchive::new();
                a.meta.insert("input_size".into(), meta.meta("texture.input_size")?.to_string());
                a.meta.insert("pool_after".into(), meta.meta("texture.pool_after")?.to_string());
                a.extend(entries);
                PretrainedBackbone::from_archive(&a, meta.meta("texture.source")?.to_string()).map(Self::Pretrained)
            }
            other => Err(Error::Format(format!("unknown texture extractor kind {other:?}"))),
        }
    }
}
