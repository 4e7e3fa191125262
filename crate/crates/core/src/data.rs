//! Dataset ingestion, histogram-equalization preprocessing and the synthetic
//! two-lobe domain generator.

use std::collections::BTreeMap;
use std::f32::consts::PI;
use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::grid::{Grid, Mask};
use crate::io::{read_png_gray, write_png_gray16, write_png_mask};

pub const DEFAULT_RESOLUTION: usize = 256;
const HIST_BINS: usize = 256;
const QUANT_LEVELS: f32 = 65535.0;

#[derive(Debug, Clone, PartialEq)]
pub struct ImageSample {
    pub id: String,
    pub domain_id: String,
    pub image: Grid,
    pub mask: Option<Mask>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Split {
    Train,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Test => "test",
        })
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "test" => Ok(Split::Test),
            other => Err(Error::InvalidArgument(format!(
                "split must be train or test, got {other:?}"
            ))),
        }
    }
}

/// An immutable, id-ordered collection of samples from one domain.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetHandle {
    domain_id: String,
    split: Split,
    samples: Vec<ImageSample>,
}

impl DatasetHandle {
    /// Builds a handle, sorting samples by id and checking the invariants.
    pub fn new(domain_id: impl Into<String>, split: Split, mut samples: Vec<ImageSample>) -> Result<Self> {
        let domain_id = domain_id.into();
        samples.sort_by(|a, b| a.id.cmp(&b.id));
        for pair in samples.windows(2) {
            if pair[0].id == pair[1].id {
                return Err(Error::DuplicateId(pair[0].id.clone()));
            }
        }
        for s in &samples {
            if s.domain_id != domain_id {
                return Err(Error::Data(format!(
                    "sample {} belongs to domain {}, not {domain_id}",
                    s.id, s.domain_id
                )));
            }
            if let Some(m) = &s.mask {
                if m.dims() != s.image.dims() {
                    return Err(Error::Dimension(format!("mask of sample {} differs from image", s.id)));
                }
            }
        }
        Ok(Self {
            domain_id,
            split,
            samples,
        })
    }

    pub fn domain_id(&self) -> &str {
        &self.domain_id
    }

    pub fn split(&self) -> Split {
        self.split
    }

    pub fn samples(&self) -> &[ImageSample] {
        &self.samples
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn is_annotated(&self) -> bool {
        self.samples.iter().all(|s| s.mask.is_some())
    }

    /// Resolution shared by every sample, if the dataset is non-empty.
    pub fn resolution(&self) -> Option<(usize, usize)> {
        self.samples.first().map(|s| s.image.dims())
    }

    /// Splits into the first `n` samples and the remainder, keeping the domain.
    pub fn split_at(&self, n: usize, first: Split, second: Split) -> (DatasetHandle, DatasetHandle) {
        let n = n.min(self.samples.len());
        let head = DatasetHandle {
            domain_id: self.domain_id.clone(),
            split: first,
            samples: self.samples[..n].to_vec(),
        };
        let tail = DatasetHandle {
            domain_id: self.domain_id.clone(),
            split: second,
            samples: self.samples[n..].to_vec(),
        };
        (head, tail)
    }

    /// Drops masks, e.g. to emulate an unannotated deployment stream.
    pub fn without_masks(&self) -> DatasetHandle {
        let mut out = self.clone();
        for s in &mut out.samples {
            s.mask = None;
        }
        out
    }
}

fn quantize(v: f32) -> f32 {
    (v.clamp(0.0, 1.0) * QUANT_LEVELS).round() / QUANT_LEVELS
}

/// Loads `<root>/<domain_id>/images/*.png` (and matching `masks/*.png`) at the
/// default 256x256 working resolution.
pub fn load_dataset(root: &Path, domain_id: &str, split: Split) -> Result<DatasetHandle> {
    load_dataset_at(root, domain_id, split, DEFAULT_RESOLUTION)
}

pub fn load_dataset_at(root: &Path, domain_id: &str, split: Split, resolution: usize) -> Result<DatasetHandle> {
    let dir = root.join(domain_id);
    load_image_dirs(&dir.join("images"), Some(&dir.join("masks")), domain_id, split, resolution)
}

/// Loads every PNG in `image_dir`, pairing it with the same-named PNG in
/// `mask_dir` when one exists.
pub fn load_image_dirs(
    image_dir: &Path,
    mask_dir: Option<&Path>,
    domain_id: &str,
    split: Split,
    resolution: usize,
) -> Result<DatasetHandle> {
    if !image_dir.is_dir() {
        return Err(Error::Data(format!("missing image directory {}", image_dir.display())));
    }
    let mut stems = BTreeMap::new();
    for entry in fs::read_dir(image_dir).map_err(|e| Error::io(image_dir, e))? {
        let path = entry.map_err(|e| Error::io(image_dir, e))?.path();
        let is_png = path
            .extension()
            .map(|e| e.eq_ignore_ascii_case("png"))
            .unwrap_or(false);
        if !is_png {
            continue;
        }
        if let Some(stem) = path.file_stem().and_then(|s| s.to_str()) {
            stems.insert(stem.to_string(), path);
        }
    }

    let mut samples = Vec::with_capacity(stems.len());
    for (id, image_path) in stems {
        let raw = read_png_gray(&image_path)?;
        let mask_path = mask_dir.map(|d| d.join(format!("{id}.png")));
        let mask = if let Some(mask_path) = mask_path.filter(|p| p.is_file()) {
            let m = read_png_gray(&mask_path)?;
            if m.dims() != raw.dims() {
                return Err(Error::Dimension(format!(
                    "{} is {}x{} but its image is {}x{}",
                    mask_path.display(),
                    m.height(),
                    m.width(),
                    raw.height(),
                    raw.width()
                )));
            }
            Some(m.threshold(f32::MIN_POSITIVE).resize_nearest(resolution, resolution))
        } else {
            None
        };
        let mut image = raw.resize_bilinear(resolution, resolution);
        image.data_mut().iter_mut().for_each(|v| *v = quantize(*v));
        samples.push(ImageSample {
            id,
            domain_id: domain_id.to_string(),
            image,
            mask,
        });
    }
    DatasetHandle::new(domain_id, split, samples)
}

/// Writes a dataset in the directory layout read by [`load_dataset`]:
/// 16-bit images and 0/255 8-bit masks.
pub fn save_dataset(dataset: &DatasetHandle, root: &Path) -> Result<()> {
    let dir = root.join(dataset.domain_id());
    let image_dir = dir.join("images");
    fs::create_dir_all(&image_dir).map_err(|e| Error::io(&image_dir, e))?;
    let mask_dir = dir.join("masks");
    if dataset.samples().iter().any(|s| s.mask.is_some()) {
        fs::create_dir_all(&mask_dir).map_err(|e| Error::io(&mask_dir, e))?;
    }
    for s in dataset.samples() {
        write_png_gray16(&image_dir.join(format!("{}.png", s.id)), &s.image)?;
        if let Some(m) = &s.mask {
            write_png_mask(&mask_dir.join(format!("{}.png", s.id)), m)?;
        }
    }
    Ok(())
}

/// Histogram equalization with 256 bins and the standard CDF mapping.
///
/// Constant images are returned unchanged.
pub fn preprocess(image: &Grid) -> Grid {
    let bin_of = |v: f32| ((v.clamp(0.0, 1.0) * HIST_BINS as f32) as usize).min(HIST_BINS - 1);
    let mut hist = [0usize; HIST_BINS];
    for &v in image.data() {
        hist[bin_of(v)] += 1;
    }
    let mut cdf = [0usize; HIST_BINS];
    let mut acc = 0;
    for (c, h) in cdf.iter_mut().zip(hist.iter()) {
        acc += h;
        *c = acc;
    }
    let total = image.data().len();
    let cdf_min = cdf[hist.iter().position(|&h| h > 0).unwrap_or(0)];
    if total == cdf_min {
        return image.clone();
    }
    let denom = (total - cdf_min) as f64;
    let lut: Vec<f32> = cdf
        .iter()
        .map(|&c| (c.saturating_sub(cdf_min) as f64 / denom) as f32)
        .collect();
    let data = image.data().iter().map(|&v| lut[bin_of(v)]).collect();
    Grid::new(image.height(), image.width(), data).expect("same dims")
}

/// Domain shift applied on top of the base synthetic generator.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ShiftSpec {
    pub gamma: f32,
    pub invert: bool,
    pub noise_sigma: f32,
    pub bias_amplitude: f32,
    pub deform_magnitude: f32,
}

impl Default for ShiftSpec {
    fn default() -> Self {
        Self::identity()
    }
}

impl ShiftSpec {
    pub fn identity() -> Self {
        Self {
            gamma: 1.0,
            invert: false,
            noise_sigma: 0.0,
            bias_amplitude: 0.0,
            deform_magnitude: 0.0,
        }
    }

    pub fn is_identity(&self) -> bool {
        *self == Self::identity()
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.gamma > 0.0 && self.gamma.is_finite()) {
            return Err(Error::InvalidArgument(format!("gamma must be positive, got {}", self.gamma)));
        }
        for (name, v) in [
            ("noise_sigma", self.noise_sigma),
            ("bias_amplitude", self.bias_amplitude),
            ("deform_magnitude", self.deform_magnitude),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::InvalidArgument(format!("{name} must be non-negative, got {v}")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthOptions {
    pub domain_id: String,
    pub resolution: usize,
    pub split: Split,
    /// Offset added to the sample index, so disjoint id ranges can be drawn
    /// from the same seed.
    pub first_index: usize,
}

impl Default for SynthOptions {
    fn default() -> Self {
        Self {
            domain_id: "synth".into(),
            resolution: DEFAULT_RESOLUTION,
            split: Split::Train,
            first_index: 0,
        }
    }
}

/// Generates `n_samples` two-lobe images with masks at the default resolution.
pub fn synth_domain(n_samples: usize, shift: &ShiftSpec, seed: u64) -> Result<DatasetHandle> {
    synth_domain_with(n_samples, shift, seed, &SynthOptions::default())
}

pub fn synth_domain_with(
    n_samples: usize,
    shift: &ShiftSpec,
    seed: u64,
    opts: &SynthOptions,
) -> Result<DatasetHandle> {
    if n_samples == 0 {
        return Err(Error::InvalidArgument("n_samples must be at least 1".into()));
    }
    shift.validate()?;
    if opts.resolution < 16 {
        return Err(Error::InvalidArgument("resolution must be at least 16".into()));
    }
    let samples = (0..n_samples)
        .map(|k| {
            let index = opts.first_index + k;
            let (image, mask) = synth_pair(seed, index, shift, opts.resolution);
            ImageSample {
                id: format!("s{index:05}"),
                domain_id: opts.domain_id.clone(),
                image,
                mask: Some(mask),
            }
        })
        .collect();
    DatasetHandle::new(opts.domain_id.clone(), opts.split, samples)
}

fn sample_rng(seed: u64, index: usize, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5EED_0F_DA7A);
    rng.set_stream(stream.wrapping_mul(1 << 32).wrapping_add(index as u64));
    rng
}

struct Lobe {
    cy: f32,
    cx: f32,
    ry: f32,
    rx: f32,
    cos: f32,
    sin: f32,
}

impl Lobe {
    fn random(rng: &mut ChaCha8Rng, side: f32) -> Self {
        let angle = rng.gen_range(-0.18..0.18f32) * side;
        Self {
            cy: rng.gen_range(0.44..0.54),
            cx: 0.5 + side * rng.gen_range(0.15..0.22),
            ry: rng.gen_range(0.2..0.3),
            rx: rng.gen_range(0.09..0.13),
            cos: angle.cos(),
            sin: angle.sin(),
        }
    }

    /// Signed ellipse level: < 1 inside.
    fn level(&self, y: f32, x: f32) -> f32 {
        let dy = y - self.cy;
        let dx = x - self.cx;
        let u = dx * self.cos + dy * self.sin;
        let v = -dx * self.sin + dy * self.cos;
        (u / self.rx).powi(2) + (v / self.ry).powi(2)
    }
}

/// Smooth field in roughly [-1, 1] built from a few random low-frequency modes.
struct SmoothField {
    modes: Vec<(f32, f32, f32, f32)>,
}

impl SmoothField {
    fn random(rng: &mut ChaCha8Rng, n_modes: usize) -> Self {
        let modes = (0..n_modes)
            .map(|_| {
                (
                    rng.gen_range(0.5..2.0f32),
                    rng.gen_range(0.5..2.0f32),
                    rng.gen_range(0.0..2.0 * PI),
                    rng.gen_range(0.5..1.0f32),
                )
            })
            .collect();
        Self { modes }
    }

    fn at(&self, y: f32, x: f32) -> f32 {
        let norm: f32 = self.modes.iter().map(|m| m.3).sum();
        self.modes
            .iter()
            .map(|&(fy, fx, ph, amp)| amp * (PI * (fy * y + fx * x) + ph).sin())
            .sum::<f32>()
            / norm
    }
}

fn synth_pair(seed: u64, index: usize, shift: &ShiftSpec, size: usize) -> (Grid, Mask) {
    let mut rng = sample_rng(seed, index, 0);
    let lobes = [Lobe::random(&mut rng, -1.0), Lobe::random(&mut rng, 1.0)];
    let body_ry = rng.gen_range(0.44..0.49f32);
    let body_rx = rng.gen_range(0.40..0.47f32);
    let body_level = rng.gen_range(0.62..0.75f32);
    let lobe_level = rng.gen_range(0.22..0.34f32);
    let rib_freq = rng.gen_range(9.0..13.0f32);
    let rib_phase = rng.gen_range(0.0..2.0 * PI);
    let heart = (rng.gen_range(0.6..0.7f32), rng.gen_range(0.47..0.55f32), rng.gen_range(0.09..0.13f32));
    let texture = SmoothField::random(&mut rng, 4);
    let grain = Normal::new(0.0f32, 0.015).expect("valid sigma");
    let edge = 1.5 / size as f32;

    let scale = 1.0 / size as f32;
    let mut image = Grid::filled(size, size, 0.0);
    let mut mask = vec![0u8; size * size];
    for y in 0..size {
        for x in 0..size {
            let fy = (y as f32 + 0.5) * scale;
            let fx = (x as f32 + 0.5) * scale;
            let body = ((fy - 0.5) / body_ry).powi(2) + ((fx - 0.5) / body_rx).powi(2);
            let body_w = smoothstep((1.0 - body) / (4.0 * edge));
            let mut v = 0.12 + body_w * (body_level - 0.12);
            v += body_w * 0.05 * (2.0 * PI * rib_freq * fy + rib_phase + 3.0 * (fx - 0.5).powi(2)).sin();
            let h = ((fy - heart.0) / heart.2).powi(2) + ((fx - heart.1) / (1.3 * heart.2)).powi(2);
            v += 0.12 * smoothstep((1.0 - h) / (4.0 * edge));
            let mut inside = false;
            for lobe in &lobes {
                let l = lobe.level(fy, fx);
                inside |= l < 1.0;
                let w = smoothstep((1.0 - l) / (8.0 * edge));
                v = v * (1.0 - w) + (lobe_level + 0.04 * texture.at(fy * 3.0, fx * 3.0)) * w;
            }
            v += 0.04 * texture.at(fy, fx) + grain.sample(&mut rng);
            image.set(y, x, v.clamp(0.0, 1.0));
            mask[y * size + x] = u8::from(inside);
        }
    }
    let mask = Mask::new(size, size, mask).expect("sized");
    let (mut image, mask) = apply_shift(image, mask, shift, seed, index);
    image.data_mut().iter_mut().for_each(|v| *v = quantize(*v));
    (image, mask)
}

fn smoothstep(t: f32) -> f32 {
    let t = (t * 0.5 + 0.5).clamp(0.0, 1.0);
    t * t * (3.0 - 2.0 * t)
}

fn apply_shift(image: Grid, mask: Mask, shift: &ShiftSpec, seed: u64, index: usize) -> (Grid, Mask) {
    if shift.is_identity() {
        return (image, mask);
    }
    let mut rng = sample_rng(seed, index, 1);
    let (h, w) = image.dims();
    let (mut image, mask) = if shift.deform_magnitude > 0.0 {
        let fy = SmoothField::random(&mut rng, 3);
        let fx = SmoothField::random(&mut rng, 3);
        let mag = shift.deform_magnitude;
        let disp = |y: usize, x: usize| {
            let ny = y as f32 / h as f32;
            let nx = x as f32 / w as f32;
            (mag * fy.at(ny, nx), mag * fx.at(ny, nx))
        };
        let warped = Grid::from_fn(h, w, |y, x| {
            let (dy, dx) = disp(y, x);
            image.sample_bilinear(y as f32 + dy, x as f32 + dx)
        });
        let warped_mask = Mask::from_fn(h, w, |y, x| {
            let (dy, dx) = disp(y, x);
            let sy = (y as f32 + dy).round().clamp(0.0, (h - 1) as f32) as usize;
            let sx = (x as f32 + dx).round().clamp(0.0, (w - 1) as f32) as usize;
            mask.get(sy, sx)
        });
        (warped, warped_mask)
    } else {
        (image, mask)
    };
    let bias = (shift.bias_amplitude > 0.0).then(|| SmoothField::random(&mut rng, 2));
    let noise = (shift.noise_sigma > 0.0).then(|| Normal::new(0.0f32, shift.noise_sigma).expect("valid sigma"));
    for y in 0..h {
        for x in 0..w {
            let mut v = image.get(y, x);
            if let Some(b) = &bias {
                v *= 1.0 + shift.bias_amplitude * b.at(y as f32 / h as f32, x as f32 / w as f32);
            }
            v = v.clamp(0.0, 1.0).powf(shift.gamma);
            if shift.invert {
                v = 1.0 - v;
            }
            if let Some(n) = &noise {
                v += n.sample(&mut rng);
            }
            image.set(y, x, v.clamp(0.0, 1.0));
        }
    }
    (image, mask)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(n: usize, shift: &ShiftSpec, seed: u64) -> DatasetHandle {
        let opts = SynthOptions {
            resolution: 64,
            ..Default::default()
        };
        synth_domain_with(n, shift, seed, &opts).unwrap()
    }

    /// Independent CDF mapping: rank of each pixel's bin among all pixels.
    fn cdf_oracle(image: &Grid) -> Vec<f32> {
        let bins: Vec<usize> = image
            .data()
            .iter()
            .map(|&v| ((v * 256.0) as usize).min(255))
            .collect();
        let n = bins.len();
        let lowest = *bins.iter().min().unwrap();
        let count_le = |b: usize| bins.iter().filter(|&&o| o <= b).count();
        let base = count_le(lowest);
        let mut cache = std::collections::HashMap::new();
        bins.iter()
            .map(|&b| {
                *cache
                    .entry(b)
                    .or_insert_with(|| ((count_le(b) - base) as f64 / (n - base) as f64) as f32)
            })
            .collect()
    }

    #[test]
    fn constant_image_is_fixed_point() {
        let g = Grid::filled(32, 32, 0.37);
        assert_eq!(preprocess(&g), g);
    }

    #[test]
    fn uniform_image_nearly_unchanged_and_matches_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let g = Grid::from_fn(256, 256, |_, _| rng.gen::<f32>());
        let eq = preprocess(&g);
        let oracle = cdf_oracle(&g);
        for ((&a, &b), &o) in eq.data().iter().zip(g.data()).zip(&oracle) {
            assert!((a - b).abs() <= 0.02, "{a} vs {b}");
            assert!((a - o).abs() <= 1e-6);
        }
    }

    #[test]
    fn preprocess_is_monotone_and_bounded() {
        let ds = small(3, &ShiftSpec::identity(), 11);
        for s in ds.samples() {
            let out = preprocess(&s.image);
            let (lo, hi) = out.min_max();
            assert!(lo >= 0.0 && hi <= 1.0);
            let mut pairs: Vec<(f32, f32)> = s.image.data().iter().copied().zip(out.data().iter().copied()).collect();
            pairs.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
            assert!(pairs.windows(2).all(|p| p[0].1 <= p[1].1));
        }
    }

    #[test]
    fn preprocess_nearly_idempotent() {
        let ds = synth_domain(1, &ShiftSpec::identity(), 5).unwrap();
        let once = preprocess(&ds.samples()[0].image);
        let twice = preprocess(&once);
        for (a, b) in once.data().iter().zip(twice.data()) {
            assert!((a - b).abs() <= 0.02);
        }
    }

    #[test]
    fn synth_is_deterministic() {
        let a = small(10, &ShiftSpec::identity(), 7);
        let b = small(10, &ShiftSpec::identity(), 7);
        assert_eq!(a, b);
        assert_ne!(a, small(10, &ShiftSpec::identity(), 8));
    }

    #[test]
    fn gamma_lowers_mean_intensity() {
        let base = small(4, &ShiftSpec::identity(), 7);
        let shifted = small(
            4,
            &ShiftSpec {
                gamma: 2.5,
                ..ShiftSpec::identity()
            },
            7,
        );
        for (a, b) in base.samples().iter().zip(shifted.samples()) {
            assert!(b.image.mean() < a.image.mean());
        }
    }

    #[test]
    fn masks_unchanged_without_deformation() {
        let base = small(5, &ShiftSpec::identity(), 2);
        let shift = ShiftSpec {
            gamma: 2.2,
            invert: true,
            noise_sigma: 0.05,
            bias_amplitude: 0.3,
            deform_magnitude: 0.0,
        };
        let shifted = small(5, &shift, 2);
        for (a, b) in base.samples().iter().zip(shifted.samples()) {
            assert_eq!(a.mask, b.mask);
            assert_ne!(a.image, b.image);
        }
        let deformed = small(
            5,
            &ShiftSpec {
                deform_magnitude: 4.0,
                ..shift
            },
            2,
        );
        assert!(base
            .samples()
            .iter()
            .zip(deformed.samples())
            .any(|(a, b)| a.mask != b.mask));
    }

    #[test]
    fn masks_have_both_classes() {
        let ds = small(
            20,
            &ShiftSpec {
                deform_magnitude: 4.0,
                ..ShiftSpec::identity()
            },
            9,
        );
        for s in ds.samples() {
            let m = s.mask.as_ref().unwrap();
            let c = m.count();
            assert!(c > 0 && c < m.data().len());
        }
    }

    #[test]
    fn handle_rejects_duplicates_and_sorts() {
        let ds = small(3, &ShiftSpec::identity(), 1);
        let mut rev: Vec<_> = ds.samples().to_vec();
        rev.reverse();
        let h = DatasetHandle::new("synth", Split::Train, rev.clone()).unwrap();
        assert_eq!(h, ds);
        rev.push(rev[0].clone());
        assert!(matches!(
            DatasetHandle::new("synth", Split::Train, rev),
            Err(Error::DuplicateId(_))
        ));
    }

    #[test]
    fn invalid_shift_rejected() {
        let bad = ShiftSpec {
            gamma: 0.0,
            ..ShiftSpec::identity()
        };
        assert!(synth_domain(1, &bad, 0).is_err());
        assert!(synth_domain(0, &ShiftSpec::identity(), 0).is_err());
    }
}
