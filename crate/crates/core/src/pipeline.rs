//! Training of the method variants, source-memory construction, model
//! bundles and the continual deployment loop.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::archive::TensorArchive;
use crate::config::TrainConfig;
use crate::data::{preprocess, DatasetHandle, ImageSample};
use crate::error::{Error, Result};
use crate::features::{query_dim, query_features, train_texture_encoder, TextureExtractor, TextureTrainConfig};
use crate::grid::{Grid, Mask};
use crate::memory::{DomainMemory, MemoryDims, MemoryRecord, MemoryVariant};
use crate::nn::{self, shuffled_batches, Adam, Mode, Module, Tensor};
use crate::sae::{train_sae, SaeConfig, SaeModel};
use crate::segnet::{SegModel, SegNetConfig};

pub const BUNDLE_MAGIC: &[u8; 4] = b"CTXB";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, serde::Serialize, serde::Deserialize)]
pub enum Variant {
    NoDA,
    ContextNet1,
    ContextNet2,
    TransferLearnt,
}

impl Variant {
    pub const ALL: [Variant; 4] = [
        Variant::NoDA,
        Variant::ContextNet1,
        Variant::ContextNet2,
        Variant::TransferLearnt,
    ];

    pub fn memory_variant(self) -> Option<MemoryVariant> {
        match self {
            Variant::ContextNet1 => Some(MemoryVariant::TextureOnly),
            Variant::ContextNet2 => Some(MemoryVariant::TextureShape),
            Variant::NoDA | Variant::TransferLearnt => None,
        }
    }

    pub fn is_contextnet(self) -> bool {
        self.memory_variant().is_some()
    }

    /// Short command-line name.
    pub fn short_name(self) -> &'static str {
        match self {
            Variant::NoDA => "noda",
            Variant::ContextNet1 => "cn1",
            Variant::ContextNet2 => "cn2",
            Variant::TransferLearnt => "tl",
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Variant::NoDA => "NoDA",
            Variant::ContextNet1 => "ContextNet1",
            Variant::ContextNet2 => "ContextNet2",
            Variant::TransferLearnt => "TransferLearnt",
        })
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| s.eq_ignore_ascii_case(v.short_name()) || s.eq_ignore_ascii_case(&v.to_string()))
            .ok_or_else(|| Error::InvalidArgument(format!("unknown variant {s:?}")))
    }
}

/// Applies [`preprocess`] to every image.
pub fn preprocess_dataset(dataset: &DatasetHandle) -> Result<DatasetHandle> {
    let samples = dataset
        .samples()
        .iter()
        .map(|s| ImageSample {
            image: preprocess(&s.image),
            ..s.clone()
        })
        .collect();
    DatasetHandle::new(dataset.domain_id(), dataset.split(), samples)
}

fn masks_of(dataset: &DatasetHandle) -> Result<Vec<&Mask>> {
    dataset
        .samples()
        .iter()
        .map(|s| {
            s.mask
                .as_ref()
                .ok_or_else(|| Error::Data(format!("sample {} in domain {} has no mask", s.id, s.domain_id)))
        })
        .collect()
}

fn check_resolution(dataset: &DatasetHandle, cfg: &TrainConfig) -> Result<()> {
    if dataset.is_empty() {
        return Err(Error::Data(format!("dataset {} is empty", dataset.domain_id())));
    }
    let want = (cfg.resolution, cfg.resolution);
    match dataset.resolution() {
        Some(r) if r == want => Ok(()),
        Some((h, w)) => Err(Error::Dimension(format!(
            "dataset {} is {h}x{w}, config expects {}x{}",
            dataset.domain_id(),
            cfg.resolution,
            cfg.resolution
        ))),
        None => Ok(()),
    }
}

/// Frozen feature extractors for memory records.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureKit {
    pub extractor: TextureExtractor,
    pub sae: Option<SaeModel>,
}

impl FeatureKit {
    /// The same kit without the shape model.
    pub fn texture_only(&self) -> FeatureKit {
        FeatureKit {
            extractor: self.extractor.clone(),
            sae: None,
        }
    }
}

/// Builds the texture extractor (and, if `with_shape`, trains the SAE) on
/// source data.
pub fn fit_feature_kit(dataset: &DatasetHandle, with_shape: bool, cfg: &TrainConfig) -> Result<FeatureKit> {
    check_resolution(dataset, cfg)?;
    let images: Vec<&Grid> = dataset.samples().iter().map(|s| &s.image).collect();
    let extractor = match &cfg.texture_weights {
        Some(path) => {
            let mut ex = TextureExtractor::pretrained(path.clone())?;
            if let (TextureExtractor::Pretrained(b), true) = (&mut ex, cfg.pca_dim > 0) {
                b.fit_pca(&images, cfg.pca_dim)?;
            }
            ex
        }
        None => {
            let tcfg = TextureTrainConfig {
                dim: cfg.texture_dim,
                epochs: cfg.texture_epochs,
                batch_size: cfg.batch_size,
                learning_rate: cfg.learning_rate,
                seed: cfg.seed ^ 0x7E47,
            };
            TextureExtractor::SmallEncoder(train_texture_encoder(&images, &tcfg)?)
        }
    };
    let sae = if with_shape {
        let masks = masks_of(dataset)?;
        let scfg = SaeConfig {
            latent_dim: cfg.latent_dim,
            epochs: cfg.sae_epochs,
            batch_size: cfg.batch_size,
            learning_rate: cfg.learning_rate,
            seed: cfg.seed ^ 0x5AE0,
        };
        Some(train_sae(&masks, &scfg)?)
    } else {
        None
    };
    Ok(FeatureKit { extractor, sae })
}

fn memory_dims(variant: MemoryVariant, extractor: &TextureExtractor, sae: Option<&SaeModel>, cfg: &TrainConfig) -> Result<MemoryDims> {
    let shape = match variant {
        MemoryVariant::TextureOnly => None,
        MemoryVariant::TextureShape => Some(
            sae.ok_or_else(|| Error::Untrained("texture+shape memory needs a trained shape auto-encoder".into()))?
                .latent_dim(),
        ),
    };
    Ok(MemoryDims {
        query: query_dim(cfg.resolution, cfg.resolution, cfg.haar_levels),
        texture: extractor.dim(),
        shape,
    })
}

/// One memory record for an image; `mask` supplies the shape feature when
/// the memory is texture+shape.
pub fn make_record(
    id: &str,
    image: &Grid,
    mask: Option<&Mask>,
    variant: MemoryVariant,
    extractor: &TextureExtractor,
    sae: Option<&SaeModel>,
    haar_levels: usize,
) -> Result<MemoryRecord> {
    let q = query_features(image, haar_levels)?.0;
    let t = extractor.extract(image)?.values;
    let g = match variant {
        MemoryVariant::TextureOnly => None,
        MemoryVariant::TextureShape => {
            let mask = mask.ok_or_else(|| Error::Data(format!("sample {id} has no mask for its shape feature")))?;
            let sae = sae.ok_or_else(|| Error::Untrained("no shape auto-encoder available".into()))?;
            Some(sae.shape_features(mask)?)
        }
    };
    Ok(MemoryRecord::new(id, q, t, g))
}

/// One record per sample: `q`, `t`, and `g` for the supervised variant.
pub fn build_source_memory(
    dataset: &DatasetHandle,
    variant: Variant,
    extractor: &TextureExtractor,
    sae: Option<&SaeModel>,
    cfg: &TrainConfig,
) -> Result<DomainMemory> {
    let mv = variant
        .memory_variant()
        .ok_or_else(|| Error::Variant(format!("{variant} does not use a memory")))?;
    check_resolution(dataset, cfg)?;
    let dims = memory_dims(mv, extractor, sae, cfg)?;
    let mut memory = DomainMemory::new(dataset.domain_id(), mv, dims, extractor.id())?;
    for s in dataset.samples() {
        memory.insert(make_record(&s.id, &s.image, s.mask.as_ref(), mv, extractor, sae, cfg.haar_levels)?)?;
    }
    Ok(memory)
}

/// Everything needed to run a trained model.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelBundle {
    pub variant: Variant,
    pub config: TrainConfig,
    pub seg: SegModel,
    pub extractor: Option<TextureExtractor>,
    pub sae: Option<SaeModel>,
}

fn parse_meta<T: FromStr>(a: &TensorArchive, key: &str) -> Result<T> {
    a.meta(key)?
        .parse()
        .map_err(|_| Error::Format(format!("bundle metadata {key} is malformed")))
}

impl ModelBundle {
    pub fn context_dim(&self) -> usize {
        self.seg.context_dim()
    }

    pub fn extractor_id(&self) -> Option<String> {
        self.extractor.as_ref().map(TextureExtractor::id)
    }

    /// CRC32 over every segmentation parameter, in declaration order.
    pub fn parameter_checksum(&self) -> u32 {
        let mut h = crc32fast::Hasher::new();
        for p in self.seg.params() {
            for &v in &p.value {
                h.update(&(v as f32).to_le_bytes());
            }
        }
        h.finalize()
    }

    pub fn to_archive(&self) -> TensorArchive {
        let mut a = TensorArchive::new();
        let seg = self.seg.config();
        let mut meta = vec![
            ("variant".to_string(), self.variant.short_name().to_string()),
            ("config".into(), self.config.to_text()),
            ("seg.context_dim".into(), seg.context_dim.to_string()),
            ("seg.operator".into(), seg.operator.to_string()),
            ("seg.height".into(), seg.resolution.0.to_string()),
            ("seg.width".into(), seg.resolution.1.to_string()),
            ("seg.concat_width".into(), seg.concat_width.to_string()),
        ];
        if let Some(ex) = &self.extractor {
            meta.push(("extractor_id".into(), ex.id()));
            meta.extend(ex.meta());
        }
        if let Some(sae) = &self.sae {
            meta.extend(sae.meta());
        }
        a.meta.extend(meta);
        let prefixed = |prefix: &str, entries: Vec<(String, Vec<usize>, Vec<f32>)>| {
            entries
                .into_iter()
                .map(move |(n, s, v)| (format!("{prefix}{n}"), s, v))
                .collect::<Vec<_>>()
        };
        a.extend(prefixed("seg/", nn::export_params(self.seg.params())));
        if let Some(ex) = &self.extractor {
            a.extend(prefixed("texture/", ex.to_entries()));
        }
        if let Some(sae) = &self.sae {
            a.extend(prefixed("sae/", sae.to_entries()));
        }
        a
    }

    pub fn from_archive(a: &TensorArchive) -> Result<Self> {
        let variant: Variant = a.meta("variant")?.parse()?;
        let config = TrainConfig::parse(a.meta("config")?)?;
        let seg_cfg = SegNetConfig {
            resolution: (parse_meta(a, "seg.height")?, parse_meta(a, "seg.width")?),
            context_dim: parse_meta(a, "seg.context_dim")?,
            operator: a.meta("seg.operator")?.parse()?,
            concat_width: parse_meta(a, "seg.concat_width")?,
            ..SegNetConfig::new((16, 16), 0, config.operator)
        };
        let mut seg = SegModel::new(seg_cfg, 0)?;
        nn::load_params(seg.params_mut(), &a.with_prefix("seg/"))?;
        let extractor = match a.meta.contains_key("texture.kind") {
            true => Some(TextureExtractor::from_parts(a, a.with_prefix("texture/"))?),
            false => None,
        };
        if let (Some(ex), Ok(id)) = (&extractor, a.meta("extractor_id")) {
            if ex.id() != id {
                return Err(Error::Checksum(format!(
                    "texture extractor weights hash to {} but the bundle records {id}",
                    ex.id()
                )));
            }
        }
        let sae = match a.meta.contains_key("sae.latent_dim") {
            true => Some(SaeModel::from_entries(
                parse_meta(a, "sae.latent_dim")?,
                (parse_meta(a, "sae.height")?, parse_meta(a, "sae.width")?),
                &a.with_prefix("sae/"),
            )?),
            false => None,
        };
        let bundle = Self {
            variant,
            config,
            seg,
            extractor,
            sae,
        };
        bundle.check_consistent()?;
        Ok(bundle)
    }

    fn check_consistent(&self) -> Result<()> {
        let needs_ctx = self.variant.is_contextnet();
        if needs_ctx != (self.context_dim() > 0) || needs_ctx != self.extractor.is_some() {
            return Err(Error::Variant(format!(
                "{} bundle has context_dim {} and extractor {}",
                self.variant,
                self.context_dim(),
                if self.extractor.is_some() { "present" } else { "absent" }
            )));
        }
        if (self.variant == Variant::ContextNet2) != self.sae.is_some() {
            return Err(Error::Variant(format!(
                "{} bundle {} a shape auto-encoder",
                self.variant,
                if self.sae.is_some() { "must not carry" } else { "requires" }
            )));
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        self.to_archive().to_bytes(BUNDLE_MAGIC)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        Self::from_archive(&TensorArchive::from_bytes(bytes, BUNDLE_MAGIC)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_archive().save(path, BUNDLE_MAGIC)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_archive(&TensorArchive::load(path, BUNDLE_MAGIC)?)
    }
}

/// A trained bundle and its mean training loss per epoch.
#[derive(Debug, Clone, PartialEq)]
pub struct Trained {
    pub bundle: ModelBundle,
    pub epoch_losses: Vec<f64>,
}

fn seg_config(cfg: &TrainConfig, context_dim: usize) -> SegNetConfig {
    SegNetConfig {
        concat_width: cfg.concat_width,
        ..SegNetConfig::new((cfg.resolution, cfg.resolution), context_dim, cfg.operator)
    }
}

/// Mini-batch Adam on mean BCE. `contexts` is called once per epoch and
/// returns one context vector per sample.
fn fit(
    model: &mut SegModel,
    samples: &[ImageSample],
    epochs: usize,
    cfg: &TrainConfig,
    mut contexts: impl FnMut() -> Result<Vec<Vec<f64>>>,
) -> Result<Vec<f64>> {
    let n = samples.len();
    let grids: Vec<&Grid> = samples.iter().map(|s| &s.image).collect();
    let images = Tensor::from_grids(&grids)?;
    let targets: Vec<Vec<f64>> = samples
        .iter()
        .map(|s| {
            let m = s.mask.as_ref().ok_or_else(|| Error::Data(format!("sample {} has no mask", s.id)))?;
            Ok(m.data().iter().map(|&v| v as f64).collect())
        })
        .collect::<Result<_>>()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0xBA7C);
    let mut opt = Adam::new(cfg.learning_rate);
    let mut history = Vec::with_capacity(epochs);
    for _ in 0..epochs {
        let ctx = contexts()?;
        let mut total = 0.0;
        for batch in shuffled_batches(n, cfg.batch_size, &mut rng) {
            let x = images.select(&batch);
            let c: Vec<f64> = batch.iter().flat_map(|&i| ctx[i].iter().copied()).collect();
            let y: Vec<f64> = batch.iter().flat_map(|&i| targets[i].iter().copied()).collect();
            model.zero_grad();
            let (loss, _, tape) = model.loss_and_gradients(&x, &c, &y, Mode::Train)?;
            model.update_running_stats(&tape);
            opt.step(model.params_mut());
            total += loss * batch.len() as f64;
        }
        history.push(total / n as f64);
    }
    Ok(history)
}

/// Plain U-Net on source data: the lower baseline.
pub fn train_noda(dataset: &DatasetHandle, cfg: &TrainConfig) -> Result<Trained> {
    cfg.validate()?;
    check_resolution(dataset, cfg)?;
    masks_of(dataset)?;
    let mut seg = SegModel::new(seg_config(cfg, 0), cfg.seed)?;
    let n = dataset.len();
    let epoch_losses = fit(&mut seg, dataset.samples(), cfg.epochs, cfg, || Ok(vec![Vec::new(); n]))?;
    Ok(Trained {
        bundle: ModelBundle {
            variant: Variant::NoDA,
            config: cfg.clone(),
            seg,
            extractor: None,
            sae: None,
        },
        epoch_losses,
    })
}

/// Trains a conditioned model; every sample retrieves its context from
/// `memory` with its own record excluded.
pub fn train_contextnet(
    dataset: &DatasetHandle,
    memory: &DomainMemory,
    variant: Variant,
    kit: &FeatureKit,
    cfg: &TrainConfig,
) -> Result<Trained> {
    cfg.validate()?;
    check_resolution(dataset, cfg)?;
    masks_of(dataset)?;
    let mv = variant
        .memory_variant()
        .ok_or_else(|| Error::Variant(format!("{variant} is not a context network")))?;
    if memory.variant() != mv {
        return Err(Error::Variant(format!(
            "{variant} needs a {mv} memory, got {}",
            memory.variant()
        )));
    }
    if memory.extractor_id() != kit.extractor.id() {
        return Err(Error::Variant(format!(
            "memory was built with extractor {}, kit provides {}",
            memory.extractor_id(),
            kit.extractor.id()
        )));
    }
    let expected = memory_dims(mv, &kit.extractor, kit.sae.as_ref(), cfg)?;
    if memory.dims() != expected {
        return Err(Error::Dimension(format!(
            "memory dims {:?} do not match {expected:?}",
            memory.dims()
        )));
    }
    let context_dim = cfg.aggregation.output_dim(expected.context(), cfg.context_size);
    let mut seg = SegModel::new(seg_config(cfg, context_dim), cfg.seed)?;
    let queries: Vec<(String, Vec<f32>)> = dataset
        .samples()
        .iter()
        .map(|s| Ok((s.id.clone(), query_features(&s.image, cfg.haar_levels)?.0)))
        .collect::<Result<_>>()?;
    let retrieve = || {
        queries
            .iter()
            .map(|(id, q)| {
                memory
                    .retrieve_context(q, cfg.context_size, Some(id), cfg.aggregation)
                    .map(|r| r.aggregated)
            })
            .collect::<Result<Vec<_>>>()
    };
    let epoch_losses = fit(&mut seg, dataset.samples(), cfg.epochs, cfg, retrieve)?;
    Ok(Trained {
        bundle: ModelBundle {
            variant,
            config: cfg.clone(),
            seg,
            extractor: Some(kit.extractor.clone()),
            sae: if variant == Variant::ContextNet2 { kit.sae.clone() } else { None },
        },
        epoch_losses,
    })
}

/// Fine-tunes a context-free source model on annotated target data for
/// `cfg.finetune_epochs`: the upper baseline. The input bundle is untouched.
pub fn transfer_learn(bundle: &ModelBundle, target: &DatasetHandle, cfg: &TrainConfig) -> Result<Trained> {
    if bundle.context_dim() != 0 {
        return Err(Error::Variant(format!(
            "transfer learning starts from a plain U-Net, got {}",
            bundle.variant
        )));
    }
    check_resolution(target, cfg)?;
    masks_of(target)?;
    let mut seg = bundle.seg.clone();
    let n = target.len();
    let tune = TrainConfig {
        seed: cfg.seed ^ 0x7F,
        ..cfg.clone()
    };
    let epoch_losses = fit(&mut seg, target.samples(), cfg.finetune_epochs, &tune, || Ok(vec![Vec::new(); n]))?;
    Ok(Trained {
        bundle: ModelBundle {
            variant: Variant::TransferLearnt,
            config: cfg.clone(),
            seg,
            extractor: None,
            sae: None,
        },
        epoch_losses,
    })
}

/// Feature extractors, source memory (for context networks) and trained
/// model for one variant, trained from scratch on `dataset`.
pub fn train_variant(dataset: &DatasetHandle, variant: Variant, cfg: &TrainConfig) -> Result<(Trained, Option<DomainMemory>)> {
    match variant {
        Variant::NoDA => Ok((train_noda(dataset, cfg).map_err(|e| e.in_stage("NoDA training"))?, None)),
        Variant::ContextNet1 | Variant::ContextNet2 => {
            let kit = fit_feature_kit(dataset, variant == Variant::ContextNet2, cfg)
                .map_err(|e| e.in_stage("feature extractor training"))?;
            let memory = build_source_memory(dataset, variant, &kit.extractor, kit.sae.as_ref(), cfg)
                .map_err(|e| e.in_stage("source memory construction"))?;
            let trained =
                train_contextnet(dataset, &memory, variant, &kit, cfg).map_err(|e| e.in_stage(format!("{variant} training")))?;
            Ok((trained, Some(memory)))
        }
        Variant::TransferLearnt => Err(Error::InvalidArgument(
            "TransferLearnt is obtained by fine-tuning a NoDA bundle".into(),
        )),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum InsertionPolicy {
    Always,
    OnlyAnnotated,
    Never,
}

impl fmt::Display for InsertionPolicy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Always => "always",
            Self::OnlyAnnotated => "only-annotated",
            Self::Never => "never",
        })
    }
}

impl FromStr for InsertionPolicy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "always" => Ok(Self::Always),
            "only-annotated" => Ok(Self::OnlyAnnotated),
            "never" => Ok(Self::Never),
            other => Err(Error::InvalidArgument(format!("unknown insertion policy {other:?}"))),
        }
    }
}

/// Result of one deployment step.
#[derive(Debug, Clone, PartialEq)]
pub struct StepOutcome {
    pub probabilities: Grid,
    pub mask: Mask,
    pub inserted: bool,
    /// Set when the policy wanted to insert but no annotation was supplied
    /// for a shape-carrying memory.
    pub missing_annotation: bool,
}

/// A frozen model together with the target-domain memory it reads.
#[derive(Debug, Clone, PartialEq)]
pub struct DeploymentState {
    bundle: ModelBundle,
    memory: Option<DomainMemory>,
    policy: InsertionPolicy,
    flagged: Vec<String>,
}

impl DeploymentState {
    pub fn new(bundle: ModelBundle, memory: Option<DomainMemory>, policy: InsertionPolicy) -> Result<Self> {
        match (bundle.variant.memory_variant(), &memory) {
            (None, Some(_)) => {
                return Err(Error::Variant(format!("{} does not read a memory", bundle.variant)));
            }
            (Some(_), None) => {
                return Err(Error::Variant(format!("{} needs a target memory", bundle.variant)));
            }
            (Some(mv), Some(m)) => {
                if m.variant() != mv {
                    return Err(Error::Variant(format!(
                        "{} needs a {mv} memory, got {}",
                        bundle.variant,
                        m.variant()
                    )));
                }
                let id = bundle.extractor_id().unwrap_or_default();
                if m.extractor_id() != id {
                    return Err(Error::Variant(format!(
                        "memory extractor {} does not match bundle extractor {id}",
                        m.extractor_id()
                    )));
                }
                let row = bundle
                    .config
                    .aggregation
                    .output_dim(m.dims().context(), bundle.config.context_size);
                if row != bundle.context_dim() {
                    return Err(Error::Dimension(format!(
                        "memory yields {row}-wide contexts, model expects {}",
                        bundle.context_dim()
                    )));
                }
            }
            (None, None) => {}
        }
        Ok(Self {
            bundle,
            memory,
            policy,
            flagged: Vec::new(),
        })
    }

    /// Empty target memory matching the bundle, bounded by the configured
    /// capacity; `None` for variants without memory.
    pub fn empty_memory(bundle: &ModelBundle, domain_id: &str) -> Result<Option<DomainMemory>> {
        let Some(mv) = bundle.variant.memory_variant() else {
            return Ok(None);
        };
        let extractor = bundle
            .extractor
            .as_ref()
            .ok_or_else(|| Error::Variant("bundle lacks a texture extractor".into()))?;
        let dims = memory_dims(mv, extractor, bundle.sae.as_ref(), &bundle.config)?;
        DomainMemory::new(domain_id, mv, dims, extractor.id())?
            .with_capacity_limit(bundle.config.memory_capacity)
            .map(Some)
    }

    pub fn bundle(&self) -> &ModelBundle {
        &self.bundle
    }

    pub fn memory(&self) -> Option<&DomainMemory> {
        self.memory.as_ref()
    }

    pub fn policy(&self) -> InsertionPolicy {
        self.policy
    }

    /// Ids whose insertion was skipped for lack of an annotation.
    pub fn flagged(&self) -> &[String] {
        &self.flagged
    }

    fn check_image(&self, image: &Grid) -> Result<()> {
        let want = self.bundle.seg.config().resolution;
        if image.dims() != want {
            return Err(Error::Dimension(format!(
                "image is {}x{}, model expects {}x{}",
                image.height(),
                image.width(),
                want.0,
                want.1
            )));
        }
        Ok(())
    }

    /// Context vector for `image` from the target memory.
    pub fn context_for(&self, image: &Grid) -> Result<Vec<f64>> {
        let Some(memory) = &self.memory else {
            return Ok(Vec::new());
        };
        let cfg = &self.bundle.config;
        let q = query_features(image, cfg.haar_levels)?;
        Ok(memory
            .retrieve_context(&q.0, cfg.context_size, None, cfg.aggregation)?
            .aggregated)
    }

    /// Probability map for a preprocessed image; never changes any state.
    pub fn infer(&self, image: &Grid) -> Result<Grid> {
        self.check_image(image)?;
        self.bundle.seg.predict(image, &self.context_for(image)?)
    }

    /// Predicts, then inserts the image into the memory as the policy allows.
    pub fn deploy_step(&mut self, id: &str, image: &Grid, annotation: Option<&Mask>) -> Result<StepOutcome> {
        if let Some(a) = annotation {
            if a.dims() != image.dims() {
                return Err(Error::Dimension(format!(
                    "annotation for {id} is {}x{}, image is {}x{}",
                    a.height(),
                    a.width(),
                    image.height(),
                    image.width()
                )));
            }
        }
        let probabilities = self.infer(image)?;
        let mask = probabilities.threshold(0.5);
        let wants = match self.policy {
            InsertionPolicy::Never => false,
            InsertionPolicy::Always => true,
            InsertionPolicy::OnlyAnnotated => annotation.is_some(),
        };
        let shape_needed = self.bundle.variant == Variant::ContextNet2;
        let missing_annotation =
            self.memory.is_some() && shape_needed && annotation.is_none() && self.policy != InsertionPolicy::Never;
        let mut inserted = false;
        if wants && !missing_annotation {
            inserted = self.insert(id, image, annotation)?;
        }
        if missing_annotation {
            self.flagged.push(id.to_string());
        }
        Ok(StepOutcome {
            probabilities,
            mask,
            inserted,
            missing_annotation,
        })
    }

    fn insert(&mut self, id: &str, image: &Grid, annotation: Option<&Mask>) -> Result<bool> {
        let Some(memory) = self.memory.as_mut() else {
            return Ok(false);
        };
        let extractor = self.bundle.extractor.as_ref().expect("checked at construction");
        let record = make_record(
            id,
            image,
            annotation,
            memory.variant(),
            extractor,
            self.bundle.sae.as_ref(),
            self.bundle.config.haar_levels,
        )?;
        memory.insert(record)?;
        Ok(true)
    }

    /// Seeds the memory before any inference, ignoring the policy. Samples
    /// need masks when the memory carries shape features.
    pub fn warm_start(&mut self, samples: &[ImageSample]) -> Result<()> {
        for s in samples {
            self.check_image(&s.image)?;
            self.insert(&s.id, &s.image, s.mask.as_ref())?;
        }
        Ok(())
    }
}
