//! Encoder-decoder segmentation network conditioned at its bottleneck.
//!
//! Four stride-2 conv/BN/ReLU stages encode the image; an optional context
//! vector is projected by a learned linear map, tiled over the bottleneck grid
//! and combined with it by the embedding operator; four upsampling conv
//! stages (the first three with encoder skip connections) decode a per-pixel
//! foreground probability.

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::grid::{Grid, Mask};
use crate::nn::{
    bce_with_logits, concat_channels, relu, relu_backward, sigmoid, split_channels, upsample2, upsample2_backward,
    BatchNorm2d, BatchNormCache, Conv2d, Linear, Mode, Module, Param, Tensor,
};

/// Lower/upper clamp applied to output probabilities.
pub const PROB_EPS: f64 = 1e-7;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum EmbeddingOperator {
    Concat,
    Sum,
    Average,
}

impl fmt::Display for EmbeddingOperator {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Concat => "concat",
            Self::Sum => "sum",
            Self::Average => "average",
        })
    }
}

impl FromStr for EmbeddingOperator {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "concat" => Ok(Self::Concat),
            "sum" => Ok(Self::Sum),
            "average" => Ok(Self::Average),
            other => Err(Error::InvalidArgument(format!("unknown embedding operator {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SegNetConfig {
    pub resolution: (usize, usize),
    /// Encoder channel widths; the decoder mirrors them.
    pub widths: [usize; 4],
    /// Length of the conditioning vector; 0 builds a plain U-Net.
    pub context_dim: usize,
    pub operator: EmbeddingOperator,
    /// Width of the projected context for `Concat` (sum/average always use
    /// the bottleneck width).
    pub concat_width: usize,
}

impl SegNetConfig {
    pub fn new(resolution: (usize, usize), context_dim: usize, operator: EmbeddingOperator) -> Self {
        Self {
            resolution,
            widths: [16, 32, 64, 128],
            context_dim,
            operator,
            concat_width: 128,
        }
    }

    pub fn bottleneck_channels(&self) -> usize {
        self.widths[3]
    }

    pub fn projected_width(&self) -> usize {
        match self.operator {
            EmbeddingOperator::Concat => self.concat_width,
            EmbeddingOperator::Sum | EmbeddingOperator::Average => self.bottleneck_channels(),
        }
    }

    /// Channels entering the decoder.
    pub fn embedded_channels(&self) -> usize {
        match (self.context_dim, self.operator) {
            (0, _) => self.bottleneck_channels(),
            (_, EmbeddingOperator::Concat) => self.bottleneck_channels() + self.concat_width,
            _ => self.bottleneck_channels(),
        }
    }

    fn validate(&self) -> Result<()> {
        let (h, w) = self.resolution;
        if h == 0 || w == 0 || h % 16 != 0 || w % 16 != 0 {
            return Err(Error::Dimension(format!(
                "segmentation input must be a positive multiple of 16 per side, got {h}x{w}"
            )));
        }
        if self.widths.iter().any(|&c| c == 0) || self.concat_width == 0 {
            return Err(Error::InvalidArgument("channel widths must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
struct ConvBn {
    conv: Conv2d,
    bn: BatchNorm2d,
}

struct ConvBnTape {
    input: Tensor,
    bn: BatchNormCache,
    output: Tensor,
}

impl ConvBn {
    fn new(name: &str, in_ch: usize, out_ch: usize, stride: usize, rng: &mut ChaCha8Rng) -> Self {
        Self {
            conv: Conv2d::new(&format!("{name}.conv"), in_ch, out_ch, 3, stride, rng),
            bn: BatchNorm2d::new(&format!("{name}.bn"), out_ch),
        }
    }

    fn forward(&self, x: Tensor, mode: Mode) -> Result<(Tensor, ConvBnTape)> {
        let z = self.conv.forward(&x)?;
        let (y, bn) = self.bn.forward(&z, mode);
        let out = relu(&y);
        Ok((
            out.clone(),
            ConvBnTape {
                input: x,
                bn,
                output: out,
            },
        ))
    }

    fn backward(&mut self, tape: &ConvBnTape, dy: &Tensor) -> Tensor {
        let g = relu_backward(&tape.output, dy);
        let g = self.bn.backward(&tape.bn, &g);
        self.conv.backward(&tape.input, &g)
    }
}

/// Bottleneck map plus the encoder activations reused by the decoder.
#[derive(Debug, Clone, PartialEq)]
pub struct Encoded {
    pub bottleneck: Tensor,
    /// Stage outputs at 1/2, 1/4 and 1/8 resolution.
    pub skips: [Tensor; 3],
}

#[derive(Debug, Clone, PartialEq)]
pub struct SegModel {
    config: SegNetConfig,
    encoder: [ConvBn; 4],
    projection: Option<Linear>,
    decoder: [ConvBn; 3],
    head: Conv2d,
}

/// Everything the backward pass needs from one training forward pass.
pub struct Tape {
    encoder: Vec<ConvBnTape>,
    context: Vec<f64>,
    projected: Vec<f64>,
    decoder: Vec<ConvBnTape>,
    head_input: Tensor,
    logits: Tensor,
}

impl Tape {
    pub fn logits(&self) -> &Tensor {
        &self.logits
    }
}

impl SegModel {
    /// Initializes the encoder/decoder from `seed` and the context projection
    /// from an independent stream, so conditioned and plain models built with
    /// the same seed share their U-Net weights.
    pub fn new(config: SegNetConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let w = config.widths;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let encoder = [
            ConvBn::new("enc0", 1, w[0], 2, &mut rng),
            ConvBn::new("enc1", w[0], w[1], 2, &mut rng),
            ConvBn::new("enc2", w[1], w[2], 2, &mut rng),
            ConvBn::new("enc3", w[2], w[3], 2, &mut rng),
        ];
        let decoder = [
            ConvBn::new("dec0", config.embedded_channels() + w[2], w[2], 1, &mut rng),
            ConvBn::new("dec1", w[2] + w[1], w[1], 1, &mut rng),
            ConvBn::new("dec2", w[1] + w[0], w[0], 1, &mut rng),
        ];
        let head = Conv2d::new("head", w[0], 1, 3, 1, &mut rng);
        let projection = (config.context_dim > 0).then(|| {
            let mut prng = ChaCha8Rng::seed_from_u64(seed ^ 0xC0_47E7);
            Linear::new("context_proj", config.context_dim, config.projected_width(), false, &mut prng)
        });
        Ok(Self {
            config,
            encoder,
            projection,
            decoder,
            head,
        })
    }

    pub fn config(&self) -> &SegNetConfig {
        &self.config
    }

    pub fn context_dim(&self) -> usize {
        self.config.context_dim
    }

    pub fn projection(&self) -> Option<&Linear> {
        self.projection.as_ref()
    }

    pub fn projection_mut(&mut self) -> Option<&mut Linear> {
        self.projection.as_mut()
    }

    /// Parameters of the encoder, decoder and head only (no context pathway).
    pub fn backbone_params(&self) -> Vec<&Param> {
        self.params()
            .into_iter()
            .filter(|p| !p.name.starts_with("context_proj"))
            .collect()
    }

    fn check_input(&self, x: &Tensor) -> Result<()> {
        if x.c != 1 || (x.h, x.w) != self.config.resolution {
            return Err(Error::Dimension(format!(
                "model expects 1x{}x{} input, got {}x{}x{}",
                self.config.resolution.0, self.config.resolution.1, x.c, x.h, x.w
            )));
        }
        Ok(())
    }

    fn check_contexts(&self, contexts: &[f64], n: usize) -> Result<()> {
        if contexts.len() != n * self.config.context_dim {
            return Err(Error::Dimension(format!(
                "expected {n} context vectors of length {}, got {} values",
                self.config.context_dim,
                contexts.len()
            )));
        }
        Ok(())
    }

    /// Runs the encoder in inference mode.
    pub fn encode_image(&self, images: &Tensor) -> Result<Encoded> {
        self.check_input(images)?;
        let mut cur = images.clone();
        let mut outs = Vec::with_capacity(4);
        for stage in &self.encoder {
            let (y, _) = stage.forward(cur, Mode::Eval)?;
            outs.push(y.clone());
            cur = y;
        }
        let bottleneck = outs.pop().expect("four stages");
        let skips: [Tensor; 3] = outs.try_into().expect("three skips");
        Ok(Encoded { bottleneck, skips })
    }

    /// Projects each context vector and combines it with the bottleneck.
    /// `contexts` holds `n` row-major vectors of length `context_dim`.
    pub fn embed_context(&self, bottleneck: &Tensor, contexts: &[f64]) -> Result<Tensor> {
        self.check_contexts(contexts, bottleneck.n)?;
        match &self.projection {
            None => Ok(bottleneck.clone()),
            Some(p) => {
                let projected = p.forward(contexts, bottleneck.n)?;
                embed_tiled(bottleneck, &projected, self.config.operator)
            }
        }
    }

    /// Decodes an embedded bottleneck into probabilities in (0, 1).
    pub fn decode_mask(&self, embedded: &Tensor, skips: &[Tensor; 3]) -> Result<Tensor> {
        if embedded.c != self.config.embedded_channels() {
            return Err(Error::Dimension(format!(
                "decoder expects {} channels, got {}",
                self.config.embedded_channels(),
                embedded.c
            )));
        }
        let mut cur = embedded.clone();
        for (stage, skip) in self.decoder.iter().zip(skips.iter().rev()) {
            let cat = concat_channels(&upsample2(&cur), skip)?;
            cur = stage.forward(cat, Mode::Eval)?.0;
        }
        let mut logits = self.head.forward(&upsample2(&cur))?;
        logits.data.iter_mut().for_each(|z| *z = probability(*z));
        Ok(logits)
    }

    /// Inference-mode forward pass returning probabilities.
    pub fn forward(&self, images: &Tensor, contexts: &[f64]) -> Result<Tensor> {
        let enc = self.encode_image(images)?;
        let embedded = self.embed_context(&enc.bottleneck, contexts)?;
        self.decode_mask(&embedded, &enc.skips)
    }

    pub fn predict(&self, image: &Grid, context: &[f64]) -> Result<Grid> {
        let probs = self.forward(&Tensor::from_grids(&[image])?, context)?;
        Grid::new(probs.h, probs.w, probs.data.iter().map(|&p| p as f32).collect())
    }

    /// Forward pass recording everything needed for [`Self::backward`].
    pub fn forward_tape(&self, images: &Tensor, contexts: &[f64], mode: Mode) -> Result<Tape> {
        self.check_input(images)?;
        self.check_contexts(contexts, images.n)?;
        let mut enc_tapes = Vec::with_capacity(4);
        let mut cur = images.clone();
        for stage in &self.encoder {
            let (y, tape) = stage.forward(cur, mode)?;
            enc_tapes.push(tape);
            cur = y;
        }
        let (embedded, projected) = match &self.projection {
            None => (cur, Vec::new()),
            Some(p) => {
                let projected = p.forward(contexts, images.n)?;
                (embed_tiled(&cur, &projected, self.config.operator)?, projected)
            }
        };
        let mut dec_tapes = Vec::with_capacity(3);
        let mut cur = embedded;
        for (k, stage) in self.decoder.iter().enumerate() {
            let skip = &enc_tapes[2 - k].output;
            let cat = concat_channels(&upsample2(&cur), skip)?;
            let (y, tape) = stage.forward(cat, mode)?;
            dec_tapes.push(tape);
            cur = y;
        }
        let head_input = upsample2(&cur);
        let logits = self.head.forward(&head_input)?;
        Ok(Tape {
            encoder: enc_tapes,
            context: contexts.to_vec(),
            projected,
            decoder: dec_tapes,
            head_input,
            logits,
        })
    }

    /// Accumulates parameter gradients for `dlogits` and returns the gradient
    /// with respect to the context vectors.
    pub fn backward(&mut self, tape: &Tape, dlogits: &Tensor) -> Vec<f64> {
        let n = dlogits.n;
        let mut grad = upsample2_backward(&self.head.backward(&tape.head_input, dlogits));
        let mut skip_grads: Vec<Tensor> = Vec::with_capacity(3);
        for (k, stage) in self.decoder.iter_mut().enumerate().rev() {
            let dcat = stage.backward(&tape.decoder[k], &grad);
            let up_ch = dcat.c - tape.encoder[2 - k].output.c;
            let (dup, dskip) = split_channels(&dcat, up_ch);
            skip_grads.push(dskip);
            grad = upsample2_backward(&dup);
        }
        // skip_grads now holds gradients for encoder outputs 0, 1, 2 in order
        let mut dcontext = Vec::new();
        if let Some(p) = self.projection.as_mut() {
            let (dbottleneck, dprojected) = embed_tiled_backward(&grad, tape.projected.len() / n, self.config.operator);
            dcontext = p.backward(&tape.context, &dprojected, n);
            grad = dbottleneck;
        }
        for k in (0..4).rev() {
            if k < 3 {
                let extra = &skip_grads[k];
                grad.data.iter_mut().zip(&extra.data).for_each(|(g, e)| *g += e);
            }
            grad = self.encoder[k].backward(&tape.encoder[k], &grad);
        }
        dcontext
    }

    /// Applies the batch statistics recorded in a training tape.
    pub fn update_running_stats(&mut self, tape: &Tape) {
        for (stage, t) in self.encoder.iter_mut().zip(&tape.encoder) {
            stage.bn.update_running(&t.bn);
        }
        for (stage, t) in self.decoder.iter_mut().zip(&tape.decoder) {
            stage.bn.update_running(&t.bn);
        }
    }

    /// Mean BCE of a batch; accumulates parameter gradients and returns the
    /// loss together with the context gradient.
    pub fn loss_and_gradients(
        &mut self,
        images: &Tensor,
        contexts: &[f64],
        targets: &[f64],
        mode: Mode,
    ) -> Result<(f64, Vec<f64>, Tape)> {
        let tape = self.forward_tape(images, contexts, mode)?;
        if targets.len() != tape.logits.data.len() {
            return Err(Error::Dimension("targets do not match the output size".into()));
        }
        let (loss, grad) = bce_with_logits(&tape.logits.data, targets);
        let dlogits = Tensor::from_vec(tape.logits.n, 1, tape.logits.h, tape.logits.w, grad)?;
        let dcontext = self.backward(&tape, &dlogits);
        Ok((loss, dcontext, tape))
    }
}

impl Module for SegModel {
    fn params(&self) -> Vec<&Param> {
        let mut out = Vec::new();
        for s in &self.encoder {
            out.extend([&s.conv.weight, &s.conv.bias]);
            out.extend(s.bn.params());
        }
        if let Some(p) = &self.projection {
            out.extend(p.params());
        }
        for s in &self.decoder {
            out.extend([&s.conv.weight, &s.conv.bias]);
            out.extend(s.bn.params());
        }
        out.extend([&self.head.weight, &self.head.bias]);
        out
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut out = Vec::new();
        for s in &mut self.encoder {
            out.extend([&mut s.conv.weight, &mut s.conv.bias]);
            out.extend(s.bn.params_mut());
        }
        if let Some(p) = &mut self.projection {
            out.extend(p.params_mut());
        }
        for s in &mut self.decoder {
            out.extend([&mut s.conv.weight, &mut s.conv.bias]);
            out.extend(s.bn.params_mut());
        }
        out.extend([&mut self.head.weight, &mut self.head.bias]);
        out
    }
}

fn probability(z: f64) -> f64 {
    sigmoid(z).clamp(PROB_EPS, 1.0 - PROB_EPS)
}

/// Tiles one projected vector per batch item over the bottleneck grid and
/// combines it with the bottleneck.
pub fn embed_tiled(bottleneck: &Tensor, projected: &[f64], operator: EmbeddingOperator) -> Result<Tensor> {
    let n = bottleneck.n;
    let width = projected.len() / n.max(1);
    if projected.len() != n * width {
        return Err(Error::Dimension("projected contexts are ragged".into()));
    }
    let plane = bottleneck.plane();
    match operator {
        EmbeddingOperator::Sum | EmbeddingOperator::Average => {
            if width != bottleneck.c {
                return Err(Error::Dimension(format!(
                    "{operator} embedding needs a context of width {}, got {width}",
                    bottleneck.c
                )));
            }
            let mut out = bottleneck.clone();
            for i in 0..n {
                for c in 0..bottleneck.c {
                    let v = projected[i * width + c];
                    let off = (i * bottleneck.c + c) * plane;
                    for x in &mut out.data[off..off + plane] {
                        *x = if operator == EmbeddingOperator::Sum {
                            *x + v
                        } else {
                            (*x + v) * 0.5
                        };
                    }
                }
            }
            Ok(out)
        }
        EmbeddingOperator::Concat => {
            let mut tiled = Tensor::zeros(n, width, bottleneck.h, bottleneck.w);
            for i in 0..n {
                for c in 0..width {
                    let off = (i * width + c) * plane;
                    tiled.data[off..off + plane].fill(projected[i * width + c]);
                }
            }
            concat_channels(bottleneck, &tiled)
        }
    }
}

fn embed_tiled_backward(d: &Tensor, width: usize, operator: EmbeddingOperator) -> (Tensor, Vec<f64>) {
    let n = d.n;
    match operator {
        EmbeddingOperator::Sum | EmbeddingOperator::Average => {
            let scale = if operator == EmbeddingOperator::Sum { 1.0 } else { 0.5 };
            let mut dproj = vec![0.0; n * width];
            for i in 0..n {
                for c in 0..width {
                    dproj[i * width + c] = scale * d.channel(i, c).iter().sum::<f64>();
                }
            }
            let mut db = d.clone();
            if scale != 1.0 {
                db.data.iter_mut().for_each(|v| *v *= scale);
            }
            (db, dproj)
        }
        EmbeddingOperator::Concat => {
            let (db, dt) = split_channels(d, d.c - width);
            let dproj = (0..n)
                .flat_map(|i| (0..width).map(move |c| (i, c)))
                .map(|(i, c)| dt.channel(i, c).iter().sum::<f64>())
                .collect();
            (db, dproj)
        }
    }
}

/// Mean pixelwise binary cross-entropy of probabilities against a mask.
pub fn loss(pred: &Grid, gt: &Mask) -> Result<f64> {
    if pred.dims() != gt.dims() {
        return Err(Error::Dimension(format!(
            "prediction {}x{} vs mask {}x{}",
            pred.height(),
            pred.width(),
            gt.height(),
            gt.width()
        )));
    }
    let n = pred.data().len() as f64;
    let total: f64 = pred
        .data()
        .iter()
        .zip(gt.data())
        .map(|(&p, &y)| {
            let p = (p as f64).clamp(1e-12, 1.0 - 1e-12);
            if y == 1 {
                -p.ln()
            } else {
                -(1.0 - p).ln()
            }
        })
        .sum();
    Ok(total / n)
}
