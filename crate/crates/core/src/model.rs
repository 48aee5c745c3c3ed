//! The dual-manifold glyph model: a set encoder over character rows, a set
//! encoder over font columns conditioned on character embeddings, and a
//! decoder whose last upsampling layers are generated from the font
//! embedding.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::adaptive_loss::{AdaptiveLossParams, WaveletLikelihood, DEFAULT_EPSILON};
use crate::autodiff::{PoolMode, Tape, Var};
use crate::corpus::{Batch, CharId, GlyphImage, GlyphMatrix};
use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::wavelet;

/// Number of glyphs pushed through an encoder at once during inference.
const INFERENCE_CHUNK: usize = 64;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncoderStage {
    pub channels: usize,
    pub convs: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum UpsampleKind {
    /// Ordinary learned transposed convolution.
    Plain,
    /// Kernel and bias produced from the font embedding by an MLP.
    Hyper,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DecoderStage {
    pub upsample: UpsampleKind,
    pub up_channels: usize,
    pub conv_channels: usize,
    pub convs: usize,
}

/// Architecture and likelihood settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub side: usize,
    pub k: usize,
    pub pooling: PoolMode,
    pub wavelet_levels: usize,
    /// Each stage is `convs x (conv3x3, ReLU)` followed by a blur pool.
    pub encoder: Vec<EncoderStage>,
    /// Channels each character embedding is projected to before being tiled
    /// onto the font encoder's input.
    pub y_channels: usize,
    pub decoder_channels: usize,
    pub decoder_base_side: usize,
    /// Each stage doubles the resolution and then applies
    /// `convs x (conv3x3, instance norm, ReLU)`.
    pub decoder: Vec<DecoderStage>,
    pub hyper_hidden: usize,
    pub epsilon: f64,
}

impl Default for ModelConfig {
    /// Full-size network at 64x64: three upsamplings from 8x8, the last two
    /// generated by hyper MLPs.
    fn default() -> Self {
        let enc = |channels, convs| EncoderStage { channels, convs };
        let dec = |upsample, up_channels, conv_channels| DecoderStage { upsample, up_channels, conv_channels, convs: 2 };
        Self {
            side: 64,
            k: 256,
            pooling: PoolMode::Max,
            wavelet_levels: 6,
            encoder: vec![enc(64, 3), enc(128, 2), enc(256, 2), enc(512, 2)],
            y_channels: 16,
            decoder_channels: 1024,
            decoder_base_side: 8,
            decoder: vec![
                dec(UpsampleKind::Plain, 1024, 512),
                dec(UpsampleKind::Hyper, 256, 128),
                dec(UpsampleKind::Hyper, 128, 64),
            ],
            hyper_hidden: 256,
            epsilon: DEFAULT_EPSILON,
        }
    }
}

impl ModelConfig {
    /// A narrow network that trains on one CPU core in minutes.
    pub fn toy() -> Self {
        let enc = |channels| EncoderStage { channels, convs: 1 };
        let dec = |upsample, c| DecoderStage { upsample, up_channels: c, conv_channels: c, convs: 1 };
        Self {
            k: 32,
            encoder: vec![enc(8), enc(16), enc(32), enc(32)],
            y_channels: 4,
            decoder_channels: 32,
            decoder: vec![
                dec(UpsampleKind::Plain, 32),
                dec(UpsampleKind::Hyper, 16),
                dec(UpsampleKind::Hyper, 8),
            ],
            hyper_hidden: 64,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidArgument(msg));
        if self.side < 4 || !self.side.is_power_of_two() {
            return bad(format!("side must be a power of two >= 4, got {}", self.side));
        }
        let max = wavelet::max_levels(self.side);
        if self.wavelet_levels == 0 || self.wavelet_levels > max {
            return Err(Error::LevelsOutOfRange { levels: self.wavelet_levels, max });
        }
        if self.k == 0 || self.hyper_hidden == 0 || self.decoder_channels == 0 {
            return bad("k, hyper_hidden and decoder_channels must be positive".into());
        }
        if self.encoder.is_empty() || self.encoder.iter().any(|s| s.channels == 0 || s.convs == 0) {
            return bad("encoder needs at least one stage with positive channels and convs".into());
        }
        if self.side >> self.encoder.len() == 0 {
            return bad(format!("{} encoder stages downsample a {} image below 1 pixel", self.encoder.len(), self.side));
        }
        if self.decoder_base_side << self.decoder.len() != self.side {
            return bad(format!(
                "decoder grows {} by 2^{} which does not reach side {}",
                self.decoder_base_side,
                self.decoder.len(),
                self.side
            ));
        }
        if self.decoder.iter().any(|s| s.up_channels == 0 || (s.convs > 0 && s.conv_channels == 0)) {
            return bad("decoder stages need positive channel counts".into());
        }
        if !(self.epsilon > 0.0) {
            return Err(Error::NonPositiveScale(self.epsilon));
        }
        Ok(())
    }

    pub fn encoder_features(&self) -> usize {
        let s = self.side >> self.encoder.len();
        self.encoder.last().unwrap().channels * s * s
    }

    /// `(cin, cout)` of every hyper layer, in decoder order.
    pub fn hyper_layers(&self) -> Vec<(usize, usize)> {
        let mut cin = self.decoder_channels;
        let mut out = Vec::new();
        for s in &self.decoder {
            if s.upsample == UpsampleKind::Hyper {
                out.push((cin, s.up_channels));
            }
            cin = if s.convs > 0 { s.conv_channels } else { s.up_channels };
        }
        out
    }
}

/// Element count a hyper MLP must produce for a `cin -> cout` 2x2
/// transposed convolution: the kernel followed by the bias.
pub fn hyper_output_len(cin: usize, cout: usize) -> usize {
    cin * cout * 4 + cout
}

/// Weight and bias of one layer.
#[derive(Clone, Debug, PartialEq)]
pub struct Layer<T> {
    pub w: T,
    pub b: T,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Encoder<T> {
    pub stages: Vec<Vec<Layer<T>>>,
    pub head: Layer<T>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct HyperMlp<T> {
    pub hidden: Layer<T>,
    pub out: Layer<T>,
}

#[derive(Clone, Debug, PartialEq)]
pub enum Upsample<T> {
    Plain(Layer<T>),
    Hyper(HyperMlp<T>),
}

#[derive(Clone, Debug, PartialEq)]
pub struct Stage<T> {
    pub up: Upsample<T>,
    pub convs: Vec<Layer<T>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Decoder<T> {
    pub input: Layer<T>,
    pub stages: Vec<Stage<T>>,
    pub output: Layer<T>,
}

/// Every trainable array of the model, including the likelihood latents.
#[derive(Clone, Debug, PartialEq)]
pub struct Weights<T> {
    pub char_encoder: Encoder<T>,
    pub font_encoder: Encoder<T>,
    pub y_projection: Layer<T>,
    pub decoder: Decoder<T>,
    pub latent_shape: T,
    pub latent_scale: T,
}

impl<T> Layer<T> {
    fn map<U>(&self, f: &mut impl FnMut(&T) -> U) -> Layer<U> {
        Layer { w: f(&self.w), b: f(&self.b) }
    }

    fn visit<'a>(&'a self, p: &str, f: &mut impl FnMut(String, &'a T)) {
        f(format!("{p}.w"), &self.w);
        f(format!("{p}.b"), &self.b);
    }

    fn visit_mut(&mut self, f: &mut impl FnMut(&mut T)) {
        f(&mut self.w);
        f(&mut self.b);
    }
}

impl<T> Encoder<T> {
    fn map<U>(&self, f: &mut impl FnMut(&T) -> U) -> Encoder<U> {
        Encoder {
            stages: self.stages.iter().map(|s| s.iter().map(|l| l.map(f)).collect()).collect(),
            head: self.head.map(f),
        }
    }

    fn visit<'a>(&'a self, p: &str, f: &mut impl FnMut(String, &'a T)) {
        for (i, s) in self.stages.iter().enumerate() {
            for (j, l) in s.iter().enumerate() {
                l.visit(&format!("{p}.stage{i}.conv{j}"), f);
            }
        }
        self.head.visit(&format!("{p}.head"), f);
    }

    fn visit_mut(&mut self, f: &mut impl FnMut(&mut T)) {
        for l in self.stages.iter_mut().flatten() {
            l.visit_mut(f);
        }
        self.head.visit_mut(f);
    }
}

impl<T> Decoder<T> {
    fn map<U>(&self, f: &mut impl FnMut(&T) -> U) -> Decoder<U> {
        Decoder {
            input: self.input.map(f),
            stages: self
                .stages
                .iter()
                .map(|s| Stage {
                    up: match &s.up {
                        Upsample::Plain(l) => Upsample::Plain(l.map(f)),
                        Upsample::Hyper(h) => Upsample::Hyper(HyperMlp { hidden: h.hidden.map(f), out: h.out.map(f) }),
                    },
                    convs: s.convs.iter().map(|l| l.map(f)).collect(),
                })
                .collect(),
            output: self.output.map(f),
        }
    }

    fn visit<'a>(&'a self, f: &mut impl FnMut(String, &'a T)) {
        self.input.visit("decoder.input", f);
        let mut hyper = 0;
        for (i, s) in self.stages.iter().enumerate() {
            match &s.up {
                Upsample::Plain(l) => l.visit(&format!("decoder.stage{i}.up"), f),
                Upsample::Hyper(h) => {
                    h.hidden.visit(&format!("hyper{hyper}.hidden"), f);
                    h.out.visit(&format!("hyper{hyper}.out"), f);
                    hyper += 1;
                }
            }
            for (j, l) in s.convs.iter().enumerate() {
                l.visit(&format!("decoder.stage{i}.conv{j}"), f);
            }
        }
        self.output.visit("decoder.output", f);
    }

    fn visit_mut(&mut self, f: &mut impl FnMut(&mut T)) {
        self.input.visit_mut(f);
        for s in &mut self.stages {
            match &mut s.up {
                Upsample::Plain(l) => l.visit_mut(f),
                Upsample::Hyper(h) => {
                    h.hidden.visit_mut(f);
                    h.out.visit_mut(f);
                }
            }
            for l in &mut s.convs {
                l.visit_mut(f);
            }
        }
        self.output.visit_mut(f);
    }
}

impl<T> Weights<T> {
    pub fn map<U>(&self, mut f: impl FnMut(&T) -> U) -> Weights<U> {
        Weights {
            char_encoder: self.char_encoder.map(&mut f),
            font_encoder: self.font_encoder.map(&mut f),
            y_projection: self.y_projection.map(&mut f),
            decoder: self.decoder.map(&mut f),
            latent_shape: f(&self.latent_shape),
            latent_scale: f(&self.latent_scale),
        }
    }

    /// Visits every array with its dotted name, in a fixed order. The first
    /// name component is the parameter group.
    pub fn visit<'a>(&'a self, mut f: impl FnMut(String, &'a T)) {
        self.char_encoder.visit("char_encoder", &mut f);
        self.font_encoder.visit("font_encoder", &mut f);
        self.y_projection.visit("y_projection", &mut f);
        self.decoder.visit(&mut f);
        f("loss.latent_shape".into(), &self.latent_shape);
        f("loss.latent_scale".into(), &self.latent_scale);
    }

    /// Same order as [`Weights::visit`].
    pub fn visit_mut(&mut self, mut f: impl FnMut(&mut T)) {
        self.char_encoder.visit_mut(&mut f);
        self.font_encoder.visit_mut(&mut f);
        self.y_projection.visit_mut(&mut f);
        self.decoder.visit_mut(&mut f);
        f(&mut self.latent_shape);
        f(&mut self.latent_scale);
    }

    pub fn names(&self) -> Vec<String> {
        let mut out = Vec::new();
        self.visit(|n, _| out.push(n));
        out
    }

    pub fn flat(&self) -> Vec<&T> {
        let mut out = Vec::new();
        self.visit(|_, t| out.push(t));
        out
    }
}

impl Weights<Tensor> {
    /// Sum of squared entries per parameter group.
    pub fn group_norms(&self) -> BTreeMap<String, f64> {
        let mut out: BTreeMap<String, f64> = BTreeMap::new();
        self.visit(|name, t| {
            let group = name.split('.').next().unwrap_or("").into();
            *out.entry(group).or_insert(0.0) += t.sum_squares();
        });
        for v in out.values_mut() {
            *v = libm::sqrt(*v);
        }
        out
    }

    pub fn num_parameters(&self) -> usize {
        let mut n = 0;
        self.visit(|_, t| n += t.len());
        n
    }

    pub fn all_finite(&self) -> bool {
        let mut ok = true;
        self.visit(|_, t| ok &= t.all_finite());
        ok
    }
}

/// Model configuration together with its weights.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    pub config: ModelConfig,
    pub weights: Weights<Tensor>,
}

impl ModelParams {
    pub fn loss_params(&self) -> AdaptiveLossParams {
        AdaptiveLossParams {
            latent_shape: self.weights.latent_shape.clone(),
            latent_scale: self.weights.latent_scale.clone(),
            epsilon: self.config.epsilon,
        }
    }

    /// Rebuilds parameters from arrays listed in [`Weights::visit`] order,
    /// checking each against the shape the configuration implies.
    pub fn from_flat(config: ModelConfig, arrays: Vec<Tensor>) -> Result<Self> {
        let mut shell = build_params(&config, &mut |shape, _| Tensor::zeros(shape))?;
        let mut expected = Vec::new();
        shell.weights.visit(|_, t| expected.push(t.shape().to_vec()));
        if expected.len() != arrays.len() {
            return Err(Error::ShapeMismatch { expected: expected.len(), found: arrays.len() });
        }
        for (want, got) in expected.iter().zip(&arrays) {
            if want.as_slice() != got.shape() {
                return Err(Error::InvalidArgument(format!("parameter shape {:?}, expected {:?}", got.shape(), want)));
            }
        }
        let mut it = arrays.into_iter();
        shell.weights.visit_mut(|t| *t = it.next().unwrap());
        Ok(shell)
    }
}

/// Produces a weight array of the given shape and target standard deviation.
type Fill<'a> = dyn FnMut(&[usize], f64) -> Tensor + 'a;

/// He-normal for layers followed by a ReLU, `1 / fan_in` variance otherwise.
fn init_layer(fill: &mut Fill<'_>, w_shape: &[usize], fan_in: usize, cout: usize, relu: bool) -> Layer<Tensor> {
    let gain = if relu { 2.0 } else { 1.0 };
    Layer { w: fill(w_shape, libm::sqrt(gain / fan_in as f64)), b: Tensor::zeros(&[cout]) }
}

fn init_encoder(fill: &mut Fill<'_>, cfg: &ModelConfig, cin: usize) -> Encoder<Tensor> {
    let mut c = cin;
    let mut stages = Vec::new();
    for st in &cfg.encoder {
        let mut layers = Vec::new();
        for _ in 0..st.convs {
            layers.push(init_layer(fill, &[st.channels, c, 3, 3], c * 9, st.channels, true));
            c = st.channels;
        }
        stages.push(layers);
    }
    let d = cfg.encoder_features();
    Encoder { stages, head: init_layer(fill, &[2 * cfg.k, d], d, 2 * cfg.k, false) }
}

fn build_params(cfg: &ModelConfig, fill: &mut Fill<'_>) -> Result<ModelParams> {
    cfg.validate()?;
    let char_encoder = init_encoder(fill, cfg, 1);
    let font_encoder = init_encoder(fill, cfg, 1 + cfg.y_channels);
    let y_projection = init_layer(fill, &[cfg.y_channels, cfg.k], cfg.k, cfg.y_channels, false);
    let base = cfg.decoder_channels * cfg.decoder_base_side * cfg.decoder_base_side;
    let input = init_layer(fill, &[base, cfg.k], cfg.k, base, false);
    let mut stages = Vec::new();
    let mut cin = cfg.decoder_channels;
    for st in &cfg.decoder {
        let cout = st.up_channels;
        let up = match st.upsample {
            UpsampleKind::Plain => Upsample::Plain(init_layer(fill, &[cin, cout, 2, 2], cin, cout, false)),
            UpsampleKind::Hyper => {
                let hidden = init_layer(fill, &[cfg.hyper_hidden, cfg.k], cfg.k, cfg.hyper_hidden, true);
                // The generated kernel starts as a fixed random kernel (held in
                // the output bias) plus a small z-dependent part.
                let kstd = libm::sqrt(1.0 / cin as f64);
                let len = hyper_output_len(cin, cout);
                let w = fill(&[len, cfg.hyper_hidden], 0.5 * kstd / libm::sqrt(cfg.hyper_hidden as f64));
                let mut b = fill(&[len], kstd);
                b.data_mut()[cin * cout * 4..].fill(0.0);
                Upsample::Hyper(HyperMlp { hidden, out: Layer { w, b } })
            }
        };
        let mut c = cout;
        let mut convs = Vec::new();
        for _ in 0..st.convs {
            convs.push(init_layer(fill, &[st.conv_channels, c, 3, 3], c * 9, st.conv_channels, true));
            c = st.conv_channels;
        }
        stages.push(Stage { up, convs });
        cin = c;
    }
    let output = init_layer(fill, &[1, cin, 3, 3], cin * 9, 1, false);
    let n = cfg.side * cfg.side;
    Ok(ModelParams {
        config: cfg.clone(),
        weights: Weights {
            char_encoder,
            font_encoder,
            y_projection,
            decoder: Decoder { input, stages, output },
            latent_shape: Tensor::zeros(&[n]),
            latent_scale: Tensor::zeros(&[n]),
        },
    })
}

/// Fan-in-scaled random weights; likelihood latents at zero, so every
/// coefficient starts at `alpha = 1`, `sigma = 1 + eps`.
pub fn init_params<R: Rng + ?Sized>(config: &ModelConfig, rng: &mut R) -> Result<ModelParams> {
    build_params(config, &mut |shape, std| {
        let n: usize = shape.iter().product();
        let data = (0..n)
            .map(|_| {
                let e: f64 = StandardNormal.sample(rng);
                (e * std) as f32
            })
            .collect();
        Tensor::from_vec(shape, data).unwrap()
    })
}

/// Diagonal Gaussian posterior over one embedding.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatentPosterior {
    pub mean: Vec<f32>,
    pub log_variance: Vec<f32>,
}

/// `mu + exp(logvar / 2) * eta` with `eta ~ N(0, I)`.
pub fn reparameterize<R: Rng + ?Sized>(post: &LatentPosterior, rng: &mut R) -> Vec<f32> {
    post.mean
        .iter()
        .zip(&post.log_variance)
        .map(|(&m, &l)| {
            let e: f32 = StandardNormal.sample(rng);
            m + libm::expf(0.5 * l) * e
        })
        .collect()
}

/// Closed-form KL divergence to `N(0, I)`.
pub fn kl_to_prior(post: &LatentPosterior) -> f64 {
    post.mean
        .iter()
        .zip(&post.log_variance)
        .map(|(&m, &l)| {
            let (m, l) = (m as f64, l as f64);
            0.5 * (m * m + libm::exp(l) - 1.0 - l)
        })
        .sum()
}

fn bind<'p>(tape: &mut Tape<'p>, l: &'p Layer<Tensor>) -> Layer<Var> {
    Layer { w: tape.param(&l.w), b: tape.param(&l.b) }
}

fn bind_encoder<'p>(tape: &mut Tape<'p>, e: &'p Encoder<Tensor>) -> Encoder<Var> {
    Encoder {
        stages: e.stages.iter().map(|s| s.iter().map(|l| bind(tape, l)).collect()).collect(),
        head: bind(tape, &e.head),
    }
}

fn bind_decoder<'p>(tape: &mut Tape<'p>, d: &'p Decoder<Tensor>) -> Decoder<Var> {
    Decoder {
        input: bind(tape, &d.input),
        stages: d
            .stages
            .iter()
            .map(|s| Stage {
                up: match &s.up {
                    Upsample::Plain(l) => Upsample::Plain(bind(tape, l)),
                    Upsample::Hyper(h) => Upsample::Hyper(HyperMlp { hidden: bind(tape, &h.hidden), out: bind(tape, &h.out) }),
                },
                convs: s.convs.iter().map(|l| bind(tape, l)).collect(),
            })
            .collect(),
        output: bind(tape, &d.output),
    }
}

fn images_tensor(images: &[&GlyphImage], side: usize) -> Result<Tensor> {
    let mut data = Vec::with_capacity(images.len() * side * side);
    for g in images {
        if g.side() != side {
            return Err(Error::BadImageShape { side: g.side(), len: g.pixels().len() });
        }
        data.extend_from_slice(g.pixels());
    }
    Tensor::from_vec(&[images.len(), 1, side, side], data)
}

/// Convolutional trunk of an encoder: `[N, C, S, S] -> [N, D]`.
fn encoder_trunk(tape: &mut Tape<'_>, enc: &Encoder<Var>, mut x: Var) -> Var {
    for stage in &enc.stages {
        for l in stage {
            let c = tape.conv3x3(x, l.w, l.b);
            x = tape.relu(c);
        }
        x = tape.blur_pool(x);
    }
    let n = tape.value(x).dim(0);
    let d = tape.value(x).len() / n;
    tape.reshape(x, &[n, d])
}

/// Pooled features to `(mu, logvar)`, each `[G, k]`.
fn encoder_head(tape: &mut Tape<'_>, enc: &Encoder<Var>, pooled: Var, k: usize) -> (Var, Var) {
    let out = tape.linear(pooled, enc.head.w, enc.head.b);
    (tape.slice_cols(out, 0, k), tape.slice_cols(out, k, k))
}

/// Hyper MLP outputs for each row of `z [F, k]`.
fn hyper_forward(tape: &mut Tape<'_>, h: &HyperMlp<Var>, z: Var) -> Var {
    let a = tape.linear(z, h.hidden.w, h.hidden.b);
    let a = tape.relu(a);
    tape.linear(a, h.out.w, h.out.b)
}

/// Decoder forward for `y [N, k]` and font rows `z [F, k]`; cell `n` uses
/// font row `font_of[n]`. Returns `[N, 1, S, S]` in (0, 1).
fn decoder_forward(tape: &mut Tape<'_>, cfg: &ModelConfig, dec: &Decoder<Var>, y: Var, z: Var, font_of: &[usize]) -> Var {
    let n = font_of.len();
    let x = tape.linear(y, dec.input.w, dec.input.b);
    let s0 = cfg.decoder_base_side;
    let mut x = tape.reshape(x, &[n, cfg.decoder_channels, s0, s0]);
    for (stage, st_cfg) in dec.stages.iter().zip(&cfg.decoder) {
        x = match &stage.up {
            Upsample::Plain(l) => tape.conv_t2x2(x, l.w, l.b),
            Upsample::Hyper(h) => {
                let hw = hyper_forward(tape, h, z);
                tape.hyper_conv_t2x2(x, hw, font_of.to_vec(), st_cfg.up_channels)
            }
        };
        for l in &stage.convs {
            let c = tape.conv3x3(x, l.w, l.b);
            let c = tape.instance_norm(c);
            x = tape.relu(c);
        }
    }
    let out = tape.conv3x3(x, dec.output.w, dec.output.b);
    tape.sigmoid(out)
}

fn posteriors(tape: &Tape<'_>, mu: Var, logvar: Var) -> Vec<LatentPosterior> {
    let (m, l) = (tape.value(mu), tape.value(logvar));
    (0..m.dim(0))
        .map(|g| LatentPosterior { mean: m.row(g).to_vec(), log_variance: l.row(g).to_vec() })
        .collect()
}

fn pool_rows(acc: &mut Option<Vec<f32>>, t: &Tensor, mode: PoolMode) {
    for r in 0..t.dim(0) {
        let row = t.row(r);
        match acc {
            None => *acc = Some(row.to_vec()),
            Some(a) => {
                for (x, &v) in a.iter_mut().zip(row) {
                    *x = match mode {
                        PoolMode::Max => x.max(v),
                        PoolMode::Min => x.min(v),
                    };
                }
            }
        }
    }
}

/// Pooled (pre-head) features of one glyph set, computed in chunks.
fn pooled_features<'p, F>(params: &ModelParams, enc: &'p Encoder<Tensor>, n: usize, mut input: F) -> Result<Tensor>
where
    F: FnMut(&mut Tape<'p>, core::ops::Range<usize>) -> Result<Var>,
{
    if n == 0 {
        return Err(Error::EmptySet);
    }
    let mut acc = None;
    let mut start = 0;
    while start < n {
        let end = (start + INFERENCE_CHUNK).min(n);
        let mut tape = Tape::new();
        let vars = bind_encoder(&mut tape, enc);
        let x = input(&mut tape, start..end)?;
        let f = encoder_trunk(&mut tape, &vars, x);
        pool_rows(&mut acc, tape.value(f), params.config.pooling);
        start = end;
    }
    let v = acc.unwrap();
    Tensor::from_vec(&[1, v.len()], v)
}

fn head_posterior(params: &ModelParams, enc: &Encoder<Tensor>, pooled: Tensor) -> LatentPosterior {
    let mut tape = Tape::new();
    let head = bind(&mut tape, &enc.head);
    let p = tape.constant(pooled);
    let enc_vars = Encoder { stages: Vec::new(), head };
    let (mu, lv) = encoder_head(&mut tape, &enc_vars, p, params.config.k);
    posteriors(&tape, mu, lv).remove(0)
}

/// Pooled encoder features of a character row, before the posterior head.
pub fn character_features(params: &ModelParams, glyphs: &[&GlyphImage]) -> Result<Tensor> {
    let side = params.config.side;
    pooled_features(params, &params.weights.char_encoder, glyphs.len(), |tape, r| {
        Ok(tape.constant(images_tensor(&glyphs[r], side)?))
    })
}

/// `q(Y_i | X)` from any non-empty set of glyphs of one character.
pub fn encode_characters(params: &ModelParams, glyphs: &[&GlyphImage]) -> Result<LatentPosterior> {
    let pooled = character_features(params, glyphs)?;
    Ok(head_posterior(params, &params.weights.char_encoder, pooled))
}

/// `q(Z_j | Y, X)` from glyphs of one font, each conditioned on its
/// character's embedding.
pub fn encode_font(
    params: &ModelParams,
    glyphs: &[(CharId, &GlyphImage)],
    embeddings: &BTreeMap<CharId, Vec<f32>>,
) -> Result<LatentPosterior> {
    let k = params.config.k;
    let mut ys = Vec::with_capacity(glyphs.len());
    for (c, _) in glyphs {
        let y = embeddings.get(c).ok_or(Error::MissingEmbedding(*c))?;
        if y.len() != k {
            return Err(Error::ShapeMismatch { expected: k, found: y.len() });
        }
        ys.push(y.as_slice());
    }
    let side = params.config.side;
    let w = &params.weights;
    let pooled = pooled_features(params, &w.font_encoder, glyphs.len(), |tape, r| {
        let imgs: Vec<&GlyphImage> = glyphs[r.clone()].iter().map(|(_, g)| *g).collect();
        let x = tape.constant(images_tensor(&imgs, side)?);
        let y = tape.constant(Tensor::from_vec(&[r.len(), k], ys[r].concat())?);
        let proj = bind(tape, &w.y_projection);
        let p = tape.linear(y, proj.w, proj.b);
        Ok(tape.concat_tiled(x, p))
    })?;
    Ok(head_posterior(params, &w.font_encoder, pooled))
}

/// Kernel and bias of every hyper layer generated from `z`.
pub fn hyper_weights(params: &ModelParams, z: &[f32]) -> Result<Vec<(Tensor, Tensor)>> {
    let cfg = &params.config;
    if z.len() != cfg.k {
        return Err(Error::ShapeMismatch { expected: cfg.k, found: z.len() });
    }
    let mut out = Vec::new();
    let mut layers = cfg.hyper_layers().into_iter();
    for stage in &params.weights.decoder.stages {
        if let Upsample::Hyper(h) = &stage.up {
            let (cin, cout) = layers.next().unwrap();
            let mut tape = Tape::new();
            let hv = HyperMlp { hidden: bind(&mut tape, &h.hidden), out: bind(&mut tape, &h.out) };
            let zv = tape.constant(Tensor::from_vec(&[1, z.len()], z.to_vec())?);
            let o = hyper_forward(&mut tape, &hv, zv);
            let data = tape.value(o).data();
            let split = cin * cout * 4;
            out.push((
                Tensor::from_vec(&[cin, cout, 2, 2], data[..split].to_vec())?,
                Tensor::from_vec(&[cout], data[split..].to_vec())?,
            ));
        }
    }
    Ok(out)
}

/// Largest `f32` below one; keeps decoded intensities strictly inside (0, 1).
const BELOW_ONE: f32 = 1.0 - f32::EPSILON / 2.0;

/// Decodes each `(y, z)` pair to a glyph.
pub fn decode_batch(params: &ModelParams, pairs: &[(&[f32], &[f32])]) -> Result<Vec<GlyphImage>> {
    let cfg = &params.config;
    let k = cfg.k;
    let mut out = Vec::with_capacity(pairs.len());
    for chunk in pairs.chunks(INFERENCE_CHUNK) {
        let mut ys = Vec::with_capacity(chunk.len() * k);
        let mut zs = Vec::with_capacity(chunk.len() * k);
        for (y, z) in chunk {
            for v in [y, z] {
                if v.len() != k {
                    return Err(Error::ShapeMismatch { expected: k, found: v.len() });
                }
            }
            ys.extend_from_slice(y);
            zs.extend_from_slice(z);
        }
        let mut tape = Tape::new();
        let dec = bind_decoder(&mut tape, &params.weights.decoder);
        let y = tape.constant(Tensor::from_vec(&[chunk.len(), k], ys)?);
        let z = tape.constant(Tensor::from_vec(&[chunk.len(), k], zs)?);
        let font_of: Vec<usize> = (0..chunk.len()).collect();
        let x = decoder_forward(&mut tape, cfg, &dec, y, z, &font_of);
        let s2 = cfg.side * cfg.side;
        for px in tape.value(x).data().chunks(s2) {
            let clamped = px.iter().map(|v| v.clamp(f32::MIN_POSITIVE, BELOW_ONE)).collect();
            out.push(GlyphImage::new(cfg.side, clamped)?);
        }
    }
    Ok(out)
}

/// Distribution mean `X_hat` of one glyph.
pub fn decode(params: &ModelParams, y: &[f32], z: &[f32]) -> Result<GlyphImage> {
    Ok(decode_batch(params, &[(y, z)])?.remove(0))
}

/// Terms of one ELBO evaluation.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ElboStats {
    pub elbo: f64,
    pub recon: f64,
    pub kl: f64,
    pub kl_chars: f64,
    pub kl_fonts: f64,
    pub glyphs: usize,
}

/// ELBO of one batch together with the gradient of `-ELBO`.
#[derive(Clone, Debug)]
pub struct ElboOutput {
    pub stats: ElboStats,
    pub grads: Weights<Tensor>,
}

/// `sum loglik(X_ij | decode(y_i, z_j)) - sum KL(Y_i) - sum KL(Z_j)`.
///
/// `Y_i` is inferred from the batch glyphs of row `i`, then each `Z_j` from
/// its column's glyphs paired with sampled `y_i`. Noise is drawn from `rng`
/// for every row (sorted by character index) and then for every font, in
/// batch order.
pub fn elbo<R: Rng + ?Sized>(
    params: &ModelParams,
    likelihood: &WaveletLikelihood<'_>,
    matrix: &GlyphMatrix,
    batch: &Batch,
    rng: &mut R,
) -> Result<ElboOutput> {
    let cfg = &params.config;
    if matrix.side() != cfg.side || likelihood.side() != cfg.side {
        return Err(Error::BadImageShape { side: matrix.side(), len: cfg.side * cfg.side });
    }
    let cells = batch.cells();
    if cells.is_empty() {
        return Err(Error::EmptySet);
    }
    let mut images = Vec::with_capacity(cells.len());
    for &(i, j) in &cells {
        images.push(matrix.get(i, j).ok_or_else(|| Error::InvalidArgument(format!("cell ({i}, {j}) is empty")))?);
    }
    let rows: Vec<usize> = {
        let mut r: Vec<usize> = cells.iter().map(|c| c.0).collect();
        r.sort_unstable();
        r.dedup();
        r
    };
    let row_of: Vec<usize> = cells.iter().map(|c| rows.binary_search(&c.0).unwrap()).collect();
    let font_of: Vec<usize> = batch
        .chars
        .iter()
        .enumerate()
        .flat_map(|(f, cs)| core::iter::repeat_n(f, cs.len()))
        .collect();
    let row_groups: Vec<Vec<usize>> =
        (0..rows.len()).map(|r| (0..cells.len()).filter(|&n| row_of[n] == r).collect()).collect();
    let font_groups: Vec<Vec<usize>> =
        (0..batch.fonts.len()).map(|f| (0..cells.len()).filter(|&n| font_of[n] == f).collect()).collect();
    let k = cfg.k;

    let w = &params.weights;
    let mut tape = Tape::new();
    let char_enc = bind_encoder(&mut tape, &w.char_encoder);
    let font_enc = bind_encoder(&mut tape, &w.font_encoder);
    let proj = bind(&mut tape, &w.y_projection);
    let dec = bind_decoder(&mut tape, &w.decoder);
    let shape_var = tape.param(&w.latent_shape);
    let scale_var = tape.param(&w.latent_scale);

    let x = tape.constant(images_tensor(&images, cfg.side)?);

    let feats = encoder_trunk(&mut tape, &char_enc, x);
    let pooled = tape.set_pool(feats, &row_groups, cfg.pooling);
    let (mu_y, lv_y) = encoder_head(&mut tape, &char_enc, pooled, k);
    let eta_y: Vec<f32> = (0..rows.len() * k).map(|_| StandardNormal.sample(rng)).collect();
    let y = tape.reparameterize(mu_y, lv_y, eta_y);

    let y_cells = tape.gather_rows(y, row_of.clone());
    let y_proj = tape.linear(y_cells, proj.w, proj.b);
    let xz = tape.concat_tiled(x, y_proj);
    let feats = encoder_trunk(&mut tape, &font_enc, xz);
    let pooled = tape.set_pool(feats, &font_groups, cfg.pooling);
    let (mu_z, lv_z) = encoder_head(&mut tape, &font_enc, pooled, k);
    let eta_z: Vec<f32> = (0..batch.fonts.len() * k).map(|_| StandardNormal.sample(rng)).collect();
    let z = tape.reparameterize(mu_z, lv_z, eta_z);

    let decoded = decoder_forward(&mut tape, cfg, &dec, y_cells, z, &font_of);

    let loss_params = params.loss_params();
    let s2 = cfg.side * cfg.side;
    let mut recon = 0.0;
    let mut d_decoded = Vec::with_capacity(cells.len() * s2);
    let mut d_shape = vec![0.0f64; s2];
    let mut d_scale = vec![0.0f64; s2];
    for (n, img) in images.iter().enumerate() {
        let target = img.pixels_f64();
        let pred: Vec<f64> = tape.value(decoded).row(n).iter().map(|&v| v as f64).collect();
        let score = likelihood.score(&target, &pred, &loss_params)?;
        recon += score.log_likelihood;
        d_decoded.extend(score.d_decoded.iter().map(|&g| g as f32));
        for (a, g) in d_shape.iter_mut().zip(&score.d_latent_shape) {
            *a += g;
        }
        for (a, g) in d_scale.iter_mut().zip(&score.d_latent_scale) {
            *a += g;
        }
    }
    let to_t = |v: Vec<f64>| Tensor::from_vec(&[s2], v.into_iter().map(|g| g as f32).collect()).unwrap();
    let recon_var = tape.precomputed(
        recon as f32,
        vec![
            (decoded, Tensor::from_vec(tape.value(decoded).shape(), d_decoded)?),
            (shape_var, to_t(d_shape)),
            (scale_var, to_t(d_scale)),
        ],
    );
    let kl_y = tape.kl_to_prior(mu_y, lv_y);
    let kl_z = tape.kl_to_prior(mu_z, lv_z);
    let neg_elbo = tape.weighted_sum(vec![(recon_var, -1.0), (kl_y, 1.0), (kl_z, 1.0)]);

    let kl_chars: f64 = posteriors(&tape, mu_y, lv_y).iter().map(kl_to_prior).sum();
    let kl_fonts: f64 = posteriors(&tape, mu_z, lv_z).iter().map(kl_to_prior).sum();
    let stats = ElboStats {
        elbo: recon - kl_chars - kl_fonts,
        recon,
        kl: kl_chars + kl_fonts,
        kl_chars,
        kl_fonts,
        glyphs: cells.len(),
    };

    let mut g = tape.backward(neg_elbo);
    let vars = Weights {
        char_encoder: char_enc,
        font_encoder: font_enc,
        y_projection: proj,
        decoder: dec,
        latent_shape: shape_var,
        latent_scale: scale_var,
    };
    let mut grads = Vec::new();
    vars.visit(|_, v| grads.push(g.take(*v)));
    let mut it = grads.into_iter();
    let grads = w.map(|t| it.next().unwrap().unwrap_or_else(|| Tensor::zeros(t.shape())));
    Ok(ElboOutput { stats, grads })
}
