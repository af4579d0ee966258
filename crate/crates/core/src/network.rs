//! The multi-scale wavelet encoder-decoder.
//!
//! The encoder has four `3×3 conv + ReLU` blocks (taps `relu1_1 … relu4_1`)
//! with a wavelet pool between consecutive blocks; the LL band feeds the next
//! block and the LH/HL/HH bands are kept as skips. Stylization:
//!
//! * `relu4_1` of the content goes through SAFIN-LL against the style's `relu4_1`;
//! * the deepest skip bands (from pooling `relu3_1`) go through one shared
//!   SAFIN-HF module, band by band, against the style's matching band;
//! * the two shallower skip scales are restyled with AdaIN;
//! * the decoder mirrors the encoder, unpooling with the restyled skips, and
//!   clamps its linear output to `[0, 1]`.
//!
//! The encoder is random-orthogonal, seeded, and never trained.

use crate::error::{Error, Result};
use crate::moments::{check_feature_map, DEFAULT_EPSILON};
use crate::rng::SplitMix64;
use crate::stylization::{adain, safin_forward, SafinVars, SafinWeights, SAFIN_PARAM_NAMES};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;
use crate::wavelet::{wavelet_pool, wavelet_unpool, WaveletBands};

pub const DEFAULT_WIDTHS: [usize; 4] = [8, 16, 32, 64];
pub const IMAGE_CHANNELS: usize = 3;

#[derive(Clone, Debug, PartialEq)]
pub struct StylizationConfig {
    pub epsilon: f64,
    pub attention_enabled: bool,
    pub widths: [usize; 4],
    pub input_size: usize,
}

impl Default for StylizationConfig {
    fn default() -> Self {
        Self {
            epsilon: DEFAULT_EPSILON,
            attention_enabled: true,
            widths: DEFAULT_WIDTHS,
            input_size: 32,
        }
    }
}

impl StylizationConfig {
    pub fn validate(&self) -> Result<()> {
        if self.input_size == 0 || !self.input_size.is_multiple_of(8) {
            return Err(Error::Config(format!(
                "input size {} must be a positive multiple of 8",
                self.input_size
            )));
        }
        if self.widths.contains(&0) {
            return Err(Error::Config(format!("widths {:?} must be positive", self.widths)));
        }
        if self.epsilon.is_nan() || self.epsilon <= 0.0 {
            return Err(Error::Config(format!("epsilon {} must be positive", self.epsilon)));
        }
        Ok(())
    }
}

/// Rows (or columns, whichever are fewer) orthonormal, by modified
/// Gram-Schmidt on a Gaussian draw.
fn orthogonal(rows: usize, cols: usize, rng: &mut SplitMix64) -> Vec<f64> {
    let transpose = rows > cols;
    let (r, c) = if transpose { (cols, rows) } else { (rows, cols) };
    let mut m: Vec<Vec<f64>> = (0..r).map(|_| (0..c).map(|_| rng.normal()).collect()).collect();
    for i in 0..r {
        for j in 0..i {
            let dot: f64 = m[i].iter().zip(&m[j]).map(|(a, b)| a * b).sum();
            let (head, tail) = m.split_at_mut(i);
            for (a, b) in tail[0].iter_mut().zip(&head[j]) {
                *a -= dot * b;
            }
        }
        let norm = m[i].iter().map(|v| v * v).sum::<f64>().sqrt();
        m[i].iter_mut().for_each(|v| *v /= norm);
    }
    let mut out = vec![0.0; rows * cols];
    for i in 0..r {
        for j in 0..c {
            if transpose {
                out[j * cols + i] = m[i][j];
            } else {
                out[i * cols + j] = m[i][j];
            }
        }
    }
    out
}

/// Frozen feature extractor.
#[derive(Clone, Debug, PartialEq)]
pub struct EncoderNet {
    /// `(w_k, w_{k-1}, 3, 3)` with `w_0 = 3`.
    pub weights: [Tensor; 4],
    /// `(w_k,)`
    pub biases: [Tensor; 4],
}

impl EncoderNet {
    pub fn seeded(widths: [usize; 4], rng: &mut SplitMix64) -> Self {
        let gain = std::f64::consts::SQRT_2;
        let mut c_in = IMAGE_CHANNELS;
        let mut weights = Vec::with_capacity(4);
        let mut biases = Vec::with_capacity(4);
        for &c_out in &widths {
            let data = orthogonal(c_out, c_in * 9, rng).into_iter().map(|v| v * gain).collect();
            weights.push(Tensor::new(&[c_out, c_in, 3, 3], data).expect("encoder kernel"));
            biases.push(Tensor::from_fn(&[c_out], |_| rng.uniform(0.0, 0.1)));
            c_in = c_out;
        }
        Self {
            weights: weights.try_into().expect("four blocks"),
            biases: biases.try_into().expect("four blocks"),
        }
    }

    pub fn widths(&self) -> [usize; 4] {
        std::array::from_fn(|k| self.weights[k].shape()[0])
    }

    pub fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        (0..4)
            .flat_map(|k| {
                [
                    (format!("encoder/conv{}.weight", k + 1), &self.weights[k]),
                    (format!("encoder/conv{}.bias", k + 1), &self.biases[k]),
                ]
            })
            .collect()
    }

    /// FNV-1a over the bit patterns of every weight and bias.
    pub fn checksum(&self) -> u64 {
        let mut h = crate::checkpoint::Fnv1a::new();
        for (_, t) in self.named_tensors() {
            for v in t.data() {
                h.write(&v.to_bits().to_le_bytes());
            }
        }
        h.finish()
    }
}

/// Encoder activations for one batch.
#[derive(Clone, Copy, Debug)]
pub struct Encoding<'t> {
    /// `relu1_1 … relu4_1`.
    pub taps: [Var<'t>; 4],
    /// Bands from pooling `relu1_1`, `relu2_1`, `relu3_1`.
    pub bands: [WaveletBands<'t>; 3],
}

fn conv_block<'t>(x: Var<'t>, w: Var<'t>, b: Var<'t>) -> Result<Var<'t>> {
    let c = b.shape()[0];
    x.conv2d(w, 1, 1)?.add(b.reshape(&[1, c, 1, 1])?)
}

/// Runs an `(N, 3, H, W)` image batch through the frozen encoder.
pub fn encode<'t>(x: Var<'t>, enc: &EncoderNet) -> Result<Encoding<'t>> {
    let [_, c, h, w] = check_feature_map("encode", &x)?;
    if c != IMAGE_CHANNELS {
        return Err(Error::Geometry {
            op: "encode",
            reason: format!("expected {IMAGE_CHANNELS} image channels, got {c}"),
        });
    }
    if h % 8 != 0 || w % 8 != 0 {
        return Err(Error::Geometry {
            op: "encode",
            reason: format!("image extents {h}×{w} must be multiples of 8"),
        });
    }
    let tape = x.tape();
    let mut taps = Vec::with_capacity(4);
    let mut bands = Vec::with_capacity(3);
    let mut cur = x;
    for k in 0..4 {
        let w = tape.constant(enc.weights[k].clone());
        let b = tape.constant(enc.biases[k].clone());
        let tap = conv_block(cur, w, b)?.relu();
        taps.push(tap);
        if k < 3 {
            let pooled = wavelet_pool(tap)?;
            cur = pooled.ll;
            bands.push(pooled);
        }
    }
    Ok(Encoding {
        taps: taps.try_into().expect("four taps"),
        bands: bands.try_into().expect("three scales"),
    })
}

/// Trainable mirror of the encoder. Block 0 is the deepest (`w4 → w3`) and
/// block 3 maps `w1` back to RGB.
#[derive(Clone, Debug, PartialEq)]
pub struct DecoderNet {
    pub weights: [Tensor; 4],
    pub biases: [Tensor; 4],
}

impl DecoderNet {
    pub fn init(widths: [usize; 4], rng: &mut SplitMix64) -> Self {
        let chans = [widths[3], widths[2], widths[1], widths[0], IMAGE_CHANNELS];
        let weights = std::array::from_fn(|k| {
            let (c_in, c_out) = (chans[k], chans[k + 1]);
            let bound = 1.0 / ((c_in * 9) as f64).sqrt();
            Tensor::from_fn(&[c_out, c_in, 3, 3], |_| rng.uniform(-bound, bound))
        });
        // the linear output starts mid-range so little of it is clamped
        let biases = std::array::from_fn(|k| {
            Tensor::full(&[chans[k + 1]], if k == 3 { 0.5 } else { 0.0 })
        });
        Self { weights, biases }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct DecoderVars<'t> {
    pub weights: [Var<'t>; 4],
    pub biases: [Var<'t>; 4],
}

/// Everything the optimizer updates: decoder plus both SAFIN modules.
#[derive(Clone, Debug, PartialEq)]
pub struct Learnables {
    pub decoder: DecoderNet,
    pub safin_ll: SafinWeights,
    pub safin_hf: SafinWeights,
}

impl Learnables {
    pub fn init(widths: [usize; 4], rng: &mut SplitMix64) -> Self {
        Self {
            decoder: DecoderNet::init(widths, rng),
            safin_ll: SafinWeights::init(widths[3], rng),
            safin_hf: SafinWeights::init(widths[2], rng),
        }
    }

    pub fn names() -> Vec<String> {
        let mut names = Vec::with_capacity(22);
        for k in 1..=4 {
            names.push(format!("decoder/conv{k}.weight"));
            names.push(format!("decoder/conv{k}.bias"));
        }
        for module in ["safin_ll", "safin_hf"] {
            names.extend(SAFIN_PARAM_NAMES.iter().map(|p| format!("{module}/{p}")));
        }
        names
    }

    /// Tensors in [`Learnables::names`] order.
    pub fn tensors(&self) -> Vec<&Tensor> {
        let d = &self.decoder;
        let mut out: Vec<&Tensor> = (0..4).flat_map(|k| [&d.weights[k], &d.biases[k]]).collect();
        out.extend(self.safin_ll.tensors());
        out.extend(self.safin_hf.tensors());
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let d = &mut self.decoder;
        let mut out: Vec<&mut Tensor> = d
            .weights
            .iter_mut()
            .zip(d.biases.iter_mut())
            .flat_map(|(w, b)| [w, b])
            .collect();
        out.extend(self.safin_ll.tensors_mut());
        out.extend(self.safin_hf.tensors_mut());
        out
    }

    pub fn bind<'t>(&self, tape: &'t Tape) -> LearnableVars<'t> {
        let vars: Vec<_> = self.tensors().into_iter().map(|t| tape.param(t.clone())).collect();
        LearnableVars::from_vars(&vars)
    }

    /// Binds every tensor as a constant, for inference.
    pub fn bind_frozen<'t>(&self, tape: &'t Tape) -> LearnableVars<'t> {
        let vars: Vec<_> = self
            .tensors()
            .into_iter()
            .map(|t| tape.constant(t.clone()))
            .collect();
        LearnableVars::from_vars(&vars)
    }

    pub fn validate(&self, widths: [usize; 4]) -> Result<()> {
        let fresh = Self::init(widths, &mut SplitMix64::new(0));
        for ((name, have), want) in Self::names().iter().zip(self.tensors()).zip(fresh.tensors()) {
            if have.shape() != want.shape() {
                return Err(Error::InvalidShape {
                    shape: have.shape().to_vec(),
                    reason: format!("{name} should be {:?}", want.shape()),
                });
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug)]
pub struct LearnableVars<'t> {
    pub decoder: DecoderVars<'t>,
    pub safin_ll: SafinVars<'t>,
    pub safin_hf: SafinVars<'t>,
}

impl<'t> LearnableVars<'t> {
    pub fn from_vars(v: &[Var<'t>]) -> Self {
        assert_eq!(v.len(), 22, "decoder (8) + two SAFIN modules (7 each)");
        Self {
            decoder: DecoderVars {
                weights: std::array::from_fn(|k| v[2 * k]),
                biases: std::array::from_fn(|k| v[2 * k + 1]),
            },
            safin_ll: SafinVars::from_vars(&v[8..15]),
            safin_hf: SafinVars::from_vars(&v[15..22]),
        }
    }

    pub fn vars(&self) -> Vec<Var<'t>> {
        let d = &self.decoder;
        let mut out: Vec<Var<'t>> = (0..4).flat_map(|k| [d.weights[k], d.biases[k]]).collect();
        out.extend(self.safin_ll.vars());
        out.extend(self.safin_hf.vars());
        out
    }
}

/// Stylized image together with the encodings computed on the way.
#[derive(Clone, Copy, Debug)]
pub struct Stylized<'t> {
    pub image: Var<'t>,
    pub content: Encoding<'t>,
    pub style: Encoding<'t>,
}

/// Full stylization graph on an existing tape.
pub fn stylize<'t>(
    content: Var<'t>,
    style: Var<'t>,
    encoder: &EncoderNet,
    weights: &LearnableVars<'t>,
    cfg: &StylizationConfig,
) -> Result<Stylized<'t>> {
    let ce = encode(content, encoder)?;
    let se = encode(style, encoder)?;
    if content.shape()[0] != style.shape()[0] {
        return Err(Error::ShapeMismatch {
            op: "stylize",
            lhs: content.shape(),
            rhs: style.shape(),
        });
    }
    let eps = cfg.epsilon;
    let attn = cfg.attention_enabled;

    let deep = safin_forward(ce.taps[3], se.taps[3], &weights.safin_ll, eps, attn)?;

    let mut skips = Vec::with_capacity(3);
    for scale in 0..3 {
        let (c, s) = (ce.bands[scale], se.bands[scale]);
        let restyle = |cb: Var<'t>, sb: Var<'t>| -> Result<Var<'t>> {
            if scale == 2 {
                safin_forward(cb, sb, &weights.safin_hf, eps, attn)
            } else {
                adain(cb, sb, eps)
            }
        };
        skips.push([restyle(c.lh, s.lh)?, restyle(c.hl, s.hl)?, restyle(c.hh, s.hh)?]);
    }

    let d = &weights.decoder;
    let mut x = deep;
    for k in 0..3 {
        x = conv_block(x, d.weights[k], d.biases[k])?.relu();
        let [lh, hl, hh] = skips[2 - k];
        x = wavelet_unpool(&WaveletBands { ll: x, lh, hl, hh })?;
    }
    let image = conv_block(x, d.weights[3], d.biases[3])?.clamp(0.0, 1.0);
    Ok(Stylized {
        image,
        content: ce,
        style: se,
    })
}

/// Frozen encoder plus learnables under one configuration.
#[derive(Clone, Debug, PartialEq)]
pub struct StyleNet {
    pub config: StylizationConfig,
    pub encoder: EncoderNet,
    pub learnables: Learnables,
}

impl StyleNet {
    /// Draws the encoder, then the decoder, then SAFIN-LL and SAFIN-HF from `rng`.
    pub fn init(config: StylizationConfig, rng: &mut SplitMix64) -> Result<Self> {
        config.validate()?;
        let encoder = EncoderNet::seeded(config.widths, rng);
        let learnables = Learnables::init(config.widths, rng);
        Ok(Self {
            config,
            encoder,
            learnables,
        })
    }

    /// Inference on `(N, 3, S, S)` batches (or single `(3, S, S)` images).
    pub fn stylize(&self, content: &Tensor, style: &Tensor) -> Result<Tensor> {
        let tape = Tape::new();
        let c = tape.constant(as_batch(content)?);
        let s = tape.constant(as_batch(style)?);
        let w = self.learnables.bind_frozen(&tape);
        let out = stylize(c, s, &self.encoder, &w, &self.config)?.image.value();
        if content.rank() == 3 {
            return out.reshape(content.shape());
        }
        Ok(out.as_ref().clone())
    }
}

fn as_batch(t: &Tensor) -> Result<Tensor> {
    match t.shape() {
        [c, h, w] => t.reshape(&[1, *c, *h, *w]),
        [_, _, _, _] => Ok(t.clone()),
        s => Err(Error::InvalidShape {
            shape: s.to_vec(),
            reason: "expected an image (C, H, W) or batch (N, C, H, W)".into(),
        }),
    }
}

/// Stacks `(3, S, S)` images into an `(N, 3, S, S)` batch.
pub fn stack_images(images: &[&Tensor]) -> Result<Tensor> {
    let first = images.first().ok_or_else(|| Error::InvalidShape {
        shape: Vec::new(),
        reason: "empty batch".into(),
    })?;
    let mut shape = vec![images.len()];
    shape.extend_from_slice(first.shape());
    let mut data = Vec::with_capacity(first.len() * images.len());
    for img in images {
        if img.shape() != first.shape() {
            return Err(Error::ShapeMismatch {
                op: "stack_images",
                lhs: first.shape().to_vec(),
                rhs: img.shape().to_vec(),
            });
        }
        data.extend_from_slice(img.data());
    }
    Tensor::new(&shape, data)
}
