//! Watermark payloads, the bit extractor and the watermark loss.

mod noise;
mod pretrain;

pub use noise::{NoiseConfig, NoiseOp};
pub use pretrain::{pool_source, pretrain_codec, texture_source, CodecPretrainConfig, CodecPretrainSummary, ImageSource};

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, shape_err, Error, Result};
use crate::nn::{
    conv2d_backward_select, conv2d_forward, global_avg_pool, global_avg_pool_backward, linear_backward,
    linear_forward, sigmoid, softplus, Activation, ConvGeom, ConvWant,
};
use crate::rng::Rng;
use crate::tensor::{Fnv, Real, Tensor};

pub const SOFT_BIT_CLAMP: f64 = 1e-7;
const NORM_EPS: f64 = 1e-4;

/// An `n`-bit payload.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct WatermarkMessage {
    bits: Vec<u8>,
}

impl WatermarkMessage {
    pub fn new(bits: Vec<u8>) -> Result<Self> {
        if bits.is_empty() {
            return Err(invalid!("a payload needs at least one bit"));
        }
        if let Some(b) = bits.iter().find(|&&b| b > 1) {
            return Err(invalid!("payload bits must be 0 or 1, found {b}"));
        }
        Ok(WatermarkMessage { bits })
    }

    pub fn random(n: usize, rng: &mut Rng) -> Result<Self> {
        Self::new((0..n).map(|_| rng.bit()).collect())
    }

    /// Parses a big-endian hex string (bit 0 is the most significant bit),
    /// left-padded with zeros to `n` bits.
    pub fn from_hex(hex: &str, n: usize) -> Result<Self> {
        let hex = hex.trim().trim_start_matches("0x").trim_start_matches("0X");
        if hex.is_empty() {
            return Err(invalid!("empty hex payload"));
        }
        let mut raw = Vec::with_capacity(hex.len() * 4);
        for ch in hex.chars() {
            let v = ch.to_digit(16).ok_or_else(|| invalid!("invalid hex digit `{ch}` in payload"))?;
            raw.extend((0..4).rev().map(|i| ((v >> i) & 1) as u8));
        }
        let bits = if raw.len() >= n {
            let (extra, keep) = raw.split_at(raw.len() - n);
            if extra.iter().any(|&b| b == 1) {
                return Err(invalid!("payload 0x{hex} does not fit in {n} bits"));
            }
            keep.to_vec()
        } else {
            let mut padded = vec![0u8; n - raw.len()];
            padded.extend(raw);
            padded
        };
        Self::new(bits)
    }

    pub fn to_hex(&self) -> String {
        let pad = (4 - self.bits.len() % 4) % 4;
        let padded: Vec<u8> = std::iter::repeat_n(0, pad).chain(self.bits.iter().copied()).collect();
        padded
            .chunks(4)
            .map(|c| {
                let v = c.iter().fold(0u32, |acc, &b| (acc << 1) | b as u32);
                char::from_digit(v, 16).expect("nibble")
            })
            .collect()
    }

    pub fn len(&self) -> usize {
        self.bits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bits.is_empty()
    }

    pub fn bits(&self) -> &[u8] {
        &self.bits
    }

    /// The payload repeated `batch` times as `[batch, n]` targets.
    pub fn targets<T: Real>(&self, batch: usize) -> Tensor<T> {
        let n = self.bits.len();
        Tensor::from_fn([batch, n], |i| T::of(self.bits[i % n] as f64))
    }
}

impl fmt::Display for WatermarkMessage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.bits.iter().map(|b| char::from(b'0' + b)).collect::<String>())
    }
}

impl TryFrom<String> for WatermarkMessage {
    type Error = Error;

    /// Accepts a plain `0`/`1` string.
    fn try_from(s: String) -> Result<Self> {
        let bits = s
            .chars()
            .map(|c| match c {
                '0' => Ok(0),
                '1' => Ok(1),
                _ => Err(invalid!("payload string must contain only 0 and 1")),
            })
            .collect::<Result<Vec<u8>>>()?;
        Self::new(bits)
    }
}

impl From<WatermarkMessage> for String {
    fn from(m: WatermarkMessage) -> String {
        m.to_string()
    }
}

/// Extracted per-bit probabilities, each clamped into `(0, 1)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SoftBits(Vec<f64>);

impl SoftBits {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.iter().any(|v| !v.is_finite()) {
            return Err(invalid!("soft bits must be finite"));
        }
        Ok(SoftBits(values.into_iter().map(|v| v.clamp(SOFT_BIT_CLAMP, 1.0 - SOFT_BIT_CLAMP)).collect()))
    }

    pub fn from_logits(logits: &[f64]) -> Self {
        SoftBits(logits.iter().map(|&z| sigmoid(z).clamp(SOFT_BIT_CLAMP, 1.0 - SOFT_BIT_CLAMP)).collect())
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// Hard decision at 0.5.
    pub fn hard_bits(&self) -> Vec<u8> {
        self.0.iter().map(|&v| u8::from(v > 0.5)).collect()
    }

    pub fn matched_bits(&self, w: &WatermarkMessage) -> Result<usize> {
        check_len(self.len(), w)?;
        Ok(self.hard_bits().iter().zip(w.bits()).filter(|(a, b)| a == b).count())
    }
}

fn check_len(n: usize, w: &WatermarkMessage) -> Result<()> {
    if n != w.len() {
        return Err(shape_err!("{n} soft bits for a {}-bit payload", w.len()));
    }
    Ok(())
}

/// `-(1/n) sum [w log s + (1 - w) log(1 - s)]` and its gradient wrt `s`.
pub fn bce_loss(soft: &SoftBits, w: &WatermarkMessage) -> Result<(f64, Vec<f64>)> {
    check_len(soft.len(), w)?;
    let n = w.len() as f64;
    let mut loss = 0.0;
    let mut grad = Vec::with_capacity(soft.len());
    for (&s, &b) in soft.values().iter().zip(w.bits()) {
        let t = b as f64;
        loss -= t * s.ln() + (1.0 - t) * (1.0 - s).ln();
        grad.push(-(t / s - (1.0 - t) / (1.0 - s)) / n);
    }
    Ok((loss / n, grad))
}

/// Mean BCE over all entries of `[N, n]` logits against targets in `[0, 1]`,
/// and its gradient wrt the logits.
pub fn bce_with_logits<T: Real>(logits: &Tensor<T>, targets: &Tensor<T>) -> Result<(f64, Tensor<T>)> {
    targets.ensure_shape(logits.shape(), "BCE targets")?;
    let count = logits.len() as f64;
    let mut loss = 0.0;
    for (&z, &t) in logits.data().iter().zip(targets.data()) {
        let (z, t) = (z.f64(), t.f64());
        loss += softplus(z) - t * z;
    }
    let inv = T::of(1.0 / count);
    let grad = logits.zip_map(targets, |z, t| (sigmoid(z) - t) * inv)?;
    Ok((loss / count, grad))
}

pub fn bit_accuracy(soft: &SoftBits, w: &WatermarkMessage) -> Result<f64> {
    Ok(soft.matched_bits(w)? as f64 / w.len() as f64)
}

/// Bit accuracy of each row of `[N, n]` logits (hard decision at 0).
pub fn batch_bit_accuracy<T: Real>(logits: &Tensor<T>, w: &WatermarkMessage) -> Result<Vec<f64>> {
    let [_, n] = logits.dims2()?;
    check_len(n, w)?;
    Ok(logits
        .data()
        .chunks(n)
        .map(|row| {
            row.iter().zip(w.bits()).filter(|(z, b)| u8::from(z.f64() > 0.0) == **b).count() as f64 / n as f64
        })
        .collect())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CodecKind {
    /// Stride-2 conv stack, global average pool, affine head.
    Conv,
    /// Seeded affine map of the standardized image; needs no training.
    Projection,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CodecConfig {
    pub n_bits: usize,
    pub kind: CodecKind,
    pub channels: Vec<usize>,
    pub image_size: usize,
}

impl Default for CodecConfig {
    fn default() -> Self {
        CodecConfig { n_bits: 16, kind: CodecKind::Conv, channels: vec![16, 24, 32], image_size: 32 }
    }
}

/// The bit extractor. Every input plane is standardized (zero mean, unit
/// variance) before the network sees it.
#[derive(Clone, Debug, PartialEq)]
pub struct WatermarkDecoder<T = f32> {
    pub config: CodecConfig,
    /// `(kernel, bias)` per stride-2 convolution.
    pub convs: Vec<(Tensor<T>, Tensor<T>)>,
    pub head_weight: Tensor<T>,
    pub head_bias: Tensor<T>,
    frozen: bool,
}

#[derive(Clone, Debug)]
pub struct CodecCache<T> {
    input_shape: Vec<usize>,
    normalized: Tensor<T>,
    inv_std: Vec<f64>,
    conv_inputs: Vec<Tensor<T>>,
    pre: Vec<Tensor<T>>,
    post: Vec<Tensor<T>>,
    features: Tensor<T>,
}

/// Gradients of a codec forward pass.
pub struct CodecGrads<T> {
    pub input: Option<Tensor<T>>,
    /// Same order as [`WatermarkDecoder::params`].
    pub params: Option<Vec<Tensor<T>>>,
}

fn conv_geom() -> ConvGeom {
    ConvGeom::new(2, 1)
}

/// Per-plane standardization; returns the output and `1 / std` per plane.
fn standardize<T: Real>(x: &Tensor<T>) -> Result<(Tensor<T>, Vec<f64>)> {
    let [_, _, h, w] = x.dims4()?;
    let area = h * w;
    let mut out = Vec::with_capacity(x.len());
    let mut inv = Vec::with_capacity(x.len() / area);
    for plane in x.data().chunks(area) {
        let mean = plane.iter().map(|v| v.f64()).sum::<f64>() / area as f64;
        let var = plane.iter().map(|v| (v.f64() - mean).powi(2)).sum::<f64>() / area as f64;
        let is = 1.0 / (var + NORM_EPS).sqrt();
        out.extend(plane.iter().map(|v| T::of((v.f64() - mean) * is)));
        inv.push(is);
    }
    Ok((Tensor::new(x.shape().to_vec(), out)?, inv))
}

fn standardize_backward<T: Real>(grad: &Tensor<T>, y: &Tensor<T>, inv_std: &[f64]) -> Result<Tensor<T>> {
    grad.ensure_shape(y.shape(), "standardize gradient")?;
    let area = y.len() / inv_std.len();
    let mut out = Vec::with_capacity(y.len());
    for ((g, yv), &is) in grad.data().chunks(area).zip(y.data().chunks(area)).zip(inv_std) {
        let gm = g.iter().map(|v| v.f64()).sum::<f64>() / area as f64;
        let gy = g.iter().zip(yv).map(|(a, b)| a.f64() * b.f64()).sum::<f64>() / area as f64;
        out.extend(g.iter().zip(yv).map(|(a, b)| T::of(is * (a.f64() - gm - b.f64() * gy))));
    }
    Tensor::new(y.shape().to_vec(), out)
}

impl<T: Real> WatermarkDecoder<T> {
    pub fn new(config: CodecConfig, rng: &mut Rng) -> Result<Self> {
        if config.n_bits == 0 {
            return Err(invalid!("codec needs n_bits >= 1"));
        }
        if config.image_size == 0 {
            return Err(invalid!("codec image size must be positive"));
        }
        let gain = (2.0f64 / 1.04).sqrt();
        let (convs, features) = match config.kind {
            CodecKind::Conv => {
                if config.channels.is_empty() {
                    return Err(invalid!("conv codec needs at least one layer"));
                }
                let mut cin = 3;
                let mut convs = Vec::new();
                for &cout in &config.channels {
                    let std = gain / ((cin * 9) as f64).sqrt();
                    convs.push((rng.normal_tensor([cout, cin, 3, 3], std), Tensor::zeros([cout])));
                    cin = cout;
                }
                (convs, cin)
            }
            CodecKind::Projection => (Vec::new(), 3 * config.image_size * config.image_size),
        };
        let head_std = match config.kind {
            CodecKind::Conv => 1.0 / (features as f64).sqrt(),
            CodecKind::Projection => 4.0 / (features as f64).sqrt(),
        };
        let head_weight = rng.normal_tensor([config.n_bits, features], head_std);
        let head_bias = Tensor::zeros([config.n_bits]);
        Ok(WatermarkDecoder { config, convs, head_weight, head_bias, frozen: false })
    }

    /// Rebuilds a decoder from stored weights.
    pub fn from_parts(
        config: CodecConfig,
        convs: Vec<(Tensor<T>, Tensor<T>)>,
        head_weight: Tensor<T>,
        head_bias: Tensor<T>,
        frozen: bool,
    ) -> Result<Self> {
        let mut reference = WatermarkDecoder::<T>::new(config.clone(), &mut Rng::new(0))?;
        if reference.convs.len() != convs.len() {
            return Err(shape_err!("expected {} codec convolutions, got {}", reference.convs.len(), convs.len()));
        }
        for ((rk, rb), (k, b)) in reference.convs.iter().zip(&convs) {
            k.ensure_shape(rk.shape(), "codec kernel")?;
            b.ensure_shape(rb.shape(), "codec bias")?;
        }
        head_weight.ensure_shape(reference.head_weight.shape(), "codec head weight")?;
        head_bias.ensure_shape(reference.head_bias.shape(), "codec head bias")?;
        reference.convs = convs;
        reference.head_weight = head_weight;
        reference.head_bias = head_bias;
        reference.frozen = frozen;
        Ok(reference)
    }

    pub fn n_bits(&self) -> usize {
        self.config.n_bits
    }

    pub fn freeze(&mut self) {
        self.frozen = true;
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    pub fn param_count(&self) -> usize {
        self.params().iter().map(|t| t.len()).sum()
    }

    pub fn params(&self) -> Vec<&Tensor<T>> {
        let mut out: Vec<&Tensor<T>> = self.convs.iter().flat_map(|(k, b)| [k, b]).collect();
        out.push(&self.head_weight);
        out.push(&self.head_bias);
        out
    }

    /// Mutable access for training; refused once frozen.
    pub fn params_mut(&mut self) -> Result<Vec<&mut Tensor<T>>> {
        if self.frozen {
            return Err(invalid!("codec weights are frozen"));
        }
        let mut out: Vec<&mut Tensor<T>> = self.convs.iter_mut().flat_map(|(k, b)| [k, b]).collect();
        out.push(&mut self.head_weight);
        out.push(&mut self.head_bias);
        Ok(out)
    }

    pub fn fingerprint(&self) -> u64 {
        let mut h = Fnv::default();
        for p in self.params() {
            h.write_u64(p.fingerprint());
        }
        h.finish()
    }

    pub fn cast<U: Real>(&self) -> WatermarkDecoder<U> {
        WatermarkDecoder {
            config: self.config.clone(),
            convs: self.convs.iter().map(|(k, b)| (k.cast(), b.cast())).collect(),
            head_weight: self.head_weight.cast(),
            head_bias: self.head_bias.cast(),
            frozen: self.frozen,
        }
    }

    fn check_images(&self, images: &Tensor<T>) -> Result<()> {
        let [n, c, h, w] = images.dims4()?;
        if c != 3 || n == 0 {
            return Err(shape_err!("codec expects [N>0, 3, H, W] images, got {:?}", images.shape()));
        }
        if self.config.kind == CodecKind::Projection && (h, w) != (self.config.image_size, self.config.image_size) {
            return Err(shape_err!("projection codec expects {0}x{0} images, got {h}x{w}", self.config.image_size));
        }
        if h < 2 || w < 2 {
            return Err(shape_err!("images too small for the codec: {h}x{w}"));
        }
        Ok(())
    }

    /// `[N, n]` logits with their forward cache.
    pub fn logits_cached(&self, images: &Tensor<T>) -> Result<(Tensor<T>, CodecCache<T>)> {
        self.check_images(images)?;
        let (normalized, inv_std) = standardize(images)?;
        let mut conv_inputs = Vec::new();
        let mut pre = Vec::new();
        let mut post = Vec::new();
        let mut h = normalized.clone();
        for (k, b) in &self.convs {
            let p = conv2d_forward(&h, k, Some(b), conv_geom())?;
            let a = Activation::LeakyRelu.forward(&p);
            conv_inputs.push(std::mem::replace(&mut h, a.clone()));
            pre.push(p);
            post.push(a);
        }
        let features = match self.config.kind {
            CodecKind::Conv => global_avg_pool(&h)?,
            CodecKind::Projection => {
                let n = h.shape()[0];
                let per = h.len() / n;
                h.reshape([n, per])?
            }
        };
        let logits = linear_forward(&features, &self.head_weight, &self.head_bias)?;
        let cache = CodecCache { input_shape: images.shape().to_vec(), normalized, inv_std, conv_inputs, pre, post, features };
        Ok((logits, cache))
    }

    pub fn logits(&self, images: &Tensor<T>) -> Result<Tensor<T>> {
        Ok(self.logits_cached(images)?.0)
    }

    /// `w~ = D(x)` for every image of the batch.
    pub fn extract(&self, images: &Tensor<T>) -> Result<Vec<SoftBits>> {
        let logits = self.logits(images)?;
        let n = self.n_bits();
        Ok(logits
            .data()
            .chunks(n)
            .map(|row| SoftBits::from_logits(&row.iter().map(|v| v.f64()).collect::<Vec<_>>()))
            .collect())
    }

    /// Backpropagates `grad_logits`; parameter gradients only when
    /// `want_params` (and never for a frozen codec).
    pub fn backward(
        &self,
        grad_logits: &Tensor<T>,
        cache: &CodecCache<T>,
        want_input: bool,
        want_params: bool,
    ) -> Result<CodecGrads<T>> {
        if want_params && self.frozen {
            return Err(invalid!("codec weights are frozen"));
        }
        let lin = linear_backward(grad_logits, &cache.features, &self.head_weight)?;
        let mut param_grads = Vec::new();
        let mut g = match self.config.kind {
            CodecKind::Conv => {
                let last = cache.post.last().expect("conv codec has layers");
                global_avg_pool_backward(&lin.input, last.shape())?
            }
            CodecKind::Projection => lin.input.reshape(cache.normalized.shape().to_vec())?,
        };
        let need_chain = want_input || (want_params && !self.convs.is_empty());
        if need_chain {
            for i in (0..self.convs.len()).rev() {
                g = Activation::LeakyRelu.backward(&g, &cache.pre[i], &cache.post[i])?;
                let want = ConvWant { input: want_input || i > 0, kernel: want_params, bias: want_params };
                let r = conv2d_backward_select(&g, &cache.conv_inputs[i], &self.convs[i].0, conv_geom(), want)?;
                if want_params {
                    param_grads.push(r.bias.expect("requested"));
                    param_grads.push(r.kernel.expect("requested"));
                }
                if let Some(gi) = r.input {
                    g = gi;
                }
            }
        }
        let input = if want_input {
            let gi = standardize_backward(&g, &cache.normalized, &cache.inv_std)?;
            gi.ensure_shape(&cache.input_shape, "codec input gradient")?;
            Some(gi)
        } else {
            None
        };
        let params = want_params.then(|| {
            param_grads.reverse();
            param_grads.push(lin.weight);
            param_grads.push(lin.bias);
            param_grads
        });
        Ok(CodecGrads { input, params })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{finite_difference_grad, relative_error};
    use proptest::prelude::*;
    use crate::rng::Rng;

    #[test]
    fn hex_round_trip_and_padding() {
        let m = WatermarkMessage::from_hex("a5", 16).unwrap();
        assert_eq!(m.to_string(), "0000000010100101");
        assert_eq!(m.to_hex(), "00a5");
        let m = WatermarkMessage::from_hex("0xF", 4).unwrap();
        assert_eq!(m.bits(), &[1, 1, 1, 1]);
        assert_eq!(WatermarkMessage::from_hex("8", 1).unwrap_err().to_string().contains("fit"), true);
        assert!(WatermarkMessage::from_hex("zz", 8).is_err());
        assert_eq!(WatermarkMessage::from_hex("01", 1).unwrap().bits(), &[1]);
        let m = WatermarkMessage::from_hex("1", 5).unwrap();
        assert_eq!(m.to_hex(), "01");
        assert!(WatermarkMessage::new(vec![]).is_err());
        assert!(WatermarkMessage::new(vec![0, 2]).is_err());
    }

    #[test]
    fn message_serializes_as_bit_string() {
        let m = WatermarkMessage::new(vec![1, 0, 1]).unwrap();
        let s = serde_json::to_string(&m).unwrap();
        assert_eq!(s, "\"101\"");
        assert_eq!(serde_json::from_str::<WatermarkMessage>(&s).unwrap(), m);
    }

    #[test]
    fn bce_of_half_is_ln2() {
        let w = WatermarkMessage::new(vec![1, 0, 1, 1]).unwrap();
        let (l, _) = bce_loss(&SoftBits::new(vec![0.5; 4]).unwrap(), &w).unwrap();
        assert!((l - std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn bce_at_clamp_boundary_is_near_zero() {
        let w = WatermarkMessage::new(vec![1, 0]).unwrap();
        let (l, _) = bce_loss(&SoftBits::new(vec![1.0, 0.0]).unwrap(), &w).unwrap();
        assert!(l < 1e-6 && l >= 0.0);
    }

    #[test]
    fn bce_matches_direct_sum_and_finite_differences() {
        let mut rng = Rng::new(3);
        let w = WatermarkMessage::random(12, &mut rng).unwrap();
        let vals: Vec<f64> = (0..12).map(|_| rng.uniform_range(0.05, 0.95)).collect();
        let soft = SoftBits::new(vals.clone()).unwrap();
        let (l, g) = bce_loss(&soft, &w).unwrap();
        let mut direct = 0.0;
        for j in 0..12 {
            let t = w.bits()[j] as f64;
            direct += -(t * vals[j].ln()) - (1.0 - t) * (1.0 - vals[j]).ln();
        }
        assert!((l - direct / 12.0).abs() <= 1e-6);
        let x = Tensor::new([12], vals).unwrap();
        let fd = finite_difference_grad(|t| bce_loss(&SoftBits::new(t.data().to_vec()).unwrap(), &w).unwrap().0, &x, 1e-6);
        assert!(relative_error(&Tensor::new([12], g).unwrap(), &fd) <= 1e-4);
    }

    #[test]
    fn logit_form_agrees_with_probability_form() {
        let mut rng = Rng::new(4);
        let w = WatermarkMessage::random(8, &mut rng).unwrap();
        let z: Tensor<f64> = rng.normal_tensor([1, 8], 2.0);
        let (a, _) = bce_with_logits(&z, &w.targets(1)).unwrap();
        let (b, _) = bce_loss(&SoftBits::from_logits(z.data()), &w).unwrap();
        assert!((a - b).abs() < 1e-9);
    }

    #[test]
    fn bce_length_mismatch() {
        let w = WatermarkMessage::new(vec![1, 0]).unwrap();
        assert!(bce_loss(&SoftBits::new(vec![0.5; 3]).unwrap(), &w).is_err());
        assert!(bit_accuracy(&SoftBits::new(vec![0.5; 3]).unwrap(), &w).is_err());
    }

    #[test]
    fn accuracy_cases() {
        let w = WatermarkMessage::new(vec![1, 0, 1, 0]).unwrap();
        let acc = |v: Vec<f64>| bit_accuracy(&SoftBits::new(v).unwrap(), &w).unwrap();
        assert_eq!(acc(vec![0.9, 0.1, 0.8, 0.2]), 1.0);
        assert_eq!(acc(vec![0.1, 0.9, 0.2, 0.8]), 0.0);
        assert_eq!(acc(vec![0.9, 0.9, 0.1, 0.1]), 0.5);
    }

    #[test]
    fn extraction_is_deterministic_and_has_n_bits() {
        let mut rng = Rng::new(5);
        let codec = WatermarkDecoder::<f32>::new(CodecConfig::default(), &mut rng).unwrap();
        let img: Tensor<f32> = rng.uniform_tensor([3, 3, 32, 32], 0.0, 1.0);
        let a = codec.extract(&img).unwrap();
        assert_eq!(a, codec.extract(&img).unwrap());
        assert!(a.iter().all(|s| s.len() == 16 && s.values().iter().all(|&v| v > 0.0 && v < 1.0)));
        assert!(codec.extract(&Tensor::zeros([1, 1, 32, 32])).is_err());
    }

    #[test]
    fn frozen_codec_refuses_updates() {
        let mut codec = WatermarkDecoder::<f32>::new(CodecConfig::default(), &mut Rng::new(6)).unwrap();
        assert!(codec.params_mut().is_ok());
        codec.freeze();
        assert!(codec.params_mut().is_err());
    }

    #[test]
    fn backward_matches_finite_differences() {
        for kind in [CodecKind::Conv, CodecKind::Projection] {
            let mut rng = Rng::new(7);
            let cfg = CodecConfig { n_bits: 5, kind, channels: vec![3, 4], image_size: 8 };
            let codec = WatermarkDecoder::<f64>::new(cfg, &mut rng).unwrap();
            let img: Tensor<f64> = rng.uniform_tensor([2, 3, 8, 8], 0.0, 1.0);
            let w = WatermarkMessage::random(5, &mut rng).unwrap();
            let targets = w.targets(2);
            let loss = |c: &WatermarkDecoder<f64>, x: &Tensor<f64>| bce_with_logits(&c.logits(x).unwrap(), &targets).unwrap().0;
            let (z, cache) = codec.logits_cached(&img).unwrap();
            let (_, gz) = bce_with_logits(&z, &targets).unwrap();
            let grads = codec.backward(&gz, &cache, true, true).unwrap();
            let fd = finite_difference_grad(|x| loss(&codec, x), &img, 1e-6);
            assert!(relative_error(grads.input.as_ref().unwrap(), &fd) <= 1e-4, "{kind:?} input");
            let pg = grads.params.unwrap();
            for (i, p) in codec.params().into_iter().enumerate() {
                let fd = finite_difference_grad(
                    |t| {
                        let mut c = codec.clone();
                        *c.params_mut().unwrap()[i] = t.clone();
                        loss(&c, &img)
                    },
                    p,
                    1e-6,
                );
                assert!(relative_error(&pg[i], &fd) <= 1e-4, "{kind:?} param {i}");
            }
        }
    }

    #[test]
    fn standardization_removes_affine_brightness() {
        let mut rng = Rng::new(8);
        let codec = WatermarkDecoder::<f64>::new(CodecConfig::default(), &mut rng).unwrap();
        let img: Tensor<f64> = rng.uniform_tensor([1, 3, 32, 32], 0.2, 0.6);
        let brighter = img.map(|v| 1.5 * v);
        let a = codec.logits(&img).unwrap();
        let b = codec.logits(&brighter).unwrap();
        assert!(a.max_abs_diff(&b).unwrap() < 1e-2);
    }

    proptest! {
        #[test]
        fn bce_non_negative(vals in proptest::collection::vec(0.0f64..=1.0, 1..20), seed in any::<u64>()) {
            let w = WatermarkMessage::random(vals.len(), &mut Rng::new(seed)).unwrap();
            let (l, _) = bce_loss(&SoftBits::new(vals).unwrap(), &w).unwrap();
            prop_assert!(l >= 0.0);
        }

        #[test]
        fn hex_round_trip(bits in proptest::collection::vec(0u8..=1, 1..64)) {
            let m = WatermarkMessage::new(bits.clone()).unwrap();
            prop_assert_eq!(WatermarkMessage::from_hex(&m.to_hex(), bits.len()).unwrap(), m);
        }
    }
}
