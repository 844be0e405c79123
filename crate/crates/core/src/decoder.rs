//! The toy latent-to-image decoder and its adapter injection points.
//!
//! Layout (defaults): `input.conv` (1x1, 4 -> 256) at 8x8, a low-resolution
//! mid block `mid.conv.0` (256 -> 256) and `mid.conv.1` (256 -> 32), then two
//! upsample blocks (nearest x2 followed by `upsampler.conv.{0,1}`, 32 -> 32),
//! and `output.conv` (32 -> 3) with a sigmoid. Leaky-ReLU (0.2) between
//! blocks. Setting `mid_width = 0` drops the mid block.

use std::collections::HashSet;

use serde::{Deserialize, Serialize};

use crate::data::texture_images;
use crate::error::{invalid, shape_err, Error, Result};
use crate::lora::{kernel_as_matrix, lora_init, matrix_as_kernel, FactorGrads, LoraAdapter, LoraSpec};
use crate::metrics::batch_psnr;
use crate::nn::{
    conv2d_backward_select, conv2d_forward, upsample_nearest, upsample_nearest_backward, Activation, ConvGeom,
    ConvWant,
};
use crate::optim::{Optimizer, OptimizerKind};
use crate::rng::Rng;
use crate::tensor::{Fnv, Real, Tensor};

pub const UPSAMPLER_PREFIX: &str = "upsampler.conv.";

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DecoderConfig {
    pub latent_channels: usize,
    pub latent_size: usize,
    pub mid_width: usize,
    pub hidden: usize,
    pub kernel: usize,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        DecoderConfig { latent_channels: 4, latent_size: 8, mid_width: 256, hidden: 32, kernel: 3 }
    }
}

impl DecoderConfig {
    pub fn image_size(&self) -> usize {
        self.latent_size * 4
    }

    pub fn validate(&self) -> Result<()> {
        if self.latent_channels == 0 || self.latent_size == 0 || self.hidden == 0 {
            return Err(invalid!("decoder dimensions must be positive: {self:?}"));
        }
        if self.kernel % 2 == 0 {
            return Err(invalid!("kernel size must be odd, got {}", self.kernel));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Stage<T> {
    pub id: String,
    /// Nearest-neighbour factor applied before the convolution (1 = none).
    pub upsample: usize,
    pub kernel: Tensor<T>,
    pub bias: Tensor<T>,
    pub act: Activation,
}

impl<T: Real> Stage<T> {
    fn geom(&self) -> ConvGeom {
        ConvGeom::new(1, self.kernel.shape()[2] / 2)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct InjectionPoint {
    pub id: String,
    pub d: usize,
    pub k: usize,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct InjectionSpec {
    pub targets: Vec<String>,
}

impl InjectionSpec {
    pub fn new<S: Into<String>>(targets: impl IntoIterator<Item = S>) -> Self {
        InjectionSpec { targets: targets.into_iter().map(Into::into).collect() }
    }

    /// All upsampler convolutions of `decoder`.
    pub fn upsamplers<T: Real>(decoder: &ToyDecoder<T>) -> Self {
        Self::new(decoder.stages.iter().filter(|s| s.id.starts_with(UPSAMPLER_PREFIX)).map(|s| s.id.clone()))
    }

    pub fn validate<T: Real>(&self, decoder: &ToyDecoder<T>) -> Result<()> {
        if self.targets.is_empty() {
            return Err(invalid!("injection spec names no targets"));
        }
        let mut seen = HashSet::new();
        for t in &self.targets {
            decoder.stage_index(t).ok_or_else(|| Error::UnknownTarget(t.clone()))?;
            if !seen.insert(t.as_str()) {
                return Err(Error::DuplicateTarget(t.clone()));
            }
        }
        Ok(())
    }
}

/// Adapters attached to a decoder, kept in decoder stage order.
#[derive(Clone, Debug, PartialEq)]
pub struct AdapterSet<T = f32> {
    pub adapters: Vec<LoraAdapter<T>>,
}

/// Gradients for each adapter of an [`AdapterSet`], same order.
pub type AdapterGrads<T> = Vec<FactorGrads<T>>;

impl<T: Real> AdapterSet<T> {
    pub fn new(adapters: Vec<LoraAdapter<T>>) -> Self {
        AdapterSet { adapters }
    }

    pub fn len(&self) -> usize {
        self.adapters.len()
    }

    pub fn is_empty(&self) -> bool {
        self.adapters.is_empty()
    }

    pub fn get(&self, id: &str) -> Option<&LoraAdapter<T>> {
        self.adapters.iter().find(|a| a.target_id == id)
    }

    pub fn param_count(&self) -> usize {
        self.adapters.iter().map(LoraAdapter::param_count).sum()
    }

    pub fn fingerprint(&self) -> u64 {
        let mut h = Fnv::default();
        for a in &self.adapters {
            h.write_u64(a.fingerprint());
        }
        h.finish()
    }

    pub fn factors_mut(&mut self) -> Vec<&mut Tensor<T>> {
        self.adapters.iter_mut().flat_map(|a| a.factors_mut()).collect()
    }

    pub fn cast<U: Real>(&self) -> AdapterSet<U> {
        AdapterSet { adapters: self.adapters.iter().map(LoraAdapter::cast).collect() }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ToyDecoder<T = f32> {
    pub config: DecoderConfig,
    pub stages: Vec<Stage<T>>,
}

/// Activations kept by a cached forward pass.
#[derive(Clone, Debug)]
pub struct DecodeCache<T> {
    start: usize,
    /// Per stage from `start`: conv input (after upsampling).
    inputs: Vec<Tensor<T>>,
    pre: Vec<Tensor<T>>,
    post: Vec<Tensor<T>>,
    /// Effective kernels of adapted stages (`None` where the base is used).
    effective: Vec<Option<Tensor<T>>>,
    adapter_fingerprint: u64,
}

impl<T: Real> DecodeCache<T> {
    pub fn output(&self) -> &Tensor<T> {
        self.post.last().expect("at least one stage")
    }
}

impl<T: Real> ToyDecoder<T> {
    /// Randomly initialized decoder (He-normal for leaky stages).
    pub fn new(config: DecoderConfig, rng: &mut Rng) -> Result<Self> {
        config.validate()?;
        let k = config.kernel;
        let mut layout: Vec<(String, usize, usize, usize, usize, Activation)> = Vec::new();
        let first_out = if config.mid_width > 0 { config.mid_width } else { config.hidden };
        layout.push(("input.conv".into(), 1, config.latent_channels, first_out, 1, Activation::LeakyRelu));
        if config.mid_width > 0 {
            layout.push(("mid.conv.0".into(), 1, config.mid_width, config.mid_width, k, Activation::LeakyRelu));
            layout.push(("mid.conv.1".into(), 1, config.mid_width, config.hidden, k, Activation::LeakyRelu));
        }
        for i in 0..2 {
            layout.push((format!("{UPSAMPLER_PREFIX}{i}"), 2, config.hidden, config.hidden, k, Activation::LeakyRelu));
        }
        layout.push(("output.conv".into(), 1, config.hidden, 3, k, Activation::Sigmoid));

        let stages = layout
            .into_iter()
            .map(|(id, upsample, cin, cout, ks, act)| {
                let fan_in = (cin * ks * ks) as f64;
                let gain = match act {
                    Activation::LeakyRelu => (2.0f64 / (1.0 + 0.04)).sqrt(),
                    _ => 1.0,
                };
                Stage {
                    id,
                    upsample,
                    kernel: rng.normal_tensor([cout, cin, ks, ks], gain / fan_in.sqrt()),
                    bias: Tensor::zeros([cout]),
                    act,
                }
            })
            .collect();
        Ok(ToyDecoder { config, stages })
    }

    pub fn stage_index(&self, id: &str) -> Option<usize> {
        self.stages.iter().position(|s| s.id == id)
    }

    pub fn latent_shape(&self, batch: usize) -> [usize; 4] {
        [batch, self.config.latent_channels, self.config.latent_size, self.config.latent_size]
    }

    pub fn image_shape(&self, batch: usize) -> [usize; 4] {
        let s = self.config.image_size();
        [batch, 3, s, s]
    }

    /// Every convolution with its `d x k` adapter view, in forward order.
    pub fn list_injection_points(&self) -> Vec<InjectionPoint> {
        self.stages
            .iter()
            .map(|s| {
                let sh = s.kernel.shape();
                InjectionPoint { id: s.id.clone(), d: sh[0], k: sh[1] * sh[2] * sh[3] }
            })
            .collect()
    }

    pub fn param_count(&self) -> usize {
        self.stages.iter().map(|s| s.kernel.len() + s.bias.len()).sum()
    }

    pub fn fingerprint(&self) -> u64 {
        let mut h = Fnv::default();
        for s in &self.stages {
            h.write_bytes(s.id.as_bytes());
            h.write_u64(s.kernel.fingerprint());
            h.write_u64(s.bias.fingerprint());
        }
        h.finish()
    }

    pub fn cast<U: Real>(&self) -> ToyDecoder<U> {
        ToyDecoder {
            config: self.config.clone(),
            stages: self
                .stages
                .iter()
                .map(|s| Stage {
                    id: s.id.clone(),
                    upsample: s.upsample,
                    kernel: s.kernel.cast(),
                    bias: s.bias.cast(),
                    act: s.act,
                })
                .collect(),
        }
    }

    /// Creates one freshly initialized adapter per target.
    pub fn attach(&self, injection: &InjectionSpec, spec: LoraSpec, rng: &mut Rng) -> Result<AdapterSet<T>> {
        injection.validate(self)?;
        let mut adapters = Vec::new();
        for stage in &self.stages {
            if injection.targets.contains(&stage.id) {
                let base = kernel_as_matrix(&stage.kernel)?;
                adapters.push(lora_init(&stage.id, &base, spec, rng)?);
            }
        }
        Ok(AdapterSet::new(adapters))
    }

    /// Maps each stage to its adapter, checking ids, duplicates and shapes.
    fn bind<'a>(&self, adapters: Option<&'a AdapterSet<T>>) -> Result<Vec<Option<&'a LoraAdapter<T>>>> {
        let mut bound = vec![None; self.stages.len()];
        if let Some(set) = adapters {
            for a in &set.adapters {
                let idx = self.stage_index(&a.target_id).ok_or_else(|| Error::UnknownTarget(a.target_id.clone()))?;
                if bound[idx].is_some() {
                    return Err(Error::DuplicateTarget(a.target_id.clone()));
                }
                a.validate()?;
                let sh = self.stages[idx].kernel.shape();
                let (d, k) = (sh[0], sh[1] * sh[2] * sh[3]);
                if (a.d(), a.k()) != (d, k) {
                    return Err(shape_err!(
                        "adapter for `{}` is {}x{}, weight view is {d}x{k}",
                        a.target_id,
                        a.d(),
                        a.k()
                    ));
                }
                bound[idx] = Some(a);
            }
        }
        Ok(bound)
    }

    fn effective_kernel(&self, idx: usize, adapter: &LoraAdapter<T>) -> Result<Tensor<T>> {
        let stage = &self.stages[idx];
        let merged = adapter.merge(&kernel_as_matrix(&stage.kernel)?)?;
        matrix_as_kernel(merged, stage.kernel.shape())
    }

    fn check_latent(&self, z: &Tensor<T>) -> Result<()> {
        let [n, ..] = z.dims4()?;
        z.ensure_shape(&self.latent_shape(n), "latent")
    }

    /// Runs stages `[start, end)` on `h` without caching.
    pub fn forward_range(
        &self,
        start: usize,
        end: usize,
        mut h: Tensor<T>,
        adapters: Option<&AdapterSet<T>>,
    ) -> Result<Tensor<T>> {
        let bound = self.bind(adapters)?;
        for idx in start..end {
            let stage = &self.stages[idx];
            let x = upsample_nearest(&h, stage.upsample)?;
            let pre = match bound[idx] {
                Some(a) => conv2d_forward(&x, &self.effective_kernel(idx, a)?, Some(&stage.bias), stage.geom())?,
                None => conv2d_forward(&x, &stage.kernel, Some(&stage.bias), stage.geom())?,
            };
            h = stage.act.forward(&pre);
        }
        Ok(h)
    }

    /// `x = D(z; theta + delta)`; clean output when `adapters` is `None`.
    pub fn decode(&self, z: &Tensor<T>, adapters: Option<&AdapterSet<T>>) -> Result<Tensor<T>> {
        self.check_latent(z)?;
        self.forward_range(0, self.stages.len(), z.clone(), adapters)
    }

    /// Index of the earliest adapted stage, if any.
    pub fn first_adapted(&self, adapters: &AdapterSet<T>) -> Result<Option<usize>> {
        Ok(self.bind(Some(adapters))?.iter().position(Option::is_some))
    }

    /// Cached forward over stages `[start, len)`, where `h` is the input of
    /// stage `start` (the latent when `start == 0`).
    pub fn forward_cached_from(
        &self,
        start: usize,
        h: &Tensor<T>,
        adapters: Option<&AdapterSet<T>>,
    ) -> Result<(Tensor<T>, DecodeCache<T>)> {
        if start >= self.stages.len() {
            return Err(invalid!("start stage {start} out of range"));
        }
        let bound = self.bind(adapters)?;
        let mut cache = DecodeCache {
            start,
            inputs: Vec::new(),
            pre: Vec::new(),
            post: Vec::new(),
            effective: Vec::new(),
            adapter_fingerprint: adapters.map_or_else(|| AdapterSet::<T>::new(Vec::new()).fingerprint(), AdapterSet::fingerprint),
        };
        let mut cur = h.clone();
        for idx in start..self.stages.len() {
            let stage = &self.stages[idx];
            let x = upsample_nearest(&cur, stage.upsample)?;
            let eff = bound[idx].map(|a| self.effective_kernel(idx, a)).transpose()?;
            let pre = conv2d_forward(&x, eff.as_ref().unwrap_or(&stage.kernel), Some(&stage.bias), stage.geom())?;
            cur = stage.act.forward(&pre);
            cache.inputs.push(x);
            cache.pre.push(pre);
            cache.post.push(cur.clone());
            cache.effective.push(eff);
        }
        Ok((cur, cache))
    }

    pub fn decode_with_cache(
        &self,
        z: &Tensor<T>,
        adapters: Option<&AdapterSet<T>>,
    ) -> Result<(Tensor<T>, DecodeCache<T>)> {
        self.check_latent(z)?;
        self.forward_cached_from(0, z, adapters)
    }

    /// Gradients of the loss wrt the adapter factors only; base weights are
    /// never differentiated. Backpropagation stops at the earliest adapted
    /// stage.
    pub fn decode_backward(
        &self,
        grad_image: &Tensor<T>,
        cache: &DecodeCache<T>,
        adapters: &AdapterSet<T>,
    ) -> Result<AdapterGrads<T>> {
        if cache.adapter_fingerprint != adapters.fingerprint() {
            return Err(Error::StaleCache("adapters changed since the forward pass".into()));
        }
        if cache.inputs.len() != self.stages.len() - cache.start {
            return Err(Error::StaleCache("cache does not match this decoder".into()));
        }
        grad_image.ensure_shape(cache.output().shape(), "image gradient")?;
        let bound = self.bind(Some(adapters))?;
        let Some(first) = bound.iter().position(Option::is_some) else {
            return Ok(Vec::new());
        };
        if first < cache.start {
            return Err(Error::StaleCache(format!(
                "adapted stage {first} precedes the cached range starting at {}",
                cache.start
            )));
        }
        let mut out: Vec<Option<FactorGrads<T>>> = vec![None; self.stages.len()];
        let mut g = grad_image.clone();
        for idx in (first..self.stages.len()).rev() {
            let c = idx - cache.start;
            let stage = &self.stages[idx];
            if cache.effective[c].is_some() != bound[idx].is_some() {
                return Err(Error::StaleCache(format!("adapter placement changed at `{}`", stage.id)));
            }
            g = stage.act.backward(&g, &cache.pre[c], &cache.post[c])?;
            let kernel = cache.effective[c].as_ref().unwrap_or(&stage.kernel);
            let want = ConvWant { input: idx > first, kernel: bound[idx].is_some(), bias: false };
            let grads = conv2d_backward_select(&g, &cache.inputs[c], kernel, stage.geom(), want)?;
            if let (Some(adapter), Some(gk)) = (bound[idx], grads.kernel) {
                out[idx] = Some(adapter.adapter_grads(&kernel_as_matrix(&gk)?)?);
            }
            if let Some(gi) = grads.input {
                g = upsample_nearest_backward(&gi, stage.upsample)?;
            }
        }
        // reorder to adapter-set order
        adapters
            .adapters
            .iter()
            .map(|a| {
                let idx = self.stage_index(&a.target_id).expect("bound above");
                out[idx].take().ok_or_else(|| Error::StaleCache("missing adapter gradient".into()))
            })
            .collect()
    }

    /// Decoder whose targeted weights are replaced by their merged values.
    pub fn merged(&self, adapters: &AdapterSet<T>) -> Result<ToyDecoder<T>> {
        let bound = self.bind(Some(adapters))?;
        let mut out = self.clone();
        for (idx, a) in bound.iter().enumerate() {
            if let Some(a) = a {
                out.stages[idx].kernel = self.effective_kernel(idx, a)?;
            }
        }
        Ok(out)
    }

    /// Full-parameter gradients (kernel, bias) for every stage; used only to
    /// pretrain the clean decoder.
    fn backward_all(&self, grad_image: &Tensor<T>, cache: &DecodeCache<T>) -> Result<Vec<(Tensor<T>, Tensor<T>)>> {
        let mut grads = Vec::with_capacity(self.stages.len());
        let mut g = grad_image.clone();
        for idx in (cache.start..self.stages.len()).rev() {
            let c = idx - cache.start;
            let stage = &self.stages[idx];
            g = stage.act.backward(&g, &cache.pre[c], &cache.post[c])?;
            let want = ConvWant { input: idx > cache.start, kernel: true, bias: true };
            let r = conv2d_backward_select(&g, &cache.inputs[c], &stage.kernel, stage.geom(), want)?;
            grads.push((r.kernel.expect("requested"), r.bias.expect("requested")));
            if let Some(gi) = r.input {
                g = upsample_nearest_backward(&gi, stage.upsample)?;
            }
        }
        grads.reverse();
        Ok(grads)
    }
}

/// i.i.d. standard-normal latents, `[count, c_z, h, w]`.
pub fn make_latents<T: Real>(count: usize, config: &DecoderConfig, rng: &mut Rng) -> Result<Tensor<T>> {
    if count < 1 {
        return Err(invalid!("need at least one latent"));
    }
    Ok(rng.normal_tensor([count, config.latent_channels, config.latent_size, config.latent_size], 1.0))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DecoderPretrainConfig {
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
}

impl Default for DecoderPretrainConfig {
    fn default() -> Self {
        DecoderPretrainConfig { steps: 400, batch: 8, lr: 2e-3 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecoderPretrainSummary {
    pub steps: usize,
    pub final_mse: f64,
    pub validation_psnr: f64,
}

/// Fixed linear "encoder" used to pretrain the decoder as an autoencoder:
/// 4x4 average pooling to the latent grid, then a seeded 3 -> c_z channel map.
struct TextureEncoder {
    proj: Vec<f64>,
    c_z: usize,
}

impl TextureEncoder {
    fn new(c_z: usize, rng: &mut Rng) -> Self {
        let proj = (0..c_z * 3).map(|_| rng.normal() * 3.0).collect();
        TextureEncoder { proj, c_z }
    }

    fn encode<T: Real>(&self, images: &Tensor<T>, latent_size: usize) -> Result<Tensor<T>> {
        let [n, c, h, w] = images.dims4()?;
        if c != 3 || h != latent_size * 4 || w != latent_size * 4 {
            return Err(shape_err!("encoder expects 3x{0}x{0} images", latent_size * 4));
        }
        let ls = latent_size;
        let mut out = vec![T::zero(); n * self.c_z * ls * ls];
        for b in 0..n {
            for y in 0..ls {
                for x in 0..ls {
                    let mut pooled = [0.0f64; 3];
                    for (ch, p) in pooled.iter_mut().enumerate() {
                        for dy in 0..4 {
                            for dx in 0..4 {
                                *p += images.data()[((b * 3 + ch) * h + y * 4 + dy) * w + x * 4 + dx].f64();
                            }
                        }
                        *p = *p / 16.0 - 0.5;
                    }
                    for z in 0..self.c_z {
                        let v: f64 = (0..3).map(|ch| self.proj[z * 3 + ch] * pooled[ch]).sum();
                        out[((b * self.c_z + z) * ls + y) * ls + x] = T::of(v);
                    }
                }
            }
        }
        Tensor::new([n, self.c_z, ls, ls], out)
    }
}

impl ToyDecoder<f32> {
    /// Gives the clean decoder non-degenerate outputs by fitting it to
    /// reconstruct procedural textures from a fixed pooled encoding.
    pub fn pretrain(&mut self, cfg: &DecoderPretrainConfig, rng: &Rng) -> Result<DecoderPretrainSummary> {
        if cfg.steps == 0 || cfg.batch == 0 {
            return Err(invalid!("pretraining needs positive steps and batch"));
        }
        let encoder = TextureEncoder::new(self.config.latent_channels, &mut rng.substream("decoder-encoder"));
        let mut data_rng = rng.substream("decoder-textures");
        let mut opt = Optimizer::new(OptimizerKind::default(), cfg.lr)?;
        let ls = self.config.latent_size;
        let size = self.config.image_size();
        let mut final_mse = f64::NAN;
        for step in 0..cfg.steps {
            let images: Tensor<f32> = texture_images(cfg.batch, size, &mut data_rng);
            let z = encoder.encode(&images, ls)?;
            let (out, cache) = self.decode_with_cache(&z, None)?;
            let n = out.len() as f32;
            let grad = out.zip_map(&images, |a, b| 2.0 * (a - b) / n)?;
            final_mse = crate::metrics::mse(&out, &images)?;
            if !final_mse.is_finite() {
                return Err(Error::Divergence { step });
            }
            let grads = self.backward_all(&grad, &cache)?;
            let mut params: Vec<&mut Tensor<f32>> = Vec::new();
            for s in self.stages.iter_mut() {
                params.push(&mut s.kernel);
                params.push(&mut s.bias);
            }
            let grad_refs: Vec<&Tensor<f32>> = grads.iter().flat_map(|(k, b)| [k, b]).collect();
            opt.step(&mut params, &grad_refs)?;
        }
        let val: Tensor<f32> = texture_images(16, size, &mut rng.substream("decoder-validation"));
        let rec = self.decode(&encoder.encode(&val, ls)?, None)?;
        Ok(DecoderPretrainSummary { steps: cfg.steps, final_mse, validation_psnr: batch_psnr(&rec, &val)? })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{finite_difference_grad, relative_error};
    use crate::lora::Variant;

    fn small_config() -> DecoderConfig {
        DecoderConfig { latent_channels: 2, latent_size: 2, mid_width: 4, hidden: 3, kernel: 3 }
    }

    #[test]
    fn output_shape_and_range() {
        let mut rng = Rng::new(1);
        let dec = ToyDecoder::<f32>::new(DecoderConfig::default(), &mut rng).unwrap();
        let z = make_latents::<f32>(2, &dec.config, &mut rng).unwrap();
        let x = dec.decode(&z, None).unwrap();
        assert_eq!(x.shape(), &[2, 3, 32, 32]);
        assert!(x.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
    }

    #[test]
    fn injection_points_listing() {
        let dec = ToyDecoder::<f32>::new(DecoderConfig::default(), &mut Rng::new(0)).unwrap();
        let pts = dec.list_injection_points();
        let ids: Vec<&str> = pts.iter().map(|p| p.id.as_str()).collect();
        assert_eq!(ids, ["input.conv", "mid.conv.0", "mid.conv.1", "upsampler.conv.0", "upsampler.conv.1", "output.conv"]);
        let up = pts.iter().find(|p| p.id == "upsampler.conv.0").unwrap();
        assert_eq!((up.d, up.k), (32, 32 * 9));
        let inp = pts.iter().find(|p| p.id == "input.conv").unwrap();
        assert_eq!((inp.d, inp.k), (256, 4));
        assert_eq!(dec.list_injection_points(), pts);
    }

    #[test]
    fn attach_everywhere_and_reject_unknown_or_duplicate() {
        let mut rng = Rng::new(2);
        let dec = ToyDecoder::<f32>::new(small_config(), &mut rng).unwrap();
        let all = InjectionSpec::new(dec.list_injection_points().into_iter().map(|p| p.id));
        let set = dec.attach(&all, LoraSpec::new(Variant::Lora, 1, 1.0), &mut rng).unwrap();
        assert_eq!(set.len(), dec.stages.len());
        assert!(matches!(
            dec.attach(&InjectionSpec::new(["nonexistent"]), LoraSpec::new(Variant::Lora, 1, 1.0), &mut rng),
            Err(Error::UnknownTarget(_))
        ));
        assert!(matches!(
            dec.attach(&InjectionSpec::new(["output.conv", "output.conv"]), LoraSpec::new(Variant::Lora, 1, 1.0), &mut rng),
            Err(Error::DuplicateTarget(_))
        ));
    }

    #[test]
    fn fresh_lora_is_bitwise_clean() {
        let mut rng = Rng::new(3);
        let dec = ToyDecoder::<f32>::new(DecoderConfig::default(), &mut rng).unwrap();
        let set = dec.attach(&InjectionSpec::upsamplers(&dec), LoraSpec::new(Variant::Lora, 8, 8.0), &mut rng).unwrap();
        let z = make_latents::<f32>(2, &dec.config, &mut rng).unwrap();
        assert_eq!(dec.decode(&z, Some(&set)).unwrap(), dec.decode(&z, None).unwrap());
    }

    #[test]
    fn latent_shape_mismatch_rejected() {
        let dec = ToyDecoder::<f32>::new(small_config(), &mut Rng::new(4)).unwrap();
        assert!(dec.decode(&Tensor::zeros([1, 3, 2, 2]), None).is_err());
    }

    #[test]
    fn latents_are_seeded_standard_normal() {
        let cfg = DecoderConfig::default();
        let a: Tensor<f32> = make_latents(40, &cfg, &mut Rng::new(5)).unwrap();
        let b: Tensor<f32> = make_latents(40, &cfg, &mut Rng::new(5)).unwrap();
        let c: Tensor<f32> = make_latents(40, &cfg, &mut Rng::new(6)).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
        let n = a.len() as f64; // 10_240 samples
        let mean = a.sum_f64() / n;
        let std = (a.data().iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / n).sqrt();
        assert!(mean.abs() < 0.05 && (std - 1.0).abs() < 0.05, "mean {mean} std {std}");
        assert!(make_latents::<f32>(0, &cfg, &mut Rng::new(0)).is_err());
    }

    fn perturbed(dec: &ToyDecoder<f64>, targets: &[&str], variant: Variant, rng: &mut Rng) -> AdapterSet<f64> {
        let alpha = if variant == Variant::Pissa { 1.0 } else { 0.5 };
        let mut set = dec.attach(&InjectionSpec::new(targets.iter().copied()), LoraSpec::new(variant, 2, alpha), rng).unwrap();
        for f in set.factors_mut() {
            let noise: Tensor<f64> = rng.normal_tensor(f.shape().to_vec(), 0.3);
            f.add_assign(&noise).unwrap();
        }
        set
    }

    #[test]
    fn live_adapters_equal_merged_weights() {
        let mut rng = Rng::new(7);
        let dec = ToyDecoder::<f64>::new(small_config(), &mut rng).unwrap();
        for v in [Variant::Lora, Variant::Pissa, Variant::Loha] {
            let set = perturbed(&dec, &["upsampler.conv.0", "output.conv"], v, &mut rng);
            let z = make_latents::<f64>(2, &dec.config, &mut rng).unwrap();
            let live = dec.decode(&z, Some(&set)).unwrap();
            let merged = dec.merged(&set).unwrap().decode(&z, None).unwrap();
            assert!(live.max_abs_diff(&merged).unwrap() <= 1e-6);
        }
    }

    #[test]
    fn backward_matches_finite_differences() {
        let mut rng = Rng::new(8);
        let dec = ToyDecoder::<f64>::new(small_config(), &mut rng).unwrap();
        let z = make_latents::<f64>(2, &dec.config, &mut rng).unwrap();
        let probe: Tensor<f64> = rng.normal_tensor(dec.image_shape(2), 1.0);
        let loss = |x: &Tensor<f64>| x.data().iter().zip(probe.data()).map(|(a, b)| a * b).sum::<f64>();
        for v in [Variant::Lora, Variant::Pissa, Variant::Loha] {
            let set = perturbed(&dec, &["mid.conv.1", "upsampler.conv.1"], v, &mut rng);
            let (_, cache) = dec.decode_with_cache(&z, Some(&set)).unwrap();
            let grads = dec.decode_backward(&probe, &cache, &set).unwrap();
            for (ai, adapter) in set.adapters.iter().enumerate() {
                for fi in 0..adapter.factors().len() {
                    let fd = finite_difference_grad(
                        |t| {
                            let mut s = set.clone();
                            *s.adapters[ai].factors_mut()[fi] = t.clone();
                            loss(&dec.decode(&z, Some(&s)).unwrap())
                        },
                        adapter.factors()[fi],
                        1e-6,
                    );
                    let err = relative_error(grads[ai].tensors()[fi], &fd);
                    assert!(err <= 1e-4, "{v:?} adapter {ai} factor {fi}: {err}");
                }
            }
        }
    }

    #[test]
    fn zero_image_gradient_gives_zero_adapter_gradients() {
        let mut rng = Rng::new(9);
        let dec = ToyDecoder::<f64>::new(small_config(), &mut rng).unwrap();
        let set = perturbed(&dec, &["upsampler.conv.0"], Variant::Lora, &mut rng);
        let z = make_latents::<f64>(1, &dec.config, &mut rng).unwrap();
        let (x, cache) = dec.decode_with_cache(&z, Some(&set)).unwrap();
        let grads = dec.decode_backward(&Tensor::zeros(x.shape().to_vec()), &cache, &set).unwrap();
        assert_eq!(grads.len(), 1);
        assert!(grads[0].tensors().iter().all(|t| t.data().iter().all(|&v| v == 0.0)));
    }

    #[test]
    fn no_adapters_means_no_gradients() {
        let mut rng = Rng::new(10);
        let dec = ToyDecoder::<f64>::new(small_config(), &mut rng).unwrap();
        let z = make_latents::<f64>(1, &dec.config, &mut rng).unwrap();
        let (x, cache) = dec.decode_with_cache(&z, None).unwrap();
        let empty = AdapterSet::new(Vec::new());
        assert!(dec.decode_backward(&x, &cache, &empty).unwrap().is_empty());
    }

    #[test]
    fn stale_cache_rejected() {
        let mut rng = Rng::new(11);
        let dec = ToyDecoder::<f64>::new(small_config(), &mut rng).unwrap();
        let mut set = perturbed(&dec, &["upsampler.conv.0"], Variant::Lora, &mut rng);
        let z = make_latents::<f64>(1, &dec.config, &mut rng).unwrap();
        let (x, cache) = dec.decode_with_cache(&z, Some(&set)).unwrap();
        set.adapters[0].a.data_mut()[0] += 1.0;
        assert!(matches!(dec.decode_backward(&x, &cache, &set), Err(Error::StaleCache(_))));
    }

    #[test]
    fn partial_forward_matches_full_decode() {
        let mut rng = Rng::new(12);
        let dec = ToyDecoder::<f32>::new(DecoderConfig::default(), &mut rng).unwrap();
        let set = dec.attach(&InjectionSpec::upsamplers(&dec), LoraSpec::new(Variant::Loha, 2, 1.0), &mut rng).unwrap();
        let z = make_latents::<f32>(2, &dec.config, &mut rng).unwrap();
        let first = dec.first_adapted(&set).unwrap().unwrap();
        let prefix = dec.forward_range(0, first, z.clone(), None).unwrap();
        let (x, _) = dec.forward_cached_from(first, &prefix, Some(&set)).unwrap();
        assert_eq!(x, dec.decode(&z, Some(&set)).unwrap());
    }

    #[test]
    fn pretraining_reduces_reconstruction_error() {
        let cfg = DecoderConfig { latent_channels: 4, latent_size: 4, mid_width: 16, hidden: 8, kernel: 3 };
        let mut dec = ToyDecoder::<f32>::new(cfg, &mut Rng::new(13)).unwrap();
        let short = DecoderPretrainConfig { steps: 5, batch: 4, lr: 2e-3 };
        let before = dec.clone().pretrain(&short, &Rng::new(13)).unwrap();
        let after = dec.pretrain(&DecoderPretrainConfig { steps: 150, batch: 4, lr: 2e-3 }, &Rng::new(13)).unwrap();
        assert!(after.validation_psnr > before.validation_psnr, "{before:?} vs {after:?}");
    }
}
