//! Stage-0 pretraining: a residual template encoder and the extractor are
//! trained jointly through the noise layer, then the encoder is dropped.

use serde::{Deserialize, Serialize};

use super::noise::{NoiseConfig, NoiseOp};
use super::{bce_with_logits, CodecConfig, WatermarkDecoder};
use crate::data::texture_images;
use crate::error::{invalid, Error, Result};
use crate::optim::{Optimizer, OptimizerKind};
use crate::rng::Rng;
use crate::tensor::{gemm, Mat, Tensor};

/// Supplies `count` images in `[0, 1]` per call.
pub type ImageSource<'a> = dyn FnMut(usize, &mut Rng) -> Result<Tensor<f32>> + 'a;

pub fn texture_source(size: usize) -> impl FnMut(usize, &mut Rng) -> Result<Tensor<f32>> {
    move |count, rng| Ok(texture_images(count, size, rng))
}

/// Draws images with replacement from a fixed `[N, 3, H, W]` pool.
pub fn pool_source(pool: Tensor<f32>) -> Result<impl FnMut(usize, &mut Rng) -> Result<Tensor<f32>>> {
    let [total, _, _, _] = pool.dims4()?;
    if total == 0 {
        return Err(invalid!("image pool is empty"));
    }
    Ok(move |count: usize, rng: &mut Rng| {
        let parts = (0..count).map(|_| pool.slice_outer(rng.below(total), 1)).collect::<Result<Vec<_>>>()?;
        Tensor::concat_outer(&parts)
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CodecPretrainConfig {
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    /// Peak amplitude of the encoder residual.
    pub strength: f64,
    /// Side of the tiled encoder template.
    pub tile: usize,
    /// Weight of the term pulling unmarked images towards 0.5.
    pub null_weight: f64,
    pub noise: NoiseConfig,
    /// Unmarked images used to centre each output bit after training.
    pub calibration_images: usize,
    pub validation_images: usize,
    pub min_clean_accuracy: f64,
}

impl Default for CodecPretrainConfig {
    fn default() -> Self {
        CodecPretrainConfig {
            steps: 1500,
            batch: 32,
            lr: 2e-3,
            strength: 0.04,
            tile: 8,
            null_weight: 1.0,
            noise: NoiseConfig::default(),
            calibration_images: 512,
            validation_images: 256,
            min_clean_accuracy: 0.9,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CodecPretrainSummary {
    pub steps: usize,
    pub final_loss: f64,
    pub clean_accuracy: f64,
    pub noisy_accuracy: f64,
    /// Fraction of ones per bit position on unmarked validation images.
    pub null_bit_means: Vec<f64>,
    pub codec_params: usize,
}

struct TemplateEncoder {
    /// `[n, 3 * tile * tile]`.
    templates: Tensor<f32>,
    tile: usize,
    strength: f32,
}

impl TemplateEncoder {
    /// Signs `[B, n]` in {-1, 1} to pre-activations `[B, 3 * tile^2]`.
    fn pre(&self, signs: &Tensor<f32>) -> Tensor<f32> {
        let [b, n] = signs.dims2().expect("signs are 2-d");
        let m = self.templates.shape()[1];
        let mut u = vec![0.0f32; b * m];
        let inv = 1.0 / (n as f32).sqrt();
        gemm(inv, Mat::new(signs.data(), b, n), Mat::new(self.templates.data(), n, m), 0.0, &mut u);
        Tensor::new([b, m], u).expect("sized above")
    }

    fn residual(&self, pre: &Tensor<f32>, h: usize, w: usize) -> Tensor<f32> {
        let b = pre.shape()[0];
        let t = self.tile;
        Tensor::from_fn([b, 3, h, w], |i| {
            let x = i % w;
            let y = (i / w) % h;
            let c = (i / (w * h)) % 3;
            let bi = i / (3 * w * h);
            self.strength * pre.data()[bi * 3 * t * t + (c * t + y % t) * t + x % t].tanh()
        })
    }

    fn template_grad(&self, grad_residual: &Tensor<f32>, pre: &Tensor<f32>, signs: &Tensor<f32>) -> Tensor<f32> {
        let [b, _, h, w] = grad_residual.dims4().expect("4-d");
        let t = self.tile;
        let m = 3 * t * t;
        let mut gu = vec![0.0f32; b * m];
        for (i, &g) in grad_residual.data().iter().enumerate() {
            let x = i % w;
            let y = (i / w) % h;
            let c = (i / (w * h)) % 3;
            let bi = i / (3 * w * h);
            gu[bi * m + (c * t + y % t) * t + x % t] += g;
        }
        for (g, &p) in gu.iter_mut().zip(pre.data()) {
            let th = p.tanh();
            *g *= self.strength * (1.0 - th * th);
        }
        let n = signs.shape()[1];
        let mut gt = vec![0.0f32; n * m];
        let inv = 1.0 / (n as f32).sqrt();
        gemm(inv, Mat::new(signs.data(), b, n).t(), Mat::new(&gu, b, m), 0.0, &mut gt);
        Tensor::new([n, m], gt).expect("sized above")
    }
}

fn random_messages(batch: usize, n: usize, rng: &mut Rng) -> Tensor<f32> {
    Tensor::from_fn([batch, n], |_| rng.bit() as f32)
}

/// Fraction of matching hard bits, row by row against per-row targets.
fn rowwise_accuracy(logits: &Tensor<f32>, targets: &Tensor<f32>) -> f64 {
    let hits = logits.data().iter().zip(targets.data()).filter(|(z, t)| (**z > 0.0) == (**t > 0.5)).count();
    hits as f64 / logits.len() as f64
}

/// Shifts the head bias so every bit's median logit over unmarked images is
/// zero, making hard bits on unmarked content balanced.
fn calibrate(codec: &mut WatermarkDecoder<f32>, count: usize, source: &mut ImageSource<'_>, rng: &mut Rng) -> Result<()> {
    if count == 0 {
        return Ok(());
    }
    let n = codec.n_bits();
    let mut columns = vec![Vec::with_capacity(count); n];
    let mut remaining = count;
    while remaining > 0 {
        let chunk = remaining.min(64);
        remaining -= chunk;
        for row in codec.logits(&source(chunk, rng)?)?.data().chunks(n) {
            for (col, &z) in columns.iter_mut().zip(row) {
                col.push(z);
            }
        }
    }
    for (b, col) in codec.head_bias.data_mut().iter_mut().zip(columns.iter_mut()) {
        col.sort_by(f32::total_cmp);
        let mid = col.len() / 2;
        let median = if col.len() % 2 == 0 { 0.5 * (col[mid - 1] + col[mid]) } else { col[mid] };
        *b -= median;
    }
    Ok(())
}

/// Trains a fresh extractor and returns it frozen.
pub fn pretrain_codec(
    codec_config: CodecConfig,
    cfg: &CodecPretrainConfig,
    source: &mut ImageSource<'_>,
    rng: &Rng,
) -> Result<(WatermarkDecoder<f32>, CodecPretrainSummary)> {
    if cfg.steps == 0 || cfg.batch == 0 || cfg.tile == 0 || cfg.validation_images == 0 {
        return Err(invalid!("codec pretraining needs positive steps, batch, tile and validation size"));
    }
    if !(cfg.strength > 0.0) || cfg.null_weight < 0.0 {
        return Err(invalid!("strength must be positive and null_weight non-negative"));
    }
    cfg.noise.validate()?;
    let n = codec_config.n_bits;
    let mut codec = WatermarkDecoder::<f32>::new(codec_config, &mut rng.substream("codec-init"))?;
    let mut encoder = TemplateEncoder {
        templates: rng.substream("codec-templates").normal_tensor([n, 3 * cfg.tile * cfg.tile], 1.0),
        tile: cfg.tile,
        strength: cfg.strength as f32,
    };
    let mut codec_opt = Optimizer::new(OptimizerKind::default(), cfg.lr)?;
    let mut enc_opt = Optimizer::new(OptimizerKind::default(), cfg.lr)?;
    let mut data_rng = rng.substream("codec-images");
    let mut msg_rng = rng.substream("codec-messages");
    let mut noise_rng = rng.substream("noise-layer");
    let b = cfg.batch;
    let mut final_loss = f64::NAN;

    for step in 0..cfg.steps {
        let clean = source(b, &mut data_rng)?;
        let [_, _, h, w] = clean.dims4()?;
        let msgs = random_messages(b, n, &mut msg_rng);
        let signs = msgs.map(|v| 2.0 * v - 1.0);
        let pre = encoder.pre(&signs);
        let marked = clean.add(&encoder.residual(&pre, h, w))?;
        let both = Tensor::concat_outer(&[marked, clean])?;
        let op = NoiseOp::sample(&cfg.noise, [2 * b, 3, h, w], &mut noise_rng);
        let noisy = op.apply(&both)?;

        let (logits, cache) = codec.logits_cached(&noisy)?;
        let (lm, gm) = bce_with_logits(&logits.slice_outer(0, b)?, &msgs)?;
        let (ln, gn) = bce_with_logits(&logits.slice_outer(b, b)?, &Tensor::full([b, n], 0.5))?;
        final_loss = lm + cfg.null_weight * ln;
        if !final_loss.is_finite() {
            return Err(Error::Divergence { step });
        }
        let grad = Tensor::concat_outer(&[gm, gn.scale(cfg.null_weight as f32)])?;
        let grads = codec.backward(&grad, &cache, true, true)?;
        let g_in = op.adjoint(&grads.input.expect("requested"))?.slice_outer(0, b)?;
        let g_templates = encoder.template_grad(&g_in, &pre, &signs);

        let pg = grads.params.expect("requested");
        codec_opt.step(&mut codec.params_mut()?, &pg.iter().collect::<Vec<_>>())?;
        enc_opt.step(&mut [&mut encoder.templates], &[&g_templates])?;
    }

    calibrate(&mut codec, cfg.calibration_images, source, &mut rng.substream("codec-calibration"))?;

    // validation on fresh images, marked images clipped to the valid range
    let mut val_rng = rng.substream("codec-validation");
    let mut val_noise = rng.substream("codec-validation-noise");
    let (mut clean_hits, mut noisy_hits, mut total) = (0.0, 0.0, 0usize);
    let mut ones = vec![0usize; n];
    let mut null_total = 0usize;
    let mut remaining = cfg.validation_images;
    while remaining > 0 {
        let count = remaining.min(64);
        remaining -= count;
        let clean = source(count, &mut val_rng)?;
        let [_, _, h, w] = clean.dims4()?;
        let msgs = random_messages(count, n, &mut val_rng);
        let pre = encoder.pre(&msgs.map(|v| 2.0 * v - 1.0));
        let marked = clean.add(&encoder.residual(&pre, h, w))?.map(|v| v.clamp(0.0, 1.0));
        clean_hits += rowwise_accuracy(&codec.logits(&marked)?, &msgs) * (count * n) as f64;
        let op = NoiseOp::sample(&cfg.noise, [count, 3, h, w], &mut val_noise);
        let noisy = op.apply(&marked)?.map(|v| v.clamp(0.0, 1.0));
        noisy_hits += rowwise_accuracy(&codec.logits(&noisy)?, &msgs) * (count * n) as f64;
        total += count * n;
        for row in codec.logits(&clean)?.data().chunks(n) {
            for (o, &z) in ones.iter_mut().zip(row) {
                *o += usize::from(z > 0.0);
            }
        }
        null_total += count;
    }
    let summary = CodecPretrainSummary {
        steps: cfg.steps,
        final_loss,
        clean_accuracy: clean_hits / total as f64,
        noisy_accuracy: noisy_hits / total as f64,
        null_bit_means: ones.iter().map(|&o| o as f64 / null_total as f64).collect(),
        codec_params: codec.param_count(),
    };
    if summary.clean_accuracy < cfg.min_clean_accuracy {
        return Err(Error::NonConvergence { accuracy: summary.clean_accuracy, required: cfg.min_clean_accuracy });
    }
    codec.freeze();
    Ok((codec, summary))
}
