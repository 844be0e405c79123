//! The differentiable noise layer used while pretraining the extractor. Every
//! operation is linear in the image, so its gradient is the adjoint map.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::nn::Resampler;
use crate::rng::Rng;
use crate::tensor::{Real, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NoiseConfig {
    pub gaussian_max_sigma: f64,
    pub crop_min_area: f64,
    /// Brightness factors are drawn from `1 +/- brightness`.
    pub brightness: f64,
}

impl Default for NoiseConfig {
    fn default() -> Self {
        NoiseConfig { gaussian_max_sigma: 0.05, crop_min_area: 0.7, brightness: 0.2 }
    }
}

impl NoiseConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.gaussian_max_sigma) {
            return Err(invalid!("gaussian_max_sigma must be in [0, 1]"));
        }
        if !(self.crop_min_area > 0.0 && self.crop_min_area <= 1.0) {
            return Err(invalid!("crop_min_area must be in (0, 1]"));
        }
        if !(0.0..1.0).contains(&self.brightness) {
            return Err(invalid!("brightness must be in [0, 1)"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub enum NoiseOp<T> {
    Identity,
    Gaussian(Tensor<T>),
    CropResize(Resampler),
    Brightness(f64),
}

impl<T: Real> NoiseOp<T> {
    /// Draws one operation uniformly from the menu for a batch of `shape`.
    pub fn sample(cfg: &NoiseConfig, shape: [usize; 4], rng: &mut Rng) -> Self {
        let [_, _, h, w] = shape;
        match rng.below(4) {
            0 => NoiseOp::Identity,
            1 => {
                let sigma = rng.uniform_range(0.0, cfg.gaussian_max_sigma);
                NoiseOp::Gaussian(rng.normal_tensor(shape.to_vec(), sigma))
            }
            2 => {
                let side = rng.uniform_range(cfg.crop_min_area, 1.0).sqrt();
                let (ch, cw) = (side * h as f64, side * w as f64);
                let top = rng.uniform_range(0.0, h as f64 - ch);
                let left = rng.uniform_range(0.0, w as f64 - cw);
                NoiseOp::CropResize(Resampler::crop_resize(h, w, top, left, ch, cw, h, w))
            }
            _ => NoiseOp::Brightness(1.0 + rng.uniform_range(-cfg.brightness, cfg.brightness)),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            NoiseOp::Identity => "identity",
            NoiseOp::Gaussian(_) => "gaussian",
            NoiseOp::CropResize(_) => "crop_resize",
            NoiseOp::Brightness(_) => "brightness",
        }
    }

    pub fn apply(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        match self {
            NoiseOp::Identity => Ok(x.clone()),
            NoiseOp::Gaussian(noise) => x.add(noise),
            NoiseOp::CropResize(r) => r.apply(x),
            NoiseOp::Brightness(f) => Ok(x.scale(T::of(*f))),
        }
    }

    pub fn adjoint(&self, g: &Tensor<T>) -> Result<Tensor<T>> {
        match self {
            NoiseOp::Identity | NoiseOp::Gaussian(_) => Ok(g.clone()),
            NoiseOp::CropResize(r) => r.apply_adjoint(g),
            NoiseOp::Brightness(f) => Ok(g.scale(T::of(*f))),
        }
    }
}
