//! Procedural RGB textures in `[0, 1]`: smooth colour fields plus a few
//! oriented sinusoids. Used to pretrain the toy decoder and the watermark
//! codec.

use std::f64::consts::TAU;

use crate::nn::Resampler;
use crate::rng::Rng;
use crate::tensor::{Real, Tensor};

pub fn texture_images<T: Real>(count: usize, size: usize, rng: &mut Rng) -> Tensor<T> {
    let grid = 5;
    let up = Resampler::resize(grid, grid, size, size);
    let plane = size * size;
    let mut data = Vec::with_capacity(count * 3 * plane);
    for _ in 0..count {
        let coarse: Tensor<f64> = rng.normal_tensor([1, 4, grid, grid], 1.0);
        let smooth = up.apply(&coarse).expect("fixed shapes");
        let waves: Vec<(f64, f64, f64, f64)> = (0..3)
            .map(|_| {
                let freq = rng.uniform_range(0.5, 4.0);
                let theta = rng.uniform_range(0.0, TAU);
                (freq * theta.cos(), freq * theta.sin(), rng.uniform_range(0.0, TAU), rng.uniform_range(0.02, 0.12))
            })
            .collect();
        let contrast = rng.uniform_range(0.08, 0.2);
        let base: [f64; 3] = [rng.uniform_range(0.25, 0.75), rng.uniform_range(0.25, 0.75), rng.uniform_range(0.25, 0.75)];
        let tint: [f64; 3] = [rng.uniform_range(0.5, 1.0), rng.uniform_range(0.5, 1.0), rng.uniform_range(0.5, 1.0)];
        let luma = &smooth.data()[..plane];
        for c in 0..3 {
            let chroma = &smooth.data()[(c + 1) * plane..(c + 2) * plane];
            for y in 0..size {
                for x in 0..size {
                    let (u, v) = (x as f64 / size as f64, y as f64 / size as f64);
                    let wave: f64 = waves.iter().map(|&(fx, fy, ph, a)| a * (TAU * (fx * u + fy * v) + ph).sin()).sum();
                    let i = y * size + x;
                    let val = base[c] + tint[c] * (contrast * luma[i] + wave) + 0.05 * chroma[i];
                    data.push(T::of(val.clamp(0.0, 1.0)));
                }
            }
        }
    }
    Tensor::new([count, 3, size, size], data).expect("length matches")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn textures_are_in_range_and_varied() {
        let imgs: Tensor<f32> = texture_images(4, 32, &mut Rng::new(1));
        assert_eq!(imgs.shape(), &[4, 3, 32, 32]);
        assert!(imgs.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
        let mean = imgs.sum_f64() / imgs.len() as f64;
        let var = imgs.data().iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / imgs.len() as f64;
        assert!(var > 1e-3, "variance {var}");
    }

    #[test]
    fn seeded() {
        let a: Tensor<f32> = texture_images(2, 16, &mut Rng::new(9));
        let b: Tensor<f32> = texture_images(2, 16, &mut Rng::new(9));
        assert_eq!(a, b);
    }
}
