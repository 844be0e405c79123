use crate::error::Result;
use crate::tensor::{Real, Tensor};

/// Images live in `[0, 1]`, so the peak is 1.
pub const PSNR_PEAK: f64 = 1.0;

/// Returned when two images are identical (and an upper bound otherwise).
pub const PSNR_CAP_DB: f64 = 99.0;

pub fn mse<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<f64> {
    b.ensure_shape(a.shape(), "mse operand")?;
    let sum: f64 = a.data().iter().zip(b.data()).map(|(x, y)| (x.f64() - y.f64()).powi(2)).sum();
    Ok(sum / a.len().max(1) as f64)
}

pub fn psnr_from_mse(mse: f64) -> f64 {
    if mse <= 0.0 {
        return PSNR_CAP_DB;
    }
    (10.0 * (PSNR_PEAK * PSNR_PEAK / mse).log10()).min(PSNR_CAP_DB)
}

pub fn psnr<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<f64> {
    Ok(psnr_from_mse(mse(a, b)?))
}

/// Mean of per-image PSNR over the leading (batch) axis.
pub fn batch_psnr<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<f64> {
    b.ensure_shape(a.shape(), "psnr operand")?;
    let n = a.shape().first().copied().unwrap_or(1).max(1);
    let per = a.len() / n;
    let mut total = 0.0;
    for i in 0..n {
        let s: f64 = a.data()[i * per..(i + 1) * per]
            .iter()
            .zip(&b.data()[i * per..(i + 1) * per])
            .map(|(x, y)| (x.f64() - y.f64()).powi(2))
            .sum();
        total += psnr_from_mse(s / per as f64);
    }
    Ok(total / n as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn identical_images_hit_cap() {
        let a = Tensor::<f32>::full([1, 3, 4, 4], 0.3);
        assert_eq!(psnr(&a, &a).unwrap(), PSNR_CAP_DB);
    }

    #[test]
    fn zeros_vs_ones_is_zero_db() {
        let a = Tensor::<f32>::zeros([1, 3, 4, 4]);
        let b = Tensor::<f32>::full([1, 3, 4, 4], 1.0);
        assert_eq!(psnr(&a, &b).unwrap(), 0.0);
    }

    #[test]
    fn uniform_perturbation_of_mse_1e_3_is_30_db() {
        let a = Tensor::<f64>::full([1, 1, 8, 8], 0.5);
        let d = 0.001f64.sqrt();
        let b = Tensor::from_fn([1, 1, 8, 8], |i| if i % 2 == 0 { 0.5 + d } else { 0.5 - d });
        assert!((psnr(&a, &b).unwrap() - 30.0).abs() < 1e-9);
    }

    #[test]
    fn shape_mismatch_rejected() {
        assert!(psnr(&Tensor::<f32>::zeros([4]), &Tensor::<f32>::zeros([5])).is_err());
    }

    proptest! {
        #[test]
        fn symmetric(xs in prop::collection::vec(0.0f32..1.0, 12), ys in prop::collection::vec(0.0f32..1.0, 12)) {
            let a = Tensor::new([12], xs).unwrap();
            let b = Tensor::new([12], ys).unwrap();
            prop_assert_eq!(psnr(&a, &b).unwrap(), psnr(&b, &a).unwrap());
        }

        #[test]
        fn strictly_decreasing_in_mse(m1 in 1e-9f64..1.0, m2 in 1e-9f64..1.0) {
            prop_assume!(m1 < m2);
            prop_assert!(psnr_from_mse(m1) > psnr_from_mse(m2));
        }
    }
}
