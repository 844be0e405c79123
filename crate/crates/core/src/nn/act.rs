use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::tensor::{Real, Tensor};

pub const LEAKY_SLOPE: f64 = 0.2;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Identity,
    LeakyRelu,
    Sigmoid,
}

impl Activation {
    pub fn forward<T: Real>(self, x: &Tensor<T>) -> Tensor<T> {
        match self {
            Activation::Identity => x.clone(),
            Activation::LeakyRelu => {
                let s = T::of(LEAKY_SLOPE);
                x.map(|v| if v > T::zero() { v } else { v * s })
            }
            Activation::Sigmoid => x.map(sigmoid),
        }
    }

    /// Gradient wrt the pre-activation, given the pre-activation `x` and the
    /// forward output `y`.
    pub fn backward<T: Real>(self, grad: &Tensor<T>, x: &Tensor<T>, y: &Tensor<T>) -> Result<Tensor<T>> {
        match self {
            Activation::Identity => Ok(grad.clone()),
            Activation::LeakyRelu => {
                let s = T::of(LEAKY_SLOPE);
                grad.zip_map(x, |g, v| if v > T::zero() { g } else { g * s })
            }
            Activation::Sigmoid => grad.zip_map(y, |g, v| g * v * (T::one() - v)),
        }
    }
}

#[inline]
pub fn sigmoid<T: Real>(v: T) -> T {
    if v >= T::zero() {
        T::one() / (T::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (T::one() + e)
    }
}

/// `ln(1 + e^v)` without overflow.
#[inline]
pub fn softplus(v: f64) -> f64 {
    if v > 0.0 {
        v + (-v).exp().ln_1p()
    } else {
        v.exp().ln_1p()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sigmoid_is_stable_at_extremes() {
        assert_eq!(sigmoid(1000.0f64), 1.0);
        assert_eq!(sigmoid(-1000.0f64), 0.0);
        assert!((sigmoid(0.0f32) - 0.5).abs() < 1e-7);
    }

    #[test]
    fn leaky_slope_applies_below_zero() {
        let x = Tensor::new([3], vec![-1.0f64, 0.0, 2.0]).unwrap();
        let y = Activation::LeakyRelu.forward(&x);
        assert_eq!(y.data(), &[-0.2, 0.0, 2.0]);
        let g = Activation::LeakyRelu.backward(&Tensor::full([3], 1.0), &x, &y).unwrap();
        assert_eq!(g.data(), &[0.2, 0.2, 1.0]);
    }

    #[test]
    fn softplus_matches_naive_in_safe_range() {
        for v in [-5.0, -0.5, 0.0, 0.5, 5.0] {
            assert!((softplus(v) - (1.0f64 + f64::exp(v)).ln()).abs() < 1e-12);
        }
    }
}
