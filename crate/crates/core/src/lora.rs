//! Low-rank adapters on a `d x k` weight view.
//!
//! The delta is `scale * B A` (LoRA, PiSSA) or `scale * (B A) ⊙ (B2 A2)` (LoHA),
//! with `scale = alpha` by default or `alpha / r` in [`ScaleMode::AlphaOverRank`].
//! Convolution kernels `[O, C, kh, kw]` are adapted through their
//! `O x (C*kh*kw)` matrix view, which shares the kernel's memory layout.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::rng::Rng;
use crate::svd::svd_truncated;
use crate::tensor::{Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    Lora,
    Pissa,
    Loha,
}

impl Variant {
    pub fn as_str(self) -> &'static str {
        match self {
            Variant::Lora => "lora",
            Variant::Pissa => "pissa",
            Variant::Loha => "loha",
        }
    }

    pub fn parse(s: &str) -> Result<Variant> {
        match s.to_ascii_lowercase().as_str() {
            "lora" => Ok(Variant::Lora),
            "pissa" => Ok(Variant::Pissa),
            "loha" => Ok(Variant::Loha),
            other => Err(invalid!("unknown adapter variant `{other}`")),
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScaleMode {
    /// `delta = alpha * B A`
    #[default]
    Literal,
    /// `delta = (alpha / r) * B A`
    AlphaOverRank,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LoraSpec {
    pub variant: Variant,
    pub rank: usize,
    pub alpha: f64,
    #[serde(default)]
    pub scale_mode: ScaleMode,
}

impl LoraSpec {
    pub fn new(variant: Variant, rank: usize, alpha: f64) -> Self {
        LoraSpec { variant, rank, alpha, scale_mode: ScaleMode::Literal }
    }

    pub fn scale(&self) -> f64 {
        match self.scale_mode {
            ScaleMode::Literal => self.alpha,
            ScaleMode::AlphaOverRank => self.alpha / self.rank as f64,
        }
    }
}

/// View a convolution kernel `[O, C, kh, kw]` as an `O x (C*kh*kw)` matrix.
pub fn kernel_as_matrix<T: Real>(kernel: &Tensor<T>) -> Result<Tensor<T>> {
    let [o, c, kh, kw] = kernel.dims4()?;
    kernel.clone().reshape([o, c * kh * kw])
}

/// Inverse of [`kernel_as_matrix`].
pub fn matrix_as_kernel<T: Real>(m: Tensor<T>, kernel_shape: &[usize]) -> Result<Tensor<T>> {
    m.reshape(kernel_shape.to_vec())
}

#[derive(Clone, Debug, PartialEq)]
pub struct LoraAdapter<T = f32> {
    pub target_id: String,
    pub spec: LoraSpec,
    /// `r x k`
    pub a: Tensor<T>,
    /// `d x r`
    pub b: Tensor<T>,
    pub a2: Option<Tensor<T>>,
    pub b2: Option<Tensor<T>>,
    /// PiSSA only: the frozen remainder `base - B0 A0`.
    pub residual_base: Option<Tensor<T>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FactorGrads<T = f32> {
    pub a: Tensor<T>,
    pub b: Tensor<T>,
    pub a2: Option<Tensor<T>>,
    pub b2: Option<Tensor<T>>,
}

impl<T: Real> FactorGrads<T> {
    pub fn tensors(&self) -> Vec<&Tensor<T>> {
        let mut v = vec![&self.a, &self.b];
        v.extend(self.a2.iter());
        v.extend(self.b2.iter());
        v
    }

    pub fn add_assign(&mut self, other: &FactorGrads<T>) -> Result<()> {
        self.a.add_assign(&other.a)?;
        self.b.add_assign(&other.b)?;
        if let (Some(x), Some(y)) = (self.a2.as_mut(), other.a2.as_ref()) {
            x.add_assign(y)?;
        }
        if let (Some(x), Some(y)) = (self.b2.as_mut(), other.b2.as_ref()) {
            x.add_assign(y)?;
        }
        Ok(())
    }
}

/// Initializes an adapter for the `d x k` weight `base`.
///
/// * LoRA: `A ~ N(0, 1/r)`, `B = 0`.
/// * PiSSA: `B = U_r sqrt(S_r)`, `A = sqrt(S_r) V_r^T`, residual `base - B A`;
///   requires an effective scale of exactly 1.
/// * LoHA: LoRA pair plus `A2 ~ N(0, 1/r)`, `B2 = 1`; `B = 0` keeps the
///   initial delta at zero.
pub fn lora_init<T: Real>(target_id: &str, base: &Tensor<T>, spec: LoraSpec, rng: &mut Rng) -> Result<LoraAdapter<T>> {
    let [d, k] = base.dims2()?;
    let r = spec.rank;
    if r < 1 || r > d.min(k) {
        return Err(invalid!("rank {r} outside 1..={} for a {d}x{k} weight", d.min(k)));
    }
    if !(spec.alpha >= 0.0) || !spec.alpha.is_finite() {
        return Err(invalid!("alpha must be a finite non-negative number, got {}", spec.alpha));
    }
    let std = 1.0 / (r as f64).sqrt();
    let id = target_id.to_string();
    match spec.variant {
        Variant::Lora => Ok(LoraAdapter {
            target_id: id,
            spec,
            a: rng.normal_tensor([r, k], std),
            b: Tensor::zeros([d, r]),
            a2: None,
            b2: None,
            residual_base: None,
        }),
        Variant::Loha => Ok(LoraAdapter {
            target_id: id,
            spec,
            a: rng.normal_tensor([r, k], std),
            b: Tensor::zeros([d, r]),
            a2: Some(rng.normal_tensor([r, k], std)),
            b2: Some(Tensor::full([d, r], T::one())),
            residual_base: None,
        }),
        Variant::Pissa => {
            if spec.scale() != 1.0 {
                return Err(invalid!(
                    "PiSSA initialization needs an effective scale of 1, got {}",
                    spec.scale()
                ));
            }
            let svd = svd_truncated(base, r)?;
            let mut b = svd.u.clone();
            for i in 0..d {
                for j in 0..r {
                    b.data_mut()[i * r + j] *= svd.s[j].sqrt();
                }
            }
            let mut a = svd.v.transpose()?;
            for j in 0..r {
                let root = svd.s[j].sqrt();
                for x in &mut a.data_mut()[j * k..(j + 1) * k] {
                    *x *= root;
                }
            }
            let residual = base.sub(&b.matmul(&a)?)?;
            Ok(LoraAdapter { target_id: id, spec, a, b, a2: None, b2: None, residual_base: Some(residual) })
        }
    }
}

impl<T: Real> LoraAdapter<T> {
    pub fn variant(&self) -> Variant {
        self.spec.variant
    }

    pub fn rank(&self) -> usize {
        self.spec.rank
    }

    pub fn d(&self) -> usize {
        self.b.shape()[0]
    }

    pub fn k(&self) -> usize {
        self.a.shape()[1]
    }

    pub fn scale(&self) -> T {
        T::of(self.spec.scale())
    }

    /// Checks factor shapes and the per-variant optional fields.
    pub fn validate(&self) -> Result<()> {
        let (d, k, r) = (self.d(), self.k(), self.rank());
        self.a.ensure_shape(&[r, k], "adapter A")?;
        self.b.ensure_shape(&[d, r], "adapter B")?;
        let loha = self.spec.variant == Variant::Loha;
        match (&self.a2, &self.b2) {
            (Some(a2), Some(b2)) if loha => {
                a2.ensure_shape(&[r, k], "adapter A2")?;
                b2.ensure_shape(&[d, r], "adapter B2")?;
            }
            (None, None) if !loha => {}
            _ => return Err(invalid!("A2/B2 must be present exactly for LoHA adapters")),
        }
        match (&self.residual_base, self.spec.variant) {
            (Some(res), Variant::Pissa) => res.ensure_shape(&[d, k], "PiSSA residual")?,
            (None, Variant::Lora | Variant::Loha) => {}
            _ => return Err(invalid!("residual base must be present exactly for PiSSA adapters")),
        }
        Ok(())
    }

    pub fn delta_weights(&self) -> Result<Tensor<T>> {
        let ba = self.b.matmul(&self.a)?;
        let delta = match (&self.a2, &self.b2) {
            (Some(a2), Some(b2)) => ba.hadamard(&b2.matmul(a2)?)?,
            _ => ba,
        };
        Ok(delta.scale(self.scale()))
    }

    /// `base + delta` (LoRA, LoHA) or `residual_base + delta` (PiSSA).
    pub fn merge(&self, base: &Tensor<T>) -> Result<Tensor<T>> {
        base.ensure_shape(&[self.d(), self.k()], "merge base weight")?;
        let delta = self.delta_weights()?;
        match &self.residual_base {
            Some(res) => res.add(&delta),
            None => base.add(&delta),
        }
    }

    /// Subtracts the current delta. For LoRA/LoHA this recovers the base
    /// weight; for PiSSA it recovers the frozen residual.
    pub fn unmerge(&self, merged: &Tensor<T>) -> Result<Tensor<T>> {
        merged.ensure_shape(&[self.d(), self.k()], "unmerge weight")?;
        merged.sub(&self.delta_weights()?)
    }

    /// Chain rule from `dL/dDelta` to the factors.
    pub fn adapter_grads(&self, grad_delta: &Tensor<T>) -> Result<FactorGrads<T>> {
        grad_delta.ensure_shape(&[self.d(), self.k()], "delta gradient")?;
        let s = self.scale();
        match (&self.a2, &self.b2) {
            (Some(a2), Some(b2)) => {
                let m1 = self.b.matmul(&self.a)?;
                let m2 = b2.matmul(a2)?;
                let g1 = grad_delta.hadamard(&m2)?.scale(s);
                let g2 = grad_delta.hadamard(&m1)?.scale(s);
                Ok(FactorGrads {
                    a: self.b.transpose()?.matmul(&g1)?,
                    b: g1.matmul(&self.a.transpose()?)?,
                    a2: Some(b2.transpose()?.matmul(&g2)?),
                    b2: Some(g2.matmul(&a2.transpose()?)?),
                })
            }
            _ => Ok(FactorGrads {
                a: self.b.transpose()?.matmul(grad_delta)?.scale(s),
                b: grad_delta.matmul(&self.a.transpose()?)?.scale(s),
                a2: None,
                b2: None,
            }),
        }
    }

    pub fn param_count(&self) -> usize {
        let one = self.rank() * (self.d() + self.k());
        match self.spec.variant {
            Variant::Loha => 2 * one,
            Variant::Lora | Variant::Pissa => one,
        }
    }

    pub fn factors(&self) -> Vec<&Tensor<T>> {
        let mut v = vec![&self.a, &self.b];
        v.extend(self.a2.iter());
        v.extend(self.b2.iter());
        v
    }

    pub fn factors_mut(&mut self) -> Vec<&mut Tensor<T>> {
        let mut v = vec![&mut self.a, &mut self.b];
        v.extend(self.a2.iter_mut());
        v.extend(self.b2.iter_mut());
        v
    }

    pub fn cast<U: Real>(&self) -> LoraAdapter<U> {
        LoraAdapter {
            target_id: self.target_id.clone(),
            spec: self.spec,
            a: self.a.cast(),
            b: self.b.cast(),
            a2: self.a2.as_ref().map(Tensor::cast),
            b2: self.b2.as_ref().map(Tensor::cast),
            residual_base: self.residual_base.as_ref().map(Tensor::cast),
        }
    }

    pub fn fingerprint(&self) -> u64 {
        let mut h = crate::tensor::Fnv::default();
        h.write_bytes(self.target_id.as_bytes());
        for f in self.factors() {
            h.write_u64(f.fingerprint());
        }
        if let Some(r) = &self.residual_base {
            h.write_u64(r.fingerprint());
        }
        h.finish()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{finite_difference_grad, relative_error};
    use crate::rng::Rng;
    use crate::svd::svd_truncated;
    use proptest::prelude::*;

    fn random_adapter(variant: Variant, d: usize, k: usize, r: usize, rng: &mut Rng) -> (Tensor<f64>, LoraAdapter<f64>) {
        let base: Tensor<f64> = rng.normal_tensor([d, k], 1.0);
        let alpha = if variant == Variant::Pissa { 1.0 } else { 0.7 };
        let mut ad = lora_init("w", &base, LoraSpec::new(variant, r, alpha), rng).unwrap();
        // move away from the zero-delta start
        for f in ad.factors_mut() {
            let noise: Tensor<f64> = rng.normal_tensor(f.shape().to_vec(), 0.5);
            f.add_assign(&noise).unwrap();
        }
        (base, ad)
    }

    #[test]
    fn lora_init_has_zero_delta() {
        let mut rng = Rng::new(1);
        let base: Tensor<f32> = rng.normal_tensor([16, 40], 1.0);
        for v in [Variant::Lora, Variant::Loha] {
            let ad = lora_init("w", &base, LoraSpec::new(v, 4, 8.0), &mut rng).unwrap();
            assert!(ad.delta_weights().unwrap().data().iter().all(|&x| x == 0.0));
            assert_eq!(ad.merge(&base).unwrap(), base);
        }
    }

    #[test]
    fn pissa_on_diagonal() {
        let base = Tensor::new([3, 3], vec![3.0f64, 0., 0., 0., 2., 0., 0., 0., 1.]).unwrap();
        let ad = lora_init("w", &base, LoraSpec::new(Variant::Pissa, 2, 1.0), &mut Rng::new(0)).unwrap();
        let ba = ad.b.matmul(&ad.a).unwrap();
        let want_ba = Tensor::new([3, 3], vec![3.0f64, 0., 0., 0., 2., 0., 0., 0., 0.]).unwrap();
        let want_res = Tensor::new([3, 3], vec![0.0f64, 0., 0., 0., 0., 0., 0., 0., 1.]).unwrap();
        assert!(ba.max_abs_diff(&want_ba).unwrap() < 1e-12);
        assert!(ad.residual_base.as_ref().unwrap().max_abs_diff(&want_res).unwrap() < 1e-12);
    }

    #[test]
    fn pissa_reconstructs_random_base() {
        let mut rng = Rng::new(2);
        let base: Tensor<f64> = rng.normal_tensor([8, 6], 1.0);
        let ad = lora_init("w", &base, LoraSpec::new(Variant::Pissa, 3, 1.0), &mut rng).unwrap();
        let rec = ad.residual_base.as_ref().unwrap().add(&ad.b.matmul(&ad.a).unwrap()).unwrap();
        assert!(rec.sub(&base).unwrap().frobenius() <= 1e-5);
        assert!(ad.merge(&base).unwrap().sub(&base).unwrap().frobenius() <= 1e-5);
        let truncated = svd_truncated(&base, 3).unwrap().reconstruct().unwrap();
        assert!(ad.b.matmul(&ad.a).unwrap().sub(&truncated).unwrap().frobenius() <= 1e-5);
    }

    #[test]
    fn pissa_rejects_non_unit_scale() {
        let base = Tensor::<f64>::zeros([4, 4]);
        assert!(lora_init("w", &base, LoraSpec::new(Variant::Pissa, 2, 2.0), &mut Rng::new(0)).is_err());
    }

    #[test]
    fn rank_out_of_range_rejected() {
        let base = Tensor::<f32>::zeros([4, 3]);
        for r in [0, 4] {
            assert!(lora_init("w", &base, LoraSpec::new(Variant::Lora, r, 1.0), &mut Rng::new(0)).is_err());
        }
    }

    #[test]
    fn hand_multiplied_delta() {
        let base = Tensor::<f64>::zeros([2, 2]);
        let mut ad = lora_init("w", &base, LoraSpec::new(Variant::Lora, 1, 1.0), &mut Rng::new(0)).unwrap();
        ad.b = Tensor::new([2, 1], vec![1.0, 0.0]).unwrap();
        ad.a = Tensor::new([1, 2], vec![2.0, 3.0]).unwrap();
        assert_eq!(ad.delta_weights().unwrap().data(), &[2.0, 3.0, 0.0, 0.0]);
        ad.spec.alpha = 0.0;
        assert!(ad.delta_weights().unwrap().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn loha_with_unit_second_product_equals_lora() {
        let mut rng = Rng::new(3);
        let (base, lora) = random_adapter(Variant::Lora, 5, 7, 2, &mut rng);
        let mut loha = lora_init("w", &base, LoraSpec::new(Variant::Loha, 2, lora.spec.alpha), &mut rng).unwrap();
        loha.a = lora.a.clone();
        loha.b = lora.b.clone();
        // B2 A2 = ones: B2 column of ones, A2 row of ones, zero elsewhere
        loha.b2 = Some(Tensor::from_fn([5, 2], |i| if i % 2 == 0 { 1.0 } else { 0.0 }));
        loha.a2 = Some(Tensor::from_fn([2, 7], |i| if i < 7 { 1.0 } else { 0.0 }));
        assert!(loha.delta_weights().unwrap().max_abs_diff(&lora.delta_weights().unwrap()).unwrap() < 1e-12);
    }

    #[test]
    fn merge_then_unmerge() {
        let mut rng = Rng::new(4);
        for v in [Variant::Lora, Variant::Loha] {
            let (base, ad) = random_adapter(v, 6, 9, 3, &mut rng);
            let back = ad.unmerge(&ad.merge(&base).unwrap()).unwrap();
            assert!(back.max_abs_diff(&base).unwrap() <= 1e-6);
        }
        let (base, ad) = random_adapter(Variant::Pissa, 6, 9, 3, &mut rng);
        let back = ad.unmerge(&ad.merge(&base).unwrap()).unwrap();
        assert!(back.max_abs_diff(ad.residual_base.as_ref().unwrap()).unwrap() <= 1e-12);
    }

    #[test]
    fn merge_shape_mismatch() {
        let mut rng = Rng::new(5);
        let (_, ad) = random_adapter(Variant::Lora, 4, 4, 2, &mut rng);
        assert!(ad.merge(&Tensor::zeros([4, 5])).is_err());
    }

    #[test]
    fn two_by_two_gradients_by_hand() {
        // delta = s * B A with r = 1; dL/dB = s G A^T, dL/dA = s B^T G
        let base = Tensor::<f64>::zeros([2, 2]);
        let mut ad = lora_init("w", &base, LoraSpec::new(Variant::Lora, 1, 2.0), &mut Rng::new(0)).unwrap();
        ad.b = Tensor::new([2, 1], vec![1.0, -1.0]).unwrap();
        ad.a = Tensor::new([1, 2], vec![3.0, 4.0]).unwrap();
        let g = Tensor::new([2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let grads = ad.adapter_grads(&g).unwrap();
        // G A^T = [1*3+2*4, 3*3+4*4] = [11, 25]
        assert_eq!(grads.b.data(), &[22.0, 50.0]);
        // B^T G = [1-3, 2-4] = [-2, -2]
        assert_eq!(grads.a.data(), &[-4.0, -4.0]);
        let zero = ad.adapter_grads(&Tensor::zeros([2, 2])).unwrap();
        assert!(zero.tensors().iter().all(|t| t.data().iter().all(|&v| v == 0.0)));
    }

    #[test]
    fn gradients_match_finite_differences_for_all_variants() {
        let mut rng = Rng::new(6);
        for v in [Variant::Lora, Variant::Pissa, Variant::Loha] {
            let (_, ad) = random_adapter(v, 4, 5, 2, &mut rng);
            let probe: Tensor<f64> = rng.normal_tensor([4, 5], 1.0);
            let loss = |ad: &LoraAdapter<f64>| {
                ad.delta_weights().unwrap().data().iter().zip(probe.data()).map(|(a, b)| a * b.sin()).sum::<f64>()
            };
            let grads = ad.adapter_grads(&probe.map(|b| b.sin())).unwrap();
            let n = ad.factors().len();
            for fi in 0..n {
                let fd = finite_difference_grad(
                    |t| {
                        let mut probe_ad = ad.clone();
                        *probe_ad.factors_mut()[fi] = t.clone();
                        loss(&probe_ad)
                    },
                    ad.factors()[fi],
                    1e-5,
                );
                assert!(relative_error(grads.tensors()[fi], &fd) <= 1e-4, "{v:?} factor {fi}");
            }
        }
    }

    #[test]
    fn param_counts() {
        let base = Tensor::<f32>::zeros([64, 576]);
        let mut rng = Rng::new(0);
        let lora = lora_init("w", &base, LoraSpec::new(Variant::Lora, 40, 40.0), &mut rng).unwrap();
        assert_eq!(lora.param_count(), 25_600);
        let loha = lora_init("w", &base, LoraSpec::new(Variant::Loha, 40, 40.0), &mut rng).unwrap();
        assert_eq!(loha.param_count(), 2 * 25_600);
        let tiny = lora_init("w", &Tensor::<f32>::zeros([1, 1]), LoraSpec::new(Variant::Lora, 1, 1.0), &mut rng).unwrap();
        assert_eq!(tiny.param_count(), 2);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]
        #[test]
        fn delta_rank_bounded_by_r(seed in 0u64..10_000, d in 3usize..9, k in 3usize..9, r in 1usize..3, pissa in any::<bool>()) {
            let mut rng = Rng::new(seed);
            let variant = if pissa { Variant::Pissa } else { Variant::Lora };
            let (_, ad) = random_adapter(variant, d, k, r, &mut rng);
            let delta = ad.delta_weights().unwrap();
            let svd = svd_truncated(&delta, d.min(k)).unwrap();
            let smax = svd.s[0];
            let numerical_rank = svd.s.iter().filter(|&&s| s > 1e-6 * smax).count();
            prop_assert!(numerical_rank <= r);
        }
    }
}
