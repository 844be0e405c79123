//! Hypothesis-test verification under the null of i.i.d. fair bits.

use num_bigint::BigUint;
use num_rational::BigRational;
use num_traits::{One, ToPrimitive, Zero};
use serde::{Deserialize, Serialize};

use crate::codec::{SoftBits, WatermarkMessage};
use crate::error::{invalid, Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VerificationReport {
    pub n: usize,
    pub matched_bits: usize,
    pub acc: f64,
    pub threshold_k: usize,
    pub fpr_budget: f64,
    /// `P[Binomial(n, 1/2) >= matched_bits]`.
    pub p_value: f64,
    pub detected: bool,
}

/// `C(n, j)` for `j = 0..=n`.
fn binomial_row(n: usize) -> Vec<BigUint> {
    let mut row = vec![BigUint::one()];
    for j in 1..=n {
        let prev = &row[j - 1];
        row.push(prev * BigUint::from(n - j + 1) / BigUint::from(j));
    }
    row
}

/// Exact `P[Binomial(n, 1/2) >= k]`.
pub fn binomial_tail(n: usize, k: usize) -> BigRational {
    if k > n {
        return BigRational::zero();
    }
    let row = binomial_row(n);
    let count: BigUint = row[k..].iter().sum();
    BigRational::new(count.into(), (BigUint::one() << n).into())
}

fn to_f64(r: &BigRational) -> f64 {
    r.to_f64().unwrap_or(f64::NAN)
}

fn check_fpr(t: f64) -> Result<BigRational> {
    if !(t > 0.0 && t < 1.0) {
        return Err(invalid!("false positive budget must be in (0, 1), got {t}"));
    }
    BigRational::from_float(t).ok_or_else(|| invalid!("false positive budget {t} is not finite"))
}

/// Smallest `k` with `P[Binomial(n, 1/2) >= k] <= t`.
pub fn detection_threshold(n: usize, t: f64) -> Result<usize> {
    if n == 0 {
        return Err(invalid!("payload must have at least one bit"));
    }
    let budget = check_fpr(t)?;
    let row = binomial_row(n);
    let denom: BigUint = BigUint::one() << n;
    let mut count = BigUint::zero();
    // walk down from k = n while the tail stays within budget
    let mut best = None;
    for k in (0..=n).rev() {
        count += &row[k];
        if BigRational::new(count.clone().into(), denom.clone().into()) <= budget {
            best = Some(k);
        } else {
            break;
        }
    }
    best.ok_or(Error::PayloadTooShort { n, fpr: t })
}

pub fn verify(soft: &SoftBits, w: &WatermarkMessage, t: f64) -> Result<VerificationReport> {
    let matched = soft.matched_bits(w)?;
    verify_matched(matched, w.len(), t)
}

/// Report for an already-counted number of matching bits.
pub fn verify_matched(matched_bits: usize, n: usize, t: f64) -> Result<VerificationReport> {
    if matched_bits > n {
        return Err(invalid!("{matched_bits} matches exceed {n} bits"));
    }
    let threshold_k = detection_threshold(n, t)?;
    Ok(VerificationReport {
        n,
        matched_bits,
        acc: matched_bits as f64 / n as f64,
        threshold_k,
        fpr_budget: t,
        p_value: to_f64(&binomial_tail(n, matched_bits)),
        detected: matched_bits >= threshold_k,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EmpiricalRates {
    pub threshold_k: usize,
    pub fnr: f64,
    pub fpr: f64,
}

/// FNR over watermarked scores and FPR over clean scores at the `t` threshold.
pub fn empirical_rates(watermarked: &[usize], clean: &[usize], n: usize, t: f64) -> Result<EmpiricalRates> {
    if watermarked.is_empty() || clean.is_empty() {
        return Err(invalid!("empirical rates need non-empty score lists"));
    }
    if let Some(&s) = watermarked.iter().chain(clean).find(|&&s| s > n) {
        return Err(invalid!("score {s} exceeds {n} bits"));
    }
    let k = detection_threshold(n, t)?;
    let misses = watermarked.iter().filter(|&&s| s < k).count();
    let false_alarms = clean.iter().filter(|&&s| s >= k).count();
    Ok(EmpiricalRates {
        threshold_k: k,
        fnr: misses as f64 / watermarked.len() as f64,
        fpr: false_alarms as f64 / clean.len() as f64,
    })
}

/// Three-sigma Monte Carlo allowance for an empirical rate around `t`.
pub fn monte_carlo_margin(t: f64, trials: usize) -> f64 {
    3.0 * (t * (1.0 - t) / trials as f64).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;
    use proptest::prelude::*;

    /// Enumerates all `2^n` outcomes and tallies matches, independent of the
    /// binomial-coefficient path.
    fn brute_force_threshold(n: usize, t: f64) -> Option<usize> {
        let mut pmf = vec![0u64; n + 1];
        for outcome in 0u64..(1u64 << n) {
            pmf[outcome.count_ones() as usize] += 1;
        }
        let total = (1u64 << n) as f64;
        let mut tail = 0u64;
        let mut best = None;
        for k in (0..=n).rev() {
            tail += pmf[k];
            // counts are exact integers below 2^53, so the ratio test is exact
            if (tail as f64) <= t * total {
                best = Some(k);
            } else {
                break;
            }
        }
        best
    }

    #[test]
    fn small_cases() {
        assert_eq!(detection_threshold(1, 0.6).unwrap(), 1);
        assert_eq!(detection_threshold(2, 0.3).unwrap(), 2);
        assert_eq!(detection_threshold(16, 0.005).unwrap(), 14);
        assert!(matches!(detection_threshold(4, 0.05), Err(Error::PayloadTooShort { .. })));
        assert!(detection_threshold(4, 0.0).is_err());
        assert!(detection_threshold(0, 0.1).is_err());
    }

    #[test]
    fn matches_enumeration_up_to_24_bits() {
        for n in 1..=24 {
            for t in [0.05, 0.005, 0.0005] {
                let exact = detection_threshold(n, t).ok();
                assert_eq!(exact, brute_force_threshold(n, t), "n={n} t={t}");
            }
        }
    }

    #[test]
    fn forty_eight_bits_against_pmf_sum() {
        let k = detection_threshold(48, 0.005).unwrap();
        // PMF summed term by term in f64 as a cross-check
        let mut pmf = vec![0.0f64; 49];
        let mut c = 1.0f64;
        for (j, p) in pmf.iter_mut().enumerate() {
            *p = c / 2f64.powi(48);
            c = c * (48 - j) as f64 / (j + 1) as f64;
        }
        let tail = |k: usize| pmf[k..].iter().sum::<f64>();
        assert!(tail(k) <= 0.005 && tail(k - 1) > 0.005);
    }

    #[test]
    fn perfect_match_report() {
        let w = WatermarkMessage::random(16, &mut Rng::new(1)).unwrap();
        let soft = SoftBits::new(w.bits().iter().map(|&b| if b == 1 { 0.9 } else { 0.1 }).collect()).unwrap();
        let r = verify(&soft, &w, 0.005).unwrap();
        assert!(r.detected);
        assert_eq!(r.matched_bits, 16);
        assert_eq!(r.p_value, 2f64.powi(-16));
    }

    #[test]
    fn half_match_and_boundary() {
        let r = verify_matched(8, 16, 0.4).unwrap();
        assert!(!r.detected && r.p_value > 0.5);
        let k = detection_threshold(16, 0.005).unwrap();
        assert!(!verify_matched(k - 1, 16, 0.005).unwrap().detected);
        assert!(verify_matched(k, 16, 0.005).unwrap().detected);
        assert!(verify_matched(17, 16, 0.005).is_err());
    }

    #[test]
    fn empirical_rate_cases() {
        let r = empirical_rates(&[16; 10], &[8; 10], 16, 0.005).unwrap();
        assert_eq!((r.fnr, r.fpr), (0.0, 0.0));
        let r = empirical_rates(&[3; 10], &[16; 10], 16, 0.005).unwrap();
        assert_eq!((r.fnr, r.fpr), (1.0, 1.0));
        assert!(empirical_rates(&[], &[1], 16, 0.005).is_err());
    }

    #[test]
    fn null_monte_carlo_within_margin() {
        let mut rng = Rng::new(3);
        let trials = 10_000;
        let clean: Vec<usize> = (0..trials).map(|_| (0..16).map(|_| rng.bit() as usize).sum()).collect();
        let r = empirical_rates(&[16], &clean, 16, 0.005).unwrap();
        assert!(r.fpr <= 0.005 + monte_carlo_margin(0.005, trials), "{r:?}");
    }

    proptest! {
        #[test]
        fn threshold_non_decreasing_as_budget_shrinks(n in 12usize..40, a in 1e-4f64..0.5, b in 1e-4f64..0.5) {
            let (lo, hi) = if a < b { (a, b) } else { (b, a) };
            if let (Ok(k_lo), Ok(k_hi)) = (detection_threshold(n, lo), detection_threshold(n, hi)) {
                prop_assert!(k_lo >= k_hi);
            }
        }

        #[test]
        fn p_value_non_increasing(n in 1usize..40, m in 0usize..40) {
            prop_assume!(m < n);
            prop_assert!(binomial_tail(n, m + 1) <= binomial_tail(n, m));
        }
    }
}
