//! Temperature-scaled probability math and divergences.

use crate::error::{CoreError, Result};

/// Probability floor applied before any logarithm in KL/JS.
pub const PROB_FLOOR: f64 = 1e-12;

/// A normalized distribution over the vocabulary together with the temperature
/// that produced it.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbVector {
    values: Vec<f64>,
    temperature: f64,
}

impl ProbVector {
    /// Wraps explicit probabilities. They must be non-negative and sum to 1 within 1e-9.
    pub fn new(values: Vec<f64>, temperature: f64) -> Result<Self> {
        check_temperature(temperature)?;
        if values.is_empty() {
            return Err(CoreError::InvalidDistribution("empty".into()));
        }
        if values.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(CoreError::InvalidDistribution("negative or non-finite entry".into()));
        }
        let total: f64 = values.iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(CoreError::InvalidDistribution(format!("sums to {total}")));
        }
        Ok(Self { values, temperature })
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn temperature(&self) -> f64 {
        self.temperature
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

fn check_temperature(tau: f64) -> Result<()> {
    if tau.is_finite() && tau > 0.0 {
        Ok(())
    } else {
        Err(CoreError::InvalidTemperature(tau))
    }
}

fn same_vocab(p: &ProbVector, q: &ProbVector) -> Result<()> {
    if p.len() == q.len() {
        Ok(())
    } else {
        Err(CoreError::VocabMismatch(p.len(), q.len()))
    }
}

/// Max-subtracted softmax of `logits / tau`.
pub fn softmax_with_temperature(logits: &[f64], tau: f64) -> Result<ProbVector> {
    check_temperature(tau)?;
    if logits.is_empty() {
        return Err(CoreError::InvalidDistribution("empty logits".into()));
    }
    if logits.iter().any(|z| !z.is_finite()) {
        return Err(CoreError::NonFiniteLogits);
    }
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut values: Vec<f64> = logits.iter().map(|z| ((z - max) / tau).exp()).collect();
    let total: f64 = values.iter().sum();
    values.iter_mut().for_each(|v| *v /= total);
    Ok(ProbVector { values, temperature: tau })
}

/// Shannon entropy in nats; zero entries contribute nothing.
pub fn entropy(p: &ProbVector) -> f64 {
    let h: f64 = p
        .values
        .iter()
        .filter(|&&v| v > 0.0)
        .map(|&v| -v * v.ln())
        .sum();
    h.max(0.0)
}

/// dH/dτ of `softmax(z/τ)`, which equals `Var_{p(τ)}(z) / τ³`.
pub fn entropy_temp_derivative(logits: &[f64], tau: f64) -> Result<f64> {
    let p = softmax_with_temperature(logits, tau)?;
    let mean: f64 = p.values.iter().zip(logits).map(|(p, z)| p * z).sum();
    let var: f64 = p
        .values
        .iter()
        .zip(logits)
        .map(|(p, z)| p * (z - mean) * (z - mean))
        .sum();
    Ok(var.max(0.0) / (tau * tau * tau))
}

/// Clamps to [`PROB_FLOOR`] and renormalizes.
pub fn smooth(values: &[f64]) -> Vec<f64> {
    let mut out: Vec<f64> = values.iter().map(|v| v.max(PROB_FLOOR)).collect();
    let total: f64 = out.iter().sum();
    out.iter_mut().for_each(|v| *v /= total);
    out
}

fn kl_raw(p: &[f64], q: &[f64]) -> f64 {
    p.iter().zip(q).map(|(a, b)| a * (a / b).ln()).sum::<f64>().max(0.0)
}

/// `KL(p ‖ q)`, multiplied by `tau²` when `apply_tau_sq` is set. Reverse KL is
/// obtained by swapping the arguments.
pub fn kl_divergence(p: &ProbVector, q: &ProbVector, tau: f64, apply_tau_sq: bool) -> Result<f64> {
    same_vocab(p, q)?;
    check_temperature(tau)?;
    let kl = kl_raw(&smooth(&p.values), &smooth(&q.values));
    Ok(if apply_tau_sq { tau * tau * kl } else { kl })
}

/// Jensen-Shannon divergence, bounded by ln 2.
pub fn js_divergence(p: &ProbVector, q: &ProbVector) -> Result<f64> {
    same_vocab(p, q)?;
    let (p, q) = (smooth(&p.values), smooth(&q.values));
    let m: Vec<f64> = p.iter().zip(&q).map(|(a, b)| 0.5 * (a + b)).collect();
    Ok((0.5 * kl_raw(&p, &m) + 0.5 * kl_raw(&q, &m)).min(std::f64::consts::LN_2))
}

/// `-ln q[target]`, with the probability floored at [`PROB_FLOOR`].
pub fn cross_entropy_to_target(q: &ProbVector, target: usize) -> Result<f64> {
    let v = q.values.get(target).ok_or(CoreError::TargetOutOfRange {
        id: target,
        vocab: q.len(),
    })?;
    Ok(-v.max(PROB_FLOOR).ln())
}

/// Hellinger distance `(1/√2)·‖√p − √q‖₂`, in [0, 1].
pub fn hellinger_distance(p: &ProbVector, q: &ProbVector) -> Result<f64> {
    same_vocab(p, q)?;
    let sq: f64 = p
        .values
        .iter()
        .zip(&q.values)
        .map(|(a, b)| {
            let d = a.sqrt() - b.sqrt();
            d * d
        })
        .sum();
    Ok((sq.sqrt() * std::f64::consts::FRAC_1_SQRT_2).min(1.0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn pv(v: &[f64]) -> ProbVector {
        ProbVector::new(v.to_vec(), 1.0).unwrap()
    }

    #[test]
    fn softmax_examples() {
        let p = softmax_with_temperature(&[0.0, 0.0, 0.0], 3.7).unwrap();
        for v in p.values() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
        // exp(2)/(e²+e+1) etc.
        let p = softmax_with_temperature(&[2.0, 1.0, 0.0], 1.0).unwrap();
        let want = [0.665_240_955_774_821_5, 0.244_728_471_054_797_6, 0.090_030_573_170_380_46];
        for (a, b) in p.values().iter().zip(want) {
            assert!((a - b).abs() < 1e-15);
        }
        let hot = softmax_with_temperature(&[2.0, 1.0, 0.0], 0.01).unwrap();
        assert!(hot.values()[0] > 1.0 - 1e-12 && hot.values()[1] < 1e-40);
        let flat = softmax_with_temperature(&[2.0, 1.0, 0.0], 100.0).unwrap();
        assert!(flat.values().iter().all(|v| (v - 1.0 / 3.0).abs() < 0.01));
    }

    #[test]
    fn softmax_rejects_bad_inputs() {
        assert!(matches!(
            softmax_with_temperature(&[1.0], 0.0),
            Err(CoreError::InvalidTemperature(_))
        ));
        assert!(softmax_with_temperature(&[1.0], -1.0).is_err());
        assert!(matches!(
            softmax_with_temperature(&[1.0, f64::NAN], 1.0),
            Err(CoreError::NonFiniteLogits)
        ));
    }

    #[test]
    fn entropy_examples() {
        assert_eq!(entropy(&pv(&[0.0, 1.0, 0.0])), 0.0);
        assert!((entropy(&pv(&[0.25; 4])) - 4f64.ln()).abs() < 1e-15);
        let p = softmax_with_temperature(&[2.0, 1.0, 0.0], 1.0).unwrap();
        assert!((entropy(&p) - 0.832_4).abs() < 1e-4);
    }

    #[test]
    fn entropy_derivative_examples() {
        assert_eq!(entropy_temp_derivative(&[3.0, 3.0, 3.0], 0.7).unwrap(), 0.0);
        let h = |t: f64| entropy(&softmax_with_temperature(&[2.0, 1.0, 0.0], t).unwrap());
        let fd = (h(1.0 + 1e-5) - h(1.0 - 1e-5)) / 2e-5;
        let d = entropy_temp_derivative(&[2.0, 1.0, 0.0], 1.0).unwrap();
        assert!((d - fd).abs() < 1e-6 * d);
        assert!(entropy_temp_derivative(&[1.0], 0.0).is_err());
    }

    #[test]
    fn kl_examples() {
        let p = pv(&[0.2, 0.3, 0.5]);
        assert_eq!(kl_divergence(&p, &p, 1.0, true).unwrap(), 0.0);
        let kl = kl_divergence(&pv(&[1.0, 0.0]), &pv(&[0.5, 0.5]), 1.0, false).unwrap();
        assert!((kl - std::f64::consts::LN_2).abs() < 1e-10);
        let z = [1.0, -0.5, 0.3];
        let w = [0.0, 0.4, -1.0];
        let (pt, qt) = (
            softmax_with_temperature(&z, 2.0).unwrap(),
            softmax_with_temperature(&w, 2.0).unwrap(),
        );
        let scaled = kl_divergence(&pt, &qt, 2.0, true).unwrap();
        let plain = kl_divergence(&pt, &qt, 2.0, false).unwrap();
        assert_eq!(scaled, 4.0 * plain);
        assert!(matches!(
            kl_divergence(&pv(&[1.0]), &pv(&[0.5, 0.5]), 1.0, false),
            Err(CoreError::VocabMismatch(1, 2))
        ));
    }

    #[test]
    fn js_and_cross_entropy_examples() {
        let p = pv(&[0.1, 0.9]);
        assert_eq!(js_divergence(&p, &p).unwrap(), 0.0);
        let js = js_divergence(&pv(&[1.0, 0.0]), &pv(&[0.0, 1.0])).unwrap();
        assert!((js - std::f64::consts::LN_2).abs() < 1e-9);
        let ce = cross_entropy_to_target(&pv(&[0.25, 0.75]), 1).unwrap();
        assert!((ce - 0.287_682_072_451_780_9).abs() < 1e-15);
        assert!(matches!(
            cross_entropy_to_target(&p, 2),
            Err(CoreError::TargetOutOfRange { id: 2, vocab: 2 })
        ));
    }

    #[test]
    fn hellinger_examples() {
        let p = pv(&[0.3, 0.7]);
        assert_eq!(hellinger_distance(&p, &p).unwrap(), 0.0);
        assert_eq!(hellinger_distance(&pv(&[1.0, 0.0]), &pv(&[0.0, 1.0])).unwrap(), 1.0);
        // (1/√2)·√((√.5 − 1)² + .5)
        let h = hellinger_distance(&pv(&[0.5, 0.5]), &pv(&[1.0, 0.0])).unwrap();
        assert!((h - 0.541_196_100_146_197).abs() < 1e-12);
    }

    fn dist(n: usize) -> impl Strategy<Value = Vec<f64>> {
        prop::collection::vec(-4.0f64..4.0, n)
            .prop_map(|z| softmax_with_temperature(&z, 1.0).unwrap().values)
    }

    proptest! {
        #[test]
        fn softmax_normalized_and_shift_invariant(
            z in prop::collection::vec(-30.0f64..30.0, 1..40),
            shift in -100.0f64..100.0,
            tau in 0.05f64..20.0,
        ) {
            let p = softmax_with_temperature(&z, tau).unwrap();
            prop_assert!((p.values().iter().sum::<f64>() - 1.0).abs() < 1e-9);
            let zs: Vec<f64> = z.iter().map(|v| v + shift).collect();
            let ps = softmax_with_temperature(&zs, tau).unwrap();
            for (a, b) in p.values().iter().zip(ps.values()) {
                prop_assert!((a - b).abs() < 1e-12);
            }
        }

        #[test]
        fn entropy_increases_with_temperature(z in prop::collection::vec(-5.0f64..5.0, 2..20)) {
            let spread = z.iter().cloned().fold(f64::MIN, f64::max) - z.iter().cloned().fold(f64::MAX, f64::min);
            prop_assume!(spread > 1e-3);
            let h = |t| entropy(&softmax_with_temperature(&z, t).unwrap());
            prop_assert!(h(2.0) > h(1.0));
            prop_assert!(h(1.0) > h(0.5));
            for t in [0.5, 1.0, 2.0] {
                let d = entropy_temp_derivative(&z, t).unwrap();
                let fd = (h(t + 1e-5) - h(t - 1e-5)) / 2e-5;
                prop_assert!(d >= 0.0);
                prop_assert!((d - fd).abs() <= 1e-6 * d.max(1e-3), "{} vs {}", d, fd);
            }
        }

        #[test]
        fn hellinger_is_a_metric((a, b, c) in (2usize..12).prop_flat_map(|n| (dist(n), dist(n), dist(n)))) {
            let (a, b, c) = (pv(&a), pv(&b), pv(&c));
            let ab = hellinger_distance(&a, &b).unwrap();
            let ba = hellinger_distance(&b, &a).unwrap();
            let bc = hellinger_distance(&b, &c).unwrap();
            let ac = hellinger_distance(&a, &c).unwrap();
            prop_assert_eq!(ab, ba);
            prop_assert!((0.0..=1.0).contains(&ab));
            prop_assert!(ac <= ab + bc + 1e-12);
        }

        #[test]
        fn kl_nonnegative_and_zero_only_on_equality((a, b) in (2usize..12).prop_flat_map(|n| (dist(n), dist(n)))) {
            let (p, q) = (pv(&a), pv(&b));
            let kl = kl_divergence(&p, &q, 1.0, false).unwrap();
            prop_assert!(kl >= 0.0);
            if a != b {
                prop_assert!(kl > 1e-12 || a.iter().zip(&b).all(|(x, y)| (x - y).abs() < 1e-6));
            }
            prop_assert_eq!(kl_divergence(&p, &p, 1.0, false).unwrap(), 0.0);
            let js = js_divergence(&p, &q).unwrap();
            prop_assert!((js - js_divergence(&q, &p).unwrap()).abs() < 1e-15);
            prop_assert!((0.0..=std::f64::consts::LN_2).contains(&js));
        }
    }
}
