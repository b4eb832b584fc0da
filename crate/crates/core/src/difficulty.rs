//! Per-token difficulty indicators comparing teacher and student predictions.

use adakd_nn::LogitBatch;
use serde::{Deserialize, Serialize};

use crate::dist::{
    cross_entropy_to_target, hellinger_distance, js_divergence, kl_divergence, smooth,
    softmax_with_temperature, ProbVector,
};
use crate::error::{CoreError, Result};

/// Which discrepancy measure turns a (teacher, student) pair into a difficulty score.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum IndicatorKind {
    #[default]
    Hellinger,
    ForwardKl,
    ReverseKl,
    CrossEntropy,
    Js,
    TopKRank,
}

/// An indicator kind plus the `k` used by [`IndicatorKind::TopKRank`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Indicator {
    pub kind: IndicatorKind,
    pub top_k: usize,
}

impl Default for Indicator {
    fn default() -> Self {
        Self { kind: IndicatorKind::Hellinger, top_k: 5 }
    }
}

impl From<IndicatorKind> for Indicator {
    fn from(kind: IndicatorKind) -> Self {
        Self { kind, ..Self::default() }
    }
}

/// Scores for the valid positions of a batch. Masked-out positions have no score
/// at all, so downstream code can only ever see valid tokens.
#[derive(Debug, Clone, PartialEq)]
pub struct DifficultyScores {
    kind: IndicatorKind,
    mask: Vec<bool>,
    positions: Vec<usize>,
    values: Vec<f64>,
}

impl DifficultyScores {
    /// Builds scores from explicit values, one per `true` entry of `mask`.
    pub fn from_parts(kind: IndicatorKind, mask: Vec<bool>, values: Vec<f64>) -> Result<Self> {
        let positions: Vec<usize> = (0..mask.len()).filter(|&i| mask[i]).collect();
        if positions.len() != values.len() {
            return Err(CoreError::Misaligned(format!(
                "{} scores for {} valid positions",
                values.len(),
                positions.len()
            )));
        }
        if values.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(CoreError::Misaligned("scores must be finite and non-negative".into()));
        }
        if kind == IndicatorKind::Hellinger && values.iter().any(|v| *v > 1.0) {
            return Err(CoreError::Misaligned("Hellinger scores exceed 1".into()));
        }
        Ok(Self { kind, mask, positions, values })
    }

    /// Scores for a fully valid batch.
    pub fn dense(kind: IndicatorKind, values: Vec<f64>) -> Result<Self> {
        Self::from_parts(kind, vec![true; values.len()], values)
    }

    pub fn kind(&self) -> IndicatorKind {
        self.kind
    }

    pub fn mask(&self) -> &[bool] {
        &self.mask
    }

    /// Positions (into the batch) that carry a score, ascending.
    pub fn positions(&self) -> &[usize] {
        &self.positions
    }

    /// Score per valid position, aligned with [`Self::positions`].
    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (usize, f64)> + '_ {
        self.positions.iter().copied().zip(self.values.iter().copied())
    }
}

/// Renormalized KL restricted to the teacher's `k` most likely ids (ties go to
/// the lower id).
pub fn topk_rank_agreement(teacher: &ProbVector, student: &ProbVector, k: usize) -> Result<f64> {
    let v = teacher.len();
    if student.len() != v {
        return Err(CoreError::VocabMismatch(v, student.len()));
    }
    if k == 0 || k > v {
        return Err(CoreError::InvalidTopK { k, vocab: v });
    }
    let t = teacher.values();
    let mut ids: Vec<usize> = (0..v).collect();
    ids.sort_by(|&a, &b| t[b].total_cmp(&t[a]).then(a.cmp(&b)));
    ids.truncate(k);
    let renorm = |vals: &[f64]| {
        let sub = smooth(&ids.iter().map(|&i| vals[i]).collect::<Vec<_>>());
        ProbVector::new(sub, 1.0)
    };
    let (p, q) = (renorm(t)?, renorm(student.values())?);
    kl_divergence(&p, &q, 1.0, false)
}

/// Scores every valid position of aligned teacher/student logits at τ = 1.
///
/// `targets` holds one id per position and is only needed for cross-entropy.
pub fn score_tokens(
    teacher: &LogitBatch,
    student: &LogitBatch,
    indicator: Indicator,
    targets: Option<&[usize]>,
) -> Result<DifficultyScores> {
    if teacher.positions() != student.positions() || teacher.vocab() != student.vocab() {
        return Err(CoreError::Misaligned(format!(
            "teacher {}x{} vs student {}x{}",
            teacher.positions(),
            teacher.vocab(),
            student.positions(),
            student.vocab()
        )));
    }
    if teacher.mask() != student.mask() {
        return Err(CoreError::Misaligned("teacher and student masks differ".into()));
    }
    if indicator.kind == IndicatorKind::CrossEntropy {
        match targets {
            None => return Err(CoreError::MissingTargets),
            Some(t) if t.len() != student.positions() => {
                return Err(CoreError::Misaligned(format!(
                    "{} targets for {} positions",
                    t.len(),
                    student.positions()
                )))
            }
            _ => {}
        }
    }
    let mut values = Vec::new();
    for i in student.valid_positions() {
        let p = softmax_with_temperature(teacher.row(i), 1.0)?;
        let q = softmax_with_temperature(student.row(i), 1.0)?;
        let s = match indicator.kind {
            IndicatorKind::Hellinger => hellinger_distance(&p, &q)?,
            IndicatorKind::ForwardKl => kl_divergence(&p, &q, 1.0, false)?,
            IndicatorKind::ReverseKl => kl_divergence(&q, &p, 1.0, false)?,
            IndicatorKind::Js => js_divergence(&p, &q)?,
            IndicatorKind::CrossEntropy => {
                cross_entropy_to_target(&q, targets.expect("checked above")[i])?
            }
            IndicatorKind::TopKRank => topk_rank_agreement(&p, &q, indicator.top_k)?,
        };
        values.push(s);
    }
    DifficultyScores::from_parts(indicator.kind, student.mask().to_vec(), values)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn batch(rows: &[&[f64]]) -> LogitBatch {
        let v = rows[0].len();
        LogitBatch::dense(v, rows.concat()).unwrap()
    }

    fn hellinger_oracle(a: &[f64], b: &[f64]) -> f64 {
        let norm = |z: &[f64]| {
            let e: Vec<f64> = z.iter().map(|x| x.exp()).collect();
            let s: f64 = e.iter().sum();
            e.into_iter().map(|x| x / s).collect::<Vec<_>>()
        };
        let (p, q) = (norm(a), norm(b));
        let mut acc = 0.0;
        for j in 0..p.len() {
            acc += (p[j].sqrt() - q[j].sqrt()).powi(2);
        }
        (acc / 2.0).sqrt()
    }

    #[test]
    fn identical_logits_score_zero() {
        let b = batch(&[&[1.0, 2.0, 3.0], &[0.5, -1.0, 0.0]]);
        let s = score_tokens(&b, &b, Indicator::default(), None).unwrap();
        assert_eq!(s.values(), &[0.0, 0.0]);
    }

    #[test]
    fn disjoint_one_hots_score_one() {
        let t = batch(&[&[50.0, 0.0, 0.0]]);
        let s = batch(&[&[0.0, 50.0, 0.0]]);
        let sc = score_tokens(&t, &s, Indicator::default(), None).unwrap();
        assert!((sc.values()[0] - 1.0).abs() < 1e-10);
    }

    #[test]
    fn toy_batch_matches_scalar_oracle() {
        let t: [&[f64]; 3] = [&[1.0, 0.0, -1.0], &[0.2, 0.2, 3.0], &[-2.0, 1.5, 0.1]];
        let s: [&[f64]; 3] = [&[0.0, 1.0, 0.0], &[0.2, 0.3, 2.5], &[1.0, -1.0, 0.0]];
        let sc = score_tokens(&batch(&t), &batch(&s), Indicator::default(), None).unwrap();
        for i in 0..3 {
            assert!((sc.values()[i] - hellinger_oracle(t[i], s[i])).abs() < 1e-10);
        }
    }

    #[test]
    fn masked_positions_carry_no_score() {
        let mut t = batch(&[&[1.0, 0.0], &[0.0, 1.0], &[2.0, 2.0]]);
        let mut s = batch(&[&[0.0, 1.0], &[0.0, 1.0], &[0.0, 2.0]]);
        t.set_mask(vec![false, true, true]).unwrap();
        s.set_mask(vec![false, true, true]).unwrap();
        let sc = score_tokens(&t, &s, Indicator::default(), None).unwrap();
        assert_eq!(sc.positions(), &[1, 2]);
        assert_eq!(sc.len(), 2);
    }

    #[test]
    fn errors() {
        let a = batch(&[&[1.0, 0.0]]);
        let b = batch(&[&[1.0, 0.0], &[0.0, 0.0]]);
        assert!(matches!(
            score_tokens(&a, &b, Indicator::default(), None),
            Err(CoreError::Misaligned(_))
        ));
        assert!(matches!(
            score_tokens(&a, &a, IndicatorKind::CrossEntropy.into(), None),
            Err(CoreError::MissingTargets)
        ));
        let ce = score_tokens(&a, &a, IndicatorKind::CrossEntropy.into(), Some(&[1])).unwrap();
        assert!((ce.values()[0] - (1.0 + 1f64.exp()).ln()).abs() < 1e-12);
    }

    #[test]
    fn all_kinds_produce_nonnegative_scores() {
        let t = batch(&[&[1.0, 0.0, -1.0, 2.0, 0.5, 0.0], &[0.0; 6]]);
        let s = batch(&[&[0.0, 1.0, 0.5, -2.0, 0.0, 1.0], &[3.0, 0.0, 0.0, 0.0, 0.0, 0.0]]);
        for kind in [
            IndicatorKind::Hellinger,
            IndicatorKind::ForwardKl,
            IndicatorKind::ReverseKl,
            IndicatorKind::Js,
            IndicatorKind::TopKRank,
        ] {
            let sc = score_tokens(&t, &s, kind.into(), None).unwrap();
            assert!(sc.values().iter().all(|v| v.is_finite() && *v > 0.0), "{kind:?}");
        }
    }

    #[test]
    fn topk_examples() {
        let p = ProbVector::new(vec![0.4, 0.1, 0.3, 0.2], 1.0).unwrap();
        assert!(topk_rank_agreement(&p, &p, 2).unwrap().abs() < 1e-15);
        // Teacher top-2 is {0, 2}; renormalized teacher [0.8, 0.2] needs p0/(p0+p2) = 0.8.
        let t = ProbVector::new(vec![0.64, 0.1, 0.16, 0.1], 1.0).unwrap();
        let s = ProbVector::new(vec![0.3, 0.2, 0.3, 0.2], 1.0).unwrap();
        let v = topk_rank_agreement(&t, &s, 2).unwrap();
        let want = 0.8 * (0.8f64 / 0.5).ln() + 0.2 * (0.2f64 / 0.5).ln();
        assert!((v - want).abs() < 1e-10);
        assert!((v - 0.1927).abs() < 1e-4);
        let full = topk_rank_agreement(&t, &s, 4).unwrap();
        assert!((full - kl_divergence(&t, &s, 1.0, false).unwrap()).abs() < 1e-12);
        assert!(matches!(topk_rank_agreement(&t, &s, 0), Err(CoreError::InvalidTopK { .. })));
        assert!(topk_rank_agreement(&t, &s, 5).is_err());
    }

    fn logits(n: usize) -> impl Strategy<Value = Vec<f64>> {
        prop::collection::vec(-4.0f64..4.0, n)
    }

    proptest! {
        #[test]
        fn hellinger_symmetric_under_swap((a, b) in (2usize..10).prop_flat_map(|n| (logits(n), logits(n)))) {
            let (t, s) = (batch(&[&a]), batch(&[&b]));
            let ts = score_tokens(&t, &s, Indicator::default(), None).unwrap();
            let st = score_tokens(&s, &t, Indicator::default(), None).unwrap();
            prop_assert_eq!(ts.values(), st.values());
        }

        #[test]
        fn interpolating_toward_teacher_never_increases_score(
            (a, b) in (2usize..10).prop_flat_map(|n| (logits(n), logits(n)))
        ) {
            let p = softmax_with_temperature(&a, 1.0).unwrap();
            let q = softmax_with_temperature(&b, 1.0).unwrap();
            let mut prev = hellinger_distance(&p, &q).unwrap();
            for lambda in [0.25, 0.5, 1.0] {
                let mix: Vec<f64> = q.values().iter().zip(p.values()).map(|(x, y)| (1.0 - lambda) * x + lambda * y).collect();
                let total: f64 = mix.iter().sum();
                let mix = ProbVector::new(mix.iter().map(|v| v / total).collect(), 1.0).unwrap();
                let h = hellinger_distance(&p, &mix).unwrap();
                prop_assert!(h <= prev + 1e-12);
                prev = h;
            }
            prop_assert!(prev < 1e-7);
        }
    }
}
