//! Inverse difficulty temperature scaling: harder tokens get sharper targets.

use adakd_nn::{Graph, LogitBatch, ParamStore};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dist::{hellinger_distance, softmax_with_temperature};
use crate::error::{CoreError, Result};
use crate::loss::{selective_distill_loss, DistillObjective, DivergenceKind};

/// Scores below this are treated as this value before taking logs.
pub const SCORE_FLOOR: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum SignMode {
    /// `τ = τ_base·exp(−c·ŝ)`.
    #[default]
    Inverse,
    /// `τ = τ_base·exp(+c·ŝ)`.
    Flipped,
}

/// Which scores define the median in the normalization.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum MedianScope {
    #[default]
    Selected,
    AllValid,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TemperatureStrategy {
    Idts {
        tau_base: f64,
        c: f64,
        sign_mode: SignMode,
        median_scope: MedianScope,
    },
    Fixed {
        temperature: f64,
    },
}

impl Default for TemperatureStrategy {
    fn default() -> Self {
        TemperatureStrategy::Idts {
            tau_base: 1.0,
            c: 0.5,
            sign_mode: SignMode::Inverse,
            median_scope: MedianScope::Selected,
        }
    }
}

impl TemperatureStrategy {
    /// The single temperature used by the "global low temperature" baseline.
    pub fn global_low() -> Self {
        TemperatureStrategy::Fixed { temperature: (-0.5f64).exp() }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = match *self {
            TemperatureStrategy::Idts { tau_base, c, .. } => {
                tau_base.is_finite() && tau_base > 0.0 && c.is_finite() && c >= 0.0
            }
            TemperatureStrategy::Fixed { temperature } => {
                temperature.is_finite() && temperature > 0.0
            }
        };
        if ok {
            Ok(())
        } else {
            Err(CoreError::Config(format!("invalid temperature strategy {self:?}")))
        }
    }

    pub fn median_scope(&self) -> MedianScope {
        match *self {
            TemperatureStrategy::Idts { median_scope, .. } => median_scope,
            TemperatureStrategy::Fixed { .. } => MedianScope::Selected,
        }
    }

    /// Temperatures for the `selected` scores. `reference` supplies the median
    /// (pass `selected` itself for the default scope). Learning states are
    /// computed in every mode so reports can split hard and easy tokens.
    pub fn assign(&self, selected: &[f64], reference: &[f64]) -> TemperatureAssignment {
        let states = normalize_scores_against(selected, reference);
        match *self {
            TemperatureStrategy::Idts { tau_base, c, sign_mode, .. } => {
                assign_temperatures(&states, tau_base, c, sign_mode)
            }
            TemperatureStrategy::Fixed { temperature } => TemperatureAssignment {
                temps: vec![temperature; states.len()],
                states,
            },
        }
    }
}

/// Per-token temperatures (constants to backprop) and the learning states behind them.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TemperatureAssignment {
    pub temps: Vec<f64>,
    pub states: Vec<f64>,
}

/// Median; even counts average the two central values. Empty input gives 0.
pub fn median(values: &[f64]) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// `ŝ_i = tanh(ln(s_i / median(s)))` with scores floored at [`SCORE_FLOOR`].
pub fn normalize_scores(scores: &[f64]) -> Vec<f64> {
    normalize_scores_against(scores, scores)
}

/// As [`normalize_scores`] but with the median taken over `reference`.
pub fn normalize_scores_against(scores: &[f64], reference: &[f64]) -> Vec<f64> {
    let floored: Vec<f64> = reference.iter().map(|s| s.max(SCORE_FLOOR)).collect();
    let med = median(&floored);
    if med <= SCORE_FLOOR {
        return vec![0.0; scores.len()];
    }
    scores.iter().map(|s| (s.max(SCORE_FLOOR) / med).ln().tanh()).collect()
}

pub fn assign_temperatures(states: &[f64], tau_base: f64, c: f64, mode: SignMode) -> TemperatureAssignment {
    let sign = match mode {
        SignMode::Inverse => -1.0,
        SignMode::Flipped => 1.0,
    };
    TemperatureAssignment {
        temps: states.iter().map(|s| tau_base * (sign * c * s).exp()).collect(),
        states: states.to_vec(),
    }
}

/// Per-step temperature statistics for the metrics stream. Hard tokens have
/// `ŝ > 0`, easy tokens `ŝ < 0`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct TemperatureSummary {
    pub min: f64,
    pub median: f64,
    pub max: f64,
    pub hard_mean: Option<f64>,
    pub easy_mean: Option<f64>,
}

pub fn summarize(assign: &TemperatureAssignment) -> TemperatureSummary {
    let t = &assign.temps;
    let mean_where = |f: &dyn Fn(f64) -> bool| {
        let v: Vec<f64> = t.iter().zip(&assign.states).filter(|(_, s)| f(**s)).map(|(t, _)| *t).collect();
        (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
    };
    TemperatureSummary {
        min: t.iter().copied().fold(f64::INFINITY, f64::min),
        median: median(t),
        max: t.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        hard_mean: mean_where(&|s| s > 0.0),
        easy_mean: mean_where(&|s| s < 0.0),
    }
}

/// One synthetic token pair evaluated at one temperature.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ScalingPoint {
    /// Hellinger difficulty at τ = 1.
    pub score: f64,
    pub tau: f64,
    /// `‖∂D/∂z_q‖²` of the unscaled divergence at `tau`.
    pub grad_norm_sq: f64,
}

/// Least-squares fit of `ln‖∇‖²` on `ln(s²/τ⁴)`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ScalingFit {
    pub slope: f64,
    pub intercept: f64,
    pub r_squared: f64,
    pub points: Vec<ScalingPoint>,
}

/// Squared gradient norm of the unscaled divergence with respect to the student
/// logits of one token at temperature `tau`.
pub fn divergence_grad_norm_sq(
    teacher: &[f64],
    student: &[f64],
    tau: f64,
    divergence: DivergenceKind,
) -> Result<f64> {
    let v = teacher.len();
    let tb = LogitBatch::dense(v, teacher.to_vec())?;
    let mut g = Graph::new();
    let s = g.leaf(1, v, student.to_vec());
    let obj = DistillObjective { divergence, apply_tau_sq: false, sft_weight: 0.0 };
    let loss = selective_distill_loss(&mut g, &tb, s, &[true], &[tau], &obj)?;
    g.backward(loss, &mut ParamStore::new())?;
    Ok(g.grad_of(s).map_or(0.0, |gr| gr.iter().map(|x| x * x).sum()))
}

/// Token pairs with a fixed logit discrepancy: teacher logits are small random
/// values and the student is the teacher plus a random direction of norm `gap`.
pub fn synthetic_pairs(seed: u64, count: usize, vocab: usize, gaps: &[f64]) -> Vec<(Vec<f64>, Vec<f64>)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(count * gaps.len());
    for _ in 0..count {
        let teacher: Vec<f64> = (0..vocab).map(|_| rng.random_range(-0.25..0.25)).collect();
        let dir: Vec<f64> = (0..vocab).map(|_| rng.random_range(-1.0..1.0)).collect();
        let norm = dir.iter().map(|d| d * d).sum::<f64>().sqrt();
        for &gap in gaps {
            let student = teacher.iter().zip(&dir).map(|(t, d)| t + gap * d / norm).collect();
            out.push((teacher.clone(), student));
        }
    }
    out
}

/// Evaluates every pair at every temperature and fits the scaling law.
pub fn gradient_scaling_fit(
    pairs: &[(Vec<f64>, Vec<f64>)],
    temps: &[f64],
    divergence: DivergenceKind,
) -> Result<ScalingFit> {
    let mut points = Vec::new();
    for (t, s) in pairs {
        let score = hellinger_distance(&softmax_with_temperature(t, 1.0)?, &softmax_with_temperature(s, 1.0)?)?;
        for &tau in temps {
            let grad_norm_sq = divergence_grad_norm_sq(t, s, tau, divergence)?;
            points.push(ScalingPoint { score, tau, grad_norm_sq });
        }
    }
    let xy: Vec<(f64, f64)> = points
        .iter()
        .filter(|p| p.score > 0.0 && p.grad_norm_sq > 0.0)
        .map(|p| ((p.score * p.score / p.tau.powi(4)).ln(), p.grad_norm_sq.ln()))
        .collect();
    if xy.len() < 2 {
        return Err(CoreError::Eval("scaling fit needs at least two usable points".into()));
    }
    let (slope, intercept, r_squared) = least_squares(&xy);
    Ok(ScalingFit { slope, intercept, r_squared, points })
}

/// Ordinary least squares `y = a·x + b`; returns `(a, b, r²)`.
pub fn least_squares(xy: &[(f64, f64)]) -> (f64, f64, f64) {
    let n = xy.len() as f64;
    let mx = xy.iter().map(|p| p.0).sum::<f64>() / n;
    let my = xy.iter().map(|p| p.1).sum::<f64>() / n;
    let sxx: f64 = xy.iter().map(|p| (p.0 - mx).powi(2)).sum();
    let sxy: f64 = xy.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let syy: f64 = xy.iter().map(|p| (p.1 - my).powi(2)).sum();
    let slope = if sxx > 0.0 { sxy / sxx } else { 0.0 };
    let r2 = if sxx > 0.0 && syy > 0.0 { sxy * sxy / (sxx * syy) } else { 0.0 };
    (slope, my - slope * mx, r2)
}
