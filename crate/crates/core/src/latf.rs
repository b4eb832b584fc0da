//! Loss-driven adaptive token focusing: an EMA-loss feedback controller for the
//! fraction of hardest tokens that receive distillation loss.

use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::difficulty::DifficultyScores;
use crate::error::{CoreError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LatfConfig {
    pub beta: f64,
    pub epsilon: f64,
    pub delta: f64,
    pub warmup_steps: usize,
    pub r_min: f64,
}

impl Default for LatfConfig {
    fn default() -> Self {
        Self { beta: 0.97, epsilon: 0.05, delta: 0.05, warmup_steps: 0, r_min: 0.05 }
    }
}

impl LatfConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(CoreError::Config(m.into()));
        if !(self.beta > 0.0 && self.beta < 1.0) {
            return bad("latf.beta must lie in (0, 1)");
        }
        if !(self.epsilon > 0.0 && self.epsilon.is_finite()) {
            return bad("latf.epsilon must be positive");
        }
        if !(self.delta > 0.0 && self.delta < 1.0) {
            return bad("latf.delta must lie in (0, 1)");
        }
        if !(self.r_min > 0.0 && self.r_min <= 1.0) {
            return bad("latf.r_min must lie in (0, 1]");
        }
        Ok(())
    }
}

/// Which rule moved (or held) the ratio at a step.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Branch {
    Warmup,
    Decrease,
    Increase,
    Hold,
    Scheduled,
}

impl Branch {
    pub fn as_str(self) -> &'static str {
        match self {
            Branch::Warmup => "warmup",
            Branch::Decrease => "decrease",
            Branch::Increase => "increase",
            Branch::Hold => "hold",
            Branch::Scheduled => "scheduled",
        }
    }
}

/// Controller state. `ref_loss` is `None` (read as +∞) until the first ratio change.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct FocusState {
    ratio: f64,
    ema_loss: f64,
    ref_loss: Option<f64>,
    step: usize,
}

/// Outcome of one ratio update.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct RatioUpdate {
    pub step: usize,
    pub ratio: f64,
    pub branch: Branch,
    /// The EMA value the decision was based on.
    pub ema_loss: f64,
    pub ref_loss: Option<f64>,
    pub ref_reset: bool,
}

impl FocusState {
    /// Starts at `r = 1` with `initial_ema` as the seed of the moving average.
    pub fn new(initial_ema: f64) -> Result<Self> {
        if !initial_ema.is_finite() {
            return Err(CoreError::Diverged { step: 0, loss: initial_ema });
        }
        Ok(Self { ratio: 1.0, ema_loss: initial_ema, ref_loss: None, step: 0 })
    }

    pub fn ratio(&self) -> f64 {
        self.ratio
    }

    pub fn ema_loss(&self) -> f64 {
        self.ema_loss
    }

    pub fn ref_loss(&self) -> Option<f64> {
        self.ref_loss
    }

    /// Number of ratio updates performed so far.
    pub fn step(&self) -> usize {
        self.step
    }

    /// `L̄ ← β·L̄ + (1−β)·loss`.
    pub fn update_ema(&mut self, loss: f64, config: &LatfConfig) -> Result<f64> {
        if !loss.is_finite() {
            return Err(CoreError::Diverged { step: self.step, loss });
        }
        self.ema_loss = config.beta * self.ema_loss + (1.0 - config.beta) * loss;
        Ok(self.ema_loss)
    }

    /// Advances the step counter and applies the tolerance-band rule against the
    /// current (previous-step) EMA.
    pub fn update_ratio(&mut self, config: &LatfConfig) -> RatioUpdate {
        self.step += 1;
        let ema = self.ema_loss;
        if self.step <= config.warmup_steps {
            self.ratio = 1.0;
            return self.report(Branch::Warmup, ema, false);
        }
        let reference = self.ref_loss.unwrap_or(f64::INFINITY);
        let prev = self.ratio;
        let (next, branch) = if ema < reference * (1.0 - config.epsilon) {
            (prev * (1.0 - config.delta), Branch::Decrease)
        } else if ema > reference * (1.0 + config.epsilon) {
            ((prev * (1.0 + config.delta)).min(1.0), Branch::Increase)
        } else {
            (prev, Branch::Hold)
        };
        self.ratio = next.clamp(config.r_min, 1.0);
        let reset = self.ratio != prev;
        if reset {
            self.ref_loss = Some(ema);
        }
        self.report(branch, ema, reset)
    }

    fn report(&self, branch: Branch, ema_loss: f64, ref_reset: bool) -> RatioUpdate {
        RatioUpdate {
            step: self.step,
            ratio: self.ratio,
            branch,
            ema_loss,
            ref_loss: self.ref_loss,
            ref_reset,
        }
    }
}

/// How the ratio evolves over training.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum RatioSchedule {
    /// Loss-feedback control.
    #[default]
    Latf,
    Fixed { ratio: f64 },
    Linear { from: f64, to: f64 },
    Cosine { from: f64, to: f64 },
}

impl RatioSchedule {
    pub fn validate(&self) -> Result<()> {
        let ok = |r: f64| r > 0.0 && r <= 1.0;
        let fine = match *self {
            RatioSchedule::Latf => true,
            RatioSchedule::Fixed { ratio } => ok(ratio),
            RatioSchedule::Linear { from, to } | RatioSchedule::Cosine { from, to } => {
                ok(from) && ok(to)
            }
        };
        if fine {
            Ok(())
        } else {
            Err(CoreError::Config("ratio schedule values must lie in (0, 1]".into()))
        }
    }
}

/// Every schedule behind one interface. The EMA is maintained in all modes so the
/// metrics stream looks the same; only [`RatioSchedule::Latf`] reads it.
#[derive(Debug, Clone)]
pub struct FocusController {
    schedule: RatioSchedule,
    config: LatfConfig,
    total_steps: usize,
    state: FocusState,
}

impl FocusController {
    pub fn new(
        schedule: RatioSchedule,
        config: LatfConfig,
        total_steps: usize,
        initial_ema: f64,
    ) -> Result<Self> {
        config.validate()?;
        schedule.validate()?;
        Ok(Self { schedule, config, total_steps, state: FocusState::new(initial_ema)? })
    }

    pub fn state(&self) -> &FocusState {
        &self.state
    }

    pub fn config(&self) -> &LatfConfig {
        &self.config
    }

    /// Ratio for the next step. Warm-up pins it to 1 for every schedule; after
    /// warm-up the fixed schedules progress linearly in the remaining steps.
    pub fn next_ratio(&mut self) -> RatioUpdate {
        if self.schedule == RatioSchedule::Latf {
            return self.state.update_ratio(&self.config);
        }
        let st = &mut self.state;
        st.step += 1;
        let warm = self.config.warmup_steps;
        let ema = st.ema_loss;
        if st.step <= warm {
            st.ratio = 1.0;
            return st.report(Branch::Warmup, ema, false);
        }
        let span = self.total_steps.saturating_sub(warm + 1).max(1) as f64;
        let progress = ((st.step - warm - 1) as f64 / span).min(1.0);
        st.ratio = match self.schedule {
            RatioSchedule::Fixed { ratio } => ratio,
            RatioSchedule::Linear { from, to } => from + (to - from) * progress,
            RatioSchedule::Cosine { from, to } => {
                to + (from - to) * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
            }
            RatioSchedule::Latf => unreachable!(),
        };
        st.report(Branch::Scheduled, ema, false)
    }

    pub fn observe_loss(&mut self, loss: f64) -> Result<f64> {
        self.state.update_ema(loss, &self.config)
    }
}

/// `max(1, ceil(n·r))`, capped at `n`.
pub fn selection_size(valid: usize, ratio: f64) -> usize {
    ((valid as f64 * ratio).ceil() as usize).clamp(1, valid.max(1))
}

fn top_k(scored: &mut [(usize, f64)], k: usize) -> impl Iterator<Item = usize> + '_ {
    scored.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    scored[..k].iter().map(|e| e.0)
}

/// Marks the `max(1, ceil(L_valid·r))` highest-scoring valid positions. Ties at
/// the cutoff go to the lower position.
pub fn select_tokens(scores: &DifficultyScores, ratio: f64) -> Result<Vec<bool>> {
    check_ratio(ratio)?;
    if scores.is_empty() {
        return Err(CoreError::NoValidTokens);
    }
    let mut mask = vec![false; scores.mask().len()];
    let mut scored: Vec<(usize, f64)> = scores.iter().collect();
    let k = selection_size(scored.len(), ratio);
    for p in top_k(&mut scored, k) {
        mask[p] = true;
    }
    Ok(mask)
}

/// Like [`select_tokens`] but applies the ratio inside each position range
/// separately (one range per sequence). Ranges without valid tokens select nothing.
pub fn select_tokens_per_group(
    scores: &DifficultyScores,
    ratio: f64,
    groups: &[Range<usize>],
) -> Result<Vec<bool>> {
    check_ratio(ratio)?;
    if scores.is_empty() {
        return Err(CoreError::NoValidTokens);
    }
    let mut mask = vec![false; scores.mask().len()];
    for g in groups {
        let mut scored: Vec<(usize, f64)> = scores.iter().filter(|(p, _)| g.contains(p)).collect();
        if scored.is_empty() {
            continue;
        }
        let k = selection_size(scored.len(), ratio);
        for p in top_k(&mut scored, k) {
            mask[p] = true;
        }
    }
    Ok(mask)
}

fn check_ratio(ratio: f64) -> Result<()> {
    if ratio > 0.0 && ratio <= 1.0 {
        Ok(())
    } else {
        Err(CoreError::Config(format!("ratio {ratio} outside (0, 1]")))
    }
}
