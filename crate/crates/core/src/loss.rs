//! Selective, per-token temperature-scaled distillation objective.

use adakd_nn::{Graph, LogitBatch, Var};
use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum DivergenceKind {
    /// `KL(p ‖ q)`, teacher first.
    ForwardKl,
    /// `KL(q ‖ p)`, student first.
    #[default]
    ReverseKl,
    Js,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DistillObjective {
    pub divergence: DivergenceKind,
    pub apply_tau_sq: bool,
    /// Weight of the NLL term in `(1−λ)·distill + λ·sft`.
    pub sft_weight: f64,
}

impl Default for DistillObjective {
    fn default() -> Self {
        Self { divergence: DivergenceKind::ReverseKl, apply_tau_sq: true, sft_weight: 0.0 }
    }
}

impl DistillObjective {
    pub fn validate(&self) -> Result<()> {
        if (0.0..=1.0).contains(&self.sft_weight) {
            Ok(())
        } else {
            Err(CoreError::Config(format!(
                "objective.sft_weight must lie in [0, 1], got {}",
                self.sft_weight
            )))
        }
    }
}

/// Row-wise divergence between student log-probs `ls` and teacher log-probs `lt`,
/// both `[k, V]`; returns `[k, 1]`.
pub fn per_token_divergence(g: &mut Graph, ls: Var, lt: Var, kind: DivergenceKind) -> Var {
    match kind {
        DivergenceKind::ReverseKl => {
            let q = g.exp(ls);
            let d = g.sub(ls, lt);
            let w = g.mul(q, d);
            g.sum_rows(w)
        }
        DivergenceKind::ForwardKl => {
            let p = g.exp(lt);
            let d = g.sub(lt, ls);
            let w = g.mul(p, d);
            g.sum_rows(w)
        }
        DivergenceKind::Js => {
            let p = g.exp(lt);
            let q = g.exp(ls);
            let m = g.add(p, q);
            let m = g.scale(m, 0.5);
            let lm = g.ln(m);
            let dp = g.sub(lt, lm);
            let dq = g.sub(ls, lm);
            let a = g.mul(p, dp);
            let b = g.mul(q, dq);
            let ab = g.add(a, b);
            let rows = g.sum_rows(ab);
            g.scale(rows, 0.5)
        }
    }
}

fn selected_positions(mask: &[bool]) -> Vec<usize> {
    (0..mask.len()).filter(|&i| mask[i]).collect()
}

/// Handles into the graph built by [`selective_distill_terms`].
#[derive(Debug, Clone, Copy)]
pub struct SelectiveTerms {
    pub loss: Var,
    /// `[k, 1]` constant node holding the temperatures.
    pub temperatures: Var,
    /// `[k, 1]` per-token divergences, τ² included when enabled.
    pub per_token: Var,
}

/// `(1/k)·Σ_selected τ_i²·D(q^{τ_i}, p^{τ_i})` over the `k` positions set in `mask`.
///
/// `student` is a `[N, V]` node aligned row-for-row with `teacher`; `temps` holds
/// one temperature per selected position in ascending position order. Teacher
/// logits and temperatures enter as constants.
pub fn selective_distill_loss(
    g: &mut Graph,
    teacher: &LogitBatch,
    student: Var,
    mask: &[bool],
    temps: &[f64],
    objective: &DistillObjective,
) -> Result<Var> {
    Ok(selective_distill_terms(g, teacher, student, mask, temps, objective)?.loss)
}

/// [`selective_distill_loss`] exposing intermediate nodes.
pub fn selective_distill_terms(
    g: &mut Graph,
    teacher: &LogitBatch,
    student: Var,
    mask: &[bool],
    temps: &[f64],
    objective: &DistillObjective,
) -> Result<SelectiveTerms> {
    let (rows, vocab) = g.dims(student);
    if rows != teacher.positions() || vocab != teacher.vocab() || mask.len() != rows {
        return Err(CoreError::Misaligned(format!(
            "student {rows}x{vocab}, teacher {}x{}, mask {}",
            teacher.positions(),
            teacher.vocab(),
            mask.len()
        )));
    }
    let sel = selected_positions(mask);
    if sel.is_empty() {
        return Err(CoreError::EmptySelection);
    }
    if temps.len() != sel.len() {
        return Err(CoreError::Misaligned(format!(
            "{} temperatures for {} selected tokens",
            temps.len(),
            sel.len()
        )));
    }
    if let Some(&t) = temps.iter().find(|t| !(t.is_finite() && **t > 0.0)) {
        return Err(CoreError::InvalidTemperature(t));
    }
    let k = sel.len();
    let zs = g.gather_rows(student, &sel);
    let zt: Vec<f64> = sel.iter().flat_map(|&i| teacher.row(i).iter().copied()).collect();
    let zt = g.constant(k, vocab, zt);
    let tau = g.constant(k, 1, temps.to_vec());
    let us = g.div_rows(zs, tau);
    let ut = g.div_rows(zt, tau);
    let ls = g.log_softmax_rows(us);
    let lt = g.log_softmax_rows(ut);
    let mut per = per_token_divergence(g, ls, lt, objective.divergence);
    if objective.apply_tau_sq {
        let sq = g.constant(k, 1, temps.iter().map(|t| t * t).collect());
        per = g.mul_rows(per, sq);
    }
    let total = g.sum(per);
    let loss = g.scale(total, 1.0 / k as f64);
    Ok(SelectiveTerms { loss, temperatures: tau, per_token: per })
}

/// Mean negative log-likelihood of `targets` over the positions set in `mask`.
/// `targets` has one entry per row of `student`; unmasked entries are ignored.
pub fn sft_loss(g: &mut Graph, student: Var, targets: &[usize], mask: &[bool]) -> Result<Var> {
    let (rows, vocab) = g.dims(student);
    if targets.len() != rows || mask.len() != rows {
        return Err(CoreError::Misaligned(format!(
            "{} targets and {} mask entries for {rows} rows",
            targets.len(),
            mask.len()
        )));
    }
    let sel = selected_positions(mask);
    if sel.is_empty() {
        return Err(CoreError::EmptySelection);
    }
    let ids: Vec<usize> = sel.iter().map(|&i| targets[i]).collect();
    if let Some(&id) = ids.iter().find(|&&id| id >= vocab) {
        return Err(CoreError::TargetOutOfRange { id, vocab });
    }
    let z = g.gather_rows(student, &sel);
    let lp = g.log_softmax_rows(z);
    let picked = g.pick_per_row(lp, &ids);
    let total = g.sum(picked);
    Ok(g.scale(total, -1.0 / sel.len() as f64))
}

/// Convex mix `(1−λ)·distill + λ·sft`; returns `distill` untouched when `λ = 0`.
pub fn mix_sft(g: &mut Graph, distill: Var, sft: Option<Var>, weight: f64) -> Var {
    match sft {
        Some(s) if weight > 0.0 => {
            let a = g.scale(distill, 1.0 - weight);
            let b = g.scale(s, weight);
            g.add(a, b)
        }
        _ => distill,
    }
}
