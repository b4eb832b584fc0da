//! Token-group diagnostics: gradient alignment of hard/mid/easy tokens,
//! entropy before and after temperature scaling, and difficulty evolution.

use std::fs;
use std::path::Path;

use adakd_nn::{Graph, LogitBatch, TinyTransformerLM};
use serde::Serialize;

use crate::difficulty::DifficultyScores;
use crate::dist::{entropy, softmax_with_temperature};
use crate::loss::{per_token_divergence, sft_loss, DivergenceKind};
use crate::trainer::PackedBatch;
use crate::{CoreError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Group {
    Hard,
    Mid,
    Easy,
}

impl Group {
    pub const ALL: [Group; 3] = [Group::Hard, Group::Mid, Group::Easy];

    pub fn as_str(self) -> &'static str {
        match self {
            Group::Hard => "hard",
            Group::Mid => "mid",
            Group::Easy => "easy",
        }
    }
}

/// How tokens were assigned to groups, kept in report metadata.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Grouping {
    pub method: String,
    /// Lowest score in the hard group.
    pub hard_min: Option<f64>,
    /// Highest score in the easy group.
    pub easy_max: Option<f64>,
}

/// Per-position labels (`None` for masked positions) and their grouping metadata.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GroupLabels {
    pub labels: Vec<Option<Group>>,
    pub grouping: Grouping,
}

impl GroupLabels {
    pub fn positions(&self, group: Group) -> Vec<usize> {
        (0..self.labels.len()).filter(|&i| self.labels[i] == Some(group)).collect()
    }
}

/// Splits valid positions into score terciles by rank: the top third is hard,
/// the bottom third easy. Ties go to the lower position first.
pub fn tercile_groups(scores: &DifficultyScores) -> GroupLabels {
    let mut order: Vec<(usize, f64)> = scores.iter().collect();
    order.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    let n = order.len();
    let mut labels = vec![None; scores.mask().len()];
    let (mut hard_min, mut easy_max) = (None::<f64>, None::<f64>);
    for (rank, &(pos, s)) in order.iter().enumerate() {
        let g = match rank * 3 / n {
            0 => Group::Hard,
            1 => Group::Mid,
            _ => Group::Easy,
        };
        match g {
            Group::Hard => hard_min = Some(hard_min.map_or(s, |m| m.min(s))),
            Group::Easy => easy_max = Some(easy_max.map_or(s, |m| m.max(s))),
            Group::Mid => {}
        }
        labels[pos] = Some(g);
    }
    GroupLabels { labels, grouping: Grouping { method: "terciles".into(), hard_min, easy_max } }
}

/// Cosine similarity, clamped to [-1, 1]; `None` when either vector is zero.
pub fn cosine(a: &[f64], b: &[f64]) -> Option<f64> {
    assert_eq!(a.len(), b.len(), "cosine of vectors with different lengths");
    let (na, nb) = (norm(a), norm(b));
    if na == 0.0 || nb == 0.0 {
        return None;
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    Some((dot / (na * nb)).clamp(-1.0, 1.0))
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GroupGradient {
    pub group: Group,
    pub tokens: usize,
    pub norm: f64,
    /// `‖g_group‖ / Σ‖g_j‖` over the present groups.
    pub norm_share: f64,
    pub cos_batch: Option<f64>,
    pub cos_sft: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct HistogramBins {
    pub lo: f64,
    pub hi: f64,
    pub bins: usize,
}

impl HistogramBins {
    pub fn centers(&self) -> Vec<f64> {
        let w = (self.hi - self.lo) / self.bins as f64;
        (0..self.bins).map(|i| self.lo + (i as f64 + 0.5) * w).collect()
    }

    fn count(&self, values: &[f64]) -> Vec<u64> {
        let mut out = vec![0; self.bins];
        let w = (self.hi - self.lo) / self.bins as f64;
        for v in values {
            let i = ((v - self.lo) / w).floor().max(0.0) as usize;
            out[i.min(self.bins - 1)] += 1;
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GroupEntropy {
    pub group: Group,
    pub tokens: usize,
    pub mean_before: f64,
    pub mean_after: f64,
    pub hist_before: Vec<u64>,
    pub hist_after: Vec<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EntropyGap {
    pub before: f64,
    pub after: f64,
}

/// Diagnostics over token groups. Groups with no tokens are absent.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GroupDiagnostics {
    pub grouping: Grouping,
    pub labels: Vec<Option<Group>>,
    pub gradients: Vec<GroupGradient>,
    pub bins: Option<HistogramBins>,
    pub entropy: Vec<GroupEntropy>,
    /// `mean_hard − mean_easy` before and after scaling, when both groups exist.
    pub entropy_gap: Option<EntropyGap>,
    /// Reference batch for the SFT gradient.
    pub sft_reference: Option<String>,
}

impl GroupDiagnostics {
    fn empty(labels: GroupLabels) -> Self {
        Self {
            grouping: labels.grouping,
            labels: labels.labels,
            gradients: Vec::new(),
            bins: None,
            entropy: Vec::new(),
            entropy_gap: None,
            sft_reference: None,
        }
    }

    pub fn gradient(&self, group: Group) -> Option<&GroupGradient> {
        self.gradients.iter().find(|g| g.group == group)
    }

    pub fn entropy_of(&self, group: Group) -> Option<&GroupEntropy> {
        self.entropy.iter().find(|g| g.group == group)
    }

    /// Plot-ready `(series, x, y)` rows.
    pub fn csv_rows(&self) -> Vec<(String, f64, f64)> {
        let mut rows = Vec::new();
        for (x, g) in self.gradients.iter().enumerate() {
            let name = g.group.as_str();
            rows.push((format!("norm_share_{name}"), x as f64, g.norm_share));
            if let Some(c) = g.cos_batch {
                rows.push((format!("cos_batch_{name}"), x as f64, c));
            }
            if let Some(c) = g.cos_sft {
                rows.push((format!("cos_sft_{name}"), x as f64, c));
            }
        }
        if let Some(bins) = &self.bins {
            let centers = bins.centers();
            for e in &self.entropy {
                let name = e.group.as_str();
                for (i, &x) in centers.iter().enumerate() {
                    rows.push((format!("entropy_before_{name}"), x, e.hist_before[i] as f64));
                    rows.push((format!("entropy_after_{name}"), x, e.hist_after[i] as f64));
                }
            }
        }
        rows
    }
}

/// Inputs of a gradient alignment report: a packed batch and the teacher
/// logits aligned with it.
#[derive(Debug, Clone, Copy)]
pub struct AlignmentBatch<'a> {
    pub batch: &'a PackedBatch,
    pub teacher: &'a LogitBatch,
    pub divergence: DivergenceKind,
}

/// Gradient alignment with tercile groups of `scores`.
pub fn gradient_alignment_report(
    model: &TinyTransformerLM,
    input: AlignmentBatch<'_>,
    scores: &DifficultyScores,
) -> Result<GroupDiagnostics> {
    gradient_alignment_with_labels(model, input, tercile_groups(scores))
}

/// Backpropagates each group's share of the unselected τ = 1 divergence
/// separately. Group losses are normalized by the total valid count, so the
/// group gradients sum to the batch gradient.
pub fn gradient_alignment_with_labels(
    model: &TinyTransformerLM,
    input: AlignmentBatch<'_>,
    labels: GroupLabels,
) -> Result<GroupDiagnostics> {
    let batch = input.batch;
    if labels.labels.len() != batch.rows() || input.teacher.positions() != batch.rows() {
        return Err(CoreError::Misaligned(format!(
            "{} labels, {} teacher rows, {} batch rows",
            labels.labels.len(),
            input.teacher.positions(),
            batch.rows()
        )));
    }
    let valid: Vec<usize> = (0..batch.rows()).filter(|&i| batch.mask[i]).collect();
    if valid.is_empty() {
        return Err(CoreError::NoValidTokens);
    }
    let mut model = model.clone();
    let n = valid.len() as f64;
    let mut grad_of = |rows: Option<&[usize]>| -> Result<Vec<f64>> {
        model.zero_grads();
        let mut g = Graph::new();
        let out = model.forward_packed(&mut g, &batch.input_refs())?;
        let loss = match rows {
            Some(rows) => {
                let zs = g.gather_rows(out.logits, rows);
                let ls = g.log_softmax_rows(zs);
                let zt: Vec<f64> = rows.iter().flat_map(|&i| input.teacher.row(i).iter().copied()).collect();
                let zt = g.constant(rows.len(), input.teacher.vocab(), zt);
                let lt = g.log_softmax_rows(zt);
                let per = per_token_divergence(&mut g, ls, lt, input.divergence);
                let total = g.sum(per);
                g.scale(total, 1.0 / n)
            }
            None => sft_loss(&mut g, out.logits, &batch.targets, &batch.mask)?,
        };
        g.backward(loss, model.params_mut())?;
        Ok(model.params().flat_grad())
    };
    let batch_grad = grad_of(Some(&valid))?;
    let sft_grad = grad_of(None)?;
    let mut present = Vec::new();
    for group in Group::ALL {
        let rows = labels.positions(group);
        if rows.is_empty() {
            continue;
        }
        let grad = grad_of(Some(&rows))?;
        present.push((group, rows.len(), grad));
    }
    let total: f64 = present.iter().map(|(_, _, g)| norm(g)).sum();
    let mut diag = GroupDiagnostics::empty(labels);
    diag.sft_reference = Some("same batch".into());
    diag.gradients = present
        .iter()
        .map(|(group, tokens, grad)| {
            let nrm = norm(grad);
            GroupGradient {
                group: *group,
                tokens: *tokens,
                norm: nrm,
                norm_share: if total > 0.0 { nrm / total } else { 0.0 },
                cos_batch: cosine(grad, &batch_grad),
                cos_sft: cosine(grad, &sft_grad),
            }
        })
        .collect();
    Ok(diag)
}

/// Student entropy at τ = 1 and at the assigned per-token temperatures,
/// grouped by tercile of `scores`.
///
/// `temps` holds one temperature per valid position of `student`, in position
/// order. Histograms use `bins` equal buckets over `[0, ln V]`.
pub fn entropy_histogram_report(
    scores: &DifficultyScores,
    student: &LogitBatch,
    temps: &[f64],
    bins: usize,
) -> Result<GroupDiagnostics> {
    if scores.mask() != student.mask() {
        return Err(CoreError::Misaligned("score and logit masks differ".into()));
    }
    if temps.len() != scores.len() {
        return Err(CoreError::Misaligned(format!("{} temperatures for {} tokens", temps.len(), scores.len())));
    }
    if bins == 0 {
        return Err(CoreError::Config("histogram needs at least one bin".into()));
    }
    let labels = tercile_groups(scores);
    let mut before = Vec::with_capacity(temps.len());
    let mut after = Vec::with_capacity(temps.len());
    for (&pos, &t) in scores.positions().iter().zip(temps) {
        before.push(entropy(&softmax_with_temperature(student.row(pos), 1.0)?));
        after.push(entropy(&softmax_with_temperature(student.row(pos), t)?));
    }
    let hist = HistogramBins { lo: 0.0, hi: (student.vocab() as f64).ln(), bins };
    let mut diag = GroupDiagnostics::empty(labels);
    for group in Group::ALL {
        let idx: Vec<usize> = (0..scores.len())
            .filter(|&k| diag.labels[scores.positions()[k]] == Some(group))
            .collect();
        if idx.is_empty() {
            continue;
        }
        let b: Vec<f64> = idx.iter().map(|&k| before[k]).collect();
        let a: Vec<f64> = idx.iter().map(|&k| after[k]).collect();
        diag.entropy.push(GroupEntropy {
            group,
            tokens: idx.len(),
            mean_before: b.iter().sum::<f64>() / b.len() as f64,
            mean_after: a.iter().sum::<f64>() / a.len() as f64,
            hist_before: hist.count(&b),
            hist_after: hist.count(&a),
        });
    }
    if let (Some(h), Some(e)) = (diag.entropy_of(Group::Hard), diag.entropy_of(Group::Easy)) {
        diag.entropy_gap = Some(EntropyGap {
            before: h.mean_before - e.mean_before,
            after: h.mean_after - e.mean_after,
        });
    }
    diag.bins = Some(hist);
    Ok(diag)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvolutionPoint {
    pub step: usize,
    pub mean: f64,
    pub hard_mean: Option<f64>,
    pub mid_mean: Option<f64>,
    pub easy_mean: Option<f64>,
}

/// Difficulty of fixed token groups across checkpoints.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvolutionReport {
    /// Groups are the terciles at the first checkpoint and stay fixed.
    pub grouping: Grouping,
    pub points: Vec<EvolutionPoint>,
}

impl EvolutionReport {
    pub fn csv_rows(&self) -> Vec<(String, f64, f64)> {
        let mut rows = Vec::new();
        for p in &self.points {
            let x = p.step as f64;
            rows.push(("mean".to_string(), x, p.mean));
            for (name, v) in [("hard", p.hard_mean), ("mid", p.mid_mean), ("easy", p.easy_mean)] {
                if let Some(v) = v {
                    rows.push((name.to_string(), x, v));
                }
            }
        }
        rows
    }
}

/// Tracks mean scores of the tercile groups formed at the first checkpoint.
/// All checkpoints must score the same positions.
pub fn difficulty_evolution(checkpoints: &[(usize, DifficultyScores)]) -> Result<EvolutionReport> {
    let Some((_, first)) = checkpoints.first() else {
        return Err(CoreError::Eval("no checkpoints to track".into()));
    };
    let labels = tercile_groups(first);
    let mut points = Vec::with_capacity(checkpoints.len());
    for (step, scores) in checkpoints {
        if scores.mask() != first.mask() {
            return Err(CoreError::Misaligned(format!("checkpoint {step} scores different positions")));
        }
        let mean_of = |group: Option<Group>| {
            let v: Vec<f64> =
                scores.iter().filter(|(p, _)| group.is_none() || labels.labels[*p] == group).map(|(_, s)| s).collect();
            (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
        };
        points.push(EvolutionPoint {
            step: *step,
            mean: mean_of(None).unwrap_or(0.0),
            hard_mean: mean_of(Some(Group::Hard)),
            mid_mean: mean_of(Some(Group::Mid)),
            easy_mean: mean_of(Some(Group::Easy)),
        });
    }
    Ok(EvolutionReport { grouping: labels.grouping, points })
}

/// Writes `<name>.json` and the plot-ready `<name>.csv` (`series,x,y`).
pub fn write_report<T: Serialize>(dir: &Path, name: &str, report: &T, rows: &[(String, f64, f64)]) -> Result<()> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join(format!("{name}.json")), serde_json::to_string_pretty(report)?)?;
    let mut w = csv::Writer::from_path(dir.join(format!("{name}.csv")))?;
    w.write_record(["series", "x", "y"])?;
    for (s, x, y) in rows {
        w.write_record([s.clone(), x.to_string(), y.to_string()])?;
    }
    w.flush()?;
    Ok(())
}
