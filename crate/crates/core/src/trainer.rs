//! Teacher pre-training and the adaptive distillation loop.

use std::fs;
use std::ops::Range;
use std::path::{Path, PathBuf};

use adakd_nn::{checkpoint, Graph, LogitBatch, OptimizerState, TinyTransformerLM, Var};
use serde::Serialize;

use crate::config::{DistillRunConfig, SelectionScope, TeacherSection};
use crate::data::{
    load_dataset, split_by_prompt_hash, Batcher, ByteTokenizer, Example, PromptResponsePair,
    SyntheticCorpus,
};
use crate::difficulty::{score_tokens, DifficultyScores};
use crate::error::{CoreError, Result};
use crate::eval::{evaluate_model, DecodeConfig, EvalReport};
use crate::idts::{summarize, MedianScope, TemperatureAssignment, TemperatureSummary};
use crate::latf::{select_tokens, select_tokens_per_group, FocusController};
use crate::loss::{mix_sft, selective_distill_loss, sft_loss};

/// Salt separating the pre-pass batch order from the training order.
const PREPASS_SALT: u64 = 0x5EED_0F_E3A;
/// Salt separating the warm-start batch order from the training order.
const WARM_START_SALT: u64 = 0x5EED_57A7;

#[derive(Debug, Clone)]
pub struct PreparedData {
    pub train: Vec<PromptResponsePair>,
    pub val: Vec<PromptResponsePair>,
    pub dropped_empty: usize,
    pub dropped_too_long: usize,
}

/// Loads the configured dataset (or generates the synthetic corpus) and splits
/// off the validation set.
pub fn prepare_data(cfg: &DistillRunConfig) -> Result<PreparedData> {
    let tok = ByteTokenizer;
    let ctx = cfg.teacher.model.context_length.min(cfg.student.context_length);
    let (pairs, dropped_empty, mut dropped_too_long) = match &cfg.data.path {
        Some(p) => {
            let d = load_dataset(p, &tok, ctx)?;
            (d.pairs, d.dropped_empty, d.dropped_too_long)
        }
        None => {
            let corpus = SyntheticCorpus::new(&cfg.data.synthetic_tasks)?;
            (corpus.generate(cfg.data.synthetic_seed, cfg.data.synthetic_examples, &tok), 0, 0)
        }
    };
    let before = pairs.len();
    let pairs: Vec<_> = pairs.into_iter().filter(|p| p.input_len() <= ctx).collect();
    dropped_too_long += before - pairs.len();
    let (train, val) = split_by_prompt_hash(pairs, cfg.data.validation_fraction);
    if train.is_empty() {
        return Err(CoreError::Dataset("no training examples after the split".into()));
    }
    Ok(PreparedData { train, val, dropped_empty, dropped_too_long })
}

/// Sequences packed row-wise for one forward pass.
#[derive(Debug, Clone)]
pub struct PackedBatch {
    pub inputs: Vec<Vec<usize>>,
    pub targets: Vec<usize>,
    pub mask: Vec<bool>,
    /// Row range of each sequence.
    pub groups: Vec<Range<usize>>,
}

impl PackedBatch {
    pub fn new(examples: &[&Example]) -> Self {
        let mut b = PackedBatch { inputs: Vec::new(), targets: Vec::new(), mask: Vec::new(), groups: Vec::new() };
        for e in examples {
            let start = b.targets.len();
            b.inputs.push(e.input.clone());
            b.targets.extend_from_slice(&e.targets);
            b.mask.extend_from_slice(&e.mask);
            b.groups.push(start..b.targets.len());
        }
        b
    }

    pub fn rows(&self) -> usize {
        self.targets.len()
    }

    pub fn input_refs(&self) -> Vec<&[usize]> {
        self.inputs.iter().map(Vec::as_slice).collect()
    }
}

/// Frozen-teacher logits for every training example, computed once.
#[derive(Debug, Clone)]
pub struct TeacherCache {
    vocab: usize,
    rows: Vec<Vec<f64>>,
}

impl TeacherCache {
    pub fn build(teacher: &TinyTransformerLM, examples: &[Example]) -> Result<Self> {
        let mut rows = Vec::with_capacity(examples.len());
        for chunk in examples.chunks(32) {
            let refs: Vec<&[usize]> = chunk.iter().map(|e| e.input.as_slice()).collect();
            for lb in teacher.forward_lm_batch(&refs)? {
                rows.push(lb.values().to_vec());
            }
        }
        Ok(Self { vocab: teacher.config().vocab_size, rows })
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    /// Teacher logits for a packed batch of example indices.
    pub fn batch(&self, indices: &[usize], mask: &[bool]) -> Result<LogitBatch> {
        let values: Vec<f64> = indices.iter().flat_map(|&i| self.rows[i].iter().copied()).collect();
        Ok(LogitBatch::new(self.vocab, values, mask.to_vec())?)
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct SftStep {
    pub step: usize,
    pub loss: f64,
    pub ema_loss: f64,
}

#[derive(Debug, Clone)]
pub struct TeacherOutcome {
    pub model: TinyTransformerLM,
    pub trace: Vec<SftStep>,
}

/// Mean NLL of the response tokens of a packed batch.
fn batch_nll(model: &TinyTransformerLM, g: &mut Graph, batch: &PackedBatch) -> Result<Var> {
    let out = model.forward_packed(g, &batch.input_refs())?;
    sft_loss(g, out.logits, &batch.targets, &batch.mask)
}

/// Options for [`sft_train`].
#[derive(Debug, Clone, Copy)]
pub struct SftSchedule {
    pub steps: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub seed: u64,
    /// Stop once the smoothed loss fails to improve by 0.1% for this many
    /// steps (0 disables).
    pub patience: usize,
}

/// NLL training on response tokens with Adam.
pub fn sft_train(model: &mut TinyTransformerLM, examples: &[Example], sched: SftSchedule) -> Result<Vec<SftStep>> {
    let mut trace = Vec::with_capacity(sched.steps);
    if sched.steps == 0 {
        return Ok(trace);
    }
    let mut opt = OptimizerState::new(adakd_nn::OptimizerKind::default(), sched.learning_rate, model.params());
    let mut batcher = Batcher::new(examples.len(), sched.batch_size, sched.seed)?;
    let mut ema = f64::NAN;
    let (mut best, mut since_best) = (f64::INFINITY, 0usize);
    for step in 1..=sched.steps {
        let idx = batcher.next_batch();
        let batch = PackedBatch::new(&idx.iter().map(|&i| &examples[i]).collect::<Vec<_>>());
        let mut g = Graph::new();
        let loss = batch_nll(model, &mut g, &batch)?;
        let value = g.scalar(loss);
        if !value.is_finite() {
            return Err(CoreError::Diverged { step, loss: value });
        }
        g.backward(loss, model.params_mut())?;
        opt.step(model.params_mut())?;
        model.zero_grads();
        ema = if ema.is_nan() { value } else { 0.98 * ema + 0.02 * value };
        trace.push(SftStep { step, loss: value, ema_loss: ema });
        if ema < best * (1.0 - 1e-3) {
            best = ema;
            since_best = 0;
        } else {
            since_best += 1;
            if sched.patience > 0 && since_best >= sched.patience {
                break;
            }
        }
    }
    Ok(trace)
}

/// Trains the teacher by NLL on responses. Writes `teacher.ckpt` and
/// `teacher_metrics.csv` into `out` when given.
pub fn train_teacher(cfg: &TeacherSection, train: &[PromptResponsePair], out: Option<&Path>) -> Result<TeacherOutcome> {
    let mut model = TinyTransformerLM::new(cfg.model.clone(), cfg.seed)?;
    let examples: Vec<Example> = train.iter().map(PromptResponsePair::to_example).collect();
    let sched = SftSchedule {
        steps: cfg.steps,
        learning_rate: cfg.learning_rate,
        batch_size: cfg.batch_size,
        seed: cfg.seed,
        patience: cfg.patience,
    };
    let trace = sft_train(&mut model, &examples, sched)?;
    if let Some(dir) = out {
        fs::create_dir_all(dir)?;
        checkpoint::save(&model, &dir.join("teacher.ckpt"))?;
        let mut w = csv::Writer::from_path(dir.join("teacher_metrics.csv"))?;
        for row in &trace {
            w.serialize(row)?;
        }
        w.flush()?;
    }
    Ok(TeacherOutcome { model, trace })
}

/// Mean response NLL of `model` over `pairs` (no gradients).
pub fn mean_nll(model: &TinyTransformerLM, pairs: &[PromptResponsePair]) -> Result<f64> {
    let examples: Vec<Example> = pairs.iter().map(PromptResponsePair::to_example).collect();
    let (mut total, mut count) = (0.0, 0usize);
    for chunk in examples.chunks(32) {
        let batch = PackedBatch::new(&chunk.iter().collect::<Vec<_>>());
        let mut g = Graph::no_grad();
        let loss = batch_nll(model, &mut g, &batch)?;
        let n = batch.mask.iter().filter(|&&m| m).count();
        total += g.scalar(loss) * n as f64;
        count += n;
    }
    Ok(total / count.max(1) as f64)
}

/// One row of the metrics stream. Column order is the field order.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StepMetrics {
    pub step: usize,
    pub loss: f64,
    pub ema_loss: f64,
    pub ratio: f64,
    /// Empty while the reference loss is unset.
    pub ref_loss: Option<f64>,
    pub branch: &'static str,
    pub selected: usize,
    pub valid: usize,
    pub score_mean: f64,
    pub tau_min: f64,
    pub tau_median: f64,
    pub tau_max: f64,
    pub tau_hard_mean: Option<f64>,
    pub tau_easy_mean: Option<f64>,
}

/// Validation ROUGE-L at one step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct EvalPoint {
    pub step: usize,
    pub rouge_l: f64,
}

#[derive(Debug, Clone)]
pub struct DistillOutcome {
    pub seed: u64,
    pub student: TinyTransformerLM,
    pub initial_ema: f64,
    pub metrics: Vec<StepMetrics>,
    pub evals: Vec<EvalPoint>,
    pub final_eval: Option<EvalReport>,
    pub best: Option<EvalPoint>,
}

/// One batch as seen by the training loop, detached.
#[derive(Debug, Clone)]
pub struct Probe {
    pub batch: PackedBatch,
    pub teacher: LogitBatch,
    pub student: LogitBatch,
    pub scores: DifficultyScores,
}

/// Everything a distillation run needs that is shared across seeds.
pub struct DistillContext<'a> {
    pub config: &'a DistillRunConfig,
    pub examples: Vec<Example>,
    pub cache: TeacherCache,
    pub val: Vec<PromptResponsePair>,
}

impl<'a> DistillContext<'a> {
    pub fn new(config: &'a DistillRunConfig, teacher: &TinyTransformerLM, data: &PreparedData) -> Result<Self> {
        config.validate()?;
        if teacher.config().vocab_size != config.student.vocab_size {
            return Err(CoreError::Config("teacher and student vocabularies differ".into()));
        }
        let examples: Vec<Example> = data.train.iter().map(PromptResponsePair::to_example).collect();
        let cache = TeacherCache::build(teacher, &examples)?;
        let mut val = data.val.clone();
        if config.eval.max_examples > 0 {
            val.truncate(config.eval.max_examples);
        }
        Ok(Self { config, examples, cache, val })
    }

    /// Packs training examples `indices` with their cached teacher logits.
    pub fn batch(&self, indices: &[usize]) -> Result<(PackedBatch, LogitBatch)> {
        let batch = PackedBatch::new(&indices.iter().map(|&i| &self.examples[i]).collect::<Vec<_>>());
        let teacher = self.cache.batch(indices, &batch.mask)?;
        Ok((batch, teacher))
    }

    /// Batch, teacher and student logits and difficulty scores for diagnostics.
    pub fn probe(&self, student: &TinyTransformerLM, indices: &[usize]) -> Result<Probe> {
        let (batch, teacher) = self.batch(indices)?;
        let mut g = Graph::no_grad();
        let (logits, scores) = self.forward_scored(student, &mut g, &batch, &teacher)?;
        let student = LogitBatch::new(teacher.vocab(), g.value(logits).to_vec(), batch.mask.clone())?;
        Ok(Probe { batch, teacher, student, scores })
    }

    /// Student forward pass plus detached difficulty scores of its logits.
    fn forward_scored(
        &self,
        student: &TinyTransformerLM,
        g: &mut Graph,
        batch: &PackedBatch,
        teacher: &LogitBatch,
    ) -> Result<(Var, DifficultyScores)> {
        let out = student.forward_packed(g, &batch.input_refs())?;
        let student_lb = LogitBatch::new(teacher.vocab(), g.value(out.logits).to_vec(), batch.mask.clone())?;
        let scores = score_tokens(teacher, &student_lb, self.config.difficulty, Some(&batch.targets))?;
        Ok((out.logits, scores))
    }

    /// Selects the top-ratio tokens, assigns their temperatures and builds the
    /// (optionally SFT-mixed) loss.
    fn focused_loss(
        &self,
        g: &mut Graph,
        batch: &PackedBatch,
        teacher: &LogitBatch,
        logits: Var,
        scores: &DifficultyScores,
        ratio: f64,
    ) -> Result<(Var, TemperatureAssignment)> {
        let cfg = self.config;
        let sel_mask = match cfg.latf.scope {
            SelectionScope::Batch => select_tokens(scores, ratio)?,
            SelectionScope::Sequence => select_tokens_per_group(scores, ratio, &batch.groups)?,
        };
        let temps = assign_for_selection(cfg, scores, &sel_mask);
        let distill = selective_distill_loss(g, teacher, logits, &sel_mask, &temps.temps, &cfg.objective)?;
        let sft = if cfg.objective.sft_weight > 0.0 {
            Some(sft_loss(g, logits, &batch.targets, &batch.mask)?)
        } else {
            None
        };
        Ok((mix_sft(g, distill, sft, cfg.objective.sft_weight), temps))
    }

    /// Mean loss of the untrained student at r = 1 over at most
    /// `prepass_batches` batches.
    pub fn initial_ema(&self, student: &TinyTransformerLM, seed: u64) -> Result<f64> {
        let cfg = self.config;
        let n_batches = self.examples.len().div_ceil(cfg.batch_size).min(cfg.data.prepass_batches).max(1);
        let mut batcher = Batcher::new(self.examples.len(), cfg.batch_size, seed ^ PREPASS_SALT)?;
        let mut total = 0.0;
        for _ in 0..n_batches {
            let (batch, teacher) = self.batch(&batcher.next_batch())?;
            let mut g = Graph::no_grad();
            let (logits, scores) = self.forward_scored(student, &mut g, &batch, &teacher)?;
            let (loss, _) = self.focused_loss(&mut g, &batch, &teacher, logits, &scores, 1.0)?;
            total += g.scalar(loss);
        }
        let l0 = total / n_batches as f64;
        if !l0.is_finite() {
            return Err(CoreError::Diverged { step: 0, loss: l0 });
        }
        Ok(l0)
    }

    /// Runs the full loop for one seed. When `out` is given, the metrics CSV,
    /// evaluation reports and checkpoints are written there.
    pub fn run(&self, seed: u64, out: Option<&Path>) -> Result<DistillOutcome> {
        self.run_from(self.initial_student(seed)?, seed, out)
    }

    /// The student a run with `seed` starts from: a fresh initialization,
    /// optionally warm-started by NLL training on the responses.
    pub fn initial_student(&self, seed: u64) -> Result<TinyTransformerLM> {
        let cfg = self.config;
        let mut student = TinyTransformerLM::new(cfg.student.clone(), seed)?;
        let sched = SftSchedule {
            steps: cfg.student_init.sft_steps,
            learning_rate: cfg.student_init.learning_rate,
            batch_size: cfg.batch_size,
            seed: seed ^ WARM_START_SALT,
            patience: 0,
        };
        sft_train(&mut student, &self.examples, sched)?;
        Ok(student)
    }

    /// Runs the loop from a given initial student.
    pub fn run_from(&self, mut student: TinyTransformerLM, seed: u64, out: Option<&Path>) -> Result<DistillOutcome> {
        let cfg = self.config;
        if student.config() != &cfg.student {
            return Err(CoreError::Config("initial student does not match the student config".into()));
        }
        let mut opt = OptimizerState::new(cfg.optimizer.kind(), cfg.learning_rate, student.params());
        let initial_ema = self.initial_ema(&student, seed)?;
        let mut controller =
            FocusController::new(cfg.latf.schedule(), cfg.latf.config(cfg.total_steps), cfg.total_steps, initial_ema)?;
        let mut batcher = Batcher::new(self.examples.len(), cfg.batch_size, seed)?;
        let mut writer = match out {
            Some(dir) => {
                fs::create_dir_all(dir.join("checkpoints"))?;
                Some(csv::Writer::from_path(dir.join("metrics.csv"))?)
            }
            None => None,
        };
        let decode = DecodeConfig::from(&cfg.eval);
        let mut metrics = Vec::with_capacity(cfg.total_steps);
        let mut evals = Vec::new();
        let mut best: Option<EvalPoint> = None;

        for step in 1..=cfg.total_steps {
            let mut update = None;
            let mut loss_sum = 0.0;
            let (mut valid, mut selected, mut score_sum) = (0, 0, 0.0);
            let mut all_temps = TemperatureAssignment { temps: Vec::new(), states: Vec::new() };
            for micro in 0..cfg.grad_accum {
                let (batch, teacher) = self.batch(&batcher.next_batch())?;
                let mut g = Graph::new();
                // Scores come from pre-update logits; the ratio is decided once
                // per optimizer step from the previous EMA.
                let (logits, scores) = self.forward_scored(&student, &mut g, &batch, &teacher)?;
                if micro == 0 {
                    update = Some(controller.next_ratio());
                }
                let ratio = update.expect("set on first micro-batch").ratio;
                let (loss, temps) = self.focused_loss(&mut g, &batch, &teacher, logits, &scores, ratio)?;
                let value = g.scalar(loss);
                if !value.is_finite() {
                    return Err(CoreError::Diverged { step, loss: value });
                }
                let scaled = if cfg.grad_accum > 1 { g.scale(loss, 1.0 / cfg.grad_accum as f64) } else { loss };
                g.backward(scaled, student.params_mut())?;
                loss_sum += value;
                valid += scores.len();
                selected += temps.temps.len();
                score_sum += scores.values().iter().sum::<f64>();
                all_temps.temps.extend(temps.temps);
                all_temps.states.extend(temps.states);
            }
            opt.step(student.params_mut())?;
            student.zero_grads();
            let step_loss = loss_sum / cfg.grad_accum as f64;
            let ema = controller.observe_loss(step_loss)?;
            let update = update.expect("at least one micro-batch");
            let summary: TemperatureSummary = summarize(&all_temps);
            let row = StepMetrics {
                step,
                loss: step_loss,
                ema_loss: ema,
                ratio: update.ratio,
                ref_loss: update.ref_loss,
                branch: update.branch.as_str(),
                selected,
                valid,
                score_mean: score_sum / valid.max(1) as f64,
                tau_min: summary.min,
                tau_median: summary.median,
                tau_max: summary.max,
                tau_hard_mean: summary.hard_mean,
                tau_easy_mean: summary.easy_mean,
            };
            if let Some(w) = writer.as_mut() {
                w.serialize(&row)?;
                w.flush()?;
            }
            metrics.push(row);

            if let Some(dir) = out {
                if cfg.checkpoint_every > 0 && step % cfg.checkpoint_every == 0 {
                    checkpoint::save(&student, &dir.join("checkpoints").join(format!("step_{step}.ckpt")))?;
                }
            }
            let periodic = cfg.eval.every_steps > 0 && step % cfg.eval.every_steps == 0 && step != cfg.total_steps;
            if periodic && !self.val.is_empty() {
                let report = evaluate_model(&student, &self.val, &decode, &[seed])?;
                let point = EvalPoint { step, rouge_l: report.mean };
                evals.push(point);
                if best.is_none_or(|b| point.rouge_l > b.rouge_l) {
                    best = Some(point);
                    if let Some(dir) = out {
                        checkpoint::save(&student, &dir.join("checkpoints").join("best.ckpt"))?;
                    }
                }
            }
        }

        let final_eval = if self.val.is_empty() {
            None
        } else {
            let report = evaluate_model(&student, &self.val, &decode, &[seed])?;
            let point = EvalPoint { step: cfg.total_steps, rouge_l: report.mean };
            evals.push(point);
            if best.is_none_or(|b| point.rouge_l > b.rouge_l) {
                best = Some(point);
                if let Some(dir) = out {
                    checkpoint::save(&student, &dir.join("checkpoints").join("best.ckpt"))?;
                }
            }
            Some(report)
        };
        if let Some(dir) = out {
            checkpoint::save(&student, &dir.join("checkpoints").join("final.ckpt"))?;
            if let Some(r) = &final_eval {
                fs::write(dir.join("eval.json"), serde_json::to_string_pretty(r)?)?;
            }
            fs::write(dir.join("evals.json"), serde_json::to_string_pretty(&evals)?)?;
        }
        Ok(DistillOutcome { seed, student, initial_ema, metrics, evals, final_eval, best })
    }

    /// Runs every configured seed, each into `out/seed_<s>` when `out` is given.
    pub fn run_all_seeds(&self, out: Option<&Path>) -> Result<Vec<DistillOutcome>> {
        self.config
            .seeds
            .iter()
            .map(|&s| {
                let dir: Option<PathBuf> = out.map(|d| d.join(format!("seed_{s}")));
                self.run(s, dir.as_deref())
            })
            .collect()
    }
}

/// Temperatures for the selected tokens, in position order.
fn assign_for_selection(cfg: &DistillRunConfig, scores: &DifficultyScores, selected: &[bool]) -> TemperatureAssignment {
    let chosen: Vec<f64> = scores.iter().filter(|(p, _)| selected[*p]).map(|(_, s)| s).collect();
    let strategy = cfg.idts.strategy();
    match strategy.median_scope() {
        MedianScope::Selected => strategy.assign(&chosen, &chosen),
        MedianScope::AllValid => strategy.assign(&chosen, scores.values()),
    }
}

/// Convenience wrapper: prepare context and run one seed.
pub fn run_distillation(
    config: &DistillRunConfig,
    seed: u64,
    teacher: &TinyTransformerLM,
    data: &PreparedData,
    out: Option<&Path>,
) -> Result<DistillOutcome> {
    DistillContext::new(config, teacher, data)?.run(seed, out)
}
