//! The serializable run configuration, TOML loading and dotted overrides.

use std::path::{Path, PathBuf};

use adakd_nn::{ModelConfig, OptimizerKind};
use serde::{Deserialize, Serialize};

use crate::data::{ByteTokenizer, SyntheticTask};
use crate::difficulty::Indicator;
use crate::error::{CoreError, Result};
use crate::idts::{MedianScope, SignMode, TemperatureStrategy};
use crate::latf::{LatfConfig, RatioSchedule};
use crate::loss::DistillObjective;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DistillRunConfig {
    /// One distillation run per seed; the seed drives student init, batch order
    /// and decoding.
    pub seeds: Vec<u64>,
    /// Optimizer steps `T`.
    pub total_steps: usize,
    pub batch_size: usize,
    /// Micro-batches per optimizer step.
    pub grad_accum: usize,
    pub learning_rate: f64,
    pub optimizer: OptimizerSection,
    pub data: DataSection,
    pub teacher: TeacherSection,
    pub student: ModelConfig,
    pub student_init: StudentInitSection,
    pub latf: LatfSection,
    pub idts: IdtsSection,
    pub objective: DistillObjective,
    pub difficulty: Indicator,
    pub eval: EvalSection,
    /// Write a checkpoint every this many steps (0 disables).
    pub checkpoint_every: usize,
}

impl Default for DistillRunConfig {
    fn default() -> Self {
        Self {
            seeds: vec![10],
            total_steps: 400,
            batch_size: 16,
            grad_accum: 1,
            learning_rate: 1e-3,
            optimizer: OptimizerSection::default(),
            data: DataSection::default(),
            teacher: TeacherSection::default(),
            student: ModelConfig {
                vocab_size: ByteTokenizer::VOCAB_SIZE,
                context_length: 64,
                layers: 2,
                heads: 4,
                width: 64,
                mlp_ratio: 4,
                tied_head: false,
                init_std: 0.02,
            },
            student_init: StudentInitSection::default(),
            latf: LatfSection::default(),
            idts: IdtsSection::default(),
            objective: DistillObjective::default(),
            difficulty: Indicator::default(),
            eval: EvalSection::default(),
            checkpoint_every: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimizerSection {
    /// `"adam"` or `"sgd"`.
    pub kind: OptimizerName,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerName {
    Adam,
    Sgd,
}

impl Default for OptimizerSection {
    fn default() -> Self {
        Self { kind: OptimizerName::Adam, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

impl OptimizerSection {
    pub fn kind(&self) -> OptimizerKind {
        match self.kind {
            OptimizerName::Adam => OptimizerKind::Adam { beta1: self.beta1, beta2: self.beta2, eps: self.eps },
            OptimizerName::Sgd => OptimizerKind::Sgd,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    /// JSONL file with `prompt`/`response` records; the synthetic corpus is used
    /// when absent.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub path: Option<PathBuf>,
    /// Only `"byte"` is supported.
    pub tokenizer: String,
    pub synthetic_examples: usize,
    pub synthetic_seed: u64,
    pub synthetic_tasks: Vec<SyntheticTask>,
    pub validation_fraction: f64,
    /// Batches in the pre-pass that seeds the EMA loss.
    pub prepass_batches: usize,
}

impl Default for DataSection {
    fn default() -> Self {
        Self {
            path: None,
            tokenizer: "byte".into(),
            synthetic_examples: 4000,
            synthetic_seed: 1,
            synthetic_tasks: SyntheticTask::ALL.to_vec(),
            validation_fraction: 0.1,
            prepass_batches: 32,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TeacherSection {
    pub model: ModelConfig,
    pub steps: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub seed: u64,
    /// Stop early when the EMA training loss fails to improve by 0.1% for this
    /// many steps (0 disables).
    pub patience: usize,
    /// Load this frozen teacher instead of training one.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub checkpoint: Option<PathBuf>,
}

impl Default for TeacherSection {
    fn default() -> Self {
        Self {
            model: ModelConfig {
                vocab_size: ByteTokenizer::VOCAB_SIZE,
                context_length: 64,
                layers: 4,
                heads: 4,
                width: 128,
                mlp_ratio: 4,
                tied_head: false,
                init_std: 0.02,
            },
            steps: 1500,
            learning_rate: 1e-3,
            batch_size: 16,
            seed: 1,
            patience: 0,
            checkpoint: None,
        }
    }
}

/// Optional NLL warm start applied to every freshly initialized student before
/// distillation, standing in for a pretrained student.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StudentInitSection {
    pub sft_steps: usize,
    pub learning_rate: f64,
}

impl Default for StudentInitSection {
    fn default() -> Self {
        Self { sft_steps: 0, learning_rate: 1e-3 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ControllerName {
    Latf,
    Fixed,
    Linear,
    Cosine,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SelectionScope {
    /// Pool every valid token of the batch.
    Batch,
    /// Apply the ratio inside each sequence.
    Sequence,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LatfSection {
    pub controller: ControllerName,
    pub beta: f64,
    pub epsilon: f64,
    pub delta: f64,
    pub warmup_fraction: f64,
    /// Explicit warm-up length; overrides `warmup_fraction` when set.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub warmup_steps: Option<usize>,
    pub r_min: f64,
    /// Ratio for the `fixed` controller.
    pub fixed_ratio: f64,
    /// Endpoints for the `linear` and `cosine` controllers.
    pub schedule_from: f64,
    pub schedule_to: f64,
    pub scope: SelectionScope,
}

impl Default for LatfSection {
    fn default() -> Self {
        let base = LatfConfig::default();
        Self {
            controller: ControllerName::Latf,
            beta: base.beta,
            epsilon: base.epsilon,
            delta: base.delta,
            warmup_fraction: 0.05,
            warmup_steps: None,
            r_min: base.r_min,
            fixed_ratio: 1.0,
            schedule_from: 1.0,
            schedule_to: 0.75,
            scope: SelectionScope::Batch,
        }
    }
}

impl LatfSection {
    /// Warm-up length counted in optimizer steps out of `total_steps`.
    pub fn resolved_warmup(&self, total_steps: usize) -> usize {
        self.warmup_steps
            .unwrap_or_else(|| (self.warmup_fraction * total_steps as f64).round() as usize)
    }

    pub fn config(&self, total_steps: usize) -> LatfConfig {
        LatfConfig {
            beta: self.beta,
            epsilon: self.epsilon,
            delta: self.delta,
            warmup_steps: self.resolved_warmup(total_steps),
            r_min: self.r_min,
        }
    }

    pub fn schedule(&self) -> RatioSchedule {
        match self.controller {
            ControllerName::Latf => RatioSchedule::Latf,
            ControllerName::Fixed => RatioSchedule::Fixed { ratio: self.fixed_ratio },
            ControllerName::Linear => RatioSchedule::Linear { from: self.schedule_from, to: self.schedule_to },
            ControllerName::Cosine => RatioSchedule::Cosine { from: self.schedule_from, to: self.schedule_to },
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TemperatureName {
    Idts,
    Fixed,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct IdtsSection {
    pub strategy: TemperatureName,
    pub tau_base: f64,
    pub c: f64,
    pub sign_mode: SignMode,
    pub median_scope: MedianScope,
    /// Temperature for the `fixed` strategy.
    pub fixed_temperature: f64,
}

impl Default for IdtsSection {
    fn default() -> Self {
        Self {
            strategy: TemperatureName::Idts,
            tau_base: 1.0,
            c: 0.5,
            sign_mode: SignMode::Inverse,
            median_scope: MedianScope::Selected,
            fixed_temperature: 1.0,
        }
    }
}

impl IdtsSection {
    pub fn strategy(&self) -> TemperatureStrategy {
        match self.strategy {
            TemperatureName::Idts => TemperatureStrategy::Idts {
                tau_base: self.tau_base,
                c: self.c,
                sign_mode: self.sign_mode,
                median_scope: self.median_scope,
            },
            TemperatureName::Fixed => TemperatureStrategy::Fixed { temperature: self.fixed_temperature },
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    pub temperature: f64,
    pub top_p: f64,
    pub max_new_tokens: usize,
    /// Validate every this many steps and keep the best checkpoint (0: final only).
    pub every_steps: usize,
    /// Cap on validation examples (0: all).
    pub max_examples: usize,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self { temperature: 1.0, top_p: 1.0, max_new_tokens: 40, every_steps: 0, max_examples: 0 }
    }
}

impl DistillRunConfig {
    /// Field-level validation of cross-cutting constraints.
    pub fn validate(&self) -> Result<()> {
        let err = |m: String| Err(CoreError::Config(m));
        if self.seeds.is_empty() {
            return err("seeds must not be empty".into());
        }
        if self.total_steps == 0 {
            return err("total_steps must be positive".into());
        }
        let warm = self.latf.resolved_warmup(self.total_steps);
        if self.total_steps <= warm {
            return err(format!("total_steps ({}) must exceed the warm-up ({warm})", self.total_steps));
        }
        if self.batch_size == 0 || self.grad_accum == 0 || self.teacher.batch_size == 0 {
            return err("batch sizes and grad_accum must be positive".into());
        }
        if !(self.learning_rate.is_finite() && self.learning_rate >= 0.0) {
            return err("learning_rate must be finite and non-negative".into());
        }
        if self.data.tokenizer != "byte" {
            return err(format!("data.tokenizer: unknown tokenizer {:?}", self.data.tokenizer));
        }
        if !(0.0..1.0).contains(&self.data.validation_fraction) {
            return err("data.validation_fraction must lie in [0, 1)".into());
        }
        if !(0.0..=1.0).contains(&self.latf.warmup_fraction) {
            return err("latf.warmup_fraction must lie in [0, 1]".into());
        }
        let vocab = ByteTokenizer::VOCAB_SIZE;
        if self.teacher.model.vocab_size != vocab || self.student.vocab_size != vocab {
            return err(format!(
                "teacher.model.vocab_size ({}) and student.vocab_size ({}) must both equal the tokenizer vocabulary ({vocab})",
                self.teacher.model.vocab_size, self.student.vocab_size
            ));
        }
        self.teacher.model.validate()?;
        self.student.validate()?;
        self.latf.config(self.total_steps).validate()?;
        self.latf.schedule().validate()?;
        self.idts.strategy().validate()?;
        self.objective.validate()?;
        if !(self.eval.temperature >= 0.0 && self.eval.top_p > 0.0 && self.eval.top_p <= 1.0) {
            return err("eval.temperature must be >= 0 and eval.top_p in (0, 1]".into());
        }
        if self.difficulty.top_k == 0 || self.difficulty.top_k > vocab {
            return err(format!("difficulty.top_k must lie in [1, {vocab}]"));
        }
        Ok(())
    }

    /// Parses TOML text, applies `key=value` overrides (dotted paths, last wins)
    /// and validates.
    pub fn from_toml_with_overrides(text: &str, overrides: &[String]) -> Result<Self> {
        let mut root: toml::Table = toml::from_str(text).map_err(|e| CoreError::Config(e.to_string()))?;
        for o in overrides {
            apply_override(&mut root, o)?;
        }
        let cfg: Self = root.try_into().map_err(|e: toml::de::Error| CoreError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let text = match path {
            Some(p) => std::fs::read_to_string(p)
                .map_err(|e| CoreError::Config(format!("{}: {e}", p.display())))?,
            None => String::new(),
        };
        Self::from_toml_with_overrides(&text, overrides)
    }

    /// TOML text of the fully resolved config, warm-up length included.
    pub fn snapshot(&self) -> Result<String> {
        let mut resolved = self.clone();
        resolved.latf.warmup_steps = Some(self.latf.resolved_warmup(self.total_steps));
        toml::to_string(&resolved).map_err(|e| CoreError::Config(e.to_string()))
    }
}

/// Applies one `a.b.c=value` override. The value is read as a TOML literal and
/// falls back to a bare string.
pub fn apply_override(root: &mut toml::Table, spec: &str) -> Result<()> {
    let (path, raw) = spec
        .split_once('=')
        .ok_or_else(|| CoreError::Config(format!("override {spec:?} is not KEY=VALUE")))?;
    let keys: Vec<&str> = path.trim().split('.').collect();
    if keys.iter().any(|k| k.is_empty()) {
        return Err(CoreError::Config(format!("override {spec:?} has an empty key")));
    }
    let raw = raw.trim();
    let value = toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()));
    let mut table = root;
    for k in &keys[..keys.len() - 1] {
        let entry = table
            .entry(k.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        table = entry
            .as_table_mut()
            .ok_or_else(|| CoreError::Config(format!("override {spec:?}: {k} is not a table")))?;
    }
    table.insert(keys[keys.len() - 1].to_string(), value);
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_text_gives_defaults() {
        let c = DistillRunConfig::from_toml_with_overrides("", &[]).unwrap();
        assert_eq!(c, DistillRunConfig::default());
        assert_eq!(c.latf.resolved_warmup(c.total_steps), 20);
    }

    #[test]
    fn overrides_reach_nested_fields_last_wins() {
        let c = DistillRunConfig::from_toml_with_overrides(
            "[idts]\nc = 0.3\n",
            &["idts.c=0.9".into(), "idts.c=0.0".into(), "latf.controller=cosine".into(), "seeds=[1,2]".into()],
        )
        .unwrap();
        assert_eq!(c.idts.c, 0.0);
        assert_eq!(c.latf.controller, ControllerName::Cosine);
        assert_eq!(c.seeds, vec![1, 2]);
        assert!(c.snapshot().unwrap().contains("c = 0.0"));
    }

    #[test]
    fn unknown_keys_are_rejected_with_their_name() {
        let e = DistillRunConfig::from_toml_with_overrides("", &["idts.cc=1".into()]).unwrap_err();
        assert!(e.to_string().contains("cc"), "{e}");
        assert!(DistillRunConfig::from_toml_with_overrides("bogus = 1\n", &[]).is_err());
        assert!(DistillRunConfig::from_toml_with_overrides("", &["novalue".into()]).is_err());
    }

    #[test]
    fn cross_field_validation() {
        let bad = |o: &str| DistillRunConfig::from_toml_with_overrides("", &[o.to_string()]).is_err();
        assert!(!bad("total_steps=100"));
        assert!(bad("latf.warmup_steps=400"));
        assert!(bad("student.vocab_size=50"));
        assert!(bad("student.heads=3"));
        assert!(bad("objective.sft_weight=2.0"));
        assert!(bad("seeds=[]"));
        assert!(bad("data.tokenizer=\"words\""));
    }

    #[test]
    fn snapshot_round_trips() {
        let mut c = DistillRunConfig::default();
        c.data.path = Some("x.jsonl".into());
        let text = c.snapshot().unwrap();
        let back = DistillRunConfig::from_toml_with_overrides(&text, &[]).unwrap();
        assert_eq!(back.latf.warmup_steps, Some(20));
        assert_eq!(back.data.path, c.data.path);
        assert_eq!(back.snapshot().unwrap(), text);
    }
}
