use std::fs;
use std::path::{Path, PathBuf};

use adakd_core::analysis::{
    difficulty_evolution, entropy_histogram_report, gradient_alignment_report, write_report, AlignmentBatch,
};
use adakd_core::config::DistillRunConfig;
use adakd_core::data::Batcher;
use adakd_core::eval::{evaluate_model, mean_std, DecodeConfig};
use adakd_core::trainer::{prepare_data, train_teacher as fit_teacher, DistillContext, PreparedData};
use adakd_nn::{checkpoint, TinyTransformerLM};

use crate::rundir::{load_config, resolve_out, write_summary, RunDir};
use crate::{CliError, CliResult, Common, ReportKind};

const ENTROPY_BINS: usize = 20;

pub fn train_teacher(common: &Common) -> CliResult<()> {
    let extra: Vec<String> = common.seed.map(|s| format!("teacher.seed={s}")).into_iter().collect();
    let cfg = load_config(common, &extra)?;
    let run = RunDir::start(resolve_out(common, "train-teacher"), "train-teacher", &cfg, vec![cfg.teacher.seed], common.force)?;
    let result = (|| {
        let data = prepare_data(&cfg)?;
        let out = fit_teacher(&cfg.teacher, &data.train, Some(&run.path))?;
        fs::copy(run.join("teacher_metrics.csv"), run.join("metrics.csv"))?;
        println!(
            "teacher trained for {} steps, final smoothed loss {:.4}; saved {}",
            out.trace.len(),
            out.trace.last().map_or(f64::NAN, |s| s.ema_loss),
            run.join("teacher.ckpt").display()
        );
        Ok(())
    })();
    run.finish(result)
}

/// Teacher from an explicit path, the config, or a fresh training run in `dir`.
fn obtain_teacher(
    cfg: &DistillRunConfig,
    explicit: Option<&Path>,
    data: &PreparedData,
    dir: &Path,
) -> CliResult<TinyTransformerLM> {
    if let Some(p) = explicit.or(cfg.teacher.checkpoint.as_deref()) {
        return checkpoint::load(p).map_err(|e| CliError::Config(format!("teacher checkpoint {}: {e}", p.display())));
    }
    println!("no teacher checkpoint given; training one into {}", dir.display());
    Ok(fit_teacher(&cfg.teacher, &data.train, Some(dir))?.model)
}

pub fn distill(common: &Common, teacher: Option<PathBuf>) -> CliResult<()> {
    let extra: Vec<String> = common.seed.map(|s| format!("seeds=[{s}]")).into_iter().collect();
    let cfg = load_config(common, &extra)?;
    let run = RunDir::start(resolve_out(common, "distill"), "distill", &cfg, cfg.seeds.clone(), common.force)?;
    let result = (|| {
        let data = prepare_data(&cfg)?;
        let teacher = obtain_teacher(&cfg, teacher.as_deref(), &data, &run.join("teacher"))?;
        let ctx = DistillContext::new(&cfg, &teacher, &data)?;
        let mut rows = Vec::new();
        let mut finals = Vec::new();
        for &seed in &cfg.seeds {
            let out = ctx.run(seed, Some(&run.join(format!("seed_{seed}"))))?;
            let last = out.metrics.last();
            let final_rouge = out.final_eval.as_ref().map(|r| r.mean);
            if let Some(f) = final_rouge {
                finals.push(f);
            }
            println!(
                "seed {seed}: final loss {:.4}, ratio {:.3}, ROUGE-L {}",
                last.map_or(f64::NAN, |m| m.loss),
                last.map_or(f64::NAN, |m| m.ratio),
                final_rouge.map_or("n/a".into(), |f| format!("{f:.4}"))
            );
            rows.push(vec![
                seed.to_string(),
                out.initial_ema.to_string(),
                last.map_or(String::new(), |m| m.loss.to_string()),
                last.map_or(String::new(), |m| m.ratio.to_string()),
                final_rouge.map_or(String::new(), |f| f.to_string()),
                out.best.map_or(String::new(), |b| b.step.to_string()),
                out.best.map_or(String::new(), |b| b.rouge_l.to_string()),
            ]);
        }
        write_summary(
            &run.join("metrics.csv"),
            &["seed", "initial_ema", "final_loss", "final_ratio", "final_rouge_l", "best_step", "best_rouge_l"],
            &rows,
        )?;
        if !finals.is_empty() {
            let (mean, std) = mean_std(&finals);
            let summary = serde_json::json!({ "seeds": cfg.seeds, "rouge_l": finals, "mean": mean, "std": std });
            fs::write(run.join("summary.json"), serde_json::to_string_pretty(&summary)?)?;
            println!("ROUGE-L over {} seeds: {mean:.4} ± {std:.4}", finals.len());
        }
        Ok(())
    })();
    run.finish(result)
}

pub fn eval(common: &Common, ckpt: &Path) -> CliResult<()> {
    let extra: Vec<String> = common.seed.map(|s| format!("seeds=[{s}]")).into_iter().collect();
    let cfg = load_config(common, &extra)?;
    let run = RunDir::start(resolve_out(common, "eval"), "eval", &cfg, cfg.seeds.clone(), common.force)?;
    let result = (|| {
        let model = checkpoint::load(ckpt).map_err(|e| CliError::Config(format!("checkpoint {}: {e}", ckpt.display())))?;
        let data = prepare_data(&cfg)?;
        let mut val = data.val;
        if cfg.eval.max_examples > 0 {
            val.truncate(cfg.eval.max_examples);
        }
        let report = evaluate_model(&model, &val, &DecodeConfig::from(&cfg.eval), &cfg.seeds)?;
        fs::write(run.join("eval.json"), serde_json::to_string_pretty(&report)?)?;
        let rows: Vec<Vec<String>> = report
            .per_seed
            .iter()
            .map(|s| vec![s.seed.to_string(), s.mean.to_string(), s.truncated.to_string()])
            .collect();
        write_summary(&run.join("metrics.csv"), &["seed", "rouge_l", "truncated"], &rows)?;
        println!("ROUGE-L {:.4} ± {:.4} over {} examples", report.mean, report.std, val.len());
        Ok(())
    })();
    run.finish(result)
}

pub struct AnalyzeArgs {
    pub checkpoint: String,
    pub run: PathBuf,
    pub teacher: Option<PathBuf>,
    pub report: ReportKind,
    pub batches: usize,
}

/// Accepts a path, or a checkpoint name inside `<run>/checkpoints`.
fn resolve_checkpoint(name: &str, run: &Path) -> CliResult<PathBuf> {
    let dir = run.join("checkpoints");
    let candidates = [
        PathBuf::from(name),
        PathBuf::from(format!("{name}.ckpt")),
        dir.join(name),
        dir.join(format!("{name}.ckpt")),
    ];
    candidates
        .into_iter()
        .find(|p| p.is_file())
        .ok_or_else(|| CliError::Config(format!("checkpoint {name:?} not found (also looked in {})", dir.display())))
}

/// `step_<n>.ckpt` files next to `ckpt`, in step order.
fn step_checkpoints(ckpt: &Path) -> Vec<(usize, PathBuf)> {
    let dir = ckpt.parent().unwrap_or(Path::new("."));
    let mut out: Vec<(usize, PathBuf)> = fs::read_dir(dir)
        .into_iter()
        .flatten()
        .flatten()
        .filter_map(|e| {
            let name = e.file_name().into_string().ok()?;
            let step = name.strip_prefix("step_")?.strip_suffix(".ckpt")?.parse().ok()?;
            Some((step, e.path()))
        })
        .collect();
    out.sort();
    out
}

pub fn analyze(common: &Common, args: &AnalyzeArgs) -> CliResult<()> {
    let cfg = load_config(common, &[])?;
    if args.batches == 0 {
        return Err(CliError::Usage("--batches must be positive".into()));
    }
    let ckpt = resolve_checkpoint(&args.checkpoint, &args.run)?;
    let teacher_path = args
        .teacher
        .clone()
        .or_else(|| cfg.teacher.checkpoint.clone())
        .ok_or_else(|| CliError::Config("analyze needs --teacher or teacher.checkpoint".into()))?;
    let seed = common.seed.unwrap_or(cfg.seeds[0]);
    let run = RunDir::start(resolve_out(common, "analyze"), "analyze", &cfg, vec![seed], common.force)?;
    let result = (|| {
        let student = checkpoint::load(&ckpt).map_err(|e| CliError::Config(format!("checkpoint {}: {e}", ckpt.display())))?;
        let teacher = checkpoint::load(&teacher_path)
            .map_err(|e| CliError::Config(format!("teacher checkpoint {}: {e}", teacher_path.display())))?;
        let data = prepare_data(&cfg)?;
        let ctx = DistillContext::new(&cfg, &teacher, &data)?;
        let mut batcher = Batcher::new(ctx.examples.len(), cfg.batch_size, seed)?;
        let indices: Vec<usize> = (0..args.batches).flat_map(|_| batcher.next_batch()).collect();
        let probe = ctx.probe(&student, &indices)?;
        let wants = |k: ReportKind| args.report == k || args.report == ReportKind::All;
        let mut rows = Vec::new();

        if wants(ReportKind::Entropy) {
            let strategy = cfg.idts.strategy();
            let temps = strategy.assign(probe.scores.values(), probe.scores.values()).temps;
            let report = entropy_histogram_report(&probe.scores, &probe.student, &temps, ENTROPY_BINS)?;
            write_report(&run.path, "entropy_histogram", &report, &report.csv_rows())?;
            if let Some(gap) = &report.entropy_gap {
                rows.push(vec!["entropy_gap_before".into(), gap.before.to_string()]);
                rows.push(vec!["entropy_gap_after".into(), gap.after.to_string()]);
            }
        }
        if wants(ReportKind::Alignment) {
            let input = AlignmentBatch {
                batch: &probe.batch,
                teacher: &probe.teacher,
                divergence: cfg.objective.divergence,
            };
            let report = gradient_alignment_report(&student, input, &probe.scores)?;
            write_report(&run.path, "gradient_alignment", &report, &report.csv_rows())?;
            for g in &report.gradients {
                rows.push(vec![format!("norm_share_{}", g.group.as_str()), g.norm_share.to_string()]);
            }
        }
        if wants(ReportKind::Evolution) {
            let mut points = Vec::new();
            let mut ckpts = step_checkpoints(&ckpt);
            if ckpts.is_empty() {
                ckpts.push((0, ckpt.clone()));
            }
            for (step, path) in &ckpts {
                let m = checkpoint::load(path)?;
                points.push((*step, ctx.probe(&m, &indices)?.scores));
            }
            let report = difficulty_evolution(&points)?;
            write_report(&run.path, "difficulty_evolution", &report, &report.csv_rows())?;
            rows.push(vec!["evolution_checkpoints".into(), ckpts.len().to_string()]);
        }
        write_summary(&run.join("metrics.csv"), &["metric", "value"], &rows)?;
        println!("reports written to {}", run.path.display());
        Ok(())
    })();
    run.finish(result)
}
