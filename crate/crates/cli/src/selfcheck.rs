//! Quick invariant checks over the numeric core; finishes in seconds.

use std::time::Instant;

use adakd_core::difficulty::{score_tokens, IndicatorKind};
use adakd_core::dist::{entropy, entropy_temp_derivative, hellinger_distance, softmax_with_temperature};
use adakd_core::eval::rouge_l_text;
use adakd_core::idts::{MedianScope, SignMode, TemperatureStrategy};
use adakd_core::latf::{select_tokens, Branch, FocusController, LatfConfig, RatioSchedule};
use adakd_core::loss::{per_token_divergence, selective_distill_loss, DistillObjective, DivergenceKind};
use adakd_nn::{Graph, LogitBatch, ParamStore};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::{CliError, CliResult};

type Check = fn(&mut ChaCha8Rng) -> Result<(), String>;

fn logits(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-3.0..3.0)).collect()
}

fn hellinger(rng: &mut ChaCha8Rng) -> Result<(), String> {
    for _ in 0..2000 {
        let v = rng.random_range(2..40);
        let p = softmax_with_temperature(&logits(rng, v), 1.0).map_err(|e| e.to_string())?;
        let q = softmax_with_temperature(&logits(rng, v), 1.0).map_err(|e| e.to_string())?;
        let (a, b) = (hellinger_distance(&p, &q).unwrap(), hellinger_distance(&q, &p).unwrap());
        if a != b || !(0.0..=1.0).contains(&a) {
            return Err(format!("H(p,q) = {a}, H(q,p) = {b}"));
        }
    }
    Ok(())
}

fn entropy_derivative(rng: &mut ChaCha8Rng) -> Result<(), String> {
    for _ in 0..300 {
        let n = rng.random_range(2..30);
        let z = logits(rng, n);
        let tau = rng.random_range(0.3..3.0);
        let h = 1e-4 * tau;
        let f = |t: f64| entropy(&softmax_with_temperature(&z, t).unwrap());
        let numeric = (f(tau + h) - f(tau - h)) / (2.0 * h);
        let analytic = entropy_temp_derivative(&z, tau).map_err(|e| e.to_string())?;
        if (analytic - numeric).abs() > 1e-6 * analytic.abs().max(1e-12) || analytic <= 0.0 {
            return Err(format!("dH/dτ {analytic} vs {numeric}"));
        }
    }
    Ok(())
}

fn latf_trace(_: &mut ChaCha8Rng) -> Result<(), String> {
    let cfg = LatfConfig { beta: 0.5, epsilon: 0.25, delta: 0.5, warmup_steps: 2, r_min: 0.125 };
    let mut ctl = FocusController::new(RatioSchedule::Latf, cfg, 6, 8.0).map_err(|e| e.to_string())?;
    let want = [
        (1.0, Branch::Warmup),
        (1.0, Branch::Warmup),
        (0.5, Branch::Decrease),
        (0.5, Branch::Hold),
        (0.25, Branch::Decrease),
        (0.125, Branch::Decrease),
    ];
    for (loss, w) in [8.0, 8.0, 4.0, 2.0, 1.0, 1.0].into_iter().zip(want) {
        let u = ctl.next_ratio();
        ctl.observe_loss(loss).map_err(|e| e.to_string())?;
        if (u.ratio, u.branch) != w {
            return Err(format!("step {}: {:?}, want {w:?}", u.step, (u.ratio, u.branch)));
        }
    }
    Ok(())
}

fn idts_range(rng: &mut ChaCha8Rng) -> Result<(), String> {
    for _ in 0..2000 {
        let n = rng.random_range(1..64);
        let s: Vec<f64> = (0..n).map(|_| rng.random_range(1e-4..1.0)).collect();
        let c = rng.random_range(0.0..1.5);
        let strat = TemperatureStrategy::Idts { tau_base: 1.0, c, sign_mode: SignMode::Inverse, median_scope: MedianScope::Selected };
        let t = strat.assign(&s, &s).temps;
        if t.iter().any(|&x| x < (-c).exp() || x > c.exp()) {
            return Err(format!("temperature outside [e^-{c}, e^{c}]"));
        }
    }
    Ok(())
}

fn rouge_example(_: &mut ChaCha8Rng) -> Result<(), String> {
    let s = rouge_l_text("a b c d", "a c e").map_err(|e| e.to_string())?;
    if s.lcs != 2 || (s.f - 4.0 / 7.0).abs() > 1e-15 {
        return Err(format!("{s:?}"));
    }
    Ok(())
}

fn reduction(rng: &mut ChaCha8Rng) -> Result<(), String> {
    let (rows, v) = (9, 7);
    let mask: Vec<bool> = (0..rows).map(|i| i % 4 != 0).collect();
    let teacher = LogitBatch::new(v, logits(rng, rows * v), mask.clone()).map_err(|e| e.to_string())?;
    let student = logits(rng, rows * v);
    let k = mask.iter().filter(|m| **m).count();
    let mut g = Graph::no_grad();
    let s = g.constant(rows, v, student.clone());
    let adaptive = selective_distill_loss(&mut g, &teacher, s, &mask, &vec![1.0; k], &DistillObjective::default())
        .map_err(|e| e.to_string())?;
    let sel: Vec<usize> = (0..rows).filter(|&i| mask[i]).collect();
    let zs = g.gather_rows(s, &sel);
    let ls = g.log_softmax_rows(zs);
    let zt: Vec<f64> = sel.iter().flat_map(|&i| teacher.row(i).to_vec()).collect();
    let zt = g.constant(k, v, zt);
    let lt = g.log_softmax_rows(zt);
    let per = per_token_divergence(&mut g, ls, lt, DivergenceKind::ReverseKl);
    let plain = g.mean(per);
    let (a, b) = (g.scalar(adaptive), g.scalar(plain));
    if (a - b).abs() > 1e-12 {
        return Err(format!("selective {a} vs plain {b}"));
    }
    Ok(())
}

fn loss_gradient(rng: &mut ChaCha8Rng) -> Result<(), String> {
    let (rows, v) = (6, 5);
    let mask = vec![true, false, true, true, true, false];
    let teacher = LogitBatch::new(v, logits(rng, rows * v), mask.clone()).map_err(|e| e.to_string())?;
    let base = logits(rng, rows * v);
    let student = LogitBatch::new(v, base.clone(), mask.clone()).map_err(|e| e.to_string())?;
    let scores = score_tokens(&teacher, &student, IndicatorKind::Hellinger.into(), None).map_err(|e| e.to_string())?;
    let sel = select_tokens(&scores, 0.75).map_err(|e| e.to_string())?;
    let chosen: Vec<f64> = scores.iter().filter(|(p, _)| sel[*p]).map(|(_, s)| s).collect();
    let temps = TemperatureStrategy::global_low().assign(&chosen, &chosen).temps;
    let loss_at = |x: &[f64], grad: bool| {
        let mut g = if grad { Graph::new() } else { Graph::no_grad() };
        let s = g.leaf(rows, v, x.to_vec());
        let l = selective_distill_loss(&mut g, &teacher, s, &sel, &temps, &DistillObjective::default()).unwrap();
        if grad {
            g.backward(l, &mut ParamStore::new()).unwrap();
        }
        (g.scalar(l), g.grad_of(s).map(<[f64]>::to_vec))
    };
    let analytic = loss_at(&base, true).1.ok_or("no gradient")?;
    for i in 0..base.len() {
        let mut x = base.clone();
        x[i] += 1e-6;
        let up = loss_at(&x, false).0;
        x[i] -= 2e-6;
        let down = loss_at(&x, false).0;
        let numeric = (up - down) / 2e-6;
        let diff = (analytic[i] - numeric).abs();
        if diff > 1e-8 && diff > 1e-5 * analytic[i].abs().max(numeric.abs()) {
            return Err(format!("logit {i}: {} vs {numeric}", analytic[i]));
        }
        if !sel[i / v] && analytic[i] != 0.0 {
            return Err(format!("unselected row {} has gradient", i / v));
        }
    }
    Ok(())
}

pub fn run() -> CliResult<()> {
    let checks: [(&str, Check); 7] = [
        ("hellinger bounds and symmetry", hellinger),
        ("entropy temperature derivative", entropy_derivative),
        ("latf scripted trace", latf_trace),
        ("idts temperature range", idts_range),
        ("rouge-l worked example", rouge_example),
        ("reduction to plain reverse KL", reduction),
        ("selective loss gradient", loss_gradient),
    ];
    let t0 = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(0x5E1F);
    let mut failed = 0;
    for (name, check) in checks {
        match check(&mut rng) {
            Ok(()) => println!("ok    {name}"),
            Err(e) => {
                failed += 1;
                println!("FAIL  {name}: {e}");
            }
        }
    }
    println!("{} checks, {failed} failed, {:.2}s", checks.len(), t0.elapsed().as_secs_f64());
    if failed == 0 {
        Ok(())
    } else {
        Err(CliError::Runtime(format!("{failed} self-checks failed")))
    }
}
