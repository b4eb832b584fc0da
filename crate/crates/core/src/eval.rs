//! ROUGE-L scoring, seeded sampling and multi-seed evaluation reports.

use adakd_nn::TinyTransformerLM;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::EvalSection;
use crate::data::{ByteTokenizer, PromptResponsePair, EOS};
use crate::error::{CoreError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct RougeScore {
    pub lcs: usize,
    pub precision: f64,
    pub recall: f64,
    pub f: f64,
}

/// Length of the longest common subsequence.
pub fn lcs_len<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y { prev[j] + 1 } else { cur[j].max(prev[j + 1]) };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// LCS-based F-measure. `F = 0` when nothing matches.
pub fn rouge_l<T: PartialEq>(candidate: &[T], reference: &[T]) -> Result<RougeScore> {
    if reference.is_empty() {
        return Err(CoreError::Eval("ROUGE-L needs a non-empty reference".into()));
    }
    let lcs = lcs_len(candidate, reference);
    if lcs == 0 {
        return Ok(RougeScore { lcs, precision: 0.0, recall: 0.0, f: 0.0 });
    }
    let precision = lcs as f64 / candidate.len() as f64;
    let recall = lcs as f64 / reference.len() as f64;
    let f = 2.0 * precision * recall / (precision + recall);
    Ok(RougeScore { lcs, precision, recall, f })
}

/// ROUGE-L over whitespace-separated words.
pub fn rouge_l_text(candidate: &str, reference: &str) -> Result<RougeScore> {
    let c: Vec<&str> = candidate.split_whitespace().collect();
    let r: Vec<&str> = reference.split_whitespace().collect();
    rouge_l(&c, &r)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DecodeConfig {
    /// Sampling temperature; 0 decodes greedily.
    pub temperature: f64,
    pub top_p: f64,
    pub max_new_tokens: usize,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        Self { temperature: 1.0, top_p: 1.0, max_new_tokens: 40 }
    }
}

impl From<&EvalSection> for DecodeConfig {
    fn from(e: &EvalSection) -> Self {
        Self { temperature: e.temperature, top_p: e.top_p, max_new_tokens: e.max_new_tokens }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Generation {
    pub tokens: Vec<usize>,
    /// Stopped by the token budget or context length instead of EOS.
    pub truncated: bool,
}

/// Anything that can continue a batch of contexts. One RNG per context.
pub trait ResponseGenerator {
    fn generate(&self, contexts: &[Vec<usize>], decode: &DecodeConfig, rngs: &mut [ChaCha8Rng]) -> Result<Vec<Generation>>;
}

/// Draws one id from `logits` under temperature and nucleus truncation.
pub fn sample_token(logits: &[f64], decode: &DecodeConfig, rng: &mut impl Rng) -> usize {
    if decode.temperature == 0.0 {
        return argmax(logits);
    }
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let weights: Vec<f64> = logits.iter().map(|z| ((z - max) / decode.temperature).exp()).collect();
    let total: f64 = weights.iter().sum();
    let mut order: Vec<usize> = (0..logits.len()).collect();
    let mut kept = logits.len();
    if decode.top_p < 1.0 {
        order.sort_by(|&a, &b| weights[b].total_cmp(&weights[a]).then(a.cmp(&b)));
        let mut acc = 0.0;
        for (n, &i) in order.iter().enumerate() {
            acc += weights[i] / total;
            if acc >= decode.top_p {
                kept = n + 1;
                break;
            }
        }
    }
    let mass: f64 = order[..kept].iter().map(|&i| weights[i]).sum();
    let mut u = rng.random::<f64>() * mass;
    for &i in &order[..kept] {
        u -= weights[i];
        if u < 0.0 {
            return i;
        }
    }
    order[kept - 1]
}

fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if *x > v[best] {
            best = i;
        }
    }
    best
}

impl ResponseGenerator for TinyTransformerLM {
    /// Ancestral sampling; live sequences of a chunk advance together each step.
    fn generate(&self, contexts: &[Vec<usize>], decode: &DecodeConfig, rngs: &mut [ChaCha8Rng]) -> Result<Vec<Generation>> {
        let mut out = Vec::with_capacity(contexts.len());
        for (c, r) in contexts.chunks(GENERATE_CHUNK).zip(rngs.chunks_mut(GENERATE_CHUNK)) {
            out.extend(generate_chunk(self, c, decode, r)?);
        }
        Ok(out)
    }
}

/// Sequences decoded per batched forward pass; bounds peak memory.
const GENERATE_CHUNK: usize = 128;

fn generate_chunk(
    model: &TinyTransformerLM,
    contexts: &[Vec<usize>],
    decode: &DecodeConfig,
    rngs: &mut [ChaCha8Rng],
) -> Result<Vec<Generation>> {
    let ctx_len = model.config().context_length;
    let mut seqs: Vec<Vec<usize>> = contexts.to_vec();
    let mut out: Vec<Generation> =
        contexts.iter().map(|_| Generation { tokens: Vec::new(), truncated: false }).collect();
    let mut live: Vec<usize> = Vec::new();
    for (i, s) in seqs.iter().enumerate() {
        if s.len() >= ctx_len || decode.max_new_tokens == 0 {
            out[i].truncated = true;
        } else {
            live.push(i);
        }
    }
    while !live.is_empty() {
        let refs: Vec<&[usize]> = live.iter().map(|&i| seqs[i].as_slice()).collect();
        let logits = model.forward_lm_batch(&refs)?;
        let mut next_live = Vec::with_capacity(live.len());
        for (&i, lb) in live.iter().zip(&logits) {
            let tok = sample_token(lb.row(lb.positions() - 1), decode, &mut rngs[i]);
            if tok == EOS {
                continue;
            }
            out[i].tokens.push(tok);
            seqs[i].push(tok);
            if out[i].tokens.len() >= decode.max_new_tokens || seqs[i].len() >= ctx_len {
                out[i].truncated = true;
            } else {
                next_live.push(i);
            }
        }
        live = next_live;
    }
    Ok(out)
}

/// Scores of one decoding seed.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SeedScores {
    pub seed: u64,
    pub scores: Vec<f64>,
    pub mean: f64,
    pub truncated: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalReport {
    pub decode: DecodeConfig,
    pub per_seed: Vec<SeedScores>,
    /// Mean over seeds of the per-seed means.
    pub mean: f64,
    /// Population standard deviation of the per-seed means.
    pub std: f64,
    /// Left empty; pairwise preference judgments would go here.
    pub judgments: Vec<serde_json::Value>,
}

/// Population mean and standard deviation.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (0.0, 0.0);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

impl EvalReport {
    pub fn from_seeds(decode: DecodeConfig, per_seed: Vec<SeedScores>) -> Self {
        let means: Vec<f64> = per_seed.iter().map(|s| s.mean).collect();
        let (mean, std) = mean_std(&means);
        Self { decode, per_seed, mean, std, judgments: Vec::new() }
    }
}

/// RNG for example `index` under decoding seed `seed`; independent of batching.
pub fn example_rng(seed: u64, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64);
    rng
}

/// Generates one response per example per seed and scores it with ROUGE-L
/// against the detokenized reference.
pub fn evaluate_model(
    model: &dyn ResponseGenerator,
    examples: &[PromptResponsePair],
    decode: &DecodeConfig,
    seeds: &[u64],
) -> Result<EvalReport> {
    if seeds.is_empty() {
        return Err(CoreError::Eval("at least one decoding seed is required".into()));
    }
    if examples.is_empty() {
        return Err(CoreError::Eval("empty evaluation set".into()));
    }
    let tok = ByteTokenizer;
    let contexts: Vec<Vec<usize>> = examples.iter().map(PromptResponsePair::context).collect();
    let mut per_seed = Vec::with_capacity(seeds.len());
    for &seed in seeds {
        let mut rngs: Vec<ChaCha8Rng> = (0..examples.len()).map(|i| example_rng(seed, i)).collect();
        let gens = model.generate(&contexts, decode, &mut rngs)?;
        let mut scores = Vec::with_capacity(examples.len());
        for (g, ex) in gens.iter().zip(examples) {
            scores.push(rouge_l_text(&tok.decode(&g.tokens), &tok.decode(&ex.response))?.f);
        }
        let mean = scores.iter().sum::<f64>() / scores.len() as f64;
        let truncated = gens.iter().filter(|g| g.truncated).count();
        per_seed.push(SeedScores { seed, scores, mean, truncated });
    }
    Ok(EvalReport::from_seeds(*decode, per_seed))
}

#[cfg(test)]
mod tests {
    use super::*;
    use adakd_nn::ModelConfig;
    use std::collections::HashMap;

    #[test]
    fn rouge_examples() {
        let s = rouge_l_text("a b c", "a b c").unwrap();
        assert_eq!(s.f, 1.0);
        assert_eq!(rouge_l_text("x y", "a b").unwrap().f, 0.0);
        let s = rouge_l_text("a b c d", "a c e").unwrap();
        assert_eq!(s.lcs, 2);
        assert_eq!(s.precision, 0.5);
        assert!((s.recall - 2.0 / 3.0).abs() < 1e-15);
        assert!((s.f - 4.0 / 7.0).abs() < 1e-15);
        assert_eq!(rouge_l_text("", "a").unwrap().f, 0.0);
        assert!(rouge_l_text("a", "  ").is_err());
    }

    struct Echo(HashMap<Vec<usize>, Vec<usize>>);

    impl ResponseGenerator for Echo {
        fn generate(&self, contexts: &[Vec<usize>], _: &DecodeConfig, _: &mut [ChaCha8Rng]) -> Result<Vec<Generation>> {
            Ok(contexts.iter().map(|c| Generation { tokens: self.0[c].clone(), truncated: false }).collect())
        }
    }

    fn pairs() -> Vec<PromptResponsePair> {
        let t = ByteTokenizer;
        [("q1", "a b c"), ("q2", "hello world")]
            .iter()
            .map(|(p, r)| PromptResponsePair { prompt: t.encode(p).unwrap(), response: t.encode(r).unwrap() })
            .collect()
    }

    #[test]
    fn echo_model_scores_perfectly() {
        let ex = pairs();
        let echo = Echo(ex.iter().map(|p| (p.context(), p.response.clone())).collect());
        let r = evaluate_model(&echo, &ex, &DecodeConfig::default(), &[10, 20, 30]).unwrap();
        assert_eq!((r.mean, r.std), (1.0, 0.0));
        let one = evaluate_model(&echo, &ex, &DecodeConfig::default(), &[10]).unwrap();
        assert_eq!(one.std, 0.0);
        assert!(evaluate_model(&echo, &ex, &DecodeConfig::default(), &[]).is_err());
    }

    #[test]
    fn model_generation_is_seeded_and_truncation_flagged() {
        let cfg = ModelConfig { vocab_size: ByteTokenizer::VOCAB_SIZE, context_length: 12, ..ModelConfig::default() };
        let m = TinyTransformerLM::new(cfg, 3).unwrap();
        let ex = pairs();
        let d = DecodeConfig { max_new_tokens: 50, ..DecodeConfig::default() };
        let a = evaluate_model(&m, &ex, &d, &[5, 6]).unwrap();
        let b = evaluate_model(&m, &ex, &d, &[5, 6]).unwrap();
        assert_eq!(a, b);
        assert!(a.per_seed.iter().all(|s| s.scores.iter().all(|f| (0.0..=1.0).contains(f))));
        let mut rngs = vec![example_rng(1, 0)];
        let g = m.generate(&[vec![0; 11]], &d, &mut rngs).unwrap();
        assert!(g[0].tokens.len() <= 1);
        assert!(g[0].truncated || g[0].tokens.is_empty());
        let g = m.generate(&[vec![0; 12]], &d, &mut rngs).unwrap();
        assert!(g[0].truncated && g[0].tokens.is_empty());
    }

    #[test]
    fn top_p_keeps_the_nucleus() {
        let logits = [3.0, 2.0, -5.0, -5.0];
        let d = DecodeConfig { temperature: 1.0, top_p: 0.5, max_new_tokens: 1 };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..200 {
            assert_eq!(sample_token(&logits, &d, &mut rng), 0);
        }
        let greedy = DecodeConfig { temperature: 0.0, ..d };
        assert_eq!(sample_token(&[0.0, 1.0, 0.5], &greedy, &mut rng), 1);
        let full = DecodeConfig { top_p: 1.0, ..d };
        let hits = (0..2000).filter(|_| sample_token(&logits, &full, &mut rng) == 1).count();
        // p(1) = e²/(e³+e²+2e^-5) ≈ 0.2689
        assert!((hits as f64 / 2000.0 - 0.2689).abs() < 0.04);
    }

    #[test]
    fn mean_std_is_population() {
        assert_eq!(mean_std(&[1.0, 3.0]), (2.0, 1.0));
        assert_eq!(mean_std(&[4.0]), (4.0, 0.0));
    }
}
