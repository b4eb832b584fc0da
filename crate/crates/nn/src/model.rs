//! Pre-norm decoder-only transformer with learned positional embeddings.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{NnError, Result};
use crate::graph::{Graph, Segment, Var};
use crate::tensor::{ParamId, ParamStore, Tensor};

/// Architecture hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub context_length: usize,
    pub layers: usize,
    pub heads: usize,
    pub width: usize,
    /// Hidden width of the feed-forward block as a multiple of `width`.
    pub mlp_ratio: usize,
    /// Reuse the token embedding as the output projection.
    pub tied_head: bool,
    pub init_std: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            vocab_size: 100,
            context_length: 64,
            layers: 2,
            heads: 4,
            width: 64,
            mlp_ratio: 4,
            tied_head: false,
            init_std: 0.02,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("vocab_size", self.vocab_size),
            ("context_length", self.context_length),
            ("layers", self.layers),
            ("heads", self.heads),
            ("width", self.width),
            ("mlp_ratio", self.mlp_ratio),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(NnError::InvalidConfig(format!("{name} must be positive")));
            }
        }
        if self.width % self.heads != 0 {
            return Err(NnError::InvalidConfig(format!(
                "width {} is not divisible by heads {}",
                self.width, self.heads
            )));
        }
        if !(self.init_std.is_finite() && self.init_std >= 0.0) {
            return Err(NnError::InvalidConfig("init_std must be finite and non-negative".into()));
        }
        Ok(())
    }

    /// SHA-256 of the canonical JSON encoding, hex encoded.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        let digest = Sha256::digest(&json);
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }
}

/// Per-position logits for one sequence, with a validity mask.
#[derive(Debug, Clone, PartialEq)]
pub struct LogitBatch {
    vocab: usize,
    values: Vec<f64>,
    mask: Vec<bool>,
}

impl LogitBatch {
    pub fn new(vocab: usize, values: Vec<f64>, mask: Vec<bool>) -> Result<Self> {
        if vocab == 0 || values.len() != vocab * mask.len() {
            return Err(NnError::ShapeMismatch {
                shape: vec![mask.len(), vocab],
                expected: vocab * mask.len(),
                actual: values.len(),
            });
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(NnError::NonFinite("logits".into()));
        }
        Ok(Self { vocab, values, mask })
    }

    /// All positions valid.
    pub fn dense(vocab: usize, values: Vec<f64>) -> Result<Self> {
        let rows = if vocab == 0 { 0 } else { values.len() / vocab };
        Self::new(vocab, values, vec![true; rows])
    }

    pub fn positions(&self) -> usize {
        self.mask.len()
    }

    pub fn vocab(&self) -> usize {
        self.vocab
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.values[i * self.vocab..(i + 1) * self.vocab]
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn mask(&self) -> &[bool] {
        &self.mask
    }

    pub fn set_mask(&mut self, mask: Vec<bool>) -> Result<()> {
        if mask.len() != self.mask.len() {
            return Err(NnError::ShapeMismatch {
                shape: vec![self.mask.len()],
                expected: self.mask.len(),
                actual: mask.len(),
            });
        }
        self.mask = mask;
        Ok(())
    }

    pub fn valid_positions(&self) -> impl Iterator<Item = usize> + '_ {
        self.mask.iter().enumerate().filter(|(_, &m)| m).map(|(i, _)| i)
    }

    /// Copy of rows `range`, keeping their mask bits.
    pub fn slice_rows(&self, start: usize, len: usize) -> LogitBatch {
        LogitBatch {
            vocab: self.vocab,
            values: self.values[start * self.vocab..(start + len) * self.vocab].to_vec(),
            mask: self.mask[start..start + len].to_vec(),
        }
    }
}

#[derive(Debug, Clone)]
struct BlockParams {
    ln1_g: ParamId,
    ln1_b: ParamId,
    wq: ParamId,
    bq: ParamId,
    wk: ParamId,
    bk: ParamId,
    wv: ParamId,
    bv: ParamId,
    wo: ParamId,
    bo: ParamId,
    ln2_g: ParamId,
    ln2_b: ParamId,
    w1: ParamId,
    b1: ParamId,
    w2: ParamId,
    b2: ParamId,
}

/// Output of a packed forward pass.
#[derive(Debug, Clone)]
pub struct PackedForward {
    /// `[total_rows, vocab]` logits.
    pub logits: Var,
    /// Where each input sequence lives among the rows.
    pub segments: Vec<Segment>,
}

#[derive(Debug, Clone)]
pub struct TinyTransformerLM {
    config: ModelConfig,
    params: ParamStore,
    tok_emb: ParamId,
    pos_emb: ParamId,
    blocks: Vec<BlockParams>,
    lnf_g: ParamId,
    lnf_b: ParamId,
    head_w: Option<ParamId>,
    head_b: ParamId,
}

impl TinyTransformerLM {
    /// Seeded initialization: N(0, init_std) for embeddings and projections, zero biases,
    /// unit layer-norm gains.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, config.init_std)
            .map_err(|e| NnError::InvalidConfig(e.to_string()))?;
        let mut params = ParamStore::new();
        let d = config.width;
        let hidden = d * config.mlp_ratio;
        let mut randn = |shape: Vec<usize>| -> Tensor {
            let n: usize = shape.iter().product();
            let data = (0..n).map(|_| normal.sample(&mut rng)).collect();
            Tensor::new(shape, data).expect("valid shape")
        };
        let zeros = |n: usize| Tensor::zeros(vec![n]).expect("valid shape");
        let ones = |n: usize| Tensor::filled(vec![n], 1.0).expect("valid shape");

        let tok_emb = params.insert("tok_emb", randn(vec![config.vocab_size, d]));
        let pos_emb = params.insert("pos_emb", randn(vec![config.context_length, d]));
        let mut blocks = Vec::with_capacity(config.layers);
        for l in 0..config.layers {
            let p = |s: &str| format!("blocks.{l}.{s}");
            blocks.push(BlockParams {
                ln1_g: params.insert(p("ln1.gain"), ones(d)),
                ln1_b: params.insert(p("ln1.bias"), zeros(d)),
                wq: params.insert(p("attn.wq"), randn(vec![d, d])),
                bq: params.insert(p("attn.bq"), zeros(d)),
                wk: params.insert(p("attn.wk"), randn(vec![d, d])),
                bk: params.insert(p("attn.bk"), zeros(d)),
                wv: params.insert(p("attn.wv"), randn(vec![d, d])),
                bv: params.insert(p("attn.bv"), zeros(d)),
                wo: params.insert(p("attn.wo"), randn(vec![d, d])),
                bo: params.insert(p("attn.bo"), zeros(d)),
                ln2_g: params.insert(p("ln2.gain"), ones(d)),
                ln2_b: params.insert(p("ln2.bias"), zeros(d)),
                w1: params.insert(p("mlp.w1"), randn(vec![d, hidden])),
                b1: params.insert(p("mlp.b1"), zeros(hidden)),
                w2: params.insert(p("mlp.w2"), randn(vec![hidden, d])),
                b2: params.insert(p("mlp.b2"), zeros(d)),
            });
        }
        let lnf_g = params.insert("lnf.gain", ones(d));
        let lnf_b = params.insert("lnf.bias", zeros(d));
        let head_w = if config.tied_head {
            None
        } else {
            Some(params.insert("head.w", randn(vec![d, config.vocab_size])))
        };
        let head_b = params.insert("head.b", zeros(config.vocab_size));
        Ok(Self {
            config,
            params,
            tok_emb,
            pos_emb,
            blocks,
            lnf_g,
            lnf_b,
            head_w,
            head_b,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn zero_grads(&mut self) {
        self.params.zero_grads();
    }

    /// Rejects empty, over-long, and out-of-vocabulary inputs.
    pub fn validate_tokens(&self, tokens: &[usize]) -> Result<()> {
        if tokens.is_empty() {
            return Err(NnError::EmptySequence);
        }
        if tokens.len() > self.config.context_length {
            return Err(NnError::SequenceTooLong {
                len: tokens.len(),
                context_length: self.config.context_length,
            });
        }
        if let Some((position, &id)) = tokens
            .iter()
            .enumerate()
            .find(|(_, &id)| id >= self.config.vocab_size)
        {
            return Err(NnError::TokenOutOfRange {
                position,
                id,
                vocab_size: self.config.vocab_size,
            });
        }
        Ok(())
    }

    /// Records the forward pass of several sequences packed row-wise on `graph`.
    pub fn forward_packed(&self, graph: &mut Graph, seqs: &[&[usize]]) -> Result<PackedForward> {
        let mut ids = Vec::new();
        let mut positions = Vec::new();
        let mut segments = Vec::with_capacity(seqs.len());
        for seq in seqs {
            self.validate_tokens(seq)?;
            segments.push(Segment {
                start: ids.len(),
                len: seq.len(),
            });
            ids.extend_from_slice(seq);
            positions.extend(0..seq.len());
        }
        if ids.is_empty() {
            return Err(NnError::EmptySequence);
        }
        let p = &self.params;
        let tok_table = graph.param(p, self.tok_emb);
        let pos_table = graph.param(p, self.pos_emb);
        let tok = graph.embedding(tok_table, &ids);
        let pos = graph.embedding(pos_table, &positions);
        let mut x = graph.add(tok, pos);

        for b in &self.blocks {
            let h = self.layer_norm(graph, x, b.ln1_g, b.ln1_b);
            let q = self.linear(graph, h, b.wq, b.bq);
            let k = self.linear(graph, h, b.wk, b.bk);
            let v = self.linear(graph, h, b.wv, b.bv);
            let a = graph.causal_attention(q, k, v, self.config.heads, &segments);
            let a = self.linear(graph, a, b.wo, b.bo);
            x = graph.add(x, a);

            let h = self.layer_norm(graph, x, b.ln2_g, b.ln2_b);
            let m = self.linear(graph, h, b.w1, b.b1);
            let m = graph.gelu(m);
            let m = self.linear(graph, m, b.w2, b.b2);
            x = graph.add(x, m);
        }
        let x = self.layer_norm(graph, x, self.lnf_g, self.lnf_b);
        let logits = match self.head_w {
            Some(w) => {
                let w = graph.param(p, w);
                graph.matmul(x, w)
            }
            None => graph.matmul_t(x, tok_table),
        };
        let bias = graph.param(p, self.head_b);
        let logits = graph.add_row(logits, bias);
        Ok(PackedForward { logits, segments })
    }

    fn linear(&self, graph: &mut Graph, x: Var, w: ParamId, b: ParamId) -> Var {
        let w = graph.param(&self.params, w);
        let b = graph.param(&self.params, b);
        let y = graph.matmul(x, w);
        graph.add_row(y, b)
    }

    fn layer_norm(&self, graph: &mut Graph, x: Var, g: ParamId, b: ParamId) -> Var {
        let g = graph.param(&self.params, g);
        let b = graph.param(&self.params, b);
        graph.layer_norm(x, g, b)
    }

    /// Untracked logits for one sequence, every position marked valid.
    pub fn forward_lm(&self, tokens: &[usize]) -> Result<LogitBatch> {
        Ok(self.forward_lm_batch(&[tokens])?.remove(0))
    }

    /// Untracked logits for several sequences, computed in one packed pass.
    pub fn forward_lm_batch(&self, seqs: &[&[usize]]) -> Result<Vec<LogitBatch>> {
        let mut graph = Graph::no_grad();
        let out = self.forward_packed(&mut graph, seqs)?;
        graph.check_finite()?;
        let v = self.config.vocab_size;
        let values = graph.value(out.logits);
        out.segments
            .iter()
            .map(|s| LogitBatch::dense(v, values[s.start * v..(s.start + s.len) * v].to_vec()))
            .collect()
    }

    /// Overwrites parameter values from another store with identical names and shapes.
    pub fn load_params(&mut self, other: &ParamStore) -> Result<()> {
        if other.len() != self.params.len() {
            return Err(NnError::Checkpoint(format!(
                "expected {} tensors, found {}",
                self.params.len(),
                other.len()
            )));
        }
        for id in self.params.ids() {
            let name = self.params.name(id).to_string();
            let src = other
                .find(&name)
                .ok_or_else(|| NnError::Checkpoint(format!("missing tensor `{name}`")))?;
            let src = other.get(src);
            let dst = self.params.get_mut(id);
            if src.shape() != dst.shape() {
                return Err(NnError::Checkpoint(format!(
                    "tensor `{name}` has shape {:?}, expected {:?}",
                    src.shape(),
                    dst.shape()
                )));
            }
            dst.data_mut().copy_from_slice(src.data());
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> ModelConfig {
        ModelConfig {
            vocab_size: 11,
            context_length: 8,
            layers: 2,
            heads: 2,
            width: 8,
            mlp_ratio: 2,
            tied_head: false,
            init_std: 0.3,
        }
    }

    #[test]
    fn single_token_shape() {
        let m = TinyTransformerLM::new(small(), 1).unwrap();
        let out = m.forward_lm(&[3]).unwrap();
        assert_eq!(out.positions(), 1);
        assert_eq!(out.row(0).len(), 11);
        assert!(out.values().iter().all(|v| v.is_finite()));
    }

    #[test]
    fn deterministic() {
        let a = TinyTransformerLM::new(small(), 7).unwrap();
        let b = TinyTransformerLM::new(small(), 7).unwrap();
        assert_eq!(a.params(), b.params());
        let x = a.forward_lm(&[1, 2, 3, 4]).unwrap();
        let y = a.forward_lm(&[1, 2, 3, 4]).unwrap();
        assert_eq!(x.values(), y.values());
    }

    #[test]
    fn input_validation() {
        let m = TinyTransformerLM::new(small(), 1).unwrap();
        assert!(matches!(
            m.forward_lm(&[1, 11, 2]),
            Err(NnError::TokenOutOfRange { position: 1, id: 11, .. })
        ));
        assert!(matches!(
            m.forward_lm(&[0; 9]),
            Err(NnError::SequenceTooLong { len: 9, .. })
        ));
        assert!(matches!(m.forward_lm(&[]), Err(NnError::EmptySequence)));
    }

    #[test]
    fn rejects_indivisible_width() {
        let cfg = ModelConfig {
            heads: 3,
            ..small()
        };
        assert!(TinyTransformerLM::new(cfg, 0).is_err());
    }

    #[test]
    fn packing_matches_separate_passes() {
        let m = TinyTransformerLM::new(small(), 3).unwrap();
        let a = [1usize, 2, 3];
        let b = [4usize, 5, 6, 7, 8];
        let packed = m.forward_lm_batch(&[&a, &b]).unwrap();
        let sa = m.forward_lm(&a).unwrap();
        let sb = m.forward_lm(&b).unwrap();
        for (x, y) in packed[0].values().iter().zip(sa.values()) {
            assert!((x - y).abs() < 1e-12);
        }
        for (x, y) in packed[1].values().iter().zip(sb.values()) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn tied_head_has_no_output_matrix() {
        let cfg = ModelConfig {
            tied_head: true,
            ..small()
        };
        let m = TinyTransformerLM::new(cfg, 0).unwrap();
        assert!(m.params().find("head.w").is_none());
        assert_eq!(m.forward_lm(&[1, 2]).unwrap().positions(), 2);
    }
}
