//! Small transformer language models over the word-level tokenizer: a
//! decoder-only causal LM (the unlearning subject) and an encoder-only
//! masked LM (the discriminative identifier backbone).
//!
//! Parameters live in one flat, deterministically ordered f64 vector so
//! task-vector arithmetic is elementwise over a single buffer.

use crate::autodiff::{Gradients, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::tokenizer::{Tokenizer, EOS, MASK};
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};
use std::io::{BufReader, BufWriter};
use std::path::Path;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub dim: usize,
    pub layers: usize,
    pub heads: usize,
    pub max_len: usize,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 || self.layers == 0 || self.heads == 0 || self.vocab_size == 0 {
            return Err(Error::Config("model dims must be positive".into()));
        }
        if self.dim % self.heads != 0 {
            return Err(Error::Config(format!(
                "dim {} not divisible by heads {}",
                self.dim, self.heads
            )));
        }
        Ok(())
    }

    fn ff_dim(&self) -> usize {
        4 * self.dim
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttnKind {
    /// Position t sees only positions <= t; logits row t predicts token t+1.
    Causal,
    /// Every position sees every other; logits row t predicts token t.
    Bidirectional,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct ParamSpec {
    name: String,
    shape: Vec<usize>,
    offset: usize,
}

fn layout(cfg: &ModelConfig) -> Vec<ParamSpec> {
    let d = cfg.dim;
    let ff = cfg.ff_dim();
    let mut specs = Vec::new();
    let mut offset = 0;
    let mut push = |name: String, shape: Vec<usize>| {
        let numel: usize = shape.iter().product();
        specs.push(ParamSpec { name, shape, offset });
        offset += numel;
    };
    push("tok_emb".into(), vec![cfg.vocab_size, d]);
    push("pos_emb".into(), vec![cfg.max_len, d]);
    for l in 0..cfg.layers {
        push(format!("l{l}.ln1.g"), vec![d]);
        push(format!("l{l}.ln1.b"), vec![d]);
        push(format!("l{l}.wq"), vec![d, d]);
        push(format!("l{l}.wk"), vec![d, d]);
        push(format!("l{l}.wv"), vec![d, d]);
        push(format!("l{l}.wo"), vec![d, d]);
        push(format!("l{l}.ln2.g"), vec![d]);
        push(format!("l{l}.ln2.b"), vec![d]);
        push(format!("l{l}.ffn.w1"), vec![d, ff]);
        push(format!("l{l}.ffn.b1"), vec![ff]);
        push(format!("l{l}.ffn.w2"), vec![ff, d]);
        push(format!("l{l}.ffn.b2"), vec![d]);
    }
    push("lnf.g".into(), vec![d]);
    push("lnf.b".into(), vec![d]);
    push("w_out".into(), vec![d, cfg.vocab_size]);
    specs
}

#[derive(Debug, Clone)]
pub struct TransformerLM {
    cfg: ModelConfig,
    kind: AttnKind,
    specs: Vec<ParamSpec>,
    params: Vec<f64>,
}

/// A recorded forward pass over one sequence.
pub struct ForwardPass {
    pub tape: Tape,
    pub logits: Var,
    bindings: Vec<(Var, usize, usize)>, // (leaf, flat offset, len)
    n_params: usize,
}

impl ForwardPass {
    /// Flatten per-leaf gradients into the model's parameter order.
    pub fn flat_grad(&self, grads: &Gradients) -> Vec<f64> {
        flatten(&self.bindings, self.n_params, grads)
    }
}

/// Several sequences recorded on one shared tape. Parameters are bound as
/// leaves exactly once, so a single backward pass accumulates gradients
/// across all sequences.
pub struct BatchForward {
    pub tape: Tape,
    /// One [T_i, V] logits node per input sequence, in input order.
    pub logits: Vec<Var>,
    bindings: Vec<(Var, usize, usize)>,
    n_params: usize,
}

impl BatchForward {
    pub fn flat_grad(&self, grads: &Gradients) -> Vec<f64> {
        flatten(&self.bindings, self.n_params, grads)
    }
}

fn flatten(bindings: &[(Var, usize, usize)], n: usize, grads: &Gradients) -> Vec<f64> {
    let mut out = vec![0.0; n];
    for &(var, offset, len) in bindings {
        out[offset..offset + len].copy_from_slice(grads.get(var));
    }
    out
}

/// Lazily binds each named parameter onto the tape at most once.
struct Binder {
    vars: Vec<Option<Var>>,
}

impl TransformerLM {
    pub fn new(cfg: ModelConfig, kind: AttnKind, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let specs = layout(&cfg);
        let n: usize = specs.iter().map(|s| s.shape.iter().product::<usize>()).sum();
        let mut params = vec![0.0; n];
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        for spec in &specs {
            let numel: usize = spec.shape.iter().product();
            let slot = &mut params[spec.offset..spec.offset + numel];
            if spec.name.ends_with(".g") {
                slot.fill(1.0); // layer-norm gains
            } else if spec.name.ends_with(".b") {
                slot.fill(0.0);
            } else {
                for v in slot.iter_mut() {
                    *v = 0.02 * gauss(&mut rng);
                }
            }
        }
        Ok(Self { cfg, kind, specs, params })
    }

    pub fn causal(cfg: ModelConfig, seed: u64) -> Result<Self> {
        Self::new(cfg, AttnKind::Causal, seed)
    }

    pub fn masked(cfg: ModelConfig, seed: u64) -> Result<Self> {
        Self::new(cfg, AttnKind::Bidirectional, seed)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn kind(&self) -> AttnKind {
        self.kind
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn set_params(&mut self, params: Vec<f64>) -> Result<()> {
        if params.len() != self.params.len() {
            return Err(Error::Contract("parameter vector length mismatch".into()));
        }
        self.params = params;
        Ok(())
    }

    /// Mutable view of one named parameter tensor.
    pub fn param_slice_mut(&mut self, name: &str) -> Option<&mut [f64]> {
        let spec = self.specs.iter().find(|s| s.name == name)?;
        let numel: usize = spec.shape.iter().product();
        Some(&mut self.params[spec.offset..spec.offset + numel])
    }

    fn bind(
        &self,
        tape: &mut Tape,
        binder: &mut Binder,
        bindings: &mut Vec<(Var, usize, usize)>,
        name: &str,
    ) -> Var {
        let idx = self
            .specs
            .iter()
            .position(|s| s.name == name)
            .unwrap_or_else(|| panic!("unknown param {name}"));
        if let Some(v) = binder.vars[idx] {
            return v;
        }
        let spec = &self.specs[idx];
        let numel: usize = spec.shape.iter().product();
        let data = self.params[spec.offset..spec.offset + numel].to_vec();
        let var = tape.leaf(Tensor::from_parts(spec.shape.clone(), data));
        bindings.push((var, spec.offset, numel));
        binder.vars[idx] = Some(var);
        var
    }

    /// Run the transformer over a token sequence, recording onto a fresh
    /// tape. Row t of the logits is the next-token distribution at t for
    /// causal models, or the same-position prediction for masked models.
    pub fn forward(&self, tokens: &[u32]) -> Result<ForwardPass> {
        let bf = self.forward_batch(std::slice::from_ref(&tokens.to_vec()))?;
        Ok(ForwardPass {
            logits: bf.logits[0],
            tape: bf.tape,
            bindings: bf.bindings,
            n_params: bf.n_params,
        })
    }

    /// Record several sequences on one shared tape.
    pub fn forward_batch(&self, seqs: &[Vec<u32>]) -> Result<BatchForward> {
        let mut tape = Tape::new();
        let mut binder = Binder { vars: vec![None; self.specs.len()] };
        let mut bindings = Vec::new();
        let mut logits = Vec::with_capacity(seqs.len());
        for seq in seqs {
            logits.push(self.forward_seq(&mut tape, &mut binder, &mut bindings, seq)?);
        }
        Ok(BatchForward { tape, logits, bindings, n_params: self.params.len() })
    }

    fn forward_seq(
        &self,
        tape: &mut Tape,
        binder: &mut Binder,
        bindings: &mut Vec<(Var, usize, usize)>,
        tokens: &[u32],
    ) -> Result<Var> {
        let t_len = tokens.len();
        if t_len == 0 {
            return Err(Error::Shape("empty token sequence".into()));
        }
        if t_len > self.cfg.max_len {
            return Err(Error::Shape(format!(
                "sequence length {} exceeds max length {}",
                t_len, self.cfg.max_len
            )));
        }
        let ids: Vec<usize> = tokens.iter().map(|&t| t as usize).collect();
        if let Some(&bad) = ids.iter().find(|&&i| i >= self.cfg.vocab_size) {
            return Err(Error::Shape(format!("token id {bad} out of vocabulary")));
        }

        let d = self.cfg.dim;
        let heads = self.cfg.heads;
        let dh = d / heads;

        let tok_emb = self.bind(tape, binder, bindings, "tok_emb");
        let pos_emb = self.bind(tape, binder, bindings, "pos_emb");
        let tok = tape.gather(tok_emb, &ids);
        let positions: Vec<usize> = (0..t_len).collect();
        let pos = tape.gather(pos_emb, &positions);
        let mut h = tape.add(tok, pos);

        // Shared causal mask: 0 below/on diagonal, large negative above.
        let mask = match self.kind {
            AttnKind::Causal => {
                let mut m = vec![0.0; t_len * t_len];
                for i in 0..t_len {
                    for j in i + 1..t_len {
                        m[i * t_len + j] = -1e30;
                    }
                }
                Some(tape.leaf(Tensor::from_parts(vec![t_len, t_len], m)))
            }
            AttnKind::Bidirectional => None,
        };

        for l in 0..self.cfg.layers {
            let ln1g = self.bind(tape, binder, bindings, &format!("l{l}.ln1.g"));
            let ln1b = self.bind(tape, binder, bindings, &format!("l{l}.ln1.b"));
            let wq = self.bind(tape, binder, bindings, &format!("l{l}.wq"));
            let wk = self.bind(tape, binder, bindings, &format!("l{l}.wk"));
            let wv = self.bind(tape, binder, bindings, &format!("l{l}.wv"));
            let wo = self.bind(tape, binder, bindings, &format!("l{l}.wo"));

            let hn = tape.layer_norm(h, ln1g, ln1b);
            let q = tape.matmul(hn, wq);
            let k = tape.matmul(hn, wk);
            let v = tape.matmul(hn, wv);

            let mut head_outs = Vec::with_capacity(heads);
            for hd in 0..heads {
                let qh = tape.slice_cols(q, hd * dh, dh);
                let kh = tape.slice_cols(k, hd * dh, dh);
                let vh = tape.slice_cols(v, hd * dh, dh);
                let kt = tape.transpose(kh);
                let scores = tape.matmul(qh, kt);
                let mut scaled = tape.scale(scores, 1.0 / (dh as f64).sqrt());
                if let Some(m) = mask {
                    scaled = tape.add(scaled, m);
                }
                let att = tape.softmax(scaled).expect("non-empty attention axis");
                head_outs.push(tape.matmul(att, vh));
            }
            let ctx = tape.concat_cols(&head_outs);
            let attn_out = tape.matmul(ctx, wo);
            h = tape.add(h, attn_out);

            let ln2g = self.bind(tape, binder, bindings, &format!("l{l}.ln2.g"));
            let ln2b = self.bind(tape, binder, bindings, &format!("l{l}.ln2.b"));
            let w1 = self.bind(tape, binder, bindings, &format!("l{l}.ffn.w1"));
            let b1 = self.bind(tape, binder, bindings, &format!("l{l}.ffn.b1"));
            let w2 = self.bind(tape, binder, bindings, &format!("l{l}.ffn.w2"));
            let b2 = self.bind(tape, binder, bindings, &format!("l{l}.ffn.b2"));

            let hn2 = tape.layer_norm(h, ln2g, ln2b);
            let f1 = tape.matmul(hn2, w1);
            let f1b = tape.add_row(f1, b1);
            let act = tape.gelu(f1b);
            let f2 = tape.matmul(act, w2);
            let f2b = tape.add_row(f2, b2);
            h = tape.add(h, f2b);
        }

        let lnfg = self.bind(tape, binder, bindings, "lnf.g");
        let lnfb = self.bind(tape, binder, bindings, "lnf.b");
        let w_out = self.bind(tape, binder, bindings, "w_out");
        let hf = tape.layer_norm(h, lnfg, lnfb);
        Ok(tape.matmul(hf, w_out))
    }

    /// Evaluation-only logits, identical bit-for-bit to the tape forward.
    pub fn logits(&self, tokens: &[u32]) -> Result<Tensor> {
        let fp = self.forward(tokens)?;
        Ok(fp.tape.value(fp.logits).clone())
    }

    /// Per-token log P(y_t | x, y_<t) for a causal model.
    pub fn sequence_logprob(&self, x: &[u32], y: &[u32]) -> Result<Vec<f64>> {
        if y.is_empty() {
            return Err(Error::Contract("sequence_logprob: empty target".into()));
        }
        if x.is_empty() {
            return Err(Error::Contract("sequence_logprob: empty prompt".into()));
        }
        let tokens: Vec<u32> = x.iter().chain(y).copied().collect();
        let logits = self.logits(&tokens)?;
        let (_, v) = logits.dims2();
        let mut out = Vec::with_capacity(y.len());
        for (j, &tok) in y.iter().enumerate() {
            let row = x.len() + j - 1;
            let slice = &logits.data()[row * v..(row + 1) * v];
            out.push(log_softmax_at(slice, tok as usize));
        }
        Ok(out)
    }

    /// Argmax prediction at the single MASK position of `y_masked`,
    /// given the prompt `x`. Ties break toward the lowest token id.
    pub fn predict_masked(&self, x: &[u32], y_masked: &[u32]) -> Result<u32> {
        let tokens: Vec<u32> = x.iter().chain(y_masked).copied().collect();
        let mask_positions: Vec<usize> =
            tokens.iter().enumerate().filter(|(_, &t)| t == MASK).map(|(i, _)| i).collect();
        if mask_positions.len() != 1 {
            return Err(Error::Contract(format!(
                "predict_masked requires exactly one MASK, found {}",
                mask_positions.len()
            )));
        }
        let logits = self.logits(&tokens)?;
        let (_, v) = logits.dims2();
        let row = &logits.data()[mask_positions[0] * v..(mask_positions[0] + 1) * v];
        Ok(argmax_lowest_id(row) as u32)
    }

    /// Greedy decoding: iterative argmax, stops at EOS or `max_new`.
    pub fn generate_greedy(&self, prompt: &[u32], max_new: usize) -> Result<Vec<u32>> {
        let mut tokens = prompt.to_vec();
        let mut generated = Vec::new();
        for _ in 0..max_new {
            if tokens.len() >= self.cfg.max_len {
                break;
            }
            let logits = self.logits(&tokens)?;
            let (t, v) = logits.dims2();
            let row = &logits.data()[(t - 1) * v..t * v];
            let next = argmax_lowest_id(row) as u32;
            if next == EOS {
                break;
            }
            generated.push(next);
            tokens.push(next);
        }
        Ok(generated)
    }
}

fn log_softmax_at(row: &[f64], idx: usize) -> f64 {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = row.iter().map(|&x| (x - max).exp()).sum::<f64>().ln() + max;
    row[idx] - lse
}

fn argmax_lowest_id(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = i;
        }
    }
    best
}

fn gauss(rng: &mut ChaCha20Rng) -> f64 {
    use rand::Rng;
    // Box-Muller on the deterministic stream.
    let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
    let u2: f64 = rng.gen::<f64>();
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

/// Serialized model container: hyperparameters, vocabulary, parameters.
#[derive(Serialize, Deserialize)]
pub struct ModelCheckpoint {
    pub config: ModelConfig,
    pub kind: AttnKind,
    pub tokenizer: Tokenizer,
    pub params: Vec<f64>,
}

impl ModelCheckpoint {
    pub fn from_model(model: &TransformerLM, tokenizer: &Tokenizer) -> Self {
        Self {
            config: *model.config(),
            kind: model.kind(),
            tokenizer: tokenizer.clone(),
            params: model.params().to_vec(),
        }
    }

    pub fn into_model(mut self) -> Result<(TransformerLM, Tokenizer)> {
        let mut model = TransformerLM::new(self.config, self.kind, 0)?;
        model.set_params(self.params)?;
        self.tokenizer.rebuild_index();
        Ok((model, self.tokenizer))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let f = std::fs::File::create(path)?;
        serde_json::to_writer(BufWriter::new(f), self)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let f = std::fs::File::open(path).map_err(|e| {
            Error::MissingArtifact(format!("checkpoint {}: {e}", path.display()))
        })?;
        Ok(serde_json::from_reader(BufReader::new(f))?)
    }
}
