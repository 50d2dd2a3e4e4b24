//! Unlearning objectives: GA, NPO, KTO, PL, LPL, TPO, the retain-set GDR
//! term, and the Task Vector weight edit.
//!
//! Every batch is recorded on one shared tape with the model parameters
//! bound as leaves exactly once, so a single backward pass yields the full
//! gradient. The reference model's quantities are constants on that tape.

use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::model::TransformerLM;
use crate::tokenizer::{Tokenizer, BOS, EOS};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ObjectiveKind {
    Ga,
    Npo,
    Kto,
    Tpo,
    LplOnly,
    PlOnly,
}

impl ObjectiveKind {
    pub fn needs_reference(self) -> bool {
        matches!(self, Self::Npo | Self::Kto | Self::Tpo | Self::LplOnly)
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::Ga => "ga",
            Self::Npo => "npo",
            Self::Kto => "kto",
            Self::Tpo => "tpo",
            Self::LplOnly => "lpl_only",
            Self::PlOnly => "pl_only",
        }
    }
}

/// Objective selector plus its scalar knobs. The PL weight `lambda` applies
/// to every kind (zero for the plain baselines), which is how compositions
/// like NPO+PL are expressed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(from = "RawObjectiveConfig")]
pub struct ObjectiveConfig {
    pub kind: ObjectiveKind,
    /// Inverse temperature of the preference losses.
    pub beta: f64,
    /// Weight on the preservation (GW cross-entropy) term.
    pub lambda: f64,
    /// Weight on the retain-set gradient-descent term.
    pub gdr_weight: f64,
    /// Safe completion for the KTO anchor.
    pub safe_answer: String,
}

#[derive(Deserialize)]
struct RawObjectiveConfig {
    kind: ObjectiveKind,
    beta: Option<f64>,
    lambda: Option<f64>,
    gdr_weight: Option<f64>,
    safe_answer: Option<String>,
}

impl From<RawObjectiveConfig> for ObjectiveConfig {
    fn from(raw: RawObjectiveConfig) -> Self {
        let mut cfg = ObjectiveConfig::new(raw.kind);
        if let Some(b) = raw.beta {
            cfg.beta = b;
        }
        if let Some(l) = raw.lambda {
            cfg.lambda = l;
        }
        if let Some(w) = raw.gdr_weight {
            cfg.gdr_weight = w;
        }
        if let Some(s) = raw.safe_answer {
            cfg.safe_answer = s;
        }
        cfg
    }
}

impl ObjectiveConfig {
    /// Kind-specific defaults: β = 0.1 for NPO/KTO, 0.3 for the logit
    /// preference losses; λ = 1 where PL is part of the definition.
    pub fn new(kind: ObjectiveKind) -> Self {
        let beta = match kind {
            ObjectiveKind::Tpo | ObjectiveKind::LplOnly => 0.3,
            _ => 0.1,
        };
        let lambda = match kind {
            ObjectiveKind::Tpo | ObjectiveKind::PlOnly => 1.0,
            _ => 0.0,
        };
        Self { kind, beta, lambda, gdr_weight: 0.0, safe_answer: "I don't know".into() }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.beta > 0.0 && self.beta.is_finite()) {
            return Err(Error::Config(format!("beta must be positive, got {}", self.beta)));
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::Config(format!(
                "lambda must be finite and >= 0, got {}",
                self.lambda
            )));
        }
        if !(self.gdr_weight >= 0.0 && self.gdr_weight.is_finite()) {
            return Err(Error::Config(format!(
                "gdr_weight must be finite and >= 0, got {}",
                self.gdr_weight
            )));
        }
        if self.kind == ObjectiveKind::Kto && self.safe_answer.trim().is_empty() {
            return Err(Error::Config("KTO requires a non-empty safe_answer".into()));
        }
        Ok(())
    }
}

/// Scalar loss with its named components. The identity
/// `total = forget_term + lambda*pl_term + gdr_weight*gdr_term`
/// holds to within accumulation round-off.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct BatchLoss {
    pub total: f64,
    /// GA / NPO / KTO / LPL value, by kind; zero for PL-only.
    pub forget_term: f64,
    /// GW cross-entropy (unweighted).
    pub pl_term: f64,
    /// Retain-set cross-entropy (unweighted).
    pub gdr_term: f64,
    /// Mean per-position KL(P_theta || P_ref) over the safe answer (KTO).
    pub kl_term: f64,
    /// Samples skipped by LPL because their mask has no unwanted words.
    pub excluded_no_uw: usize,
    /// Samples skipped by PL because their mask has no general words.
    pub excluded_no_gw: usize,
}

/// A sample in model-ready form: prompt `[BOS] question`, target
/// `answer [EOS]`, and a per-target-token unwanted-word mask.
#[derive(Debug, Clone)]
pub struct EncodedSample {
    pub prompt: Vec<u32>,
    pub answer: Vec<u32>,
    pub uw: Vec<bool>,
}

impl EncodedSample {
    pub fn from_annotated(
        tok: &Tokenizer,
        sample: &crate::corpus::AnnotatedSample,
    ) -> Result<Self> {
        sample.validate()?;
        let mut enc = Self::from_qa(tok, &sample.base.question, &sample.base.answer)?;
        // answer words map one-to-one onto tokens, plus the trailing EOS
        debug_assert_eq!(enc.uw.len(), sample.uw_mask.len() + 1);
        enc.uw[..sample.uw_mask.len()].copy_from_slice(&sample.uw_mask);
        Ok(enc)
    }

    /// Encode with an all-general mask (retain/holdout samples).
    pub fn from_qa(tok: &Tokenizer, question: &str, answer: &str) -> Result<Self> {
        let mut prompt = vec![BOS];
        prompt.extend(tok.encode(question));
        let mut ans = tok.encode(answer);
        if ans.is_empty() {
            return Err(Error::Contract("encoded answer is empty".into()));
        }
        ans.push(EOS);
        let uw = vec![false; ans.len()];
        Ok(Self { prompt, answer: ans, uw })
    }

    fn tokens(&self) -> Vec<u32> {
        self.prompt.iter().chain(&self.answer).copied().collect()
    }
}

/// θ_0 − (θ_reinforce − θ_0) = 2θ_0 − θ_reinforce, elementwise.
pub fn task_vector_unlearn(theta_0: &[f64], theta_reinforce: &[f64]) -> Result<Vec<f64>> {
    if theta_0.len() != theta_reinforce.len() {
        return Err(Error::Contract(format!(
            "task vector shape mismatch: {} vs {}",
            theta_0.len(),
            theta_reinforce.len()
        )));
    }
    Ok(theta_0.iter().zip(theta_reinforce).map(|(a, r)| 2.0 * a - r).collect())
}

/// Batch loss and the flat gradient with respect to the model parameters.
pub fn batch_loss_and_grad(
    model: &TransformerLM,
    reference: Option<&TransformerLM>,
    tokenizer: &Tokenizer,
    forget: &[EncodedSample],
    retain: &[EncodedSample],
    cfg: &ObjectiveConfig,
) -> Result<(BatchLoss, Vec<f64>)> {
    let (bf, total, loss) = build_batch(model, reference, tokenizer, forget, retain, cfg)?;
    let grads = bf.tape.backward(total)?;
    Ok((loss, bf.flat_grad(&grads)))
}

/// Batch loss without the backward pass.
pub fn batch_loss(
    model: &TransformerLM,
    reference: Option<&TransformerLM>,
    tokenizer: &Tokenizer,
    forget: &[EncodedSample],
    retain: &[EncodedSample],
    cfg: &ObjectiveConfig,
) -> Result<BatchLoss> {
    let (_, _, loss) = build_batch(model, reference, tokenizer, forget, retain, cfg)?;
    Ok(loss)
}

fn build_batch(
    model: &TransformerLM,
    reference: Option<&TransformerLM>,
    tokenizer: &Tokenizer,
    forget: &[EncodedSample],
    retain: &[EncodedSample],
    cfg: &ObjectiveConfig,
) -> Result<(crate::model::BatchForward, Var, BatchLoss)> {
    cfg.validate()?;
    if forget.is_empty() {
        return Err(Error::Contract("empty forget batch".into()));
    }
    if cfg.gdr_weight > 0.0 && retain.is_empty() {
        return Err(Error::Config("gdr_weight > 0 with an empty retain batch".into()));
    }
    let reference = match (cfg.kind.needs_reference(), reference) {
        (true, None) => {
            return Err(Error::Contract(format!(
                "objective {} requires a reference model",
                cfg.kind.name()
            )))
        }
        (true, Some(r)) => Some(r),
        (false, r) => r,
    };

    // Safe-answer tokens for the KTO anchor.
    let safe: Vec<u32> = if cfg.kind == ObjectiveKind::Kto {
        let mut s = tokenizer.encode(&cfg.safe_answer);
        s.push(EOS);
        s
    } else {
        Vec::new()
    };

    // Reference constants, computed before the batch forward so the tape
    // only ever sees them as plain numbers.
    let mut ref_seq_mean = Vec::new(); // per-token mean log-prob of the answer
    let mut ref_uw_mean = Vec::new(); // mean gold-token logit over UW positions
    let mut ref_safe_lp = Vec::new(); // full log-softmax over the safe sequence
    if let Some(r) = reference {
        for s in forget {
            match cfg.kind {
                ObjectiveKind::Npo | ObjectiveKind::Kto => {
                    let lps = r.sequence_logprob(&s.prompt, &s.answer)?;
                    ref_seq_mean.push(lps.iter().sum::<f64>() / lps.len() as f64);
                }
                ObjectiveKind::Tpo | ObjectiveKind::LplOnly => {
                    ref_uw_mean.push(ref_uw_logit_mean(r, s)?);
                }
                _ => {}
            }
            if cfg.kind == ObjectiveKind::Kto {
                let tokens: Vec<u32> = s.prompt.iter().chain(&safe).copied().collect();
                let logits = r.logits(&tokens)?;
                let mut scratch = Tape::new();
                let leaf = scratch.leaf(logits);
                let lp = scratch.log_softmax(leaf);
                ref_safe_lp.push(scratch.value(lp).clone());
            }
        }
    }

    // One shared forward over every sequence the losses read.
    let mut seqs: Vec<Vec<u32>> = forget.iter().map(|s| s.tokens()).collect();
    let kto_base = seqs.len();
    if cfg.kind == ObjectiveKind::Kto {
        for s in forget {
            seqs.push(s.prompt.iter().chain(&safe).copied().collect());
        }
    }
    let retain_base = seqs.len();
    seqs.extend(retain.iter().map(|s| s.tokens()));
    let mut bf = model.forward_batch(&seqs)?;
    let tape = &mut bf.tape;

    let mut forget_vars = Vec::new();
    let mut pl_vars = Vec::new();
    let mut kl_values = Vec::new();
    let mut excluded_no_uw = 0;
    let mut excluded_no_gw = 0;

    for (i, s) in forget.iter().enumerate() {
        let logits = bf.logits[i];
        match cfg.kind {
            ObjectiveKind::Ga => {
                forget_vars.push(seq_mean_logprob(tape, logits, s.prompt.len(), &s.answer));
            }
            ObjectiveKind::Npo => {
                let m = seq_mean_logprob(tape, logits, s.prompt.len(), &s.answer);
                let c = tape.scalar(ref_seq_mean[i]);
                let ratio = tape.sub(m, c);
                let u = tape.scale(ratio, -cfg.beta);
                forget_vars.push(pref_loss(tape, u, cfg.beta));
            }
            ObjectiveKind::Kto => {
                let m = tape.scalar(ref_seq_mean[i]);
                let m_theta = seq_mean_logprob(tape, logits, s.prompt.len(), &s.answer);
                let ratio = tape.sub(m_theta, m);
                let kl = kl_to_reference(
                    tape,
                    bf.logits[kto_base + i],
                    &ref_safe_lp[i],
                    s.prompt.len(),
                    safe.len(),
                );
                kl_values.push(tape.value(kl).item());
                let neg_ratio = tape.scale(ratio, -cfg.beta);
                let kl_scaled = tape.scale(kl, cfg.beta);
                let u = tape.add(kl_scaled, neg_ratio);
                forget_vars.push(pref_loss(tape, u, cfg.beta));
            }
            ObjectiveKind::Tpo | ObjectiveKind::LplOnly => {
                match uw_logit_gap(tape, logits, s.prompt.len(), &s.answer, &s.uw, ref_uw_mean[i])
                {
                    Some(gap) => {
                        let u = tape.scale(gap, cfg.beta);
                        forget_vars.push(pref_loss(tape, u, cfg.beta));
                    }
                    None => excluded_no_uw += 1,
                }
            }
            ObjectiveKind::PlOnly => {}
        }
        if cfg.lambda > 0.0 || cfg.kind == ObjectiveKind::PlOnly {
            match gw_cross_entropy_node(tape, logits, s.prompt.len(), &s.answer, &s.uw) {
                Some(pl) => pl_vars.push(pl),
                None => excluded_no_gw += 1,
            }
        }
    }

    let mut gdr_vars = Vec::new();
    if cfg.gdr_weight > 0.0 {
        for (j, s) in retain.iter().enumerate() {
            let m = seq_mean_logprob(tape, bf.logits[retain_base + j], s.prompt.len(), &s.answer);
            gdr_vars.push(tape.scale(m, -1.0));
        }
    }

    let forget_node =
        if forget_vars.is_empty() { tape.scalar(0.0) } else { tape.mean_vars(&forget_vars) };
    let pl_node = if pl_vars.is_empty() { tape.scalar(0.0) } else { tape.mean_vars(&pl_vars) };
    let gdr_node = if gdr_vars.is_empty() { tape.scalar(0.0) } else { tape.mean_vars(&gdr_vars) };

    // Effective PL weight: PL-only is "the PL term is the loss".
    let lambda_eff = if cfg.kind == ObjectiveKind::PlOnly && cfg.lambda == 0.0 {
        1.0
    } else {
        cfg.lambda
    };
    let pl_weighted = tape.scale(pl_node, lambda_eff);
    let gdr_weighted = tape.scale(gdr_node, cfg.gdr_weight);
    let fp = tape.add(forget_node, pl_weighted);
    let total = tape.add(fp, gdr_weighted);

    let loss = BatchLoss {
        total: tape.value(total).item(),
        forget_term: tape.value(forget_node).item(),
        pl_term: tape.value(pl_node).item(),
        gdr_term: tape.value(gdr_node).item(),
        kl_term: if kl_values.is_empty() {
            0.0
        } else {
            kl_values.iter().sum::<f64>() / kl_values.len() as f64
        },
        excluded_no_uw,
        excluded_no_gw,
    };
    Ok((bf, total, loss))
}

/// Row of the logits that predicts answer token `j`.
fn pred_row(prompt_len: usize, j: usize) -> usize {
    prompt_len + j - 1
}

/// Mean over answer tokens of log P(answer_j | prefix) as a tape node.
fn seq_mean_logprob(tape: &mut Tape, logits: Var, prompt_len: usize, answer: &[u32]) -> Var {
    let picks: Vec<(usize, usize)> = answer
        .iter()
        .enumerate()
        .map(|(j, &t)| (pred_row(prompt_len, j), t as usize))
        .collect();
    let lp = tape.log_softmax(logits);
    let sel = tape.select(lp, &picks);
    tape.mean(sel)
}

/// Cross-entropy over general-word positions; `None` when the mask has no
/// general words (the sample is excluded by convention).
fn gw_cross_entropy_node(
    tape: &mut Tape,
    logits: Var,
    prompt_len: usize,
    answer: &[u32],
    uw: &[bool],
) -> Option<Var> {
    let picks: Vec<(usize, usize)> = answer
        .iter()
        .zip(uw)
        .enumerate()
        .filter(|(_, (_, &is_uw))| !is_uw)
        .map(|(j, (&t, _))| (pred_row(prompt_len, j), t as usize))
        .collect();
    if picks.is_empty() {
        return None;
    }
    let lp = tape.log_softmax(logits);
    let sel = tape.select(lp, &picks);
    let m = tape.mean(sel);
    Some(tape.scale(m, -1.0))
}

/// Mean over UW positions of (z_ref − z_theta) on the gold-token raw
/// logits; `None` when the mask has no unwanted words.
fn uw_logit_gap(
    tape: &mut Tape,
    logits: Var,
    prompt_len: usize,
    answer: &[u32],
    uw: &[bool],
    ref_mean: f64,
) -> Option<Var> {
    let picks = uw_picks(prompt_len, answer, uw);
    if picks.is_empty() {
        return None;
    }
    let z = tape.select(logits, &picks);
    let m_theta = tape.mean(z);
    let c = tape.scalar(ref_mean);
    Some(tape.sub(c, m_theta))
}

fn uw_picks(prompt_len: usize, answer: &[u32], uw: &[bool]) -> Vec<(usize, usize)> {
    answer
        .iter()
        .zip(uw)
        .enumerate()
        .filter(|(_, (_, &is_uw))| is_uw)
        .map(|(j, (&t, _))| (pred_row(prompt_len, j), t as usize))
        .collect()
}

/// Reference-side constant for the logit gap, computed with the same
/// selection and mean as the tape side so the gap is exactly zero at
/// θ = θ_o.
fn ref_uw_logit_mean(reference: &TransformerLM, s: &EncodedSample) -> Result<f64> {
    let picks = uw_picks(s.prompt.len(), &s.answer, &s.uw);
    if picks.is_empty() {
        return Ok(0.0);
    }
    let logits = reference.logits(&s.tokens())?;
    let (_, v) = logits.dims2();
    let vals: Vec<f64> = picks.iter().map(|&(r, c)| logits.data()[r * v + c]).collect();
    Ok(vals.iter().sum::<f64>() / vals.len() as f64)
}

/// Gradient of the LPL term with respect to a raw logit tensor, together
/// with the (row, column) entries allowed to be nonzero — exactly the
/// (UW-position, gold-token) picks. Exposed for locality audits.
pub fn lpl_logit_gradient(
    logits: &Tensor,
    prompt_len: usize,
    answer: &[u32],
    uw: &[bool],
    ref_mean: f64,
    beta: f64,
) -> Result<(Vec<f64>, Vec<(usize, usize)>)> {
    let picks = uw_picks(prompt_len, answer, uw);
    if picks.is_empty() {
        return Err(Error::Contract("lpl_logit_gradient: mask has no unwanted words".into()));
    }
    let mut tape = Tape::new();
    let leaf = tape.leaf(logits.clone());
    let gap = uw_logit_gap(&mut tape, leaf, prompt_len, answer, uw, ref_mean)
        .expect("picks checked non-empty");
    let u = tape.scale(gap, beta);
    let loss = pref_loss(&mut tape, u, beta);
    let grads = tape.backward(loss)?;
    Ok((grads.get(leaf).to_vec(), picks))
}

/// −(2/β)·log σ(u).
fn pref_loss(tape: &mut Tape, u: Var, beta: f64) -> Var {
    let ls = tape.log_sigmoid(u);
    tape.scale(ls, -2.0 / beta)
}

/// Mean over the safe answer's positions of the full-vocabulary
/// KL(P_theta || P_ref) of next-token distributions.
fn kl_to_reference(
    tape: &mut Tape,
    logits: Var,
    ref_lp: &Tensor,
    prompt_len: usize,
    safe_len: usize,
) -> Var {
    let (t, v) = tape.value(logits).dims2();
    debug_assert_eq!((t, v), ref_lp.dims2());
    // averaging mask: 1/safe_len on the rows that predict safe tokens
    let mut mask = vec![0.0; t * v];
    for j in 0..safe_len {
        let r = pred_row(prompt_len, j);
        for e in &mut mask[r * v..(r + 1) * v] {
            *e = 1.0 / safe_len as f64;
        }
    }
    let mask = tape.leaf(Tensor::from_parts(vec![t, v], mask));
    let ref_leaf = tape.leaf(ref_lp.clone());
    let p = tape.softmax(logits).expect("non-empty vocab axis");
    let lp = tape.log_softmax(logits);
    let diff = tape.sub(lp, ref_leaf);
    let contrib = tape.mul(p, diff);
    let masked = tape.mul(contrib, mask);
    tape.sum(masked)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{finite_difference_check, FdOptions};
    use crate::model::{ModelConfig, TransformerLM};

    const LN2: f64 = std::f64::consts::LN_2;

    fn tiny_setup() -> (TransformerLM, TransformerLM, Tokenizer) {
        let tok = Tokenizer::build([
            "where was vera born ? vera was born in lyon .",
            "what does vera write ? vera writes satire .",
            "i don't know",
        ]);
        let cfg = ModelConfig {
            vocab_size: tok.vocab_size(),
            dim: 16,
            layers: 2,
            heads: 2,
            max_len: 32,
        };
        let model = TransformerLM::causal(cfg, 7).unwrap();
        let reference = TransformerLM::causal(cfg, 7).unwrap();
        (model, reference, tok)
    }

    fn forget_batch(tok: &Tokenizer) -> Vec<EncodedSample> {
        let mut a =
            EncodedSample::from_qa(tok, "where was vera born ?", "vera was born in lyon .")
                .unwrap();
        a.uw[4] = true; // "lyon"
        let mut b =
            EncodedSample::from_qa(tok, "what does vera write ?", "vera writes satire .").unwrap();
        b.uw[2] = true; // "satire"
        vec![a, b]
    }

    fn retain_batch(tok: &Tokenizer) -> Vec<EncodedSample> {
        vec![EncodedSample::from_qa(tok, "what does vera write ?", "vera writes satire .")
            .unwrap()]
    }

    #[test]
    fn kind_defaults() {
        let tpo = ObjectiveConfig::new(ObjectiveKind::Tpo);
        assert_eq!((tpo.beta, tpo.lambda), (0.3, 1.0));
        let npo = ObjectiveConfig::new(ObjectiveKind::Npo);
        assert_eq!((npo.beta, npo.lambda), (0.1, 0.0));
        assert_eq!(npo.safe_answer, "I don't know");
    }

    #[test]
    fn config_validation_rejects_bad_knobs() {
        let mut c = ObjectiveConfig::new(ObjectiveKind::Npo);
        c.beta = 0.0;
        assert!(c.validate().is_err());
        let mut c = ObjectiveConfig::new(ObjectiveKind::Tpo);
        c.lambda = -0.1;
        assert!(c.validate().is_err());
        let mut c = ObjectiveConfig::new(ObjectiveKind::Kto);
        c.safe_answer = "  ".into();
        assert!(c.validate().is_err());
    }

    #[test]
    fn config_json_fills_kind_defaults() {
        let c: ObjectiveConfig = serde_json::from_str(r#"{"kind":"tpo"}"#).unwrap();
        assert_eq!((c.beta, c.lambda), (0.3, 1.0));
        let c: ObjectiveConfig = serde_json::from_str(r#"{"kind":"npo","lambda":1.0}"#).unwrap();
        assert_eq!((c.beta, c.lambda), (0.1, 1.0));
    }

    #[test]
    fn task_vector_identities() {
        assert_eq!(task_vector_unlearn(&[1.0], &[1.0]).unwrap(), vec![1.0]);
        assert_eq!(task_vector_unlearn(&[1.0], &[1.5]).unwrap(), vec![0.5]);
        // subtracting the same delta (r - a) twice lands on 3a - 2r; the
        // second application sees that delta as (once) - (a).
        let a = [1.0, -2.0];
        let r = [1.5, 0.5];
        let once = task_vector_unlearn(&a, &r).unwrap();
        let twice = task_vector_unlearn(&once, &a).unwrap();
        for i in 0..2 {
            assert!((twice[i] - (3.0 * a[i] - 2.0 * r[i])).abs() < 1e-15);
        }
        assert!(task_vector_unlearn(&[1.0], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn pref_loss_closed_forms() {
        // sigma(0) = 1/2 -> (2/beta) ln 2
        let mut tape = Tape::new();
        let u = tape.scalar(0.0);
        let l = pref_loss(&mut tape, u, 0.1);
        assert!((tape.value(l).item() - 20.0 * LN2).abs() < 1e-12);

        // NPO at log-ratio +1, beta 0.1: -20 ln sigma(-0.1)
        let mut tape = Tape::new();
        let u = tape.scalar(-0.1);
        let l = pref_loss(&mut tape, u, 0.1);
        assert!((tape.value(l).item() - 14.887933201471).abs() < 1e-9);

        // LPL at gap 1.0, beta 0.5: -4 ln sigma(0.5)
        let mut tape = Tape::new();
        let u = tape.scalar(0.5);
        let l = pref_loss(&mut tape, u, 0.5);
        assert!((tape.value(l).item() - 1.896307936720).abs() < 1e-9);

        // fully unlearned limit: u -> +inf drives the loss toward 0
        let mut tape = Tape::new();
        let u = tape.scalar(500.0);
        let l = pref_loss(&mut tape, u, 0.1);
        assert!(tape.value(l).item() >= 0.0);
        assert!(tape.value(l).item() < 1e-12);
    }

    #[test]
    fn pl_frozen_value_from_probabilities() {
        // two GW tokens with probabilities 1/2 and 1/4 over a 2-word vocab:
        // rows [0,0] and [0, ln 3], gold token 0 in both
        let mut tape = Tape::new();
        let logits = tape.leaf(
            Tensor::new(vec![3, 2], vec![0.0, 0.0, 0.0, 3f64.ln(), 0.0, 0.0]).unwrap(),
        );
        let pl =
            gw_cross_entropy_node(&mut tape, logits, 1, &[0, 0], &[false, false]).unwrap();
        assert!((tape.value(pl).item() - 1.039720770840).abs() < 1e-9);
    }

    #[test]
    fn pl_all_uw_mask_is_excluded() {
        let mut tape = Tape::new();
        let logits = tape.leaf(Tensor::zeros(vec![3, 2]));
        assert!(gw_cross_entropy_node(&mut tape, logits, 1, &[0, 0], &[true, true]).is_none());
    }

    #[test]
    fn reference_fixed_point_equals_two_over_beta_ln_two() {
        let (model, reference, tok) = tiny_setup();
        let forget = forget_batch(&tok);
        for beta in [0.1, 0.3, 0.5] {
            for kind in [ObjectiveKind::Npo, ObjectiveKind::Kto, ObjectiveKind::LplOnly] {
                let mut cfg = ObjectiveConfig::new(kind);
                cfg.beta = beta;
                cfg.lambda = 0.0;
                let loss =
                    batch_loss(&model, Some(&reference), &tok, &forget, &[], &cfg).unwrap();
                let expect = 2.0 / beta * LN2;
                assert!(
                    (loss.total - expect).abs() < 1e-9,
                    "{} beta {beta}: {} vs {expect}",
                    kind.name(),
                    loss.total
                );
                if kind == ObjectiveKind::Kto {
                    assert_eq!(loss.kl_term, 0.0, "KL(p||p) must be exactly zero");
                }
            }
        }
    }

    #[test]
    fn ga_uniform_model_is_minus_ln_v() {
        let (mut model, _, tok) = tiny_setup();
        model.param_slice_mut("w_out").unwrap().fill(0.0);
        let cfg = ObjectiveConfig::new(ObjectiveKind::Ga);
        let loss = batch_loss(&model, None, &tok, &forget_batch(&tok), &[], &cfg).unwrap();
        let v = model.config().vocab_size as f64;
        assert!((loss.total - (1.0 / v).ln()).abs() < 1e-12);
    }

    #[test]
    fn gdr_uniform_model_is_ln_v_and_matches_all_gw_pl() {
        let (mut model, _, tok) = tiny_setup();
        model.param_slice_mut("w_out").unwrap().fill(0.0);
        let retain = retain_batch(&tok);
        let mut cfg = ObjectiveConfig::new(ObjectiveKind::PlOnly);
        cfg.gdr_weight = 1.0;
        // forget batch = the retain sample with an all-GW mask: PL == GDR
        let loss = batch_loss(&model, None, &tok, &retain, &retain, &cfg).unwrap();
        let v = model.config().vocab_size as f64;
        assert!((loss.gdr_term - v.ln()).abs() < 1e-12);
        assert!((loss.pl_term - loss.gdr_term).abs() < 1e-12);
    }

    #[test]
    fn gdr_weight_without_retain_batch_is_config_error() {
        let (model, _, tok) = tiny_setup();
        let mut cfg = ObjectiveConfig::new(ObjectiveKind::Ga);
        cfg.gdr_weight = 1.0;
        assert!(batch_loss(&model, None, &tok, &forget_batch(&tok), &[], &cfg).is_err());
    }

    #[test]
    fn missing_reference_is_a_contract_error() {
        let (model, _, tok) = tiny_setup();
        let cfg = ObjectiveConfig::new(ObjectiveKind::Npo);
        assert!(batch_loss(&model, None, &tok, &forget_batch(&tok), &[], &cfg).is_err());
    }

    #[test]
    fn empty_forget_batch_is_rejected() {
        let (model, reference, tok) = tiny_setup();
        let cfg = ObjectiveConfig::new(ObjectiveKind::Tpo);
        assert!(batch_loss(&model, Some(&reference), &tok, &[], &[], &cfg).is_err());
    }

    #[test]
    fn tpo_components_recompose_and_lambda_zero_is_lpl() {
        let (mut model, reference, tok) = tiny_setup();
        // perturb the model away from the reference
        for p in model.params_mut().iter_mut() {
            *p += 0.01;
        }
        let forget = forget_batch(&tok);
        let retain = retain_batch(&tok);
        for (lambda, gdr) in [(1.0, 0.0), (0.5, 0.7), (0.0, 0.0)] {
            let mut cfg = ObjectiveConfig::new(ObjectiveKind::Tpo);
            cfg.lambda = lambda;
            cfg.gdr_weight = gdr;
            let loss =
                batch_loss(&model, Some(&reference), &tok, &forget, &retain, &cfg).unwrap();
            let recomposed = loss.forget_term + lambda * loss.pl_term + gdr * loss.gdr_term;
            assert!((loss.total - recomposed).abs() < 1e-10);
            if lambda == 0.0 {
                assert_eq!(loss.total, loss.forget_term);
            }
        }
    }

    #[test]
    fn preference_losses_nonnegative_on_randomized_instances() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha20Rng::seed_from_u64(99);
        for _ in 0..1000 {
            let u: f64 = rng.gen_range(-30.0..30.0);
            let beta: f64 = rng.gen_range(0.01..2.0);
            let mut tape = Tape::new();
            let uv = tape.scalar(u);
            let l = pref_loss(&mut tape, uv, beta);
            assert!(tape.value(l).item() >= 0.0, "u={u} beta={beta}");
        }
    }

    #[test]
    fn lpl_gradient_is_local_to_uw_gold_entries() {
        // 4 rows x 3 vocab; answer tokens [2, 0, 1] after a 2-token prompt,
        // UW mask selects answer positions 0 and 2
        let mut tape = Tape::new();
        let logits = tape.leaf(
            Tensor::new(
                vec![4, 3],
                vec![0.3, -0.2, 1.0, 0.5, 0.1, -0.7, 0.2, 0.9, -1.1, 0.0, 0.4, 0.8],
            )
            .unwrap(),
        );
        let answer = [2u32, 0, 1];
        let uw = [true, false, true];
        let gap = uw_logit_gap(&mut tape, logits, 2, &answer, &uw, 0.5).unwrap();
        let u = tape.scale(gap, 0.3);
        let loss = pref_loss(&mut tape, u, 0.3);
        let grads = tape.backward(loss).unwrap();
        let g = grads.get(logits);
        // UW picks: (row 1, col 2) and (row 3, col 1)
        for r in 0..4 {
            for c in 0..3 {
                let expect_nonzero = (r, c) == (1, 2) || (r, c) == (3, 1);
                assert_eq!(g[r * 3 + c] != 0.0, expect_nonzero, "entry ({r},{c})");
            }
        }
    }

    #[test]
    fn lpl_descent_direction_increases_the_gap() {
        let (model, reference, tok) = tiny_setup();
        let forget = forget_batch(&tok);
        let cfg = ObjectiveConfig::new(ObjectiveKind::LplOnly);
        let (_, grad) =
            batch_loss_and_grad(&model, Some(&reference), &tok, &forget, &[], &cfg).unwrap();
        let mut stepped = model.clone();
        let lr = 1e-3;
        for (p, g) in stepped.params_mut().iter_mut().zip(&grad) {
            *p -= lr * g;
        }
        let mean_gap = |m: &TransformerLM| -> f64 {
            let mut acc = 0.0;
            for s in &forget {
                let picks = uw_picks(s.prompt.len(), &s.answer, &s.uw);
                let logits = m.logits(&s.tokens()).unwrap();
                let (_, v) = logits.dims2();
                let z: f64 = picks.iter().map(|&(r, c)| logits.data()[r * v + c]).sum::<f64>()
                    / picks.len() as f64;
                acc += ref_uw_logit_mean(&reference, s).unwrap() - z;
            }
            acc / forget.len() as f64
        };
        assert!(mean_gap(&stepped) > mean_gap(&model), "step must widen z_ref - z_theta");
    }

    #[test]
    fn excluded_sample_counters() {
        let (model, reference, tok) = tiny_setup();
        let mut all_uw =
            EncodedSample::from_qa(&tok, "where was vera born ?", "lyon").unwrap();
        for m in all_uw.uw.iter_mut() {
            *m = true;
        }
        let no_uw =
            EncodedSample::from_qa(&tok, "what does vera write ?", "satire").unwrap();
        let cfg = ObjectiveConfig::new(ObjectiveKind::Tpo);
        let loss = batch_loss(
            &model,
            Some(&reference),
            &tok,
            &[all_uw.clone(), no_uw.clone()],
            &[],
            &cfg,
        )
        .unwrap();
        assert_eq!(loss.excluded_no_uw, 1); // no_uw has no unwanted words
        assert_eq!(loss.excluded_no_gw, 1); // all_uw has no general words
    }

    #[test]
    fn ga_matches_bruteforce_from_sequence_logprob() {
        let (model, _, tok) = tiny_setup();
        let forget = forget_batch(&tok);
        let cfg = ObjectiveConfig::new(ObjectiveKind::Ga);
        let loss = batch_loss(&model, None, &tok, &forget, &[], &cfg).unwrap();
        let mut expect = 0.0;
        for s in &forget {
            let lps = model.sequence_logprob(&s.prompt, &s.answer).unwrap();
            expect += lps.iter().sum::<f64>() / lps.len() as f64;
        }
        expect /= forget.len() as f64;
        assert!((loss.total - expect).abs() < 1e-12);
    }

    #[test]
    fn finite_difference_smoke_on_tpo_with_gdr() {
        let (mut model, reference, tok) = tiny_setup();
        for p in model.params_mut().iter_mut() {
            *p += 0.005;
        }
        let forget = forget_batch(&tok);
        let retain = retain_batch(&tok);
        let mut cfg = ObjectiveConfig::new(ObjectiveKind::Tpo);
        cfg.gdr_weight = 1.0;
        let (_, grad) =
            batch_loss_and_grad(&model, Some(&reference), &tok, &forget, &retain, &cfg).unwrap();
        let probe = model.clone();
        let rel = finite_difference_check(
            move |p| {
                let mut m = probe.clone();
                m.set_params(p.to_vec()).unwrap();
                batch_loss(&m, Some(&reference), &tok, &forget, &retain, &cfg).unwrap().total
            },
            model.params(),
            &grad,
            &FdOptions { eps: 1e-5, max_coords: 64, seed: 3 },
        )
        .unwrap();
        assert!(rel <= 1e-4, "rel err {rel}");
    }
}
