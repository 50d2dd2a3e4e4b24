//! Metrics and diagnostics: ROUGE-L F1, answer probability, truth ratio,
//! KS-test forget quality, model utility, Min-K%/PrivLeak, VerbMem/KnowMem,
//! GW cross-entropy and reference-KL.

use crate::corpus::QASample;
use crate::error::{Error, Result};
use crate::model::TransformerLM;
use crate::objectives::{batch_loss, EncodedSample, ObjectiveConfig, ObjectiveKind};
use crate::tokenizer::{split_words, Tokenizer, BOS, EOS};
use serde::{Deserialize, Serialize};
use std::io::{BufWriter, Write};
use std::path::Path;

// ── ROUGE-L ──────────────────────────────────────────────────────────

/// LCS-based F1 over word sequences; 0 when either side is empty.
pub fn rouge_l_f1<S: AsRef<str>>(candidate: &[S], reference: &[S]) -> f64 {
    if candidate.is_empty() || reference.is_empty() {
        return 0.0;
    }
    let lcs = lcs_len(candidate, reference);
    if lcs == 0 {
        return 0.0;
    }
    let p = lcs as f64 / candidate.len() as f64;
    let r = lcs as f64 / reference.len() as f64;
    2.0 * p * r / (p + r)
}

fn lcs_len<S: AsRef<str>>(a: &[S], b: &[S]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x.as_ref() == y.as_ref() {
                prev[j] + 1
            } else {
                prev[j + 1].max(cur[j])
            };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// ROUGE-L between two raw texts after canonical word splitting.
pub fn rouge_l_text(candidate: &str, reference: &str) -> f64 {
    rouge_l_f1(&split_words(candidate), &split_words(reference))
}

// ── probability & truth ratio ────────────────────────────────────────

/// Geometric mean of per-token probabilities P(y|x)^(1/|y|).
pub fn answer_probability(model: &TransformerLM, x: &[u32], y: &[u32]) -> Result<f64> {
    let lps = model.sequence_logprob(x, y)?;
    Ok((lps.iter().sum::<f64>() / lps.len() as f64).exp())
}

fn prompt_of(tok: &Tokenizer, question: &str) -> Vec<u32> {
    let mut p = vec![BOS];
    p.extend(tok.encode(question));
    p
}

fn target_of(tok: &Tokenizer, answer: &str) -> Vec<u32> {
    let mut t = tok.encode(answer);
    t.push(EOS);
    t
}

/// Normalized probability of a sample's gold answer.
pub fn sample_probability(model: &TransformerLM, tok: &Tokenizer, s: &QASample) -> Result<f64> {
    answer_probability(model, &prompt_of(tok, &s.question), &target_of(tok, &s.answer))
}

/// Truth ratio R = mean perturbed probability / paraphrased probability.
/// Returns `None` when the sample lacks a paraphrase or has fewer than two
/// perturbed answers (skipped with a diagnostic at the call site).
pub fn truth_ratio(model: &TransformerLM, tok: &Tokenizer, s: &QASample) -> Result<Option<f64>> {
    if s.paraphrased_answer.trim().is_empty() || s.perturbed_answers.len() < 2 {
        return Ok(None);
    }
    let prompt = prompt_of(tok, &s.question);
    let para = answer_probability(model, &prompt, &target_of(tok, &s.paraphrased_answer))?;
    let mut pert = 0.0;
    for p in &s.perturbed_answers {
        pert += answer_probability(model, &prompt, &target_of(tok, p))?;
    }
    pert /= s.perturbed_answers.len() as f64;
    Ok(Some(pert / para))
}

/// Utility transform of the truth ratio.
pub fn truth_ratio_utility(r: f64) -> f64 {
    (1.0 - r).max(0.0)
}

// ── Kolmogorov–Smirnov ───────────────────────────────────────────────

/// Two-sample KS statistic and p-value. Exact permutation enumeration when
/// the smaller sample has at most 10 values and the assignment count is
/// tractable; asymptotic Kolmogorov distribution otherwise.
pub fn ks_two_sample(a: &[f64], b: &[f64]) -> Result<(f64, f64)> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::Contract("ks_two_sample: empty input".into()));
    }
    let d = ks_statistic(a, b);
    let (n, m) = (a.len(), b.len());
    const EXACT_CAP: u128 = 400_000;
    let p = if n.min(m) <= 10 && binomial(n + m, n) <= EXACT_CAP {
        ks_exact_p(a, b, d)
    } else {
        ks_asymptotic_p(d, n, m)
    };
    Ok((d, p))
}

fn ks_statistic(a: &[f64], b: &[f64]) -> f64 {
    // sweep the pooled sorted values, tracking both ECDFs
    let mut pooled: Vec<(f64, bool)> = a
        .iter()
        .map(|&v| (v, true))
        .chain(b.iter().map(|&v| (v, false)))
        .collect();
    pooled.sort_by(|x, y| x.0.partial_cmp(&y.0).unwrap());
    let (mut ca, mut cb) = (0usize, 0usize);
    let mut d: f64 = 0.0;
    let mut i = 0;
    while i < pooled.len() {
        let v = pooled[i].0;
        while i < pooled.len() && pooled[i].0 == v {
            if pooled[i].1 {
                ca += 1;
            } else {
                cb += 1;
            }
            i += 1;
        }
        let fa = ca as f64 / a.len() as f64;
        let fb = cb as f64 / b.len() as f64;
        d = d.max((fa - fb).abs());
    }
    d
}

fn binomial(n: usize, k: usize) -> u128 {
    let k = k.min(n - k);
    let mut acc: u128 = 1;
    for i in 0..k {
        acc = acc.saturating_mul((n - i) as u128) / (i as u128 + 1);
    }
    acc
}

/// Exact permutation p-value: the fraction of label assignments of the
/// pooled sample whose KS statistic is at least the observed one.
fn ks_exact_p(a: &[f64], b: &[f64], d_obs: f64) -> f64 {
    let mut pooled: Vec<f64> = a.iter().chain(b).copied().collect();
    pooled.sort_by(|x, y| x.partial_cmp(y).unwrap());
    let n = a.len();
    let total = pooled.len();
    let mut extreme = 0u64;
    let mut count = 0u64;
    // iterate over all size-n index subsets of the pooled sample
    let mut idx: Vec<usize> = (0..n).collect();
    loop {
        let mut in_a = vec![false; total];
        for &i in &idx {
            in_a[i] = true;
        }
        // ECDF sweep over the already-sorted pooled values
        let (mut ca, mut cb) = (0usize, 0usize);
        let mut d: f64 = 0.0;
        let mut i = 0;
        while i < total {
            let v = pooled[i];
            while i < total && pooled[i] == v {
                if in_a[i] {
                    ca += 1;
                } else {
                    cb += 1;
                }
                i += 1;
            }
            let fa = ca as f64 / n as f64;
            let fb = cb as f64 / (total - n) as f64;
            d = d.max((fa - fb).abs());
        }
        count += 1;
        if d >= d_obs - 1e-12 {
            extreme += 1;
        }
        // next combination in lexicographic order
        let mut k = n;
        loop {
            if k == 0 {
                return extreme as f64 / count as f64;
            }
            k -= 1;
            if idx[k] != k + total - n {
                break;
            }
        }
        idx[k] += 1;
        for j in k + 1..n {
            idx[j] = idx[j - 1] + 1;
        }
    }
}

/// Asymptotic two-sided p with the standard effective-n correction.
fn ks_asymptotic_p(d: f64, n: usize, m: usize) -> f64 {
    let en = ((n * m) as f64 / (n + m) as f64).sqrt();
    let t = (en + 0.12 + 0.11 / en) * d;
    kolmogorov_q(t).clamp(0.0, 1.0)
}

/// Q(t) = 2 Σ_{j≥1} (−1)^{j−1} exp(−2 j² t²).
fn kolmogorov_q(t: f64) -> f64 {
    if t <= 0.0 {
        return 1.0;
    }
    let mut sum = 0.0;
    for j in 1..=100 {
        let term = (-2.0 * (j as f64) * (j as f64) * t * t).exp();
        sum += if j % 2 == 1 { term } else { -term };
        if term < 1e-16 {
            break;
        }
    }
    (2.0 * sum).clamp(0.0, 1.0)
}

/// KS p-value between the unlearned and retained models' truth-ratio
/// distributions over the forget set.
pub fn forget_quality(
    unlearned: &TransformerLM,
    retained: &TransformerLM,
    tok: &Tokenizer,
    forget: &[&QASample],
) -> Result<f64> {
    // The KS test compares the clipped truth-ratio scores max(0, 1 - R),
    // the same statistic that enters model utility, so "indistinguishable
    // from the retained model" means indistinguishable in the quantity the
    // benchmark actually reports.
    let mut ru = Vec::new();
    let mut rr = Vec::new();
    for s in forget {
        let (u, r) = (truth_ratio(unlearned, tok, s)?, truth_ratio(retained, tok, s)?);
        if let (Some(u), Some(r)) = (u, r) {
            ru.push(truth_ratio_utility(u));
            rr.push(truth_ratio_utility(r));
        }
    }
    let (_, p) = ks_two_sample(&ru, &rr)?;
    Ok(p)
}

// ── model utility ────────────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MeanKind {
    Harmonic,
    Arithmetic,
}

#[derive(Debug, Clone, Copy, Default, Serialize, Deserialize)]
pub struct SplitMetrics {
    pub probability: f64,
    pub rouge_l: f64,
    pub truth_ratio_u: f64,
}

fn split_metrics(
    model: &TransformerLM,
    tok: &Tokenizer,
    probe: &[&QASample],
) -> Result<SplitMetrics> {
    if probe.is_empty() {
        return Err(Error::Config("empty probe set".into()));
    }
    let mut prob = 0.0;
    let mut rouge = 0.0;
    let mut u_sum = 0.0;
    let mut u_n = 0usize;
    for s in probe {
        prob += sample_probability(model, tok, s)?;
        rouge += rouge_l_text(&greedy_answer(model, tok, s)?, &s.answer);
        if let Some(r) = truth_ratio(model, tok, s)? {
            u_sum += truth_ratio_utility(r);
            u_n += 1;
        }
    }
    Ok(SplitMetrics {
        probability: prob / probe.len() as f64,
        rouge_l: rouge / probe.len() as f64,
        truth_ratio_u: if u_n == 0 { 0.0 } else { u_sum / u_n as f64 },
    })
}

fn greedy_answer(model: &TransformerLM, tok: &Tokenizer, s: &QASample) -> Result<String> {
    let prompt = prompt_of(tok, &s.question);
    let budget = tok.encode(&s.answer).len() + 4;
    let generated = model.generate_greedy(&prompt, budget)?;
    Ok(tok.decode(&generated))
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct UtilityReport {
    pub retain: SplitMetrics,
    pub general: SplitMetrics,
    pub utility: f64,
}

/// Aggregate of the six components {probability, ROUGE-L, truth-ratio
/// utility} × {retain, general}; harmonic by default so one collapsed
/// component zeroes the aggregate.
pub fn model_utility(
    model: &TransformerLM,
    tok: &Tokenizer,
    retain: &[&QASample],
    general: &[&QASample],
    mean: MeanKind,
) -> Result<UtilityReport> {
    let r = split_metrics(model, tok, retain)?;
    let g = split_metrics(model, tok, general)?;
    let comps = [
        r.probability,
        r.rouge_l,
        r.truth_ratio_u,
        g.probability,
        g.rouge_l,
        g.truth_ratio_u,
    ];
    let utility = aggregate(&comps, mean);
    Ok(UtilityReport { retain: r, general: g, utility })
}

fn aggregate(comps: &[f64], mean: MeanKind) -> f64 {
    match mean {
        MeanKind::Arithmetic => comps.iter().sum::<f64>() / comps.len() as f64,
        MeanKind::Harmonic => {
            if comps.iter().any(|&c| c == 0.0) {
                0.0
            } else {
                comps.len() as f64 / comps.iter().map(|c| 1.0 / c).sum::<f64>()
            }
        }
    }
}

// ── Min-K% and PrivLeak ──────────────────────────────────────────────

/// Mean of the lowest ⌈k%·T⌉ per-token log-probabilities of y given x.
pub fn min_k_score(model: &TransformerLM, x: &[u32], y: &[u32], k_percent: f64) -> Result<f64> {
    if !(k_percent > 0.0 && k_percent <= 100.0) {
        return Err(Error::Config(format!("k_percent {k_percent} outside (0, 100]")));
    }
    let mut lps = model.sequence_logprob(x, y)?;
    lps.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let keep = ((k_percent / 100.0) * lps.len() as f64).ceil() as usize;
    let keep = keep.clamp(1, lps.len());
    Ok(lps[..keep].iter().sum::<f64>() / keep as f64)
}

/// Mean of the lowest k% of an explicit log-probability list (used by the
/// oracle tests and CSV tooling).
pub fn min_k_of(lps: &[f64], k_percent: f64) -> Result<f64> {
    if lps.is_empty() {
        return Err(Error::Contract("min_k_of: empty sequence".into()));
    }
    if !(k_percent > 0.0 && k_percent <= 100.0) {
        return Err(Error::Config(format!("k_percent {k_percent} outside (0, 100]")));
    }
    let mut sorted = lps.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let keep = ((k_percent / 100.0) * sorted.len() as f64).ceil() as usize;
    let keep = keep.clamp(1, sorted.len());
    Ok(sorted[..keep].iter().sum::<f64>() / keep as f64)
}

/// Mann–Whitney AUC with mid-rank tie handling: the probability that a
/// forget score exceeds a holdout score.
pub fn auc(forget_scores: &[f64], holdout_scores: &[f64]) -> Result<f64> {
    if forget_scores.is_empty() || holdout_scores.is_empty() {
        return Err(Error::Contract("auc: empty score list".into()));
    }
    let mut all: Vec<(f64, bool)> = forget_scores
        .iter()
        .map(|&v| (v, true))
        .chain(holdout_scores.iter().map(|&v| (v, false)))
        .collect();
    all.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
    // mid-ranks over tie groups
    let mut rank_sum_forget = 0.0;
    let mut i = 0;
    while i < all.len() {
        let mut j = i;
        while j < all.len() && all[j].0 == all[i].0 {
            j += 1;
        }
        let midrank = (i + 1 + j) as f64 / 2.0; // mean of ranks i+1..=j
        for e in &all[i..j] {
            if e.1 {
                rank_sum_forget += midrank;
            }
        }
        i = j;
    }
    let n = forget_scores.len() as f64;
    let m = holdout_scores.len() as f64;
    let u = rank_sum_forget - n * (n + 1.0) / 2.0;
    Ok(u / (n * m))
}

fn min_k_scores(
    model: &TransformerLM,
    tok: &Tokenizer,
    samples: &[&QASample],
    k: f64,
) -> Result<Vec<f64>> {
    samples
        .iter()
        .map(|s| min_k_score(model, &prompt_of(tok, &s.question), &target_of(tok, &s.answer), k))
        .collect()
}

/// PrivLeak = 100·(AUC_unlearned − AUC_retained)/AUC_retained over Min-K%
/// membership scores (forget vs holdout).
pub fn privleak(
    unlearned: &TransformerLM,
    retained: &TransformerLM,
    tok: &Tokenizer,
    forget: &[&QASample],
    holdout: &[&QASample],
    k_percent: f64,
) -> Result<f64> {
    if forget.is_empty() || holdout.is_empty() {
        return Err(Error::Contract("privleak: empty forget or holdout set".into()));
    }
    let auc_u = auc(
        &min_k_scores(unlearned, tok, forget, k_percent)?,
        &min_k_scores(unlearned, tok, holdout, k_percent)?,
    )?;
    let auc_r = auc(
        &min_k_scores(retained, tok, forget, k_percent)?,
        &min_k_scores(retained, tok, holdout, k_percent)?,
    )?;
    if auc_r == 0.0 {
        return Err(Error::Contract("privleak undefined: retained AUC is zero".into()));
    }
    Ok(100.0 * (auc_u - auc_r) / auc_r)
}

// ── VerbMem / KnowMem ────────────────────────────────────────────────

/// Mean ROUGE-L of greedy continuations against the true second half of
/// each forget answer (prompting with the question and the first half).
pub fn verbmem(model: &TransformerLM, tok: &Tokenizer, samples: &[&QASample]) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::Contract("verbmem: empty sample set".into()));
    }
    let mut acc = 0.0;
    for s in samples {
        let answer = tok.encode(&s.answer);
        let half = answer.len() / 2;
        let mut prompt = prompt_of(tok, &s.question);
        prompt.extend(&answer[..half]);
        let true_rest = tok.decode(&answer[half..]);
        let budget = (answer.len() - half) + 4;
        let generated = model.generate_greedy(&prompt, budget)?;
        acc += rouge_l_text(&tok.decode(&generated), &true_rest);
    }
    Ok(acc / samples.len() as f64)
}

/// Mean ROUGE-L of greedy answers against gold answers.
pub fn knowmem(model: &TransformerLM, tok: &Tokenizer, samples: &[&QASample]) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::Contract("knowmem: empty sample set".into()));
    }
    let mut acc = 0.0;
    for s in samples {
        acc += rouge_l_text(&greedy_answer(model, tok, s)?, &s.answer);
    }
    Ok(acc / samples.len() as f64)
}

// ── diagnostics ──────────────────────────────────────────────────────

/// Mean cross-entropy at general-word positions; identical computation to
/// the PL term of the unlearning objective, evaluated without gradients.
pub fn gw_cross_entropy(
    model: &TransformerLM,
    tok: &Tokenizer,
    samples: &[EncodedSample],
) -> Result<f64> {
    let cfg = ObjectiveConfig::new(ObjectiveKind::PlOnly);
    Ok(batch_loss(model, None, tok, samples, &[], &cfg)?.pl_term)
}

/// Mean over samples and answer positions of the full-vocabulary
/// KL(P_model ‖ P_reference) of next-token distributions.
pub fn kl_reference_divergence(
    model: &TransformerLM,
    reference: &TransformerLM,
    samples: &[EncodedSample],
) -> Result<f64> {
    if model.config().vocab_size != reference.config().vocab_size {
        return Err(Error::Contract("kl: vocabulary mismatch".into()));
    }
    if samples.is_empty() {
        return Err(Error::Contract("kl: empty sample set".into()));
    }
    let mut acc = 0.0;
    for s in samples {
        let tokens: Vec<u32> = s.prompt.iter().chain(&s.answer).copied().collect();
        let lm = model.logits(&tokens)?;
        let lr = reference.logits(&tokens)?;
        let (_, v) = lm.dims2();
        let mut sample_kl = 0.0;
        for j in 0..s.answer.len() {
            let row = s.prompt.len() + j - 1;
            sample_kl += kl_rows(&lm.data()[row * v..(row + 1) * v], &lr.data()[row * v..(row + 1) * v]);
        }
        acc += sample_kl / s.answer.len() as f64;
    }
    Ok(acc / samples.len() as f64)
}

/// KL between the softmax distributions of two logit rows.
pub fn kl_rows(p_logits: &[f64], q_logits: &[f64]) -> f64 {
    let lp = log_softmax_vec(p_logits);
    let lq = log_softmax_vec(q_logits);
    lp.iter().zip(&lq).map(|(&a, &b)| a.exp() * (a - b)).sum()
}

fn log_softmax_vec(row: &[f64]) -> Vec<f64> {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = row.iter().map(|&x| (x - max).exp()).sum::<f64>().ln() + max;
    row.iter().map(|&x| x - lse).collect()
}

// ── report plumbing ──────────────────────────────────────────────────

/// One evaluation row; serialized to JSON and appended to the run CSV.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalReport {
    pub checkpoint: String,
    pub forget_quality: f64,
    pub model_utility: f64,
    pub retain: SplitMetrics,
    pub general: SplitMetrics,
    pub privleak: f64,
    pub verbmem_f: f64,
    pub knowmem_f: f64,
    pub knowmem_r: f64,
    pub gw_ce: f64,
    pub kl_forget: f64,
    pub kl_retain: f64,
}

pub const REPORT_CSV_HEADER: &str = "checkpoint,forget_quality,model_utility,\
retain_probability,retain_rouge_l,retain_truth_ratio,\
general_probability,general_rouge_l,general_truth_ratio,\
privleak,verbmem_f,knowmem_f,knowmem_r,gw_ce,kl_forget,kl_retain";

pub fn write_report_csv(reports: &[EvalReport], path: &Path) -> Result<()> {
    let f = std::fs::File::create(path)?;
    let mut w = BufWriter::new(f);
    writeln!(w, "{REPORT_CSV_HEADER}")?;
    for r in reports {
        writeln!(
            w,
            "{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{}",
            r.checkpoint,
            r.forget_quality,
            r.model_utility,
            r.retain.probability,
            r.retain.rouge_l,
            r.retain.truth_ratio_u,
            r.general.probability,
            r.general.rouge_l,
            r.general.truth_ratio_u,
            r.privleak,
            r.verbmem_f,
            r.knowmem_f,
            r.knowmem_r,
            r.gw_ce,
            r.kl_forget,
            r.kl_retain
        )?;
    }
    Ok(())
}
