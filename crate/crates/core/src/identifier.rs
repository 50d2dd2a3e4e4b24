//! Unwanted-word identifiers: the discriminative mask-and-predict probe,
//! the stop-word bottom-line heuristic, and consistency/accuracy audits.

use crate::corpus::{AnnotatedSample, AnnotationSource, QASample};
use crate::error::{Error, Result};
use crate::model::{AttnKind, TransformerLM};
use crate::tokenizer::{Tokenizer, BOS, MASK, UNK};
use serde::{Deserialize, Serialize};
use std::collections::BTreeSet;

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct IdentifyOptions {
    /// A word is GW when its token is among the probe's top-k predictions.
    pub top_k: usize,
}

impl Default for IdentifyOptions {
    fn default() -> Self {
        Self { top_k: 1 }
    }
}

/// Per-sample identifier output. Mask length always equals the answer's
/// word count.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct IdentificationResult {
    pub id: String,
    pub uw_mask: Vec<bool>,
    /// Top-1 prediction per word (discriminative mode only).
    pub predicted: Vec<Option<String>>,
    /// Words the probe could not match because they are out of vocabulary;
    /// such words default to UW (over-forgetting is the safe direction).
    pub oov: Vec<bool>,
}

/// Mask-and-predict identification: each answer word is replaced by MASK in
/// turn and labeled GW when the probe recovers it.
pub fn identify_discriminative(
    probe: &TransformerLM,
    tokenizer: &Tokenizer,
    sample: &QASample,
    opts: &IdentifyOptions,
) -> Result<IdentificationResult> {
    if probe.kind() != AttnKind::Bidirectional {
        return Err(Error::Contract("discriminative probe must be a masked LM".into()));
    }
    if opts.top_k == 0 {
        return Err(Error::Config("top_k must be at least 1".into()));
    }
    let words = sample.answer_words();
    if words.is_empty() {
        return Err(Error::Contract(format!("sample {} has an empty answer", sample.id)));
    }
    let mut prompt = vec![BOS];
    prompt.extend(tokenizer.encode(&sample.question));
    let answer = tokenizer.encode(&sample.answer);

    let mut uw_mask = Vec::with_capacity(words.len());
    let mut predicted = Vec::with_capacity(words.len());
    let mut oov = Vec::with_capacity(words.len());
    for (i, &word_id) in answer.iter().enumerate() {
        if word_id == UNK {
            uw_mask.push(true);
            predicted.push(None);
            oov.push(true);
            continue;
        }
        let mut tokens = prompt.clone();
        tokens.extend(&answer);
        tokens[prompt.len() + i] = MASK;
        let logits = probe.logits(&tokens)?;
        let (_, v) = logits.dims2();
        let row = &logits.data()[(prompt.len() + i) * v..(prompt.len() + i + 1) * v];
        let top = top_k_ids(row, opts.top_k);
        predicted.push(tokenizer.id_to_word(top[0]).map(str::to_string));
        uw_mask.push(!top.contains(&word_id));
        oov.push(false);
    }
    Ok(IdentificationResult { id: sample.id.clone(), uw_mask, predicted, oov })
}

/// Token ids of the k largest logits; ties break toward the lowest id.
fn top_k_ids(row: &[f64], k: usize) -> Vec<u32> {
    let mut order: Vec<usize> = (0..row.len()).collect();
    order.sort_by(|&a, &b| row[b].partial_cmp(&row[a]).unwrap().then(a.cmp(&b)));
    order.into_iter().take(k).map(|i| i as u32).collect()
}

/// Bottom-line heuristic: words on the stoplist are GW, everything else UW.
pub fn identify_stopword(
    sample: &QASample,
    stoplist: &BTreeSet<String>,
) -> Result<IdentificationResult> {
    if stoplist.is_empty() {
        return Err(Error::Contract("empty stoplist".into()));
    }
    let words = sample.answer_words();
    if words.is_empty() {
        return Err(Error::Contract(format!("sample {} has an empty answer", sample.id)));
    }
    let uw_mask: Vec<bool> = words.iter().map(|w| !stoplist.contains(w)).collect();
    let n = uw_mask.len();
    Ok(IdentificationResult {
        id: sample.id.clone(),
        uw_mask,
        predicted: vec![None; n],
        oov: vec![false; n],
    })
}

/// Pairwise Jaccard indices over the UW picks of several identifier runs.
/// Every run must cover the same samples with the same mask lengths.
pub fn jaccard_consistency(runs: &[Vec<IdentificationResult>]) -> Result<Vec<(usize, usize, f64)>> {
    if runs.len() < 2 {
        return Err(Error::Contract("jaccard_consistency needs at least 2 runs".into()));
    }
    let footprint = |run: &[IdentificationResult]| -> BTreeSet<(String, usize)> {
        run.iter().map(|r| (r.id.clone(), r.uw_mask.len())).collect()
    };
    let base = footprint(&runs[0]);
    for run in &runs[1..] {
        if footprint(run) != base {
            return Err(Error::Contract("runs cover different sample sets".into()));
        }
    }
    let picks: Vec<BTreeSet<(String, usize)>> = runs
        .iter()
        .map(|run| {
            run.iter()
                .flat_map(|r| {
                    r.uw_mask
                        .iter()
                        .enumerate()
                        .filter(|(_, &m)| m)
                        .map(|(i, _)| (r.id.clone(), i))
                        .collect::<Vec<_>>()
                })
                .collect()
        })
        .collect();
    let mut out = Vec::new();
    for i in 0..picks.len() {
        for j in i + 1..picks.len() {
            out.push((i, j, jaccard(&picks[i], &picks[j])));
        }
    }
    Ok(out)
}

fn jaccard(a: &BTreeSet<(String, usize)>, b: &BTreeSet<(String, usize)>) -> f64 {
    let union = a.union(b).count();
    if union == 0 {
        return 1.0; // two empty pick sets agree perfectly
    }
    a.intersection(b).count() as f64 / union as f64
}

/// Precision/recall/F1 with UW as the positive class.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct AccuracyReport {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    /// Set when any denominator was zero and the metric was pinned to 0.
    pub zero_denominator: bool,
}

pub fn identifier_accuracy(
    predicted: &IdentificationResult,
    oracle: &[bool],
) -> Result<AccuracyReport> {
    if predicted.uw_mask.len() != oracle.len() {
        return Err(Error::Contract(format!(
            "mask length mismatch: {} vs {}",
            predicted.uw_mask.len(),
            oracle.len()
        )));
    }
    let mut tp = 0usize;
    let mut fp = 0usize;
    let mut fnc = 0usize;
    for (&p, &o) in predicted.uw_mask.iter().zip(oracle) {
        match (p, o) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fnc += 1,
            (false, false) => {}
        }
    }
    let mut zero = false;
    let mut ratio = |num: usize, den: usize| -> f64 {
        if den == 0 {
            zero = true;
            0.0
        } else {
            num as f64 / den as f64
        }
    };
    let precision = ratio(tp, tp + fp);
    let recall = ratio(tp, tp + fnc);
    let f1 = if precision + recall == 0.0 {
        zero = true;
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    };
    Ok(AccuracyReport { precision, recall, f1, zero_denominator: zero })
}

/// Aggregate accuracy over many samples by pooling the confusion counts.
pub fn pooled_accuracy(
    pairs: &[(&IdentificationResult, &[bool])],
) -> Result<AccuracyReport> {
    if pairs.is_empty() {
        return Err(Error::Contract("pooled_accuracy over no samples".into()));
    }
    let mut all_pred = Vec::new();
    let mut all_oracle = Vec::new();
    for (r, o) in pairs {
        if r.uw_mask.len() != o.len() {
            return Err(Error::Contract(format!("mask length mismatch on sample {}", r.id)));
        }
        all_pred.extend(r.uw_mask.iter().copied());
        all_oracle.extend(o.iter().copied());
    }
    let pooled = IdentificationResult {
        id: "pooled".into(),
        uw_mask: all_pred,
        predicted: Vec::new(),
        oov: Vec::new(),
    };
    identifier_accuracy(&pooled, &all_oracle)
}

/// Attach an identifier's mask to its sample so results are interchangeable
/// with oracle annotations as unlearning input.
pub fn to_annotated(
    sample: &QASample,
    result: &IdentificationResult,
    source: AnnotationSource,
) -> Result<AnnotatedSample> {
    if sample.id != result.id {
        return Err(Error::Contract(format!(
            "sample/result id mismatch: {} vs {}",
            sample.id, result.id
        )));
    }
    let annotated = AnnotatedSample {
        base: sample.clone(),
        uw_mask: result.uw_mask.clone(),
        annotation_source: source,
    };
    annotated.validate()?;
    Ok(annotated)
}

/// The lab's default stoplist: function words that should always be GW.
pub fn default_stoplist() -> BTreeSet<String> {
    [
        "the", "is", "an", "a", "was", "in", "of", "and", "or", "to", "her", "his", "their",
        "by", "for", "on", "with", "as", "at", "from", "about", "writes", "born", "won",
        "works", ".", ",", "?", "!",
    ]
    .into_iter()
    .map(str::to_string)
    .collect()
}
