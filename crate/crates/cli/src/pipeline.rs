//! Stage implementations behind the subcommands. Every artifact filename
//! carries a hash of the effective config, so runs with different settings
//! never clobber each other and reruns are byte-identical.

use crate::config::{ExperimentConfig, IdentifierKind, MethodBlock};
use std::collections::BTreeSet;
use std::path::{Path, PathBuf};
use tif_core::corpus::{
    generate_corpus, ingest_external_annotations, read_jsonl, write_jsonl, AnnotatedSample,
    AnnotationSource, CorpusBundle, Split,
};
use tif_core::engine::{
    config_hash, task_vector_run, train_lm, train_masked_lm, unlearn, write_step_csv,
    TaskVectorConfig, TrainConfig,
};
use tif_core::error::{Error, Result};
use tif_core::eval::{
    forget_quality, gw_cross_entropy, kl_reference_divergence, model_utility, knowmem, privleak,
    verbmem, write_report_csv, EvalReport,
};
use tif_core::identifier::{
    identify_discriminative, identify_stopword, to_annotated, IdentifyOptions,
};
use tif_core::model::{AttnKind, ModelCheckpoint, ModelConfig, TransformerLM};
use tif_core::objectives::EncodedSample;
use tif_core::tokenizer::Tokenizer;

/// Stage-specific seed streams derived from the master seed.
mod seeds {
    pub const MODEL_ORIGINAL: u64 = 1;
    pub const TRAIN_ORIGINAL: u64 = 2;
    pub const TRAIN_RETAINED: u64 = 4;
    pub const PROBE_MODEL: u64 = 5;
    pub const PROBE_TRAIN: u64 = 6;
    pub const UNLEARN: u64 = 9;
    pub const REINFORCE: u64 = 10;
}

fn stage_seed(master: u64, stage: u64) -> u64 {
    master.wrapping_mul(1000).wrapping_add(stage)
}

/// All artifact locations for one config.
pub struct Paths {
    pub out_dir: PathBuf,
    pub hash: String,
}

impl Paths {
    pub fn new(cfg: &ExperimentConfig) -> Self {
        let hash: String = config_hash(cfg).chars().take(12).collect();
        Self { out_dir: cfg.out_dir.clone(), hash }
    }

    fn file(&self, name: &str) -> PathBuf {
        self.out_dir.join(format!("{name}-{}.{}", self.hash, ext_of(name)))
    }

    pub fn config_copy(&self) -> PathBuf {
        self.out_dir.join(format!("config-{}.json", self.hash))
    }
    pub fn corpus(&self) -> PathBuf {
        self.file("corpus")
    }
    pub fn annotations(&self) -> PathBuf {
        self.file("annotations")
    }
    pub fn model(&self, role: &str) -> PathBuf {
        self.out_dir.join(format!("{role}-{}.model.json", self.hash))
    }
    pub fn unlearned(&self, epoch: usize) -> PathBuf {
        self.model(&format!("unlearned-ep{epoch}"))
    }
    pub fn unlearned_glob(&self) -> String {
        self.model("unlearned-ep*").to_string_lossy().into_owned()
    }
    pub fn step_csv(&self) -> PathBuf {
        self.out_dir.join(format!("unlearn-steps-{}.csv", self.hash))
    }
    pub fn reports_csv(&self) -> PathBuf {
        self.out_dir.join(format!("reports-{}.csv", self.hash))
    }
    pub fn reports_json(&self) -> PathBuf {
        self.out_dir.join(format!("reports-{}.json", self.hash))
    }
    pub fn plot_svg(&self) -> PathBuf {
        self.out_dir.join(format!("tradeoff-{}.svg", self.hash))
    }
    pub fn summary_md(&self) -> PathBuf {
        self.out_dir.join(format!("summary-{}.md", self.hash))
    }
}

fn ext_of(name: &str) -> &'static str {
    match name {
        "corpus" | "annotations" => "jsonl",
        _ => "json",
    }
}

fn ensure_out_dir(paths: &Paths, cfg: &ExperimentConfig) -> Result<()> {
    std::fs::create_dir_all(&paths.out_dir)?;
    // the config is stored alongside its outputs as a reproducibility ledger
    let json = serde_json::to_string_pretty(cfg)?;
    std::fs::write(paths.config_copy(), json + "\n")?;
    Ok(())
}

fn load_corpus(paths: &Paths) -> Result<CorpusBundle> {
    read_jsonl(&paths.corpus()).map_err(|e| match e {
        Error::MissingArtifact(m) => {
            Error::MissingArtifact(format!("{m}; run `tif gen-corpus` first"))
        }
        other => other,
    })
}

fn load_model(paths: &Paths, role: &str, hint: &str) -> Result<(TransformerLM, Tokenizer)> {
    let path = paths.model(role);
    let ck = ModelCheckpoint::load(&path).map_err(|e| match e {
        Error::MissingArtifact(m) => Error::MissingArtifact(format!("{m}; run {hint} first")),
        other => other,
    })?;
    ck.into_model()
}

/// The word-level texts a role trains on: gold answer plus paraphrase for
/// every sample in its splits.
fn training_samples<'a>(bundle: &'a CorpusBundle, splits: &[Split]) -> Vec<&'a AnnotatedSample> {
    bundle.samples.iter().filter(|s| splits.contains(&s.base.split)).collect()
}

fn encode_with_paraphrases(
    tok: &Tokenizer,
    samples: &[&AnnotatedSample],
) -> Result<Vec<EncodedSample>> {
    let mut out = Vec::with_capacity(samples.len() * 2);
    for s in samples {
        out.push(EncodedSample::from_annotated(tok, s)?);
        out.push(EncodedSample::from_qa(tok, &s.base.question, &s.base.paraphrased_answer)?);
    }
    Ok(out)
}

fn max_len_of(data: &[EncodedSample]) -> usize {
    data.iter().map(|s| s.prompt.len() + s.answer.len()).max().unwrap_or(0)
}

/// Tokenizer plus a model geometry wide enough for every corpus sequence.
pub fn model_scaffold(
    cfg: &ExperimentConfig,
    bundle: &CorpusBundle,
) -> Result<(Tokenizer, ModelConfig)> {
    let tok = Tokenizer::build(bundle.all_texts());
    let all = training_samples(bundle, &[Split::Forget, Split::Retain, Split::Holdout, Split::General]);
    let data = encode_with_paraphrases(&tok, &all)?;
    let mut mc = cfg.model_config(max_len_of(&data) + 2);
    mc.vocab_size = tok.vocab_size();
    Ok((tok, mc))
}

pub fn cmd_gen_corpus(cfg: &ExperimentConfig) -> Result<PathBuf> {
    let paths = Paths::new(cfg);
    ensure_out_dir(&paths, cfg)?;
    let bundle = generate_corpus(&cfg.to_corpus_config())?;
    let path = paths.corpus();
    write_jsonl(&bundle, &path)?;
    Ok(path)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TrainRole {
    Original,
    Retained,
    Reinforce,
}

impl TrainRole {
    pub fn name(self) -> &'static str {
        match self {
            TrainRole::Original => "original",
            TrainRole::Retained => "retained",
            TrainRole::Reinforce => "reinforced",
        }
    }
}

pub fn cmd_train(cfg: &ExperimentConfig, role: TrainRole) -> Result<PathBuf> {
    let paths = Paths::new(cfg);
    ensure_out_dir(&paths, cfg)?;
    let bundle = load_corpus(&paths)?;
    let (tok, mc) = model_scaffold(cfg, &bundle)?;
    let out = match role {
        TrainRole::Original | TrainRole::Retained => {
            let (splits, block, init_seed, train_seed): (&[Split], _, _, _) = match role {
                TrainRole::Original => (
                    &[Split::Forget, Split::Retain, Split::General],
                    &cfg.train_original,
                    stage_seed(cfg.seed, seeds::MODEL_ORIGINAL),
                    stage_seed(cfg.seed, seeds::TRAIN_ORIGINAL),
                ),
                _ => (
                    &[Split::Retain, Split::General],
                    &cfg.train_retained,
                    // the retained model starts from the same initialization
                    // so differences are attributable to the data alone
                    stage_seed(cfg.seed, seeds::MODEL_ORIGINAL),
                    stage_seed(cfg.seed, seeds::TRAIN_RETAINED),
                ),
            };
            let data = encode_with_paraphrases(&tok, &training_samples(&bundle, splits))?;
            let mut model = TransformerLM::new(mc, AttnKind::Causal, init_seed)?;
            train_lm(&mut model, &tok, &data, &block.to_train_config(train_seed))?;
            let path = paths.model(role.name());
            ModelCheckpoint::from_model(&model, &tok).save(&path)?;
            path
        }
        TrainRole::Reinforce => {
            let (original, _) = load_model(&paths, "original", "`tif train --role original`")?;
            let forget = annotated_forget(cfg, &paths, &bundle)?;
            let forget_enc: Vec<EncodedSample> = forget
                .iter()
                .map(|s| EncodedSample::from_annotated(&tok, s))
                .collect::<Result<_>>()?;
            let tv = match &cfg.objective {
                MethodBlock::TaskVector(tv) => TaskVectorConfig {
                    nll_target: tv.nll_target,
                    max_epochs: tv.max_epochs,
                    train: cfg.unlearn.to_train_config(stage_seed(cfg.seed, seeds::REINFORCE)),
                },
                MethodBlock::Objective(_) => {
                    return Err(Error::Config(
                        "/objective: train --role reinforce requires kind \"task_vector\"".into(),
                    ))
                }
            };
            let (unlearned, log) = task_vector_run(&original, &tok, &forget_enc, &tv)?;
            write_step_csv(&log.steps, &paths.step_csv())?;
            // the reinforce role emits both the reinforced byproduct and the
            // task-vector result as the single unlearned checkpoint
            let path = paths.unlearned(log.epoch_losses.len());
            ModelCheckpoint::from_model(&unlearned, &tok).save(&path)?;
            path
        }
    };
    Ok(out)
}

/// The forget split carrying whichever masks the configured identifier
/// produced (oracle masks when the identifier is `oracle`).
fn annotated_forget(
    cfg: &ExperimentConfig,
    paths: &Paths,
    bundle: &CorpusBundle,
) -> Result<Vec<AnnotatedSample>> {
    if cfg.identifier.kind == IdentifierKind::Oracle {
        return Ok(bundle.split(Split::Forget).cloned().collect());
    }
    let ann = read_jsonl(&paths.annotations()).map_err(|e| match e {
        Error::MissingArtifact(m) => {
            Error::MissingArtifact(format!("{m}; run `tif identify` first"))
        }
        other => other,
    })?;
    Ok(ann.split(Split::Forget).cloned().collect())
}

pub fn cmd_identify(cfg: &ExperimentConfig) -> Result<PathBuf> {
    let paths = Paths::new(cfg);
    ensure_out_dir(&paths, cfg)?;
    let bundle = load_corpus(&paths)?;
    let mut annotated = bundle.clone();
    match cfg.identifier.kind {
        IdentifierKind::Oracle => {} // corpus masks are already the oracle's
        IdentifierKind::Stopword => {
            let stoplist = match &cfg.identifier.stoplist {
                Some(p) => std::fs::read_to_string(p)?
                    .lines()
                    .map(|l| l.trim().to_lowercase())
                    .filter(|l| !l.is_empty())
                    .collect::<BTreeSet<String>>(),
                None => tif_core::identifier::default_stoplist(),
            };
            for s in annotated.samples.iter_mut().filter(|s| s.base.split == Split::Forget) {
                let r = identify_stopword(&s.base, &stoplist)?;
                *s = to_annotated(&s.base, &r, AnnotationSource::Stopword)?;
            }
        }
        IdentifierKind::Discriminative => {
            let probe_tok = Tokenizer::build(bundle.all_texts());
            let probe = train_probe(cfg, &bundle, &probe_tok, 0)?;
            let opts = IdentifyOptions { top_k: cfg.identifier.top_k };
            for s in annotated.samples.iter_mut().filter(|s| s.base.split == Split::Forget) {
                let r = identify_discriminative(&probe, &probe_tok, &s.base, &opts)?;
                *s = to_annotated(&s.base, &r, AnnotationSource::Discriminative)?;
            }
        }
        IdentifierKind::External => {
            let path = cfg.identifier.annotations.as_ref().expect("validated");
            let doc = std::fs::read_to_string(path)?;
            let outcome = ingest_external_annotations(&doc, &bundle)?;
            for ext in outcome.samples {
                if let Some(s) =
                    annotated.samples.iter_mut().find(|s| s.base.id == ext.base.id)
                {
                    *s = ext;
                }
            }
        }
    }
    let path = paths.annotations();
    write_jsonl(&annotated, &path)?;
    Ok(path)
}

/// Masked-LM probe trained on the retain + general splits; `variant`
/// shifts the seeds so consistency audits can train sibling probes.
pub fn train_probe(
    cfg: &ExperimentConfig,
    bundle: &CorpusBundle,
    tok: &Tokenizer,
    variant: u64,
) -> Result<TransformerLM> {
    let pb = &cfg.identifier.probe;
    let data = encode_with_paraphrases(
        tok,
        &training_samples(bundle, &[Split::Retain, Split::General]),
    )?;
    let mc = ModelConfig {
        vocab_size: tok.vocab_size(),
        dim: pb.dim,
        layers: pb.layers,
        heads: pb.heads,
        max_len: max_len_of(&data) + 2,
    };
    let mut probe = TransformerLM::new(
        mc,
        AttnKind::Bidirectional,
        stage_seed(cfg.seed, seeds::PROBE_MODEL).wrapping_add(variant * 7919),
    )?;
    let tc = TrainConfig {
        lr: pb.lr,
        weight_decay: 0.01,
        batch_size: pb.batch_size,
        epochs: pb.epochs,
        warmup: true,
        seed: stage_seed(cfg.seed, seeds::PROBE_TRAIN).wrapping_add(variant * 104729),
        checkpoint_every: pb.epochs.max(1),
    };
    train_masked_lm(&mut probe, &data, &tc)?;
    Ok(probe)
}

pub fn cmd_unlearn(cfg: &ExperimentConfig) -> Result<Vec<PathBuf>> {
    let paths = Paths::new(cfg);
    ensure_out_dir(&paths, cfg)?;
    let bundle = load_corpus(&paths)?;
    let (original, tok) = load_model(&paths, "original", "`tif train --role original`")?;
    let forget = annotated_forget(cfg, &paths, &bundle)?;
    let forget_enc: Vec<EncodedSample> =
        forget.iter().map(|s| EncodedSample::from_annotated(&tok, s)).collect::<Result<_>>()?;
    let retain_enc: Vec<EncodedSample> = training_samples(&bundle, &[Split::Retain])
        .iter()
        .map(|s| EncodedSample::from_annotated(&tok, s))
        .collect::<Result<_>>()?;
    let mut out = Vec::new();
    match &cfg.objective {
        MethodBlock::Objective(obj) => {
            let tc = cfg.unlearn.to_train_config(stage_seed(cfg.seed, seeds::UNLEARN));
            let (_, log) = unlearn(&original, &tok, &forget_enc, &retain_enc, obj, &tc)?;
            write_step_csv(&log.steps, &paths.step_csv())?;
            for ck in &log.checkpoints {
                let mut m = original.clone();
                m.set_params(ck.params.clone())?;
                let path = paths.unlearned(ck.epoch);
                ModelCheckpoint::from_model(&m, &tok).save(&path)?;
                out.push(path);
            }
        }
        MethodBlock::TaskVector(tv) => {
            let tvc = TaskVectorConfig {
                nll_target: tv.nll_target,
                max_epochs: tv.max_epochs,
                train: cfg.unlearn.to_train_config(stage_seed(cfg.seed, seeds::REINFORCE)),
            };
            let (m, log) = task_vector_run(&original, &tok, &forget_enc, &tvc)?;
            write_step_csv(&log.steps, &paths.step_csv())?;
            let path = paths.unlearned(log.epoch_losses.len());
            ModelCheckpoint::from_model(&m, &tok).save(&path)?;
            out.push(path);
        }
    }
    Ok(out)
}

/// Minimal `*` glob over the file-name portion of a pattern.
pub fn glob_files(pattern: &str) -> Result<Vec<PathBuf>> {
    let pat = Path::new(pattern);
    let dir = pat.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    let name_pat = pat
        .file_name()
        .ok_or_else(|| Error::Config(format!("bad checkpoint pattern {pattern:?}")))?
        .to_string_lossy()
        .into_owned();
    let mut out = Vec::new();
    let entries = match std::fs::read_dir(dir) {
        Ok(e) => e,
        Err(_) => return Ok(out),
    };
    for entry in entries {
        let entry = entry?;
        let name = entry.file_name().to_string_lossy().into_owned();
        if wildcard_match(&name_pat, &name) {
            out.push(entry.path());
        }
    }
    out.sort();
    Ok(out)
}

fn wildcard_match(pattern: &str, text: &str) -> bool {
    let parts: Vec<&str> = pattern.split('*').collect();
    if parts.len() == 1 {
        return pattern == text;
    }
    let mut rest = text;
    for (i, part) in parts.iter().enumerate() {
        if part.is_empty() {
            continue;
        }
        if i == 0 {
            match rest.strip_prefix(part) {
                Some(r) => rest = r,
                None => return false,
            }
        } else if i == parts.len() - 1 {
            return rest.ends_with(part);
        } else {
            match rest.find(part) {
                Some(pos) => rest = &rest[pos + part.len()..],
                None => return false,
            }
        }
    }
    // pattern ends with '*'
    parts.last().map(|p| p.is_empty()).unwrap_or(false) || rest.is_empty()
}

/// Numeric epoch parsed from an `unlearned-ep{N}-…` checkpoint filename.
fn epoch_of(path: &Path) -> usize {
    let name = path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
    name.split("-ep")
        .nth(1)
        .and_then(|rest| rest.split('-').next())
        .and_then(|d| d.parse().ok())
        .unwrap_or(usize::MAX)
}

fn take_probes<'a>(samples: &[&'a AnnotatedSample], cap: usize) -> Vec<&'a AnnotatedSample> {
    if cap == 0 || cap >= samples.len() {
        samples.to_vec()
    } else {
        samples.iter().copied().take(cap).collect()
    }
}

/// Evaluate one model against the full protocol.
#[allow(clippy::too_many_arguments)]
pub fn evaluate_model(
    cfg: &ExperimentConfig,
    label: &str,
    model: &TransformerLM,
    original: &TransformerLM,
    retained: &TransformerLM,
    tok: &Tokenizer,
    bundle: &CorpusBundle,
    forget_annotated: &[AnnotatedSample],
) -> Result<EvalReport> {
    let forget = bundle.split_vec(Split::Forget);
    let retain = take_probes(&bundle.split_vec(Split::Retain), cfg.eval.retain_probes);
    let general = take_probes(&bundle.split_vec(Split::General), cfg.eval.general_probes);
    let holdout = bundle.split_vec(Split::Holdout);
    fn qa<'a>(v: &[&'a AnnotatedSample]) -> Vec<&'a tif_core::corpus::QASample> {
        v.iter().map(|s| &s.base).collect()
    }
    let forget_qa = qa(&forget);
    let retain_qa = qa(&retain);
    let general_qa = qa(&general);
    let holdout_qa = qa(&holdout);

    let fq = forget_quality(model, retained, tok, &forget_qa)?;
    let util = model_utility(model, tok, &retain_qa, &general_qa, cfg.eval.mean)?;
    let pl = privleak(model, retained, tok, &forget_qa, &holdout_qa, cfg.eval.k_percent)?;
    let forget_enc: Vec<EncodedSample> = forget_annotated
        .iter()
        .map(|s| EncodedSample::from_annotated(tok, s))
        .collect::<Result<_>>()?;
    let retain_enc: Vec<EncodedSample> =
        retain.iter().map(|s| EncodedSample::from_annotated(tok, s)).collect::<Result<_>>()?;
    Ok(EvalReport {
        checkpoint: label.to_string(),
        forget_quality: fq,
        model_utility: util.utility,
        retain: util.retain,
        general: util.general,
        privleak: pl,
        verbmem_f: verbmem(model, tok, &forget_qa)?,
        knowmem_f: knowmem(model, tok, &forget_qa)?,
        knowmem_r: knowmem(model, tok, &retain_qa)?,
        gw_ce: gw_cross_entropy(model, tok, &forget_enc)?,
        kl_forget: kl_reference_divergence(model, original, &forget_enc)?,
        kl_retain: kl_reference_divergence(model, original, &retain_enc)?,
    })
}

pub fn cmd_evaluate(
    cfg: &ExperimentConfig,
    checkpoint_glob: Option<&str>,
) -> Result<(PathBuf, PathBuf)> {
    let paths = Paths::new(cfg);
    ensure_out_dir(&paths, cfg)?;
    let bundle = load_corpus(&paths)?;
    let (original, tok) = load_model(&paths, "original", "`tif train --role original`")?;
    let (retained, _) = load_model(&paths, "retained", "`tif train --role retained`")?;
    let pattern = checkpoint_glob.map(str::to_owned).unwrap_or_else(|| paths.unlearned_glob());
    let mut checkpoints = glob_files(&pattern)?;
    if checkpoints.is_empty() {
        return Err(Error::MissingArtifact(format!(
            "no unlearned checkpoints match {pattern:?}; run `tif unlearn` first"
        )));
    }
    checkpoints.sort_by_key(|p| epoch_of(p));
    let forget_annotated = annotated_forget(cfg, &paths, &bundle)?;

    let mut reports = Vec::new();
    reports.push(evaluate_model(
        cfg, "epoch0", &original, &original, &retained, &tok, &bundle, &forget_annotated,
    )?);
    for path in &checkpoints {
        let (model, _) = ModelCheckpoint::load(path)?.into_model()?;
        let label = format!("epoch{}", epoch_of(path));
        reports.push(evaluate_model(
            cfg, &label, &model, &original, &retained, &tok, &bundle, &forget_annotated,
        )?);
    }
    let csv = paths.reports_csv();
    write_report_csv(&reports, &csv)?;
    let json = paths.reports_json();
    std::fs::write(&json, serde_json::to_string_pretty(&reports)? + "\n")?;
    Ok((csv, json))
}

pub fn cmd_report(cfg: &ExperimentConfig) -> Result<(PathBuf, PathBuf)> {
    let paths = Paths::new(cfg);
    let csv = paths.reports_csv();
    if !csv.exists() {
        return Err(Error::MissingArtifact(format!(
            "report CSV {} not found; run `tif evaluate` first",
            csv.display()
        )));
    }
    let rows = crate::plot::read_report_rows(&csv)?;
    let svg = paths.plot_svg();
    std::fs::write(&svg, crate::plot::tradeoff_svg(&rows))?;
    let md = paths.summary_md();
    std::fs::write(&md, crate::plot::summary_table(&rows))?;
    Ok((svg, md))
}
