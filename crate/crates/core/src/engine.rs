//! Training and unlearning loops: AdamW with linear warmup, per-epoch
//! checkpoints that resume bitwise, and the Task Vector reinforce-then-
//! subtract path.

use crate::error::{Error, Result};
use crate::model::TransformerLM;
use crate::objectives::{
    batch_loss_and_grad, task_vector_unlearn, BatchLoss, EncodedSample, ObjectiveConfig,
    ObjectiveKind,
};
use crate::tokenizer::{Tokenizer, MASK};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// Linear warmup over the first epoch's steps, then constant.
    pub warmup: bool,
    pub seed: u64,
    /// Keep a checkpoint every this many epochs (the last epoch always).
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-5,
            weight_decay: 0.01,
            batch_size: 32,
            epochs: 5,
            warmup: true,
            seed: 0,
            checkpoint_every: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("learning rate must be positive, got {}", self.lr)));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::Config("weight decay must be finite and >= 0".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be at least 1".into()));
        }
        if self.checkpoint_every == 0 {
            return Err(Error::Config("checkpoint_every must be at least 1".into()));
        }
        Ok(())
    }
}

/// AdamW moment hyperparameters (the paper states only the weight decay).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamHyper {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamHyper {
    fn default() -> Self {
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
}

impl OptState {
    pub fn new(n: usize) -> Self {
        Self { m: vec![0.0; n], v: vec![0.0; n], t: 0 }
    }
}

/// One decoupled-weight-decay adaptive-moment update.
pub fn adamw_step(
    params: &mut [f64],
    grads: &[f64],
    state: &mut OptState,
    hyper: &AdamHyper,
    lr_t: f64,
    weight_decay: f64,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(Error::Contract("adamw_step: shape mismatch".into()));
    }
    if !(lr_t >= 0.0) {
        return Err(Error::Contract(format!("adamw_step: negative lr {lr_t}")));
    }
    if let Some(bad) = grads.iter().position(|g| !g.is_finite()) {
        return Err(Error::Diverged(format!(
            "non-finite gradient at coordinate {bad}: {}",
            grads[bad]
        )));
    }
    state.t += 1;
    let t = state.t as i32;
    let bc1 = 1.0 - hyper.beta1.powi(t);
    let bc2 = 1.0 - hyper.beta2.powi(t);
    for i in 0..params.len() {
        let g = grads[i];
        state.m[i] = hyper.beta1 * state.m[i] + (1.0 - hyper.beta1) * g;
        state.v[i] = hyper.beta2 * state.v[i] + (1.0 - hyper.beta2) * g * g;
        let mhat = state.m[i] / bc1;
        let vhat = state.v[i] / bc2;
        params[i] -= lr_t * (mhat / (vhat.sqrt() + hyper.eps) + weight_decay * params[i]);
    }
    Ok(())
}

/// lr_t = lr * min(1, step/steps_in_epoch_1) with a 1-based global step.
pub fn warmup_lr(lr: f64, step: u64, steps_in_epoch_1: u64, warmup: bool) -> f64 {
    if !warmup || steps_in_epoch_1 == 0 {
        return lr;
    }
    lr * 1.0f64.min(step as f64 / steps_in_epoch_1 as f64)
}

/// Per-step component losses, one row of the metrics CSV.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: u64,
    pub epoch: usize,
    pub objective: String,
    pub loss: BatchLoss,
}

/// Full optimization state at an epoch boundary; reloading and continuing
/// reproduces the uninterrupted run bitwise.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Checkpoint {
    pub epoch: usize,
    pub step: u64,
    pub params: Vec<f64>,
    pub opt: OptState,
    pub rng: ChaCha20Rng,
    pub config_hash: String,
}

impl Checkpoint {
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

#[derive(Debug, Default)]
pub struct RunLog {
    pub checkpoints: Vec<Checkpoint>,
    pub steps: Vec<StepRecord>,
    pub epoch_losses: Vec<f64>,
    pub warnings: Vec<String>,
}

/// SHA-256 of a config's canonical JSON, stamped into artifacts.
pub fn config_hash<T: Serialize>(cfg: &T) -> String {
    let json = serde_json::to_string(cfg).expect("config serializes");
    let digest = Sha256::digest(json.as_bytes());
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

/// Write step records as CSV with a fixed column order.
pub fn write_step_csv(steps: &[StepRecord], path: &Path) -> Result<()> {
    let f = std::fs::File::create(path)?;
    let mut w = BufWriter::new(f);
    writeln!(w, "step,epoch,objective,total,forget_term,pl_term,gdr_term,kl_term")?;
    for s in steps {
        writeln!(
            w,
            "{},{},{},{},{},{},{},{}",
            s.step,
            s.epoch,
            s.objective,
            s.loss.total,
            s.loss.forget_term,
            s.loss.pl_term,
            s.loss.gdr_term,
            s.loss.kl_term
        )?;
    }
    Ok(())
}

struct LoopParams<'a> {
    cfg: &'a TrainConfig,
    objective_name: &'a str,
    config_hash: String,
    resume: Option<Checkpoint>,
    /// Abort when an epoch's mean loss exceeds 2x the first epoch's.
    check_divergence: bool,
    /// Stop early once an epoch's mean loss falls below this value.
    stop_below: Option<f64>,
}

/// Shared epoch/step driver. `batch_fn` sees shuffled primary and
/// (cyclic) secondary index batches plus the run RNG.
fn run_loop(
    model: &mut TransformerLM,
    n_primary: usize,
    n_secondary: usize,
    lp: LoopParams,
    mut batch_fn: impl FnMut(
        &TransformerLM,
        &[usize],
        &[usize],
        &mut ChaCha20Rng,
    ) -> Result<(BatchLoss, Vec<f64>)>,
) -> Result<RunLog> {
    lp.cfg.validate()?;
    if n_primary == 0 {
        return Err(Error::Contract("empty dataset".into()));
    }
    let steps_per_epoch = n_primary.div_ceil(lp.cfg.batch_size) as u64;
    let hyper = AdamHyper::default();

    let (mut rng, mut opt, mut step, start_epoch) = match lp.resume {
        Some(ck) => {
            if ck.config_hash != lp.config_hash {
                return Err(Error::Contract("checkpoint was produced by a different config".into()));
            }
            model.set_params(ck.params)?;
            (ck.rng, ck.opt, ck.step, ck.epoch)
        }
        None => (
            ChaCha20Rng::seed_from_u64(lp.cfg.seed),
            OptState::new(model.params().len()),
            0,
            0,
        ),
    };

    let mut log = RunLog::default();
    let mut first_epoch_loss = None;
    let mut prev_epoch_loss: Option<f64> = None;
    for epoch in start_epoch..lp.cfg.epochs {
        let mut order: Vec<usize> = (0..n_primary).collect();
        order.shuffle(&mut rng);
        let mut sec_order: Vec<usize> = (0..n_secondary).collect();
        sec_order.shuffle(&mut rng);

        let mut epoch_sum = 0.0;
        let mut n_batches = 0u64;
        for (b, batch) in order.chunks(lp.cfg.batch_size).enumerate() {
            let sec_batch: Vec<usize> = if n_secondary == 0 {
                Vec::new()
            } else {
                (0..batch.len().min(n_secondary))
                    .map(|k| sec_order[(b * lp.cfg.batch_size + k) % n_secondary])
                    .collect()
            };
            let (loss, grad) = batch_fn(model, batch, &sec_batch, &mut rng)?;
            step += 1;
            let lr_t = warmup_lr(lp.cfg.lr, step, steps_per_epoch, lp.cfg.warmup);
            adamw_step(
                model.params_mut(),
                &grad,
                &mut opt,
                &hyper,
                lr_t,
                lp.cfg.weight_decay,
            )?;
            epoch_sum += loss.total;
            n_batches += 1;
            log.steps.push(StepRecord {
                step,
                epoch: epoch + 1,
                objective: lp.objective_name.to_string(),
                loss,
            });
        }
        let epoch_loss = epoch_sum / n_batches as f64;
        log.epoch_losses.push(epoch_loss);
        let first = *first_epoch_loss.get_or_insert(epoch_loss);
        if lp.check_divergence && epoch_loss > 2.0 * first && epoch > start_epoch {
            return Err(Error::Diverged(format!(
                "epoch {} loss {epoch_loss} exceeds 2x the initial {first}",
                epoch + 1
            )));
        }
        if let Some(prev) = prev_epoch_loss {
            if lp.check_divergence && epoch_loss > prev * 1.05 {
                log.warnings.push(format!(
                    "epoch {} loss {epoch_loss} regressed >5% over {prev}",
                    epoch + 1
                ));
            }
        }
        prev_epoch_loss = Some(epoch_loss);

        let stop = lp.stop_below.is_some_and(|thr| epoch_loss < thr);
        let last = epoch + 1 == lp.cfg.epochs || stop;
        if (epoch + 1) % lp.cfg.checkpoint_every == 0 || last {
            log.checkpoints.push(Checkpoint {
                epoch: epoch + 1,
                step,
                params: model.params().to_vec(),
                opt: opt.clone(),
                rng: rng.clone(),
                config_hash: lp.config_hash.clone(),
            });
        }
        if stop {
            break;
        }
    }
    Ok(log)
}

/// Causal-LM training on next-token cross-entropy over full sequences.
pub fn train_lm(
    model: &mut TransformerLM,
    tokenizer: &Tokenizer,
    data: &[EncodedSample],
    cfg: &TrainConfig,
) -> Result<RunLog> {
    train_lm_inner(model, tokenizer, data, cfg, None)
}

/// Continue a [`train_lm`] run from one of its checkpoints.
pub fn resume_train_lm(
    model: &mut TransformerLM,
    tokenizer: &Tokenizer,
    data: &[EncodedSample],
    cfg: &TrainConfig,
    from: Checkpoint,
) -> Result<RunLog> {
    train_lm_inner(model, tokenizer, data, cfg, Some(from))
}

fn train_lm_inner(
    model: &mut TransformerLM,
    tokenizer: &Tokenizer,
    data: &[EncodedSample],
    cfg: &TrainConfig,
    resume: Option<Checkpoint>,
) -> Result<RunLog> {
    // all-GW PL over the batch is exactly mean per-token cross-entropy
    let obj = ObjectiveConfig::new(ObjectiveKind::PlOnly);
    let hash = config_hash(&(cfg, "train_lm"));
    run_loop(
        model,
        data.len(),
        0,
        LoopParams {
            cfg,
            objective_name: "nll",
            config_hash: hash,
            resume,
            check_divergence: true,
            stop_below: None,
        },
        |m, batch, _, _| {
            let samples: Vec<EncodedSample> = batch
                .iter()
                .map(|&i| {
                    let mut s = data[i].clone();
                    s.uw.iter_mut().for_each(|b| *b = false);
                    s
                })
                .collect();
            batch_loss_and_grad(m, None, tokenizer, &samples, &[], &obj)
        },
    )
}

/// Masked-LM training: each step masks one random answer position per
/// sample and scores the recovery cross-entropy.
pub fn train_masked_lm(
    model: &mut TransformerLM,
    data: &[EncodedSample],
    cfg: &TrainConfig,
) -> Result<RunLog> {
    let hash = config_hash(&(cfg, "train_masked_lm"));
    run_loop(
        model,
        data.len(),
        0,
        LoopParams {
            cfg,
            objective_name: "mlm",
            config_hash: hash,
            resume: None,
            check_divergence: true,
            stop_below: None,
        },
        |m, batch, _, rng| {
            let mut seqs = Vec::with_capacity(batch.len());
            let mut picks = Vec::with_capacity(batch.len());
            for &i in batch {
                let s = &data[i];
                let j = rng.gen_range(0..s.answer.len());
                let mut tokens: Vec<u32> =
                    s.prompt.iter().chain(&s.answer).copied().collect();
                let pos = s.prompt.len() + j;
                let gold = tokens[pos];
                tokens[pos] = MASK;
                seqs.push(tokens);
                picks.push((pos, gold as usize));
            }
            let mut bf = m.forward_batch(&seqs)?;
            let tape = &mut bf.tape;
            let mut losses = Vec::with_capacity(picks.len());
            for (k, &(pos, gold)) in picks.iter().enumerate() {
                let lp = tape.log_softmax(bf.logits[k]);
                let sel = tape.select(lp, &[(pos, gold)]);
                let mean = tape.mean(sel);
                losses.push(tape.scale(mean, -1.0));
            }
            let total = tape.mean_vars(&losses);
            let loss = BatchLoss {
                total: tape.value(total).item(),
                forget_term: 0.0,
                pl_term: tape.value(total).item(),
                gdr_term: 0.0,
                kl_term: 0.0,
                excluded_no_uw: 0,
                excluded_no_gw: 0,
            };
            let grads = bf.tape.backward(total)?;
            Ok((loss, bf.flat_grad(&grads)))
        },
    )
}

/// Unlearning loop: θ starts from θ_o, which stays frozen as the reference.
/// Returns the unlearned model alongside the step/checkpoint log.
pub fn unlearn(
    original: &TransformerLM,
    tokenizer: &Tokenizer,
    forget: &[EncodedSample],
    retain: &[EncodedSample],
    obj: &ObjectiveConfig,
    cfg: &TrainConfig,
) -> Result<(TransformerLM, RunLog)> {
    unlearn_inner(original, tokenizer, forget, retain, obj, cfg, None)
}

pub fn resume_unlearn(
    original: &TransformerLM,
    tokenizer: &Tokenizer,
    forget: &[EncodedSample],
    retain: &[EncodedSample],
    obj: &ObjectiveConfig,
    cfg: &TrainConfig,
    from: Checkpoint,
) -> Result<(TransformerLM, RunLog)> {
    unlearn_inner(original, tokenizer, forget, retain, obj, cfg, Some(from))
}

fn unlearn_inner(
    original: &TransformerLM,
    tokenizer: &Tokenizer,
    forget: &[EncodedSample],
    retain: &[EncodedSample],
    obj: &ObjectiveConfig,
    cfg: &TrainConfig,
    resume: Option<Checkpoint>,
) -> Result<(TransformerLM, RunLog)> {
    obj.validate()?;
    if matches!(obj.kind, ObjectiveKind::Tpo | ObjectiveKind::LplOnly)
        && forget.iter().all(|s| s.uw.iter().all(|&m| !m))
    {
        return Err(Error::Config(format!(
            "objective {} reads unwanted-word masks but no sample has any",
            obj.kind.name()
        )));
    }
    let mut model = original.clone();
    if cfg.epochs == 0 {
        return Ok((model, RunLog::default()));
    }
    let hash = config_hash(&(cfg, obj, "unlearn"));
    let log = run_loop(
        &mut model,
        forget.len(),
        retain.len(),
        LoopParams {
            cfg,
            objective_name: obj.kind.name(),
            config_hash: hash,
            resume,
            check_divergence: false,
            stop_below: None,
        },
        |m, batch, retain_batch, _| {
            let fb: Vec<EncodedSample> = batch.iter().map(|&i| forget[i].clone()).collect();
            let rb: Vec<EncodedSample> =
                retain_batch.iter().map(|&i| retain[i].clone()).collect();
            batch_loss_and_grad(m, Some(original), tokenizer, &fb, &rb, obj)
        },
    )?;
    Ok((model, log))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TaskVectorConfig {
    /// Reinforcement stops once the epoch NLL drops below this.
    pub nll_target: f64,
    pub max_epochs: usize,
    pub train: TrainConfig,
}

impl Default for TaskVectorConfig {
    fn default() -> Self {
        Self { nll_target: 0.05, max_epochs: 25, train: TrainConfig::default() }
    }
}

/// Task Vector unlearning: overfit a copy to the forget set, then subtract
/// the weight delta from the original.
pub fn task_vector_run(
    original: &TransformerLM,
    tokenizer: &Tokenizer,
    forget: &[EncodedSample],
    cfg: &TaskVectorConfig,
) -> Result<(TransformerLM, RunLog)> {
    let mut reinforce = original.clone();
    let obj = ObjectiveConfig::new(ObjectiveKind::PlOnly);
    let mut train = cfg.train.clone();
    train.epochs = cfg.max_epochs;
    let hash = config_hash(&(cfg, "task_vector"));
    let log = run_loop(
        &mut reinforce,
        forget.len(),
        0,
        LoopParams {
            cfg: &train,
            objective_name: "task_vector_reinforce",
            config_hash: hash,
            resume: None,
            check_divergence: false,
            stop_below: Some(cfg.nll_target),
        },
        |m, batch, _, _| {
            let samples: Vec<EncodedSample> = batch
                .iter()
                .map(|&i| {
                    let mut s = forget[i].clone();
                    s.uw.iter_mut().for_each(|b| *b = false);
                    s
                })
                .collect();
            batch_loss_and_grad(m, None, tokenizer, &samples, &[], &obj)
        },
    )?;
    let new_params = task_vector_unlearn(original.params(), reinforce.params())?;
    let mut out = original.clone();
    out.set_params(new_params)?;
    Ok((out, log))
}
