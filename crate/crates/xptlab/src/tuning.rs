//! Training loops: Adam, learning-rate selection, MLM pretraining, and the
//! paired-task runs for both tuning methods.
//!
//! Gradients are computed on one tape per sample and reduced in sample
//! order, so results are bitwise identical no matter how many worker threads
//! run the forward/backward passes.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::encoder::{bind, classify, forward, mlm_logits, BindMode, EncoderParams, ModelConfig};
use crate::error::{Error, Result};
use crate::prompts::{init_prompts, DeepPrompt, PromptConfig};
use crate::synthlang::{encode_pair, subseed, MultilingualDataset, Split, TaskSample};
use crate::tensor::Tape;

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// Learning rates tried when none is pinned, largest first.
pub const DEFAULT_LR_GRID: [f64; 6] = [5e-2, 1e-2, 5e-3, 1e-3, 5e-4, 1e-4];

/// Epochs per probe run during learning-rate selection.
pub const PROBE_EPOCHS: usize = 3;

/// Which parameters a tuning run updates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TuneMode {
    /// Update the whole encoder plus the classifier head.
    FullFinetune,
    /// Update only the prompt key/values and the classifier head; the
    /// backbone stays byte-identical.
    PromptTune,
}

impl TuneMode {
    pub fn bind_mode(self) -> BindMode {
        match self {
            TuneMode::FullFinetune => BindMode::FineTune,
            TuneMode::PromptTune => BindMode::PromptTune,
        }
    }

    /// Short tag used in file names and reports.
    pub fn tag(self) -> &'static str {
        match self {
            TuneMode::FullFinetune => "ft",
            TuneMode::PromptTune => "pt",
        }
    }
}

/// Hyperparameters for one tuning run. A zero learning rate means "pick one
/// from `lr_grid` with short probes".
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Hyper {
    pub mode: TuneMode,
    pub lr: f64,
    pub lr_grid: Vec<f64>,
    pub batch_size: usize,
    pub epochs: usize,
}

impl Hyper {
    pub fn default_for(mode: TuneMode) -> Self {
        Self {
            mode,
            lr: 0.0,
            lr_grid: DEFAULT_LR_GRID.to_vec(),
            batch_size: 32,
            epochs: 30,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !self.lr.is_finite() || self.lr < 0.0 {
            return Err(Error::Input(format!("learning rate {} is not usable", self.lr)));
        }
        if self.lr == 0.0 {
            if self.lr_grid.is_empty() {
                return Err(Error::Input(
                    "no learning rate given and the grid is empty".into(),
                ));
            }
            if self.lr_grid.iter().any(|lr| !lr.is_finite() || *lr <= 0.0) {
                return Err(Error::Input("learning-rate grid holds a non-positive entry".into()));
            }
        }
        if self.batch_size == 0 {
            return Err(Error::Input("batch_size must be positive".into()));
        }
        if self.epochs == 0 {
            return Err(Error::Input("epochs must be positive".into()));
        }
        Ok(())
    }
}

/// Linearly decayed learning rate before update `step` of `total_steps`.
/// Decay never reaches zero: the last update still moves.
pub fn linear_lr(step: usize, total_steps: usize, base: f64) -> Result<f64> {
    if total_steps == 0 || step >= total_steps {
        return Err(Error::Internal(format!(
            "schedule asked for step {step} of {total_steps}"
        )));
    }
    Ok(base * (1.0 - step as f64 / total_steps as f64))
}

/// Adam with bias correction. Slots are keyed by parameter name so that the
/// same state can drive any subset of the model.
#[derive(Debug, Default)]
pub struct AdamState {
    slots: BTreeMap<String, (Vec<f64>, Vec<f64>)>,
    step: usize,
}

impl AdamState {
    pub fn new() -> Self {
        Self::default()
    }

    /// Advance the shared step counter; call once per optimizer update,
    /// before the per-parameter calls.
    pub fn begin_step(&mut self) {
        self.step += 1;
    }

    pub fn update(&mut self, name: &str, param: &mut [f64], grad: &[f64], lr: f64) -> Result<()> {
        if self.step == 0 {
            return Err(Error::Internal("adam update before begin_step".into()));
        }
        if param.len() != grad.len() {
            return Err(Error::Internal(format!(
                "gradient for {name} has {} entries, parameter has {}",
                grad.len(),
                param.len()
            )));
        }
        let (m, v) = self
            .slots
            .entry(name.to_string())
            .or_insert_with(|| (vec![0.0; param.len()], vec![0.0; param.len()]));
        if m.len() != param.len() {
            return Err(Error::Internal(format!("adam slot size changed for {name}")));
        }
        let t = self.step as f64;
        let bc1 = 1.0 - ADAM_BETA1.powf(t);
        let bc2 = 1.0 - ADAM_BETA2.powf(t);
        for i in 0..param.len() {
            m[i] = ADAM_BETA1 * m[i] + (1.0 - ADAM_BETA1) * grad[i];
            v[i] = ADAM_BETA2 * v[i] + (1.0 - ADAM_BETA2) * grad[i] * grad[i];
            let m_hat = m[i] / bc1;
            let v_hat = v[i] / bc2;
            param[i] -= lr * m_hat / (v_hat.sqrt() + ADAM_EPS);
        }
        Ok(())
    }
}

/// Per-epoch curves and final accuracies from one run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunHistory {
    pub mode: TuneMode,
    pub seed: u64,
    /// The learning rate actually used (after selection, if any).
    pub lr: f64,
    pub train_loss: Vec<f64>,
    pub val_acc: Vec<f64>,
    pub final_train_acc: f64,
    /// Test accuracy per language; empty for probe runs.
    pub test_acc: BTreeMap<usize, f64>,
}

/// Tuned parameters plus the run record.
pub struct TrainOutcome {
    pub params: EncoderParams,
    pub prompts: Option<DeepPrompt>,
    pub history: RunHistory,
}

fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in row.iter().enumerate().skip(1) {
        if x > row[best] {
            best = i;
        }
    }
    best
}

/// Forward/backward for one pair sample. Returns the loss, whether the
/// prediction was correct, and (if requested) gradients aligned with the
/// bound trainable order.
fn pair_pass(
    cfg: &ModelConfig,
    params: &EncoderParams,
    prompts: Option<&DeepPrompt>,
    sample: &TaskSample,
    mode: BindMode,
    want_grads: bool,
) -> Result<(f64, bool, Vec<Option<Vec<f64>>>, Vec<String>)> {
    let tokens = encode_pair(sample, cfg)?;
    let past = prompts.map(|p| p.as_past_kv()).transpose()?;
    let mut tape = Tape::new();
    let bound = bind(&mut tape, cfg, params, past.as_ref(), mode)?;
    let out = forward(&mut tape, &tokens, &bound)?;
    let logits = classify(&mut tape, &out.cls, &bound)?;
    let loss = tape.cross_entropy_logits(&logits, &[sample.label])?;
    let loss_val = loss.item();
    let correct = argmax(logits.data()) == sample.label;

    let mut names = Vec::new();
    let mut grads = Vec::new();
    if want_grads {
        let g = tape.backward(&loss)?;
        for (name, node) in &bound.trainables {
            names.push(name.clone());
            grads.push(g.get(*node).map(|t| t.data().to_vec()));
        }
    }
    Ok((loss_val, correct, grads, names))
}

/// Mean accuracy over a sample list, inference mode.
fn accuracy(
    cfg: &ModelConfig,
    params: &EncoderParams,
    prompts: Option<&DeepPrompt>,
    samples: &[&TaskSample],
) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::Input("accuracy over an empty sample set".into()));
    }
    let correct: usize = samples
        .par_iter()
        .map(|s| {
            pair_pass(cfg, params, prompts, s, BindMode::Inference, false)
                .map(|(_, ok, _, _)| usize::from(ok))
        })
        .collect::<Result<Vec<_>>>()?
        .into_iter()
        .sum();
    Ok(correct as f64 / samples.len() as f64)
}

/// Per-language accuracy on one split.
pub fn evaluate(
    cfg: &ModelConfig,
    params: &EncoderParams,
    prompts: Option<&DeepPrompt>,
    ds: &MultilingualDataset,
    split: Split,
    langs: &[usize],
) -> Result<BTreeMap<usize, f64>> {
    let mut out = BTreeMap::new();
    for &lang in langs {
        if lang >= ds.n_languages() {
            return Err(Error::Input(format!("unknown language {lang}")));
        }
        let samples = ds.split_lang(split, lang);
        if samples.is_empty() {
            return Err(Error::Input(format!(
                "no {split:?} samples for language {lang}"
            )));
        }
        out.insert(lang, accuracy(cfg, params, prompts, &samples)?);
    }
    Ok(out)
}

/// Accumulate per-sample gradients (sample order) into a mean, leaving None
/// where no sample produced a gradient.
fn reduce_grads(
    per_sample: &[Vec<Option<Vec<f64>>>],
    n_params: usize,
) -> Vec<Option<Vec<f64>>> {
    let n = per_sample.len() as f64;
    let mut acc: Vec<Option<Vec<f64>>> = vec![None; n_params];
    for sample in per_sample {
        for (slot, g) in acc.iter_mut().zip(sample) {
            if let Some(g) = g {
                match slot {
                    Some(s) => {
                        for (a, b) in s.iter_mut().zip(g) {
                            *a += b;
                        }
                    }
                    None => *slot = Some(g.clone()),
                }
            }
        }
    }
    for slot in acc.iter_mut().flatten() {
        for x in slot.iter_mut() {
            *x /= n;
        }
    }
    acc
}

/// Apply one Adam step to the named parameters, looking targets up in the
/// encoder and (for prompt names) the prompt bank.
fn apply_update(
    params: &mut EncoderParams,
    prompts: Option<&mut DeepPrompt>,
    names: &[String],
    grads: &[Option<Vec<f64>>],
    adam: &mut AdamState,
    lr: f64,
) -> Result<()> {
    let mut targets: BTreeMap<String, &mut crate::tensor::Tensor> = BTreeMap::new();
    for (name, t) in params.named_mut() {
        targets.insert(name, t);
    }
    if let Some(p) = prompts {
        for (name, t) in p.named_mut() {
            targets.insert(name, t);
        }
    }
    adam.begin_step();
    for (name, grad) in names.iter().zip(grads) {
        let Some(grad) = grad else { continue };
        let t = targets
            .get_mut(name)
            .ok_or_else(|| Error::Internal(format!("no parameter named {name}")))?;
        adam.update(name, t.data_mut(), grad, lr)?;
    }
    Ok(())
}

/// One full tuning run at a fixed learning rate: fresh head, fresh prompts
/// for prompt tuning, per-epoch shuffling, linear decay.
fn run_once(
    cfg: &ModelConfig,
    pretrained: &EncoderParams,
    prompt_cfg: &PromptConfig,
    ds: &MultilingualDataset,
    mode: TuneMode,
    lr: f64,
    batch_size: usize,
    epochs: usize,
    seed: u64,
    final_eval: bool,
) -> Result<TrainOutcome> {
    let mut params = pretrained.clone();
    params.reinit_head(cfg, subseed(seed, 0xEAD));
    let mut prompts = match mode {
        TuneMode::PromptTune => {
            let pc = PromptConfig {
                seed: subseed(seed ^ prompt_cfg.seed, 3),
                ..prompt_cfg.clone()
            };
            Some(init_prompts(cfg, &pc)?)
        }
        TuneMode::FullFinetune => None,
    };
    let frozen_backbone = params.backbone_checksum();

    let train_set = ds.split_lang(Split::Train, 0);
    let val_set = ds.split_lang(Split::Val, 0);
    if train_set.is_empty() || val_set.is_empty() {
        return Err(Error::Input("dataset lacks language-0 train or val samples".into()));
    }

    let n = train_set.len();
    let batches_per_epoch = (n + batch_size - 1) / batch_size;
    let total_steps = epochs * batches_per_epoch;
    let mut adam = AdamState::new();
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(subseed(seed, 0x5F));
    let mut order: Vec<usize> = (0..n).collect();
    let bind_mode = mode.bind_mode();

    let mut train_loss = Vec::with_capacity(epochs);
    let mut val_acc = Vec::with_capacity(epochs);
    let mut step = 0usize;
    for _ in 0..epochs {
        order.shuffle(&mut shuffle_rng);
        let mut loss_sum = 0.0;
        for chunk in order.chunks(batch_size) {
            let outs: Vec<(f64, bool, Vec<Option<Vec<f64>>>, Vec<String>)> = chunk
                .par_iter()
                .map(|&i| pair_pass(cfg, &params, prompts.as_ref(), train_set[i], bind_mode, true))
                .collect::<Result<Vec<_>>>()?;
            let batch_loss: f64 = outs.iter().map(|o| o.0).sum::<f64>() / outs.len() as f64;
            if !batch_loss.is_finite() {
                return Err(Error::Internal(format!(
                    "training diverged at step {step} (lr {lr})"
                )));
            }
            loss_sum += outs.iter().map(|o| o.0).sum::<f64>();
            let names = outs[0].3.clone();
            let per_sample: Vec<Vec<Option<Vec<f64>>>> =
                outs.into_iter().map(|o| o.2).collect();
            let mean_grads = reduce_grads(&per_sample, names.len());
            let lr_t = linear_lr(step, total_steps, lr)?;
            apply_update(&mut params, prompts.as_mut(), &names, &mean_grads, &mut adam, lr_t)?;
            step += 1;
        }
        train_loss.push(loss_sum / n as f64);
        val_acc.push(accuracy(cfg, &params, prompts.as_ref(), &val_set)?);
    }

    if mode == TuneMode::PromptTune && params.backbone_checksum() != frozen_backbone {
        return Err(Error::Invariant(
            "prompt tuning modified the frozen backbone".into(),
        ));
    }

    let final_train_acc = accuracy(cfg, &params, prompts.as_ref(), &train_set)?;
    let test_acc = if final_eval {
        let langs: Vec<usize> = (0..ds.n_languages()).collect();
        evaluate(cfg, &params, prompts.as_ref(), ds, Split::Test, &langs)?
    } else {
        BTreeMap::new()
    };

    Ok(TrainOutcome {
        params,
        prompts,
        history: RunHistory {
            mode,
            seed,
            lr,
            train_loss,
            val_acc,
            final_train_acc,
            test_acc,
        },
    })
}

/// Probe every grid entry for a few epochs and keep the one with the best
/// final validation accuracy. Ties go to the smaller rate; rates that
/// diverge are skipped.
pub fn select_lr(
    cfg: &ModelConfig,
    pretrained: &EncoderParams,
    prompt_cfg: &PromptConfig,
    ds: &MultilingualDataset,
    hyper: &Hyper,
    seed: u64,
) -> Result<f64> {
    let mut grid = hyper.lr_grid.clone();
    if grid.is_empty() {
        return Err(Error::Input("learning-rate grid is empty".into()));
    }
    grid.sort_by(|a, b| b.partial_cmp(a).expect("finite grid"));
    let mut best: Option<(f64, f64)> = None;
    for &lr in &grid {
        let probe = run_once(
            cfg,
            pretrained,
            prompt_cfg,
            ds,
            hyper.mode,
            lr,
            hyper.batch_size,
            PROBE_EPOCHS,
            seed,
            false,
        );
        match probe {
            Ok(out) => {
                let acc = *out.history.val_acc.last().expect("probe ran epochs");
                if acc.is_finite() && best.map_or(true, |(b, _)| acc >= b) {
                    best = Some((acc, lr));
                }
            }
            // Divergence disqualifies the candidate; anything else is real.
            Err(Error::Internal(_)) => continue,
            Err(e) => return Err(e),
        }
    }
    best.map(|(_, lr)| lr)
        .ok_or_else(|| Error::Internal("every learning rate in the grid diverged".into()))
}

/// Run one tuning job end to end: select a learning rate if none is pinned,
/// then train and evaluate on every language's test split.
pub fn train(
    cfg: &ModelConfig,
    pretrained: &EncoderParams,
    prompt_cfg: &PromptConfig,
    ds: &MultilingualDataset,
    hyper: &Hyper,
    seed: u64,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    hyper.validate()?;
    let lr = if hyper.lr > 0.0 {
        hyper.lr
    } else {
        select_lr(cfg, pretrained, prompt_cfg, ds, hyper, seed)?
    };
    run_once(
        cfg,
        pretrained,
        prompt_cfg,
        ds,
        hyper.mode,
        lr,
        hyper.batch_size,
        hyper.epochs,
        seed,
        true,
    )
}

/// Pretraining recipe for the shared multilingual backbone.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PretrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub mask_rate: f64,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            epochs: 120,
            lr: 1e-3,
            batch_size: 8,
            mask_rate: 0.15,
            seed: 11,
        }
    }
}

impl PretrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Input("pretrain epochs and batch_size must be positive".into()));
        }
        if !self.lr.is_finite() || self.lr <= 0.0 {
            return Err(Error::Input(format!("pretrain lr {} is not usable", self.lr)));
        }
        if !(self.mask_rate > 0.0 && self.mask_rate < 1.0) {
            return Err(Error::Input(format!(
                "mask_rate must lie in (0, 1), got {}",
                self.mask_rate
            )));
        }
        Ok(())
    }
}

/// Masked-language pretraining over the pooled multilingual corpora.
/// Corruption is redrawn every epoch. Returns the per-epoch mean loss.
pub fn pretrain_mlm(
    cfg: &ModelConfig,
    params: &mut EncoderParams,
    corpora: &[Vec<Vec<usize>>],
    pc: &PretrainConfig,
) -> Result<Vec<f64>> {
    cfg.validate()?;
    pc.validate()?;
    if corpora.iter().all(|c| c.is_empty()) {
        return Err(Error::Input("pretraining corpus is empty".into()));
    }
    let n_sentences: usize = corpora.iter().map(|c| c.len()).sum();
    let batches_per_epoch = (n_sentences + pc.batch_size - 1) / pc.batch_size;
    let total_steps = pc.epochs * batches_per_epoch;

    let mut adam = AdamState::new();
    let mut losses = Vec::with_capacity(pc.epochs);
    let mut step = 0usize;
    for epoch in 0..pc.epochs {
        let batches = crate::synthlang::build_mlm_batches(
            corpora,
            cfg,
            pc.mask_rate,
            pc.batch_size,
            subseed(pc.seed, epoch as u64),
        )?;
        let mut loss_sum = 0.0;
        let mut loss_count = 0usize;
        for batch in &batches {
            let outs: Vec<Option<(f64, Vec<Option<Vec<f64>>>, Vec<String>)>> = batch
                .par_iter()
                .map(|ex| -> Result<Option<_>> {
                    if ex.targets.is_empty() {
                        return Ok(None);
                    }
                    let mut tape = Tape::new();
                    let bound = bind(&mut tape, cfg, params, None, BindMode::Pretrain)?;
                    let out = forward(&mut tape, &ex.tokens, &bound)?;
                    let positions: Vec<usize> = ex.targets.iter().map(|t| t.0).collect();
                    let originals: Vec<usize> = ex.targets.iter().map(|t| t.1).collect();
                    let picked = tape.gather_rows(&out.hidden, &positions)?;
                    let logits = mlm_logits(&mut tape, &picked, &bound)?;
                    let loss = tape.cross_entropy_logits(&logits, &originals)?;
                    let loss_val = loss.item();
                    let g = tape.backward(&loss)?;
                    let mut names = Vec::new();
                    let mut grads = Vec::new();
                    for (name, node) in &bound.trainables {
                        names.push(name.clone());
                        grads.push(g.get(*node).map(|t| t.data().to_vec()));
                    }
                    Ok(Some((loss_val, grads, names)))
                })
                .collect::<Result<Vec<_>>>()?;
            let outs: Vec<_> = outs.into_iter().flatten().collect();
            if outs.is_empty() {
                // Nothing was corrupted in this batch; no update.
                step += 1;
                continue;
            }
            let batch_loss: f64 = outs.iter().map(|o| o.0).sum::<f64>() / outs.len() as f64;
            if !batch_loss.is_finite() {
                return Err(Error::Internal(format!(
                    "pretraining diverged at step {step} in epoch {epoch}"
                )));
            }
            loss_sum += batch_loss * outs.len() as f64;
            loss_count += outs.len();
            let names = outs[0].2.clone();
            let per_sample: Vec<Vec<Option<Vec<f64>>>> =
                outs.into_iter().map(|o| o.1).collect();
            let mean_grads = reduce_grads(&per_sample, names.len());
            let lr_t = linear_lr(step, total_steps, pc.lr)?;
            apply_update(params, None, &names, &mean_grads, &mut adam, lr_t)?;
            step += 1;
        }
        losses.push(loss_sum / loss_count.max(1) as f64);
    }
    Ok(losses)
}
