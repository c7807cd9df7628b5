//! Adapter fine-tuning: AdamW with decoupled weight decay, linear learning
//! rate decay, global-norm clipping and per-epoch ROUGE validation.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::lora::ForwardMode;
use crate::model::{shift_right, GenerateConfig, ModelError, ModelInput, Seq2SeqModel, Strategy};
use crate::numerics::{Gradients, Graph, Real, Tensor};
use crate::rouge::{corpus_rouge, RougeReport};
use crate::tokenizer::{collate, EncodedExample, SubwordTokenizer, TokenizerError, IGNORE_INDEX};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LrSchedule {
    Constant,
    LinearDecay,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EvalStrategy {
    Epoch,
    No,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub eval_strategy: EvalStrategy,
    pub seed: u64,
    pub lr_schedule: LrSchedule,
    pub gradient_clip_norm: Option<f64>,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 5e-4,
            weight_decay: 0.01,
            batch_size: 5,
            epochs: 3,
            eval_strategy: EvalStrategy::Epoch,
            seed: 0,
            lr_schedule: LrSchedule::LinearDecay,
            gradient_clip_norm: Some(1.0),
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("non-finite gradient for parameter {0}")]
    NonFiniteGradient(String),
    #[error("shape mismatch for parameter {0}")]
    Shape(String),
    #[error("epoch hook failed: {0}")]
    Hook(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Tokenizer(#[from] TokenizerError),
}

pub type Result<T, E = TrainError> = core::result::Result<T, E>;

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) || self.weight_decay < 0.0 {
            return Err(TrainError::Config(String::from(
                "learning_rate must be positive and weight_decay non-negative",
            )));
        }
        if self.batch_size == 0 || self.epochs == 0 {
            return Err(TrainError::Config(String::from("batch_size and epochs must be >= 1")));
        }
        if let Some(c) = self.gradient_clip_norm {
            if !(c > 0.0) {
                return Err(TrainError::Config(format!("gradient_clip_norm {c} must be positive")));
            }
        }
        Ok(())
    }

    pub fn steps_per_epoch(&self, n_train: usize) -> usize {
        n_train.div_ceil(self.batch_size)
    }

    pub fn total_steps(&self, n_train: usize) -> usize {
        self.epochs * self.steps_per_epoch(n_train)
    }

    /// Learning rate for zero-based optimizer step `step`.
    pub fn lr_at(&self, step: usize, total: usize) -> f64 {
        match self.lr_schedule {
            LrSchedule::Constant => self.learning_rate,
            LrSchedule::LinearDecay => {
                if total == 0 {
                    return self.learning_rate;
                }
                self.learning_rate * (total.saturating_sub(step)) as f64 / total as f64
            }
        }
    }
}

/// First and second moment estimates per parameter.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct AdamState<F: Real> {
    pub step: u64,
    pub moments: BTreeMap<String, (Tensor<F>, Tensor<F>)>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamHyper {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

/// One AdamW update over `params`. Decay is decoupled: each parameter is
/// first multiplied by `1 - lr·wd`, then moved by the bias-corrected
/// adaptive step. A parameter without a gradient entry is treated as having
/// a zero gradient.
pub fn optimizer_step<F: Real>(
    params: &mut BTreeMap<String, Tensor<F>>,
    grads: &Gradients<F>,
    state: &mut AdamState<F>,
    hyper: &AdamHyper,
) -> Result<()> {
    for (name, g) in grads {
        if let Some(p) = params.get(name) {
            if p.shape() != g.shape() {
                return Err(TrainError::Shape(name.clone()));
            }
        }
        if !g.all_finite() {
            return Err(TrainError::NonFiniteGradient(name.clone()));
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let b1 = F::of(hyper.beta1);
    let b2 = F::of(hyper.beta2);
    let one = F::one();
    let bc1 = one - F::of(libm::pow(hyper.beta1, t as f64));
    let bc2 = one - F::of(libm::pow(hyper.beta2, t as f64));
    let lr = F::of(hyper.lr);
    let eps = F::of(hyper.eps);
    let decay = one - F::of(hyper.lr * hyper.weight_decay);
    for (name, p) in params.iter_mut() {
        let (m, v) = state
            .moments
            .entry(name.clone())
            .or_insert_with(|| (Tensor::zeros(p.shape()), Tensor::zeros(p.shape())));
        let g = grads.get(name);
        let pd = p.data_mut();
        let (md, vd) = (m.data_mut(), v.data_mut());
        for i in 0..pd.len() {
            let gi = g.map_or(F::zero(), |g| g.data()[i]);
            pd[i] = pd[i] * decay;
            md[i] = b1 * md[i] + (one - b1) * gi;
            vd[i] = b2 * vd[i] + (one - b2) * gi * gi;
            let m_hat = md[i] / bc1;
            let v_hat = vd[i] / bc2;
            pd[i] = pd[i] - lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}

/// Scales gradients in place so their global L2 norm is at most
/// `max_norm`. Returns the norm before clipping.
pub fn clip_grad_norm<F: Real>(grads: &mut Gradients<F>, max_norm: f64) -> f64 {
    let sq: f64 = grads
        .values()
        .flat_map(|g| g.data().iter())
        .map(|x| {
            let v = Real::as_f64(*x);
            v * v
        })
        .sum();
    let total = libm::sqrt(sq);
    if total > max_norm {
        let s = F::of(max_norm / (total + 1e-6));
        for g in grads.values_mut() {
            for x in g.data_mut() {
                *x = *x * s;
            }
        }
    }
    total
}

/// Source ids with the reference headline text used for scoring.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvalExample {
    pub input_ids: Vec<u32>,
    pub reference: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochReport {
    pub epoch: usize,
    pub mean_train_loss: f64,
    pub validation: Option<RougeReport>,
    pub wall_seconds: f64,
    pub checkpoint: Option<String>,
}

/// Called after each epoch with the report and the current model; used to
/// stamp wall-clock time and persist checkpoints.
pub trait EpochHook<F: Real> {
    fn on_epoch_end(&mut self, report: &mut EpochReport, model: &Seq2SeqModel<F>) -> core::result::Result<(), String>;

    /// Called after every optimizer step with the batch loss.
    fn on_step(&mut self, _step: usize, _loss: f64) {}
}

/// Hook that does nothing.
pub struct NoHook;

impl<F: Real> EpochHook<F> for NoHook {
    fn on_epoch_end(&mut self, _: &mut EpochReport, _: &Seq2SeqModel<F>) -> core::result::Result<(), String> {
        Ok(())
    }
}

pub fn greedy_config(tokenizer: &SubwordTokenizer, max_len: usize) -> GenerateConfig {
    let s = tokenizer.special_ids();
    GenerateConfig {
        max_len,
        strategy: Strategy::Greedy,
        begin_id: s.bos,
        end_id: s.eos,
    }
}

/// Greedy headlines (max 20 tokens by default config) for every example,
/// scored against the references.
pub fn evaluate<F: Real>(
    model: &Seq2SeqModel<F>,
    examples: &[EvalExample],
    tokenizer: &SubwordTokenizer,
    gen: &GenerateConfig,
) -> Result<RougeReport> {
    let mut pairs = Vec::with_capacity(examples.len());
    for e in examples {
        let ids = model.generate(&e.input_ids, gen)?;
        pairs.push((tokenizer.decode(&ids), e.reference.clone()));
    }
    corpus_rouge(&pairs).map_err(|_| TrainError::Config(String::from("evaluation split is empty")))
}

/// Deterministic batch order for one epoch: seeded shuffle of indices.
pub fn epoch_order(n: usize, seed: u64, epoch: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (epoch as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    idx.shuffle(&mut rng);
    idx
}

/// Teacher-forced mean loss of one batch, with gradients when `mode` is
/// training.
pub fn batch_loss<F: Real>(
    model: &Seq2SeqModel<F>,
    examples: &[EncodedExample],
    pad_id: u32,
    begin_id: u32,
    mode: ForwardMode,
    want_grads: bool,
) -> Result<(f64, Option<Gradients<F>>)> {
    let batch = collate(examples, pad_id, IGNORE_INDEX)?;
    let dec: Vec<Vec<u32>> = batch
        .labels
        .iter()
        .map(|l| shift_right(l, begin_id, pad_id, IGNORE_INDEX))
        .collect();
    let mut g = Graph::new();
    let loss = model.loss_graph(
        &mut g,
        ModelInput {
            input_ids: &batch.input_ids,
            attention_mask: &batch.attention_mask,
            decoder_input_ids: &dec,
        },
        &batch.labels,
        IGNORE_INDEX,
        mode,
    )?;
    let value = g.value(loss).data()[0].as_f64();
    let grads = if want_grads {
        Some(g.backward(loss).map_err(ModelError::from)?)
    } else {
        None
    };
    Ok((value, grads))
}

/// Mean eval-mode loss over `examples` in batches of `batch_size`.
pub fn dataset_loss<F: Real>(
    model: &Seq2SeqModel<F>,
    examples: &[EncodedExample],
    tokenizer: &SubwordTokenizer,
    batch_size: usize,
) -> Result<f64> {
    let s = tokenizer.special_ids();
    let mut total = 0.0;
    let mut n = 0usize;
    for chunk in examples.chunks(batch_size.max(1)) {
        let (l, _) = batch_loss(model, chunk, s.pad, s.bos, ForwardMode::EVAL, false)?;
        total += l * chunk.len() as f64;
        n += chunk.len();
    }
    Ok(if n == 0 { 0.0 } else { total / n as f64 })
}

/// Fine-tunes the adapters on `train`, validating on `val` after each epoch.
/// Only trainable adapter tensors change; the frozen base is never written.
pub fn finetune<F: Real, H: EpochHook<F>>(
    model: &mut Seq2SeqModel<F>,
    tokenizer: &SubwordTokenizer,
    train: &[EncodedExample],
    val: &[EvalExample],
    config: &TrainConfig,
    hook: &mut H,
) -> Result<Vec<EpochReport>> {
    config.validate()?;
    if train.is_empty() {
        return Err(TrainError::Config(String::from("training split is empty")));
    }
    if config.eval_strategy == EvalStrategy::Epoch && val.is_empty() {
        return Err(TrainError::Config(String::from("validation split is empty")));
    }
    if model.lora_config().is_none() {
        return Err(TrainError::Config(String::from("no adapters attached")));
    }
    let s = tokenizer.special_ids();
    let gen = greedy_config(tokenizer, crate::tokenizer::MAX_TARGET_LEN);
    let total = config.total_steps(train.len());
    let mut state = AdamState::default();
    let mut reports = Vec::with_capacity(config.epochs);
    let mut step = 0usize;
    for epoch in 0..config.epochs {
        let order = epoch_order(train.len(), config.seed, epoch);
        let mut loss_sum = 0.0;
        let mut batches = 0usize;
        for idx in order.chunks(config.batch_size) {
            let examples: Vec<EncodedExample> = idx.iter().map(|&i| train[i].clone()).collect();
            let mode = ForwardMode::train(config.seed, step as u64);
            let (loss, grads) = batch_loss(model, &examples, s.pad, s.bos, mode, true)?;
            let mut grads = grads.expect("requested gradients");
            if let Some(max) = config.gradient_clip_norm {
                clip_grad_norm(&mut grads, max);
            }
            let mut params = model.trainable_params();
            let hyper = AdamHyper {
                lr: config.lr_at(step, total),
                weight_decay: config.weight_decay,
                beta1: config.beta1,
                beta2: config.beta2,
                eps: config.eps,
            };
            optimizer_step(&mut params, &grads, &mut state, &hyper)?;
            for (name, value) in params {
                model.set_trainable(&name, value)?;
            }
            hook.on_step(step, loss);
            loss_sum += loss;
            batches += 1;
            step += 1;
        }
        let validation = match config.eval_strategy {
            EvalStrategy::Epoch => Some(evaluate(model, val, tokenizer, &gen)?),
            EvalStrategy::No => None,
        };
        let mut report = EpochReport {
            epoch: epoch + 1,
            mean_train_loss: if batches == 0 { 0.0 } else { loss_sum / batches as f64 },
            validation,
            wall_seconds: 0.0,
            checkpoint: None,
        };
        hook.on_epoch_end(&mut report, model).map_err(TrainError::Hook)?;
        reports.push(report);
    }
    Ok(reports)
}
