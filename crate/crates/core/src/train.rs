//! Adam, gradient clipping and the epoch loop.
//!
//! All randomness (shuffling, dropout masks, teacher forcing draws) comes
//! from one ChaCha8 stream seeded by [`TrainConfig::seed`]. Each pair of a
//! batch gets its own seed drawn from that stream before any work starts,
//! so runs are bitwise reproducible for any executor.

use alloc::string::String;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::decoding::{default_max_len, greedy_decode};
use crate::distill::{sequence_nll, TrainingPair, Utterance};
use crate::error::{Error, Result};
use crate::exec::Executor;
use crate::metrics::{EvalReport, UtteranceScore};
use crate::model::{Dropout, Seq2Seq, TeacherForcing};
use crate::params::ParamStore;
use crate::tensor::{Real, Tensor};
use crate::vocab::Vocabulary;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub decay_per_epoch: f64,
    pub batch_size: usize,
    /// Probability of conditioning a step on the reference token.
    pub teacher_forcing_rate: f64,
    pub dropout: f64,
    pub max_epochs: usize,
    /// Epochs without a validation improvement before stopping.
    pub patience: usize,
    pub seed: u64,
    /// Global gradient norm limit.
    pub clip_norm: f64,
    /// Greedy length limit for validation; default per utterance when `None`.
    pub val_max_len: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 2e-4,
            decay_per_epoch: 0.99,
            batch_size: 16,
            teacher_forcing_rate: 0.4,
            dropout: 0.4,
            max_epochs: 200,
            patience: 10,
            seed: 0,
            clip_norm: 5.0,
            val_max_len: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(m.into()));
        if !self.learning_rate.is_finite() || self.learning_rate < 0.0 {
            return bad("learning_rate must be finite and non-negative");
        }
        if !(self.decay_per_epoch > 0.0 && self.decay_per_epoch <= 1.0) {
            return bad("decay_per_epoch must be in (0, 1]");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1");
        }
        if !(0.0..=1.0).contains(&self.teacher_forcing_rate) {
            return bad("teacher_forcing_rate must be in [0, 1]");
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad("dropout must be in [0, 1)");
        }
        if self.clip_norm.is_nan() || self.clip_norm <= 0.0 {
            return bad("clip_norm must be positive");
        }
        Ok(())
    }

    /// `learning_rate · decay^epoch`, epochs counted from 0.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        self.learning_rate * self.decay_per_epoch.powi(epoch as i32)
    }
}

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const EPSILON: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<T> {
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
    pub step: u64,
}

impl<T: Real> AdamState<T> {
    pub fn new(params: &ParamStore<T>) -> Self {
        let zeros: Vec<_> = params
            .tensors()
            .iter()
            .map(|t| Tensor::zeros(t.shape().to_vec()))
            .collect();
        Self {
            m: zeros.clone(),
            v: zeros,
            step: 0,
        }
    }
}

/// One bias-corrected Adam update. Rejects non-finite gradients without
/// touching the parameters or the state.
pub fn adam_step<T: Real>(
    params: &mut ParamStore<T>,
    grads: &[Tensor<T>],
    state: &mut AdamState<T>,
    lr: f64,
) -> Result<()> {
    if grads.len() != params.len() {
        return Err(Error::Shape {
            op: "adam",
            lhs: alloc::vec![params.len()],
            rhs: alloc::vec![grads.len()],
        });
    }
    if !grads.iter().all(Tensor::is_finite) {
        return Err(Error::NonFiniteGradient(Vec::new()));
    }
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - BETA1.powi(t);
    let c2 = 1.0 - BETA2.powi(t);
    let (b1, b2) = (T::from_f64(BETA1), T::from_f64(BETA2));
    let (one, eps) = (T::one(), T::from_f64(EPSILON));
    let step_size = T::from_f64(lr / c1);
    let c2_sqrt = T::from_f64(c2.sqrt());
    for (((p, g), m), v) in params
        .tensors_mut()
        .iter_mut()
        .zip(grads)
        .zip(&mut state.m)
        .zip(&mut state.v)
    {
        for (((p, &g), m), v) in p
            .data_mut()
            .iter_mut()
            .zip(g.data())
            .zip(m.data_mut())
            .zip(v.data_mut())
        {
            *m = b1 * *m + (one - b1) * g;
            *v = b2 * *v + (one - b2) * g * g;
            *p -= step_size * *m / (v.sqrt() / c2_sqrt + eps);
        }
    }
    Ok(())
}

/// Scales `grads` in place so their global L2 norm is at most `max_norm`;
/// returns the norm before scaling.
pub fn clip_global_norm<T: Real>(grads: &mut [Tensor<T>], max_norm: f64) -> f64 {
    let norm = grads
        .iter()
        .flat_map(|g| g.data())
        .map(|v| {
            let v = v.as_f64();
            v * v
        })
        .sum::<f64>()
        .sqrt();
    if norm > max_norm {
        let s = T::from_f64(max_norm / norm);
        for g in grads.iter_mut() {
            g.data_mut().iter_mut().for_each(|v| *v *= s);
        }
    }
    norm
}

/// Sum of per-pair losses and gradients over a batch.
#[derive(Debug, Clone)]
pub struct BatchResult<T> {
    pub loss_sum: f64,
    pub tokens: usize,
    /// Summed, not yet normalized.
    pub grads: Vec<Tensor<T>>,
    /// Pairs whose loss or gradient was not finite.
    pub non_finite: Vec<String>,
}

/// Forward and backward over `pairs`; pair `i` draws its dropout masks and
/// forcing decisions from `seeds[i]`.
pub fn batch_gradients<T: Real, E: Executor>(
    model: &Seq2Seq<T>,
    pairs: &[&TrainingPair],
    seeds: &[u64],
    dropout: f64,
    forcing_rate: f64,
    exec: &E,
) -> Result<BatchResult<T>> {
    let jobs: Vec<(&TrainingPair, u64)> = pairs.iter().copied().zip(seeds.iter().copied()).collect();
    let results = exec.map(&jobs, |_, &(pair, seed)| -> Result<(f64, Vec<Tensor<T>>)> {
        let mut drop_rng = ChaCha8Rng::seed_from_u64(seed);
        let mut force_rng = ChaCha8Rng::seed_from_u64(seed);
        force_rng.set_stream(1);
        let mut d = Dropout {
            rate: dropout,
            rng: &mut drop_rng,
        };
        let mut f = TeacherForcing {
            rate: forcing_rate,
            rng: &mut force_rng,
        };
        let mut tape = model.tape(true);
        let loss = sequence_nll(model, &mut tape, pair, Some(&mut d), Some(&mut f))?;
        let value = tape.scalar(loss).as_f64();
        let grads = tape.backward(loss)?.into_params();
        Ok((value, grads))
    });
    let mut out = BatchResult {
        loss_sum: 0.0,
        tokens: 0,
        grads: model
            .params()
            .tensors()
            .iter()
            .map(|t| Tensor::zeros(t.shape().to_vec()))
            .collect(),
        non_finite: Vec::new(),
    };
    for (r, (pair, _)) in results.into_iter().zip(&jobs) {
        let (loss, grads) = r?;
        out.tokens += pair.target.len();
        out.loss_sum += loss;
        if !loss.is_finite() || !grads.iter().all(Tensor::is_finite) {
            out.non_finite.push(pair.id.clone());
        }
        for (acc, g) in out.grads.iter_mut().zip(&grads) {
            for (a, &b) in acc.data_mut().iter_mut().zip(g.data()) {
                *a += b;
            }
        }
    }
    Ok(out)
}

/// Corpus CER of greedy transcripts against the references, in percent.
pub fn greedy_cer<T: Real, E: Executor>(
    model: &Seq2Seq<T>,
    data: &[Utterance],
    max_len: Option<usize>,
    exec: &E,
) -> Result<f64> {
    let vocab = Vocabulary;
    let scores = exec.map(data, |_, u| -> Result<UtteranceScore> {
        let len = match max_len {
            Some(l) => l,
            None => default_max_len(model.config().encoder_len(u.features.num_frames()).unwrap_or(1)),
        };
        let hyp = greedy_decode(model, &u.features, len)?;
        Ok(UtteranceScore::new(
            u.id(),
            vocab.detokenize(&u.target),
            vocab.detokenize(&hyp.tokens),
        ))
    });
    Ok(EvalReport::new(scores.into_iter().collect::<Result<_>>()?)?.cer())
}

/// One line of the training log.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Optimizer steps taken so far.
    pub step: u64,
    /// Per-token loss over the epoch.
    pub loss: f64,
    pub lr: f64,
    pub val_cer: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StopReason {
    MaxEpochs,
    Patience,
    Diverged,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub stop: StopReason,
    pub epochs: usize,
    pub steps: u64,
    /// Epoch whose parameters were kept.
    pub best_epoch: Option<usize>,
    pub best_val_cer: Option<f64>,
    /// Ids from batches whose update was skipped for non-finite gradients.
    pub rejected: Vec<String>,
}

/// Trains `model` on `pairs`, leaving it holding the parameters with the
/// best validation CER (the last epoch's without validation data).
pub fn train<T: Real, E: Executor>(
    model: &mut Seq2Seq<T>,
    pairs: &[TrainingPair],
    validation: &[Utterance],
    cfg: &TrainConfig,
    exec: &E,
    on_epoch: &mut dyn FnMut(&EpochRecord),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if pairs.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let mut master = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut adam = AdamState::new(model.params());
    let mut best: Option<(ParamStore<T>, usize, Option<f64>)> = None;
    let mut since_best = 0;
    let mut rejected = Vec::new();
    let mut order: Vec<usize> = (0..pairs.len()).collect();
    let mut stop = StopReason::MaxEpochs;
    let mut epochs = 0;

    for epoch in 0..cfg.max_epochs {
        let lr = cfg.lr_at(epoch);
        order.shuffle(&mut master);
        let (mut loss_sum, mut tokens) = (0.0, 0usize);
        let mut diverged = false;
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<&TrainingPair> = chunk.iter().map(|&i| &pairs[i]).collect();
            let seeds: Vec<u64> = batch.iter().map(|_| master.next_u64()).collect();
            let mut r = batch_gradients(model, &batch, &seeds, cfg.dropout, cfg.teacher_forcing_rate, exec)?;
            if r.loss_sum.is_nan() {
                diverged = true;
                break;
            }
            loss_sum += r.loss_sum;
            tokens += r.tokens;
            if !r.non_finite.is_empty() {
                rejected.append(&mut r.non_finite);
                continue;
            }
            let scale = T::from_f64(1.0 / r.tokens as f64);
            for g in &mut r.grads {
                g.data_mut().iter_mut().for_each(|v| *v *= scale);
            }
            clip_global_norm(&mut r.grads, cfg.clip_norm);
            adam_step(model.params_mut(), &r.grads, &mut adam, lr)?;
        }
        if diverged || !model.params().is_finite() {
            stop = StopReason::Diverged;
            break;
        }
        epochs = epoch + 1;

        let val_cer = if validation.is_empty() {
            None
        } else {
            Some(greedy_cer(model, validation, cfg.val_max_len, exec)?)
        };
        on_epoch(&EpochRecord {
            epoch,
            step: adam.step,
            loss: loss_sum / tokens.max(1) as f64,
            lr,
            val_cer,
        });
        let improved = match (&best, val_cer) {
            (None, _) | (_, None) => true,
            (Some((_, _, Some(b))), Some(c)) => c < *b,
            (Some((_, _, None)), Some(_)) => true,
        };
        if improved {
            best = Some((model.params().clone(), epoch, val_cer));
            since_best = 0;
        } else {
            since_best += 1;
            if cfg.patience > 0 && since_best >= cfg.patience {
                stop = StopReason::Patience;
                break;
            }
        }
    }

    let (best_epoch, best_val_cer) = match best {
        Some((params, e, c)) => {
            *model.params_mut() = params;
            (Some(e), c)
        }
        None => (None, None),
    };
    Ok(TrainOutcome {
        stop,
        epochs,
        steps: adam.step,
        best_epoch,
        best_val_cer,
        rejected,
    })
}
