//! Greedy, k-best beam and exhaustive search.
//!
//! Scores are unnormalized sums of per-step token log-probabilities. Every
//! search ranks by score descending and breaks ties by lexicographic token
//! order, so results are fully deterministic. `max_len` counts the eos
//! position: a step that reaches it may only emit eos.

use alloc::vec;
use alloc::vec::Vec;
use core::cmp::Ordering;

use crate::error::{Error, Result};
use crate::features::FeatureSequence;
use crate::model::{IncrementalDecoder, OwnedState, Seq2Seq};
use crate::tensor::Real;
use crate::vocab::{EOS, SOS};

/// Largest number of candidate sequences [`exhaustive_search`] will score.
pub const EXHAUSTIVE_LIMIT: u128 = 1_000_000;

/// A completed output sequence with its model log-probability.
#[derive(Debug, Clone, PartialEq)]
pub struct Hypothesis {
    /// Ends in eos, which occurs nowhere else.
    pub tokens: Vec<usize>,
    pub log_prob: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BeamConfig {
    pub beam_size: usize,
    pub top_k: usize,
    pub max_len: usize,
}

impl BeamConfig {
    pub fn new(beam_size: usize, top_k: usize, max_len: usize) -> Result<Self> {
        let cfg = Self {
            beam_size,
            top_k,
            max_len,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.beam_size == 0 || self.top_k == 0 || self.max_len == 0 {
            return Err(Error::InvalidConfig(
                "beam_size, top_k and max_len must be at least 1".into(),
            ));
        }
        if self.top_k > self.beam_size {
            return Err(Error::InvalidConfig(alloc::format!(
                "top_k {} exceeds beam_size {}",
                self.top_k,
                self.beam_size
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BeamOutput {
    /// At most `top_k`, best first.
    pub hypotheses: Vec<Hypothesis>,
    /// How many of `hypotheses` had eos forced at `max_len`.
    pub forced: usize,
}

/// `min(2·S' + 10, 400)` for an encoder output of length S'.
pub fn default_max_len(encoder_len: usize) -> usize {
    (2 * encoder_len + 10).min(400)
}

fn rank(a_score: f64, a_tokens: &[usize], b_score: f64, b_tokens: &[usize]) -> Ordering {
    b_score.total_cmp(&a_score).then_with(|| a_tokens.cmp(b_tokens))
}

fn sort_hypotheses(list: &mut [Hypothesis]) {
    list.sort_by(|a, b| rank(a.log_prob, &a.tokens, b.log_prob, &b.tokens));
}

/// Emits the argmax token at every step (lowest id on ties).
pub fn greedy_decode<T: Real>(
    model: &Seq2Seq<T>,
    x: &FeatureSequence,
    max_len: usize,
) -> Result<Hypothesis> {
    if max_len == 0 {
        return Err(Error::InvalidConfig("max_len must be at least 1".into()));
    }
    let mut dec = IncrementalDecoder::new(model, x)?;
    let mut state = dec.initial_state();
    let mut prev = SOS;
    let mut score = T::zero();
    let mut tokens = Vec::new();
    for step in 1..=max_len {
        let (lp, next) = dec.step(&state, prev)?;
        let tok = if step == max_len {
            EOS
        } else {
            crate::tensor::argmax(&lp)
        };
        score = if tokens.is_empty() { lp[tok] } else { score + lp[tok] };
        tokens.push(tok);
        if tok == EOS {
            break;
        }
        state = next;
        prev = tok;
    }
    Ok(Hypothesis {
        tokens,
        log_prob: score.as_f64(),
    })
}

struct Live<T> {
    tokens: Vec<usize>,
    score: T,
    state: OwnedState<T>,
}

struct Done<T> {
    tokens: Vec<usize>,
    score: T,
    forced: bool,
}

/// Breadth-first k-best beam search.
///
/// Each step expands every live entry over the whole vocabulary and keeps
/// the `beam_size` best candidates; those ending in eos move to the
/// completed pool. The search stops once the pool holds `top_k` entries and
/// no live entry scores at least the k-th completed one, when nothing is
/// live, or at `max_len`, where survivors are completed with eos.
pub fn beam_search<T: Real>(
    model: &Seq2Seq<T>,
    x: &FeatureSequence,
    cfg: &BeamConfig,
) -> Result<BeamOutput> {
    cfg.validate()?;
    let mut dec = IncrementalDecoder::new(model, x)?;
    let mut live = vec![Live {
        tokens: Vec::new(),
        score: T::zero(),
        state: dec.initial_state(),
    }];
    let mut done: Vec<Done<T>> = Vec::new();

    for step in 1..=cfg.max_len {
        let last = step == cfg.max_len;
        let mut cands: Vec<(T, usize, usize)> = Vec::new();
        let mut next_states = Vec::with_capacity(live.len());
        for (i, entry) in live.iter().enumerate() {
            let prev = entry.tokens.last().copied().unwrap_or(SOS);
            let (lp, next) = dec.step(&entry.state, prev)?;
            let extend = |tok: usize| {
                if entry.tokens.is_empty() {
                    lp[tok]
                } else {
                    entry.score + lp[tok]
                }
            };
            if last {
                cands.push((extend(EOS), i, EOS));
            } else {
                cands.extend((0..lp.len()).map(|tok| (extend(tok), i, tok)));
            }
            next_states.push(next);
        }
        cands.sort_by(|a, b| {
            b.0.as_f64()
                .total_cmp(&a.0.as_f64())
                .then_with(|| live[a.1].tokens.cmp(&live[b.1].tokens))
                .then_with(|| a.2.cmp(&b.2))
        });
        cands.truncate(cfg.beam_size);

        let mut survivors = Vec::new();
        for (score, parent, tok) in cands {
            let mut tokens = live[parent].tokens.clone();
            tokens.push(tok);
            if tok == EOS {
                done.push(Done {
                    tokens,
                    score,
                    forced: last,
                });
            } else {
                survivors.push(Live {
                    tokens,
                    score,
                    state: next_states[parent].clone(),
                });
            }
        }
        live = survivors;
        if live.is_empty() {
            break;
        }
        if done.len() >= cfg.top_k {
            done.sort_by(|a, b| rank(a.score.as_f64(), &a.tokens, b.score.as_f64(), &b.tokens));
            let kth = done[cfg.top_k - 1].score;
            let best_live = live.iter().map(|l| l.score).fold(T::neg_infinity(), T::max);
            if best_live < kth {
                break;
            }
        }
    }

    done.sort_by(|a, b| rank(a.score.as_f64(), &a.tokens, b.score.as_f64(), &b.tokens));
    done.truncate(cfg.top_k);
    let forced = done.iter().filter(|d| d.forced).count();
    Ok(BeamOutput {
        hypotheses: done
            .into_iter()
            .map(|d| Hypothesis {
                tokens: d.tokens,
                log_prob: d.score.as_f64(),
            })
            .collect(),
        forced,
    })
}

/// Number of eos-terminated sequences of length at most `max_len`.
pub fn exhaustive_paths(vocab_size: usize, max_len: usize) -> u128 {
    let branch = vocab_size.saturating_sub(1) as u128;
    let mut total: u128 = 0;
    let mut level: u128 = 1;
    for _ in 0..max_len {
        total = total.saturating_add(level);
        level = level.saturating_mul(branch);
    }
    total
}

/// Scores every eos-terminated sequence of length at most `max_len` with
/// [`Seq2Seq::sequence_log_prob`] and returns the global top-k.
pub fn exhaustive_search<T: Real>(
    model: &Seq2Seq<T>,
    x: &FeatureSequence,
    max_len: usize,
    top_k: usize,
) -> Result<Vec<Hypothesis>> {
    let paths = exhaustive_paths(model.config().vocab_size, max_len);
    if paths > EXHAUSTIVE_LIMIT {
        return Err(Error::SearchSpaceTooLarge {
            paths,
            limit: EXHAUSTIVE_LIMIT,
        });
    }
    let vocab = model.config().vocab_size;
    let mut tape = model.tape(false);
    let mark = tape.len();
    let mut all = Vec::with_capacity(paths as usize);
    let mut prefix: Vec<usize> = Vec::new();
    // Odometer over non-eos tokens, one length at a time.
    for len in 0..max_len {
        prefix.clear();
        prefix.resize(len, 0);
        for p in prefix.iter_mut() {
            *p = next_non_eos(0, vocab).expect("vocab has a non-eos token");
        }
        loop {
            let mut y = prefix.clone();
            y.push(EOS);
            let lp = model.sequence_log_prob(&mut tape, x, &y)?;
            all.push(Hypothesis {
                tokens: y,
                log_prob: tape.scalar(lp).as_f64(),
            });
            tape.truncate(mark);
            if !advance(&mut prefix, vocab) {
                break;
            }
        }
    }
    sort_hypotheses(&mut all);
    all.truncate(top_k);
    Ok(all)
}

fn next_non_eos(from: usize, vocab: usize) -> Option<usize> {
    (from..vocab).find(|&t| t != EOS)
}

fn advance(prefix: &mut [usize], vocab: usize) -> bool {
    for i in (0..prefix.len()).rev() {
        if let Some(t) = next_non_eos(prefix[i] + 1, vocab) {
            prefix[i] = t;
            return true;
        }
        prefix[i] = next_non_eos(0, vocab).expect("vocab has a non-eos token");
    }
    false
}
