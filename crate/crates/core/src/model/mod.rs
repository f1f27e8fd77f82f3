//! Attention sequence-to-sequence recognizer.
//!
//! ```text
//! frames ─► conv2d stack ─► bi-GRU × L_enc ─► h_e [S', M]
//!                                              │
//! y_{t-1} ─► embedding ─┐            attention(h_e, h_d_{t-1}, a_{t-1}) ─► a_t, c_t
//!                       └─► [emb, c_t] ─► GRU × L_dec ─► h_d_t
//!                                     [h_d_t, c_t] ─► linear ─► log_softmax
//! ```
//!
//! The decoder is unidirectional so it can run autoregressively, and the
//! decoder state starts at zero with uniform previous attention weights.

mod attention;
mod config;

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub use attention::{score, ScoreWeights};
pub use config::{parse_kv_lines, AttentionVariant, ConvFrontend, Frontend, ModelConfig};

use crate::error::{Error, Result};
use crate::features::FeatureSequence;
use crate::params::{init_tensor, ParamId, ParamStore};
use crate::tape::{Tape, Var};
use crate::tensor::{Real, Tensor};
use crate::vocab::{EOS, SOS};

/// Inverted dropout: kept units are scaled by `1 / (1 − rate)`.
pub struct Dropout<'r> {
    pub rate: f64,
    pub rng: &'r mut dyn RngCore,
}

impl Dropout<'_> {
    fn apply<T: Real>(&mut self, tape: &mut Tape<'_, T>, x: Var) -> Result<Var> {
        if self.rate <= 0.0 {
            return Ok(x);
        }
        let keep = T::from_f64(1.0 / (1.0 - self.rate));
        let mask = (0..tape.value(x).len())
            .map(|_| {
                if self.rng.random::<f64>() < self.rate {
                    T::zero()
                } else {
                    keep
                }
            })
            .collect();
        tape.mask(x, mask)
    }
}

fn maybe_dropout<T: Real>(
    tape: &mut Tape<'_, T>,
    x: Var,
    dropout: &mut Option<&mut Dropout<'_>>,
) -> Result<Var> {
    match dropout {
        Some(d) => d.apply(tape, x),
        None => Ok(x),
    }
}

/// Per-step choice between the reference token and the model's own
/// previous argmax.
pub struct TeacherForcing<'r> {
    pub rate: f64,
    pub rng: &'r mut dyn RngCore,
}

impl TeacherForcing<'_> {
    /// `true` with probability `rate`: condition on the ground truth.
    pub fn use_ground_truth(&mut self) -> bool {
        self.rng.random::<f64>() < self.rate
    }
}

#[derive(Debug, Clone, Copy)]
struct GruIds {
    w_ih: ParamId,
    b_ih: ParamId,
    w_hh: ParamId,
    b_hh: ParamId,
}

#[derive(Debug, Clone, Copy)]
struct LocationIds {
    conv_w: ParamId,
    conv_b: ParamId,
    w_loc: ParamId,
    b_loc: ParamId,
}

#[derive(Debug, Clone, Copy)]
enum AttentionIds {
    Dot,
    Bilinear(ParamId),
    Mlp {
        w_enc: ParamId,
        w_dec: ParamId,
        v: ParamId,
        location: Option<LocationIds>,
    },
}

#[derive(Debug, Clone)]
struct Layout {
    frontend: Vec<(ParamId, ParamId)>,
    encoder: Vec<[GruIds; 2]>,
    attention: AttentionIds,
    embedding: ParamId,
    decoder: Vec<GruIds>,
    out_w: ParamId,
    out_b: ParamId,
}

impl Layout {
    fn resolve<T: Real>(config: &ModelConfig, store: &ParamStore<T>) -> Result<Self> {
        let id = |name: &str| {
            store
                .id(name)
                .ok_or_else(|| Error::UnknownParameter(name.into()))
        };
        let gru = |p: &str| -> Result<GruIds> {
            Ok(GruIds {
                w_ih: id(&format!("{p}.w_ih"))?,
                b_ih: id(&format!("{p}.b_ih"))?,
                w_hh: id(&format!("{p}.w_hh"))?,
                b_hh: id(&format!("{p}.b_hh"))?,
            })
        };
        let frontend = match config.frontend {
            Frontend::None => Vec::new(),
            Frontend::Conv2d(c) => (0..c.layers)
                .map(|l| {
                    Ok((
                        id(&format!("frontend.conv{l}.weight"))?,
                        id(&format!("frontend.conv{l}.bias"))?,
                    ))
                })
                .collect::<Result<_>>()?,
        };
        let encoder = (0..config.encoder_layers)
            .map(|l| {
                Ok([
                    gru(&format!("encoder.l{l}.fwd"))?,
                    gru(&format!("encoder.l{l}.bwd"))?,
                ])
            })
            .collect::<Result<_>>()?;
        let attention = match config.attention {
            AttentionVariant::Dot => AttentionIds::Dot,
            AttentionVariant::Bilinear => AttentionIds::Bilinear(id("attention.w")?),
            AttentionVariant::Mlp | AttentionVariant::ConvMlp => AttentionIds::Mlp {
                w_enc: id("attention.w_enc")?,
                w_dec: id("attention.w_dec")?,
                v: id("attention.v")?,
                location: if config.attention == AttentionVariant::ConvMlp {
                    Some(LocationIds {
                        conv_w: id("attention.conv.weight")?,
                        conv_b: id("attention.conv.bias")?,
                        w_loc: id("attention.w_loc")?,
                        b_loc: id("attention.b_loc")?,
                    })
                } else {
                    None
                },
            },
        };
        let decoder = (0..config.decoder_layers)
            .map(|l| gru(&format!("decoder.l{l}")))
            .collect::<Result<_>>()?;
        Ok(Self {
            frontend,
            encoder,
            attention,
            embedding: id("decoder.embedding")?,
            decoder,
            out_w: id("output.weight")?,
            out_b: id("output.bias")?,
        })
    }
}

/// Encoder output plus whatever the attention variant precomputes from it.
#[derive(Debug, Clone, Copy)]
pub struct Encoded {
    /// `h_e`, shape `[S', M]`.
    pub states: Var,
    keys: Option<Var>,
    len: usize,
}

impl Encoded {
    /// Encoder output length S'.
    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }
}

/// Recurrent decoder state on a tape.
#[derive(Debug, Clone)]
pub struct DecoderState {
    /// One `[1, N]` hidden vector per decoder layer.
    pub hidden: Vec<Var>,
    /// Previous attention weights `[1, S']`.
    pub weights: Var,
}

/// Attention weights `a_t` and context `c_t`.
#[derive(Debug, Clone, Copy)]
pub struct AttentionState {
    pub weights: Var,
    pub context: Var,
}

#[derive(Debug, Clone)]
pub struct StepOutput {
    /// `log p(· | y_<t, c_t)`, shape `[1, V]`.
    pub log_probs: Var,
    pub state: DecoderState,
    pub attention: AttentionState,
}

/// Decoder state detached from any tape.
#[derive(Debug, Clone, PartialEq)]
pub struct OwnedState<T> {
    pub hidden: Vec<Tensor<T>>,
    pub weights: Tensor<T>,
}

#[derive(Debug, Clone)]
pub struct Seq2Seq<T> {
    config: ModelConfig,
    params: ParamStore<T>,
    layout: Layout,
}

impl<T: Real> Seq2Seq<T> {
    /// Fresh parameters: uniform ±1/√fan_in weights, zero biases.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        for (spec, init) in config.parameter_layout() {
            let t = init_tensor(&spec.shape, init, &mut rng);
            params.insert(spec.name, t);
        }
        Self::from_params(config, params)
    }

    /// Wraps existing parameters; names and shapes must match the config.
    pub fn from_params(config: ModelConfig, params: ParamStore<T>) -> Result<Self> {
        config.validate()?;
        let expected = config.parameter_layout();
        if expected.len() != params.len() {
            return Err(Error::InvalidConfig(format!(
                "config implies {} parameter tensors, store has {}",
                expected.len(),
                params.len()
            )));
        }
        for ((spec, _), (_, name, t)) in expected.iter().zip(params.iter()) {
            if spec.name != name || spec.shape != t.shape() {
                return Err(Error::InvalidConfig(format!(
                    "parameter {name} {:?} does not match expected {} {:?}",
                    t.shape(),
                    spec.name,
                    spec.shape
                )));
            }
        }
        let layout = Layout::resolve(&config, &params)?;
        Ok(Self {
            config,
            params,
            layout,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.params
    }

    pub fn into_params(self) -> ParamStore<T> {
        self.params
    }

    pub fn cast<U: Real>(&self) -> Seq2Seq<U> {
        Seq2Seq {
            config: self.config.clone(),
            params: self.params.cast(),
            layout: self.layout.clone(),
        }
    }

    /// A tape reading this model's parameters.
    pub fn tape(&self, requires_grad: bool) -> Tape<'_, T> {
        Tape::with_params(&self.params, requires_grad)
    }

    /// Conv stack over `[S, D]` frames giving `[S', W]`, channels flattened
    /// frequency-major (index `f * filters + c`). Pass-through without a
    /// frontend.
    pub fn frontend(&self, tape: &mut Tape<'_, T>, frames: Var) -> Result<Var> {
        let Frontend::Conv2d(conv) = self.config.frontend else {
            return Ok(frames);
        };
        let shape = tape.shape(frames).to_vec();
        let [s, d] = shape[..] else {
            return Err(Error::Shape {
                op: "frontend",
                lhs: shape,
                rhs: vec![0, self.config.input_dim],
            });
        };
        let (min_s, min_d) = conv.min_input();
        if s < min_s || d < min_d {
            return Err(Error::InputTooShort {
                got_frames: s,
                got_dim: d,
                min_frames: min_s,
                min_dim: min_d,
            });
        }
        let mut x = tape.reshape(frames, &[1, s, d])?;
        for &(w, b) in &self.layout.frontend {
            let (w, b) = (tape.param(w), tape.param(b));
            x = tape.conv2d(x, w, b, conv.stride)?;
            x = tape.relu(x);
        }
        let out = tape.shape(x).to_vec();
        let x = tape.permute(x, &[1, 2, 0])?;
        tape.reshape(x, &[out[1], out[2] * out[0]])
    }

    fn gru_layer(
        &self,
        tape: &mut Tape<'_, T>,
        input: Var,
        ids: GruIds,
        reverse: bool,
    ) -> Result<Var> {
        let (w_ih, b_ih) = (tape.param(ids.w_ih), tape.param(ids.b_ih));
        let (w_hh, b_hh) = (tape.param(ids.w_hh), tape.param(ids.b_hh));
        let proj = tape.matmul(input, w_ih)?;
        let proj = tape.add_row(proj, b_ih)?;
        let steps = tape.shape(proj)[0];
        let hid = tape.shape(w_hh)[0];
        let mut h = tape.constant(Tensor::zeros([1, hid]));
        let mut outs = Vec::with_capacity(steps);
        for i in 0..steps {
            let t = if reverse { steps - 1 - i } else { i };
            let row = tape.slice(proj, 0, t, 1)?;
            h = tape.gru_step(row, h, w_hh, b_hh)?;
            outs.push(h);
        }
        if reverse {
            outs.reverse();
        }
        tape.concat(&outs, 0)
    }

    /// Single GRU cell update on the tape, using decoder layer `layer`'s
    /// weights. `x` is the raw layer input `[1, in]`.
    pub fn decoder_cell(&self, tape: &mut Tape<'_, T>, layer: usize, x: Var, h: Var) -> Result<Var> {
        let ids = self.layout.decoder[layer];
        let (w_ih, b_ih) = (tape.param(ids.w_ih), tape.param(ids.b_ih));
        let (w_hh, b_hh) = (tape.param(ids.w_hh), tape.param(ids.b_hh));
        let proj = tape.matmul(x, w_ih)?;
        let proj = tape.add_row(proj, b_ih)?;
        tape.gru_step(proj, h, w_hh, b_hh)
    }

    /// Runs the frontend and the bidirectional encoder stack over `[S, D]`.
    pub fn encode_frames(
        &self,
        tape: &mut Tape<'_, T>,
        frames: Var,
        mut dropout: Option<&mut Dropout<'_>>,
    ) -> Result<Encoded> {
        if tape.shape(frames).first() == Some(&0) {
            return Err(Error::EmptyEncoder);
        }
        let mut x = self.frontend(tape, frames)?;
        let layers = self.layout.encoder.len();
        for (l, [fwd, bwd]) in self.layout.encoder.clone().into_iter().enumerate() {
            let f = self.gru_layer(tape, x, fwd, false)?;
            let b = self.gru_layer(tape, x, bwd, true)?;
            x = tape.concat(&[f, b], 1)?;
            if l + 1 < layers {
                x = maybe_dropout(tape, x, &mut dropout)?;
            }
        }
        let len = tape.shape(x)[0];
        let keys = match self.layout.attention {
            AttentionIds::Dot => Some(tape.transpose(x)?),
            AttentionIds::Bilinear(w) => {
                let w = tape.param(w);
                let hw = tape.matmul(x, w)?;
                Some(tape.transpose(hw)?)
            }
            AttentionIds::Mlp { w_enc, .. } => {
                let w = tape.param(w_enc);
                Some(tape.matmul(x, w)?)
            }
        };
        Ok(Encoded {
            states: x,
            keys,
            len,
        })
    }

    pub fn encode(
        &self,
        tape: &mut Tape<'_, T>,
        features: &FeatureSequence,
        dropout: Option<&mut Dropout<'_>>,
    ) -> Result<Encoded> {
        if features.dim() != self.config.input_dim {
            return Err(Error::Shape {
                op: "encode",
                lhs: vec![features.num_frames(), features.dim()],
                rhs: vec![0, self.config.input_dim],
            });
        }
        let x = tape.constant(features.to_tensor());
        self.encode_frames(tape, x, dropout)
    }

    /// Zero hidden state and uniform previous weights.
    pub fn initial_state(&self, tape: &mut Tape<'_, T>, enc: &Encoded) -> DecoderState {
        let n = self.config.decoder_cells;
        let hidden = (0..self.config.decoder_layers)
            .map(|_| tape.constant(Tensor::zeros([1, n])))
            .collect();
        let u = T::one() / T::from_f64(enc.len as f64);
        let weights = tape.constant(Tensor::full([1, enc.len], u));
        DecoderState { hidden, weights }
    }

    pub fn initial_owned_state(&self, encoder_len: usize) -> OwnedState<T> {
        let n = self.config.decoder_cells;
        OwnedState {
            hidden: vec![Tensor::zeros([1, n]); self.config.decoder_layers],
            weights: Tensor::full(
                [1, encoder_len],
                T::one() / T::from_f64(encoder_len as f64),
            ),
        }
    }

    /// Raw scores `[1, S']` of every encoder state against `query [1, N]`.
    pub fn scores(
        &self,
        tape: &mut Tape<'_, T>,
        enc: &Encoded,
        query: Var,
        prev_weights: Option<Var>,
    ) -> Result<Var> {
        if enc.len == 0 {
            return Err(Error::EmptyEncoder);
        }
        let keys = enc.keys.ok_or(Error::EmptyEncoder)?;
        match self.layout.attention {
            AttentionIds::Dot | AttentionIds::Bilinear(_) => tape.matmul(query, keys),
            AttentionIds::Mlp {
                w_dec, v, location, ..
            } => {
                let w_dec = tape.param(w_dec);
                let q = tape.matmul(query, w_dec)?;
                let mut pre = keys;
                if let Some(loc) = location {
                    let prev = prev_weights.ok_or(Error::MissingPreviousWeights)?;
                    let (cw, cb) = (tape.param(loc.conv_w), tape.param(loc.conv_b));
                    let pad = self.config.attention_kernel / 2;
                    let f = tape.conv1d(prev, cw, cb, 1, pad)?;
                    let f = tape.transpose(f)?;
                    let (wl, bl) = (tape.param(loc.w_loc), tape.param(loc.b_loc));
                    let f = tape.matmul(f, wl)?;
                    let f = tape.add_row(f, bl)?;
                    pre = tape.add(pre, f)?;
                }
                let pre = tape.add_row(pre, q)?;
                let act = tape.tanh(pre);
                let v = tape.param(v);
                let e = tape.matmul(act, v)?;
                tape.reshape(e, &[1, enc.len])
            }
        }
    }

    /// `a_t = softmax(scores)`, `c_t = Σ_s a_t(s) h_e_s`.
    pub fn attend(
        &self,
        tape: &mut Tape<'_, T>,
        enc: &Encoded,
        query: Var,
        prev_weights: Option<Var>,
    ) -> Result<AttentionState> {
        let scores = self.scores(tape, enc, query, prev_weights)?;
        let weights = tape.softmax(scores);
        let context = tape.matmul(weights, enc.states)?;
        Ok(AttentionState { weights, context })
    }

    /// Per-pair score using this model's weights (reference form).
    pub fn score(&self, h_e: &[T], h_d: &[T]) -> Result<T> {
        let weights = match self.layout.attention {
            AttentionIds::Dot => ScoreWeights::Dot,
            AttentionIds::Bilinear(w) => ScoreWeights::Bilinear(self.params.get(w)),
            AttentionIds::Mlp { w_enc, w_dec, v, .. } => ScoreWeights::Mlp {
                w_enc: self.params.get(w_enc),
                w_dec: self.params.get(w_dec),
                v: self.params.get(v),
            },
        };
        score(weights, h_e, h_d)
    }

    /// One decoder step conditioned on `y_prev`.
    pub fn decode_step(
        &self,
        tape: &mut Tape<'_, T>,
        enc: &Encoded,
        state: &DecoderState,
        y_prev: usize,
        mut dropout: Option<&mut Dropout<'_>>,
    ) -> Result<StepOutput> {
        if y_prev >= self.config.vocab_size {
            return Err(Error::TokenOutOfRange {
                id: y_prev,
                vocab: self.config.vocab_size,
            });
        }
        let top = *state.hidden.last().expect("at least one decoder layer");
        let att = self.attend(tape, enc, top, Some(state.weights))?;
        let table = tape.param(self.layout.embedding);
        let emb = tape.embedding(table, &[y_prev])?;
        let mut input = tape.concat(&[emb, att.context], 1)?;
        let layers = self.layout.decoder.len();
        let mut hidden = Vec::with_capacity(layers);
        for l in 0..layers {
            let h = self.decoder_cell(tape, l, input, state.hidden[l])?;
            hidden.push(h);
            input = if l + 1 < layers {
                maybe_dropout(tape, h, &mut dropout)?
            } else {
                h
            };
        }
        let out_in = tape.concat(&[input, att.context], 1)?;
        let out_in = maybe_dropout(tape, out_in, &mut dropout)?;
        let (w, b) = (tape.param(self.layout.out_w), tape.param(self.layout.out_b));
        let logits = tape.matmul(out_in, w)?;
        let logits = tape.add_row(logits, b)?;
        let log_probs = tape.log_softmax(logits);
        Ok(StepOutput {
            log_probs,
            state: DecoderState {
                hidden,
                weights: att.weights,
            },
            attention: att,
        })
    }

    fn check_target(&self, target: &[usize]) -> Result<()> {
        match target.last() {
            None => return Err(Error::EmptyTarget),
            Some(&t) if t != EOS => return Err(Error::MissingEos),
            _ => {}
        }
        if target[..target.len() - 1].contains(&EOS) {
            return Err(Error::MissingEos);
        }
        if let Some(&bad) = target.iter().find(|&&t| t >= self.config.vocab_size) {
            return Err(Error::TokenOutOfRange {
                id: bad,
                vocab: self.config.vocab_size,
            });
        }
        Ok(())
    }

    /// Teacher-forced per-step log-distributions for `target`.
    pub fn step_log_probs(
        &self,
        tape: &mut Tape<'_, T>,
        features: &FeatureSequence,
        target: &[usize],
    ) -> Result<Vec<Var>> {
        self.check_target(target)?;
        let enc = self.encode(tape, features, None)?;
        let mut state = self.initial_state(tape, &enc);
        let mut prev = SOS;
        let mut out = Vec::with_capacity(target.len());
        for &tok in target {
            let step = self.decode_step(tape, &enc, &state, prev, None)?;
            out.push(step.log_probs);
            state = step.state;
            prev = tok;
        }
        Ok(out)
    }

    /// `log p(y | x) = Σ_t log p(y_t | y_<t, c_t)`, teacher forced.
    pub fn sequence_log_prob(
        &self,
        tape: &mut Tape<'_, T>,
        features: &FeatureSequence,
        target: &[usize],
    ) -> Result<Var> {
        self.sequence_log_prob_with(tape, features, target, None, None)
    }

    /// [`Seq2Seq::sequence_log_prob`] with optional dropout and a teacher
    /// forcing policy. Without a policy every step conditions on the
    /// reference prefix; with one, a step may instead condition on the
    /// previous step's argmax. The scored tokens are always `target`.
    pub fn sequence_log_prob_with(
        &self,
        tape: &mut Tape<'_, T>,
        features: &FeatureSequence,
        target: &[usize],
        mut dropout: Option<&mut Dropout<'_>>,
        mut forcing: Option<&mut TeacherForcing<'_>>,
    ) -> Result<Var> {
        self.check_target(target)?;
        let enc = self.encode(tape, features, dropout.as_deref_mut())?;
        let mut state = self.initial_state(tape, &enc);
        let mut prev = SOS;
        let mut total: Option<Var> = None;
        for (t, &tok) in target.iter().enumerate() {
            let step = self.decode_step(tape, &enc, &state, prev, dropout.as_deref_mut())?;
            let lp = tape.pick(step.log_probs, tok)?;
            total = Some(match total {
                Some(acc) => tape.add(acc, lp)?,
                None => lp,
            });
            state = step.state;
            let own = t + 1 < target.len()
                && forcing
                    .as_deref_mut()
                    .is_some_and(|f| !f.use_ground_truth());
            prev = if own {
                tape.value(step.log_probs).argmax()
            } else {
                tok
            };
        }
        Ok(total.expect("non-empty target"))
    }
}

/// Encodes once and then advances decoder states held outside the tape,
/// for search procedures.
pub struct IncrementalDecoder<'m, T> {
    model: &'m Seq2Seq<T>,
    tape: Tape<'m, T>,
    enc: Encoded,
    mark: usize,
}

impl<'m, T: Real> IncrementalDecoder<'m, T> {
    pub fn new(model: &'m Seq2Seq<T>, features: &FeatureSequence) -> Result<Self> {
        let mut tape = model.tape(false);
        let enc = model.encode(&mut tape, features, None)?;
        let mark = tape.len();
        Ok(Self {
            model,
            tape,
            enc,
            mark,
        })
    }

    pub fn encoder_len(&self) -> usize {
        self.enc.len
    }

    pub fn initial_state(&self) -> OwnedState<T> {
        self.model.initial_owned_state(self.enc.len)
    }

    /// Log-distribution over the vocabulary after `y_prev`, and the next state.
    pub fn step(&mut self, state: &OwnedState<T>, y_prev: usize) -> Result<(Vec<T>, OwnedState<T>)> {
        let tape = &mut self.tape;
        let hidden = state
            .hidden
            .iter()
            .map(|h| tape.constant(h.clone()))
            .collect();
        let weights = tape.constant(state.weights.clone());
        let st = DecoderState { hidden, weights };
        let out = self.model.decode_step(tape, &self.enc, &st, y_prev, None);
        let result = out.map(|o| {
            let lp = tape.value(o.log_probs).data().to_vec();
            let next = OwnedState {
                hidden: o.state.hidden.iter().map(|&h| tape.value(h).clone()).collect(),
                weights: tape.value(o.state.weights).clone(),
            };
            (lp, next)
        });
        tape.truncate(self.mark);
        result
    }
}

#[cfg(test)]
mod tests;
