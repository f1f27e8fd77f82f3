use super::*;
use crate::vocab::VOCAB_SIZE;
use alloc::vec::Vec;
use rand::Rng;

fn randomize(model: &mut Seq2Seq<f64>, seed: u64, scale: f64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for t in model.params_mut().tensors_mut() {
        for v in t.data_mut() {
            *v = rng.random_range(-scale..scale);
        }
    }
}

fn features(frames: usize, dim: usize, seed: u64) -> FeatureSequence {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = (0..frames * dim).map(|_| rng.random_range(-1.0f32..1.0)).collect();
    FeatureSequence::new("u", frames, dim, data).unwrap()
}

fn tiny(seed: u64, vocab: usize) -> Seq2Seq<f64> {
    let mut m = Seq2Seq::new(ModelConfig::tiny(3, 4, vocab), seed).unwrap();
    randomize(&mut m, seed, 0.8);
    m
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Gate equations evaluated one scalar at a time.
fn gru_reference(x: &[f64], h: &[f64], w_ih: &Tensor<f64>, b_ih: &[f64], w_hh: &Tensor<f64>, b_hh: &[f64]) -> Vec<f64> {
    let n = h.len();
    let lin = |input: &[f64], w: &Tensor<f64>, b: &[f64], j: usize| {
        b[j] + input.iter().enumerate().map(|(i, &v)| v * w.get2(i, j)).sum::<f64>()
    };
    (0..n)
        .map(|j| {
            let r = sigmoid(lin(x, w_ih, b_ih, j) + lin(h, w_hh, b_hh, j));
            let z = sigmoid(lin(x, w_ih, b_ih, n + j) + lin(h, w_hh, b_hh, n + j));
            let c = (lin(x, w_ih, b_ih, 2 * n + j) + r * lin(h, w_hh, b_hh, 2 * n + j)).tanh();
            (1.0 - z) * c + z * h[j]
        })
        .collect()
}

#[test]
fn zero_cell_halves_a_unit_state() {
    let mut m = Seq2Seq::<f64>::new(ModelConfig::tiny(3, 4, 6), 0).unwrap();
    for t in m.params_mut().tensors_mut() {
        t.data_mut().iter_mut().for_each(|v| *v = 0.0);
    }
    let mut tape = m.tape(false);
    let x = tape.constant(Tensor::zeros([1, 12]));
    let ones = tape.constant(Tensor::full([1, 4], 1.0));
    let h = m.decoder_cell(&mut tape, 0, x, ones).unwrap();
    assert!(tape.value(h).data().iter().all(|&v| v == 0.5));
    let zeros = tape.constant(Tensor::zeros([1, 4]));
    let h = m.decoder_cell(&mut tape, 0, x, zeros).unwrap();
    assert!(tape.value(h).data().iter().all(|&v| v == 0.0));
}

#[test]
fn gru_cell_matches_scalar_gate_equations() {
    let m = tiny(3, 6);
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let x: Vec<f64> = (0..12).map(|_| rng.random_range(-1.0..1.0)).collect();
    let h: Vec<f64> = (0..4).map(|_| rng.random_range(-1.0..1.0)).collect();
    let p = m.params();
    let expected = gru_reference(
        &x,
        &h,
        p.by_name("decoder.l0.w_ih").unwrap(),
        p.by_name("decoder.l0.b_ih").unwrap().data(),
        p.by_name("decoder.l0.w_hh").unwrap(),
        p.by_name("decoder.l0.b_hh").unwrap().data(),
    );
    let mut tape = m.tape(false);
    let xv = tape.constant(Tensor::row(x));
    let hv = tape.constant(Tensor::row(h));
    let out = m.decoder_cell(&mut tape, 0, xv, hv).unwrap();
    for (a, b) in tape.value(out).data().iter().zip(&expected) {
        assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        assert!(a.abs() < 1.0);
    }
}

#[test]
fn bidirectional_encoder_is_mirror_symmetric() {
    let m = tiny(5, 6);
    let mut mirrored = m.params().clone();
    for suffix in ["w_ih", "b_ih", "w_hh", "b_hh"] {
        let f = m.params().by_name(&format!("encoder.l0.fwd.{suffix}")).unwrap().clone();
        let b = m.params().by_name(&format!("encoder.l0.bwd.{suffix}")).unwrap().clone();
        *mirrored.by_name_mut(&format!("encoder.l0.fwd.{suffix}")).unwrap() = b;
        *mirrored.by_name_mut(&format!("encoder.l0.bwd.{suffix}")).unwrap() = f;
    }
    let mirror = Seq2Seq::from_params(m.config().clone(), mirrored).unwrap();

    let x = features(6, 3, 1);
    let reversed: Vec<f32> = (0..6).rev().flat_map(|t| x.frame(t).to_vec()).collect();
    let xr = FeatureSequence::new("r", 6, 3, reversed).unwrap();

    let mut t1 = m.tape(false);
    let e1 = m.encode(&mut t1, &x, None).unwrap();
    let mut t2 = mirror.tape(false);
    let e2 = mirror.encode(&mut t2, &xr, None).unwrap();
    let (a, b) = (t1.value(e1.states), t2.value(e2.states));
    for s in 0..6 {
        for j in 0..4 {
            assert!((a.get2(s, j) - b.get2(5 - s, 4 + j)).abs() < 1e-12);
            assert!((a.get2(s, 4 + j) - b.get2(5 - s, j)).abs() < 1e-12);
        }
    }
}

#[test]
fn single_frame_gives_single_state() {
    let m = tiny(1, 6);
    let mut tape = m.tape(false);
    let enc = m.encode(&mut tape, &features(1, 3, 0), None).unwrap();
    assert_eq!(enc.len(), 1);
    let q = tape.constant(Tensor::full([1, 4], 0.3));
    let prev = tape.constant(Tensor::full([1, 1], 1.0));
    let att = m.attend(&mut tape, &enc, q, Some(prev)).unwrap();
    assert_eq!(tape.value(att.weights).data(), &[1.0]);
    assert_eq!(tape.value(att.context).data(), tape.value(enc.states).data());
}

fn variants() -> Vec<ModelConfig> {
    let mut out = Vec::new();
    for v in [AttentionVariant::Dot, AttentionVariant::Bilinear, AttentionVariant::Mlp, AttentionVariant::ConvMlp] {
        let mut c = ModelConfig::tiny(3, 3, 6);
        c.decoder_cells = 6;
        c.attention_dim = 5;
        c.attention = v;
        out.push(c);
    }
    out
}

#[test]
fn attention_weights_normalize_and_context_is_weighted_sum() {
    for (i, config) in variants().into_iter().enumerate() {
        let mut m = Seq2Seq::<f64>::new(config, i as u64).unwrap();
        randomize(&mut m, 40 + i as u64, 0.9);
        let mut tape = m.tape(false);
        let enc = m.encode(&mut tape, &features(3, 3, 7), None).unwrap();
        let q = tape.constant(Tensor::row((0..6).map(|j| 0.2 * j as f64 - 0.5).collect()));
        let prev = tape.constant(Tensor::row(alloc::vec![0.2, 0.5, 0.3]));
        let att = m.attend(&mut tape, &enc, q, Some(prev)).unwrap();
        let w = tape.value(att.weights).data().to_vec();
        assert!(w.iter().all(|&a| a >= 0.0));
        assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        let h = tape.value(enc.states);
        let ctx = tape.value(att.context).data();
        for (j, &c) in ctx.iter().enumerate() {
            let expect: f64 = (0..3).map(|s| w[s] * h.get2(s, j)).sum();
            assert!((c - expect).abs() < 1e-9);
        }
    }
}

#[test]
fn batched_scores_match_pairwise_score() {
    for (i, config) in variants().into_iter().take(3).enumerate() {
        let mut m = Seq2Seq::<f64>::new(config, i as u64).unwrap();
        randomize(&mut m, 60 + i as u64, 0.9);
        let mut tape = m.tape(false);
        let enc = m.encode(&mut tape, &features(4, 3, 8), None).unwrap();
        let hd: Vec<f64> = (0..6).map(|j| 0.3 - 0.1 * j as f64).collect();
        let q = tape.constant(Tensor::row(hd.clone()));
        let scores = m.scores(&mut tape, &enc, q, None).unwrap();
        let h = tape.value(enc.states).clone();
        for s in 0..4 {
            let row: Vec<f64> = (0..6).map(|j| h.get2(s, j)).collect();
            let expect = m.score(&row, &hd).unwrap();
            assert!((tape.value(scores).data()[s] - expect).abs() < 1e-12);
        }
    }
}

#[test]
fn equal_scores_give_uniform_weights() {
    let mut m = Seq2Seq::<f64>::new(variants().remove(2), 1).unwrap();
    m.params_mut().by_name_mut("attention.v").unwrap().data_mut().iter_mut().for_each(|v| *v = 0.0);
    let mut tape = m.tape(false);
    let enc = m.encode(&mut tape, &features(5, 3, 2), None).unwrap();
    let q = tape.constant(Tensor::full([1, 6], 0.1));
    let att = m.attend(&mut tape, &enc, q, None).unwrap();
    assert!(tape.value(att.weights).data().iter().all(|&w| (w - 0.2).abs() < 1e-15));
}

#[test]
fn location_attention_needs_previous_weights() {
    let m = tiny(2, 6);
    let mut tape = m.tape(false);
    let enc = m.encode(&mut tape, &features(3, 3, 2), None).unwrap();
    let q = tape.constant(Tensor::zeros([1, 4]));
    assert!(matches!(m.attend(&mut tape, &enc, q, None), Err(Error::MissingPreviousWeights)));
}

#[test]
fn zero_output_projection_is_uniform_over_vocabulary() {
    let mut m = Seq2Seq::<f64>::new(ModelConfig::tiny(3, 4, VOCAB_SIZE), 4).unwrap();
    m.params_mut().by_name_mut("output.weight").unwrap().data_mut().iter_mut().for_each(|v| *v = 0.0);
    let mut tape = m.tape(false);
    let enc = m.encode(&mut tape, &features(4, 3, 3), None).unwrap();
    let st = m.initial_state(&mut tape, &enc);
    let out = m.decode_step(&mut tape, &enc, &st, SOS, None).unwrap();
    for &lp in tape.value(out.log_probs).data() {
        assert!((lp.exp() - 1.0 / 31.0).abs() < 1e-15);
    }
}

#[test]
fn decode_step_normalizes_and_is_deterministic() {
    let m = tiny(8, 6);
    let x = features(4, 3, 5);
    let run = || {
        let mut tape = m.tape(false);
        let enc = m.encode(&mut tape, &x, None).unwrap();
        let st = m.initial_state(&mut tape, &enc);
        let out = m.decode_step(&mut tape, &enc, &st, 3, None).unwrap();
        tape.value(out.log_probs).data().to_vec()
    };
    let a = run();
    assert!((a.iter().map(|v| v.exp()).sum::<f64>() - 1.0).abs() < 1e-12);
    assert_eq!(a, run());
}

#[test]
fn out_of_range_previous_token_is_rejected() {
    let m = tiny(8, 6);
    let mut tape = m.tape(false);
    let enc = m.encode(&mut tape, &features(4, 3, 5), None).unwrap();
    let st = m.initial_state(&mut tape, &enc);
    assert!(matches!(
        m.decode_step(&mut tape, &enc, &st, 6, None),
        Err(Error::TokenOutOfRange { id: 6, vocab: 6 })
    ));
}

#[test]
fn sequence_log_prob_of_eos_is_first_step_eos() {
    let m = tiny(9, 6);
    let x = features(5, 3, 9);
    let mut tape = m.tape(false);
    let lp = m.sequence_log_prob(&mut tape, &x, &[EOS]).unwrap();
    let steps = m.step_log_probs(&mut tape, &x, &[EOS]).unwrap();
    assert_eq!(tape.scalar(lp), tape.value(steps[0]).data()[EOS]);
}

#[test]
fn sequence_log_prob_decomposes_into_step_terms() {
    let m = tiny(10, 6);
    let x = features(5, 3, 10);
    let y = [3, 0, 5, 2, EOS];
    let mut tape = m.tape(false);
    let lp = m.sequence_log_prob(&mut tape, &x, &y).unwrap();
    let lp = tape.scalar(lp);
    let steps = m.step_log_probs(&mut tape, &x, &y).unwrap();
    let sum: f64 = steps.iter().zip(&y).map(|(&s, &t)| tape.value(s).data()[t]).sum();
    assert!((lp - sum).abs() < 1e-12);
    assert!(lp <= 0.0);
}

#[test]
fn malformed_targets_are_rejected() {
    let m = tiny(10, 6);
    let x = features(5, 3, 10);
    let mut tape = m.tape(false);
    assert!(matches!(m.sequence_log_prob(&mut tape, &x, &[]), Err(Error::EmptyTarget)));
    assert!(matches!(m.sequence_log_prob(&mut tape, &x, &[2, 3]), Err(Error::MissingEos)));
    assert!(matches!(m.sequence_log_prob(&mut tape, &x, &[EOS, 2, EOS]), Err(Error::MissingEos)));
    assert!(matches!(
        m.sequence_log_prob(&mut tape, &x, &[9, EOS]),
        Err(Error::TokenOutOfRange { .. })
    ));
}

#[test]
fn changing_an_early_token_changes_later_terms() {
    let m = tiny(11, 6);
    let x = features(5, 3, 11);
    let mut tape = m.tape(false);
    let a = m.step_log_probs(&mut tape, &x, &[2, 3, 4, EOS]).unwrap();
    let b = m.step_log_probs(&mut tape, &x, &[5, 3, 4, EOS]).unwrap();
    assert_eq!(tape.value(a[0]).data(), tape.value(b[0]).data());
    for t in 1..4 {
        assert_ne!(tape.value(a[t]).data(), tape.value(b[t]).data());
    }
}

/// Sum over every sequence of length ≤ `bound`, where the prefixes still
/// open at the bound contribute their prefix mass.
fn bounded_mass(m: &Seq2Seq<f64>, x: &FeatureSequence, prefix: &mut Vec<usize>, bound: usize) -> f64 {
    let mut tape = m.tape(false);
    let mut y = prefix.clone();
    y.push(EOS);
    let steps = m.step_log_probs(&mut tape, x, &y).unwrap();
    let prefix_lp: f64 = steps.iter().zip(prefix.iter()).map(|(&s, &t)| tape.value(s).data()[t]).sum();
    if prefix.len() + 1 == bound {
        return prefix_lp.exp();
    }
    let mut total = (prefix_lp + tape.value(steps[prefix.len()]).data()[EOS]).exp();
    for tok in 0..m.config().vocab_size {
        if tok != EOS {
            prefix.push(tok);
            total += bounded_mass(m, x, prefix, bound);
            prefix.pop();
        }
    }
    total
}

#[test]
fn sequence_distribution_normalizes_under_a_length_bound() {
    for seed in 0..3 {
        let m = tiny(20 + seed, 4);
        let x = features(3, 3, seed);
        let mass = bounded_mass(&m, &x, &mut Vec::new(), 3);
        assert!((mass - 1.0).abs() < 1e-12, "{mass}");
    }
}

#[test]
fn incremental_decoder_matches_teacher_forced_steps() {
    let m = tiny(12, 6);
    let x = features(5, 3, 12);
    let y = [4, 2, 5, EOS];
    let mut tape = m.tape(false);
    let steps = m.step_log_probs(&mut tape, &x, &y).unwrap();
    let mut inc = IncrementalDecoder::new(&m, &x).unwrap();
    let mut state = inc.initial_state();
    let mut prev = SOS;
    for (t, &tok) in y.iter().enumerate() {
        let (lp, next) = inc.step(&state, prev).unwrap();
        assert_eq!(lp.as_slice(), tape.value(steps[t]).data());
        state = next;
        prev = tok;
    }
}

#[test]
fn conv_frontend_output_matches_size_formula() {
    let mut c = ModelConfig::tiny(30, 3, 6);
    c.frontend = Frontend::Conv2d(ConvFrontend { layers: 1, filters: 2, ..ConvFrontend::default() });
    let m = Seq2Seq::<f64>::new(c.clone(), 0).unwrap();
    let mut tape = m.tape(false);
    let x = tape.constant(features(11, 30, 0).to_tensor());
    let y = m.frontend(&mut tape, x).unwrap();
    let Frontend::Conv2d(f) = c.frontend else { unreachable!() };
    let (s, w) = f.output_size(11, 30).unwrap();
    assert_eq!(tape.shape(y), &[s, w]);
    assert_eq!((s, w), (4, 24));
    assert!(tape.value(y).data().iter().all(|&v| v >= 0.0));
}

#[test]
fn conv_frontend_rejects_short_input() {
    let mut c = ModelConfig::tiny(30, 3, 6);
    c.frontend = Frontend::Conv2d(ConvFrontend { layers: 1, filters: 2, ..ConvFrontend::default() });
    let m = Seq2Seq::<f64>::new(c, 0).unwrap();
    let mut tape = m.tape(false);
    assert!(matches!(
        m.encode(&mut tape, &features(4, 30, 0), None),
        Err(Error::InputTooShort { got_frames: 4, .. })
    ));
}

#[test]
fn from_params_rejects_mismatched_store() {
    let m = tiny(0, 6);
    let other = Seq2Seq::<f64>::new(ModelConfig::tiny(3, 5, 6), 0).unwrap();
    assert!(Seq2Seq::from_params(m.config().clone(), other.into_params()).is_err());
}

#[test]
fn parameter_count_matches_store() {
    let m = tiny(0, 6);
    assert_eq!(m.params().numel(), m.config().count_parameters());
}
