use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use skd_core::decoding::{beam_search, exhaustive_paths, exhaustive_search, BeamConfig};
use skd_core::distill::{seq_kd_loss, seq_nll_loss, TrainingPair};
use skd_core::features::FeatureSequence;
use skd_core::gradcheck::analytic_gradients;
use skd_core::model::{ModelConfig, Seq2Seq};
use std::sync::Arc;

fn model(seed: u64, vocab: usize, scale: f64) -> Seq2Seq<f64> {
    let mut m = Seq2Seq::new(ModelConfig::tiny(3, 4, vocab), seed).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for t in m.params_mut().tensors_mut() {
        t.data_mut().iter_mut().for_each(|v| *v = rng.random_range(-scale..scale));
    }
    m
}

fn features(seed: u64) -> FeatureSequence {
    let mut rng = ChaCha8Rng::seed_from_u64(seed + 99);
    let data = (0..12).map(|_| rng.random_range(-1.0f32..1.0)).collect();
    FeatureSequence::new("x", 4, 3, data).unwrap()
}

fn log_prob(m: &Seq2Seq<f64>, x: &FeatureSequence, y: &[usize]) -> f64 {
    let mut tape = m.tape(false);
    let v = m.sequence_log_prob(&mut tape, x, y).unwrap();
    tape.scalar(v)
}

fn best(m: &Seq2Seq<f64>, x: &FeatureSequence, beam: usize, max_len: usize) -> f64 {
    beam_search(m, x, &BeamConfig::new(beam, 1, max_len).unwrap()).unwrap().hypotheses[0].log_prob
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn hypotheses_rescore_to_their_log_prob(seed in 0u64..10_000, beam in 1usize..6, k in 1usize..6) {
        let k = k.min(beam);
        let m = model(seed, 6, 1.5);
        let x = features(seed);
        for h in beam_search(&m, &x, &BeamConfig::new(beam, k, 7).unwrap()).unwrap().hypotheses {
            prop_assert!((h.log_prob - log_prob(&m, &x, &h.tokens)).abs() <= 1e-6);
        }
    }

    #[test]
    fn saturated_beam_matches_exhaustive_search(seed in 0u64..10_000) {
        let n = exhaustive_paths(4, 4) as usize;
        let m = model(seed, 4, 1.5);
        let x = features(seed);
        let beam = beam_search(&m, &x, &BeamConfig::new(n, n, 4).unwrap()).unwrap().hypotheses;
        prop_assert_eq!(beam, exhaustive_search(&m, &x, 4, n).unwrap());
    }

    /// Whatever the width, the best beam score is bounded by the optimum
    /// and reaches it once the beam holds every path.
    #[test]
    fn beam_best_is_bounded_by_the_optimum(seed in 0u64..10_000) {
        let n = exhaustive_paths(5, 4) as usize;
        let m = model(seed, 5, 2.0);
        let x = features(seed);
        let optimum = exhaustive_search(&m, &x, 4, 1).unwrap()[0].log_prob;
        for b in 1..8 {
            prop_assert!(best(&m, &x, b, 4) <= optimum);
        }
        prop_assert_eq!(best(&m, &x, n, 4), optimum);
    }

    #[test]
    fn kd_and_nll_share_values_and_gradients(seed in 0u64..10_000, len in 0usize..5) {
        let m = model(seed, 6, 0.8);
        let x = Arc::new(features(seed));
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut y: Vec<usize> = (0..len).map(|_| [0, 2, 3, 4, 5][rng.random_range(0..5)]).collect();
        y.push(1);
        let pair = TrainingPair::new(x, y);
        let kd = analytic_gradients(m.params(), &|t: &mut _| seq_kd_loss(&m, t, &pair)).unwrap();
        let nll = analytic_gradients(m.params(), &|t: &mut _| seq_nll_loss(&m, t, &pair)).unwrap();
        prop_assert_eq!(kd, nll);
        let mut tape = m.tape(false);
        let a = seq_kd_loss(&m, &mut tape, &pair).unwrap();
        let b = seq_nll_loss(&m, &mut tape, &pair).unwrap();
        prop_assert_eq!(tape.scalar(a), tape.scalar(b));
    }
}

/// Widening the beam can lower the best score: with beam 1 the greedy path
/// survives, with beam 2 a locally better prefix crowds it out.
#[test]
fn wider_beam_can_lower_the_best_score() {
    let m = model(130, 6, 2.0);
    let x = features(130);
    let (one, two) = (best(&m, &x, 1, 6), best(&m, &x, 2, 6));
    assert!(two < one, "beam 1 {one}, beam 2 {two}");
}

/// Sequence-level KD against a teacher over its full (length-bounded)
/// support, approximated by the teacher's k best hypotheses.
#[test]
fn weighted_k_best_approximation_improves_with_k() {
    let (vocab, len) = (4, 5);
    let n = exhaustive_paths(vocab, len) as usize;
    for seed in 0..10 {
        let teacher = model(1000 + seed, vocab, 1.5);
        let student = model(2000 + seed, vocab, 1.5);
        let x = features(seed);
        let support = exhaustive_search(&teacher, &x, len, n).unwrap();
        let term = |tokens: &[usize], lq: f64| -lq.exp() * log_prob(&student, &x, tokens);
        let exact: f64 = support.iter().map(|h| term(&h.tokens, h.log_prob)).sum();
        let mut prev = f64::INFINITY;
        for k in [1, 2, 3, 5, 10, 20, 40, n] {
            let hyps = beam_search(&teacher, &x, &BeamConfig::new(n, k, len).unwrap()).unwrap().hypotheses;
            let approx: f64 = hyps.iter().map(|h| term(&h.tokens, h.log_prob)).sum();
            let err = (exact - approx).abs();
            assert!(err <= prev + 1e-12, "seed {seed} k {k}: {err} > {prev}");
            prev = err;
        }
        assert!(prev <= 1e-9 * exact.abs().max(1.0));
    }
}
