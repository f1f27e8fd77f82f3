//! Distillation losses and the pseudo-label pipeline.
//!
//! Sequence-level distillation trains the student on the teacher's k-best
//! beam hypotheses exactly as if they were reference transcripts, so
//! [`seq_kd_loss`] and [`seq_nll_loss`] share one implementation and the
//! distillation lives entirely in the data produced by
//! [`generate_pseudo_labels`] and [`expand_dataset`].

use alloc::collections::BTreeMap;
use alloc::string::String;
use alloc::sync::Arc;
use alloc::vec::Vec;

use crate::decoding::{beam_search, default_max_len, BeamConfig, Hypothesis};
use crate::error::{Error, Result};
use crate::exec::Executor;
use crate::features::FeatureSequence;
use crate::model::{Dropout, Seq2Seq, TeacherForcing};
use crate::tape::{Tape, Var};
use crate::tensor::{Real, Tensor};
use crate::vocab::TokenSequence;

/// An utterance with its reference transcript.
#[derive(Debug, Clone, PartialEq)]
pub struct Utterance {
    pub features: Arc<FeatureSequence>,
    /// Eos-terminated.
    pub target: TokenSequence,
}

impl Utterance {
    pub fn id(&self) -> &str {
        &self.features.id
    }
}

/// One training example: features and an eos-terminated target.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingPair {
    pub id: String,
    pub features: Arc<FeatureSequence>,
    pub target: TokenSequence,
    pub weight: f64,
}

impl TrainingPair {
    pub fn new(features: Arc<FeatureSequence>, target: TokenSequence) -> Self {
        Self {
            id: features.id.clone(),
            features,
            target,
            weight: 1.0,
        }
    }
}

impl From<&Utterance> for TrainingPair {
    fn from(u: &Utterance) -> Self {
        Self::new(u.features.clone(), u.target.clone())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Provenance {
    /// Digest of the teacher checkpoint.
    pub teacher: String,
    pub beam_size: usize,
    pub top_k: usize,
    /// `None` when each utterance used the default for its encoder length.
    pub max_len: Option<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PseudoLabelEntry {
    pub id: String,
    /// Best first, at most `top_k`.
    pub hypotheses: Vec<Hypothesis>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PseudoLabelSet {
    pub entries: Vec<PseudoLabelEntry>,
    pub provenance: Provenance,
}

impl PseudoLabelSet {
    /// Ids of utterances whose search returned nothing.
    pub fn empty_ids(&self) -> Vec<&str> {
        self.entries
            .iter()
            .filter(|e| e.hypotheses.is_empty())
            .map(|e| e.id.as_str())
            .collect()
    }

    pub fn hypothesis_count(&self) -> usize {
        self.entries.iter().map(|e| e.hypotheses.len()).sum()
    }
}

/// Runs k-best beam search with the teacher over every utterance.
pub fn generate_pseudo_labels<T: Real, E: Executor>(
    teacher: &Seq2Seq<T>,
    data: &[Utterance],
    beam_size: usize,
    top_k: usize,
    max_len: Option<usize>,
    teacher_digest: &str,
    exec: &E,
) -> Result<PseudoLabelSet> {
    BeamConfig::new(beam_size, top_k, max_len.unwrap_or(1))?;
    let results = exec.map(data, |_, u| {
        let len = match max_len {
            Some(l) => l,
            None => {
                let s = teacher
                    .config()
                    .encoder_len(u.features.num_frames())
                    .unwrap_or(1);
                default_max_len(s)
            }
        };
        let cfg = BeamConfig {
            beam_size,
            top_k,
            max_len: len,
        };
        beam_search(teacher, &u.features, &cfg).map(|out| PseudoLabelEntry {
            id: u.id().into(),
            hypotheses: out.hypotheses,
        })
    });
    Ok(PseudoLabelSet {
        entries: results.into_iter().collect::<Result<_>>()?,
        provenance: Provenance {
            teacher: teacher_digest.into(),
            beam_size,
            top_k,
            max_len,
        },
    })
}

/// One pair per (utterance, hypothesis) in utterance order then rank.
/// Returns the pairs and the number of utterances skipped for lack of
/// hypotheses.
pub fn expand_dataset(data: &[Utterance], labels: &PseudoLabelSet) -> Result<(Vec<TrainingPair>, usize)> {
    let mut by_id: BTreeMap<&str, &PseudoLabelEntry> = BTreeMap::new();
    for e in &labels.entries {
        by_id.insert(e.id.as_str(), e);
    }
    let known: BTreeMap<&str, ()> = data.iter().map(|u| (u.id(), ())).collect();
    let unmatched: Vec<String> = labels
        .entries
        .iter()
        .filter(|e| !e.hypotheses.is_empty() && !known.contains_key(e.id.as_str()))
        .map(|e| e.id.clone())
        .collect();
    if !unmatched.is_empty() {
        return Err(Error::UnmatchedIds(unmatched));
    }
    let mut pairs = Vec::new();
    let mut skipped = 0;
    for u in data {
        match by_id.get(u.id()) {
            Some(e) if !e.hypotheses.is_empty() => {
                pairs.extend(
                    e.hypotheses
                        .iter()
                        .map(|h| TrainingPair::new(u.features.clone(), h.tokens.clone())),
                );
            }
            _ => skipped += 1,
        }
    }
    Ok((pairs, skipped))
}

/// `−weight · log p(target | x)`, optionally with dropout and scheduled
/// teacher forcing.
pub fn sequence_nll<T: Real>(
    model: &Seq2Seq<T>,
    tape: &mut Tape<'_, T>,
    pair: &TrainingPair,
    dropout: Option<&mut Dropout<'_>>,
    forcing: Option<&mut TeacherForcing<'_>>,
) -> Result<Var> {
    if pair.weight.is_nan() || pair.weight <= 0.0 {
        return Err(Error::InvalidConfig("pair weight must be positive".into()));
    }
    let lp = model.sequence_log_prob_with(tape, &pair.features, &pair.target, dropout, forcing)?;
    Ok(tape.affine(lp, T::from_f64(-pair.weight), T::zero()))
}

/// Negative log-likelihood of the reference transcript.
pub fn seq_nll_loss<T: Real>(model: &Seq2Seq<T>, tape: &mut Tape<'_, T>, pair: &TrainingPair) -> Result<Var> {
    sequence_nll(model, tape, pair, None, None)
}

/// `−log p(ŷ | x)` for a teacher hypothesis ŷ held in `pair.target`.
pub fn seq_kd_loss<T: Real>(model: &Seq2Seq<T>, tape: &mut Tape<'_, T>, pair: &TrainingPair) -> Result<Var> {
    sequence_nll(model, tape, pair, None, None)
}

/// `−Σ_k q_k · log p_k` for one step. `student_log_dist` is `[1, V]`.
pub fn frame_kd_loss<T: Real>(tape: &mut Tape<'_, T>, student_log_dist: Var, teacher_dist: &[T]) -> Result<Var> {
    let total: f64 = teacher_dist.iter().map(|q| q.as_f64()).sum();
    if teacher_dist.iter().any(|q| q.is_nan() || q.as_f64() < 0.0) || (total - 1.0).abs() > 1e-6 {
        return Err(Error::NotNormalized(total));
    }
    let q = tape.constant(Tensor::new(tape.shape(student_log_dist).to_vec(), teacher_dist.to_vec())?);
    let prod = tape.mul(q, student_log_dist)?;
    let sum = tape.sum_all(prod);
    Ok(tape.neg(sum))
}

/// Teacher's per-step distributions along `target`, teacher forced.
pub fn teacher_distributions<T: Real>(
    teacher: &Seq2Seq<T>,
    features: &FeatureSequence,
    target: &[usize],
) -> Result<Vec<Vec<T>>> {
    let mut tape = teacher.tape(false);
    let steps = teacher.step_log_probs(&mut tape, features, target)?;
    Ok(steps
        .iter()
        .map(|&s| tape.value(s).data().iter().map(|v| v.exp()).collect())
        .collect())
}

/// Frame-level distillation summed over the steps of `target`, with both
/// models teacher forced on it.
pub fn frame_kd_sequence_loss<T: Real>(
    student: &Seq2Seq<T>,
    tape: &mut Tape<'_, T>,
    features: &FeatureSequence,
    target: &[usize],
    teacher_dists: &[Vec<T>],
) -> Result<Var> {
    if teacher_dists.len() != target.len() {
        return Err(Error::Shape {
            op: "frame_kd",
            lhs: alloc::vec![teacher_dists.len()],
            rhs: alloc::vec![target.len()],
        });
    }
    let steps = student.step_log_probs(tape, features, target)?;
    let mut total: Option<Var> = None;
    for (&s, q) in steps.iter().zip(teacher_dists) {
        let l = frame_kd_loss(tape, s, q)?;
        total = Some(match total {
            Some(acc) => tape.add(acc, l)?,
            None => l,
        });
    }
    Ok(total.expect("non-empty target"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::exec::Sequential;
    use crate::model::ModelConfig;
    use crate::vocab::{EOS, VOCAB_SIZE};
    use alloc::vec;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn model(seed: u64, vocab: usize) -> Seq2Seq<f64> {
        let mut m = Seq2Seq::new(ModelConfig::tiny(3, 4, vocab), seed).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for t in m.params_mut().tensors_mut() {
            t.data_mut().iter_mut().for_each(|v| *v = rng.random_range(-1.0..1.0));
        }
        m
    }

    fn utterance(id: &str, seed: u64) -> Utterance {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..12).map(|_| rng.random_range(-1.0f32..1.0)).collect();
        Utterance {
            features: Arc::new(FeatureSequence::new(id, 4, 3, data).unwrap()),
            target: vec![2, 3, EOS],
        }
    }

    fn labels(n: usize, k: usize, empty: &[usize]) -> PseudoLabelSet {
        PseudoLabelSet {
            entries: (0..n)
                .map(|i| PseudoLabelEntry {
                    id: alloc::format!("u{i}"),
                    hypotheses: if empty.contains(&i) {
                        vec![]
                    } else {
                        (0..k)
                            .map(|r| Hypothesis {
                                tokens: vec![2 + r, EOS],
                                log_prob: -(r as f64),
                            })
                            .collect()
                    },
                })
                .collect(),
            provenance: Provenance {
                teacher: "x".into(),
                beam_size: k,
                top_k: k,
                max_len: None,
            },
        }
    }

    fn data(n: usize) -> Vec<Utterance> {
        (0..n).map(|i| utterance(&alloc::format!("u{i}"), i as u64)).collect()
    }

    #[test]
    fn expansion_multiplies_by_k() {
        let (pairs, skipped) = expand_dataset(&data(10), &labels(10, 5, &[])).unwrap();
        assert_eq!((pairs.len(), skipped), (50, 0));
        assert_eq!(pairs[0].id, "u0");
        assert_eq!(pairs[1].target, [3, EOS]);
        assert_eq!(pairs[5].id, "u1");
        let (pairs, _) = expand_dataset(&data(10), &labels(10, 1, &[])).unwrap();
        assert_eq!(pairs.len(), 10);
    }

    #[test]
    fn empty_entries_are_skipped_and_counted() {
        let l = labels(10, 5, &[4]);
        assert_eq!(l.empty_ids(), ["u4"]);
        let (pairs, skipped) = expand_dataset(&data(10), &l).unwrap();
        assert_eq!((pairs.len(), skipped), (45, 1));
    }

    #[test]
    fn unknown_label_ids_are_listed() {
        let mut l = labels(3, 1, &[]);
        l.entries[1].id = "zz".into();
        match expand_dataset(&data(3), &l) {
            Err(Error::UnmatchedIds(ids)) => assert_eq!(ids, ["zz"]),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn top_one_labels_are_greedy_like_best() {
        let m = model(4, 5);
        let d = data(3);
        let set = generate_pseudo_labels(&m, &d, 3, 1, Some(4), "abc", &Sequential).unwrap();
        for (u, e) in d.iter().zip(&set.entries) {
            let best = crate::decoding::exhaustive_search(&m, &u.features, 4, 1).unwrap();
            assert_eq!(e.hypotheses.len(), 1);
            assert!(e.hypotheses[0].log_prob <= best[0].log_prob);
        }
        assert_eq!(set.provenance.teacher, "abc");
    }

    #[test]
    fn saturated_labels_equal_exhaustive_top_k() {
        let m = model(5, 4);
        let d = data(2);
        let set = generate_pseudo_labels(&m, &d, 40, 5, Some(3), "", &Sequential).unwrap();
        for (u, e) in d.iter().zip(&set.entries) {
            assert_eq!(e.hypotheses, crate::decoding::exhaustive_search(&m, &u.features, 3, 5).unwrap());
        }
    }

    #[test]
    fn kd_loss_is_negative_log_prob() {
        let m = model(6, 6);
        let u = utterance("a", 6);
        let pair = TrainingPair::new(u.features.clone(), vec![4, 2, 5, EOS]);
        let mut tape = m.tape(true);
        let kd = seq_kd_loss(&m, &mut tape, &pair).unwrap();
        let lp = m.sequence_log_prob(&mut tape, &u.features, &pair.target).unwrap();
        assert_eq!(tape.scalar(kd), -tape.scalar(lp));
        let nll = seq_nll_loss(&m, &mut tape, &pair).unwrap();
        let (g1, g2) = (tape.backward(kd).unwrap(), tape.backward(nll).unwrap());
        assert_eq!(g1.params(), g2.params());
    }

    #[test]
    fn uniform_model_loss_is_length_times_log_v() {
        let mut m = Seq2Seq::<f64>::new(ModelConfig::tiny(3, 4, VOCAB_SIZE), 1).unwrap();
        m.params_mut().by_name_mut("output.weight").unwrap().data_mut().iter_mut().for_each(|v| *v = 0.0);
        let u = utterance("a", 1);
        let pair = TrainingPair::new(u.features, vec![7, 8, 2, 9, EOS]);
        let mut tape = m.tape(false);
        let l = seq_nll_loss(&m, &mut tape, &pair).unwrap();
        assert!((tape.scalar(l) - 5.0 * 31f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn frame_kd_reductions() {
        let mut tape = Tape::<f64>::new();
        let logits = tape.constant(Tensor::row(vec![0.3, -1.0, 2.0, 0.5]));
        let lp = tape.log_softmax(logits);
        let lpv = tape.value(lp).data().to_vec();

        let one_hot = [0.0, 0.0, 1.0, 0.0];
        let l = frame_kd_loss(&mut tape, lp, &one_hot).unwrap();
        assert_eq!(tape.scalar(l), -lpv[2]);

        let p: Vec<f64> = lpv.iter().map(|v| v.exp()).collect();
        let l = frame_kd_loss(&mut tape, lp, &p).unwrap();
        let entropy: f64 = -p.iter().map(|q| q * q.ln()).sum::<f64>();
        assert!((tape.scalar(l) - entropy).abs() < 1e-12);

        let uniform = [0.25; 4];
        let l = frame_kd_loss(&mut tape, lp, &uniform).unwrap();
        assert!((tape.scalar(l) + lpv.iter().sum::<f64>() / 4.0).abs() < 1e-12);

        assert!(matches!(
            frame_kd_loss(&mut tape, lp, &[0.5, 0.5, 0.5, 0.0]),
            Err(Error::NotNormalized(_))
        ));
        assert!(frame_kd_loss(&mut tape, lp, &[1.5, -0.5, 0.0, 0.0]).is_err());
    }

    #[test]
    fn frame_kd_with_one_hot_teacher_is_nll() {
        let m = model(8, 6);
        let u = utterance("a", 8);
        let target = vec![3, 3, 5, EOS];
        let one_hot: Vec<Vec<f64>> = target
            .iter()
            .map(|&t| (0..6).map(|k| if k == t { 1.0 } else { 0.0 }).collect())
            .collect();
        let mut tape = m.tape(false);
        let f = frame_kd_sequence_loss(&m, &mut tape, &u.features, &target, &one_hot).unwrap();
        let n = seq_nll_loss(&m, &mut tape, &TrainingPair::new(u.features.clone(), target)).unwrap();
        assert!((tape.scalar(f) - tape.scalar(n)).abs() < 1e-12);
    }

    #[test]
    fn non_positive_weight_is_rejected() {
        let m = model(8, 6);
        let mut pair = TrainingPair::from(&utterance("a", 1));
        pair.weight = 0.0;
        let mut tape = m.tape(false);
        assert!(seq_nll_loss(&m, &mut tape, &pair).is_err());
    }
}
