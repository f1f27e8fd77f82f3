//! Finite-difference gradient checks of every training loss on a tiny
//! random model.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use skd_core::decoding::{beam_search, BeamConfig};
use skd_core::distill::{frame_kd_sequence_loss, seq_kd_loss, seq_nll_loss, teacher_distributions, TrainingPair};
use skd_core::features::FeatureSequence;
use skd_core::gradcheck::{analytic_gradients, compare_gradients, Coordinates, GradCheckReport};
use skd_core::model::{ModelConfig, Seq2Seq};
use skd_core::tape::{Tape, Var};
use skd_core::vocab::EOS;

use crate::error::Result;

pub const TOLERANCE: f64 = 1e-4;
pub const EPS: f64 = 1e-3;

/// Encoder 1×8, decoder 1×8, vocabulary of 6.
pub fn tiny_config() -> ModelConfig {
    ModelConfig::tiny(4, 8, 6)
}

#[derive(Debug, Clone)]
pub struct LossCheck {
    pub loss: &'static str,
    pub report: GradCheckReport,
}

fn random_model(seed: u64) -> Result<Seq2Seq<f64>> {
    let mut m = Seq2Seq::new(tiny_config(), seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9);
    for t in m.params_mut().tensors_mut() {
        t.data_mut().iter_mut().for_each(|v| *v = rng.random_range(-0.6..0.6));
    }
    Ok(m)
}

/// Checks frame-level KD, sequence NLL and sequence-level KD for `seed`.
/// With `corrupt` the analytic gradients are perturbed before comparison.
pub fn gradcheck_suite(seed: u64, corrupt: bool) -> Result<Vec<LossCheck>> {
    let student = random_model(seed)?;
    let teacher = random_model(seed.wrapping_add(1_000_003))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let frames = 5;
    let data = (0..frames * 4).map(|_| rng.random_range(-1.0f32..1.0)).collect();
    let x = Arc::new(FeatureSequence::new("g", frames, 4, data)?);
    let mut target: Vec<usize> = (0..3)
        .map(|_| {
            let t = rng.random_range(0..5);
            if t >= EOS { t + 1 } else { t }
        })
        .collect();
    target.push(EOS);
    let reference = TrainingPair::new(x.clone(), target.clone());
    let q = teacher_distributions(&teacher, &x, &target)?;
    let hyp = beam_search(&teacher, &x, &BeamConfig::new(3, 1, 6)?)?;
    let pseudo = TrainingPair::new(x.clone(), hyp.hypotheses[0].tokens.clone());

    type LossFn<'s> = Box<dyn for<'a> Fn(&mut Tape<'a, f64>) -> skd_core::Result<Var> + 's>;
    let losses: Vec<(&'static str, LossFn<'_>)> = vec![
        (
            "frame-kd",
            Box::new(|tape: &mut Tape<'_, f64>| frame_kd_sequence_loss(&student, tape, &x, &target, &q)),
        ),
        ("seq-nll", Box::new(|tape: &mut Tape<'_, f64>| seq_nll_loss(&student, tape, &reference))),
        ("seq-kd", Box::new(|tape: &mut Tape<'_, f64>| seq_kd_loss(&student, tape, &pseudo))),
    ];
    let mut out = Vec::new();
    for (name, loss) in &losses {
        let mut analytic = analytic_gradients(student.params(), loss)?;
        if corrupt {
            let g = &mut analytic[0].data_mut()[0];
            *g = *g * 1.5 + 0.01;
        }
        let report = compare_gradients(student.params(), &analytic, EPS, Coordinates::All, loss)?;
        out.push(LossCheck { loss: name, report });
    }
    Ok(out)
}
