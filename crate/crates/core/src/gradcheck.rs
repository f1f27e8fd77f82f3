//! Central finite-difference checks of tape gradients.

use alloc::string::String;
use alloc::vec::Vec;

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::params::ParamStore;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Which parameter coordinates to perturb.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Coordinates {
    All,
    /// At most `per_tensor` coordinates of each tensor, drawn with `seed`.
    Sample { per_tensor: usize, seed: u64 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// Parameter name and flat index of the worst coordinate.
    pub worst: Option<(String, usize)>,
    pub checked: usize,
}

/// `|a − b| / max(|a|, |b|, 1e-8)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let denom = analytic.abs().max(numeric.abs()).max(1e-8);
    (analytic - numeric).abs() / denom
}

/// Gradient of `loss` with respect to every parameter of `store`.
pub fn analytic_gradients<F>(store: &ParamStore<f64>, loss: &F) -> Result<Vec<Tensor<f64>>>
where
    F: for<'a> Fn(&mut Tape<'a, f64>) -> Result<Var>,
{
    let mut tape = Tape::with_params(store, true);
    let l = loss(&mut tape)?;
    Ok(tape.backward(l)?.into_params())
}

fn evaluate<F>(store: &ParamStore<f64>, loss: &F) -> Result<f64>
where
    F: for<'a> Fn(&mut Tape<'a, f64>) -> Result<Var>,
{
    let mut tape = Tape::with_params(store, false);
    let l = loss(&mut tape)?;
    Ok(tape.scalar(l))
}

/// Compares `analytic` against five-point central differences of `loss`
/// with step `eps` and returns the worst relative error over the chosen
/// coordinates. The fourth-order stencil lets `eps` stay large enough that
/// roundoff does not swamp gradients near 1e-7.
pub fn compare_gradients<F>(
    store: &ParamStore<f64>,
    analytic: &[Tensor<f64>],
    eps: f64,
    coords: Coordinates,
    loss: &F,
) -> Result<GradCheckReport>
where
    F: for<'a> Fn(&mut Tape<'a, f64>) -> Result<Var>,
{
    let mut work = store.clone();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: None,
        checked: 0,
    };
    let mut rng = match coords {
        Coordinates::Sample { seed, .. } => Some(ChaCha8Rng::seed_from_u64(seed)),
        Coordinates::All => None,
    };
    for (pi, (id, name, tensor)) in store.iter().enumerate() {
        let n = tensor.len();
        let picks: Vec<usize> = match (coords, rng.as_mut()) {
            (Coordinates::Sample { per_tensor, .. }, Some(rng)) if per_tensor < n => {
                let mut v = index::sample(rng, n, per_tensor).into_vec();
                v.sort_unstable();
                v
            }
            _ => (0..n).collect(),
        };
        for j in picks {
            let orig = tensor.data()[j];
            let mut at = |k: f64| {
                work.get_mut(id).data_mut()[j] = orig + k * eps;
                evaluate(&work, loss)
            };
            let (p1, m1, p2, m2) = (at(1.0)?, at(-1.0)?, at(2.0)?, at(-2.0)?);
            work.get_mut(id).data_mut()[j] = orig;
            let numeric = (8.0 * (p1 - m1) - (p2 - m2)) / (12.0 * eps);
            let err = relative_error(analytic[pi].data()[j], numeric);
            report.checked += 1;
            if report.worst.is_none() || err > report.max_rel_error {
                report.max_rel_error = err;
                report.worst = Some((name.into(), j));
            }
        }
    }
    Ok(report)
}

/// Analytic gradients from the tape checked against central differences.
pub fn finite_difference_check<F>(
    store: &ParamStore<f64>,
    eps: f64,
    coords: Coordinates,
    loss: F,
) -> Result<GradCheckReport>
where
    F: for<'a> Fn(&mut Tape<'a, f64>) -> Result<Var>,
{
    let analytic = analytic_gradients(store, &loss)?;
    compare_gradients(store, &analytic, eps, coords, &loss)
}
