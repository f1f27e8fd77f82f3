//! Per-pair score functions, evaluated directly on slices.
//!
//! The model computes all scores of a decoder step at once on the tape;
//! these scalar forms are the reference definitions it is tested against.

use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

/// Weights of a score function, borrowed from a parameter store.
#[derive(Debug, Clone, Copy)]
pub enum ScoreWeights<'a, T> {
    Dot,
    /// `W: [M, N]`
    Bilinear(&'a Tensor<T>),
    /// `W_enc: [M, A]`, `W_dec: [N, A]`, `v: [A, 1]`. Stacked, `[W_enc; W_dec]`
    /// is the `W` acting on the concatenation `[h_e, h_d]`.
    Mlp {
        w_enc: &'a Tensor<T>,
        w_dec: &'a Tensor<T>,
        v: &'a Tensor<T>,
    },
}

/// Score(h_e, h_d) for one encoder state and one decoder state.
pub fn score<T: Real>(weights: ScoreWeights<'_, T>, h_e: &[T], h_d: &[T]) -> Result<T> {
    match weights {
        ScoreWeights::Dot => {
            if h_e.len() != h_d.len() {
                return Err(Error::UnequalWidths {
                    encoder: h_e.len(),
                    decoder: h_d.len(),
                });
            }
            Ok(h_e.iter().zip(h_d).map(|(&a, &b)| a * b).sum())
        }
        ScoreWeights::Bilinear(w) => {
            check(w, h_e.len(), h_d.len())?;
            let mut s = T::zero();
            for (i, &a) in h_e.iter().enumerate() {
                for (j, &b) in h_d.iter().enumerate() {
                    s += a * w.get2(i, j) * b;
                }
            }
            Ok(s)
        }
        ScoreWeights::Mlp { w_enc, w_dec, v } => {
            check(w_enc, h_e.len(), v.rows())?;
            check(w_dec, h_d.len(), v.rows())?;
            let joint: Vec<T> = h_e.iter().chain(h_d).copied().collect();
            let mut s = T::zero();
            for k in 0..v.rows() {
                let mut pre = T::zero();
                for (i, &x) in joint.iter().enumerate() {
                    let w = if i < h_e.len() {
                        w_enc.get2(i, k)
                    } else {
                        w_dec.get2(i - h_e.len(), k)
                    };
                    pre += w * x;
                }
                s += v.data()[k] * pre.tanh();
            }
            Ok(s)
        }
    }
}

fn check<T: Real>(w: &Tensor<T>, rows: usize, cols: usize) -> Result<()> {
    if w.shape() != [rows, cols] {
        return Err(Error::Shape {
            op: "score",
            lhs: w.shape().to_vec(),
            rhs: alloc::vec![rows, cols],
        });
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    #[test]
    fn dot_of_orthogonal_vectors_is_zero() {
        assert_eq!(score::<f64>(ScoreWeights::Dot, &[1.0, 0.0], &[0.0, 1.0]).unwrap(), 0.0);
    }

    #[test]
    fn dot_rejects_unequal_widths() {
        assert!(matches!(
            score::<f64>(ScoreWeights::Dot, &[1.0, 0.0], &[0.0]),
            Err(Error::UnequalWidths { .. })
        ));
    }

    #[test]
    fn bilinear_with_identity_is_dot() {
        let eye = Tensor::<f64>::from_rows(&[&[1.0, 0.0, 0.0], &[0.0, 1.0, 0.0], &[0.0, 0.0, 1.0]]);
        let (a, b) = ([0.3, -1.2, 2.0], [1.5, 0.25, -0.75]);
        assert_eq!(
            score(ScoreWeights::Bilinear(&eye), &a, &b).unwrap(),
            score(ScoreWeights::Dot, &a, &b).unwrap()
        );
    }

    #[test]
    fn mlp_with_zero_readout_is_zero() {
        let w_enc = Tensor::<f64>::full([2, 3], 0.7);
        let w_dec = Tensor::<f64>::full([1, 3], -0.2);
        let v = Tensor::<f64>::zeros([3, 1]);
        let s = score(ScoreWeights::Mlp { w_enc: &w_enc, w_dec: &w_dec, v: &v }, &[1.0, 2.0], &[3.0]).unwrap();
        assert_eq!(s, 0.0);
        let v = Tensor::new([3, 1], vec![1.0, 0.0, 0.0]).unwrap();
        let s = score(ScoreWeights::Mlp { w_enc: &w_enc, w_dec: &w_dec, v: &v }, &[1.0, 2.0], &[3.0]).unwrap();
        assert!((s - (0.7f64 * 3.0 - 0.6).tanh()).abs() < 1e-15);
    }
}
