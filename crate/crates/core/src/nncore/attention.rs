//! Single-head scaled dot-product attention with an additive logit bias.
//!
//! The bias is added before the softmax. A `-inf` entry removes the key from
//! the query's receptive field and yields exactly zero weight.

use super::mat::Mat;
use super::tape::softmax_rows_masked;
use crate::error::{shape_err, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct AttentionResult {
    /// n_q × d_v
    pub outputs: Mat,
    /// n_q × n_k, rows sum to one
    pub weights: Mat,
}

pub fn biased_attention(q: &Mat, k: &Mat, v: &Mat, bias: &Mat) -> Result<AttentionResult> {
    if q.cols() != k.cols() {
        return Err(shape_err("biased_attention keys", q.cols(), k.cols()));
    }
    if k.rows() != v.rows() {
        return Err(shape_err("biased_attention values", k.rows(), v.rows()));
    }
    if bias.shape() != (q.rows(), k.rows()) {
        return Err(shape_err("biased_attention bias", (q.rows(), k.rows()), bias.shape()));
    }
    let scale = 1.0 / (q.cols() as f64).sqrt();
    let weights = softmax_rows_masked(q, k, Some(bias), scale)?;
    let outputs = weights.matmul(v);
    Ok(AttentionResult { outputs, weights })
}

/// Attention without any bias.
pub fn attention(q: &Mat, k: &Mat, v: &Mat) -> Result<AttentionResult> {
    biased_attention(q, k, v, &Mat::zeros(q.rows(), k.rows()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::error::Error;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn unit_case() -> (Mat, Mat, Mat) {
        let q = Mat::from_rows(&[vec![1.0, 0.0]]);
        let k = Mat::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]);
        (q, k.clone(), k)
    }

    #[test]
    fn neg_inf_bias_forces_zero_weight() {
        let (q, k, v) = unit_case();
        let r = biased_attention(&q, &k, &v, &Mat::from_rows(&[vec![0.0, f64::NEG_INFINITY]])).unwrap();
        assert_eq!(r.weights.as_slice(), &[1.0, 0.0]);
        assert_eq!(r.outputs.as_slice(), &[1.0, 0.0]);
    }

    #[test]
    fn half_bias_matches_hand_softmax() {
        // logits: 1/sqrt(2) + 0.5 = 1.2071..., and 0
        let (q, k, v) = unit_case();
        let r = biased_attention(&q, &k, &v, &Mat::from_rows(&[vec![0.5, 0.0]])).unwrap();
        let l0: f64 = 0.5f64.sqrt() + 0.5;
        assert!((l0 - 1.2071).abs() < 1e-4);
        let w0 = l0.exp() / (l0.exp() + 1.0);
        assert!((r.weights[(0, 0)] - w0).abs() < 1e-15);
        assert!((r.weights[(0, 1)] - (1.0 - w0)).abs() < 1e-15);
        assert!((w0 - 0.769_786_627_016_937_7).abs() < 1e-12);
    }

    #[test]
    fn zero_bias_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let q = Mat::randn(3, 4, 1.0, &mut rng);
        let k = Mat::randn(5, 4, 1.0, &mut rng);
        let v = Mat::randn(5, 2, 1.0, &mut rng);
        let a = biased_attention(&q, &k, &v, &Mat::zeros(3, 5)).unwrap();
        // independent unbiased softmax
        let logits = q.matmul_nt(&k).map(|x| x / 2.0);
        for r in 0..3 {
            let z: f64 = logits.row(r).iter().map(|x| x.exp()).sum();
            for c in 0..5 {
                assert!((a.weights[(r, c)] - logits[(r, c)].exp() / z).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn errors() {
        let (q, k, v) = unit_case();
        let all = Mat::filled(1, 2, f64::NEG_INFINITY);
        assert!(matches!(biased_attention(&q, &k, &v, &all), Err(Error::AllMaskedRow { .. })));
        assert!(matches!(biased_attention(&q, &k, &v, &Mat::zeros(2, 2)), Err(Error::ShapeMismatch { .. })));
    }
}
