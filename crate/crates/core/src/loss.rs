//! Softmax cross-entropy with log-sum-exp stabilization.
//!
//! The exp-sum is accumulated in sorted order, so the loss is exactly
//! invariant under a joint permutation of the logits and the label.

use crate::error::{Error, Result};
use crate::tensor::{sorted_sum, Label, Tensor};

fn log_sum_exp(logits: &[f64]) -> f64 {
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut terms: Vec<f64> = logits.iter().map(|&z| (z - m).exp()).collect();
    m + sorted_sum(&mut terms).ln()
}

/// `-log softmax(logits)[y]`; always >= 0.
pub fn cross_entropy(logits: &Tensor, y: Label) -> Result<f64> {
    let k = logits.len();
    if logits.shape().len() != 1 || k < 2 {
        return Err(Error::Shape {
            expected: "logit vector with K >= 2".into(),
            got: format!("{:?}", logits.shape()),
        });
    }
    y.validate(k)?;
    logits.check_finite("loss input")?;
    Ok(log_sum_exp(logits.data()) - logits.data()[y.0])
}

/// Gradient of [`cross_entropy`] with respect to the logits:
/// `softmax(logits) - onehot(y)`.
pub fn cross_entropy_grad(logits: &Tensor, y: Label) -> Result<Tensor> {
    let k = logits.len();
    y.validate(k)?;
    logits.check_finite("loss input")?;
    let lse = log_sum_exp(logits.data());
    let mut grad = logits.map(|z| (z - lse).exp());
    grad.data_mut()[y.0] -= 1.0;
    Ok(grad)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn uniform_two_class_loss_is_ln2() {
        let logits = Tensor::from_vec(&[2], vec![0.0, 0.0]).unwrap();
        for y in 0..2 {
            let l = cross_entropy(&logits, Label(y)).unwrap();
            assert!((l - 2.0_f64.ln()).abs() < 1e-15);
        }
    }

    #[test]
    fn saturated_case_is_stable() {
        let logits = Tensor::from_vec(&[2], vec![1000.0, 0.0]).unwrap();
        let l = cross_entropy(&logits, Label(0)).unwrap();
        assert!(l.abs() < 1e-9, "loss {l} should be ~0");
    }

    #[test]
    fn matches_direct_formula() {
        // -log(e^2 / (e^1 + e^2 + e^3))
        let logits = Tensor::from_vec(&[3], vec![1.0, 2.0, 3.0]).unwrap();
        let expected = -((2.0_f64.exp()) / (1.0_f64.exp() + 2.0_f64.exp() + 3.0_f64.exp())).ln();
        let l = cross_entropy(&logits, Label(1)).unwrap();
        assert!((l - expected).abs() < 1e-12);
    }

    #[test]
    fn permutation_covariant_exactly() {
        let logits = Tensor::from_vec(&[4], vec![0.3, -1.2, 2.7, 0.05]).unwrap();
        let perm = [2usize, 0, 3, 1];
        let permuted =
            Tensor::from_vec(&[4], perm.iter().map(|&i| logits.data()[i]).collect()).unwrap();
        // label 3 lands at permuted position 2
        let a = cross_entropy(&logits, Label(3)).unwrap();
        let b = cross_entropy(&permuted, Label(2)).unwrap();
        assert_eq!(a.to_bits(), b.to_bits());
    }

    #[test]
    fn grad_sums_to_zero() {
        let logits = Tensor::from_vec(&[3], vec![0.5, -0.3, 1.1]).unwrap();
        let g = cross_entropy_grad(&logits, Label(2)).unwrap();
        assert!(g.data().iter().sum::<f64>().abs() < 1e-15);
    }

    #[test]
    fn rejects_single_class() {
        let logits = Tensor::from_vec(&[1], vec![0.0]).unwrap();
        assert!(cross_entropy(&logits, Label(0)).is_err());
    }
}
