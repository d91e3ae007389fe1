use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Targets for the softmax loss.
#[derive(Clone, Copy, Debug)]
pub enum ClassTargets<'a, T: Scalar> {
    Indices(&'a [usize]),
    /// Row-major `(n, m)` one-hot rows.
    OneHot(&'a [T]),
}

#[derive(Clone, Debug)]
pub struct LossOutput<T: Scalar> {
    pub loss: T,
    /// Softmax probabilities or per-class sigmoid scores, `(n, m)`.
    pub scores: Tensor<T>,
    pub logit_grad: Tensor<T>,
}

fn rows<T: Scalar>(logits: &Tensor<T>) -> (usize, usize) {
    let s = logits.shape();
    (s.n, s.per_sample())
}

/// Mean softmax cross entropy over the batch. Probabilities use
/// max-subtraction; `logit_grad = (prob - onehot) / n`.
pub fn softmax_cross_entropy<T: Scalar>(
    logits: &Tensor<T>,
    targets: ClassTargets<'_, T>,
) -> Result<LossOutput<T>> {
    let (n, m) = rows(logits);
    if m < 2 {
        return Err(Error::InvalidArgument(format!(
            "softmax needs at least 2 classes, got {m}"
        )));
    }
    let onehot: Vec<T> = match targets {
        ClassTargets::Indices(labels) => {
            if labels.len() != n {
                return Err(Error::Shape(format!(
                    "{} labels for a batch of {n}",
                    labels.len()
                )));
            }
            let mut v = vec![T::zero(); n * m];
            for (i, &l) in labels.iter().enumerate() {
                if l >= m {
                    return Err(Error::InvalidArgument(format!(
                        "label {l} at row {i} out of range for {m} classes"
                    )));
                }
                v[i * m + l] = T::one();
            }
            v
        }
        ClassTargets::OneHot(t) => {
            if t.len() != n * m {
                return Err(Error::Shape(format!(
                    "one-hot targets have {} values, expected {}",
                    t.len(),
                    n * m
                )));
            }
            for (i, row) in t.chunks(m).enumerate() {
                let ones = row.iter().filter(|&&v| v == T::one()).count();
                let zeros = row.iter().filter(|&&v| v == T::zero()).count();
                if ones != 1 || zeros != m - 1 {
                    return Err(Error::InvalidArgument(format!("row {i} is not one-hot")));
                }
            }
            t.to_vec()
        }
    };
    let mut prob = vec![T::zero(); n * m];
    let mut grad = vec![T::zero(); n * m];
    let mut total = T::zero();
    let inv_n = T::one() / T::from_f64(n.max(1) as f64);
    for i in 0..n {
        let z = logits.sample(i);
        let max = z.iter().copied().fold(T::neg_infinity(), T::max);
        let sum: T = z.iter().map(|&v| (v - max).exp()).sum();
        let log_sum = sum.ln();
        for j in 0..m {
            let logp = z[j] - max - log_sum;
            let p = logp.exp();
            prob[i * m + j] = p;
            let t = onehot[i * m + j];
            if t != T::zero() {
                total = total - t * logp;
            }
            grad[i * m + j] = (p - t) * inv_n;
        }
    }
    Ok(LossOutput {
        loss: total * inv_n,
        scores: Tensor::matrix(n, m, prob)?,
        logit_grad: Tensor::matrix(n, m, grad)?,
    })
}

/// Independent per-class sigmoid with binary cross entropy, averaged over
/// all `n * m` elements.
pub fn sigmoid_multilabel_loss<T: Scalar>(logits: &Tensor<T>, labels: &[T]) -> Result<LossOutput<T>> {
    let (n, m) = rows(logits);
    if labels.len() != n * m {
        return Err(Error::Shape(format!(
            "{} multi-label targets for ({n}, {m}) logits",
            labels.len()
        )));
    }
    if let Some(i) = labels
        .iter()
        .position(|&y| y != T::zero() && y != T::one())
    {
        return Err(Error::InvalidArgument(format!(
            "multi-label target at position {i} is not 0 or 1"
        )));
    }
    let count = T::from_f64((n * m).max(1) as f64);
    let mut scores = vec![T::zero(); n * m];
    let mut grad = vec![T::zero(); n * m];
    let mut total = T::zero();
    for (i, (&z, &y)) in logits.data().iter().zip(labels).enumerate() {
        let s = if z >= T::zero() {
            T::one() / (T::one() + (-z).exp())
        } else {
            let e = z.exp();
            e / (T::one() + e)
        };
        scores[i] = s;
        // max(z, 0) - z*y + ln(1 + exp(-|z|))
        total = total + z.max(T::zero()) - z * y + (-z.abs()).exp().ln_1p();
        grad[i] = (s - y) / count;
    }
    Ok(LossOutput {
        loss: total / count,
        scores: Tensor::matrix(n, m, scores)?,
        logit_grad: Tensor::matrix(n, m, grad)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn uniform_logits_give_ln_m() {
        let z = Tensor::<f64>::zeros(crate::tensor::Shape::new(3, 7, 1, 1));
        let out = softmax_cross_entropy(&z, ClassTargets::Indices(&[0, 3, 6])).unwrap();
        assert!((out.loss - 7f64.ln()).abs() < 1e-12);
        assert!((out.loss - 1.945910).abs() < 1e-6);
        assert!(out.scores.data().iter().all(|&p| (p - 1.0 / 7.0).abs() < 1e-12));
    }

    #[test]
    fn dominant_correct_logit_has_near_zero_loss() {
        let z = Tensor::matrix(1, 3, vec![50.0f32, 0.0, 0.0]).unwrap();
        let out = softmax_cross_entropy(&z, ClassTargets::Indices(&[0])).unwrap();
        assert!(out.loss.abs() < 1e-6);
    }

    #[test]
    fn onehot_matches_indices() {
        let z = Tensor::matrix(2, 3, vec![0.3f64, -1.0, 2.0, 1.0, 1.5, -0.5]).unwrap();
        let a = softmax_cross_entropy(&z, ClassTargets::Indices(&[2, 0])).unwrap();
        let oh = [0.0, 0.0, 1.0, 1.0, 0.0, 0.0];
        let b = softmax_cross_entropy(&z, ClassTargets::OneHot(&oh)).unwrap();
        assert_eq!(a.loss, b.loss);
        assert_eq!(a.logit_grad, b.logit_grad);
    }

    #[test]
    fn label_out_of_range_rejected() {
        let z = Tensor::<f32>::zeros(crate::tensor::Shape::new(1, 2, 1, 1));
        assert!(softmax_cross_entropy(&z, ClassTargets::Indices(&[2])).is_err());
        let single = Tensor::<f32>::zeros(crate::tensor::Shape::new(1, 1, 1, 1));
        assert!(softmax_cross_entropy(&single, ClassTargets::Indices(&[0])).is_err());
    }

    #[test]
    fn sigmoid_at_zero_is_half() {
        let z = Tensor::<f64>::zeros(crate::tensor::Shape::new(2, 9, 1, 1));
        let y: Vec<f64> = (0..18).map(|i| (i % 2) as f64).collect();
        let out = sigmoid_multilabel_loss(&z, &y).unwrap();
        assert!(out.scores.data().iter().all(|&s| s == 0.5));
        assert!((out.loss - 2f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn saturated_matching_labels_near_zero_loss() {
        let z = Tensor::matrix(1, 4, vec![40.0f64, -40.0, 40.0, -40.0]).unwrap();
        let out = sigmoid_multilabel_loss(&z, &[1.0, 0.0, 1.0, 0.0]).unwrap();
        assert!(out.loss < 1e-12);
    }

    #[test]
    fn non_binary_labels_rejected() {
        let z = Tensor::<f32>::zeros(crate::tensor::Shape::new(1, 2, 1, 1));
        assert!(sigmoid_multilabel_loss(&z, &[1.0, 0.5]).is_err());
    }
}
