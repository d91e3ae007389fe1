use super::LayerGrad;
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// `y = x W + b` with `x` collapsed to `(n, d)` and `W` stored `(d, m)`
/// row-major. Output shape is `(n, m, 1, 1)`.
pub fn fully_connected<T: Scalar>(
    input: &Tensor<T>,
    weights: &[T],
    bias: &[T],
    d: usize,
    m: usize,
) -> Result<Tensor<T>> {
    check(input, weights, bias, d, m)?;
    let n = input.shape().n;
    let mut out = vec![T::zero(); n * m];
    for i in 0..n {
        let x = input.sample(i);
        let y = &mut out[i * m..(i + 1) * m];
        for (r, &xv) in x.iter().enumerate() {
            let wr = &weights[r * m..(r + 1) * m];
            for (a, &wv) in y.iter_mut().zip(wr) {
                *a = *a + xv * wv;
            }
        }
        for (a, &b) in y.iter_mut().zip(bias) {
            *a = *a + b;
        }
    }
    Tensor::matrix(n, m, out)
}

/// Gradients keyed `weight` and `bias`; the input gradient has the shape of
/// the (uncollapsed) input.
pub fn fully_connected_backward<T: Scalar>(
    input: &Tensor<T>,
    weights: &[T],
    bias: &[T],
    output_grad: &Tensor<T>,
    d: usize,
    m: usize,
) -> Result<LayerGrad<T>> {
    check(input, weights, bias, d, m)?;
    let n = input.shape().n;
    if output_grad.len() != n * m {
        return Err(Error::Shape(format!(
            "fully connected gradient {} does not match ({n}, {m})",
            output_grad.shape()
        )));
    }
    let mut dx = Tensor::zeros(input.shape());
    let mut dw = vec![T::zero(); d * m];
    let mut db = vec![T::zero(); m];
    for i in 0..n {
        let x = input.sample(i);
        let dy = output_grad.sample(i);
        for (b, &g) in db.iter_mut().zip(dy) {
            *b = *b + g;
        }
        let dxs = &mut dx.data_mut()[i * d..(i + 1) * d];
        for r in 0..d {
            let wr = &weights[r * m..(r + 1) * m];
            let dwr = &mut dw[r * m..(r + 1) * m];
            let mut acc = T::zero();
            for j in 0..m {
                acc = acc + wr[j] * dy[j];
                dwr[j] = dwr[j] + x[r] * dy[j];
            }
            dxs[r] = acc;
        }
    }
    let mut grad = LayerGrad::input_only(dx);
    grad.param_grads.insert("weight".into(), dw);
    grad.param_grads.insert("bias".into(), db);
    Ok(grad)
}

fn check<T: Scalar>(input: &Tensor<T>, weights: &[T], bias: &[T], d: usize, m: usize) -> Result<()> {
    if input.shape().per_sample() != d {
        return Err(Error::Shape(format!(
            "fully connected layer expects {d} features, input {} has {}",
            input.shape(),
            input.shape().per_sample()
        )));
    }
    if weights.len() != d * m || bias.len() != m {
        return Err(Error::Shape(format!(
            "fully connected ({d}, {m}) got {} weights and {} biases",
            weights.len(),
            bias.len()
        )));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Shape;

    #[test]
    fn identity_weights_pass_through() {
        let x = Tensor::from_vec(Shape::new(2, 3, 1, 1), vec![1.0f32, -2.0, 0.5, 4.0, 0.0, 9.0]).unwrap();
        let mut w = vec![0.0; 9];
        for i in 0..3 {
            w[i * 3 + i] = 1.0;
        }
        let y = fully_connected(&x, &w, &[0.0; 3], 3, 3).unwrap();
        assert_eq!(y.data(), x.data());
    }

    #[test]
    fn collapses_spatial_input() {
        let x = Tensor::from_vec(Shape::new(1, 1, 2, 2), vec![1.0f32, 2.0, 3.0, 4.0]).unwrap();
        let y = fully_connected(&x, &[1.0, 1.0, 1.0, 1.0], &[0.5], 4, 1).unwrap();
        assert_eq!(y.data(), &[10.5]);
        assert!(fully_connected(&x, &[1.0; 3], &[0.5], 3, 1).is_err());
    }
}
