use super::LayerGrad;
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

pub fn relu<T: Scalar>(input: &Tensor<T>) -> Tensor<T> {
    input.map(|x| if x > T::zero() { x } else { T::zero() })
}

/// Subgradient at exactly zero is zero.
pub fn relu_backward<T: Scalar>(input: &Tensor<T>, output_grad: &Tensor<T>) -> Result<Tensor<T>> {
    if input.shape() != output_grad.shape() {
        return Err(Error::Shape(format!(
            "relu gradient {} does not match input {}",
            output_grad.shape(),
            input.shape()
        )));
    }
    let data = input
        .data()
        .iter()
        .zip(output_grad.data())
        .map(|(&x, &g)| if x > T::zero() { g } else { T::zero() })
        .collect();
    Tensor::from_vec(input.shape(), data)
}

pub fn elementwise_add<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    if a.shape() != b.shape() {
        return Err(Error::Shape(format!(
            "elementwise add of {} and {}",
            a.shape(),
            b.shape()
        )));
    }
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| x + y).collect();
    Tensor::from_vec(a.shape(), data)
}

/// Both operands receive the output gradient unchanged.
pub fn elementwise_add_backward<T: Scalar>(output_grad: &Tensor<T>) -> (LayerGrad<T>, Tensor<T>) {
    (
        LayerGrad::input_only(output_grad.clone()),
        output_grad.clone(),
    )
}
