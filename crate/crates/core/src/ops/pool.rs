use crate::error::{Error, Result};
use crate::tensor::{Scalar, Shape, Tensor};

#[derive(Clone, Debug)]
pub struct MaxPoolOutput<T: Scalar> {
    pub output: Tensor<T>,
    /// Flat input index chosen for each output element.
    pub argmax: Vec<usize>,
}

/// 2x2 max pooling with stride 2. Ties go to the first element of the
/// window in row-major order.
pub fn maxpool2x2<T: Scalar>(input: &Tensor<T>) -> Result<MaxPoolOutput<T>> {
    let s = input.shape();
    if !s.h.is_multiple_of(2) || !s.w.is_multiple_of(2) {
        return Err(Error::Shape(format!(
            "2x2 max pooling needs even spatial dims, got {s}"
        )));
    }
    let os = Shape::new(s.n, s.c, s.h / 2, s.w / 2);
    let mut out = Tensor::zeros(os);
    let mut argmax = vec![0; os.numel()];
    let x = input.data();
    let mut o = 0;
    for nc in 0..s.n * s.c {
        let base = nc * s.plane();
        for oh in 0..os.h {
            for ow in 0..os.w {
                let mut best = base + 2 * oh * s.w + 2 * ow;
                for (dh, dw) in [(0, 1), (1, 0), (1, 1)] {
                    let i = base + (2 * oh + dh) * s.w + 2 * ow + dw;
                    if x[i] > x[best] {
                        best = i;
                    }
                }
                out.data_mut()[o] = x[best];
                argmax[o] = best;
                o += 1;
            }
        }
    }
    Ok(MaxPoolOutput {
        output: out,
        argmax,
    })
}

pub fn maxpool2x2_backward<T: Scalar>(
    input_shape: Shape,
    argmax: &[usize],
    output_grad: &Tensor<T>,
) -> Result<Tensor<T>> {
    if output_grad.len() != argmax.len() {
        return Err(Error::Shape(format!(
            "max pool gradient {} does not match {} pooled outputs",
            output_grad.shape(),
            argmax.len()
        )));
    }
    let mut dx = Tensor::zeros(input_shape);
    for (&i, &g) in argmax.iter().zip(output_grad.data()) {
        dx.data_mut()[i] = dx.data_mut()[i] + g;
    }
    Ok(dx)
}

/// Mean over each `(h, w)` plane, giving `(n, c, 1, 1)`.
pub fn avgpool_global<T: Scalar>(input: &Tensor<T>) -> Tensor<T> {
    let s = input.shape();
    let inv = T::one() / T::from_f64(s.plane().max(1) as f64);
    let data = (0..s.n * s.c)
        .map(|nc| input.data()[nc * s.plane()..(nc + 1) * s.plane()].iter().copied().sum::<T>() * inv)
        .collect();
    Tensor::from_vec(Shape::new(s.n, s.c, 1, 1), data).expect("pooled shape")
}

pub fn avgpool_global_backward<T: Scalar>(
    input_shape: Shape,
    output_grad: &Tensor<T>,
) -> Result<Tensor<T>> {
    let expected = Shape::new(input_shape.n, input_shape.c, 1, 1);
    if output_grad.shape() != expected {
        return Err(Error::Shape(format!(
            "average pool gradient {} does not match {expected}",
            output_grad.shape()
        )));
    }
    let plane = input_shape.plane();
    let inv = T::one() / T::from_f64(plane as f64);
    let mut data = Vec::with_capacity(input_shape.numel());
    for &g in output_grad.data() {
        data.extend(std::iter::repeat_n(g * inv, plane));
    }
    Tensor::from_vec(input_shape, data)
}
