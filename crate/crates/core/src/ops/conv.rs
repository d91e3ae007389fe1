
use super::LayerGrad;
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Shape, Tensor};

/// Kernel array extents `(c_out, c_in, k, k)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct KernelShape {
    pub c_out: usize,
    pub c_in: usize,
    pub k: usize,
}

impl KernelShape {
    pub fn numel(&self) -> usize {
        self.c_out * self.c_in * self.k * self.k
    }

    /// Length of one im2col row block, `c_in * k * k`.
    fn patch(&self) -> usize {
        self.c_in * self.k * self.k
    }
}

/// `floor((size + 2*padding - k) / stride) + 1`, or `None` when the window
/// does not fit.
pub fn conv_output_dim(size: usize, k: usize, stride: usize, padding: usize) -> Option<usize> {
    let padded = size + 2 * padding;
    if k == 0 || stride == 0 || padded < k {
        return None;
    }
    Some((padded - k) / stride + 1)
}

struct Geometry {
    out_h: usize,
    out_w: usize,
}

fn check<T: Scalar>(
    input: Shape,
    weights: &[T],
    ks: KernelShape,
    bias: Option<&[T]>,
    stride: usize,
    padding: usize,
) -> Result<Geometry> {
    if ks.k == 0 || stride == 0 {
        return Err(Error::InvalidArgument(format!(
            "kernel size {} and stride {} must be positive",
            ks.k, stride
        )));
    }
    if input.c != ks.c_in {
        return Err(Error::Shape(format!(
            "input {input} has {} channels but kernel ({}, {}, {}, {}) expects {}",
            input.c, ks.c_out, ks.c_in, ks.k, ks.k, ks.c_in
        )));
    }
    if weights.len() != ks.numel() {
        return Err(Error::Shape(format!(
            "weight array has {} elements, kernel ({}, {}, {}, {}) needs {}",
            weights.len(),
            ks.c_out,
            ks.c_in,
            ks.k,
            ks.k,
            ks.numel()
        )));
    }
    if let Some(b) = bias {
        if b.len() != ks.c_out {
            return Err(Error::Shape(format!(
                "bias has {} elements, expected {}",
                b.len(),
                ks.c_out
            )));
        }
    }
    match (
        conv_output_dim(input.h, ks.k, stride, padding),
        conv_output_dim(input.w, ks.k, stride, padding),
    ) {
        (Some(out_h), Some(out_w)) => Ok(Geometry { out_h, out_w }),
        _ => Err(Error::Shape(format!(
            "kernel {k}x{k} with padding {padding} produces no output on {}x{} input",
            input.h,
            input.w,
            k = ks.k
        ))),
    }
}

fn is_pointwise(ks: KernelShape, stride: usize, padding: usize) -> bool {
    ks.k == 1 && stride == 1 && padding == 0
}

/// Unfold one sample into a `(c_in*k*k, out_h*out_w)` matrix; row index is
/// `(ci*k + kh)*k + kw`, padded positions are zero.
fn im2col<T: Scalar>(
    x: &[T],
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    padding: usize,
    g: &Geometry,
    col: &mut [T],
) {
    let cols = g.out_h * g.out_w;
    for ci in 0..c {
        let plane = &x[ci * h * w..(ci + 1) * h * w];
        for kh in 0..k {
            for kw in 0..k {
                let row = &mut col[((ci * k + kh) * k + kw) * cols..][..cols];
                for oh in 0..g.out_h {
                    let ih = (oh * stride + kh) as isize - padding as isize;
                    let dst = &mut row[oh * g.out_w..(oh + 1) * g.out_w];
                    if ih < 0 || ih >= h as isize {
                        dst.fill(T::zero());
                        continue;
                    }
                    let src = &plane[ih as usize * w..(ih as usize + 1) * w];
                    for (ow, d) in dst.iter_mut().enumerate() {
                        let iw = (ow * stride + kw) as isize - padding as isize;
                        *d = if iw < 0 || iw >= w as isize {
                            T::zero()
                        } else {
                            src[iw as usize]
                        };
                    }
                }
            }
        }
    }
}

/// Inverse of [`im2col`]: scatter-add columns back to an input-shaped buffer.
fn col2im<T: Scalar>(
    col: &[T],
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    padding: usize,
    g: &Geometry,
    x: &mut [T],
) {
    let cols = g.out_h * g.out_w;
    for ci in 0..c {
        let plane = &mut x[ci * h * w..(ci + 1) * h * w];
        for kh in 0..k {
            for kw in 0..k {
                let row = &col[((ci * k + kh) * k + kw) * cols..][..cols];
                for oh in 0..g.out_h {
                    let ih = (oh * stride + kh) as isize - padding as isize;
                    if ih < 0 || ih >= h as isize {
                        continue;
                    }
                    for ow in 0..g.out_w {
                        let iw = (ow * stride + kw) as isize - padding as isize;
                        if iw >= 0 && iw < w as isize {
                            plane[ih as usize * w + iw as usize] =
                                plane[ih as usize * w + iw as usize] + row[oh * g.out_w + ow];
                        }
                    }
                }
            }
        }
    }
}

/// 2-D convolution over `(n, c_in, h, w)` with square kernels.
///
/// Each output element is accumulated from zero over `(c_in, kh, kw)` in that
/// order, then the bias is added. The order is fixed so results are
/// reproducible and comparable bit-for-bit with a direct nested-loop
/// evaluation.
pub fn conv2d_forward<T: Scalar>(
    input: &Tensor<T>,
    weights: &[T],
    ks: KernelShape,
    bias: Option<&[T]>,
    stride: usize,
    padding: usize,
) -> Result<Tensor<T>> {
    let s = input.shape();
    let g = check(s, weights, ks, bias, stride, padding)?;
    let cols = g.out_h * g.out_w;
    let patch = ks.patch();
    let out_shape = Shape::new(s.n, ks.c_out, g.out_h, g.out_w);
    let mut out = Tensor::zeros(out_shape);
    let pointwise = is_pointwise(ks, stride, padding);
    let mut col = if pointwise {
        Vec::new()
    } else {
        vec![T::zero(); patch * cols]
    };
    for n in 0..s.n {
        let x = input.sample(n);
        let colref: &[T] = if pointwise {
            x
        } else {
            im2col(x, s.c, s.h, s.w, ks.k, stride, padding, &g, &mut col);
            &col
        };
        let y = &mut out.data_mut()[n * ks.c_out * cols..(n + 1) * ks.c_out * cols];
        for co in 0..ks.c_out {
            let acc = &mut y[co * cols..(co + 1) * cols];
            let wrow = &weights[co * patch..(co + 1) * patch];
            for (r, &wv) in wrow.iter().enumerate() {
                let src = &colref[r * cols..(r + 1) * cols];
                for (a, &xv) in acc.iter_mut().zip(src) {
                    *a = *a + wv * xv;
                }
            }
            if let Some(b) = bias {
                let bv = b[co];
                for a in acc.iter_mut() {
                    *a = *a + bv;
                }
            }
        }
    }
    Ok(out)
}

/// Gradients of [`conv2d_forward`] with respect to input, weights and (when
/// present) bias. Parameter gradients are keyed `weight` and `bias`.
pub fn conv2d_backward<T: Scalar>(
    input: &Tensor<T>,
    weights: &[T],
    ks: KernelShape,
    bias: Option<&[T]>,
    output_grad: &Tensor<T>,
    stride: usize,
    padding: usize,
) -> Result<LayerGrad<T>> {
    let s = input.shape();
    let g = check(s, weights, ks, bias, stride, padding)?;
    let expected = Shape::new(s.n, ks.c_out, g.out_h, g.out_w);
    if output_grad.shape() != expected {
        return Err(Error::Shape(format!(
            "output gradient {} does not match convolution output {expected}",
            output_grad.shape()
        )));
    }
    let cols = g.out_h * g.out_w;
    let patch = ks.patch();
    let pointwise = is_pointwise(ks, stride, padding);
    let mut dw = vec![T::zero(); ks.numel()];
    let mut db = vec![T::zero(); ks.c_out];
    let mut dx = Tensor::zeros(s);
    let mut col = vec![T::zero(); if pointwise { 0 } else { patch * cols }];
    let mut dcol = vec![T::zero(); patch * cols];

    for n in 0..s.n {
        let x = input.sample(n);
        let dy = output_grad.sample(n);
        let colref: &[T] = if pointwise {
            x
        } else {
            im2col(x, s.c, s.h, s.w, ks.k, stride, padding, &g, &mut col);
            &col
        };
        dcol.fill(T::zero());
        for co in 0..ks.c_out {
            let dyr = &dy[co * cols..(co + 1) * cols];
            db[co] = db[co] + dyr.iter().copied().sum::<T>();
            let wrow = &weights[co * patch..(co + 1) * patch];
            let dwrow = &mut dw[co * patch..(co + 1) * patch];
            for r in 0..patch {
                let src = &colref[r * cols..(r + 1) * cols];
                let mut acc = T::zero();
                for (&a, &b) in dyr.iter().zip(src) {
                    acc = acc + a * b;
                }
                dwrow[r] = dwrow[r] + acc;
                let wv = wrow[r];
                let dst = &mut dcol[r * cols..(r + 1) * cols];
                for (d, &gy) in dst.iter_mut().zip(dyr) {
                    *d = *d + wv * gy;
                }
            }
        }
        let dxs = &mut dx.data_mut()[n * s.per_sample()..(n + 1) * s.per_sample()];
        if pointwise {
            dxs.copy_from_slice(&dcol);
        } else {
            col2im(&dcol, s.c, s.h, s.w, ks.k, stride, padding, &g, dxs);
        }
    }
    let mut grad = LayerGrad::input_only(dx);
    grad.param_grads.insert("weight".into(), dw);
    if bias.is_some() {
        grad.param_grads.insert("bias".into(), db);
    }
    Ok(grad)
}
