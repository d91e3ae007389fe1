
use super::LayerGrad;
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

pub const BN_EPSILON: f64 = 1e-5;
/// Weight of the previous running value in the moving average.
pub const BN_MOMENTUM: f64 = 0.9;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BnMode {
    Train,
    Infer,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunningStats<T: Scalar = f32> {
    pub mean: Vec<T>,
    pub var: Vec<T>,
}

impl<T: Scalar> RunningStats<T> {
    /// Zero mean, unit variance.
    pub fn identity(channels: usize) -> Self {
        RunningStats {
            mean: vec![T::zero(); channels],
            var: vec![T::one(); channels],
        }
    }
}

/// Values retained by a training-mode forward pass for the backward pass.
#[derive(Clone, Debug)]
pub struct BatchNormCache<T: Scalar> {
    pub normalized: Tensor<T>,
    pub inv_std: Vec<T>,
}

#[derive(Clone, Debug)]
pub struct BatchNormOutput<T: Scalar> {
    pub output: Tensor<T>,
    /// Present in training mode only.
    pub cache: Option<BatchNormCache<T>>,
    /// Running statistics after the moving-average update (training mode).
    pub updated_stats: Option<RunningStats<T>>,
}

/// Per-channel normalization over `(n, h, w)` followed by `gamma * x + beta`.
///
/// Training mode uses the biased batch variance and folds the batch moments
/// into the running statistics with momentum [`BN_MOMENTUM`]; when no
/// running statistics are supplied the batch moments seed them. Inference
/// mode reads the running statistics only.
pub fn batchnorm_forward<T: Scalar>(
    input: &Tensor<T>,
    gamma: &[T],
    beta: &[T],
    stats: Option<&RunningStats<T>>,
    mode: BnMode,
    epsilon: f64,
) -> Result<BatchNormOutput<T>> {
    let s = input.shape();
    if gamma.len() != s.c || beta.len() != s.c {
        return Err(Error::Shape(format!(
            "batchnorm over {s} needs {} gamma/beta values, got {}/{}",
            s.c,
            gamma.len(),
            beta.len()
        )));
    }
    if !(epsilon > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "batchnorm epsilon must be positive, got {epsilon}"
        )));
    }
    if let Some(st) = stats {
        if st.mean.len() != s.c || st.var.len() != s.c {
            return Err(Error::Shape(format!(
                "running statistics have {} channels, input has {}",
                st.mean.len(),
                s.c
            )));
        }
    }
    let eps = T::from_f64(epsilon);
    let plane = s.plane();
    let mut out = Tensor::zeros(s);
    match mode {
        BnMode::Infer => {
            let st = stats.ok_or_else(|| Error::UninitializedStats("inference input".into()))?;
            for c in 0..s.c {
                let inv = T::one() / (st.var[c] + eps).sqrt();
                let (m, g, b) = (st.mean[c], gamma[c], beta[c]);
                for n in 0..s.n {
                    let off = (n * s.c + c) * plane;
                    let src = &input.data()[off..off + plane];
                    let dst = &mut out.data_mut()[off..off + plane];
                    for (d, &x) in dst.iter_mut().zip(src) {
                        *d = g * ((x - m) * inv) + b;
                    }
                }
            }
            Ok(BatchNormOutput {
                output: out,
                cache: None,
                updated_stats: None,
            })
        }
        BnMode::Train => {
            let count = s.n * plane;
            if count == 0 {
                return Err(Error::Shape(format!(
                    "batchnorm training over empty batch {s}"
                )));
            }
            let cnt = T::from_f64(count as f64);
            let mut normalized = Tensor::zeros(s);
            let mut inv_std = vec![T::zero(); s.c];
            let mut new_stats = stats
                .cloned()
                .unwrap_or_else(|| RunningStats::identity(s.c));
            let mom = T::from_f64(BN_MOMENTUM);
            for c in 0..s.c {
                let mut sum = T::zero();
                for n in 0..s.n {
                    let off = (n * s.c + c) * plane;
                    sum = sum + input.data()[off..off + plane].iter().copied().sum::<T>();
                }
                let mean = sum / cnt;
                let mut sq = T::zero();
                for n in 0..s.n {
                    let off = (n * s.c + c) * plane;
                    for &x in &input.data()[off..off + plane] {
                        sq = sq + (x - mean) * (x - mean);
                    }
                }
                let var = sq / cnt;
                let inv = T::one() / (var + eps).sqrt();
                inv_std[c] = inv;
                for n in 0..s.n {
                    let off = (n * s.c + c) * plane;
                    for i in off..off + plane {
                        let xh = (input.data()[i] - mean) * inv;
                        normalized.data_mut()[i] = xh;
                        out.data_mut()[i] = gamma[c] * xh + beta[c];
                    }
                }
                if stats.is_some() {
                    new_stats.mean[c] = mom * new_stats.mean[c] + (T::one() - mom) * mean;
                    new_stats.var[c] = mom * new_stats.var[c] + (T::one() - mom) * var;
                } else {
                    new_stats.mean[c] = mean;
                    new_stats.var[c] = var;
                }
            }
            Ok(BatchNormOutput {
                output: out,
                cache: Some(BatchNormCache {
                    normalized,
                    inv_std,
                }),
                updated_stats: Some(new_stats),
            })
        }
    }
}

/// Training-mode backward pass; gradients keyed `gamma` and `beta`.
pub fn batchnorm_backward<T: Scalar>(
    cache: &BatchNormCache<T>,
    gamma: &[T],
    output_grad: &Tensor<T>,
) -> Result<LayerGrad<T>> {
    let s = cache.normalized.shape();
    if output_grad.shape() != s {
        return Err(Error::Shape(format!(
            "batchnorm output gradient {} does not match {s}",
            output_grad.shape()
        )));
    }
    let plane = s.plane();
    let cnt = T::from_f64((s.n * plane) as f64);
    let mut dgamma = vec![T::zero(); s.c];
    let mut dbeta = vec![T::zero(); s.c];
    let mut dx = Tensor::zeros(s);
    let xh = cache.normalized.data();
    let dy = output_grad.data();
    for c in 0..s.c {
        let (mut sdy, mut sdyx) = (T::zero(), T::zero());
        for n in 0..s.n {
            let off = (n * s.c + c) * plane;
            for i in off..off + plane {
                sdy = sdy + dy[i];
                sdyx = sdyx + dy[i] * xh[i];
            }
        }
        dgamma[c] = sdyx;
        dbeta[c] = sdy;
        let scale = gamma[c] * cache.inv_std[c] / cnt;
        for n in 0..s.n {
            let off = (n * s.c + c) * plane;
            for i in off..off + plane {
                dx.data_mut()[i] = scale * (cnt * dy[i] - sdy - xh[i] * sdyx);
            }
        }
    }
    let mut grad = LayerGrad::input_only(dx);
    grad.param_grads.insert("gamma".into(), dgamma);
    grad.param_grads.insert("beta".into(), dbeta);
    Ok(grad)
}
