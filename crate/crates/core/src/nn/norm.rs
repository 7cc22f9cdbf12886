use crate::error::{contract, Result};
use crate::tensor::{Scalar, Tensor};

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.9;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BnMode {
    /// Batch statistics; running statistics are refreshed.
    Train,
    /// Running statistics only.
    Infer,
}

/// What a batch-norm forward pass keeps for its backward pass.
#[derive(Debug, Clone)]
pub struct BnCache<T> {
    /// Normalized input before the affine transform.
    pub xhat: Tensor<T>,
    pub inv_std: Vec<T>,
    pub mode: BnMode,
}

pub struct BnOutput<T> {
    pub output: Tensor<T>,
    pub cache: BnCache<T>,
    /// Updated `(running_mean, running_var)` in train mode.
    pub running: Option<(Vec<T>, Vec<T>)>,
}

/// Per-channel batch normalization over batch x height x width.
///
/// Train mode normalizes with the biased batch variance and returns running
/// statistics updated as `r <- momentum * r + (1 - momentum) * batch`
/// (the variance update uses the unbiased estimate).
pub fn batch_norm<T: Scalar>(
    input: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    running_mean: &Tensor<T>,
    running_var: &Tensor<T>,
    mode: BnMode,
) -> Result<BnOutput<T>> {
    let (b, h, w, c) = input.dims4()?;
    for (name, t) in [
        ("gamma", gamma),
        ("beta", beta),
        ("running_mean", running_mean),
        ("running_var", running_var),
    ] {
        if t.len() != c {
            return Err(contract!(
                "batch norm {name} has shape {:?}, input {:?} has {c} channels",
                t.shape(),
                input.shape()
            ));
        }
    }
    let count = b * h * w;
    let eps = T::from_f64(BN_EPS);
    let (mean, var, running) = match mode {
        BnMode::Train => {
            if b < 2 {
                return Err(contract!(
                    "train-mode batch norm needs batch > 1, got input {:?}",
                    input.shape()
                ));
            }
            let mut mean = vec![0.0f64; c];
            for px in input.data().chunks_exact(c) {
                for (m, &v) in mean.iter_mut().zip(px) {
                    *m += v.as_f64();
                }
            }
            mean.iter_mut().for_each(|m| *m /= count as f64);
            let mut var = vec![0.0f64; c];
            for px in input.data().chunks_exact(c) {
                for ((s, &v), m) in var.iter_mut().zip(px).zip(&mean) {
                    let d = v.as_f64() - m;
                    *s += d * d;
                }
            }
            var.iter_mut().for_each(|v| *v /= count as f64);
            let unbias = count as f64 / (count as f64 - 1.0);
            let rm: Vec<T> = running_mean
                .data()
                .iter()
                .zip(&mean)
                .map(|(&r, &m)| T::from_f64(BN_MOMENTUM * r.as_f64() + (1.0 - BN_MOMENTUM) * m))
                .collect();
            let rv: Vec<T> = running_var
                .data()
                .iter()
                .zip(&var)
                .map(|(&r, &v)| {
                    T::from_f64(BN_MOMENTUM * r.as_f64() + (1.0 - BN_MOMENTUM) * v * unbias)
                })
                .collect();
            (
                mean.into_iter().map(T::from_f64).collect::<Vec<T>>(),
                var.into_iter().map(T::from_f64).collect::<Vec<T>>(),
                Some((rm, rv)),
            )
        }
        BnMode::Infer => (running_mean.data().to_vec(), running_var.data().to_vec(), None),
    };
    let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
    let mut xhat = vec![T::zero(); input.len()];
    let mut out = vec![T::zero(); input.len()];
    for ((src, xh), dst) in input
        .data()
        .chunks_exact(c)
        .zip(xhat.chunks_exact_mut(c))
        .zip(out.chunks_exact_mut(c))
    {
        for ch in 0..c {
            let n = (src[ch] - mean[ch]) * inv_std[ch];
            xh[ch] = n;
            dst[ch] = gamma.data()[ch] * n + beta.data()[ch];
        }
    }
    Ok(BnOutput {
        output: Tensor::new(input.shape().to_vec(), out)?,
        cache: BnCache {
            xhat: Tensor::new(input.shape().to_vec(), xhat)?,
            inv_std,
            mode,
        },
        running,
    })
}

pub struct BnGrads<T> {
    pub input: Tensor<T>,
    pub gamma: Tensor<T>,
    pub beta: Tensor<T>,
}

pub fn batch_norm_backward<T: Scalar>(
    cache: &BnCache<T>,
    gamma: &Tensor<T>,
    upstream: &Tensor<T>,
) -> Result<BnGrads<T>> {
    upstream.same_shape(&cache.xhat, "batch norm backward")?;
    let c = gamma.len();
    let count = (cache.xhat.len() / c) as f64;
    let mut dgamma = vec![0.0f64; c];
    let mut dbeta = vec![0.0f64; c];
    for (dy, xh) in upstream
        .data()
        .chunks_exact(c)
        .zip(cache.xhat.data().chunks_exact(c))
    {
        for ch in 0..c {
            dgamma[ch] += (dy[ch] * xh[ch]).as_f64();
            dbeta[ch] += dy[ch].as_f64();
        }
    }
    let mut dx = vec![T::zero(); upstream.len()];
    match cache.mode {
        BnMode::Train => {
            // dx = inv_std / N * (N*dxhat - sum(dxhat) - xhat * sum(dxhat*xhat)),
            // with dxhat = gamma * dy, so the sums are gamma*dbeta and gamma*dgamma.
            let coef: Vec<(T, T, T)> = (0..c)
                .map(|ch| {
                    let g = gamma.data()[ch];
                    let s = cache.inv_std[ch];
                    (
                        g * s,
                        T::from_f64(dbeta[ch] / count),
                        T::from_f64(dgamma[ch] / count),
                    )
                })
                .collect();
            for ((dst, dy), xh) in dx
                .chunks_exact_mut(c)
                .zip(upstream.data().chunks_exact(c))
                .zip(cache.xhat.data().chunks_exact(c))
            {
                for ch in 0..c {
                    let (gs, mb, mg) = coef[ch];
                    dst[ch] = gs * (dy[ch] - mb - xh[ch] * mg);
                }
            }
        }
        BnMode::Infer => {
            for (dst, dy) in dx.chunks_exact_mut(c).zip(upstream.data().chunks_exact(c)) {
                for ch in 0..c {
                    dst[ch] = dy[ch] * gamma.data()[ch] * cache.inv_std[ch];
                }
            }
        }
    }
    Ok(BnGrads {
        input: Tensor::new(upstream.shape().to_vec(), dx)?,
        gamma: Tensor::new(vec![c], dgamma.into_iter().map(T::from_f64).collect())?,
        beta: Tensor::new(vec![c], dbeta.into_iter().map(T::from_f64).collect())?,
    })
}
