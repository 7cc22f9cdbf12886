use crate::error::{contract, Result};
use crate::rng;
use crate::tensor::{Scalar, Tensor};

pub fn relu<T: Scalar>(input: &Tensor<T>) -> Tensor<T> {
    input.map(|v| if v > T::zero() { v } else { T::zero() })
}

/// Gradient of ReLU given its *input*.
pub fn relu_backward<T: Scalar>(input: &Tensor<T>, upstream: &Tensor<T>) -> Result<Tensor<T>> {
    upstream.same_shape(input, "relu backward")?;
    let data = input
        .data()
        .iter()
        .zip(upstream.data())
        .map(|(&x, &g)| if x > T::zero() { g } else { T::zero() })
        .collect();
    Tensor::new(input.shape().to_vec(), data)
}

fn axis_layout(shape: &[usize], axis: usize) -> Result<(usize, usize, usize)> {
    if axis >= shape.len() {
        return Err(contract!("axis {axis} out of range for shape {shape:?}"));
    }
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    Ok((outer, shape[axis], inner))
}

/// Max-stabilized softmax along `axis`.
pub fn softmax<T: Scalar>(input: &Tensor<T>, axis: usize) -> Result<Tensor<T>> {
    let (outer, len, inner) = axis_layout(input.shape(), axis)?;
    let src = input.data();
    let mut out = vec![T::zero(); src.len()];
    for o in 0..outer {
        for i in 0..inner {
            let at = |k: usize| (o * len + k) * inner + i;
            let mut max = T::neg_infinity();
            for k in 0..len {
                max = max.max(src[at(k)]);
            }
            let mut sum = T::zero();
            for k in 0..len {
                let e = (src[at(k)] - max).exp();
                out[at(k)] = e;
                sum = sum + e;
            }
            for k in 0..len {
                out[at(k)] = out[at(k)] / sum;
            }
        }
    }
    let out = Tensor::new(input.shape().to_vec(), out)?;
    out.check_finite("softmax")?;
    Ok(out)
}

/// Gradient of softmax given its *output*.
pub fn softmax_backward<T: Scalar>(
    output: &Tensor<T>,
    upstream: &Tensor<T>,
    axis: usize,
) -> Result<Tensor<T>> {
    upstream.same_shape(output, "softmax backward")?;
    let (outer, len, inner) = axis_layout(output.shape(), axis)?;
    let (y, g) = (output.data(), upstream.data());
    let mut dx = vec![T::zero(); y.len()];
    for o in 0..outer {
        for i in 0..inner {
            let at = |k: usize| (o * len + k) * inner + i;
            let dot: T = (0..len).map(|k| y[at(k)] * g[at(k)]).sum();
            for k in 0..len {
                dx[at(k)] = y[at(k)] * (g[at(k)] - dot);
            }
        }
    }
    Tensor::new(output.shape().to_vec(), dx)
}

/// Concatenation along the channel (last) axis.
pub fn concat<T: Scalar>(parts: &[&Tensor<T>]) -> Result<Tensor<T>> {
    let first = parts
        .first()
        .ok_or_else(|| contract!("concat of zero tensors"))?;
    let (b, h, w, _) = first.dims4()?;
    let mut widths = Vec::with_capacity(parts.len());
    for p in parts {
        let (pb, ph, pw, pc) = p.dims4()?;
        if (pb, ph, pw) != (b, h, w) {
            return Err(contract!(
                "concat: shape {:?} disagrees with {:?} outside the channel axis",
                p.shape(),
                first.shape()
            ));
        }
        widths.push(pc);
    }
    let total: usize = widths.iter().sum();
    let mut out = Vec::with_capacity(b * h * w * total);
    for px in 0..b * h * w {
        for (p, &c) in parts.iter().zip(&widths) {
            out.extend_from_slice(&p.data()[px * c..(px + 1) * c]);
        }
    }
    Tensor::new(vec![b, h, w, total], out)
}

/// Splits a channel-concatenated gradient back into per-part gradients.
pub fn split_channels<T: Scalar>(grad: &Tensor<T>, widths: &[usize]) -> Result<Vec<Tensor<T>>> {
    let (_, _, _, c) = grad.dims4()?;
    if widths.iter().sum::<usize>() != c {
        return Err(contract!("split widths {widths:?} do not sum to {c} channels"));
    }
    let mut start = 0;
    widths
        .iter()
        .map(|&w| {
            let t = grad.channel_slice(start, w);
            start += w;
            t
        })
        .collect()
}

/// Row-major 2-D matrix product.
pub fn matmul<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (&[m, k1], &[k2, n]) = (a.shape(), b.shape()) else {
        return Err(contract!(
            "matmul expects 2-D operands, got {:?} and {:?}",
            a.shape(),
            b.shape()
        ));
    };
    if k1 != k2 {
        return Err(contract!(
            "matmul inner dimensions disagree: {:?} x {:?}",
            a.shape(),
            b.shape()
        ));
    }
    let mut out = vec![T::zero(); m * n];
    T::gemm(m, k1, n, a.data(), false, b.data(), false, T::zero(), &mut out);
    Tensor::new(vec![m, n], out)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum DropoutMode {
    /// Inverted dropout with the given mask seed.
    Train { seed: u64 },
    Infer,
}

/// Keep-mask scale per element: `0` (dropped) or `1 / (1 - p)`.
/// Element `i` is dropped iff `unit(hash_at(seed, i)) < p`.
pub fn dropout_mask<T: Scalar>(len: usize, p: f64, seed: u64) -> Vec<T> {
    let keep = T::from_f64(1.0 / (1.0 - p));
    (0..len as u64)
        .map(|i| {
            if rng::unit_f64(rng::hash_at(seed, i)) < p {
                T::zero()
            } else {
                keep
            }
        })
        .collect()
}

pub fn dropout<T: Scalar>(input: &Tensor<T>, p: f64, mode: DropoutMode) -> Result<Tensor<T>> {
    if !(0.0..1.0).contains(&p) {
        return Err(contract!("dropout rate {p} outside [0, 1)"));
    }
    match mode {
        DropoutMode::Train { seed } if p > 0.0 => {
            let mask = dropout_mask::<T>(input.len(), p, seed);
            let data = input.data().iter().zip(&mask).map(|(&x, &m)| x * m).collect();
            Tensor::new(input.shape().to_vec(), data)
        }
        _ => Ok(input.clone()),
    }
}

/// The same mask applied to the upstream gradient.
pub fn dropout_backward<T: Scalar>(upstream: &Tensor<T>, p: f64, mode: DropoutMode) -> Result<Tensor<T>> {
    dropout(upstream, p, mode)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn softmax_uniform() {
        let x = Tensor::<f64>::full(vec![1, 81], 0.3);
        let y = softmax(&x, 1).unwrap();
        assert!(y.data().iter().all(|&v| (v - 1.0 / 81.0).abs() < 1e-15));
    }

    #[test]
    fn softmax_large_values_stable() {
        let x = Tensor::<f32>::new(vec![3], vec![1000.0, 1000.0, -1000.0]).unwrap();
        let y = softmax(&x, 0).unwrap();
        assert_eq!(y.data(), &[0.5, 0.5, 0.0]);
    }

    #[test]
    fn concat_channel_counts() {
        let a = Tensor::<f32>::zeros(vec![8, 61, 61, 72]);
        let g1 = Tensor::<f32>::zeros(vec![8, 61, 61, 36]);
        let g2 = Tensor::<f32>::zeros(vec![8, 61, 61, 36]);
        assert_eq!(concat(&[&a, &g1, &g2]).unwrap().shape(), &[8, 61, 61, 144]);
        let bad = Tensor::<f32>::zeros(vec![8, 60, 61, 36]);
        assert!(concat(&[&a, &bad]).is_err());
    }

    #[test]
    fn concat_split_inverse() {
        let a = Tensor::<f64>::from_fn(vec![2, 2, 2, 3], |i| i as f64);
        let b = Tensor::<f64>::from_fn(vec![2, 2, 2, 1], |i| -(i as f64));
        let joined = concat(&[&a, &b]).unwrap();
        let parts = split_channels(&joined, &[3, 1]).unwrap();
        assert_eq!(parts[0], a);
        assert_eq!(parts[1], b);
    }

    #[test]
    fn matmul_checks_inner_dim() {
        let a = Tensor::<f64>::new(vec![1, 2], vec![1.0, 2.0]).unwrap();
        let b = Tensor::<f64>::new(vec![2, 1], vec![3.0, 4.0]).unwrap();
        assert_eq!(matmul(&a, &b).unwrap().data(), &[11.0]);
        assert!(matmul(&a, &a).is_err());
    }

    #[test]
    fn dropout_zero_rate_is_identity() {
        let x = Tensor::<f32>::from_fn(vec![2, 3, 3, 2], |i| i as f32);
        assert_eq!(dropout(&x, 0.0, DropoutMode::Train { seed: 1 }).unwrap(), x);
        assert_eq!(dropout(&x, 0.0, DropoutMode::Infer).unwrap(), x);
        assert_eq!(dropout(&x, 0.5, DropoutMode::Infer).unwrap(), x);
        assert!(dropout(&x, 1.0, DropoutMode::Infer).is_err());
    }

    #[test]
    fn dropout_deterministic_and_inverted() {
        let x = Tensor::<f32>::full(vec![1000], 1.0);
        let a = dropout(&x, 0.2, DropoutMode::Train { seed: 42 }).unwrap();
        let b = dropout(&x, 0.2, DropoutMode::Train { seed: 42 }).unwrap();
        assert_eq!(a, b);
        for &v in a.data() {
            assert!(v == 0.0 || (v - 1.25).abs() < 1e-6);
        }
    }
}
