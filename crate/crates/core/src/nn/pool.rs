use crate::error::{config_err, contract, Result};
use crate::tensor::{Scalar, Tensor};

pub fn pool_output_size(n: usize, size: usize, stride: usize) -> Result<usize> {
    if size == 0 || stride == 0 {
        return Err(config_err!("pooling with zero window or stride"));
    }
    if size > n {
        return Err(config_err!("pool window {size} exceeds spatial extent {n}"));
    }
    Ok((n - size) / stride + 1)
}

/// Average pooling without padding; trailing rows/columns that do not fill a
/// window are dropped.
pub fn avg_pool2d<T: Scalar>(input: &Tensor<T>, size: usize, stride: usize) -> Result<Tensor<T>> {
    let (b, h, w, c) = input.dims4()?;
    let oh = pool_output_size(h, size, stride)?;
    let ow = pool_output_size(w, size, stride)?;
    let scale = T::one() / T::from_f64((size * size) as f64);
    let src = input.data();
    let mut out = vec![T::zero(); b * oh * ow * c];
    for n in 0..b {
        for oy in 0..oh {
            for ox in 0..ow {
                let dst = &mut out[((n * oh + oy) * ow + ox) * c..][..c];
                for ky in 0..size {
                    for kx in 0..size {
                        let y = oy * stride + ky;
                        let x = ox * stride + kx;
                        let px = &src[((n * h + y) * w + x) * c..][..c];
                        for (d, &v) in dst.iter_mut().zip(px) {
                            *d = *d + v;
                        }
                    }
                }
                for d in dst.iter_mut() {
                    *d = *d * scale;
                }
            }
        }
    }
    Tensor::new(vec![b, oh, ow, c], out)
}

pub fn avg_pool2d_backward<T: Scalar>(
    input_shape: &[usize],
    size: usize,
    stride: usize,
    upstream: &Tensor<T>,
) -> Result<Tensor<T>> {
    let [b, h, w, c] = input_shape[..] else {
        return Err(contract!("pool input shape {input_shape:?} is not 4-D"));
    };
    let oh = pool_output_size(h, size, stride)?;
    let ow = pool_output_size(w, size, stride)?;
    if upstream.shape() != [b, oh, ow, c] {
        return Err(contract!(
            "pool upstream gradient {:?} does not match output {:?}",
            upstream.shape(),
            [b, oh, ow, c]
        ));
    }
    let scale = T::one() / T::from_f64((size * size) as f64);
    let mut dx = vec![T::zero(); b * h * w * c];
    let dy = upstream.data();
    for n in 0..b {
        for oy in 0..oh {
            for ox in 0..ow {
                let g = &dy[((n * oh + oy) * ow + ox) * c..][..c];
                for ky in 0..size {
                    for kx in 0..size {
                        let y = oy * stride + ky;
                        let x = ox * stride + kx;
                        let dst = &mut dx[((n * h + y) * w + x) * c..][..c];
                        for (d, &v) in dst.iter_mut().zip(g) {
                            *d = *d + v * scale;
                        }
                    }
                }
            }
        }
    }
    Tensor::new(input_shape.to_vec(), dx)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn floor_sizes() {
        assert_eq!(pool_output_size(61, 2, 2).unwrap(), 30);
        assert_eq!(pool_output_size(30, 2, 2).unwrap(), 15);
        assert_eq!(pool_output_size(125, 2, 2).unwrap(), 62);
        assert_eq!(pool_output_size(62, 2, 2).unwrap(), 31);
        assert!(pool_output_size(1, 2, 2).is_err());
    }

    #[test]
    fn constant_stays_constant() {
        let x = Tensor::<f64>::full(vec![2, 7, 5, 3], 2.5);
        let y = avg_pool2d(&x, 2, 2).unwrap();
        assert_eq!(y.shape(), &[2, 3, 2, 3]);
        assert!(y.data().iter().all(|&v| v == 2.5));
    }

    #[test]
    fn window_mean() {
        let x = Tensor::<f64>::new(vec![1, 2, 2, 1], vec![1.0, 2.0, 3.0, 6.0]).unwrap();
        assert_eq!(avg_pool2d(&x, 2, 2).unwrap().data(), &[3.0]);
    }
}
