use serde::{Deserialize, Serialize};

use crate::error::{config_err, contract, Result};
use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvSpec {
    pub kernel_h: usize,
    pub kernel_w: usize,
    pub stride: usize,
    pub padding: usize,
    pub in_channels: usize,
    pub out_channels: usize,
}

impl ConvSpec {
    pub fn square(kernel: usize, stride: usize, padding: usize, cin: usize, cout: usize) -> Self {
        ConvSpec {
            kernel_h: kernel,
            kernel_w: kernel,
            stride,
            padding,
            in_channels: cin,
            out_channels: cout,
        }
    }

    pub fn kernel_shape(&self) -> [usize; 4] {
        [self.kernel_h, self.kernel_w, self.in_channels, self.out_channels]
    }

    pub fn fan_in(&self) -> usize {
        self.kernel_h * self.kernel_w * self.in_channels
    }

    /// `floor((in + 2 padding - kernel) / stride) + 1`, or an error when the
    /// window does not fit.
    pub fn output_size(&self, in_h: usize, in_w: usize) -> Result<(usize, usize)> {
        if self.stride == 0 || self.kernel_h == 0 || self.kernel_w == 0 {
            return Err(config_err!("convolution with zero kernel or stride: {self:?}"));
        }
        let ph = in_h + 2 * self.padding;
        let pw = in_w + 2 * self.padding;
        if ph < self.kernel_h || pw < self.kernel_w {
            return Err(config_err!(
                "{}x{} kernel does not fit a {in_h}x{in_w} input with padding {}",
                self.kernel_h,
                self.kernel_w,
                self.padding
            ));
        }
        Ok((
            (ph - self.kernel_h) / self.stride + 1,
            (pw - self.kernel_w) / self.stride + 1,
        ))
    }

    fn is_pointwise(&self) -> bool {
        self.kernel_h == 1 && self.kernel_w == 1 && self.stride == 1 && self.padding == 0
    }

    fn check(&self, input: &Tensor<impl Scalar>, kernel_shape: &[usize]) -> Result<()> {
        let (_, _, _, c) = input.dims4()?;
        if c != self.in_channels {
            return Err(contract!(
                "conv input shape {:?} has {c} channels, spec expects {}",
                input.shape(),
                self.in_channels
            ));
        }
        if kernel_shape != self.kernel_shape() {
            return Err(contract!(
                "conv kernel shape {:?} does not match spec {:?} (input {:?})",
                kernel_shape,
                self.kernel_shape(),
                input.shape()
            ));
        }
        Ok(())
    }
}

/// Output rows per im2col tile, sized so a tile of patches stays in cache.
fn tile_rows(spec: &ConvSpec, oh: usize, ow: usize) -> usize {
    const TILE_ELEMS: usize = 1 << 16;
    (TILE_ELEMS / (ow * spec.fan_in()).max(1)).clamp(1, oh.max(1))
}

/// Unfolds output rows `oy0..oy1` of one image `(h, w, c)` into rows of
/// receptive fields, column order `(ky, kx, c)`.
fn im2col<T: Scalar>(img: &[T], h: usize, w: usize, spec: &ConvSpec, rows: (usize, usize), ow: usize, cols: &mut [T]) {
    let c = spec.in_channels;
    let row_len = spec.fan_in();
    let pad = spec.padding as isize;
    for oy in rows.0..rows.1 {
        for ox in 0..ow {
            let row = &mut cols[((oy - rows.0) * ow + ox) * row_len..][..row_len];
            let y0 = (oy * spec.stride) as isize - pad;
            let x0 = (ox * spec.stride) as isize - pad;
            for ky in 0..spec.kernel_h {
                let y = y0 + ky as isize;
                let seg = &mut row[ky * spec.kernel_w * c..][..spec.kernel_w * c];
                if y < 0 || y >= h as isize {
                    seg.fill(T::zero());
                    continue;
                }
                let src_row = y as usize * w;
                // contiguous run of in-bounds kx
                let kx_lo = ((-x0).max(0) as usize).min(spec.kernel_w);
                let kx_hi = ((w as isize - x0).min(spec.kernel_w as isize)).max(kx_lo as isize) as usize;
                seg[..kx_lo * c].fill(T::zero());
                seg[kx_hi * c..].fill(T::zero());
                if kx_lo < kx_hi {
                    let x_lo = (x0 + kx_lo as isize) as usize;
                    let src = (src_row + x_lo) * c;
                    seg[kx_lo * c..kx_hi * c].copy_from_slice(&img[src..src + (kx_hi - kx_lo) * c]);
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters rows back into an image, accumulating.
fn col2im<T: Scalar>(cols: &[T], img: &mut [T], h: usize, w: usize, spec: &ConvSpec, rows: (usize, usize), ow: usize) {
    let c = spec.in_channels;
    let row_len = spec.fan_in();
    let pad = spec.padding as isize;
    for oy in rows.0..rows.1 {
        for ox in 0..ow {
            let row = &cols[((oy - rows.0) * ow + ox) * row_len..][..row_len];
            let y0 = (oy * spec.stride) as isize - pad;
            let x0 = (ox * spec.stride) as isize - pad;
            for ky in 0..spec.kernel_h {
                let y = y0 + ky as isize;
                if y < 0 || y >= h as isize {
                    continue;
                }
                for kx in 0..spec.kernel_w {
                    let x = x0 + kx as isize;
                    if x < 0 || x >= w as isize {
                        continue;
                    }
                    let dst = &mut img[(y as usize * w + x as usize) * c..][..c];
                    let src = &row[(ky * spec.kernel_w + kx) * c..][..c];
                    for (d, &s) in dst.iter_mut().zip(src) {
                        *d = *d + s;
                    }
                }
            }
        }
    }
}

/// 2-D convolution (cross-correlation form) in NHWC layout.
pub fn conv2d<T: Scalar>(
    input: &Tensor<T>,
    kernel: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    spec: &ConvSpec,
) -> Result<Tensor<T>> {
    spec.check(input, kernel.shape())?;
    let (b, h, w, _) = input.dims4()?;
    let (oh, ow) = spec.output_size(h, w)?;
    let cout = spec.out_channels;
    if let Some(bias) = bias {
        if bias.len() != cout {
            return Err(contract!(
                "conv bias shape {:?} does not match {cout} output channels",
                bias.shape()
            ));
        }
    }
    let k = spec.fan_in();
    let mut out = vec![T::zero(); b * oh * ow * cout];
    let tile = tile_rows(spec, oh, ow);
    let mut cols = if spec.is_pointwise() {
        Vec::new()
    } else {
        vec![T::zero(); tile * ow * k]
    };
    for n in 0..b {
        let dst = &mut out[n * oh * ow * cout..][..oh * ow * cout];
        let beta = if let Some(bias) = bias {
            for row in dst.chunks_exact_mut(cout) {
                row.copy_from_slice(bias.data());
            }
            T::one()
        } else {
            T::zero()
        };
        if spec.is_pointwise() {
            T::gemm(oh * ow, k, cout, input.item(n), false, kernel.data(), false, beta, dst);
            continue;
        }
        for oy0 in (0..oh).step_by(tile) {
            let oy1 = (oy0 + tile).min(oh);
            let m = (oy1 - oy0) * ow;
            let cols = &mut cols[..m * k];
            im2col(input.item(n), h, w, spec, (oy0, oy1), ow, cols);
            T::gemm(m, k, cout, cols, false, kernel.data(), false, beta, &mut dst[oy0 * ow * cout..][..m * cout]);
        }
    }
    Tensor::new(vec![b, oh, ow, cout], out)
}

pub struct ConvGrads<T> {
    pub input: Option<Tensor<T>>,
    pub kernel: Tensor<T>,
    pub bias: Tensor<T>,
}

/// Gradients of [`conv2d`] given the gradient of its output.
/// The input gradient is skipped when `need_input` is false (e.g. raw images).
pub fn conv2d_backward<T: Scalar>(
    input: &Tensor<T>,
    kernel: &Tensor<T>,
    spec: &ConvSpec,
    upstream: &Tensor<T>,
    need_input: bool,
) -> Result<ConvGrads<T>> {
    spec.check(input, kernel.shape())?;
    let (b, h, w, cin) = input.dims4()?;
    let (oh, ow) = spec.output_size(h, w)?;
    let cout = spec.out_channels;
    if upstream.shape() != [b, oh, ow, cout] {
        return Err(contract!(
            "conv upstream gradient {:?} does not match output shape {:?}",
            upstream.shape(),
            [b, oh, ow, cout]
        ));
    }
    let k = spec.fan_in();
    let mut dk = vec![T::zero(); k * cout];
    let mut db = vec![T::zero(); cout];
    let mut dx = if need_input {
        Some(vec![T::zero(); b * h * w * cin])
    } else {
        None
    };
    let mut cols = if spec.is_pointwise() {
        Vec::new()
    } else {
        vec![T::zero(); tile_rows(spec, oh, ow) * ow * k]
    };
    for n in 0..b {
        let dy = upstream.item(n);
        for row in dy.chunks_exact(cout) {
            for (acc, &g) in db.iter_mut().zip(row) {
                *acc = *acc + g;
            }
        }
        if spec.is_pointwise() {
            T::gemm(k, oh * ow, cout, input.item(n), true, dy, false, T::one(), &mut dk);
            if let Some(dx) = dx.as_mut() {
                let dst = &mut dx[n * h * w * cin..][..h * w * cin];
                T::gemm(oh * ow, cout, k, dy, false, kernel.data(), true, T::zero(), dst);
            }
        } else {
            let tile = tile_rows(spec, oh, ow);
            let x = input.item(n);
            for oy0 in (0..oh).step_by(tile) {
                let oy1 = (oy0 + tile).min(oh);
                let m = (oy1 - oy0) * ow;
                let cols = &mut cols[..m * k];
                im2col(x, h, w, spec, (oy0, oy1), ow, cols);
                let dy_tile = &dy[oy0 * ow * cout..][..m * cout];
                T::gemm(k, m, cout, cols, true, dy_tile, false, T::one(), &mut dk);
                if let Some(dx) = dx.as_mut() {
                    let dcols = &mut cols[..m * k];
                    T::gemm(m, cout, k, dy_tile, false, kernel.data(), true, T::zero(), dcols);
                    let dst = &mut dx[n * h * w * cin..][..h * w * cin];
                    col2im(dcols, dst, h, w, spec, (oy0, oy1), ow);
                }
            }
        }
    }
    Ok(ConvGrads {
        input: dx
            .map(|d| Tensor::new(input.shape().to_vec(), d))
            .transpose()?,
        kernel: Tensor::new(spec.kernel_shape().to_vec(), dk)?,
        bias: Tensor::new(vec![cout], db)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    fn naive_conv(x: &Tensor<f64>, k: &Tensor<f64>, bias: &[f64], spec: &ConvSpec) -> Tensor<f64> {
        let (b, h, w, cin) = x.dims4().unwrap();
        let (oh, ow) = spec.output_size(h, w).unwrap();
        let cout = spec.out_channels;
        let mut out = Tensor::zeros(vec![b, oh, ow, cout]);
        for n in 0..b {
            for oy in 0..oh {
                for ox in 0..ow {
                    for o in 0..cout {
                        let mut acc = bias[o];
                        for ky in 0..spec.kernel_h {
                            for kx in 0..spec.kernel_w {
                                let y = (oy * spec.stride + ky) as isize - spec.padding as isize;
                                let xx = (ox * spec.stride + kx) as isize - spec.padding as isize;
                                if y < 0 || xx < 0 || y >= h as isize || xx >= w as isize {
                                    continue;
                                }
                                for c in 0..cin {
                                    acc += x.data()[((n * h + y as usize) * w + xx as usize) * cin + c]
                                        * k.data()[((ky * spec.kernel_w + kx) * cin + c) * cout + o];
                                }
                            }
                        }
                        out.data_mut()[((n * oh + oy) * ow + ox) * cout + o] = acc;
                    }
                }
            }
        }
        out
    }

    fn random(shape: Vec<usize>, rng: &mut Rng) -> Tensor<f64> {
        Tensor::from_fn(shape, |_| rng.normal())
    }

    #[test]
    fn matches_naive_loops() {
        let mut rng = Rng::new(3);
        for &(k, s, p) in &[(3, 1, 1), (3, 2, 0), (1, 1, 0), (7, 2, 0), (2, 1, 1)] {
            let spec = ConvSpec::square(k, s, p, 3, 4);
            let x = random(vec![2, 9, 8, 3], &mut rng);
            let kern = random(spec.kernel_shape().to_vec(), &mut rng);
            let bias: Vec<f64> = (0..4).map(|_| rng.normal()).collect();
            let fast = conv2d(&x, &kern, Some(&Tensor::new(vec![4], bias.clone()).unwrap()), &spec).unwrap();
            let slow = naive_conv(&x, &kern, &bias, &spec);
            assert_eq!(fast.shape(), slow.shape());
            for (a, b) in fast.data().iter().zip(slow.data()) {
                assert!((a - b).abs() < 1e-10, "k={k} s={s} p={p}: {a} vs {b}");
            }
        }
    }

    #[test]
    fn stem_shapes() {
        let spec = ConvSpec::square(7, 2, 0, 3, 72);
        assert_eq!(spec.output_size(127, 127).unwrap(), (61, 61));
        assert_eq!(spec.output_size(255, 255).unwrap(), (125, 125));
        assert!(spec.output_size(6, 6).is_err());
    }

    #[test]
    fn identity_pointwise_kernel() {
        let x = Tensor::<f32>::from_fn(vec![1, 5, 5, 1], |i| i as f32 * 0.5 - 3.0);
        let k = Tensor::new(vec![1, 1, 1, 1], vec![1.0]).unwrap();
        let b = Tensor::new(vec![1], vec![0.0]).unwrap();
        let y = conv2d(&x, &k, Some(&b), &ConvSpec::square(1, 1, 0, 1, 1)).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn scalar_chain_rule() {
        let spec = ConvSpec::square(1, 1, 0, 1, 1);
        let x = Tensor::new(vec![1, 1, 1, 1], vec![3.0f64]).unwrap();
        let k = Tensor::new(vec![1, 1, 1, 1], vec![-2.0]).unwrap();
        let up = Tensor::new(vec![1, 1, 1, 1], vec![0.5]).unwrap();
        let g = conv2d_backward(&x, &k, &spec, &up, true).unwrap();
        assert_eq!(g.kernel.data(), &[1.5]);
        assert_eq!(g.input.unwrap().data(), &[-1.0]);
        assert_eq!(g.bias.data(), &[0.5]);
    }

    #[test]
    fn zero_upstream_gives_zero_grads() {
        let mut rng = Rng::new(9);
        let spec = ConvSpec::square(3, 1, 1, 2, 3);
        let x = random(vec![1, 6, 6, 2], &mut rng);
        let k = random(spec.kernel_shape().to_vec(), &mut rng);
        let g = conv2d_backward(&x, &k, &spec, &Tensor::zeros(vec![1, 6, 6, 3]), true).unwrap();
        assert!(g.kernel.data().iter().all(|&v| v == 0.0));
        assert!(g.bias.data().iter().all(|&v| v == 0.0));
        assert!(g.input.unwrap().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn shape_errors() {
        let spec = ConvSpec::square(3, 1, 0, 2, 3);
        let x = Tensor::<f32>::zeros(vec![1, 6, 6, 4]);
        let k = Tensor::<f32>::zeros(vec![3, 3, 2, 3]);
        let err = conv2d(&x, &k, None, &spec).unwrap_err().to_string();
        assert!(err.contains("[1, 6, 6, 4]"), "{err}");
        let x = Tensor::<f32>::zeros(vec![1, 6, 6, 2]);
        let bad_k = Tensor::<f32>::zeros(vec![3, 3, 2, 4]);
        let err = conv2d(&x, &bad_k, None, &spec).unwrap_err().to_string();
        assert!(err.contains("[3, 3, 2, 4]") && err.contains("[1, 6, 6, 2]"), "{err}");
        let small = Tensor::<f32>::zeros(vec![1, 2, 2, 2]);
        assert!(matches!(
            conv2d(&small, &k, None, &spec),
            Err(crate::Error::Config(_))
        ));
    }
}
