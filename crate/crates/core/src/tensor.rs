use std::fmt;

use num_traits::Float;

use crate::error::{contract, Error, Result};

/// Floating-point element type. `f32` is the working precision; `f64` exists
/// for gradient verification.
pub trait Scalar:
    Float + Default + fmt::Debug + fmt::Display + Send + Sync + std::iter::Sum + 'static
{
    const NAME: &'static str;

    fn from_f64(v: f64) -> Self;
    fn as_f64(self) -> f64;

    /// `C = alpha * op(A) * op(B) + beta * C` with row-major operands.
    /// `A` is `m x k` after `op`, `B` is `k x n` after `op`.
    #[allow(clippy::too_many_arguments)]
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        a: &[Self],
        trans_a: bool,
        b: &[Self],
        trans_b: bool,
        beta: Self,
        c: &mut [Self],
    );
}

macro_rules! impl_scalar {
    ($t:ty, $name:expr, $gemm:path) => {
        impl Scalar for $t {
            const NAME: &'static str = $name;

            #[inline]
            fn from_f64(v: f64) -> Self {
                v as $t
            }

            #[inline]
            fn as_f64(self) -> f64 {
                self as f64
            }

            fn gemm(
                m: usize,
                k: usize,
                n: usize,
                a: &[Self],
                trans_a: bool,
                b: &[Self],
                trans_b: bool,
                beta: Self,
                c: &mut [Self],
            ) {
                assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
                if m == 0 || n == 0 {
                    return;
                }
                if !trans_b && narrow_gemm(m, k, n, a, trans_a, b, beta, c) {
                    return;
                }
                let (rsa, csa) = if trans_a { (1, m as isize) } else { (k as isize, 1) };
                let (rsb, csb) = if trans_b { (1, k as isize) } else { (n as isize, 1) };
                // SAFETY: slice lengths checked above; strides describe
                // in-bounds row-major (or transposed) views of those slices.
                unsafe {
                    $gemm(
                        m,
                        k,
                        n,
                        1.0,
                        a.as_ptr(),
                        rsa,
                        csa,
                        b.as_ptr(),
                        rsb,
                        csb,
                        beta,
                        c.as_mut_ptr(),
                        n as isize,
                        1,
                    );
                }
            }
        }
    };
}

/// `C = beta * C + A B` for a `B` with exactly `N` columns, four rows of
/// `C` at a time. Plain multiply and add, so every code path rounds alike.
#[inline(always)]
fn narrow_kernel<T: Scalar, const N: usize>(m: usize, k: usize, a: &[T], b: &[T], beta: T, c: &mut [T]) {
    let store = |dst: &mut [T], acc: &[T; N]| {
        if beta == T::zero() {
            dst.copy_from_slice(acc);
        } else {
            for (d, &s) in dst.iter_mut().zip(acc) {
                *d = beta * *d + s;
            }
        }
    };
    let mut i = 0;
    while i + 4 <= m {
        let mut acc = [[T::zero(); N]; 4];
        let rows = [&a[i * k..][..k], &a[(i + 1) * k..][..k], &a[(i + 2) * k..][..k], &a[(i + 3) * k..][..k]];
        for kk in 0..k {
            let br: &[T; N] = b[kk * N..][..N].try_into().expect("row of N");
            for r in 0..4 {
                let av = rows[r][kk];
                for j in 0..N {
                    acc[r][j] = acc[r][j] + av * br[j];
                }
            }
        }
        for (r, acc) in acc.iter().enumerate() {
            store(&mut c[(i + r) * N..][..N], acc);
        }
        i += 4;
    }
    while i < m {
        let mut acc = [T::zero(); N];
        for kk in 0..k {
            let av = a[i * k + kk];
            for j in 0..N {
                acc[j] = acc[j] + av * b[kk * N + j];
            }
        }
        store(&mut c[i * N..][..N], &acc);
        i += 1;
    }
}

/// `C = beta * C + A^T B` with `A` stored `k x m`: rank-one updates of a
/// small `C` that stays in cache.
#[inline(always)]
fn narrow_kernel_tn<T: Scalar, const N: usize>(m: usize, k: usize, a: &[T], b: &[T], beta: T, c: &mut [T]) {
    let c = &mut c[..m * N];
    if beta == T::zero() {
        c.fill(T::zero());
    } else if beta != T::one() {
        c.iter_mut().for_each(|v| *v = beta * *v);
    }
    for kk in 0..k {
        let br: &[T; N] = b[kk * N..][..N].try_into().expect("row of N");
        let arow = &a[kk * m..][..m];
        for (crow, &av) in c.chunks_exact_mut(N).zip(arow) {
            for j in 0..N {
                crow[j] = crow[j] + av * br[j];
            }
        }
    }
}

#[inline(always)]
fn narrow_dispatch<T: Scalar, const N: usize>(m: usize, k: usize, a: &[T], trans_a: bool, b: &[T], beta: T, c: &mut [T]) {
    if trans_a {
        narrow_kernel_tn::<T, N>(m, k, a, b, beta, c)
    } else {
        narrow_kernel::<T, N>(m, k, a, b, beta, c)
    }
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx2")]
unsafe fn narrow_avx2<T: Scalar, const N: usize>(m: usize, k: usize, a: &[T], trans_a: bool, b: &[T], beta: T, c: &mut [T]) {
    narrow_dispatch::<T, N>(m, k, a, trans_a, b, beta, c)
}

fn narrow_run<T: Scalar, const N: usize>(m: usize, k: usize, a: &[T], trans_a: bool, b: &[T], beta: T, c: &mut [T]) {
    #[cfg(target_arch = "x86_64")]
    if std::arch::is_x86_feature_detected!("avx2") {
        // SAFETY: the feature was detected at runtime.
        unsafe { narrow_avx2::<T, N>(m, k, a, trans_a, b, beta, c) };
        return;
    }
    narrow_dispatch::<T, N>(m, k, a, trans_a, b, beta, c)
}

/// Products with a narrow `B`, where a general packed gemm spends most of
/// its time packing. Returns false when `n` is not handled.
#[allow(clippy::too_many_arguments)]
fn narrow_gemm<T: Scalar>(m: usize, k: usize, n: usize, a: &[T], trans_a: bool, b: &[T], beta: T, c: &mut [T]) -> bool {
    macro_rules! dispatch {
        ($($w:literal)*) => {
            match n {
                $($w => narrow_run::<T, $w>(m, k, a, trans_a, b, beta, c),)*
                _ => return false,
            }
        };
    }
    dispatch!(1 2 3 4 5 6 7 8 9 10 11 12 13 14 15 16 17 18 19 20 21 22 23 24 25 26 27 28 29 30 31 32);
    true
}

impl_scalar!(f32, "f32", matrixmultiply::sgemm);
impl_scalar!(f64, "f64", matrixmultiply::dgemm);

/// Dense row-major array. Activations use the (batch, height, width,
/// channels) layout; convolution kernels are (kh, kw, in, out).
#[derive(Clone, PartialEq)]
pub struct Tensor<T = f32> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T> fmt::Debug for Tensor<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Tensor<{}>{:?}", std::any::type_name::<T>(), self.shape)
    }
}

impl<T: Scalar> Tensor<T> {
    pub fn new(shape: impl Into<Vec<usize>>, data: Vec<T>) -> Result<Self> {
        let shape = shape.into();
        if shape.len() > 4 {
            return Err(contract!("tensor order {} exceeds 4", shape.len()));
        }
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(contract!(
                "shape {:?} holds {} elements but data has {}",
                shape,
                numel,
                data.len()
            ));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: impl Into<Vec<usize>>) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn full(shape: impl Into<Vec<usize>>, value: T) -> Self {
        let shape = shape.into();
        let n = shape.iter().product();
        Tensor {
            shape,
            data: vec![value; n],
        }
    }

    pub fn from_fn(shape: impl Into<Vec<usize>>, mut f: impl FnMut(usize) -> T) -> Self {
        let shape = shape.into();
        let n: usize = shape.iter().product();
        Tensor {
            shape,
            data: (0..n).map(&mut f).collect(),
        }
    }

    pub fn scalar(v: T) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![v],
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Activation dimensions `(batch, height, width, channels)`.
    pub fn dims4(&self) -> Result<(usize, usize, usize, usize)> {
        match self.shape[..] {
            [b, h, w, c] => Ok((b, h, w, c)),
            _ => Err(contract!("expected a 4-D activation, got shape {:?}", self.shape)),
        }
    }

    pub fn reshape(mut self, shape: impl Into<Vec<usize>>) -> Result<Self> {
        let shape = shape.into();
        if shape.iter().product::<usize>() != self.data.len() {
            return Err(contract!("cannot reshape {:?} to {:?}", self.shape, shape));
        }
        self.shape = shape;
        Ok(self)
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| U::from_f64(x.as_f64())).collect(),
        }
    }

    /// Element-wise `self += other`.
    pub fn add_assign(&mut self, other: &Tensor<T>) -> Result<()> {
        self.same_shape(other, "add")?;
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a = *a + b;
        }
        Ok(())
    }

    pub fn same_shape(&self, other: &Tensor<T>, what: &str) -> Result<()> {
        if self.shape != other.shape {
            return Err(contract!(
                "{what}: shape {:?} does not match {:?}",
                self.shape,
                other.shape
            ));
        }
        Ok(())
    }

    pub fn sum(&self) -> T {
        self.data.iter().copied().sum()
    }

    pub fn norm(&self) -> f64 {
        self.data.iter().map(|x| x.as_f64().powi(2)).sum::<f64>().sqrt()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, x| m.max(x.as_f64().abs()))
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn check_finite(&self, context: &str) -> Result<()> {
        if self.all_finite() {
            Ok(())
        } else {
            Err(Error::NonFinite {
                context: context.to_string(),
            })
        }
    }

    /// Slice of batch item `b` of an activation.
    pub fn item(&self, b: usize) -> &[T] {
        let per = self.data.len() / self.shape[0];
        &self.data[b * per..(b + 1) * per]
    }

    pub fn item_mut(&mut self, b: usize) -> &mut [T] {
        let per = self.data.len() / self.shape[0];
        &mut self.data[b * per..(b + 1) * per]
    }

    /// Copy of channels `[start, start + count)` of an activation.
    pub fn channel_slice(&self, start: usize, count: usize) -> Result<Self> {
        let (b, h, w, c) = self.dims4()?;
        if start + count > c {
            return Err(contract!(
                "channel slice {start}..{} out of range for {c} channels",
                start + count
            ));
        }
        let mut out = Vec::with_capacity(b * h * w * count);
        for px in self.data.chunks_exact(c) {
            out.extend_from_slice(&px[start..start + count]);
        }
        Tensor::new(vec![b, h, w, count], out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_inconsistent_data() {
        assert!(Tensor::<f32>::new(vec![2, 3], vec![0.0; 5]).is_err());
        assert!(Tensor::<f32>::new(vec![1, 1, 1, 1, 1], vec![0.0]).is_err());
        assert!(Tensor::<f32>::new(vec![2, 3], vec![0.0; 6]).is_ok());
    }

    #[test]
    fn gemm_transposes() {
        // A = [[1,2,3],[4,5,6]], B = [[1,0],[0,1],[1,1]]
        let a = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0];
        let b = [1.0, 0.0, 0.0, 1.0, 1.0, 1.0];
        let mut c = [0.0f64; 4];
        f64::gemm(2, 3, 2, &a, false, &b, false, 0.0, &mut c);
        assert_eq!(c, [4.0, 5.0, 10.0, 11.0]);

        // A^T stored as 3x2, B^T stored as 2x3.
        let at = [1.0, 4.0, 2.0, 5.0, 3.0, 6.0];
        let bt = [1.0, 0.0, 1.0, 0.0, 1.0, 1.0];
        let mut c2 = [1.0f64; 4];
        f64::gemm(2, 3, 2, &at, true, &bt, true, 1.0, &mut c2);
        assert_eq!(c2, [5.0, 6.0, 11.0, 12.0]);
    }

    #[test]
    fn narrow_path_matches_reference() {
        let mut rng = crate::rng::Rng::new(9);
        for &(m, k, n) in &[(7, 5, 3), (13, 9, 8), (4, 1, 32), (9, 17, 33)] {
            let a: Vec<f64> = (0..m * k).map(|_| rng.normal()).collect();
            let b: Vec<f64> = (0..k * n).map(|_| rng.normal()).collect();
            let mut c: Vec<f64> = (0..m * n).map(|_| rng.normal()).collect();
            let mut want = c.clone();
            for i in 0..m {
                for j in 0..n {
                    let dot: f64 = (0..k).map(|kk| a[i * k + kk] * b[kk * n + j]).sum();
                    want[i * n + j] = 0.5 * want[i * n + j] + dot;
                }
            }
            let mut ct = c.clone();
            f64::gemm(m, k, n, &a, false, &b, false, 0.5, &mut c);
            for (x, y) in c.iter().zip(&want) {
                assert!((x - y).abs() < 1e-12);
            }
            let at: Vec<f64> = (0..k * m).map(|i| a[(i % m) * k + i / m]).collect();
            f64::gemm(m, k, n, &at, true, &b, false, 0.5, &mut ct);
            for (x, y) in ct.iter().zip(&want) {
                assert!((x - y).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn channel_slice_picks_channels() {
        let t = Tensor::<f32>::from_fn(vec![1, 1, 2, 3], |i| i as f32);
        let s = t.channel_slice(1, 2).unwrap();
        assert_eq!(s.shape(), &[1, 1, 2, 2]);
        assert_eq!(s.data(), &[1.0, 2.0, 4.0, 5.0]);
    }
}
