//! Self-attention over the spatial positions of the exemplar embedding.
//!
//! Three bias-free 1x1 projections give `f`, `g` (reduced width `r`) and `h`
//! (full width). With `N = H * W` positions the pairwise logits are
//! `m[i][j] = f_i . g_j`, the weights `phi[., j]` are a softmax over source
//! positions `i`, and output position `j` is `sum_i phi[i][j] * h_i`.

use serde::{Deserialize, Serialize};

use crate::error::{config_err, contract, Error, Result};
use crate::layers::ConvLayer;
use crate::nn::ConvSpec;
use crate::params::ParamStore;
use crate::rng::Rng;
use crate::tensor::{Scalar, Tensor};

pub const DEFAULT_REDUCTION: usize = 16;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AttentionConfig {
    /// Width of the `f`/`g` projections.
    pub r: usize,
    /// Adds the input back onto the output. Off by default.
    pub residual: bool,
}

impl Default for AttentionConfig {
    fn default() -> Self {
        AttentionConfig {
            r: DEFAULT_REDUCTION,
            residual: false,
        }
    }
}

/// Column-stochastic `N x N` matrix: `phi[i][j]` is the weight of source
/// position `i` for output position `j`.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionMap<T = f32> {
    pub n: usize,
    pub phi: Vec<T>,
}

impl<T: Scalar> AttentionMap<T> {
    pub fn at(&self, i: usize, j: usize) -> T {
        self.phi[i * self.n + j]
    }

    pub fn identity(n: usize) -> Self {
        let mut phi = vec![T::zero(); n * n];
        for i in 0..n {
            phi[i * n + i] = T::one();
        }
        AttentionMap { n, phi }
    }

    pub fn uniform(n: usize) -> Self {
        AttentionMap {
            n,
            phi: vec![T::one() / T::from_f64(n as f64); n * n],
        }
    }
}

/// Pairwise logits `m = f g^T` for one image; `f`, `g` are `N x r` row-major.
pub fn attention_logits<T: Scalar>(f: &[T], g: &[T], n: usize, r: usize) -> Result<Vec<T>> {
    if f.len() != n * r || g.len() != n * r {
        return Err(contract!(
            "attention logits: f has {} and g has {} values, expected {n}x{r}",
            f.len(),
            g.len()
        ));
    }
    let mut m = vec![T::zero(); n * n];
    T::gemm(n, r, n, f, false, g, true, T::zero(), &mut m);
    Ok(m)
}

/// Softmax of each column of `m` (over source positions), max-stabilized.
pub fn column_softmax<T: Scalar>(m: &[T], n: usize) -> Result<AttentionMap<T>> {
    if m.len() != n * n {
        return Err(contract!("logit matrix has {} entries, expected {n}x{n}", m.len()));
    }
    if m.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite {
            context: "attention logits".into(),
        });
    }
    let mut phi = vec![T::zero(); n * n];
    for j in 0..n {
        let mut max = T::neg_infinity();
        for i in 0..n {
            max = max.max(m[i * n + j]);
        }
        let mut sum = T::zero();
        for i in 0..n {
            let e = (m[i * n + j] - max).exp();
            phi[i * n + j] = e;
            sum = sum + e;
        }
        for i in 0..n {
            phi[i * n + j] = phi[i * n + j] / sum;
        }
    }
    Ok(AttentionMap { n, phi })
}

/// Attention weights for one image from its `f` and `g` projections, each
/// shaped `(H, W, r)` or `(1, H, W, r)`.
pub fn attention_weights<T: Scalar>(f: &Tensor<T>, g: &Tensor<T>) -> Result<AttentionMap<T>> {
    if f.shape() != g.shape() {
        return Err(contract!(
            "attention weights: f {:?} and g {:?} differ",
            f.shape(),
            g.shape()
        ));
    }
    let r = *f.shape().last().ok_or_else(|| contract!("empty projection shape"))?;
    let n = f.len() / r.max(1);
    column_softmax(&attention_logits(f.data(), g.data(), n, r)?, n)
}

/// `out_j = sum_i phi[i][j] h_i`, i.e. `phi^T h`, for `h` laid out `N x C`.
pub fn attention_apply<T: Scalar>(phi: &AttentionMap<T>, h: &Tensor<T>) -> Result<Tensor<T>> {
    let c = *h.shape().last().ok_or_else(|| contract!("empty value shape"))?;
    if h.len() != phi.n * c {
        return Err(contract!(
            "attention apply: map is {n}x{n} but values have shape {:?}",
            h.shape(),
            n = phi.n
        ));
    }
    let mut out = vec![T::zero(); h.len()];
    T::gemm(phi.n, phi.n, c, &phi.phi, true, h.data(), false, T::zero(), &mut out);
    Tensor::new(h.shape().to_vec(), out)
}

#[derive(Debug, Clone)]
pub struct SelfAttention {
    pub config: AttentionConfig,
    pub channels: usize,
    f: ConvLayer,
    g: ConvLayer,
    h: ConvLayer,
}

pub struct AttentionCache<T> {
    input: Tensor<T>,
    f: Tensor<T>,
    g: Tensor<T>,
    h: Tensor<T>,
    maps: Vec<AttentionMap<T>>,
}

impl<T> AttentionCache<T> {
    pub fn maps(&self) -> &[AttentionMap<T>] {
        &self.maps
    }
}

impl SelfAttention {
    pub fn new(channels: usize, config: AttentionConfig) -> Result<Self> {
        if config.r == 0 {
            return Err(config_err!("attention.r must be positive"));
        }
        Ok(SelfAttention {
            f: ConvLayer::without_bias("attention.f", ConvSpec::square(1, 1, 0, channels, config.r)),
            g: ConvLayer::without_bias("attention.g", ConvSpec::square(1, 1, 0, channels, config.r)),
            h: ConvLayer::without_bias("attention.h", ConvSpec::square(1, 1, 0, channels, channels)),
            config,
            channels,
        })
    }

    pub fn init_params<T: Scalar>(&self, seed: u64) -> Result<ParamStore<T>> {
        let mut params = ParamStore::new();
        self.init_into(&mut params, &mut Rng::stream(seed, 0xA77E))?;
        Ok(params)
    }

    pub(crate) fn init_into<T: Scalar>(&self, params: &mut ParamStore<T>, rng: &mut Rng) -> Result<()> {
        self.f.init(params, rng)?;
        self.g.init(params, rng)?;
        self.h.init(params, rng)
    }

    pub fn kernel_names(&self) -> [String; 3] {
        [self.f.kernel_name(), self.g.kernel_name(), self.h.kernel_name()]
    }

    /// `(f, g, h)` projections of a batch.
    pub fn projections<T: Scalar>(
        &self,
        x: &Tensor<T>,
        params: &ParamStore<T>,
    ) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
        let (_, _, _, c) = x.dims4()?;
        if c != self.channels {
            return Err(contract!(
                "attention expects {} channels, got shape {:?}",
                self.channels,
                x.shape()
            ));
        }
        Ok((
            self.f.forward(x, params)?,
            self.g.forward(x, params)?,
            self.h.forward(x, params)?,
        ))
    }

    pub fn forward<T: Scalar>(
        &self,
        x: &Tensor<T>,
        params: &ParamStore<T>,
    ) -> Result<(Tensor<T>, AttentionCache<T>)> {
        let (f, g, h) = self.projections(x, params)?;
        let (b, hh, ww, c) = x.dims4()?;
        let n = hh * ww;
        let r = self.config.r;
        let mut out = vec![T::zero(); x.len()];
        let mut maps = Vec::with_capacity(b);
        for item in 0..b {
            let m = attention_logits(f.item(item), g.item(item), n, r)?;
            let phi = column_softmax(&m, n)?;
            T::gemm(n, n, c, &phi.phi, true, h.item(item), false, T::zero(), &mut out[item * n * c..][..n * c]);
            maps.push(phi);
        }
        if self.config.residual {
            for (o, &v) in out.iter_mut().zip(x.data()) {
                *o = *o + v;
            }
        }
        let out = Tensor::new(x.shape().to_vec(), out)?;
        out.check_finite("attention output")?;
        Ok((
            out,
            AttentionCache {
                input: x.clone(),
                f,
                g,
                h,
                maps,
            },
        ))
    }

    pub fn backward<T: Scalar>(
        &self,
        cache: &AttentionCache<T>,
        upstream: &Tensor<T>,
        params: &ParamStore<T>,
        grads: &mut ParamStore<T>,
    ) -> Result<Tensor<T>> {
        upstream.same_shape(&cache.input, "attention backward")?;
        let (b, hh, ww, c) = cache.input.dims4()?;
        let n = hh * ww;
        let r = self.config.r;
        let mut df = Tensor::zeros(cache.f.shape().to_vec());
        let mut dg = Tensor::zeros(cache.g.shape().to_vec());
        let mut dh = Tensor::zeros(cache.h.shape().to_vec());
        for item in 0..b {
            let phi = &cache.maps[item].phi;
            let dout = upstream.item(item);
            // out = phi^T h  =>  dh = phi dout,  dphi = h dout^T
            T::gemm(n, n, c, phi, false, dout, false, T::zero(), dh.item_mut(item));
            let mut dphi = vec![T::zero(); n * n];
            T::gemm(n, c, n, cache.h.item(item), false, dout, true, T::zero(), &mut dphi);
            // column softmax backward
            let mut dm = vec![T::zero(); n * n];
            for j in 0..n {
                let dot: T = (0..n).map(|i| phi[i * n + j] * dphi[i * n + j]).sum();
                for i in 0..n {
                    dm[i * n + j] = phi[i * n + j] * (dphi[i * n + j] - dot);
                }
            }
            // m = f g^T  =>  df = dm g,  dg = dm^T f
            T::gemm(n, n, r, &dm, false, cache.g.item(item), false, T::zero(), df.item_mut(item));
            T::gemm(n, n, r, &dm, true, cache.f.item(item), false, T::zero(), dg.item_mut(item));
        }
        let mut dx = self
            .f
            .backward(&cache.input, &df, params, grads, true)?
            .expect("input gradient requested");
        dx.add_assign(&self.g.backward(&cache.input, &dg, params, grads, true)?.expect("requested"))?;
        dx.add_assign(&self.h.backward(&cache.input, &dh, params, grads, true)?.expect("requested"))?;
        if self.config.residual {
            dx.add_assign(upstream)?;
        }
        Ok(dx)
    }
}
