//! Parameter-bound layer wrappers shared by the backbone and attention
//! modules. Each forward returns a cache that its backward consumes.

use crate::error::Result;
use crate::nn::{self, BnCache, BnMode, ConvSpec, DropoutMode};
use crate::params::{ParamKind, ParamStore};
use crate::rng::{derive_key, Rng};
use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Infer,
}

/// Per-pass state: mode, dropout keys, and batch-norm running-stat updates
/// produced in train mode (applied by the caller after the pass).
#[derive(Debug)]
pub struct ForwardCtx<T> {
    pub mode: Mode,
    dropout_key: u64,
    dropout_sites: u64,
    pub bn_updates: Vec<(String, Vec<T>, Vec<T>)>,
}

impl<T: Scalar> ForwardCtx<T> {
    pub fn new(mode: Mode, dropout_key: u64) -> Self {
        ForwardCtx {
            mode,
            dropout_key,
            dropout_sites: 0,
            bn_updates: Vec::new(),
        }
    }

    pub fn infer() -> Self {
        Self::new(Mode::Infer, 0)
    }

    pub fn train(dropout_key: u64) -> Self {
        Self::new(Mode::Train, dropout_key)
    }

    fn bn_mode(&self) -> BnMode {
        match self.mode {
            Mode::Train => BnMode::Train,
            Mode::Infer => BnMode::Infer,
        }
    }

    /// Each dropout call site gets its own mask key, in call order.
    fn next_dropout(&mut self) -> DropoutMode {
        match self.mode {
            Mode::Train => {
                let seed = derive_key(self.dropout_key, self.dropout_sites);
                self.dropout_sites += 1;
                DropoutMode::Train { seed }
            }
            Mode::Infer => DropoutMode::Infer,
        }
    }

    /// Writes the collected running statistics into `params`.
    pub fn apply_bn_updates(&mut self, params: &mut ParamStore<T>) -> Result<()> {
        for (name, mean, var) in self.bn_updates.drain(..) {
            let m = params.get_mut(&format!("{name}.running_mean"))?;
            let shape = m.shape().to_vec();
            *m = Tensor::new(shape.clone(), mean)?;
            *params.get_mut(&format!("{name}.running_var"))? = Tensor::new(shape, var)?;
        }
        Ok(())
    }
}

/// He (fan-in) normal initialization.
pub(crate) fn he_normal<T: Scalar>(shape: Vec<usize>, fan_in: usize, rng: &mut Rng) -> Tensor<T> {
    let std = (2.0 / fan_in as f64).sqrt();
    Tensor::from_fn(shape, |_| T::from_f64(rng.normal() * std))
}

#[derive(Debug, Clone)]
pub struct ConvLayer {
    pub name: String,
    pub spec: ConvSpec,
    pub bias: bool,
}

impl ConvLayer {
    pub fn new(name: impl Into<String>, spec: ConvSpec) -> Self {
        ConvLayer {
            name: name.into(),
            spec,
            bias: true,
        }
    }

    pub fn without_bias(name: impl Into<String>, spec: ConvSpec) -> Self {
        ConvLayer {
            bias: false,
            ..Self::new(name, spec)
        }
    }

    pub fn kernel_name(&self) -> String {
        format!("{}.kernel", self.name)
    }

    pub fn bias_name(&self) -> String {
        format!("{}.bias", self.name)
    }

    pub fn init<T: Scalar>(&self, params: &mut ParamStore<T>, rng: &mut Rng) -> Result<()> {
        params.insert(
            self.kernel_name(),
            he_normal(self.spec.kernel_shape().to_vec(), self.spec.fan_in(), rng),
            ParamKind::Learnable,
        )?;
        if self.bias {
            params.insert(
                self.bias_name(),
                Tensor::zeros(vec![self.spec.out_channels]),
                ParamKind::Learnable,
            )?;
        }
        Ok(())
    }

    pub fn forward<T: Scalar>(&self, x: &Tensor<T>, params: &ParamStore<T>) -> Result<Tensor<T>> {
        let bias = if self.bias {
            Some(params.get(&self.bias_name())?)
        } else {
            None
        };
        nn::conv2d(x, params.get(&self.kernel_name())?, bias, &self.spec)
    }

    /// Accumulates parameter gradients; returns the input gradient when asked.
    pub fn backward<T: Scalar>(
        &self,
        input: &Tensor<T>,
        upstream: &Tensor<T>,
        params: &ParamStore<T>,
        grads: &mut ParamStore<T>,
        need_input: bool,
    ) -> Result<Option<Tensor<T>>> {
        let g = nn::conv2d_backward(
            input,
            params.get(&self.kernel_name())?,
            &self.spec,
            upstream,
            need_input,
        )?;
        grads.accumulate(&self.kernel_name(), &g.kernel)?;
        if self.bias {
            grads.accumulate(&self.bias_name(), &g.bias)?;
        }
        Ok(g.input)
    }
}

#[derive(Debug, Clone)]
pub struct BnLayer {
    pub name: String,
    pub channels: usize,
}

impl BnLayer {
    pub fn new(name: impl Into<String>, channels: usize) -> Self {
        BnLayer {
            name: name.into(),
            channels,
        }
    }

    fn key(&self, field: &str) -> String {
        format!("{}.{field}", self.name)
    }

    pub fn init<T: Scalar>(&self, params: &mut ParamStore<T>) -> Result<()> {
        let c = self.channels;
        params.insert(self.key("gamma"), Tensor::full(vec![c], T::one()), ParamKind::Learnable)?;
        params.insert(self.key("beta"), Tensor::zeros(vec![c]), ParamKind::Learnable)?;
        params.insert(self.key("running_mean"), Tensor::zeros(vec![c]), ParamKind::Buffer)?;
        params.insert(self.key("running_var"), Tensor::full(vec![c], T::one()), ParamKind::Buffer)?;
        Ok(())
    }

    pub fn forward<T: Scalar>(
        &self,
        x: &Tensor<T>,
        params: &ParamStore<T>,
        ctx: &mut ForwardCtx<T>,
    ) -> Result<(Tensor<T>, BnCache<T>)> {
        let out = nn::batch_norm(
            x,
            params.get(&self.key("gamma"))?,
            params.get(&self.key("beta"))?,
            params.get(&self.key("running_mean"))?,
            params.get(&self.key("running_var"))?,
            ctx.bn_mode(),
        )?;
        if let Some((m, v)) = out.running {
            ctx.bn_updates.push((self.name.clone(), m, v));
        }
        Ok((out.output, out.cache))
    }

    pub fn backward<T: Scalar>(
        &self,
        cache: &BnCache<T>,
        upstream: &Tensor<T>,
        params: &ParamStore<T>,
        grads: &mut ParamStore<T>,
    ) -> Result<Tensor<T>> {
        let g = nn::batch_norm_backward(cache, params.get(&self.key("gamma"))?, upstream)?;
        grads.accumulate(&self.key("gamma"), &g.gamma)?;
        grads.accumulate(&self.key("beta"), &g.beta)?;
        Ok(g.input)
    }
}

/// BN -> ReLU -> conv, the pre-activation unit used throughout the branch.
#[derive(Debug, Clone)]
pub struct PreActConv {
    pub bn: BnLayer,
    pub conv: ConvLayer,
}

#[derive(Debug, Clone)]
pub struct PreActCache<T> {
    bn: BnCache<T>,
    normalized: Tensor<T>,
    activated: Tensor<T>,
}

impl PreActConv {
    pub fn new(name: &str, spec: ConvSpec) -> Self {
        PreActConv {
            bn: BnLayer::new(format!("{name}.bn"), spec.in_channels),
            conv: ConvLayer::new(format!("{name}.conv"), spec),
        }
    }

    pub fn init<T: Scalar>(&self, params: &mut ParamStore<T>, rng: &mut Rng) -> Result<()> {
        self.bn.init(params)?;
        self.conv.init(params, rng)
    }

    pub fn forward<T: Scalar>(
        &self,
        x: &Tensor<T>,
        params: &ParamStore<T>,
        ctx: &mut ForwardCtx<T>,
    ) -> Result<(Tensor<T>, PreActCache<T>)> {
        let (normalized, bn) = self.bn.forward(x, params, ctx)?;
        let activated = nn::relu(&normalized);
        let out = self.conv.forward(&activated, params)?;
        Ok((
            out,
            PreActCache {
                bn,
                normalized,
                activated,
            },
        ))
    }

    pub fn backward<T: Scalar>(
        &self,
        cache: &PreActCache<T>,
        upstream: &Tensor<T>,
        params: &ParamStore<T>,
        grads: &mut ParamStore<T>,
    ) -> Result<Tensor<T>> {
        let d_act = self
            .conv
            .backward(&cache.activated, upstream, params, grads, true)?
            .expect("input gradient requested");
        let d_norm = nn::relu_backward(&cache.normalized, &d_act)?;
        self.bn.backward(&cache.bn, &d_norm, params, grads)
    }
}

/// Dropout bound to the context's per-site mask keys.
#[derive(Debug, Clone, Copy)]
pub struct DropoutLayer {
    pub rate: f64,
}

impl DropoutLayer {
    pub fn forward<T: Scalar>(
        &self,
        x: &Tensor<T>,
        ctx: &mut ForwardCtx<T>,
    ) -> Result<(Tensor<T>, DropoutMode)> {
        let mode = ctx.next_dropout();
        Ok((nn::dropout(x, self.rate, mode)?, mode))
    }

    pub fn backward<T: Scalar>(&self, mode: DropoutMode, upstream: &Tensor<T>) -> Result<Tensor<T>> {
        nn::dropout_backward(upstream, self.rate, mode)
    }
}
