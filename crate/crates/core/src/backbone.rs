//! The densely-connected Siamese branch:
//! stem conv -> dense block 1 -> transition -> dense block 2 -> transition
//! -> dense block 3 -> block 4.
//!
//! With [`BackboneConfig::full`] a 127x127 exemplar yields the stage shapes
//! `61x61x72, 61x61x144, 30x30x36, 30x30x180, 15x15x36, 15x15x252, 9x9x128`
//! and a 255x255 search image ends at `25x25x128`. Total stride is 8.

use serde::{Deserialize, Serialize};

use crate::error::{config_err, contract, Result};
use crate::layers::{ConvLayer, DropoutLayer, ForwardCtx, PreActCache, PreActConv};
use crate::nn::{self, ConvSpec, DropoutMode};
use crate::params::ParamStore;
use crate::rng::Rng;
use crate::tensor::{Scalar, Tensor};

pub const STEM_CHANNELS: usize = 72;
pub const GROWTH_RATE: usize = 36;
pub const BOTTLENECK_FACTOR: usize = 4;
pub const TRANSITION_CHANNELS: usize = 36;
pub const EMBED_CHANNELS: usize = 128;
pub const BLOCK_LAYERS: [usize; 3] = [2, 4, 6];
pub const TOTAL_STRIDE: usize = 8;
pub const EXEMPLAR_SIZE: usize = 127;
pub const SEARCH_SIZE: usize = 255;
pub const DEFAULT_DROPOUT: f64 = 0.2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Block4Mode {
    /// 7x7 valid conv followed by two 1x1 convs.
    Pointwise,
    /// 7x7 valid conv followed by two 7x7 convs with padding 3.
    Pad,
}

/// Channel widths and regularization of the branch. The spatial topology
/// (kernels, strides, padding, layer counts) is fixed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BackboneConfig {
    pub stem_channels: usize,
    pub growth_rate: usize,
    pub bottleneck_factor: usize,
    pub transition_channels: usize,
    pub embed_channels: usize,
    pub block4_mode: Block4Mode,
    pub dropout: f64,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self::full()
    }
}

impl BackboneConfig {
    /// Full channel widths.
    pub fn full() -> Self {
        BackboneConfig {
            stem_channels: STEM_CHANNELS,
            growth_rate: GROWTH_RATE,
            bottleneck_factor: BOTTLENECK_FACTOR,
            transition_channels: TRANSITION_CHANNELS,
            embed_channels: EMBED_CHANNELS,
            block4_mode: Block4Mode::Pointwise,
            dropout: DEFAULT_DROPOUT,
        }
    }

    /// Same topology at reduced width, cheap enough to train on one core.
    pub fn toy() -> Self {
        BackboneConfig {
            stem_channels: 8,
            growth_rate: 4,
            bottleneck_factor: 4,
            transition_channels: 8,
            embed_channels: 16,
            block4_mode: Block4Mode::Pointwise,
            dropout: DEFAULT_DROPOUT,
        }
    }

    pub fn is_full(&self) -> bool {
        self.stem_channels == STEM_CHANNELS
            && self.growth_rate == GROWTH_RATE
            && self.bottleneck_factor == BOTTLENECK_FACTOR
            && self.transition_channels == TRANSITION_CHANNELS
            && self.embed_channels == EMBED_CHANNELS
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("stem_channels", self.stem_channels),
            ("growth_rate", self.growth_rate),
            ("bottleneck_factor", self.bottleneck_factor),
            ("transition_channels", self.transition_channels),
            ("embed_channels", self.embed_channels),
        ] {
            if v == 0 {
                return Err(config_err!("backbone.{name} must be positive"));
            }
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(config_err!("backbone.dropout {} outside [0, 1)", self.dropout));
        }
        Ok(())
    }
}

/// BN -> ReLU -> 1x1 conv (bottleneck) -> BN -> ReLU -> 3x3 conv (pad 1)
/// -> dropout; emits `growth_rate` channels at unchanged spatial size.
#[derive(Debug, Clone)]
pub struct DenseLayer {
    pub in_channels: usize,
    bottleneck: PreActConv,
    conv: PreActConv,
    dropout: DropoutLayer,
}

pub struct DenseLayerCache<T> {
    bottleneck: PreActCache<T>,
    conv: PreActCache<T>,
    dropout: DropoutMode,
}

impl DenseLayer {
    pub fn new(name: &str, in_channels: usize, cfg: &BackboneConfig) -> Self {
        let mid = cfg.bottleneck_factor * cfg.growth_rate;
        DenseLayer {
            in_channels,
            bottleneck: PreActConv::new(&format!("{name}.bottleneck"), ConvSpec::square(1, 1, 0, in_channels, mid)),
            conv: PreActConv::new(&format!("{name}.conv3"), ConvSpec::square(3, 1, 1, mid, cfg.growth_rate)),
            dropout: DropoutLayer { rate: cfg.dropout },
        }
    }

    pub fn out_channels(&self) -> usize {
        self.conv.conv.spec.out_channels
    }

    pub fn init<T: Scalar>(&self, params: &mut ParamStore<T>, rng: &mut Rng) -> Result<()> {
        self.bottleneck.init(params, rng)?;
        self.conv.init(params, rng)
    }

    pub fn forward<T: Scalar>(
        &self,
        x: &Tensor<T>,
        params: &ParamStore<T>,
        ctx: &mut ForwardCtx<T>,
    ) -> Result<(Tensor<T>, DenseLayerCache<T>)> {
        let (_, _, _, c) = x.dims4()?;
        if c != self.in_channels {
            return Err(contract!(
                "dense layer `{}` expects {} input channels, got shape {:?}",
                self.bottleneck.bn.name,
                self.in_channels,
                x.shape()
            ));
        }
        let (mid, bottleneck) = self.bottleneck.forward(x, params, ctx)?;
        let (y, conv) = self.conv.forward(&mid, params, ctx)?;
        let (y, dropout) = self.dropout.forward(&y, ctx)?;
        Ok((
            y,
            DenseLayerCache {
                bottleneck,
                conv,
                dropout,
            },
        ))
    }

    pub fn backward<T: Scalar>(
        &self,
        cache: &DenseLayerCache<T>,
        upstream: &Tensor<T>,
        params: &ParamStore<T>,
        grads: &mut ParamStore<T>,
    ) -> Result<Tensor<T>> {
        let d = self.dropout.backward(cache.dropout, upstream)?;
        let d = self.conv.backward(&cache.conv, &d, params, grads)?;
        self.bottleneck.backward(&cache.bottleneck, &d, params, grads)
    }
}

#[derive(Debug, Clone)]
pub struct DenseBlock {
    pub in_channels: usize,
    pub layers: Vec<DenseLayer>,
}

pub struct DenseBlockCache<T> {
    layers: Vec<DenseLayerCache<T>>,
    widths: Vec<usize>,
}

impl DenseBlock {
    pub fn new(name: &str, in_channels: usize, num_layers: usize, cfg: &BackboneConfig) -> Self {
        let layers = (0..num_layers)
            .map(|i| DenseLayer::new(&format!("{name}.layer{i}"), in_channels + i * cfg.growth_rate, cfg))
            .collect();
        DenseBlock {
            in_channels,
            layers,
        }
    }

    pub fn out_channels(&self) -> usize {
        self.in_channels + self.layers.iter().map(|l| l.out_channels()).sum::<usize>()
    }

    fn init<T: Scalar>(&self, params: &mut ParamStore<T>, rng: &mut Rng) -> Result<()> {
        self.layers.iter().try_for_each(|l| l.init(params, rng))
    }

    /// Output is `concat(x, y_1, ..., y_L)` where layer `l` sees
    /// `concat(x, y_1, ..., y_{l-1})`.
    pub fn forward<T: Scalar>(
        &self,
        x: &Tensor<T>,
        params: &ParamStore<T>,
        ctx: &mut ForwardCtx<T>,
    ) -> Result<(Tensor<T>, DenseBlockCache<T>)> {
        let mut features = x.clone();
        let mut caches = Vec::with_capacity(self.layers.len());
        let mut widths = vec![self.in_channels];
        for layer in &self.layers {
            let (y, cache) = layer.forward(&features, params, ctx)?;
            widths.push(layer.out_channels());
            features = nn::concat(&[&features, &y])?;
            caches.push(cache);
        }
        Ok((
            features,
            DenseBlockCache {
                layers: caches,
                widths,
            },
        ))
    }

    pub fn backward<T: Scalar>(
        &self,
        cache: &DenseBlockCache<T>,
        upstream: &Tensor<T>,
        params: &ParamStore<T>,
        grads: &mut ParamStore<T>,
    ) -> Result<Tensor<T>> {
        // pieces[0] is the block input, pieces[l] the output of layer l-1.
        let mut pieces = nn::split_channels(upstream, &cache.widths)?;
        for (l, layer) in self.layers.iter().enumerate().rev() {
            let d_in = layer.backward(&cache.layers[l], &pieces[l + 1], params, grads)?;
            let parts = nn::split_channels(&d_in, &cache.widths[..=l])?;
            for (acc, part) in pieces.iter_mut().zip(&parts) {
                acc.add_assign(part)?;
            }
        }
        Ok(pieces.swap_remove(0))
    }
}

/// 1x1 conv -> 2x2 stride-2 average pool -> dropout.
#[derive(Debug, Clone)]
pub struct Transition {
    conv: ConvLayer,
    dropout: DropoutLayer,
}

pub struct TransitionCache<T> {
    input: Tensor<T>,
    conv_shape: Vec<usize>,
    dropout: DropoutMode,
}

impl Transition {
    pub fn new(name: &str, in_channels: usize, cfg: &BackboneConfig) -> Self {
        Transition {
            conv: ConvLayer::new(
                format!("{name}.conv"),
                ConvSpec::square(1, 1, 0, in_channels, cfg.transition_channels),
            ),
            dropout: DropoutLayer { rate: cfg.dropout },
        }
    }

    pub fn out_channels(&self) -> usize {
        self.conv.spec.out_channels
    }

    pub fn forward<T: Scalar>(
        &self,
        x: &Tensor<T>,
        params: &ParamStore<T>,
        ctx: &mut ForwardCtx<T>,
    ) -> Result<(Tensor<T>, TransitionCache<T>)> {
        let (_, h, w, _) = x.dims4()?;
        if h < 2 || w < 2 {
            return Err(config_err!("transition needs spatial extent >= 2, got {:?}", x.shape()));
        }
        let y = self.conv.forward(x, params)?;
        let conv_shape = y.shape().to_vec();
        let y = nn::avg_pool2d(&y, 2, 2)?;
        let (y, dropout) = self.dropout.forward(&y, ctx)?;
        Ok((
            y,
            TransitionCache {
                input: x.clone(),
                conv_shape,
                dropout,
            },
        ))
    }

    pub fn backward<T: Scalar>(
        &self,
        cache: &TransitionCache<T>,
        upstream: &Tensor<T>,
        params: &ParamStore<T>,
        grads: &mut ParamStore<T>,
    ) -> Result<Tensor<T>> {
        let d = self.dropout.backward(cache.dropout, upstream)?;
        let d = nn::avg_pool2d_backward(&cache.conv_shape, 2, 2, &d)?;
        Ok(self
            .conv
            .backward(&cache.input, &d, params, grads, true)?
            .expect("input gradient requested"))
    }
}

/// Three pre-activation convolutions to the embedding width: one 7x7 valid
/// conv, then two shape-preserving convs (1x1, or 7x7 padded by 3).
#[derive(Debug, Clone)]
pub struct Block4 {
    convs: Vec<PreActConv>,
}

impl Block4 {
    pub fn new(name: &str, in_channels: usize, cfg: &BackboneConfig) -> Self {
        let e = cfg.embed_channels;
        let tail = match cfg.block4_mode {
            Block4Mode::Pointwise => ConvSpec::square(1, 1, 0, e, e),
            Block4Mode::Pad => ConvSpec::square(7, 1, 3, e, e),
        };
        Block4 {
            convs: vec![
                PreActConv::new(&format!("{name}.unit0"), ConvSpec::square(7, 1, 0, in_channels, e)),
                PreActConv::new(&format!("{name}.unit1"), tail),
                PreActConv::new(&format!("{name}.unit2"), tail),
            ],
        }
    }

    pub fn forward<T: Scalar>(
        &self,
        x: &Tensor<T>,
        params: &ParamStore<T>,
        ctx: &mut ForwardCtx<T>,
    ) -> Result<(Tensor<T>, Vec<PreActCache<T>>)> {
        let (_, _, _, c) = x.dims4()?;
        let expected = self.convs[0].conv.spec.in_channels;
        if c != expected {
            return Err(contract!("block 4 expects {expected} channels, got shape {:?}", x.shape()));
        }
        let mut y = x.clone();
        let mut caches = Vec::with_capacity(3);
        for unit in &self.convs {
            let (next, cache) = unit.forward(&y, params, ctx)?;
            caches.push(cache);
            y = next;
        }
        Ok((y, caches))
    }

    pub fn backward<T: Scalar>(
        &self,
        caches: &[PreActCache<T>],
        upstream: &Tensor<T>,
        params: &ParamStore<T>,
        grads: &mut ParamStore<T>,
    ) -> Result<Tensor<T>> {
        let mut d = upstream.clone();
        for (unit, cache) in self.convs.iter().zip(caches).rev() {
            d = unit.backward(cache, &d, params, grads)?;
        }
        Ok(d)
    }
}

/// One Siamese branch. Both the exemplar and the search image go through the
/// same `Branch` with the same parameters.
#[derive(Debug, Clone)]
pub struct Branch {
    pub config: BackboneConfig,
    stem: ConvLayer,
    blocks: [DenseBlock; 3],
    transitions: [Transition; 2],
    block4: Block4,
}

pub struct BranchCache<T> {
    image: Tensor<T>,
    blocks: Vec<DenseBlockCache<T>>,
    transitions: Vec<TransitionCache<T>>,
    block4: Vec<PreActCache<T>>,
    /// `(stage name, output shape)` in pipeline order.
    pub stages: Vec<(&'static str, Vec<usize>)>,
}

impl Branch {
    pub fn new(config: BackboneConfig) -> Result<Self> {
        config.validate()?;
        let p = "branch";
        let stem = ConvLayer::new(format!("{p}.stem"), ConvSpec::square(7, 2, 0, 3, config.stem_channels));
        let b1 = DenseBlock::new(&format!("{p}.block1"), config.stem_channels, BLOCK_LAYERS[0], &config);
        let t1 = Transition::new(&format!("{p}.transition1"), b1.out_channels(), &config);
        let b2 = DenseBlock::new(&format!("{p}.block2"), t1.out_channels(), BLOCK_LAYERS[1], &config);
        let t2 = Transition::new(&format!("{p}.transition2"), b2.out_channels(), &config);
        let b3 = DenseBlock::new(&format!("{p}.block3"), t2.out_channels(), BLOCK_LAYERS[2], &config);
        let block4 = Block4::new(&format!("{p}.block4"), b3.out_channels(), &config);
        if config.is_full() {
            assert_eq!(b1.out_channels(), 144);
            assert_eq!(b2.out_channels(), 180);
            assert_eq!(b3.out_channels(), 252);
        }
        Ok(Branch {
            config,
            stem,
            blocks: [b1, b2, b3],
            transitions: [t1, t2],
            block4,
        })
    }

    pub fn embed_channels(&self) -> usize {
        self.config.embed_channels
    }

    pub fn blocks(&self) -> &[DenseBlock; 3] {
        &self.blocks
    }

    pub fn transitions(&self) -> &[Transition; 2] {
        &self.transitions
    }

    pub fn block4(&self) -> &Block4 {
        &self.block4
    }

    /// Spatial extent of the embedding for a square input of side `n`.
    pub fn output_size(&self, n: usize) -> Result<usize> {
        let (s, _) = self.stem.spec.output_size(n, n)?;
        let s = nn::pool_output_size(s, 2, 2)?;
        let s = nn::pool_output_size(s, 2, 2)?;
        Ok(ConvSpec::square(7, 1, 0, 1, 1).output_size(s, s)?.0)
    }

    /// Fan-in scaled normal kernels, zero biases and betas, unit gammas and
    /// running variances. Deterministic in `seed`.
    pub fn init_params<T: Scalar>(&self, seed: u64) -> Result<ParamStore<T>> {
        let mut params = ParamStore::new();
        self.init_into(&mut params, &mut Rng::stream(seed, 0xB4A7C4))?;
        Ok(params)
    }

    pub(crate) fn init_into<T: Scalar>(&self, params: &mut ParamStore<T>, rng: &mut Rng) -> Result<()> {
        self.stem.init(params, rng)?;
        self.blocks[0].init(params, rng)?;
        self.transitions[0].conv.init(params, rng)?;
        self.blocks[1].init(params, rng)?;
        self.transitions[1].conv.init(params, rng)?;
        self.blocks[2].init(params, rng)?;
        self.block4.convs.iter().try_for_each(|u| u.init(params, rng))
    }

    pub fn forward<T: Scalar>(
        &self,
        image: &Tensor<T>,
        params: &ParamStore<T>,
        ctx: &mut ForwardCtx<T>,
    ) -> Result<(Tensor<T>, BranchCache<T>)> {
        let (_, h, w, c) = image.dims4()?;
        if c != 3 {
            return Err(contract!("branch input must have 3 channels, got shape {:?}", image.shape()));
        }
        if h < EXEMPLAR_SIZE || w < EXEMPLAR_SIZE {
            return Err(config_err!(
                "branch input {h}x{w} is smaller than the {EXEMPLAR_SIZE}x{EXEMPLAR_SIZE} minimum"
            ));
        }
        let mut stages = Vec::with_capacity(8);
        let stem_out = self.stem.forward(image, params)?;
        stages.push(("convolution", stem_out.shape().to_vec()));
        let (b1, c1) = self.blocks[0].forward(&stem_out, params, ctx)?;
        stages.push(("dense_block1", b1.shape().to_vec()));
        let (t1, ct1) = self.transitions[0].forward(&b1, params, ctx)?;
        stages.push(("transition1", t1.shape().to_vec()));
        let (b2, c2) = self.blocks[1].forward(&t1, params, ctx)?;
        stages.push(("dense_block2", b2.shape().to_vec()));
        let (t2, ct2) = self.transitions[1].forward(&b2, params, ctx)?;
        stages.push(("transition2", t2.shape().to_vec()));
        let (b3, c3) = self.blocks[2].forward(&t2, params, ctx)?;
        stages.push(("dense_block3", b3.shape().to_vec()));
        let (out, c4) = self.block4.forward(&b3, params, ctx)?;
        stages.push(("dense_block4", out.shape().to_vec()));
        out.check_finite("branch output")?;
        Ok((
            out,
            BranchCache {
                image: image.clone(),
                blocks: vec![c1, c2, c3],
                transitions: vec![ct1, ct2],
                block4: c4,
                stages,
            },
        ))
    }

    /// Accumulates all branch parameter gradients. The image gradient is not
    /// computed.
    pub fn backward<T: Scalar>(
        &self,
        cache: &BranchCache<T>,
        upstream: &Tensor<T>,
        params: &ParamStore<T>,
        grads: &mut ParamStore<T>,
    ) -> Result<()> {
        let d = self.block4.backward(&cache.block4, upstream, params, grads)?;
        let d = self.blocks[2].backward(&cache.blocks[2], &d, params, grads)?;
        let d = self.transitions[1].backward(&cache.transitions[1], &d, params, grads)?;
        let d = self.blocks[1].backward(&cache.blocks[1], &d, params, grads)?;
        let d = self.transitions[0].backward(&cache.transitions[0], &d, params, grads)?;
        let d = self.blocks[0].backward(&cache.blocks[0], &d, params, grads)?;
        self.stem.backward(&cache.image, &d, params, grads, false)?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::layers::ForwardCtx;

    #[test]
    fn output_sizes() {
        let b = Branch::new(BackboneConfig::toy()).unwrap();
        assert_eq!(b.output_size(127).unwrap(), 9);
        assert_eq!(b.output_size(255).unwrap(), 25);
    }

    #[test]
    fn dense_layer_channel_accounting() {
        let cfg = BackboneConfig::full();
        let block2 = DenseBlock::new("b2", 36, 4, &cfg);
        assert_eq!(block2.layers[3].in_channels, 144);
        assert_eq!(block2.layers[3].out_channels(), 36);
        assert_eq!(block2.out_channels(), 180);
    }

    #[test]
    fn dense_layer_rejects_wrong_channels() {
        let cfg = BackboneConfig::toy();
        let layer = DenseLayer::new("l", 16, &cfg);
        let mut params = ParamStore::<f32>::new();
        layer.init(&mut params, &mut Rng::new(0)).unwrap();
        let x = Tensor::<f32>::zeros(vec![2, 5, 5, 15]);
        let err = layer.forward(&x, &params, &mut ForwardCtx::train(0)).err().unwrap();
        assert!(err.to_string().contains("16 input channels"));
    }

    #[test]
    fn zero_input_gives_bias_only_output() {
        let cfg = BackboneConfig {
            dropout: 0.0,
            ..BackboneConfig::toy()
        };
        let layer = DenseLayer::new("l", 16, &cfg);
        let mut params = ParamStore::<f32>::new();
        layer.init(&mut params, &mut Rng::new(0)).unwrap();
        let bias = Tensor::from_fn(vec![cfg.growth_rate], |i| i as f32 * 0.25 - 0.5);
        params.set("l.conv3.conv.bias", bias.clone()).unwrap();
        let x = Tensor::<f32>::zeros(vec![2, 5, 5, 16]);
        let (y, _) = layer.forward(&x, &params, &mut ForwardCtx::train(0)).unwrap();
        assert_eq!(y.shape(), &[2, 5, 5, cfg.growth_rate]);
        for px in y.data().chunks_exact(cfg.growth_rate) {
            assert_eq!(px, bias.data());
        }
    }

    #[test]
    fn rejects_small_inputs() {
        let b = Branch::new(BackboneConfig::toy()).unwrap();
        let params = b.init_params::<f32>(0).unwrap();
        let img = Tensor::<f32>::zeros(vec![1, 126, 126, 3]);
        assert!(matches!(
            b.forward(&img, &params, &mut ForwardCtx::infer()),
            Err(crate::Error::Config(_))
        ));
    }
}
