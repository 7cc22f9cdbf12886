//! Finite-difference verification of every hand-written backward pass.
//!
//! Each case draws random variables, defines a scalar objective
//! `L = sum(w * op(vars))` with fixed random weights `w` (or the map loss
//! itself for the loss case), and compares analytic gradients against
//! central differences evaluated in 64-bit arithmetic.
//!
//! The error of one coordinate is `|a - n| / max(|a|, |n|, 1e-3 * s)`
//! where `s` is the largest analytic gradient magnitude of that variable.
//! Coordinates where the one-sided differences disagree by more than
//! `1e-3 * s` straddle a ReLU kink and are counted as skipped.

use serde::Serialize;

use crate::attention::{AttentionConfig, SelfAttention};
use crate::backbone::{BackboneConfig, Block4Mode, DenseLayer};
use crate::error::Result;
use crate::head::{self, make_label_map_at, SiameseHead};
use crate::layers::{ForwardCtx, Mode};
use crate::nn::{self, BnMode, ConvSpec};
use crate::params::{ParamKind, ParamStore};
use crate::rng::Rng;
use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum GradOp {
    Conv,
    BatchNorm,
    AvgPool,
    DenseLayer,
    Attention,
    Correlation,
    Loss,
}

impl GradOp {
    pub const ALL: [GradOp; 7] = [
        GradOp::Conv,
        GradOp::BatchNorm,
        GradOp::AvgPool,
        GradOp::DenseLayer,
        GradOp::Attention,
        GradOp::Correlation,
        GradOp::Loss,
    ];

    pub fn name(self) -> &'static str {
        match self {
            GradOp::Conv => "conv2d",
            GradOp::BatchNorm => "batch_norm",
            GradOp::AvgPool => "avg_pool2d",
            GradOp::DenseLayer => "dense_layer",
            GradOp::Attention => "attention",
            GradOp::Correlation => "correlation",
            GradOp::Loss => "map_loss",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Precision {
    /// Analytic gradients in f64.
    F64,
    /// Analytic gradients in f32, compared with the f64 difference oracle.
    F32,
}

impl Precision {
    pub fn tolerance(self) -> f64 {
        match self {
            Precision::F64 => 1e-5,
            Precision::F32 => 1e-3,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct GradCheckReport {
    pub op: GradOp,
    pub seed: u64,
    pub precision: Precision,
    pub max_rel_err: f64,
    pub worst: String,
    pub checked: usize,
    pub skipped: usize,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_err < self.precision.tolerance() && self.skipped * 10 <= self.checked
    }
}

const FD_EPS: f64 = 1e-6;
const MAX_COORDS_PER_VAR: usize = 48;

fn random_tensor(shape: Vec<usize>, rng: &mut Rng, scale: f64) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.normal() * scale)
}

fn weighted_sum<T: Scalar>(out: &Tensor<T>, w: &Tensor<T>) -> f64 {
    out.data()
        .iter()
        .zip(w.data())
        .map(|(&a, &b)| a.as_f64() * b.as_f64())
        .sum()
}

fn dense_check_config() -> BackboneConfig {
    BackboneConfig {
        stem_channels: 4,
        growth_rate: 3,
        bottleneck_factor: 2,
        transition_channels: 4,
        embed_channels: 4,
        block4_mode: Block4Mode::Pointwise,
        dropout: 0.2,
    }
}

fn conv_spec(seed: u64) -> ConvSpec {
    match seed % 3 {
        0 => ConvSpec::square(3, 1, 1, 2, 3),
        1 => ConvSpec::square(3, 2, 0, 2, 3),
        _ => ConvSpec::square(2, 1, 0, 2, 3),
    }
}

/// Variables of one case. Learnable entries are checked, buffers are constants.
pub fn variables(op: GradOp, seed: u64) -> Result<ParamStore<f64>> {
    let mut rng = Rng::stream(seed, op as u64 + 100);
    let mut v = ParamStore::new();
    let l = ParamKind::Learnable;
    let c = ParamKind::Buffer;
    match op {
        GradOp::Conv => {
            let spec = conv_spec(seed);
            let x = random_tensor(vec![1, 6, 6, 2], &mut rng, 1.0);
            let (oh, ow) = spec.output_size(6, 6)?;
            v.insert("x", x, l)?;
            v.insert("kernel", random_tensor(spec.kernel_shape().to_vec(), &mut rng, 0.5), l)?;
            v.insert("bias", random_tensor(vec![3], &mut rng, 0.5), l)?;
            v.insert("w", random_tensor(vec![1, oh, ow, 3], &mut rng, 1.0), c)?;
        }
        GradOp::BatchNorm => {
            v.insert("x", random_tensor(vec![3, 4, 4, 3], &mut rng, 2.0), l)?;
            v.insert("gamma", random_tensor(vec![3], &mut rng, 1.0), l)?;
            v.insert("beta", random_tensor(vec![3], &mut rng, 1.0), l)?;
            v.insert("w", random_tensor(vec![3, 4, 4, 3], &mut rng, 1.0), c)?;
        }
        GradOp::AvgPool => {
            v.insert("x", random_tensor(vec![2, 5, 5, 2], &mut rng, 1.0), l)?;
            v.insert("w", random_tensor(vec![2, 2, 2, 2], &mut rng, 1.0), c)?;
        }
        GradOp::DenseLayer => {
            let cfg = dense_check_config();
            let layer = DenseLayer::new("dense", 4, &cfg);
            let mut p = ParamStore::new();
            let mut init_rng = Rng::stream(seed, 7);
            layer.init(&mut p, &mut init_rng)?;
            v.insert("x", random_tensor(vec![2, 5, 5, 4], &mut rng, 1.0), l)?;
            for (name, t, kind) in p.iter() {
                // perturb the affine terms away from their identity init
                let t = if kind == ParamKind::Learnable {
                    let noise = random_tensor(t.shape().to_vec(), &mut rng, 0.3);
                    let mut t = t.clone();
                    t.add_assign(&noise)?;
                    t
                } else {
                    t.clone()
                };
                v.insert(name, t, kind)?;
            }
            v.insert("w", random_tensor(vec![2, 5, 5, cfg.growth_rate], &mut rng, 1.0), c)?;
        }
        GradOp::Attention => {
            let att = SelfAttention::new(8, AttentionConfig { r: 2, residual: false })?;
            let p = att.init_params::<f64>(seed)?;
            v.insert("x", random_tensor(vec![1, 3, 3, 8], &mut rng, 1.0), l)?;
            for (name, t, kind) in p.iter() {
                v.insert(name, t.map(|x| x * 0.7), kind)?;
            }
            v.insert("w", random_tensor(vec![1, 3, 3, 8], &mut rng, 1.0), c)?;
        }
        GradOp::Correlation => {
            v.insert("target", random_tensor(vec![2, 3, 3, 4], &mut rng, 1.0), l)?;
            v.insert("search", random_tensor(vec![2, 6, 6, 4], &mut rng, 1.0), l)?;
            v.insert(head::GAIN, Tensor::scalar(0.3 + rng.uniform()), l)?;
            v.insert(head::BIAS, Tensor::scalar(rng.normal()), l)?;
            v.insert("w", random_tensor(vec![2, 4, 4], &mut rng, 1.0), c)?;
        }
        GradOp::Loss => {
            v.insert("v", random_tensor(vec![7, 7], &mut rng, 2.0), l)?;
        }
    }
    Ok(v)
}

/// Scalar objective of a case at precision `T`.
pub fn objective<T: Scalar>(op: GradOp, vars: &ParamStore<T>, seed: u64) -> Result<f64> {
    let x = || vars.get("x");
    match op {
        GradOp::Conv => {
            let y = nn::conv2d(x()?, vars.get("kernel")?, Some(vars.get("bias")?), &conv_spec(seed))?;
            Ok(weighted_sum(&y, vars.get("w")?))
        }
        GradOp::BatchNorm => {
            let rm = Tensor::zeros(vec![3]);
            let rv = Tensor::full(vec![3], T::one());
            let y = nn::batch_norm(x()?, vars.get("gamma")?, vars.get("beta")?, &rm, &rv, BnMode::Train)?;
            Ok(weighted_sum(&y.output, vars.get("w")?))
        }
        GradOp::AvgPool => Ok(weighted_sum(&nn::avg_pool2d(x()?, 2, 2)?, vars.get("w")?)),
        GradOp::DenseLayer => {
            let layer = DenseLayer::new("dense", 4, &dense_check_config());
            let (y, _) = layer.forward(x()?, vars, &mut ForwardCtx::new(Mode::Train, seed))?;
            Ok(weighted_sum(&y, vars.get("w")?))
        }
        GradOp::Attention => {
            let att = SelfAttention::new(8, AttentionConfig { r: 2, residual: false })?;
            let (y, _) = att.forward(x()?, vars)?;
            Ok(weighted_sum(&y, vars.get("w")?))
        }
        GradOp::Correlation => {
            let (maps, _) = SiameseHead.forward(vars.get("target")?, vars.get("search")?, vars)?;
            let flat: Vec<T> = maps.into_iter().flat_map(|m| m.values).collect();
            Ok(weighted_sum(&Tensor::new(vec![2, 4, 4], flat)?, vars.get("w")?))
        }
        GradOp::Loss => {
            let labels = loss_labels(seed)?;
            Ok(head::map_loss(vars.get("v")?.data(), &labels, seed % 2 == 0)?.0)
        }
    }
}

fn loss_labels(seed: u64) -> Result<head::LabelMap> {
    make_label_map_at(7, 1.5, ((seed % 3) as f64 - 1.0, 0.5))
}

/// Analytic gradients of [`objective`] for every learnable variable.
pub fn analytic<T: Scalar>(op: GradOp, vars: &ParamStore<T>, seed: u64) -> Result<ParamStore<T>> {
    let mut grads = vars.zeros_like();
    let w = || vars.get("w");
    match op {
        GradOp::Conv => {
            let g = nn::conv2d_backward(vars.get("x")?, vars.get("kernel")?, &conv_spec(seed), w()?, true)?;
            grads.set("x", g.input.expect("requested"))?;
            grads.set("kernel", g.kernel)?;
            grads.set("bias", g.bias)?;
        }
        GradOp::BatchNorm => {
            let rm = Tensor::zeros(vec![3]);
            let rv = Tensor::full(vec![3], T::one());
            let y = nn::batch_norm(vars.get("x")?, vars.get("gamma")?, vars.get("beta")?, &rm, &rv, BnMode::Train)?;
            let g = nn::batch_norm_backward(&y.cache, vars.get("gamma")?, w()?)?;
            grads.set("x", g.input)?;
            grads.set("gamma", g.gamma)?;
            grads.set("beta", g.beta)?;
        }
        GradOp::AvgPool => {
            grads.set("x", nn::avg_pool2d_backward(vars.get("x")?.shape(), 2, 2, w()?)?)?;
        }
        GradOp::DenseLayer => {
            let layer = DenseLayer::new("dense", 4, &dense_check_config());
            let (_, cache) = layer.forward(vars.get("x")?, vars, &mut ForwardCtx::new(Mode::Train, seed))?;
            let dx = layer.backward(&cache, w()?, vars, &mut grads)?;
            grads.set("x", dx)?;
        }
        GradOp::Attention => {
            let att = SelfAttention::new(8, AttentionConfig { r: 2, residual: false })?;
            let (_, cache) = att.forward(vars.get("x")?, vars)?;
            let dx = att.backward(&cache, w()?, vars, &mut grads)?;
            grads.set("x", dx)?;
        }
        GradOp::Correlation => {
            let (_, cache) = SiameseHead.forward(vars.get("target")?, vars.get("search")?, vars)?;
            let up: Vec<Vec<T>> = w()?.data().chunks(16).map(|c| c.to_vec()).collect();
            let (dt, ds) = SiameseHead.backward(&cache, &up, vars, &mut grads)?;
            grads.set("target", dt)?;
            grads.set("search", ds)?;
        }
        GradOp::Loss => {
            let labels = loss_labels(seed)?;
            let v = vars.get("v")?;
            let (_, g) = head::map_loss(v.data(), &labels, seed % 2 == 0)?;
            grads.set("v", Tensor::new(v.shape().to_vec(), g)?)?;
        }
    }
    Ok(grads)
}

/// Runs one case at one precision.
pub fn check(op: GradOp, seed: u64, precision: Precision) -> Result<GradCheckReport> {
    let vars64 = variables(op, seed)?;
    // Evaluate both routes at the same point: round to f32 first in f32 mode.
    let (point, grads): (ParamStore<f64>, ParamStore<f64>) = match precision {
        Precision::F64 => {
            let g = analytic::<f64>(op, &vars64, seed)?;
            (vars64, g)
        }
        Precision::F32 => {
            let v32 = vars64.cast::<f32>();
            let g = analytic::<f32>(op, &v32, seed)?.cast::<f64>();
            (v32.cast::<f64>(), g)
        }
    };
    let mut rng = Rng::stream(seed, 0xFD);
    let mut report = GradCheckReport {
        op,
        seed,
        precision,
        max_rel_err: 0.0,
        worst: String::new(),
        checked: 0,
        skipped: 0,
    };
    let mut probe = point.clone();
    let scale = point
        .iter()
        .filter(|(_, _, kind)| *kind == ParamKind::Learnable)
        .map(|(name, _, _)| grads.get(name).map(|g| g.max_abs()))
        .collect::<Result<Vec<f64>>>()?
        .into_iter()
        .fold(0.0, f64::max);
    let floor = (1e-3 * scale).max(1e-12);
    for (name, t, kind) in point.iter() {
        if kind != ParamKind::Learnable {
            continue;
        }
        let analytic = grads.get(name)?;
        let coords: Vec<usize> = if t.len() <= MAX_COORDS_PER_VAR {
            (0..t.len()).collect()
        } else {
            (0..MAX_COORDS_PER_VAR)
                .map(|_| rng.int_range(0, t.len() as i64 - 1) as usize)
                .collect()
        };
        for i in coords {
            let base = t.data()[i];
            let eval = |probe: &mut ParamStore<f64>, x: f64| -> Result<f64> {
                probe.get_mut(name)?.data_mut()[i] = x;
                objective::<f64>(op, probe, seed)
            };
            let f_plus = eval(&mut probe, base + FD_EPS)?;
            let f_minus = eval(&mut probe, base - FD_EPS)?;
            let f0 = eval(&mut probe, base)?;
            let numeric = (f_plus - f_minus) / (2.0 * FD_EPS);
            let one_sided_gap = ((f_plus - f0) - (f0 - f_minus)).abs() / FD_EPS;
            report.checked += 1;
            if one_sided_gap > floor {
                report.skipped += 1;
                continue;
            }
            let a = analytic.data()[i].as_f64();
            let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(floor);
            if err > report.max_rel_err {
                report.max_rel_err = err;
                report.worst = format!("{name}[{i}]: analytic {a:.6e}, numeric {numeric:.6e}");
            }
        }
    }
    Ok(report)
}

/// All cases over `seeds` at both precisions.
pub fn check_all(seeds: &[u64]) -> Result<Vec<GradCheckReport>> {
    let mut out = Vec::new();
    for op in GradOp::ALL {
        for &seed in seeds {
            for precision in [Precision::F64, Precision::F32] {
                out.push(check(op, seed, precision)?);
            }
        }
    }
    Ok(out)
}
