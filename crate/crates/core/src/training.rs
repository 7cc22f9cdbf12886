//! Offline similarity training: pair sampling, SGD with momentum and a
//! geometric per-epoch learning-rate schedule.

use std::path::PathBuf;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::crop::{crop_exemplar, crop_square, channel_means, context_side, search_side, stack};
use crate::backbone::SEARCH_SIZE;
use crate::error::{config_err, contract, Error, Result};
use crate::geometry::{BBox, Frame};
use crate::head::{make_label_map_at, LabelMap, GAIN};
use crate::layers::ForwardCtx;
use crate::model::SiamModel;
use crate::params::{ParamKind, ParamStore};
use crate::rng::{derive_key, Rng};
use crate::sequence::{list_sequences, load_sequence, SequenceRecord};
use crate::synth::{SynthRenderer, SynthSpec};
use crate::tensor::Tensor;

pub const TOTAL_STRIDE: f64 = 8.0;
const MAX_PAIR_RETRIES: usize = 100;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub pairs_per_epoch: usize,
    pub batch_size: usize,
    pub momentum: f64,
    pub lr_start: f64,
    pub lr_end: f64,
    pub weight_decay: f64,
    /// Learning-rate multiplier of the score gain.
    pub gain_lr_scale: f64,
    pub seed: u64,
    /// Positive-label radius in score-map cells.
    pub r_pos: f64,
    pub balanced: bool,
    pub max_frame_gap: usize,
    /// Maximum search-crop displacement of the target, in search-patch pixels.
    pub jitter: i64,
    /// Number and length of generated sequences when `data_dir` is unset.
    pub synthetic_sequences: usize,
    pub synthetic_length: usize,
    /// Directory of recorded sequences to train on instead.
    pub data_dir: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 20,
            pairs_per_epoch: 2000,
            batch_size: 8,
            momentum: 0.9,
            lr_start: 1e-3,
            lr_end: 1e-8,
            weight_decay: 0.0,
            gain_lr_scale: 0.0,
            seed: 0,
            r_pos: 2.0,
            balanced: true,
            max_frame_gap: 100,
            jitter: 32,
            synthetic_sequences: 64,
            synthetic_length: 100,
            data_dir: None,
        }
    }
}

impl TrainConfig {
    /// The full regimen: 100 epochs of 53,200 pairs.
    pub fn full() -> Self {
        TrainConfig {
            epochs: 100,
            pairs_per_epoch: 53_200,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr_start > self.lr_end && self.lr_end > 0.0) {
            return Err(config_err!(
                "training.lr_start ({}) > training.lr_end ({}) > 0 violated",
                self.lr_start,
                self.lr_end
            ));
        }
        if self.batch_size < 2 {
            return Err(config_err!(
                "training.batch_size {} must be >= 2 for batch normalization",
                self.batch_size
            ));
        }
        if self.epochs == 0 || self.pairs_per_epoch < self.batch_size {
            return Err(config_err!(
                "training.epochs must be >= 1 and training.pairs_per_epoch >= batch_size"
            ));
        }
        if !(0.0..1.0).contains(&self.momentum) || !(self.weight_decay >= 0.0) || !(self.gain_lr_scale >= 0.0) {
            return Err(config_err!(
                "training.momentum must lie in [0, 1), weight_decay and gain_lr_scale be >= 0"
            ));
        }
        if !(self.r_pos >= 0.0) || self.jitter < 0 {
            return Err(config_err!("training.r_pos and training.jitter must be >= 0"));
        }
        if self.data_dir.is_none() && (self.synthetic_sequences == 0 || self.synthetic_length < 2) {
            return Err(config_err!(
                "training.synthetic_sequences must be >= 1 and synthetic_length >= 2"
            ));
        }
        Ok(())
    }

    /// A few hundred steps at a higher rate: enough for the toy branch to
    /// track plain synthetic targets.
    pub fn quick() -> Self {
        TrainConfig {
            epochs: 4,
            pairs_per_epoch: 400,
            lr_start: 1e-2,
            lr_end: 1e-3,
            ..Self::default()
        }
    }

    pub fn steps_per_epoch(&self) -> usize {
        self.pairs_per_epoch / self.batch_size
    }
}

/// `lr_start * (lr_end / lr_start)^(epoch / (epochs - 1))`.
pub fn lr_schedule(epoch: usize, cfg: &TrainConfig) -> Result<f64> {
    if epoch >= cfg.epochs {
        return Err(contract!("epoch {epoch} outside schedule of {} epochs", cfg.epochs));
    }
    if cfg.epochs == 1 || epoch == 0 {
        return Ok(cfg.lr_start);
    }
    if epoch == cfg.epochs - 1 {
        return Ok(cfg.lr_end);
    }
    let t = epoch as f64 / (cfg.epochs - 1) as f64;
    Ok(cfg.lr_start * (cfg.lr_end / cfg.lr_start).powf(t))
}

/// Momentum buffers for the learnable parameters, plus progress counters.
#[derive(Debug, Clone, PartialEq)]
pub struct SgdState {
    pub velocity: ParamStore<f32>,
    pub step: u64,
    /// Completed epochs.
    pub epoch: usize,
}

impl SgdState {
    pub fn new(params: &ParamStore<f32>) -> Result<Self> {
        let mut velocity = ParamStore::new();
        for (name, t, kind) in params.iter() {
            if kind == ParamKind::Learnable {
                velocity.insert(name, Tensor::zeros(t.shape().to_vec()), kind)?;
            }
        }
        Ok(SgdState {
            velocity,
            step: 0,
            epoch: 0,
        })
    }
}

/// Classic momentum: `v = m v + g + wd p`, then `p -= lr v`. Nothing is
/// modified when any gradient is non-finite.
pub fn sgd_step(
    params: &mut ParamStore<f32>,
    grads: &ParamStore<f32>,
    state: &mut SgdState,
    lr: f64,
    momentum: f64,
    weight_decay: f64,
) -> Result<()> {
    sgd_step_with(params, grads, state, &|_| lr, momentum, weight_decay)
}

/// [`sgd_step`] with a per-parameter learning rate.
pub fn sgd_step_with(
    params: &mut ParamStore<f32>,
    grads: &ParamStore<f32>,
    state: &mut SgdState,
    lr_of: &dyn Fn(&str) -> f64,
    momentum: f64,
    weight_decay: f64,
) -> Result<()> {
    for (name, _, _) in state.velocity.iter() {
        let g = grads.get(name)?;
        if !g.all_finite() {
            return Err(Error::NonFinite {
                context: format!("gradient of `{name}`"),
            });
        }
    }
    let (m, wd) = (momentum as f32, weight_decay as f32);
    for (name, v, _) in state.velocity.iter_mut() {
        let lr = lr_of(name) as f32;
        let g = grads.get(name)?;
        let p = params.get_mut(name)?;
        p.same_shape(g, name)?;
        p.same_shape(v, name)?;
        for ((v, &g), p) in v.data_mut().iter_mut().zip(g.data()).zip(p.data_mut()) {
            *v = m * *v + g + wd * *p;
            if lr != 0.0 {
                *p -= lr * *v;
            }
        }
    }
    state.step += 1;
    Ok(())
}

/// One training example: exemplar and search patches and the target's
/// offset from the search center in score-map cells `(dx, dy)`.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingPair {
    pub exemplar: Tensor<f32>,
    pub search: Tensor<f32>,
    pub offset: (f64, f64),
}

/// Sequences to draw pairs from: rendered on demand or loaded from disk.
pub enum TrainingData {
    Synthetic(Vec<SynthRenderer>),
    Recorded(Vec<SequenceRecord>),
}

impl TrainingData {
    /// `count` randomized variations of `template`, each `length` frames.
    pub fn synthetic(template: &SynthSpec, count: usize, length: usize, seed: u64) -> Result<Self> {
        let base = SynthSpec {
            length,
            ..template.clone()
        };
        let renderers = (0..count as u64)
            .map(|i| SynthRenderer::new(base.randomized(derive_key(seed, i))))
            .collect::<Result<_>>()?;
        Ok(TrainingData::Synthetic(renderers))
    }

    pub fn from_config(cfg: &TrainConfig, template: &SynthSpec) -> Result<Self> {
        match &cfg.data_dir {
            Some(dir) => {
                let seqs = list_sequences(dir)?
                    .iter()
                    .map(|d| load_sequence(d))
                    .collect::<Result<Vec<_>>>()?;
                if seqs.is_empty() {
                    return Err(config_err!("no sequences under {}", dir.display()));
                }
                Ok(TrainingData::Recorded(seqs))
            }
            None => Self::synthetic(template, cfg.synthetic_sequences, cfg.synthetic_length, cfg.seed),
        }
    }

    pub fn num_sequences(&self) -> usize {
        match self {
            TrainingData::Synthetic(r) => r.len(),
            TrainingData::Recorded(s) => s.len(),
        }
    }

    pub fn sequence_len(&self, i: usize) -> usize {
        match self {
            TrainingData::Synthetic(r) => r[i].len(),
            TrainingData::Recorded(s) => s[i].len(),
        }
    }

    fn frame_and_box(&self, i: usize, t: usize) -> (std::borrow::Cow<'_, Frame>, BBox) {
        match self {
            TrainingData::Synthetic(r) => (std::borrow::Cow::Owned(r[i].frame(t)), r[i].bbox(t)),
            TrainingData::Recorded(s) => (std::borrow::Cow::Borrowed(&s[i].frames[t]), s[i].boxes[t]),
        }
    }
}

fn usable(b: &BBox) -> bool {
    b.is_finite() && b.w >= 2.0 && b.h >= 2.0
}

/// Draws two frames at most `max_frame_gap` apart from one sequence. The
/// exemplar is cropped around the first box; the search patch around the
/// second box shifted by a uniform jitter so the target sits off center.
/// Degenerate boxes are skipped and the draw repeated.
pub fn sample_pair(data: &TrainingData, cfg: &TrainConfig, rng: &mut Rng) -> Result<TrainingPair> {
    let n = data.num_sequences();
    if n == 0 {
        return Err(contract!("no sequences to sample from"));
    }
    for _ in 0..MAX_PAIR_RETRIES {
        let s = rng.int_range(0, n as i64 - 1) as usize;
        let len = data.sequence_len(s);
        if len < 2 {
            return Err(contract!("sequence {s} has {len} frames, need >= 2"));
        }
        let t1 = rng.int_range(0, len as i64 - 1);
        let gap = cfg.max_frame_gap as i64;
        let t2 = rng.int_range((t1 - gap).max(0), (t1 + gap).min(len as i64 - 1));
        let jx = rng.int_range(-cfg.jitter, cfg.jitter);
        let jy = rng.int_range(-cfg.jitter, cfg.jitter);
        let (f1, b1) = data.frame_and_box(s, t1 as usize);
        let (f2, b2) = data.frame_and_box(s, t2 as usize);
        if !usable(&b1) || !usable(&b2) {
            continue;
        }
        let exemplar = crop_exemplar(&f1, &b1)?.patch;
        let side = search_side(context_side(b2.w, b2.h), 1.0);
        let px = side / SEARCH_SIZE as f64;
        let (cx, cy) = b2.center();
        let search = crop_square(
            &f2,
            channel_means(&f2),
            cx - jx as f64 * px,
            cy - jy as f64 * px,
            side,
            SEARCH_SIZE,
        )?
        .patch;
        return Ok(TrainingPair {
            exemplar,
            search,
            offset: (jx as f64 / TOTAL_STRIDE, jy as f64 / TOTAL_STRIDE),
        });
    }
    Err(contract!("no usable pair after {MAX_PAIR_RETRIES} draws"))
}

/// Source of the `index`-th training pair of a run.
pub trait PairSource {
    fn pair(&self, index: u64) -> Result<TrainingPair>;
}

/// Fresh random pairs: pair `index` depends only on the seed and `index`.
pub struct SampledPairs<'a> {
    pub data: &'a TrainingData,
    pub config: &'a TrainConfig,
}

impl PairSource for SampledPairs<'_> {
    fn pair(&self, index: u64) -> Result<TrainingPair> {
        let mut rng = Rng::stream(derive_key(self.config.seed, 0x9A1E), index);
        sample_pair(self.data, self.config, &mut rng)
    }
}

/// A fixed set of pairs visited cyclically.
pub struct FixedPairs(pub Vec<TrainingPair>);

impl PairSource for FixedPairs {
    fn pair(&self, index: u64) -> Result<TrainingPair> {
        if self.0.is_empty() {
            return Err(contract!("empty fixed pair set"));
        }
        Ok(self.0[(index % self.0.len() as u64) as usize].clone())
    }
}

/// Stacked batch of pairs with their label maps.
pub struct Batch {
    pub exemplars: Tensor<f32>,
    pub searches: Tensor<f32>,
    pub labels: Vec<LabelMap>,
}

pub fn make_batch(pairs: &[TrainingPair], map_size: usize, r_pos: f64) -> Result<Batch> {
    let ex: Vec<&Tensor<f32>> = pairs.iter().map(|p| &p.exemplar).collect();
    let se: Vec<&Tensor<f32>> = pairs.iter().map(|p| &p.search).collect();
    Ok(Batch {
        exemplars: stack(&ex)?,
        searches: stack(&se)?,
        labels: pairs
            .iter()
            .map(|p| make_label_map_at(map_size, r_pos, p.offset))
            .collect::<Result<_>>()?,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub epoch: usize,
    pub step: u64,
    pub loss: f64,
    pub lr: f64,
    pub wall_ms: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub steps: usize,
    pub mean_loss: f64,
    pub first_loss: f64,
    pub last_loss: f64,
    pub lr: f64,
    pub wall_ms: f64,
}

/// One SGD step on `batch`. Returns the batch-mean loss before the update.
pub fn train_step(
    model: &SiamModel,
    params: &mut ParamStore<f32>,
    state: &mut SgdState,
    batch: &Batch,
    cfg: &TrainConfig,
    lr: f64,
) -> Result<f64> {
    let mut ctx = ForwardCtx::train(derive_key(cfg.seed ^ 0xD0, state.step));
    let step = model.loss_and_grads(&batch.exemplars, &batch.searches, &batch.labels, cfg.balanced, params, &mut ctx)?;
    if !step.loss.is_finite() {
        return Err(Error::NonFinite {
            context: format!("training loss at step {}", state.step),
        });
    }
    ctx.apply_bn_updates(params)?;
    let gain_lr = lr * cfg.gain_lr_scale;
    let lr_of = |name: &str| if name == GAIN { gain_lr } else { lr };
    sgd_step_with(params, &step.grads, state, &lr_of, cfg.momentum, cfg.weight_decay)?;
    Ok(step.loss)
}

/// Runs `steps_per_epoch` steps at the epoch's scheduled rate, pairs taken
/// from `source` in a fixed order. `on_step` sees every step's metrics.
pub fn train_epoch(
    model: &SiamModel,
    cfg: &TrainConfig,
    params: &mut ParamStore<f32>,
    state: &mut SgdState,
    source: &dyn PairSource,
    on_step: &mut dyn FnMut(&StepMetrics) -> Result<()>,
) -> Result<EpochMetrics> {
    let epoch = state.epoch;
    let lr = lr_schedule(epoch, cfg)?;
    let steps = cfg.steps_per_epoch();
    let map_size = model.score_size()?;
    let start = Instant::now();
    let (mut sum, mut first, mut last) = (0.0, f64::NAN, f64::NAN);
    for i in 0..steps {
        let t0 = Instant::now();
        let base = state.step * cfg.batch_size as u64;
        let pairs = (0..cfg.batch_size as u64)
            .map(|j| source.pair(base + j))
            .collect::<Result<Vec<_>>>()?;
        let batch = make_batch(&pairs, map_size, cfg.r_pos)?;
        let loss = train_step(model, params, state, &batch, cfg, lr)?;
        if i == 0 {
            first = loss;
        }
        last = loss;
        sum += loss;
        on_step(&StepMetrics {
            epoch,
            step: state.step,
            loss,
            lr,
            wall_ms: t0.elapsed().as_secs_f64() * 1e3,
        })?;
    }
    state.epoch += 1;
    Ok(EpochMetrics {
        epoch,
        steps,
        mean_loss: sum / steps as f64,
        first_loss: first,
        last_loss: last,
        lr,
        wall_ms: start.elapsed().as_secs_f64() * 1e3,
    })
}
