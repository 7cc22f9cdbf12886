//! Online tracking with a fixed exemplar embedding: three-scale search,
//! bicubic response upsampling, cosine windowing and smoothed scale updates.

use serde::{Deserialize, Serialize};

use crate::backbone::SEARCH_SIZE;
use crate::crop::{channel_means, context_side, crop_exemplar, crop_square, search_side, stack, MIN_BOX_SIDE};
use crate::error::{config_err, contract, Error, Result};
use crate::geometry::{BBox, Frame};
use crate::head::ScoreMap;
use crate::layers::ForwardCtx;
use crate::model::SiamModel;
use crate::params::ParamStore;
use crate::tensor::Tensor;
use crate::training::TOTAL_STRIDE;

/// Which side of the scale interpolation the rate weights.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScaleUpdate {
    /// `s = (1 - lr) s + lr O^k`
    WeightNew,
    /// `s = lr s + (1 - lr) O^k`
    WeightOld,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrackingConfig {
    pub scale_base: f64,
    pub scale_exponents: Vec<f64>,
    pub scale_lr: f64,
    pub scale_update: ScaleUpdate,
    pub window_influence: f64,
    pub upsample: usize,
    /// Multiplies the normalized responses of every scale other than
    /// exponent 0.
    pub scale_penalty: f64,
}

impl Default for TrackingConfig {
    fn default() -> Self {
        TrackingConfig {
            scale_base: 1.0375,
            scale_exponents: vec![-2.0, 0.0, 2.0],
            scale_lr: 0.764,
            scale_update: ScaleUpdate::WeightNew,
            window_influence: 0.176,
            upsample: 16,
            scale_penalty: 1.0,
        }
    }
}

impl TrackingConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.scale_base > 0.0) || self.scale_exponents.is_empty() {
            return Err(config_err!("tracking.scale_base must be > 0 with at least one exponent"));
        }
        if self.scale_exponents.windows(2).any(|w| !(w[0] < w[1])) {
            return Err(config_err!("tracking.scale_exponents must be strictly ascending"));
        }
        if !(0.0..=1.0).contains(&self.scale_lr) {
            return Err(config_err!("tracking.scale_lr {} outside [0, 1]", self.scale_lr));
        }
        if !(0.0..1.0).contains(&self.window_influence) {
            return Err(config_err!(
                "tracking.window_influence {} outside [0, 1)",
                self.window_influence
            ));
        }
        if self.upsample == 0 || !(self.scale_penalty > 0.0) {
            return Err(config_err!("tracking.upsample and tracking.scale_penalty must be positive"));
        }
        Ok(())
    }

    /// `O^s` for each exponent, ascending.
    pub fn scale_multipliers(&self) -> Vec<f64> {
        self.scale_exponents.iter().map(|&s| self.scale_base.powf(s)).collect()
    }

    /// Interpolated scale multiplier after choosing `chosen`.
    pub fn update_scale(&self, smooth: f64, chosen: f64) -> f64 {
        match self.scale_update {
            ScaleUpdate::WeightNew => (1.0 - self.scale_lr) * smooth + self.scale_lr * chosen,
            ScaleUpdate::WeightOld => self.scale_lr * smooth + (1.0 - self.scale_lr) * chosen,
        }
    }
}

/// Outer product of raised-cosine (Hann) vectors, normalized to sum 1.
pub fn cosine_window(size: usize) -> Result<Vec<f64>> {
    if size < 2 {
        return Err(contract!("cosine window size {size} must be >= 2"));
    }
    let v: Vec<f64> = (0..size)
        .map(|i| 0.5 - 0.5 * (std::f64::consts::TAU * i as f64 / (size - 1) as f64).cos())
        .collect();
    let mut w: Vec<f64> = (0..size * size).map(|i| v[i / size] * v[i % size]).collect();
    let sum: f64 = w.iter().sum();
    for x in &mut w {
        *x /= sum;
    }
    Ok(w)
}

/// Keys cubic convolution kernel, `a = -0.5`.
fn keys(x: f64) -> f64 {
    const A: f64 = -0.5;
    let x = x.abs();
    if x <= 1.0 {
        ((A + 2.0) * x - (A + 3.0)) * x * x + 1.0
    } else if x < 2.0 {
        ((A * x - 5.0 * A) * x + 8.0 * A) * x - 4.0 * A
    } else {
        0.0
    }
}

fn upsample_1d(src: &[f64], factor: usize) -> Vec<f64> {
    let n = src.len();
    let out = (n - 1) * factor + 1;
    (0..out)
        .map(|i| {
            let pos = i as f64 / factor as f64;
            let i0 = pos.floor() as i64;
            let t = pos - i0 as f64;
            (-1..=2)
                .map(|k| {
                    let j = (i0 + k).clamp(0, n as i64 - 1) as usize;
                    keys(t - k as f64) * src[j]
                })
                .sum()
        })
        .collect()
}

/// Bicubic upsampling of an `n x n` map to `((n-1) f + 1)` per side with
/// corners aligned; original samples are reproduced at multiples of `f`.
pub fn upsample_bicubic(map: &[f64], n: usize, factor: usize) -> Result<Vec<f64>> {
    if map.len() != n * n || n == 0 || factor == 0 {
        return Err(contract!("cannot upsample {} values as a {n}x{n} map by {factor}", map.len()));
    }
    let u = (n - 1) * factor + 1;
    let rows: Vec<Vec<f64>> = map.chunks(n).map(|r| upsample_1d(r, factor)).collect();
    let mut out = vec![0.0; u * u];
    let mut col = vec![0.0; n];
    for x in 0..u {
        for (y, r) in rows.iter().enumerate() {
            col[y] = r[x];
        }
        for (y, v) in upsample_1d(&col, factor).into_iter().enumerate() {
            out[y * u + x] = v;
        }
    }
    Ok(out)
}

/// Peak of the blended multi-scale response.
#[derive(Debug, Clone, PartialEq)]
pub struct Localization {
    pub scale_index: usize,
    /// Peak position in the upsampled map.
    pub row: usize,
    pub col: usize,
    /// Blended response at the peak.
    pub peak: f64,
    /// Peak offset from the map center in score-map cells `(dx, dy)`.
    pub displacement: (f64, f64),
}

/// Upsamples each `n x n` raw map, normalizes them jointly (shift by the
/// global minimum, divide by the mean per-map sum), blends with the cosine
/// window and picks the best scale and position. Ties go to exponent 0,
/// then to the smaller displacement.
pub fn localize(raw: &[Vec<f64>], n: usize, cfg: &TrackingConfig) -> Result<Localization> {
    if raw.len() != cfg.scale_exponents.len() {
        return Err(contract!("{} response maps for {} scales", raw.len(), cfg.scale_exponents.len()));
    }
    if raw.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite {
            context: "tracker response map".into(),
        });
    }
    let f = cfg.upsample;
    let u = (n - 1) * f + 1;
    let mut maps = raw
        .iter()
        .map(|m| upsample_bicubic(m, n, f))
        .collect::<Result<Vec<_>>>()?;
    let min = maps.iter().flatten().copied().fold(f64::INFINITY, f64::min);
    let max = maps.iter().flatten().copied().fold(f64::NEG_INFINITY, f64::max);
    // a flat response carries no location; only the window decides
    let flat = max - min <= 1e-9 * max.abs().max(min.abs());
    let mut total = 0.0;
    for v in maps.iter_mut().flatten() {
        *v -= min;
        total += *v;
    }
    let norm = total / maps.len() as f64;
    let window = cosine_window(u)?;
    let g = cfg.window_influence;
    let c = (u - 1) as f64 / 2.0;
    let mut best: Option<(f64, f64, f64, Localization)> = None;
    for (k, m) in maps.iter().enumerate() {
        let s_abs = cfg.scale_exponents[k].abs();
        let penalty = if s_abs == 0.0 { 1.0 } else { cfg.scale_penalty };
        for (i, &v) in m.iter().enumerate() {
            let r = if flat || norm <= 0.0 { 0.0 } else { penalty * v / norm };
            let score = (1.0 - g) * r + g * window[i];
            let (row, col) = (i / u, i % u);
            let (dx, dy) = (col as f64 - c, row as f64 - c);
            let d2 = dx * dx + dy * dy;
            let better = match &best {
                None => true,
                Some((bs, bs_abs, bd2, _)) => {
                    score > *bs || (score == *bs && (s_abs < *bs_abs || (s_abs == *bs_abs && d2 < *bd2)))
                }
            };
            if better {
                best = Some((
                    score,
                    s_abs,
                    d2,
                    Localization {
                        scale_index: k,
                        row,
                        col,
                        peak: score,
                        displacement: (dx / f as f64, dy / f as f64),
                    },
                ));
            }
        }
    }
    Ok(best.expect("non-empty maps").3)
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrackState {
    pub center: (f64, f64),
    pub size: (f64, f64),
    /// Smoothed chosen scale multiplier. The size itself moves each frame
    /// by the interpolation between 1 and the chosen multiplier.
    pub scale_smooth: f64,
    /// Exemplar embedding `(1, e, e, c)` computed at initialization.
    pub target_embedding: Tensor<f32>,
}

impl TrackState {
    pub fn bbox(&self) -> BBox {
        BBox::from_center(self.center.0, self.center.1, self.size.0, self.size.1)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepDiagnostics {
    /// Raw score maps, one per scale, ascending.
    pub raw_maps: Vec<ScoreMap<f32>>,
    pub localization: Localization,
    pub scale_exponent: f64,
    pub displacement_px: (f64, f64),
}

/// Keeps the box inside the frame: size clamped to the frame, center to
/// where the whole box fits.
fn clamp_to_frame(center: (f64, f64), size: (f64, f64), frame: &Frame) -> ((f64, f64), (f64, f64)) {
    let (fw, fh) = (frame.width() as f64, frame.height() as f64);
    let w = size.0.clamp(MIN_BOX_SIDE.min(fw), fw);
    let h = size.1.clamp(MIN_BOX_SIDE.min(fh), fh);
    let cx = center.0.clamp(w / 2.0, fw - w / 2.0);
    let cy = center.1.clamp(h / 2.0, fh - h / 2.0);
    ((cx, cy), (w, h))
}

/// A trained model bound to tracking settings.
pub struct Tracker {
    pub model: SiamModel,
    pub params: ParamStore<f32>,
    pub config: TrackingConfig,
}

impl Tracker {
    pub fn new(model: SiamModel, params: ParamStore<f32>, config: TrackingConfig) -> Result<Self> {
        model.check_params(&params)?;
        config.validate()?;
        Ok(Tracker { model, params, config })
    }

    pub fn init(&self, frame: &Frame, bbox: &BBox) -> Result<TrackState> {
        if !bbox.is_finite() {
            return Err(contract!("non-finite initial box {bbox:?}"));
        }
        let exemplar = crop_exemplar(frame, bbox)?.patch;
        let target_embedding = self
            .model
            .embed_exemplar(&exemplar, &self.params, &mut ForwardCtx::infer())?;
        let (center, size) = clamp_to_frame(bbox.center(), (bbox.w, bbox.h), frame);
        Ok(TrackState {
            center,
            size,
            scale_smooth: 1.0,
            target_embedding,
        })
    }

    /// Raw score maps of the search crops at every configured scale.
    pub fn responses(&self, frame: &Frame, state: &TrackState) -> Result<(Vec<ScoreMap<f32>>, Vec<f64>)> {
        let means = channel_means(frame);
        let base = context_side(state.size.0, state.size.1);
        let sides: Vec<f64> = self
            .config
            .scale_multipliers()
            .iter()
            .map(|&m| search_side(base, m))
            .collect();
        let crops = sides
            .iter()
            .map(|&side| Ok(crop_square(frame, means, state.center.0, state.center.1, side, SEARCH_SIZE)?.patch))
            .collect::<Result<Vec<_>>>()?;
        let searches = stack(&crops.iter().collect::<Vec<_>>())?;
        let x = self.model.embed_search(&searches, &self.params, &mut ForwardCtx::infer())?;
        let z = stack(&vec![&state.target_embedding; sides.len()])?;
        Ok((self.model.score(&z, &x, &self.params)?, sides))
    }

    pub fn step(&self, frame: &Frame, state: &mut TrackState) -> Result<StepDiagnostics> {
        let (raw_maps, sides) = self.responses(frame, state)?;
        let n = raw_maps[0].rows;
        let raw: Vec<Vec<f64>> = raw_maps
            .iter()
            .map(|m| m.values.iter().map(|&v| v as f64).collect())
            .collect();
        let loc = localize(&raw, n, &self.config)?;
        let px = TOTAL_STRIDE * sides[loc.scale_index] / SEARCH_SIZE as f64;
        let disp = (loc.displacement.0 * px, loc.displacement.1 * px);
        let chosen = self.config.scale_multipliers()[loc.scale_index];
        state.scale_smooth = self.config.update_scale(state.scale_smooth, chosen);
        let factor = self.config.update_scale(1.0, chosen);
        let size = (state.size.0 * factor, state.size.1 * factor);
        let center = (state.center.0 + disp.0, state.center.1 + disp.1);
        (state.center, state.size) = clamp_to_frame(center, size, frame);
        Ok(StepDiagnostics {
            raw_maps,
            scale_exponent: self.config.scale_exponents[loc.scale_index],
            localization: loc,
            displacement_px: disp,
        })
    }

    /// Tracks a whole sequence from `init`; the first box is `init` itself.
    pub fn track(&self, frames: &[Frame], init: &BBox) -> Result<Vec<BBox>> {
        let first = frames.first().ok_or_else(|| contract!("no frames to track"))?;
        let mut state = self.init(first, init)?;
        let mut out = vec![*init];
        for f in &frames[1..] {
            self.step(f, &mut state)?;
            out.push(state.bbox());
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn window_shape() {
        let w = cosine_window(17).unwrap();
        assert_eq!(w[0], 0.0);
        assert_eq!(w[16], 0.0);
        assert_eq!(w[16 * 17 + 16], 0.0);
        let centre = w[8 * 17 + 8];
        assert!(w.iter().all(|&v| v <= centre));
        assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        assert!(cosine_window(1).is_err());
    }

    #[test]
    fn upsampling_interpolates_through_samples() {
        let n = 5;
        let src: Vec<f64> = (0..n * n).map(|i| ((i * 37) % 11) as f64).collect();
        let up = upsample_bicubic(&src, n, 4).unwrap();
        let u = (n - 1) * 4 + 1;
        for y in 0..n {
            for x in 0..n {
                assert!((up[y * 4 * u + x * 4] - src[y * n + x]).abs() < 1e-12);
            }
        }
        // linear ramps are reproduced away from the clamped border
        let ramp: Vec<f64> = (0..n * n).map(|i| (i % n) as f64 * 2.0 + (i / n) as f64).collect();
        let up = upsample_bicubic(&ramp, n, 4).unwrap();
        for y in 4..=12 {
            for x in 4..=12 {
                let want = x as f64 / 4.0 * 2.0 + y as f64 / 4.0;
                assert!((up[y * u + x] - want).abs() < 1e-12);
            }
        }
    }

    fn planted(n: usize, at: (f64, f64), height: f64) -> Vec<f64> {
        let c = (n / 2) as f64;
        (0..n * n)
            .map(|i| {
                let dx = (i % n) as f64 - c - at.0;
                let dy = (i / n) as f64 - c - at.1;
                height * (-(dx * dx + dy * dy) / 8.0).exp()
            })
            .collect()
    }

    #[test]
    fn planted_peak_is_decoded() {
        let cfg = TrackingConfig {
            window_influence: 0.0,
            ..TrackingConfig::default()
        };
        let maps = vec![planted(17, (0.0, 0.0), 0.5), planted(17, (2.0, -1.0), 1.0), planted(17, (0.0, 0.0), 0.5)];
        let loc = localize(&maps, 17, &cfg).unwrap();
        assert_eq!(loc.scale_index, 1);
        assert_eq!(loc.displacement, (2.0, -1.0));
        // off-grid peaks land within half an upsampled cell
        let maps = vec![planted(17, (0.0, 0.0), 0.1), planted(17, (1.3, 0.45), 1.0), planted(17, (0.0, 0.0), 0.1)];
        let loc = localize(&maps, 17, &cfg).unwrap();
        assert!((loc.displacement.0 - 1.3).abs() <= 1.0 / 16.0, "{loc:?}");
        assert!((loc.displacement.1 - 0.45).abs() <= 1.0 / 16.0, "{loc:?}");
    }

    #[test]
    fn ties_prefer_unit_scale_and_centre() {
        let cfg = TrackingConfig::default();
        let flat = vec![vec![0.3; 17 * 17]; 3];
        let loc = localize(&flat, 17, &cfg).unwrap();
        assert_eq!(loc.scale_index, 1);
        assert_eq!(loc.displacement, (0.0, 0.0));
        let mut nan = flat.clone();
        nan[0][5] = f64::NAN;
        assert!(localize(&nan, 17, &cfg).is_err());
    }

    #[test]
    fn scale_interpolation() {
        let cfg = TrackingConfig::default();
        let m = cfg.scale_multipliers();
        assert_eq!(m[2], 1.0375f64.powi(2));
        assert!((m[2] - 1.076_406_25).abs() < 1e-15);
        let mut s = 1.3;
        for _ in 0..60 {
            let next = cfg.update_scale(s, 1.0);
            assert!(next >= s.min(1.0) && next <= s.max(1.0));
            s = next;
        }
        assert!((s - 1.0).abs() < 1e-12);
        let old = TrackingConfig {
            scale_update: ScaleUpdate::WeightOld,
            ..cfg.clone()
        };
        assert!((old.update_scale(1.0, m[2]) - (0.764 + 0.236 * m[2])).abs() < 1e-15);
        assert!((cfg.update_scale(1.0, m[2]) - (0.236 + 0.764 * m[2])).abs() < 1e-15);
    }
}
