//! Procedural tracking sequences: a textured shape moving over a textured
//! background, with exact ground truth.

use image::Rgb;
use serde::{Deserialize, Serialize};

use crate::error::{config_err, Result};
use crate::geometry::{BBox, Frame};
use crate::rng::Rng;
use crate::sequence::SequenceRecord;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShapeKind {
    Rectangle,
    Ellipse,
    Diamond,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MotionKind {
    Linear,
    Sinusoidal,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthSpec {
    pub width: u32,
    pub height: u32,
    pub length: usize,
    pub shape: ShapeKind,
    pub motion: MotionKind,
    /// Object `[w, h]` in pixels.
    pub object_size: [f64; 2],
    /// Initial object center; the frame center when absent.
    pub start: Option<[f64; 2]>,
    /// Pixels per frame.
    pub velocity: [f64; 2],
    /// Sinusoidal motion amplitude in pixels, added to the linear drift.
    pub amplitude: [f64; 2],
    /// Sinusoidal period in frames.
    pub period: f64,
    /// Additive Gaussian noise standard deviation, intensities in `[0, 1]`.
    pub noise: f64,
    pub occlusion: bool,
    /// Relative amplitude of a slow global brightness oscillation.
    pub illumination_drift: f64,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            width: 320,
            height: 240,
            length: 100,
            shape: ShapeKind::Rectangle,
            motion: MotionKind::Linear,
            object_size: [40.0, 40.0],
            start: None,
            velocity: [1.0, 0.5],
            amplitude: [0.0, 0.0],
            period: 50.0,
            noise: 5.0 / 255.0,
            occlusion: false,
            illumination_drift: 0.0,
            seed: 0,
        }
    }
}

impl SynthSpec {
    /// A varied spec for training data: shape, size, motion, noise and
    /// nuisances drawn from `seed`, frame size and length from `self`.
    pub fn randomized(&self, seed: u64) -> SynthSpec {
        let mut rng = Rng::stream(seed, 0x5EED);
        let shape = *rng.choose(&[ShapeKind::Rectangle, ShapeKind::Ellipse, ShapeKind::Diamond]);
        let motion = *rng.choose(&[MotionKind::Linear, MotionKind::Sinusoidal]);
        let side = rng.uniform_range(28.0, 56.0);
        let aspect = rng.uniform_range(0.7, 1.4);
        let (w, h) = (side * aspect.sqrt(), side / aspect.sqrt());
        SynthSpec {
            shape,
            motion,
            object_size: [w, h],
            start: Some([
                rng.uniform_range(w, self.width as f64 - w),
                rng.uniform_range(h, self.height as f64 - h),
            ]),
            velocity: [rng.uniform_range(-2.5, 2.5), rng.uniform_range(-2.5, 2.5)],
            amplitude: [rng.uniform_range(0.0, 30.0), rng.uniform_range(0.0, 30.0)],
            period: rng.uniform_range(20.0, 80.0),
            noise: rng.uniform_range(0.0, 8.0) / 255.0,
            occlusion: rng.bernoulli(0.2),
            illumination_drift: rng.uniform_range(0.0, 0.15),
            seed,
            ..self.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.length < 2 {
            return Err(config_err!("synthetic sequence length {} must be >= 2", self.length));
        }
        let [w, h] = self.object_size;
        if !(w >= 2.0 && h >= 2.0) || w > self.width as f64 || h > self.height as f64 {
            return Err(config_err!(
                "object size {w}x{h} does not fit a {}x{} frame",
                self.width,
                self.height
            ));
        }
        if !(self.noise >= 0.0) || !(self.period > 0.0) {
            return Err(config_err!("noise must be >= 0 and period > 0"));
        }
        Ok(())
    }

    /// Ground-truth box of frame `t`, clamped inside the frame.
    pub fn box_at(&self, t: usize) -> BBox {
        let [w, h] = self.object_size;
        let [sx, sy] = self
            .start
            .unwrap_or([self.width as f64 / 2.0, self.height as f64 / 2.0]);
        let t = t as f64;
        let (mut cx, mut cy) = (sx + self.velocity[0] * t, sy + self.velocity[1] * t);
        if self.motion == MotionKind::Sinusoidal {
            let phase = std::f64::consts::TAU * t / self.period;
            cx += self.amplitude[0] * phase.sin();
            cy += self.amplitude[1] * (phase + std::f64::consts::FRAC_PI_2).sin() - self.amplitude[1];
        }
        let cx = cx.clamp(w / 2.0, self.width as f64 - w / 2.0);
        let cy = cy.clamp(h / 2.0, self.height as f64 - h / 2.0);
        BBox::from_center(cx, cy, w, h)
    }
}

struct Grating {
    kx: f64,
    ky: f64,
    phase: f64,
    color: [f64; 3],
}

impl Grating {
    fn random(rng: &mut Rng, min_period: f64, max_period: f64, amp: f64) -> Self {
        let period = rng.uniform_range(min_period, max_period);
        let angle = rng.uniform_range(0.0, std::f64::consts::PI);
        let k = std::f64::consts::TAU / period;
        Grating {
            kx: k * angle.cos(),
            ky: k * angle.sin(),
            phase: rng.uniform_range(0.0, std::f64::consts::TAU),
            color: [
                rng.uniform_range(-amp, amp),
                rng.uniform_range(-amp, amp),
                rng.uniform_range(-amp, amp),
            ],
        }
    }

    fn at(&self, x: f64, y: f64) -> f64 {
        (self.kx * x + self.ky * y + self.phase).sin()
    }
}

fn background(spec: &SynthSpec, rng: &mut Rng) -> Vec<[f64; 3]> {
    let base = rng.uniform_range(0.35, 0.6);
    let tint: [f64; 3] = [0.0; 3].map(|_| rng.uniform_range(-0.05, 0.05));
    let gratings: Vec<Grating> = (0..4).map(|_| Grating::random(rng, 10.0, 60.0, 0.12)).collect();
    // coarse value noise, bilinearly interpolated
    const CELL: f64 = 24.0;
    let gw = (spec.width as f64 / CELL) as usize + 2;
    let gh = (spec.height as f64 / CELL) as usize + 2;
    let grid: Vec<f64> = (0..gw * gh).map(|_| rng.uniform_range(-0.1, 0.1)).collect();
    let mut out = Vec::with_capacity((spec.width * spec.height) as usize);
    for y in 0..spec.height {
        for x in 0..spec.width {
            let (fx, fy) = (x as f64 / CELL, y as f64 / CELL);
            let (ix, iy) = (fx as usize, fy as usize);
            let (tx, ty) = (fx - ix as f64, fy - iy as f64);
            let g = |i: usize, j: usize| grid[j * gw + i];
            let noise = (1.0 - ty) * ((1.0 - tx) * g(ix, iy) + tx * g(ix + 1, iy))
                + ty * ((1.0 - tx) * g(ix, iy + 1) + tx * g(ix + 1, iy + 1));
            let mut px = [base + noise; 3];
            for (c, v) in px.iter_mut().enumerate() {
                *v += tint[c];
                for gr in &gratings {
                    *v += gr.color[c] * gr.at(x as f64, y as f64);
                }
            }
            out.push(px);
        }
    }
    out
}

struct ObjectTexture {
    base: [f64; 3],
    stripe: Grating,
    spot: Grating,
}

impl ObjectTexture {
    fn random(rng: &mut Rng) -> Self {
        // saturated base color: one strong channel, one weak
        let mut base = [0.0; 3].map(|_| rng.uniform_range(0.25, 0.6));
        let strong = rng.int_range(0, 2) as usize;
        base[strong] = rng.uniform_range(0.85, 1.0);
        base[(strong + 1 + rng.int_range(0, 1) as usize) % 3] = rng.uniform_range(0.0, 0.15);
        ObjectTexture {
            base,
            stripe: Grating::random(rng, 8.0, 14.0, 0.0),
            spot: Grating::random(rng, 5.0, 9.0, 0.0),
        }
    }

    fn at(&self, u: f64, v: f64) -> [f64; 3] {
        let s = 0.75 + 0.25 * self.stripe.at(u, v) + 0.1 * self.spot.at(u, v);
        self.base.map(|b| b * s)
    }
}

fn inside(shape: ShapeKind, u: f64, v: f64) -> bool {
    match shape {
        ShapeKind::Rectangle => u.abs() <= 1.0 && v.abs() <= 1.0,
        ShapeKind::Ellipse => u * u + v * v <= 1.0,
        ShapeKind::Diamond => u.abs() + v.abs() <= 1.0,
    }
}

/// Lazily renders the frames of one spec; holds the per-sequence textures.
pub struct SynthRenderer {
    spec: SynthSpec,
    background: Vec<[f64; 3]>,
    texture: ObjectTexture,
    bar: (f64, f64),
}

impl SynthRenderer {
    pub fn new(spec: SynthSpec) -> Result<Self> {
        spec.validate()?;
        let mut rng = Rng::stream(spec.seed, 0xB6);
        let background = background(&spec, &mut rng);
        let texture = ObjectTexture::random(&mut rng);
        let bar_w = (spec.object_size[0] * 0.4).max(6.0);
        let bar_x = rng.uniform_range(0.3, 0.7) * spec.width as f64;
        Ok(SynthRenderer {
            spec,
            background,
            texture,
            bar: (bar_x, bar_w),
        })
    }

    pub fn spec(&self) -> &SynthSpec {
        &self.spec
    }

    pub fn len(&self) -> usize {
        self.spec.length
    }

    pub fn is_empty(&self) -> bool {
        self.spec.length == 0
    }

    pub fn bbox(&self, t: usize) -> BBox {
        self.spec.box_at(t)
    }

    pub fn frame(&self, t: usize) -> Frame {
        let spec = &self.spec;
        let b = spec.box_at(t);
        let (bar_x, bar_w) = self.bar;
        let gain = 1.0
            + spec.illumination_drift * (std::f64::consts::TAU * t as f64 / spec.length as f64).sin();
        let mut noise = Rng::stream(spec.seed, 0x1000 + t as u64);
        let width = spec.width;
        Frame::from_fn(width, spec.height, |x, y| {
            let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
            let mut v = self.background[(y * width + x) as usize];
            let u = (px - b.x) / b.w * 2.0 - 1.0;
            let w = (py - b.y) / b.h * 2.0 - 1.0;
            if inside(spec.shape, u, w) {
                v = self.texture.at(px - b.x, py - b.y);
            }
            if spec.occlusion && px >= bar_x && px < bar_x + bar_w {
                let stripe = if ((py / 6.0) as i64) % 2 == 0 { 0.3 } else { 0.4 };
                v = [stripe; 3];
            }
            Rgb(v.map(|c| {
                let c = c * gain + spec.noise * noise.normal();
                (c.clamp(0.0, 1.0) * 255.0).round() as u8
            }))
        })
    }
}

/// Renders the sequence described by `spec`.
pub fn gen_synthetic_sequence(spec: &SynthSpec) -> Result<SequenceRecord> {
    let r = SynthRenderer::new(spec.clone())?;
    Ok(SequenceRecord {
        name: format!("synth-{}", spec.seed),
        frames: (0..spec.length).map(|t| r.frame(t)).collect(),
        boxes: (0..spec.length).map(|t| r.bbox(t)).collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn short(spec: SynthSpec) -> SynthSpec {
        SynthSpec {
            width: 96,
            height: 80,
            length: 6,
            object_size: [20.0, 16.0],
            ..spec
        }
    }

    #[test]
    fn static_target_keeps_its_box() {
        let spec = short(SynthSpec {
            velocity: [0.0, 0.0],
            ..SynthSpec::default()
        });
        let seq = gen_synthetic_sequence(&spec).unwrap();
        assert!(seq.boxes.windows(2).all(|w| w[0] == w[1]));
    }

    #[test]
    fn linear_motion_until_clamp() {
        let spec = SynthSpec {
            velocity: [2.0, 0.0],
            length: 100,
            ..SynthSpec::default()
        };
        let x0 = spec.box_at(0).x;
        for t in 1..100 {
            let b = spec.box_at(t);
            let free = x0 + 2.0 * t as f64;
            let limit = spec.width as f64 - spec.object_size[0];
            assert_eq!(b.x, free.min(limit));
            assert!(b.right() <= spec.width as f64);
        }
    }

    #[test]
    fn same_seed_same_pixels() {
        let spec = short(SynthSpec {
            occlusion: true,
            illumination_drift: 0.1,
            seed: 9,
            ..SynthSpec::default()
        });
        let a = gen_synthetic_sequence(&spec).unwrap();
        let b = gen_synthetic_sequence(&spec).unwrap();
        assert_eq!(a.frames, b.frames);
        let c = gen_synthetic_sequence(&SynthSpec { seed: 10, ..spec }).unwrap();
        assert_ne!(a.frames[0], c.frames[0]);
    }

    #[test]
    fn boxes_stay_in_frame_for_random_specs() {
        for seed in 0..20 {
            let spec = SynthSpec {
                length: 200,
                ..SynthSpec::default()
            }
            .randomized(seed);
            for t in 0..spec.length {
                let b = spec.box_at(t);
                assert!(b.x >= 0.0 && b.y >= 0.0);
                assert!(b.right() <= spec.width as f64 + 1e-9);
                assert!(b.bottom() <= spec.height as f64 + 1e-9);
            }
        }
    }

    #[test]
    fn rejects_bad_specs() {
        assert!(gen_synthetic_sequence(&SynthSpec {
            length: 1,
            ..SynthSpec::default()
        })
        .is_err());
        assert!(gen_synthetic_sequence(&SynthSpec {
            object_size: [400.0, 10.0],
            ..SynthSpec::default()
        })
        .is_err());
    }
}
