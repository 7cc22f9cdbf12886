//! Square context crops around a target, resampled bilinearly to the
//! network input sizes. Area outside the frame takes the frame's mean color.

use crate::error::{contract, Result};
use crate::geometry::{BBox, Frame};
use crate::backbone::{EXEMPLAR_SIZE, SEARCH_SIZE};
use crate::tensor::{Scalar, Tensor};

pub const MIN_BOX_SIDE: f64 = 2.0;

/// Side of the square exemplar context region: `sqrt((w + 2p)(h + 2p))`
/// with margin `p = (w + h) / 4`.
pub fn context_side(w: f64, h: f64) -> f64 {
    let (w, h) = (w.max(MIN_BOX_SIDE), h.max(MIN_BOX_SIDE));
    let p = (w + h) / 4.0;
    ((w + 2.0 * p) * (h + 2.0 * p)).sqrt()
}

/// Search region side for a given exemplar context side and scale.
pub fn search_side(exemplar_side: f64, scale: f64) -> f64 {
    exemplar_side * SEARCH_SIZE as f64 / EXEMPLAR_SIZE as f64 * scale
}

/// A resampled patch, `(1, size, size, 3)` with intensities in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Crop {
    pub patch: Tensor<f32>,
    /// Fraction of output pixels that fell outside the frame.
    pub fill_fraction: f64,
}

pub fn channel_means(frame: &Frame) -> [f64; 3] {
    let mut sum = [0u64; 3];
    for p in frame.pixels() {
        for c in 0..3 {
            sum[c] += p.0[c] as u64;
        }
    }
    let n = (frame.width() as u64 * frame.height() as u64).max(1) as f64;
    sum.map(|s| s as f64 / n)
}

/// Resamples the square of side `side` centered at `(cx, cy)` to
/// `out x out`. Output pixel `u` samples source coordinate
/// `cx - side/2 + (u + 0.5) side/out - 0.5` in pixel-index units.
pub fn crop_square(frame: &Frame, means: [f64; 3], cx: f64, cy: f64, side: f64, out: usize) -> Result<Crop> {
    if !(side > 0.0) || !cx.is_finite() || !cy.is_finite() || out == 0 {
        return Err(contract!("invalid crop: center ({cx}, {cy}), side {side}, size {out}"));
    }
    let (w, h) = frame.dimensions();
    if w == 0 || h == 0 {
        return Err(contract!("empty frame"));
    }
    let (wf, hf) = (w as f64, h as f64);
    let step = side / out as f64;
    let coords = |c: f64, limit: f64| -> Vec<Option<(usize, usize, f64)>> {
        (0..out)
            .map(|u| {
                let p = c - side / 2.0 + (u as f64 + 0.5) * step - 0.5;
                if p < -0.5 || p >= limit - 0.5 {
                    return None;
                }
                let p = p.clamp(0.0, limit - 1.0);
                let i0 = p.floor() as usize;
                let i1 = (i0 + 1).min(limit as usize - 1);
                Some((i0, i1, p - i0 as f64))
            })
            .collect()
    };
    let xs = coords(cx, wf);
    let ys = coords(cy, hf);
    let raw = frame.as_raw();
    let px = |x: usize, y: usize, c: usize| raw[(y * w as usize + x) * 3 + c] as f64;
    let mut data = vec![0f32; out * out * 3];
    let mut filled = 0usize;
    for (v, ycoord) in ys.iter().enumerate() {
        for (u, xcoord) in xs.iter().enumerate() {
            let dst = &mut data[(v * out + u) * 3..][..3];
            match (ycoord, xcoord) {
                (Some((y0, y1, ty)), Some((x0, x1, tx))) => {
                    for c in 0..3 {
                        let top = px(*x0, *y0, c) * (1.0 - tx) + px(*x1, *y0, c) * tx;
                        let bot = px(*x0, *y1, c) * (1.0 - tx) + px(*x1, *y1, c) * tx;
                        dst[c] = ((top * (1.0 - ty) + bot * ty) / 255.0) as f32;
                    }
                }
                _ => {
                    filled += 1;
                    for c in 0..3 {
                        dst[c] = (means[c] / 255.0) as f32;
                    }
                }
            }
        }
    }
    Ok(Crop {
        patch: Tensor::new(vec![1, out, out, 3], data)?,
        fill_fraction: filled as f64 / (out * out) as f64,
    })
}

pub fn crop_exemplar(frame: &Frame, bbox: &BBox) -> Result<Crop> {
    let (cx, cy) = bbox.center();
    crop_square(frame, channel_means(frame), cx, cy, context_side(bbox.w, bbox.h), EXEMPLAR_SIZE)
}

/// Search patch centered at `center`, for a target of size `(w, h)`.
pub fn crop_search(frame: &Frame, center: (f64, f64), size: (f64, f64), scale: f64) -> Result<Crop> {
    let side = search_side(context_side(size.0, size.1), scale);
    crop_square(frame, channel_means(frame), center.0, center.1, side, SEARCH_SIZE)
}

/// Concatenates `(1, h, w, c)` patches into one `(n, h, w, c)` batch.
pub fn stack<T: Scalar>(patches: &[&Tensor<T>]) -> Result<Tensor<T>> {
    let first = patches.first().ok_or_else(|| contract!("cannot stack zero patches"))?;
    let (_, h, w, c) = first.dims4()?;
    let mut data = Vec::with_capacity(patches.len() * h * w * c);
    for p in patches {
        if p.shape() != [1, h, w, c] {
            return Err(contract!("patch shape {:?} differs from {:?}", p.shape(), first.shape()));
        }
        data.extend_from_slice(p.data());
    }
    Tensor::new(vec![patches.len(), h, w, c], data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use image::Rgb;

    fn gradient_frame(w: u32, h: u32) -> Frame {
        Frame::from_fn(w, h, |x, y| Rgb([x as u8, y as u8, 100]))
    }

    #[test]
    fn margin_formula() {
        assert_eq!(context_side(64.0, 64.0), 128.0);
        assert_eq!(context_side(48.0, 48.0), 96.0);
        assert_eq!(context_side(40.0, 20.0), (70.0f64 * 50.0).sqrt());
        assert!((search_side(96.0, 1.0) - 96.0 * 255.0 / 127.0).abs() < 1e-12);
        // degenerate boxes are widened to the minimum side
        assert_eq!(context_side(0.0, 0.0), context_side(2.0, 2.0));
    }

    #[test]
    fn centered_box_needs_no_fill() {
        let f = gradient_frame(200, 200);
        let c = crop_exemplar(&f, &BBox::from_center(100.0, 100.0, 64.0, 64.0)).unwrap();
        assert_eq!(c.fill_fraction, 0.0);
        assert_eq!(c.patch.shape(), &[1, 127, 127, 3]);
    }

    #[test]
    fn identity_resampling_reproduces_pixels() {
        // side == out and an integer-aligned window: every sample hits a pixel center
        let f = gradient_frame(64, 48);
        let c = crop_square(&f, channel_means(&f), 32.0, 24.0, 16.0, 16).unwrap();
        for v in 0..16 {
            for u in 0..16 {
                let got = c.patch.data()[(v * 16 + u) * 3];
                assert_eq!(got, ((24 + u) as f64 / 255.0) as f32);
                let got = c.patch.data()[(v * 16 + u) * 3 + 1];
                assert_eq!(got, ((16 + v) as f64 / 255.0) as f32);
            }
        }
    }

    #[test]
    fn corner_fill_fraction_matches_area() {
        let f = gradient_frame(300, 200);
        // crop centered on the top-left corner: three quarters fall outside
        let c = crop_square(&f, channel_means(&f), 0.0, 0.0, 100.0, 100).unwrap();
        assert!((c.fill_fraction - 0.75).abs() < 1e-12);
        let m = channel_means(&f);
        assert_eq!(c.patch.data()[0], (m[0] / 255.0) as f32);
        // off-grid case: side 90 at (20, 30) leaves 25 x 15 px of frame outside
        let c = crop_square(&f, m, 20.0, 30.0, 90.0, 90).unwrap();
        let inside = (90.0 - 25.0) * (90.0 - 15.0) / (90.0 * 90.0);
        assert!((c.fill_fraction - (1.0 - inside)).abs() < 1e-12);
    }

    #[test]
    fn search_crops_are_deterministic() {
        let f = gradient_frame(120, 90);
        let a = crop_search(&f, (60.0, 45.0), (20.0, 30.0), 1.0).unwrap();
        let b = crop_search(&f, (60.0, 45.0), (20.0, 30.0), 1.0).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.patch.shape(), &[1, 255, 255, 3]);
    }

    #[test]
    fn stack_concatenates_batch() {
        let a = Tensor::<f32>::full(vec![1, 2, 2, 3], 1.0);
        let b = Tensor::<f32>::full(vec![1, 2, 2, 3], 2.0);
        let s = stack(&[&a, &b]).unwrap();
        assert_eq!(s.shape(), &[2, 2, 2, 3]);
        assert_eq!(s.item(1)[0], 2.0);
        assert!(stack(&[&a, &Tensor::<f32>::zeros(vec![1, 3, 2, 3])]).is_err());
    }
}
