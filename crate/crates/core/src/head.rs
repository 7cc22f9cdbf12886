//! Similarity head: channel-summed cross-correlation of the exemplar
//! embedding over the search embedding, a learned scalar adjust
//! `v = gain * corr + bias`, and the logistic loss `log(1 + exp(-y v))`
//! averaged over the score map.

use crate::error::{config_err, contract, Result};
use crate::params::{ParamKind, ParamStore};
use crate::tensor::{Scalar, Tensor};

pub const GAIN_INIT: f64 = 1e-3;
pub const DEFAULT_R_POS: f64 = 2.0;

pub const GAIN: &str = "head.gain";
pub const BIAS: &str = "head.bias";

/// 2-D response map, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreMap<T = f32> {
    pub rows: usize,
    pub cols: usize,
    pub values: Vec<T>,
}

impl<T: Scalar> ScoreMap<T> {
    pub fn at(&self, row: usize, col: usize) -> T {
        self.values[row * self.cols + col]
    }

    /// Row-major argmax; the first maximum wins.
    pub fn argmax(&self) -> (usize, usize) {
        let mut best = 0;
        for (i, &v) in self.values.iter().enumerate() {
            if v > self.values[best] {
                best = i;
            }
        }
        (best / self.cols, best % self.cols)
    }
}

/// `+1` inside a disc of radius `r_pos` cells around `center`, `-1` elsewhere.
#[derive(Debug, Clone, PartialEq)]
pub struct LabelMap {
    pub size: usize,
    pub r_pos: f64,
    pub labels: Vec<f64>,
}

impl LabelMap {
    pub fn positives(&self) -> usize {
        self.labels.iter().filter(|&&y| y > 0.0).count()
    }
}

/// Labels centered on the map center. `size` must be odd.
pub fn make_label_map(size: usize, r_pos: f64) -> Result<LabelMap> {
    make_label_map_at(size, r_pos, (0.0, 0.0))
}

/// Labels centered at `offset = (dx, dy)` cells from the map center.
pub fn make_label_map_at(size: usize, r_pos: f64, offset: (f64, f64)) -> Result<LabelMap> {
    if size % 2 == 0 {
        return Err(config_err!("label map size {size} must be odd"));
    }
    if !(r_pos >= 0.0) {
        return Err(config_err!("positive radius {r_pos} must be >= 0"));
    }
    let c = (size / 2) as f64;
    let (cx, cy) = (c + offset.0, c + offset.1);
    let labels = (0..size * size)
        .map(|i| {
            let dy = (i / size) as f64 - cy;
            let dx = (i % size) as f64 - cx;
            if (dx * dx + dy * dy).sqrt() <= r_pos {
                1.0
            } else {
                -1.0
            }
        })
        .collect();
    Ok(LabelMap {
        size,
        r_pos,
        labels,
    })
}

/// `log(1 + exp(-y v))` evaluated as a softplus, stable for large `|v|`.
pub fn logistic_loss(v: f64, y: f64) -> f64 {
    let z = -y * v;
    z.max(0.0) + (-z.abs()).exp().ln_1p()
}

/// `d/dv log(1 + exp(-y v)) = -y * sigmoid(-y v)`.
pub fn logistic_loss_grad(v: f64, y: f64) -> f64 {
    let z = -y * v;
    let s = if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    };
    -y * s
}

/// Mean logistic loss over a map and its gradient with respect to every
/// score. Unbalanced mode is the plain mean over all cells; balanced mode
/// gives positives and negatives half the total weight each.
pub fn map_loss<T: Scalar>(scores: &[T], labels: &LabelMap, balanced: bool) -> Result<(f64, Vec<T>)> {
    if scores.len() != labels.labels.len() {
        return Err(contract!(
            "score map has {} cells, label map has {}",
            scores.len(),
            labels.labels.len()
        ));
    }
    let n = scores.len() as f64;
    let pos = labels.positives() as f64;
    let neg = n - pos;
    let weight = |y: f64| {
        if !balanced {
            1.0 / n
        } else if pos == 0.0 || neg == 0.0 {
            1.0 / n
        } else if y > 0.0 {
            0.5 / pos
        } else {
            0.5 / neg
        }
    };
    let mut loss = 0.0;
    let mut grad = Vec::with_capacity(scores.len());
    for (&v, &y) in scores.iter().zip(&labels.labels) {
        let w = weight(y);
        loss += w * logistic_loss(v.as_f64(), y);
        grad.push(T::from_f64(w * logistic_loss_grad(v.as_f64(), y)));
    }
    Ok((loss, grad))
}

/// Raw cross-correlation of one `(th, tw, c)` template over one
/// `(sh, sw, c)` search map: `out[y][x] = sum t[i][j][k] * s[y+i][x+j][k]`.
pub fn correlate<T: Scalar>(
    template: &[T],
    (th, tw): (usize, usize),
    search: &[T],
    (sh, sw): (usize, usize),
    c: usize,
) -> Result<ScoreMap<T>> {
    if th > sh || tw > sw {
        return Err(contract!(
            "template {th}x{tw} is larger than search {sh}x{sw}"
        ));
    }
    if template.len() != th * tw * c || search.len() != sh * sw * c {
        return Err(contract!("correlation operand sizes disagree with {c} channels"));
    }
    let (oh, ow) = (sh - th + 1, sw - tw + 1);
    let row = tw * c;
    let mut values = Vec::with_capacity(oh * ow);
    for y in 0..oh {
        for x in 0..ow {
            let mut acc = T::zero();
            for i in 0..th {
                let t = &template[i * row..][..row];
                let s = &search[((y + i) * sw + x) * c..][..row];
                acc = acc + t.iter().zip(s).map(|(&a, &b)| a * b).sum::<T>();
            }
            values.push(acc);
        }
    }
    Ok(ScoreMap {
        rows: oh,
        cols: ow,
        values,
    })
}

#[derive(Debug, Clone, Default)]
pub struct SiameseHead;

pub struct HeadCache<T> {
    target: Tensor<T>,
    search: Tensor<T>,
    raw: Vec<ScoreMap<T>>,
}

impl SiameseHead {
    pub fn init_into<T: Scalar>(&self, params: &mut ParamStore<T>) -> Result<()> {
        params.insert(GAIN, Tensor::scalar(T::from_f64(GAIN_INIT)), ParamKind::Learnable)?;
        params.insert(BIAS, Tensor::scalar(T::zero()), ParamKind::Learnable)
    }

    /// Adjusted score maps `gain * corr + bias` for each batch item.
    pub fn forward<T: Scalar>(
        &self,
        target: &Tensor<T>,
        search: &Tensor<T>,
        params: &ParamStore<T>,
    ) -> Result<(Vec<ScoreMap<T>>, HeadCache<T>)> {
        let (b, th, tw, c) = target.dims4()?;
        let (sb, sh, sw, sc) = search.dims4()?;
        if b != sb || c != sc {
            return Err(contract!(
                "target {:?} and search {:?} disagree on batch or channels",
                target.shape(),
                search.shape()
            ));
        }
        let gain = params.get(GAIN)?.data()[0];
        let bias = params.get(BIAS)?.data()[0];
        let mut raw = Vec::with_capacity(b);
        let mut out = Vec::with_capacity(b);
        for n in 0..b {
            let r = correlate(target.item(n), (th, tw), search.item(n), (sh, sw), c)?;
            out.push(ScoreMap {
                rows: r.rows,
                cols: r.cols,
                values: r.values.iter().map(|&v| gain * v + bias).collect(),
            });
            raw.push(r);
        }
        Ok((
            out,
            HeadCache {
                target: target.clone(),
                search: search.clone(),
                raw,
            },
        ))
    }

    /// Gradients with respect to (target, search) embeddings; gain and bias
    /// gradients are accumulated into `grads`.
    pub fn backward<T: Scalar>(
        &self,
        cache: &HeadCache<T>,
        upstream: &[Vec<T>],
        params: &ParamStore<T>,
        grads: &mut ParamStore<T>,
    ) -> Result<(Tensor<T>, Tensor<T>)> {
        let (b, th, tw, c) = cache.target.dims4()?;
        let (_, _, sw, _) = cache.search.dims4()?;
        if upstream.len() != b {
            return Err(contract!("head backward: {} gradients for batch {b}", upstream.len()));
        }
        let gain = params.get(GAIN)?.data()[0];
        let mut dgain = T::zero();
        let mut dbias = T::zero();
        let mut dt = Tensor::zeros(cache.target.shape().to_vec());
        let mut ds = Tensor::zeros(cache.search.shape().to_vec());
        let row = tw * c;
        for n in 0..b {
            let raw = &cache.raw[n];
            let dv = &upstream[n];
            if dv.len() != raw.values.len() {
                return Err(contract!(
                    "head backward: gradient has {} cells, map has {}",
                    dv.len(),
                    raw.values.len()
                ));
            }
            let t = cache.target.item(n);
            let s = cache.search.item(n);
            let dtn = dt.item_mut(n);
            for (i, (&g, &r)) in dv.iter().zip(&raw.values).enumerate() {
                dgain = dgain + g * r;
                dbias = dbias + g;
                let dr = g * gain;
                let (y, x) = (i / raw.cols, i % raw.cols);
                for ki in 0..th {
                    let sw_row = &s[((y + ki) * sw + x) * c..][..row];
                    for (d, &v) in dtn[ki * row..][..row].iter_mut().zip(sw_row) {
                        *d = *d + dr * v;
                    }
                }
            }
            let dsn = ds.item_mut(n);
            for (i, &g) in dv.iter().enumerate() {
                let dr = g * gain;
                let (y, x) = (i / raw.cols, i % raw.cols);
                for ki in 0..th {
                    let dst = &mut dsn[((y + ki) * sw + x) * c..][..row];
                    for (d, &v) in dst.iter_mut().zip(&t[ki * row..][..row]) {
                        *d = *d + dr * v;
                    }
                }
            }
        }
        grads.accumulate(GAIN, &Tensor::scalar(dgain))?;
        grads.accumulate(BIAS, &Tensor::scalar(dbias))?;
        Ok((dt, ds))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn label_map_counts() {
        let l = make_label_map(17, 2.0).unwrap();
        assert_eq!(l.positives(), 13);
        assert_eq!(make_label_map(17, 0.0).unwrap().positives(), 1);
        assert!(make_label_map(16, 2.0).is_err());
    }

    #[test]
    fn label_map_rotation_invariant() {
        let l = make_label_map(17, 3.3).unwrap();
        let n = 17;
        for y in 0..n {
            for x in 0..n {
                // (y, x) -> (x, n-1-y)
                assert_eq!(l.labels[y * n + x], l.labels[x * n + (n - 1 - y)]);
            }
        }
    }

    #[test]
    fn logistic_values() {
        assert!((logistic_loss(0.0, 1.0) - std::f64::consts::LN_2).abs() < 1e-15);
        // ln(1 + e^-10) to 1e-16 relative
        assert!((logistic_loss(10.0, 1.0) - 4.539889921686465e-5).abs() < 1e-18);
        for v in [-1e4, -3.0, 0.5, 1e4] {
            assert_eq!(logistic_loss(v, -1.0), logistic_loss(-v, 1.0));
            assert!(logistic_loss(v, 1.0).is_finite());
        }
        assert_eq!(logistic_loss(-1e4, 1.0), 1e4);
    }

    #[test]
    fn constant_zero_map_costs_ln2() {
        let labels = make_label_map(17, 2.0).unwrap();
        let zeros = vec![0.0f64; 289];
        for balanced in [false, true] {
            let (l, _) = map_loss(&zeros, &labels, balanced).unwrap();
            assert!((l - std::f64::consts::LN_2).abs() < 1e-12);
        }
        let perfect: Vec<f64> = labels.labels.iter().map(|y| 60.0 * y).collect();
        assert!(map_loss(&perfect, &labels, true).unwrap().0 < 1e-20);
    }

    #[test]
    fn zero_template_gives_bias() {
        let t = vec![0.0f32; 2 * 2 * 3];
        let s: Vec<f32> = (0..5 * 5 * 3).map(|i| i as f32).collect();
        let m = correlate(&t, (2, 2), &s, (5, 5), 3).unwrap();
        assert_eq!((m.rows, m.cols), (4, 4));
        assert!(m.values.iter().all(|&v| v == 0.0));
        assert!(correlate(&s, (5, 5), &t, (2, 2), 3).is_err());
    }
}
