//! Self-contained conformance suites: the full-width stage-shape table and
//! seeded property checks over attention, losses, overlaps, protocol
//! metrics, windows and the stride equivariance of the score map.

use serde::Serialize;

use crate::attention::{column_softmax, AttentionConfig, SelfAttention};
use crate::backbone::{Branch, BackboneConfig, EXEMPLAR_SIZE};
use image::RgbImage;

use crate::error::Result;
use crate::eval::{aggregate, run_vot_protocol, summarize, EvalConfig, ScriptedTracker};
use crate::geometry::{iou, BBox};
use crate::head::{logistic_loss, make_label_map, map_loss};
use crate::layers::ForwardCtx;
use crate::model::{ModelConfig, SiamModel};
use crate::rng::Rng;
use crate::sequence::SequenceRecord;
use crate::tensor::Tensor;
use crate::tracking::cosine_window;
use crate::training::{lr_schedule, TrainConfig};

/// Target-branch stage shapes for a batch of 8 exemplars at full widths.
pub const FULL_WIDTH_SHAPES: [(&str, [usize; 4]); 8] = [
    ("convolution", [8, 61, 61, 72]),
    ("dense_block1", [8, 61, 61, 144]),
    ("transition1", [8, 30, 30, 36]),
    ("dense_block2", [8, 30, 30, 180]),
    ("transition2", [8, 15, 15, 36]),
    ("dense_block3", [8, 15, 15, 252]),
    ("dense_block4", [8, 9, 9, 128]),
    ("self_attention", [8, 9, 9, 128]),
];

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ShapeRow {
    pub stage: String,
    pub got: Vec<usize>,
    pub expected: Vec<usize>,
}

impl ShapeRow {
    pub fn passed(&self) -> bool {
        self.got == self.expected
    }
}

/// Runs a batch of 8 random exemplars through the full-width branch
/// and self-attention and lists every stage shape.
pub fn full_width_shapes(seed: u64) -> Result<Vec<ShapeRow>> {
    let model = SiamModel::new(ModelConfig::default())?;
    let params = model.init_params::<f32>(seed)?;
    let mut rng = Rng::stream(seed, 0x5A9E);
    let x = Tensor::from_fn(vec![8, EXEMPLAR_SIZE, EXEMPLAR_SIZE, 3], |_| rng.uniform() as f32);
    let mut ctx = ForwardCtx::infer();
    let (z, cache) = model.branch.forward(&x, &params, &mut ctx)?;
    let (za, _) = model.attention.forward(&z, &params)?;
    let mut got: Vec<(String, Vec<usize>)> = cache.stages.iter().map(|(s, v)| (s.to_string(), v.clone())).collect();
    got.push(("self_attention".into(), za.shape().to_vec()));
    let mut rows: Vec<ShapeRow> = FULL_WIDTH_SHAPES
        .iter()
        .enumerate()
        .map(|(i, (stage, want))| ShapeRow {
            stage: stage.to_string(),
            got: got.get(i).filter(|g| g.0 == *stage).map_or(vec![], |g| g.1.clone()),
            expected: want.to_vec(),
        })
        .collect();
    if got.len() != rows.len() {
        rows.push(ShapeRow {
            stage: format!("{} stages", got.len()),
            got: vec![got.len()],
            expected: vec![FULL_WIDTH_SHAPES.len()],
        });
    }
    Ok(rows)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PropCheck {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

fn check(name: &str, passed: bool, detail: String) -> PropCheck {
    PropCheck {
        name: name.into(),
        passed,
        detail,
    }
}

/// Attention on random inputs: column sums of the weights, each output
/// inside the per-channel range of the values it mixes, and shape
/// preservation for square inputs of side 3, 9 and 15.
pub fn attention_invariants(trials: usize, seed: u64) -> Result<Vec<PropCheck>> {
    let mut rng = Rng::stream(seed, 0xA7);
    let (mut worst_sum, mut worst_excess) = (0f64, f64::NEG_INFINITY);
    let mut shapes_ok = true;
    for t in 0..trials {
        let side = [3, 9, 15][t % 3];
        let c = 1 + rng.int_range(1, 16) as usize;
        let r = 1 + rng.int_range(0, 7) as usize;
        let att = SelfAttention::new(c, AttentionConfig { r, residual: false })?;
        let params = att.init_params::<f64>(rng.next_u64())?;
        let scale = [0.1, 1.0, 10.0][t % 3];
        let x = Tensor::from_fn(vec![2, side, side, c], |_| rng.normal() * scale);
        let (out, cache) = att.forward(&x, &params)?;
        shapes_ok &= out.shape() == x.shape();
        let (_, _, h) = att.projections(&x, &params)?;
        let n = side * side;
        for (b, phi) in cache.maps().iter().enumerate() {
            for j in 0..n {
                let s: f64 = (0..n).map(|i| phi.at(i, j)).sum();
                worst_sum = worst_sum.max((s - 1.0).abs());
            }
            let hv = h.item(b);
            let ov = out.item(b);
            for ch in 0..c {
                let (lo, hi) = (0..n)
                    .map(|i| hv[i * c + ch])
                    .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)));
                let tol = 1e-12 * lo.abs().max(hi.abs()).max(1.0);
                for j in 0..n {
                    let v = ov[j * c + ch];
                    worst_excess = worst_excess.max((lo - tol - v).max(v - hi - tol));
                }
            }
        }
    }
    Ok(vec![
        check(
            "attention column sums",
            worst_sum <= 1e-6,
            format!("max |sum - 1| = {worst_sum:.3e} over {trials} inputs"),
        ),
        check(
            "attention output convexity",
            worst_excess <= 0.0,
            format!("max bound violation {worst_excess:.3e} over {trials} inputs"),
        ),
        check("attention shape preservation", shapes_ok, "H,W in {3, 9, 15}".into()),
    ])
}

/// Shifting search content by one total stride (8 px) moves the raw score
/// map argmax by exactly one cell. Exemplars are planted in the search
/// image. Score cells whose inputs reach the zero padding of the dense
/// blocks are excluded, and the shifted map is searched over the same cells
/// moved by one.
pub fn stride_equivariance(fixtures: usize, seed: u64) -> Result<PropCheck> {
    let model = SiamModel::new(ModelConfig::toy())?;
    let n = model.score_size()?;
    const BORDER: usize = 6;
    let mut failures = Vec::new();
    for k in 0..fixtures as u64 {
        let params = model.init_params::<f32>(seed.wrapping_add(k))?;
        let mut rng = Rng::stream(seed, 0xE0 + k);
        let side = 255 + 16;
        let canvas: Vec<f32> = (0..side * side * 3).map(|_| rng.uniform() as f32).collect();
        let window = |x0: usize, y0: usize, size: usize| {
            let mut d = Vec::with_capacity(size * size * 3);
            for y in 0..size {
                let row = ((y0 + y) * side + x0) * 3;
                d.extend_from_slice(&canvas[row..row + size * 3]);
            }
            Tensor::new(vec![1, size, size, 3], d)
        };
        let (dx, dy) = if k % 2 == 0 { (1, 0) } else { (0, 1) };
        // content at canvas (8 + u) appears at u in `base` and at u + 8 in `shifted`
        let base = window(8, 8, 255)?;
        let shifted = window(8 - 8 * dx, 8 - 8 * dy, 255)?;
        let span = (n - 2 * BORDER - 1) as i64;
        let ci = BORDER + rng.int_range(0, span - 1) as usize;
        let cj = BORDER + rng.int_range(0, span - 1) as usize;
        let exemplar = window(8 + 8 * cj, 8 + 8 * ci, EXEMPLAR_SIZE)?;
        let mut ctx = ForwardCtx::infer();
        let z = model.embed_exemplar(&exemplar, &params, &mut ctx)?;
        let rows = BORDER..n - BORDER - dy;
        let cols = BORDER..n - BORDER - dx;
        let mut argmax = |search: &Tensor<f32>, (oy, ox): (usize, usize)| -> Result<(usize, usize)> {
            let x = model.embed_search(search, &params, &mut ctx)?;
            let map = &model.score(&z, &x, &params)?[0];
            let mut best = (rows.start + oy, cols.start + ox);
            for r in rows.clone() {
                for c in cols.clone() {
                    if map.at(r + oy, c + ox) > map.at(best.0, best.1) {
                        best = (r + oy, c + ox);
                    }
                }
            }
            Ok(best)
        };
        let a = argmax(&base, (0, 0))?;
        let b = argmax(&shifted, (dy, dx))?;
        let want = (a.0 + dy, a.1 + dx);
        if b != want {
            failures.push(format!("fixture {k}: argmax {a:?} -> {b:?}, expected {want:?}"));
        }
    }
    Ok(check(
        "stride-8 equivariance",
        failures.is_empty(),
        if failures.is_empty() {
            format!("{fixtures} fixtures, argmax moved exactly one cell")
        } else {
            failures.join("; ")
        },
    ))
}

fn softmax_checks(rng: &mut Rng) -> Result<PropCheck> {
    let mut worst = 0f64;
    let mut finite = true;
    for t in 0..50 {
        let n = 1 + rng.int_range(0, 30) as usize;
        let scale = [1.0, 100.0, 1e4][t % 3];
        let m: Vec<f64> = (0..n * n).map(|_| rng.normal() * scale).collect();
        let phi = column_softmax(&m, n)?;
        finite &= phi.phi.iter().all(|v| v.is_finite() && *v >= 0.0);
        for j in 0..n {
            worst = worst.max(((0..n).map(|i| phi.at(i, j)).sum::<f64>() - 1.0).abs());
        }
    }
    Ok(check(
        "softmax columns stochastic",
        finite && worst <= 1e-12,
        format!("max |sum - 1| = {worst:.3e}, logits up to 1e4"),
    ))
}

fn iou_checks(rng: &mut Rng) -> PropCheck {
    let mut ok = true;
    let a = BBox::new(0.0, 0.0, 2.0, 2.0);
    ok &= iou(&a, &a) == 1.0;
    ok &= iou(&a, &BBox::new(5.0, 5.0, 1.0, 1.0)) == 0.0;
    ok &= (iou(&a, &BBox::new(1.0, 0.0, 2.0, 2.0)) - 1.0 / 3.0).abs() <= 1e-12;
    for _ in 0..500 {
        let mut b = || BBox::new(rng.uniform_range(-20.0, 20.0), rng.uniform_range(-20.0, 20.0), rng.uniform_range(0.1, 30.0), rng.uniform_range(0.1, 30.0));
        let (p, q) = (b(), b());
        let v = iou(&p, &q);
        ok &= v == iou(&q, &p) && (0.0..=1.0).contains(&v) && iou(&p, &p) == 1.0;
    }
    check("iou symmetry, bounds, hand cases", ok, "500 random pairs".into())
}

fn loss_checks(rng: &mut Rng) -> Result<PropCheck> {
    let ln2 = std::f64::consts::LN_2;
    let mut ok = (logistic_loss(0.0, 1.0) - ln2).abs() < 1e-15 && (logistic_loss(0.0, -1.0) - ln2).abs() < 1e-15;
    let labels = make_label_map(17, 2.0)?;
    ok &= labels.positives() == 13;
    for balanced in [false, true] {
        let (l, _) = map_loss(&vec![0.0f64; 289], &labels, balanced)?;
        ok &= (l - ln2).abs() < 1e-12;
    }
    for _ in 0..200 {
        let v = rng.normal() * 30.0;
        let l = logistic_loss(v, 1.0);
        ok &= l.is_finite() && l >= 0.0 && logistic_loss(v + 0.5, 1.0) <= l;
        ok &= (logistic_loss(v, 1.0) - logistic_loss(-v, -1.0)).abs() < 1e-12;
    }
    Ok(check(
        "logistic loss",
        ok,
        "ln 2 at v = 0, 13 positives at radius 2, monotone, label symmetric".into(),
    ))
}

fn window_and_schedule_checks() -> Result<Vec<PropCheck>> {
    let w = cosine_window(257)?;
    let sum: f64 = w.iter().sum();
    let centre = w[128 * 257 + 128];
    let win_ok = (sum - 1.0).abs() < 1e-9 && w[0] == 0.0 && w.iter().all(|&v| v <= centre);
    let cfg = TrainConfig {
        epochs: 100,
        ..TrainConfig::default()
    };
    let lrs = (0..100).map(|e| lr_schedule(e, &cfg)).collect::<Result<Vec<_>>>()?;
    let lr_ok = lrs[0] == 1e-3 && lrs[99] == 1e-8 && lrs.windows(2).all(|p| p[1] < p[0]);
    Ok(vec![
        check("cosine window", win_ok, format!("sum - 1 = {:.1e}", sum - 1.0)),
        check("learning-rate schedule", lr_ok, "endpoints exact, strictly decreasing".into()),
    ])
}

fn random_script(rng: &mut Rng, gt: &[BBox]) -> Vec<Option<BBox>> {
    gt.iter()
        .map(|b| match rng.int_range(0, 9) {
            0 => None,
            1 | 2 => Some(BBox::new(b.x + 500.0, b.y, b.w, b.h)),
            3..=5 => Some(BBox::new(
                b.x + rng.uniform_range(-0.8, 0.8) * b.w,
                b.y + rng.uniform_range(-0.8, 0.8) * b.h,
                b.w,
                b.h,
            )),
            _ => Some(*b),
        })
        .collect()
}

/// Straightforward reference for the reset protocol: walks tracking
/// segments from each (re)initialization and returns the overlaps counted
/// for accuracy plus the number of failures.
fn reference_protocol(gt: &[BBox], script: &[Option<BBox>], cfg: &EvalConfig) -> (Vec<f64>, usize) {
    let mut counted = Vec::new();
    let mut failures = 0;
    let mut start = 0;
    while start < gt.len() {
        let burn = if start == 0 { 1 } else { cfg.burn_in };
        let mut next = gt.len();
        for t in start + 1..gt.len() {
            let overlap = script[t].map_or(0.0, |b| iou(&b, &gt[t]));
            if overlap <= 0.0 {
                failures += 1;
                next = t + cfg.reinit_gap;
                break;
            }
            if t >= start + burn {
                counted.push(overlap);
            }
        }
        start = next;
    }
    (counted, failures)
}

/// Protocol accuracy and robustness against [`reference_protocol`] on
/// randomized scripted runs. Both sides accumulate in sequence order, so
/// agreement must be exact.
pub fn metric_oracle(fixtures: usize, seed: u64) -> Result<PropCheck> {
    let mut rng = Rng::stream(seed, 0x3E7);
    let mut mismatches = Vec::new();
    for k in 0..fixtures {
        let cfg = EvalConfig {
            reinit_gap: rng.int_range(1, 6) as usize,
            burn_in: rng.int_range(0, 6) as usize,
            ..EvalConfig::default()
        };
        let (mut results, mut ref_sum, mut ref_count, mut ref_failures, mut ref_frames) = (Vec::new(), 0.0, 0, 0, 0);
        for s in 0..rng.int_range(1, 4) {
            let n = rng.int_range(2, 40) as usize;
            let mut b = BBox::new(rng.uniform_range(0.0, 50.0), rng.uniform_range(0.0, 50.0), 10.0, 8.0);
            let gt: Vec<BBox> = (0..n)
                .map(|_| {
                    b = BBox::new(b.x + rng.uniform_range(-2.0, 2.0), b.y + rng.uniform_range(-2.0, 2.0), b.w, b.h);
                    b
                })
                .collect();
            let script = random_script(&mut rng, &gt);
            let seq = SequenceRecord {
                name: format!("f{k}s{s}"),
                frames: vec![RgbImage::new(1, 1); n],
                boxes: gt.clone(),
            };
            let (outcomes, _) = run_vot_protocol(&mut ScriptedTracker(script.clone()), &seq, &cfg)?;
            results.push(summarize(&seq.name, outcomes, &[], 0.0));
            let (counted, failures) = reference_protocol(&gt, &script, &cfg);
            ref_sum += counted.iter().sum::<f64>();
            ref_count += counted.len();
            ref_failures += failures;
            ref_frames += n;
        }
        let got = aggregate(&results)?;
        let want_a = if ref_count > 0 { ref_sum / ref_count as f64 } else { 0.0 };
        let want_r = 100.0 * ref_failures as f64 / ref_frames as f64;
        if got.accuracy != want_a || got.robustness != want_r || got.failures != ref_failures {
            mismatches.push(format!(
                "fixture {k}: A {} vs {want_a}, R {} vs {want_r}",
                got.accuracy, got.robustness
            ));
        }
    }
    Ok(check(
        "protocol metrics vs reference",
        mismatches.is_empty(),
        if mismatches.is_empty() {
            format!("{fixtures} randomized fixtures agree exactly")
        } else {
            mismatches.join("; ")
        },
    ))
}

/// Every property check, seeded.
pub fn property_suite(seed: u64) -> Result<Vec<PropCheck>> {
    let mut rng = Rng::stream(seed, 0x9409);
    let mut out = attention_invariants(100, seed)?;
    out.push(softmax_checks(&mut rng)?);
    out.push(iou_checks(&mut rng));
    out.push(metric_oracle(50, seed)?);
    out.push(loss_checks(&mut rng)?);
    out.extend(window_and_schedule_checks()?);
    out.push(stride_equivariance(20, seed)?);
    Ok(out)
}

/// Branch used for shape-only checks at arbitrary widths.
pub fn branch_shapes(config: BackboneConfig, side: usize) -> Result<Vec<(String, Vec<usize>)>> {
    let branch = Branch::new(config)?;
    let params = branch.init_params::<f32>(0)?;
    let x = Tensor::zeros(vec![1, side, side, 3]);
    let (_, cache) = branch.forward(&x, &params, &mut ForwardCtx::infer())?;
    Ok(cache.stages.into_iter().map(|(s, v)| (s.to_string(), v)).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quick_property_checks_pass() {
        let mut rng = Rng::new(1);
        for c in attention_invariants(12, 1).unwrap() {
            assert!(c.passed, "{c:?}");
        }
        assert!(softmax_checks(&mut rng).unwrap().passed);
        assert!(iou_checks(&mut rng).passed);
        let m = metric_oracle(50, 3).unwrap();
        assert!(m.passed, "{m:?}");
        assert!(loss_checks(&mut rng).unwrap().passed);
        for c in window_and_schedule_checks().unwrap() {
            assert!(c.passed, "{c:?}");
        }
    }

    #[test]
    fn toy_search_branch_ends_at_stride_eight() {
        let stages = branch_shapes(BackboneConfig::toy(), 255).unwrap();
        assert_eq!(stages.last().unwrap().1[1], 25);
    }
}
