//! VOT-style evaluation: failures at zero overlap with delayed
//! reinitialization, accuracy outside burn-in windows, robustness per 100
//! frames, and a simplified expected-overlap figure from a no-reset run.

use std::io::Write;
use std::path::Path;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{config_err, contract, Error, Result};
use crate::geometry::{iou, BBox, Frame};
use crate::sequence::SequenceRecord;
use crate::tracking::{TrackState, Tracker};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    /// Frames skipped after a failure before reinitializing.
    pub reinit_gap: usize,
    /// Frames after each (re)initialization, starting with the
    /// initialization frame, left out of accuracy.
    pub burn_in: usize,
    /// Generated sequences used when no dataset directory is given.
    pub synthetic_sequences: usize,
    pub synthetic_length: usize,
    pub seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            reinit_gap: 5,
            burn_in: 10,
            synthetic_sequences: 4,
            synthetic_length: 100,
            seed: 1000,
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        if self.reinit_gap == 0 {
            return Err(config_err!("eval.reinit_gap must be >= 1"));
        }
        if self.synthetic_sequences == 0 || self.synthetic_length < 2 {
            return Err(config_err!("eval.synthetic_sequences must be >= 1 and synthetic_length >= 2"));
        }
        Ok(())
    }
}

/// A tracker as the protocol sees it: initialized on a ground-truth box,
/// then asked for one box per frame.
pub trait SequenceTracker {
    fn init(&mut self, frame: &Frame, bbox: &BBox, index: usize) -> Result<()>;
    fn update(&mut self, frame: &Frame, index: usize) -> Result<BBox>;
}

/// The Siamese tracker.
pub struct SiamSequenceTracker<'a> {
    pub tracker: &'a Tracker,
    state: Option<TrackState>,
}

impl<'a> SiamSequenceTracker<'a> {
    pub fn new(tracker: &'a Tracker) -> Self {
        SiamSequenceTracker { tracker, state: None }
    }
}

impl SequenceTracker for SiamSequenceTracker<'_> {
    fn init(&mut self, frame: &Frame, bbox: &BBox, _index: usize) -> Result<()> {
        self.state = Some(self.tracker.init(frame, bbox)?);
        Ok(())
    }

    fn update(&mut self, frame: &Frame, _index: usize) -> Result<BBox> {
        let state = self.state.as_mut().ok_or_else(|| contract!("update before init"))?;
        self.tracker.step(frame, state)?;
        Ok(state.bbox())
    }
}

/// Replays a fixed list of outputs; `None` entries raise an error. With the
/// ground truth as script this is the oracle tracker.
pub struct ScriptedTracker(pub Vec<Option<BBox>>);

impl ScriptedTracker {
    pub fn oracle(seq: &SequenceRecord) -> Self {
        ScriptedTracker(seq.boxes.iter().copied().map(Some).collect())
    }
}

impl SequenceTracker for ScriptedTracker {
    fn init(&mut self, _frame: &Frame, _bbox: &BBox, _index: usize) -> Result<()> {
        Ok(())
    }

    fn update(&mut self, _frame: &Frame, index: usize) -> Result<BBox> {
        self.0
            .get(index)
            .copied()
            .flatten()
            .ok_or_else(|| contract!("scripted tracker has no output for frame {index}"))
    }
}

/// Always reports the same box.
pub struct FixedTracker(pub BBox);

impl SequenceTracker for FixedTracker {
    fn init(&mut self, _frame: &Frame, _bbox: &BBox, _index: usize) -> Result<()> {
        Ok(())
    }

    fn update(&mut self, _frame: &Frame, _index: usize) -> Result<BBox> {
        Ok(self.0)
    }
}

/// What happened on one frame of a protocol run.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", content = "iou")]
pub enum FrameOutcome {
    /// (Re)initialization from ground truth.
    Init,
    /// Tracked within a burn-in window; not counted for accuracy.
    BurnIn(f64),
    Tracked(f64),
    Failure,
    /// Waiting for reinitialization after a failure.
    Skipped,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SequenceResult {
    pub sequence: String,
    pub frames: usize,
    pub failures: usize,
    /// Frames that entered the accuracy average.
    pub accuracy_frames: usize,
    pub iou_sum: f64,
    /// Mean overlap over the accuracy frames; absent when there are none.
    pub mean_iou: Option<f64>,
    /// Mean overlap of a run without reinitialization over frames
    /// `1..frames`, counting every frame from the first failure on as 0.
    pub eo_simplified: f64,
    pub fps: f64,
    pub outcomes: Vec<FrameOutcome>,
}

fn check_sequence(seq: &SequenceRecord) -> Result<()> {
    if seq.frames.len() != seq.boxes.len() || seq.frames.len() < 2 {
        return Err(contract!(
            "sequence `{}` needs >= 2 frames with one box each ({} frames, {} boxes)",
            seq.name,
            seq.frames.len(),
            seq.boxes.len()
        ));
    }
    Ok(())
}

/// Runs the reinitialization protocol. A frame whose overlap is 0, or on
/// which the tracker errors, is a failure; the tracker restarts from ground
/// truth `reinit_gap` frames later.
pub fn run_vot_protocol(
    tracker: &mut dyn SequenceTracker,
    seq: &SequenceRecord,
    cfg: &EvalConfig,
) -> Result<(Vec<FrameOutcome>, f64)> {
    check_sequence(seq)?;
    let n = seq.len();
    let mut outcomes = Vec::with_capacity(n);
    let mut next_init = Some(0);
    let mut burn_end = 0;
    let start = Instant::now();
    let mut tracked = 0usize;
    for t in 0..n {
        if next_init == Some(t) {
            match tracker.init(&seq.frames[t], &seq.boxes[t], t) {
                Ok(()) => {
                    outcomes.push(FrameOutcome::Init);
                    next_init = None;
                    burn_end = if t == 0 { 1 } else { t + cfg.burn_in };
                }
                Err(_) => {
                    outcomes.push(FrameOutcome::Failure);
                    next_init = Some(t + cfg.reinit_gap);
                }
            }
            continue;
        }
        if next_init.is_some() {
            outcomes.push(FrameOutcome::Skipped);
            continue;
        }
        tracked += 1;
        let overlap = tracker
            .update(&seq.frames[t], t)
            .map(|b| if b.is_finite() { iou(&b, &seq.boxes[t]) } else { 0.0 })
            .unwrap_or(0.0);
        if overlap <= 0.0 {
            outcomes.push(FrameOutcome::Failure);
            next_init = Some(t + cfg.reinit_gap);
        } else if t < burn_end {
            outcomes.push(FrameOutcome::BurnIn(overlap));
        } else {
            outcomes.push(FrameOutcome::Tracked(overlap));
        }
    }
    let secs = start.elapsed().as_secs_f64();
    let fps = if secs > 0.0 { tracked as f64 / secs } else { 0.0 };
    Ok((outcomes, fps))
}

/// Runs without reinitialization; returns per-frame overlaps for frames
/// `1..n` with zeros from the first failure on.
pub fn run_without_reset(tracker: &mut dyn SequenceTracker, seq: &SequenceRecord) -> Result<Vec<f64>> {
    check_sequence(seq)?;
    let mut out = Vec::with_capacity(seq.len() - 1);
    let mut failed = tracker.init(&seq.frames[0], &seq.boxes[0], 0).is_err();
    for t in 1..seq.len() {
        if failed {
            out.push(0.0);
            continue;
        }
        let overlap = tracker
            .update(&seq.frames[t], t)
            .map(|b| if b.is_finite() { iou(&b, &seq.boxes[t]) } else { 0.0 })
            .unwrap_or(0.0);
        failed = overlap <= 0.0;
        out.push(overlap);
    }
    Ok(out)
}

pub fn summarize(
    name: &str,
    outcomes: Vec<FrameOutcome>,
    no_reset: &[f64],
    fps: f64,
) -> SequenceResult {
    let mut iou_sum = 0.0;
    let mut accuracy_frames = 0;
    let mut failures = 0;
    for o in &outcomes {
        match o {
            FrameOutcome::Tracked(v) => {
                iou_sum += v;
                accuracy_frames += 1;
            }
            FrameOutcome::Failure => failures += 1,
            _ => {}
        }
    }
    let eo_simplified = if no_reset.is_empty() {
        0.0
    } else {
        no_reset.iter().sum::<f64>() / no_reset.len() as f64
    };
    SequenceResult {
        sequence: name.to_string(),
        frames: outcomes.len(),
        failures,
        accuracy_frames,
        iou_sum,
        mean_iou: (accuracy_frames > 0).then(|| iou_sum / accuracy_frames as f64),
        eo_simplified,
        fps,
        outcomes,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    /// Pooled mean overlap over all accuracy frames of all sequences.
    pub accuracy: f64,
    /// Failures per 100 frames.
    pub robustness: f64,
    #[serde(rename = "EO-simplified")]
    pub eo_simplified: f64,
    pub fps: f64,
    pub frames: usize,
    pub failures: usize,
}

pub fn aggregate(records: &[SequenceResult]) -> Result<Aggregate> {
    if records.is_empty() {
        return Err(contract!("cannot aggregate zero sequences"));
    }
    let mut iou_sum = 0.0;
    let (mut acc_frames, mut frames, mut failures) = (0usize, 0usize, 0usize);
    let mut eo = 0.0;
    let mut secs = 0.0;
    let mut tracked = 0.0;
    for r in records {
        iou_sum += r.iou_sum;
        acc_frames += r.accuracy_frames;
        frames += r.frames;
        failures += r.failures;
        eo += r.eo_simplified;
        let t = r
            .outcomes
            .iter()
            .filter(|o| matches!(o, FrameOutcome::Tracked(_) | FrameOutcome::BurnIn(_) | FrameOutcome::Failure))
            .count() as f64;
        if r.fps > 0.0 {
            secs += t / r.fps;
            tracked += t;
        }
    }
    Ok(Aggregate {
        accuracy: if acc_frames > 0 { iou_sum / acc_frames as f64 } else { 0.0 },
        robustness: 100.0 * failures as f64 / frames as f64,
        eo_simplified: eo / records.len() as f64,
        fps: if secs > 0.0 { tracked / secs } else { 0.0 },
        frames,
        failures,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub tracker: String,
    pub protocol: EvalConfig,
    pub sequences: Vec<SequenceResult>,
    pub aggregate: Aggregate,
}

/// Evaluates every sequence with a fresh tracker from `make`, on up to
/// `threads` threads. Results keep the input order.
pub fn evaluate<'t, F>(
    tracker_name: &str,
    seqs: &[SequenceRecord],
    make: F,
    cfg: &EvalConfig,
    threads: usize,
) -> Result<EvalReport>
where
    F: Fn(&SequenceRecord) -> Box<dyn SequenceTracker + 't> + Sync,
{
    let one = |seq: &SequenceRecord| -> Result<SequenceResult> {
        let (outcomes, fps) = run_vot_protocol(make(seq).as_mut(), seq, cfg)?;
        let no_reset = run_without_reset(make(seq).as_mut(), seq)?;
        Ok(summarize(&seq.name, outcomes, &no_reset, fps))
    };
    let sequences = if threads > 1 {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .map_err(|e| config_err!("thread pool: {e}"))?;
        pool.install(|| seqs.par_iter().map(one).collect::<Result<Vec<_>>>())?
    } else {
        seqs.iter().map(one).collect::<Result<Vec<_>>>()?
    };
    let aggregate = aggregate(&sequences)?;
    Ok(EvalReport {
        tracker: tracker_name.to_string(),
        protocol: cfg.clone(),
        sequences,
        aggregate,
    })
}

/// Writes `report.json` and `report.csv` into `dir`.
pub fn write_report(report: &EvalReport, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let json_path = dir.join("report.json");
    let json = serde_json::to_string_pretty(report)?;
    std::fs::write(&json_path, json).map_err(|e| Error::io(&json_path, e))?;
    let csv_path = dir.join("report.csv");
    let mut w = csv::Writer::from_writer(Vec::new());
    let csv_err = |e: csv::Error| Error::io(&csv_path, std::io::Error::other(e));
    w.write_record(["sequence", "frames", "meanIoU", "failures", "fps"]).map_err(csv_err)?;
    for r in &report.sequences {
        w.write_record([
            r.sequence.clone(),
            r.frames.to_string(),
            r.mean_iou.map_or(String::new(), |v| v.to_string()),
            r.failures.to_string(),
            r.fps.to_string(),
        ])
        .map_err(csv_err)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::io(&csv_path, std::io::Error::other(e.to_string())))?;
    std::fs::File::create(&csv_path)
        .and_then(|mut f| f.write_all(&bytes))
        .map_err(|e| Error::io(&csv_path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use image::RgbImage;

    pub(crate) fn fixture(n: usize) -> SequenceRecord {
        SequenceRecord {
            name: "fixture".into(),
            frames: vec![RgbImage::new(4, 4); n],
            boxes: (0..n).map(|t| BBox::new(t as f64, 0.0, 10.0, 10.0)).collect(),
        }
    }

    fn evaluate_one(tracker: &mut dyn SequenceTracker, seq: &SequenceRecord) -> SequenceResult {
        let cfg = EvalConfig::default();
        let (o, fps) = run_vot_protocol(tracker, seq, &cfg).unwrap();
        summarize(&seq.name, o, &[], fps)
    }

    #[test]
    fn oracle_is_perfect() {
        let seq = fixture(30);
        let r = evaluate_one(&mut ScriptedTracker::oracle(&seq), &seq);
        assert_eq!(r.failures, 0);
        assert_eq!(r.mean_iou, Some(1.0));
        assert_eq!(r.accuracy_frames, 29);
        let a = aggregate(&[r]).unwrap();
        assert_eq!((a.accuracy, a.robustness), (1.0, 0.0));
    }

    #[test]
    fn far_away_box_fails_every_window() {
        let seq = fixture(30);
        let r = evaluate_one(&mut FixedTracker(BBox::new(500.0, 500.0, 5.0, 5.0)), &seq);
        // failures at 1, 7, 13, 19, 25 with reinit 6, 12, 18, 24
        assert_eq!(r.failures, 5);
        assert_eq!(r.mean_iou, None);
    }

    #[test]
    fn hand_traced_twelve_frames() {
        let seq = fixture(12);
        let mut script: Vec<Option<BBox>> = seq.boxes.iter().copied().map(Some).collect();
        // frame 1 half overlap, frame 2 perfect, frame 3 lost
        script[1] = Some(BBox::new(1.0 + 10.0 / 3.0, 0.0, 10.0, 10.0));
        script[3] = Some(BBox::new(100.0, 0.0, 10.0, 10.0));
        let r = evaluate_one(&mut ScriptedTracker(script), &seq);
        use FrameOutcome::*;
        let want_prefix = [Init, Tracked(0.5), Tracked(1.0), Failure, Skipped, Skipped, Skipped, Skipped, Init];
        assert!((match r.outcomes[1] {
            Tracked(v) => v,
            _ => panic!(),
        } - 0.5)
            .abs()
            < 1e-12);
        assert_eq!(r.outcomes.len(), 12);
        for (i, w) in want_prefix.iter().enumerate().skip(2) {
            assert_eq!(&r.outcomes[i], w, "frame {i}");
        }
        // reinit at 8; 9..11 inside the burn-in window
        assert!(r.outcomes[9..].iter().all(|o| matches!(o, BurnIn(_))));
        assert_eq!(r.failures, 1);
        assert_eq!(r.accuracy_frames, 2);
        assert!((r.mean_iou.unwrap() - 0.75).abs() < 1e-12);
    }

    #[test]
    fn tracker_errors_count_as_failures() {
        let seq = fixture(10);
        let mut script: Vec<Option<BBox>> = seq.boxes.iter().copied().map(Some).collect();
        script[2] = None;
        let r = evaluate_one(&mut ScriptedTracker(script), &seq);
        assert_eq!(r.failures, 1);
        assert_eq!(r.outcomes[7], FrameOutcome::Init);
    }

    #[test]
    fn aggregate_arithmetic() {
        let mk = |iou_sum: f64, acc: usize, frames: usize, failures: usize| SequenceResult {
            sequence: "s".into(),
            frames,
            failures,
            accuracy_frames: acc,
            iou_sum,
            mean_iou: None,
            eo_simplified: 0.5,
            fps: 0.0,
            outcomes: vec![],
        };
        let a = aggregate(&[mk(10.0, 10, 20, 0), mk(5.0, 10, 20, 0)]).unwrap();
        assert_eq!(a.accuracy, 0.75);
        let a = aggregate(&[mk(0.0, 0, 150, 3)]).unwrap();
        assert_eq!(a.robustness, 2.0);
        assert!(aggregate(&[]).is_err());
    }

    #[test]
    fn no_reset_run_zeros_after_failure() {
        let seq = fixture(6);
        let mut script: Vec<Option<BBox>> = seq.boxes.iter().copied().map(Some).collect();
        script[2] = Some(BBox::new(100.0, 0.0, 1.0, 1.0));
        let o = run_without_reset(&mut ScriptedTracker(script), &seq).unwrap();
        assert_eq!(o, vec![1.0, 0.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn report_files() {
        let seq = fixture(8);
        let seqs = vec![seq.clone(), SequenceRecord { name: "b".into(), ..seq }];
        let report = evaluate(
            "oracle",
            &seqs,
            |s| Box::new(ScriptedTracker::oracle(s)),
            &EvalConfig::default(),
            2,
        )
        .unwrap();
        assert_eq!(report.aggregate.accuracy, 1.0);
        let dir = tempfile::tempdir().unwrap();
        write_report(&report, dir.path()).unwrap();
        let csv = std::fs::read_to_string(dir.path().join("report.csv")).unwrap();
        assert_eq!(csv.lines().count(), 3);
        assert!(csv.starts_with("sequence,frames,meanIoU,failures,fps"));
        let json: serde_json::Value =
            serde_json::from_slice(&std::fs::read(dir.path().join("report.json")).unwrap()).unwrap();
        assert!(json["aggregate"]["EO-simplified"].is_number());
    }
}
