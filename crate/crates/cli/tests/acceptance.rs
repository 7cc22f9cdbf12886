//! One pass/fail line per acceptance criterion. Lines go straight to the
//! process stdout so they show without `--nocapture`.

use std::io::Write;
use std::path::Path;
use std::process::Command;
use std::time::Instant;

use denssiam_core::config::AppConfig;
use denssiam_core::conformance::{attention_invariants, metric_oracle, stride_equivariance, full_width_shapes};
use denssiam_core::eval::{run_vot_protocol, EvalConfig, FrameOutcome, SiamSequenceTracker};
use denssiam_core::geometry::{iou, BBox};
use denssiam_core::head::GAIN;
use denssiam_core::layers::ForwardCtx;
use denssiam_core::model::SiamModel;
use denssiam_core::synth::{gen_synthetic_sequence, SynthSpec};
use denssiam_core::tracking::Tracker;
use denssiam_core::training::{
    make_batch, train_epoch, FixedPairs, PairSource, SampledPairs, SgdState, TrainConfig, TrainingData,
};
use denssiam_core::verify::{check_all, GradOp, Precision};

struct Report {
    results: Vec<(String, bool)>,
}

impl Report {
    fn record(&mut self, name: &str, passed: bool, detail: String) {
        let tag = if passed { "PASS" } else { "FAIL" };
        let mut out = std::io::stdout().lock();
        if self.results.is_empty() {
            writeln!(out).unwrap();
        }
        writeln!(out, "[{tag}] {name}: {detail}").unwrap();
        out.flush().unwrap();
        self.results.push((name.to_string(), passed));
    }
}

fn bin(args: &[&str], cwd: &Path) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_denssiam"))
        .args(args)
        .current_dir(cwd)
        .output()
        .expect("binary runs")
}

fn shapes(r: &mut Report) {
    let start = Instant::now();
    let rows = full_width_shapes(0).unwrap();
    let lib_secs = start.elapsed().as_secs_f64();
    let dir = tempfile::tempdir().unwrap();
    let start = Instant::now();
    let cli_ok = bin(&["verify", "shapes"], dir.path()).status.success();
    let cli_secs = start.elapsed().as_secs_f64();
    let bad: Vec<_> = rows.iter().filter(|r| !r.passed()).map(|r| r.stage.clone()).collect();
    r.record(
        "shape fidelity",
        rows.len() == 8 && bad.is_empty() && cli_ok && lib_secs.max(cli_secs) < 60.0,
        format!(
            "8 stages exact {}, `verify shapes` exit ok {cli_ok}, {:.1}s",
            bad.is_empty(),
            lib_secs.max(cli_secs)
        ),
    );
}

fn gradients(r: &mut Report) {
    let seeds = [0, 1, 2, 3, 4];
    let reports = check_all(&seeds).unwrap();
    let worst = |p: Precision| {
        reports
            .iter()
            .filter(|x| x.precision == p)
            .map(|x| x.max_rel_err)
            .fold(0.0, f64::max)
    };
    let (w64, w32) = (worst(Precision::F64), worst(Precision::F32));
    let per_op = GradOp::ALL
        .iter()
        .all(|op| reports.iter().filter(|x| x.op == *op && x.precision == Precision::F64).count() >= 5);
    let all = reports.iter().all(|x| x.passed());
    r.record(
        "gradient fidelity",
        all && per_op && w64 < 1e-5 && w32 < 1e-3,
        format!(
            "{} ops x {} seeds, worst rel err f64 {w64:.2e} (< 1e-5), f32 {w32:.2e} (< 1e-3)",
            GradOp::ALL.len(),
            seeds.len()
        ),
    );
}

fn loss_calibration(r: &mut Report) {
    let cfg = AppConfig::default();
    let model = SiamModel::new(cfg.model.clone()).unwrap();
    let params = model.init_params::<f32>(cfg.training.seed).unwrap();
    let gain = params.get(GAIN).unwrap().data()[0];
    let data = TrainingData::from_config(&cfg.training, &cfg.synth).unwrap();
    let source = SampledPairs {
        data: &data,
        config: &cfg.training,
    };
    let pairs: Vec<_> = (0..cfg.training.batch_size as u64).map(|i| source.pair(i).unwrap()).collect();
    let batch = make_batch(&pairs, model.score_size().unwrap(), cfg.training.r_pos).unwrap();
    let step = model
        .loss_and_grads(
            &batch.exemplars,
            &batch.searches,
            &batch.labels,
            cfg.training.balanced,
            &params,
            &mut ForwardCtx::train(0),
        )
        .unwrap();
    let dev = step.loss - std::f64::consts::LN_2;
    r.record(
        "loss calibration",
        gain == 1e-3 && dev.abs() <= 0.05,
        format!("gain {gain}, first-batch loss {:.4} = ln 2 {dev:+.4} (tol 0.05)", step.loss),
    );
}

fn overfit(r: &mut Report) {
    let start = Instant::now();
    let app = AppConfig::quick();
    let model = SiamModel::new(app.model.clone()).unwrap();
    let cfg = TrainConfig {
        epochs: 5,
        pairs_per_epoch: 800,
        ..app.training.clone()
    };
    let data = TrainingData::synthetic(&app.synth, 16, 100, 7).unwrap();
    let sampled = SampledPairs {
        data: &data,
        config: &cfg,
    };
    let fixture = FixedPairs((0..50).map(|i| sampled.pair(i).unwrap()).collect());
    let mut params = model.init_params::<f32>(cfg.seed).unwrap();
    let mut state = SgdState::new(&params).unwrap();
    let mut losses = Vec::new();
    for _ in 0..cfg.epochs {
        train_epoch(&model, &cfg, &mut params, &mut state, &fixture, &mut |s| {
            losses.push(s.loss);
            Ok(())
        })
        .unwrap();
    }
    let secs = start.elapsed().as_secs_f64();
    // the last full pass over the 50 pairs
    let pass = 50usize.div_ceil(cfg.batch_size);
    let tail = &losses[losses.len() - pass..];
    let mean = tail.iter().sum::<f64>() / tail.len() as f64;
    let best = losses.iter().copied().fold(f64::INFINITY, f64::min);
    r.record(
        "overfit convergence",
        losses.len() == 500 && mean < 0.1 && best < 0.15 * losses[0] && secs < 600.0,
        format!(
            "{} steps, final-pass mean loss {mean:.4} (< 0.1), best {best:.4} vs initial {:.4}, {secs:.0}s (< 600s)",
            losses.len(),
            losses[0]
        ),
    );
}

fn attention(r: &mut Report) {
    let checks = attention_invariants(100, 0).unwrap();
    let detail = checks.iter().map(|c| c.detail.clone()).collect::<Vec<_>>().join("; ");
    r.record("attention invariants", checks.iter().all(|c| c.passed), detail);
}

fn equivariance(r: &mut Report) {
    let c = stride_equivariance(20, 0).unwrap();
    r.record("stride equivariance", c.passed, c.detail);
}

fn closed_loop(r: &mut Report) {
    let start = Instant::now();
    let app = AppConfig::quick();
    let model = SiamModel::new(app.model.clone()).unwrap();
    let data = TrainingData::from_config(&app.training, &app.synth).unwrap();
    let source = SampledPairs {
        data: &data,
        config: &app.training,
    };
    let mut params = model.init_params::<f32>(app.training.seed).unwrap();
    let mut state = SgdState::new(&params).unwrap();
    let mut last = 0.0;
    for _ in 0..app.training.epochs {
        last = train_epoch(&model, &app.training, &mut params, &mut state, &source, &mut |_| Ok(()))
            .unwrap()
            .mean_loss;
    }
    let trained = start.elapsed().as_secs_f64();
    let tracker = Tracker::new(model, params, app.tracking.clone()).unwrap();
    let held_out = gen_synthetic_sequence(&SynthSpec {
        seed: 9000,
        ..app.synth.clone()
    })
    .unwrap();
    let (outcomes, _) = run_vot_protocol(&mut SiamSequenceTracker::new(&tracker), &held_out, &EvalConfig::default()).unwrap();
    let secs = start.elapsed().as_secs_f64();
    let failures = outcomes.iter().filter(|o| matches!(o, FrameOutcome::Failure)).count();
    let ious: Vec<f64> = outcomes
        .iter()
        .filter_map(|o| match o {
            FrameOutcome::Tracked(v) | FrameOutcome::BurnIn(v) => Some(*v),
            _ => None,
        })
        .collect();
    let mean = ious.iter().sum::<f64>() / ious.len().max(1) as f64;
    r.record(
        "closed loop",
        held_out.len() == 100 && mean >= 0.5 && failures == 0 && secs < 300.0,
        format!(
            "{} steps (last epoch loss {last:.3}) in {trained:.0}s, held-out mean IoU {mean:.3} (>= 0.5), {failures} failures, {secs:.0}s total (< 300s)",
            state.step
        ),
    );

    let clean = gen_synthetic_sequence(&SynthSpec {
        seed: 9001,
        noise: 0.0,
        ..app.synth.clone()
    })
    .unwrap();
    let boxes = tracker.track(&clean.frames, &clean.boxes[0]).unwrap();
    let min = boxes
        .iter()
        .zip(&clean.boxes)
        .map(|(a, b): (&BBox, &BBox)| iou(a, b))
        .fold(1.0, f64::min);
    r.record(
        "closed loop, zero noise",
        min >= 0.5,
        format!("minimum per-frame IoU {min:.3} over {} frames (>= 0.5)", boxes.len()),
    );
}

fn determinism(r: &mut Report) {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let tiny = [
        "--seed",
        "3",
        "--override",
        "training.epochs=2",
        "--override",
        "training.pairs_per_epoch=16",
        "--override",
        "training.synthetic_sequences=3",
        "--override",
        "training.synthetic_length=12",
    ];
    for out in ["a", "b"] {
        let mut args = vec!["train", "--out", out];
        args.extend(tiny);
        assert!(bin(&args, d).status.success());
    }
    let files = ["checkpoint.dsmc", "checkpoint_epoch_000.dsmc", "checkpoint_epoch_001.dsmc"];
    let same_ckpt = files
        .iter()
        .all(|f| std::fs::read(d.join("a").join(f)).unwrap() == std::fs::read(d.join("b").join(f)).unwrap());
    assert!(bin(&["synth", "--out", "seq", "--seed", "4", "--override", "synth.length=12"], d)
        .status
        .success());
    for out in ["t1.txt", "t2.txt"] {
        assert!(bin(&["track", "seq", "--checkpoint", "a/checkpoint.dsmc", "--out", out], d)
            .status
            .success());
    }
    let t1 = std::fs::read(d.join("t1.txt")).unwrap();
    let same_track = !t1.is_empty() && t1 == std::fs::read(d.join("t2.txt")).unwrap();
    r.record(
        "determinism",
        same_ckpt && same_track,
        format!("train checkpoints byte-identical {same_ckpt}, track box files identical {same_track}"),
    );

    // eval on on-disk sequences with the trained checkpoint
    for (i, seed) in [11u64, 12].iter().enumerate() {
        let spec = format!("synth.seed={seed}");
        let out = format!("data/seq{i}");
        assert!(bin(&["synth", "--out", &out, "--override", &spec, "--override", "synth.length=10"], d)
            .status
            .success());
    }
    let ok = bin(
        &["eval", "--checkpoint", "a/checkpoint.dsmc", "--dataset", "data", "--out", "ev"],
        d,
    )
    .status
    .success();
    let report: serde_json::Value = std::fs::read_to_string(d.join("ev/report.json"))
        .ok()
        .and_then(|t| serde_json::from_str(&t).ok())
        .unwrap_or_default();
    let (a, rb) = (&report["aggregate"]["accuracy"], &report["aggregate"]["robustness"]);
    r.record(
        "fidelity hook (eval on VOT-format sequences)",
        ok && a.is_number() && rb.is_number(),
        format!("A = {a}, R = {rb} over {} sequences (no target)", report["sequences"].as_array().map_or(0, |s| s.len())),
    );
}

fn metrics(r: &mut Report) {
    let c = metric_oracle(50, 0).unwrap();
    let a = BBox::new(0.0, 0.0, 2.0, 2.0);
    let hand = [
        (iou(&a, &a), 1.0),
        (iou(&a, &BBox::new(3.0, 3.0, 2.0, 2.0)), 0.0),
        (iou(&a, &BBox::new(1.0, 0.0, 2.0, 2.0)), 1.0 / 3.0),
    ];
    let hand_ok = hand.iter().all(|(got, want)| (got - want).abs() <= 1e-12);
    r.record(
        "metric oracle",
        c.passed && hand_ok,
        format!("{}; iou hand cases 1, 0, 1/3 within 1e-12: {hand_ok}", c.detail),
    );
}

#[test]
fn acceptance() {
    let mut r = Report { results: Vec::new() };
    shapes(&mut r);
    gradients(&mut r);
    loss_calibration(&mut r);
    attention(&mut r);
    equivariance(&mut r);
    metrics(&mut r);
    determinism(&mut r);
    closed_loop(&mut r);
    overfit(&mut r);
    let failed: Vec<_> = r.results.iter().filter(|(_, ok)| !ok).map(|(n, _)| n.as_str()).collect();
    writeln!(
        std::io::stdout().lock(),
        "acceptance: {} of {} criteria passed",
        r.results.len() - failed.len(),
        r.results.len()
    )
    .unwrap();
    assert!(failed.is_empty(), "failed: {failed:?}");
}
