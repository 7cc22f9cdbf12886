use std::io::{BufWriter, Write};
use std::path::Path;
use std::time::Instant;

use denssiam_core::checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
use denssiam_core::config::AppConfig;
use denssiam_core::conformance::{property_suite, full_width_shapes};
use denssiam_core::error::Error;
use denssiam_core::eval::{evaluate, write_report, EvalReport, ScriptedTracker, SiamSequenceTracker};
use denssiam_core::model::SiamModel;
use denssiam_core::sequence::{list_sequences, load_sequence, save_sequence, write_boxes, SequenceRecord};
use denssiam_core::synth::{gen_synthetic_sequence, SynthSpec};
use denssiam_core::tracking::Tracker;
use denssiam_core::training::{train_epoch, SampledPairs, SgdState, TrainingData};
use denssiam_core::verify::{check_all, Precision};

use crate::{Cli, CliError, CliResult, Suite, TrackerKind};

const GRAD_SEEDS: u64 = 5;

/// `--config` if given, else `base`, else the built-in defaults; then the
/// explicit flags and `--override`s.
fn resolve(cli: &Cli, base: Option<AppConfig>) -> CliResult<AppConfig> {
    let cfg = match &cli.config {
        Some(path) => AppConfig::load(path)?,
        None => base.unwrap_or_default(),
    };
    let mut overrides = cli.overrides.clone();
    if let Some(seed) = cli.seed {
        for key in ["training.seed", "synth.seed", "eval.seed"] {
            overrides.push(format!("{key}={seed}"));
        }
    }
    if let Some(threads) = cli.threads {
        overrides.push(format!("threads={threads}"));
    }
    Ok(cfg.with_overrides(&overrides)?)
}

fn checkpoint_config(ck: &Checkpoint, path: &Path) -> CliResult<AppConfig> {
    let text = serde_json::to_string(&ck.config).map_err(Error::from)?;
    Ok(AppConfig::from_json(&text, &path.display().to_string())?)
}

fn create_dir(dir: &Path) -> CliResult<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e).into())
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> CliResult<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(Error::from)?;
    text.push('\n');
    std::fs::write(path, text).map_err(|e| Error::io(path, e).into())
}

pub fn train(cli: &Cli, out: &Path) -> CliResult<()> {
    let resumed = cli.checkpoint.as_deref().map(|p| load_checkpoint(p).map(|ck| (p, ck))).transpose()?;
    let base = match &resumed {
        Some((p, ck)) => Some(checkpoint_config(ck, p)?),
        None => None,
    };
    let cfg = resolve(cli, base)?;
    let model = SiamModel::new(cfg.model.clone())?;
    let (mut params, mut state) = match resumed {
        Some((_, ck)) => {
            model.check_params(&ck.params)?;
            (ck.params, ck.state)
        }
        None => {
            let params = model.init_params::<f32>(cfg.training.seed)?;
            let state = SgdState::new(&params)?;
            (params, state)
        }
    };
    create_dir(out)?;
    write_json(&out.join("config.json"), &cfg)?;
    let data = TrainingData::from_config(&cfg.training, &cfg.synth)?;
    let source = SampledPairs {
        data: &data,
        config: &cfg.training,
    };
    let metrics_path = out.join("metrics.jsonl");
    let metrics_file = std::fs::OpenOptions::new()
        .create(true)
        .append(state.step > 0)
        .write(true)
        .truncate(state.step == 0)
        .open(&metrics_path)
        .map_err(|e| Error::io(&metrics_path, e))?;
    let mut metrics = BufWriter::new(metrics_file);
    let echo = cfg.to_value();
    println!(
        "training {} epochs x {} steps of {} pairs on {} sequences",
        cfg.training.epochs,
        cfg.training.steps_per_epoch(),
        cfg.training.batch_size,
        data.num_sequences()
    );
    for _ in state.epoch..cfg.training.epochs {
        let m = train_epoch(&model, &cfg.training, &mut params, &mut state, &source, &mut |s| {
            let line = serde_json::to_string(s)?;
            writeln!(metrics, "{line}").map_err(|e| Error::io(&metrics_path, e))
        })?;
        metrics.flush().map_err(|e| Error::io(&metrics_path, e))?;
        println!(
            "epoch {:>3}  lr {:.3e}  loss {:.4} (first {:.4}, last {:.4})  {:.1}s",
            m.epoch,
            m.lr,
            m.mean_loss,
            m.first_loss,
            m.last_loss,
            m.wall_ms / 1e3
        );
        let path = out.join(format!("checkpoint_epoch_{:03}.dsmc", m.epoch));
        save_checkpoint(&path, &params, &state, &echo)?;
    }
    save_checkpoint(&out.join("checkpoint.dsmc"), &params, &state, &echo)?;
    Ok(())
}

fn load_tracker(cli: &Cli, checkpoint: &Path) -> CliResult<(AppConfig, Tracker)> {
    let ck = load_checkpoint(checkpoint)?;
    let cfg = resolve(cli, Some(checkpoint_config(&ck, checkpoint)?))?;
    let model = SiamModel::new(cfg.model.clone())?;
    let tracker = Tracker::new(model, ck.params, cfg.tracking.clone())?;
    Ok((cfg, tracker))
}

pub fn track(cli: &Cli, checkpoint: &Path, sequence: &Path, out: &Path) -> CliResult<()> {
    let (_, tracker) = load_tracker(cli, checkpoint)?;
    let seq = load_sequence(sequence)?;
    let start = Instant::now();
    let boxes = tracker.track(&seq.frames, &seq.boxes[0])?;
    let secs = start.elapsed().as_secs_f64();
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        create_dir(dir)?;
    }
    write_boxes(out, &boxes)?;
    let fps = if secs > 0.0 { (boxes.len() - 1) as f64 / secs } else { 0.0 };
    println!("{}: {} frames, {fps:.1} fps", seq.name, boxes.len());
    Ok(())
}

fn synthetic_set(cfg: &AppConfig) -> CliResult<Vec<SequenceRecord>> {
    (0..cfg.eval.synthetic_sequences as u64)
        .map(|i| {
            let spec = SynthSpec {
                length: cfg.eval.synthetic_length,
                ..cfg.synth.randomized(cfg.eval.seed.wrapping_add(i))
            };
            Ok(gen_synthetic_sequence(&spec)?)
        })
        .collect()
}

fn print_report(report: &EvalReport) {
    println!("{:<24} {:>7} {:>8} {:>9} {:>8}", "sequence", "frames", "meanIoU", "failures", "fps");
    for r in &report.sequences {
        let iou = r.mean_iou.map_or("-".to_string(), |v| format!("{v:.3}"));
        println!("{:<24} {:>7} {:>8} {:>9} {:>8.1}", r.sequence, r.frames, iou, r.failures, r.fps);
    }
    let a = &report.aggregate;
    println!(
        "{}: accuracy {:.3}  robustness {:.3} failures/100 frames  EO-simplified {:.3}  {:.1} fps",
        report.tracker, a.accuracy, a.robustness, a.eo_simplified, a.fps
    );
}

pub fn eval(cli: &Cli, kind: TrackerKind, dataset: Option<&Path>, out: &Path) -> CliResult<()> {
    let loaded = match (kind, &cli.checkpoint) {
        (TrackerKind::Siam, Some(path)) => Some(load_tracker(cli, path)?),
        (TrackerKind::Siam, None) => return Err(CliError::Usage("`eval --tracker siam` needs --checkpoint".into())),
        (TrackerKind::Oracle, _) => None,
    };
    let cfg = match &loaded {
        Some((cfg, _)) => cfg.clone(),
        None => resolve(cli, None)?,
    };
    let seqs = match dataset {
        Some(root) => {
            let dirs = list_sequences(root)?;
            if dirs.is_empty() {
                return Err(CliError::Usage(format!("no sequences under {}", root.display())));
            }
            dirs.iter().map(|d| load_sequence(d)).collect::<Result<Vec<_>, _>>()?
        }
        None => synthetic_set(&cfg)?,
    };
    let report = match &loaded {
        Some((_, tracker)) => evaluate(
            "denssiam",
            &seqs,
            |_| Box::new(SiamSequenceTracker::new(tracker)),
            &cfg.eval,
            cfg.threads,
        )?,
        None => evaluate(
            "oracle",
            &seqs,
            |s| Box::new(ScriptedTracker::oracle(s)),
            &cfg.eval,
            cfg.threads,
        )?,
    };
    create_dir(out)?;
    write_json(&out.join("config.json"), &cfg)?;
    write_report(&report, out)?;
    print_report(&report);
    Ok(())
}

fn verdict(ok: bool) -> &'static str {
    if ok {
        "ok"
    } else {
        "FAIL"
    }
}

pub fn verify(cli: &Cli, suite: Suite) -> CliResult<()> {
    let seed = cli.seed.unwrap_or(0);
    let start = Instant::now();
    let failed = match suite {
        Suite::Shapes => {
            let rows = full_width_shapes(seed)?;
            println!("{:<16} {:<20} {:<20}", "stage", "shape", "expected");
            for r in &rows {
                println!(
                    "{:<16} {:<20} {:<20} {}",
                    r.stage,
                    format!("{:?}", r.got),
                    format!("{:?}", r.expected),
                    verdict(r.passed())
                );
            }
            rows.iter().filter(|r| !r.passed()).count()
        }
        Suite::Grads => {
            let seeds: Vec<u64> = (0..GRAD_SEEDS).map(|i| seed.wrapping_add(i)).collect();
            let reports = check_all(&seeds)?;
            println!("{:<12} {:<4} {:>6} {:>12} {:>10}", "op", "prec", "seed", "max rel err", "tolerance");
            for r in &reports {
                let prec = match r.precision {
                    Precision::F64 => "f64",
                    Precision::F32 => "f32",
                };
                println!(
                    "{:<12} {:<4} {:>6} {:>12.3e} {:>10.0e} {}",
                    r.op.name(),
                    prec,
                    r.seed,
                    r.max_rel_err,
                    r.precision.tolerance(),
                    verdict(r.passed())
                );
                if !r.passed() {
                    println!("    worst: {}", r.worst);
                }
            }
            reports.iter().filter(|r| !r.passed()).count()
        }
        Suite::Props => {
            let checks = property_suite(seed)?;
            for c in &checks {
                println!("{:<34} {:<4} {}", c.name, verdict(c.passed), c.detail);
            }
            checks.iter().filter(|c| !c.passed).count()
        }
    };
    println!("{:.1}s", start.elapsed().as_secs_f64());
    if failed > 0 {
        return Err(CliError::Failed(format!("{failed} check(s) failed")));
    }
    Ok(())
}

pub fn synth(cli: &Cli, out: &Path) -> CliResult<()> {
    let cfg = resolve(cli, None)?;
    let seq = gen_synthetic_sequence(&cfg.synth)?;
    save_sequence(&seq, out)?;
    write_json(&out.join("config.json"), &cfg)?;
    println!("{}: {} frames written to {}", seq.name, seq.len(), out.display());
    Ok(())
}
