use std::path::Path;
use std::process::{Command, Output};

fn denssiam(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_denssiam"))
        .args(args)
        .current_dir(cwd)
        .output()
        .expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

const TINY: [&str; 8] = [
    "--override",
    "training.epochs=1",
    "--override",
    "training.pairs_per_epoch=16",
    "--override",
    "training.synthetic_sequences=2",
    "--override",
    "training.synthetic_length=10",
];

#[test]
fn synth_writes_frames_and_groundtruth() {
    let dir = tempfile::tempdir().unwrap();
    let out = denssiam(&["synth", "--out", "seq", "--seed", "5"], dir.path());
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let pngs = std::fs::read_dir(dir.path().join("seq"))
        .unwrap()
        .filter(|e| e.as_ref().unwrap().path().extension().is_some_and(|x| x == "png"))
        .count();
    assert_eq!(pngs, 100);
    let gt = std::fs::read_to_string(dir.path().join("seq/groundtruth.txt")).unwrap();
    assert_eq!(gt.lines().count(), 100);
    denssiam(&["synth", "--out", "again", "--seed", "5"], dir.path());
    for name in ["00000001.png", "00000050.png", "groundtruth.txt"] {
        assert_eq!(
            std::fs::read(dir.path().join("seq").join(name)).unwrap(),
            std::fs::read(dir.path().join("again").join(name)).unwrap()
        );
    }
}

#[test]
fn train_then_track() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let mut args = vec!["train", "--out", "run"];
    args.extend(TINY);
    let out = denssiam(&args, d);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let echo: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(d.join("run/config.json")).unwrap()).unwrap();
    assert_eq!(echo["training"]["epochs"], 1);
    let metrics = std::fs::read_to_string(d.join("run/metrics.jsonl")).unwrap();
    assert_eq!(metrics.lines().count(), 2);
    for line in metrics.lines() {
        let v: serde_json::Value = serde_json::from_str(line).unwrap();
        for key in ["epoch", "step", "loss", "lr", "wall_ms"] {
            assert!(v.get(key).is_some(), "{line}");
        }
    }
    assert!(d.join("run/checkpoint_epoch_000.dsmc").exists());

    denssiam(&["synth", "--out", "seq", "--override", "synth.length=6"], d);
    let out = denssiam(&["track", "seq", "--checkpoint", "run/checkpoint.dsmc", "--out", "boxes.txt"], d);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let boxes = std::fs::read_to_string(d.join("boxes.txt")).unwrap();
    let gt = std::fs::read_to_string(d.join("seq/groundtruth.txt")).unwrap();
    assert_eq!(boxes.lines().count(), 6);
    assert_eq!(boxes.lines().next(), gt.lines().next());
}

#[test]
fn oracle_eval_report() {
    let dir = tempfile::tempdir().unwrap();
    let out = denssiam(
        &[
            "eval",
            "--tracker",
            "oracle",
            "--out",
            "ev",
            "--override",
            "eval.synthetic_sequences=3",
            "--override",
            "eval.synthetic_length=20",
        ],
        dir.path(),
    );
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("ev/report.json")).unwrap()).unwrap();
    assert_eq!(report["aggregate"]["accuracy"], 1.0);
    assert_eq!(report["aggregate"]["robustness"], 0.0);
    for key in ["tracker", "protocol", "sequences", "aggregate"] {
        assert!(report.get(key).is_some());
    }
    for key in ["accuracy", "robustness", "EO-simplified", "fps", "frames", "failures"] {
        assert!(report["aggregate"].get(key).is_some(), "{key}");
    }
    let csv = std::fs::read_to_string(dir.path().join("ev/report.csv")).unwrap();
    assert_eq!(csv.lines().count(), 4);
    assert!(csv.starts_with("sequence,frames,meanIoU,failures,fps"));
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    assert_eq!(code(&denssiam(&["verify", "shapes"], d)), 0);
    assert_eq!(code(&denssiam(&["train", "--out", "x", "--override", "training.nope=1"], d)), 2);
    assert_eq!(code(&denssiam(&["train", "--out", "x", "--override", "training.lr_end=1"], d)), 2);
    assert_eq!(
        code(&denssiam(&["track", "nowhere", "--checkpoint", "missing.dsmc", "--out", "b.txt"], d)),
        2
    );
    assert_eq!(code(&denssiam(&["eval", "--out", "e"], d)), 2);
    assert_eq!(code(&denssiam(&["bogus"], d)), 2);
    std::fs::write(d.join("bad.json"), "{\"training\": {\"epochz\": 3}}").unwrap();
    let out = denssiam(&["train", "--config", "bad.json", "--out", "x"], d);
    assert_eq!(code(&out), 2);
    assert!(String::from_utf8_lossy(&out.stderr).contains("epochz"));
    std::fs::write(d.join("junk.dsmc"), b"not a checkpoint").unwrap();
    assert_eq!(code(&denssiam(&["track", ".", "--checkpoint", "junk.dsmc", "--out", "b.txt"], d)), 2);
}

#[test]
fn shipped_configs_load() {
    let root = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    let dir = tempfile::tempdir().unwrap();
    for name in ["desk.json", "quick.json", "full.json"] {
        let path = root.join(name);
        let out = denssiam(
            &["synth", "--config", path.to_str().unwrap(), "--out", "s", "--override", "synth.length=2"],
            dir.path(),
        );
        assert_eq!(code(&out), 0, "{name}: {}", String::from_utf8_lossy(&out.stderr));
    }
}
