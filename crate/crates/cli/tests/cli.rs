use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::sync::OnceLock;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_incalign"))
}

fn ok(out: Output) -> String {
    assert!(out.status.success(), "command failed: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

/// Synthetic data and a small trained model shared by the tests.
struct Fixture {
    _dir: tempfile::TempDir,
    root: PathBuf,
}

impl Fixture {
    fn data(&self) -> PathBuf {
        self.root.join("data")
    }
    fn model(&self) -> PathBuf {
        self.root.join("model.bin")
    }
    fn config(&self) -> PathBuf {
        self.root.join("run.cfg")
    }
}

fn fixture() -> &'static Fixture {
    static F: OnceLock<Fixture> = OnceLock::new();
    F.get_or_init(|| {
        let dir = tempfile::tempdir().unwrap();
        let root = dir.path().to_path_buf();
        let cfg = root.join("run.cfg");
        fs::write(&cfg, "# small run\ninterocular_left = 0\ninterocular_right = 3\nsynth_training_images = 80\nsynth_frames = 12\nsynth_drift_rate = 0.02\nn_buf = 4\n").unwrap();
        ok(bin().args(["synth", "--config"]).arg(&cfg).arg("--out").arg(root.join("data")).output().unwrap());
        let data = root.join("data");
        ok(bin()
            .arg("train")
            .arg("--images")
            .arg(data.join("train/images"))
            .arg("--annotations")
            .arg(data.join("train/annotations"))
            .arg("--config")
            .arg(&cfg)
            .arg("--out")
            .arg(root.join("model.bin"))
            .output()
            .unwrap());
        Fixture { _dir: dir, root }
    })
}

fn track(f: &Fixture, out: &Path, adapt: &str) -> String {
    let data = f.data();
    ok(bin()
        .args(["--threads", "1", "track", "--model"])
        .arg(f.model())
        .arg("--frames")
        .arg(data.join("sequence/frames"))
        .arg("--gt")
        .arg(data.join("sequence/gt"))
        .arg("--config")
        .arg(f.config())
        .args(["--adapt", adapt, "--overlays", "--out"])
        .arg(out)
        .output()
        .unwrap())
}

#[test]
fn synth_writes_matching_images_and_annotations() {
    let data = fixture().data();
    let count = |d: &str| fs::read_dir(data.join(d)).unwrap().count();
    assert_eq!(count("train/images"), 80);
    assert_eq!(count("train/annotations"), 80);
    assert_eq!(count("sequence/frames"), 12);
    assert_eq!(count("sequence/gt"), 12);
    assert!(fs::read_to_string(data.join("synth.cfg")).unwrap().contains("interocular_right = 3"));
    assert!(fs::read_to_string(data.join("manifest.json")).unwrap().contains("\"complete\": true"));
}

#[test]
fn adapt_off_tracking_is_byte_identical() {
    let f = fixture();
    let (a, b) = (f.root.join("track_a"), f.root.join("track_b"));
    let summary = track(f, &a, "none");
    assert!(summary.contains("12 frames"));
    track(f, &b, "none");
    let results = fs::read(a.join("results.csv")).unwrap();
    assert_eq!(results, fs::read(b.join("results.csv")).unwrap());
    let text = String::from_utf8(results).unwrap();
    assert!(text.starts_with("frame,rmse,verdict,confidence,adapted,status,skipped\n"));
    assert_eq!(text.lines().count(), 13);
    assert_eq!(fs::read_to_string(a.join("timing.csv")).unwrap().lines().next().unwrap(), "frame,ms_fit,ms_eval,ms_adapt");
    assert_eq!(fs::read_dir(a.join("overlays")).unwrap().count(), 12);
}

#[test]
fn adaptation_is_logged_per_buffer() {
    let f = fixture();
    let out = f.root.join("track_both");
    track(f, &out, "both");
    let rows = fs::read_to_string(out.join("results.csv")).unwrap();
    let aligned = rows.lines().skip(1).filter(|l| l.split(',').nth(2) == Some("aligned")).count();
    let adapted = rows.lines().skip(1).filter(|l| l.split(',').nth(4) == Some("true")).count();
    assert_eq!(adapted, aligned / 4);
    assert_eq!(fs::read_to_string(out.join("adaptations.jsonl")).unwrap().lines().count(), adapted);
}

#[test]
fn evaluate_reports_thresholds_and_curve() {
    let dir = tempfile::tempdir().unwrap();
    let zeros = dir.path().join("zeros.csv");
    fs::write(&zeros, "frame,rmse\n0,0\n1,0\n2,0\n").unwrap();
    let mixed = dir.path().join("mixed.csv");
    fs::write(&mixed, "frame,rmse\n0,0.05\n1,\n2,0.01\n3,0.2\n").unwrap();
    let out = dir.path().join("eval");
    let table = ok(bin().arg("evaluate").arg(format!("zero={}", zeros.display())).arg(format!("mixed={}", mixed.display())).arg("--out").arg(&out).output().unwrap());
    assert!(table.contains("zero"));
    let summary = fs::read_to_string(out.join("summary.csv")).unwrap();
    let zero_row = summary.lines().find(|l| l.starts_with("zero,")).unwrap();
    assert!(zero_row.ends_with(",1,1,1"), "{zero_row}");
    let mixed_row = summary.lines().find(|l| l.starts_with("mixed,")).unwrap();
    assert!(mixed_row.ends_with(",0.25,0.5,0.5"), "{mixed_row}");
    let ced = fs::read_to_string(out.join("ced.csv")).unwrap();
    assert_eq!(ced.lines().next().unwrap(), "threshold,zero,mixed");
    assert_eq!(ced.lines().last().unwrap(), "0.150,1,0.5");
}

#[test]
fn ablation_runs_every_mode() {
    let f = fixture();
    let data = f.data();
    let out = f.root.join("ablate");
    let table = ok(bin()
        .arg("ablate")
        .arg("--model")
        .arg(f.model())
        .arg("--frames")
        .arg(data.join("sequence/frames"))
        .arg("--gt")
        .arg(data.join("sequence/gt"))
        .arg("--config")
        .arg(f.config())
        .arg("--out")
        .arg(&out)
        .output()
        .unwrap());
    for mode in ["none", "rep", "fit", "both"] {
        assert!(out.join(mode).join("results.csv").exists());
        assert!(table.contains(mode));
    }
    assert_eq!(fs::read_to_string(out.join("summary.csv")).unwrap().lines().count(), 5);
}

#[test]
fn failures_exit_nonzero_with_one_line() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.cfg");
    fs::write(&bad, "n_buf = 3\nno_such_key = 1\n").unwrap();
    let out = bin().arg("synth").arg("--config").arg(&bad).arg("--out").arg(dir.path().join("x")).output().unwrap();
    assert!(!out.status.success());
    let err = String::from_utf8(out.stderr).unwrap();
    assert_eq!(err.lines().count(), 1);
    assert!(err.contains("line 2"), "{err}");

    let out = bin().args(["track", "--model", "/nonexistent/model.bin", "--frames"]).arg(dir.path()).arg("--init-box").arg("0,0,10,10").arg("--out").arg(dir.path().join("t")).output().unwrap();
    assert!(!out.status.success());
    assert_eq!(String::from_utf8(out.stderr).unwrap().lines().count(), 1);
}
