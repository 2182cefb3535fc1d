//! Commands behind the `incalign` binary. Each one reads its inputs, writes
//! machine-readable outputs into a directory and returns a small summary.
//!
//! Output schema (version [`SCHEMA_VERSION`]):
//! - `results.csv`: `frame,rmse,verdict,confidence,adapted,status,skipped`;
//!   deterministic for a given model, input and configuration.
//! - `timing.csv`: `frame,ms_fit,ms_eval,ms_adapt`.
//! - `adaptations.jsonl`: one JSON object per adaptation.
//! - `summary.csv`: `name,frames,evaluated,mean_rmse,median_rmse,under_0.04,under_0.06,under_0.08`.
//! - `ced.csv`: `threshold` followed by one cumulative-fraction column per run.
//! - `manifest.json`: schema version, command and a `complete` flag that is
//!   only set once every other output has been written.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::Serialize;
use thiserror::Error;

use incalign::io::{load_annotation, load_image, overlay, save_annotation, save_image, save_model, load_model};
use incalign::synth::{generate_sequence, generate_training_set};
use incalign::{AdaptMode, AnnotationFile, FrameResult, InitBox, RunConfig, SharedModels, Shape, Status, Tracker, TrackerConfig, TrainingReport, Verdict};

pub const SCHEMA_VERSION: u32 = 1;
pub const CED_THRESHOLDS: [f64; 3] = [0.04, 0.06, 0.08];
/// Upper end and resolution of the cumulative error curve.
const CED_MAX: f64 = 0.15;
const CED_STEPS: usize = 150;
const IMAGE_EXTENSIONS: [&str; 4] = ["png", "pgm", "pnm", "ppm"];

#[derive(Debug, Error)]
pub enum CliError {
    #[error(transparent)]
    Core(#[from] incalign::Error),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{0}")]
    Usage(String),
}

pub type Result<T> = std::result::Result<T, CliError>;

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
    move |source| CliError::Io { path: path.to_path_buf(), source }
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(io_err(path))
}

#[derive(Serialize)]
struct Manifest<'a> {
    schema: u32,
    command: &'a str,
    complete: bool,
}

fn write_manifest(dir: &Path, command: &str, complete: bool) -> Result<()> {
    let path = dir.join("manifest.json");
    let text = serde_json::to_string_pretty(&Manifest { schema: SCHEMA_VERSION, command, complete }).expect("manifest serializes");
    fs::write(&path, text + "\n").map_err(io_err(&path))
}

/// Image files in `dir`, sorted by name.
pub fn list_images(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for entry in fs::read_dir(dir).map_err(io_err(dir))? {
        let path = entry.map_err(io_err(dir))?.path();
        let ext = path.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase);
        if ext.is_some_and(|e| IMAGE_EXTENSIONS.contains(&e.as_str())) {
            out.push(path);
        }
    }
    if out.is_empty() {
        return Err(CliError::Usage(format!("no images in {}", dir.display())));
    }
    out.sort();
    Ok(out)
}

/// `<dir>/<image stem>.pts`.
pub fn annotation_path(dir: &Path, image: &Path) -> PathBuf {
    let stem = image.file_stem().unwrap_or_default();
    dir.join(stem).with_extension("pts")
}

// ---------------------------------------------------------------------- synth

#[derive(Debug, Clone)]
pub struct SynthSummary {
    pub training_images: usize,
    pub sequence_frames: usize,
}

/// Writes a training set (`train/images`, `train/annotations`), a sequence
/// (`sequence/frames`, `sequence/gt`) and `synth.cfg`, a training config whose
/// interocular indices match the synthetic landmark layout.
pub fn cmd_synth(cfg: &RunConfig, out: &Path) -> Result<SynthSummary> {
    create_dir(out)?;
    write_manifest(out, "synth", false)?;
    let dirs = ["train/images", "train/annotations", "sequence/frames", "sequence/gt"].map(|d| out.join(d));
    for d in &dirs {
        create_dir(d)?;
    }
    let training = generate_training_set(&cfg.synth, cfg.synth_training_images)?;
    for (i, (img, shape)) in training.iter().enumerate() {
        save_image(&dirs[0].join(format!("{i:04}.png")), img)?;
        save_annotation(&dirs[1].join(format!("{i:04}.pts")), &AnnotationFile::from_shape(shape))?;
    }
    let sequence = generate_sequence(&cfg.synth)?;
    for (t, (img, shape)) in sequence.iter().enumerate() {
        save_image(&dirs[2].join(format!("{t:04}.png")), img)?;
        save_annotation(&dirs[3].join(format!("{t:04}.pts")), &AnnotationFile::from_shape(shape))?;
    }
    let eyes = incalign::synth::INTEROCULAR;
    let cfg_path = out.join("synth.cfg");
    let text = format!("# interocular landmarks of the synthetic faces\ninterocular_left = {}\ninterocular_right = {}\n", eyes.left, eyes.right);
    fs::write(&cfg_path, text).map_err(io_err(&cfg_path))?;
    write_manifest(out, "synth", true)?;
    Ok(SynthSummary {
        training_images: training.len(),
        sequence_frames: sequence.len(),
    })
}

// ---------------------------------------------------------------------- train

/// Trains every model from annotated images and saves the container.
pub fn cmd_train(images: &Path, annotations: &Path, cfg: &RunConfig, out_model: &Path) -> Result<TrainingReport> {
    let mut data = Vec::new();
    for path in list_images(images)? {
        let shape = load_annotation(&annotation_path(annotations, &path))?.to_shape()?;
        data.push((load_image(&path)?, shape));
    }
    let landmarks = data[0].1.len();
    let eyes = cfg.train.eyes;
    if eyes.left >= landmarks || eyes.right >= landmarks {
        return Err(CliError::Usage(format!(
            "interocular landmarks {} and {} do not exist in {landmarks}-point annotations (set interocular_left/right)",
            eyes.left, eyes.right
        )));
    }
    let (models, report) = incalign::train_models(&data, &cfg.train)?;
    if let Some(parent) = out_model.parent().filter(|p| !p.as_os_str().is_empty()) {
        create_dir(parent)?;
    }
    save_model(out_model, &models)?;
    Ok(report)
}

// ---------------------------------------------------------------------- track

#[derive(Debug, Clone)]
pub struct TrackOptions {
    pub model: PathBuf,
    pub frames: PathBuf,
    pub out: PathBuf,
    pub tracker: TrackerConfig,
    /// Ground-truth annotations; they supply the error column and the box
    /// used whenever the track is lost.
    pub gt: Option<PathBuf>,
    /// Box for the first frame when no ground truth is given.
    pub init_box: Option<InitBox>,
    pub overlays: bool,
}

#[derive(Debug, Clone)]
pub struct TrackSummary {
    pub frames: usize,
    pub aligned: usize,
    pub misaligned: usize,
    pub skipped: usize,
    pub adaptations: usize,
    pub median_rmse: Option<f64>,
}

fn opt<T: ToString>(v: Option<T>) -> String {
    v.map(|v| v.to_string()).unwrap_or_default()
}

fn verdict_name(v: Verdict) -> &'static str {
    match v {
        Verdict::Aligned => "aligned",
        Verdict::Misaligned => "misaligned",
        Verdict::NotEvaluated => "not_evaluated",
    }
}

fn median(mut v: Vec<f64>) -> Option<f64> {
    if v.is_empty() {
        return None;
    }
    v.sort_by(f64::total_cmp);
    let n = v.len();
    Some(if n % 2 == 1 { v[n / 2] } else { 0.5 * (v[n / 2 - 1] + v[n / 2]) })
}

/// Runs the tracker over a frame directory.
pub fn cmd_track(opts: &TrackOptions) -> Result<TrackSummary> {
    let frames = list_images(&opts.frames)?;
    let models = load_model(&opts.model)?;
    create_dir(&opts.out)?;
    write_manifest(&opts.out, "track", false)?;
    let overlay_dir = opts.out.join("overlays");
    if opts.overlays {
        create_dir(&overlay_dir)?;
    }
    let mut tracker = Tracker::new(Arc::new(SharedModels::new(models)), opts.tracker.clone())?;
    let mut results = csv::Writer::from_path(opts.out.join("results.csv"))?;
    results.write_record(["frame", "rmse", "verdict", "confidence", "adapted", "status", "skipped"])?;
    let mut timing = csv::Writer::from_path(opts.out.join("timing.csv"))?;
    timing.write_record(["frame", "ms_fit", "ms_eval", "ms_adapt"])?;
    let adapt_path = opts.out.join("adaptations.jsonl");
    let mut adaptations = fs::File::create(&adapt_path).map_err(io_err(&adapt_path))?;

    let mut summary = TrackSummary { frames: 0, aligned: 0, misaligned: 0, skipped: 0, adaptations: 0, median_rmse: None };
    let mut errors = Vec::new();
    for (i, path) in frames.iter().enumerate() {
        let image = load_image(path)?;
        let truth: Option<Shape> = match &opts.gt {
            Some(dir) => Some(load_annotation(&annotation_path(dir, path))?.to_shape()?),
            None => None,
        };
        let init = match (&truth, i) {
            (Some(t), _) => Some(InitBox::around(t)),
            (None, 0) => opts.init_box,
            (None, _) => None,
        };
        let shown = opts.overlays.then(|| image.clone());
        let r: FrameResult = tracker.process_frame(image, init, truth.as_ref())?;
        summary.frames += 1;
        match r.verdict {
            Verdict::Aligned => summary.aligned += 1,
            Verdict::Misaligned => summary.misaligned += 1,
            Verdict::NotEvaluated => {}
        }
        summary.skipped += usize::from(r.skipped);
        if let Some(e) = r.rmse {
            errors.push(e);
        }
        let status = if r.status == Status::Tracking { "tracking" } else { "lost" };
        results.write_record([
            r.frame.to_string(),
            opt(r.rmse),
            verdict_name(r.verdict).to_string(),
            opt(r.confidence),
            r.adapted.to_string(),
            status.to_string(),
            r.skipped.to_string(),
        ])?;
        timing.write_record([r.frame.to_string(), r.timing.fit_ms.to_string(), r.timing.eval_ms.to_string(), r.timing.adapt_ms.to_string()])?;
        if let Some(a) = &r.adaptation {
            summary.adaptations += 1;
            let line = serde_json::json!({ "frame": r.frame, "report": a });
            writeln!(adaptations, "{line}").map_err(io_err(&adapt_path))?;
        }
        if let (Some(img), Some(shape)) = (shown, &r.shape) {
            save_image(&overlay_dir.join(format!("{:04}.png", r.frame)), &overlay(&img, shape))?;
        }
    }
    results.flush().map_err(io_err(&opts.out))?;
    timing.flush().map_err(io_err(&opts.out))?;
    summary.median_rmse = median(errors);
    write_manifest(&opts.out, "track", true)?;
    Ok(summary)
}

// ------------------------------------------------------------------- evaluate

#[derive(Debug, Clone, PartialEq)]
pub struct RunSummary {
    pub name: String,
    pub frames: usize,
    /// Frames with an error value; skipped frames count as failures in the
    /// cumulative fractions.
    pub evaluated: usize,
    pub mean_rmse: Option<f64>,
    pub median_rmse: Option<f64>,
    /// Fraction of all frames with error below each of [`CED_THRESHOLDS`].
    pub under: [f64; 3],
}

/// Per-frame errors of a results file; `None` where no error was recorded.
pub fn read_errors(path: &Path) -> Result<Vec<Option<f64>>> {
    let mut reader = csv::Reader::from_path(path)?;
    let column = reader
        .headers()?
        .iter()
        .position(|h| h == "rmse")
        .ok_or_else(|| CliError::Usage(format!("{} has no rmse column", path.display())))?;
    let mut out = Vec::new();
    for (line, record) in reader.records().enumerate() {
        let record = record?;
        let field = record.get(column).unwrap_or("").trim();
        if field.is_empty() {
            out.push(None);
        } else {
            let v: f64 = field
                .parse()
                .map_err(|_| CliError::Usage(format!("{} row {}: bad rmse `{field}`", path.display(), line + 2)))?;
            out.push(Some(v));
        }
    }
    Ok(out)
}

fn fraction_under(errors: &[Option<f64>], threshold: f64) -> f64 {
    if errors.is_empty() {
        return 0.0;
    }
    errors.iter().filter(|e| e.is_some_and(|v| v < threshold)).count() as f64 / errors.len() as f64
}

pub fn summarize(name: &str, errors: &[Option<f64>]) -> RunSummary {
    let known: Vec<f64> = errors.iter().flatten().copied().collect();
    let mean = (!known.is_empty()).then(|| known.iter().sum::<f64>() / known.len() as f64);
    RunSummary {
        name: name.to_string(),
        frames: errors.len(),
        evaluated: known.len(),
        mean_rmse: mean,
        median_rmse: median(known),
        under: CED_THRESHOLDS.map(|t| fraction_under(errors, t)),
    }
}

/// Aggregates result files into `summary.csv` and `ced.csv` under `out`.
pub fn cmd_evaluate(runs: &[(String, PathBuf)], out: &Path) -> Result<Vec<RunSummary>> {
    if runs.is_empty() {
        return Err(CliError::Usage("nothing to evaluate".into()));
    }
    let errors: Vec<Vec<Option<f64>>> = runs.iter().map(|(_, p)| read_errors(p)).collect::<Result<_>>()?;
    create_dir(out)?;
    write_manifest(out, "evaluate", false)?;
    let summaries: Vec<RunSummary> = runs.iter().zip(&errors).map(|((n, _), e)| summarize(n, e)).collect();

    let mut w = csv::Writer::from_path(out.join("summary.csv"))?;
    w.write_record(["name", "frames", "evaluated", "mean_rmse", "median_rmse", "under_0.04", "under_0.06", "under_0.08"])?;
    for s in &summaries {
        w.write_record([
            s.name.clone(),
            s.frames.to_string(),
            s.evaluated.to_string(),
            opt(s.mean_rmse),
            opt(s.median_rmse),
            s.under[0].to_string(),
            s.under[1].to_string(),
            s.under[2].to_string(),
        ])?;
    }
    w.flush().map_err(io_err(out))?;

    let mut c = csv::Writer::from_path(out.join("ced.csv"))?;
    let mut header = vec!["threshold".to_string()];
    header.extend(runs.iter().map(|(n, _)| n.clone()));
    c.write_record(&header)?;
    for k in 0..=CED_STEPS {
        let t = CED_MAX * k as f64 / CED_STEPS as f64;
        let mut row = vec![format!("{t:.3}")];
        row.extend(errors.iter().map(|e| fraction_under(e, t + 1e-12).to_string()));
        c.write_record(&row)?;
    }
    c.flush().map_err(io_err(out))?;
    write_manifest(out, "evaluate", true)?;
    Ok(summaries)
}

/// Human-readable table of summaries.
pub fn format_table(summaries: &[RunSummary]) -> String {
    let mut s = format!("{:<12} {:>7} {:>10} {:>10} {:>8} {:>8} {:>8}\n", "run", "frames", "mean", "median", "<0.04", "<0.06", "<0.08");
    for r in summaries {
        let f = |v: Option<f64>| v.map(|v| format!("{v:.4}")).unwrap_or_else(|| "-".into());
        s += &format!(
            "{:<12} {:>7} {:>10} {:>10} {:>7.1}% {:>7.1}% {:>7.1}%\n",
            r.name,
            r.frames,
            f(r.mean_rmse),
            f(r.median_rmse),
            100.0 * r.under[0],
            100.0 * r.under[1],
            100.0 * r.under[2]
        );
    }
    s
}

// --------------------------------------------------------------------- ablate

pub const ABLATION_MODES: [(AdaptMode, &str); 4] = [(AdaptMode::None, "none"), (AdaptMode::Rep, "rep"), (AdaptMode::Fit, "fit"), (AdaptMode::Both, "both")];

/// Tracks the same frames once per adaptation mode (`out/<mode>/`) and
/// evaluates all four runs together (`out/summary.csv`, `out/ced.csv`).
pub fn cmd_ablate(model: &Path, frames: &Path, gt: &Path, tracker: &TrackerConfig, out: &Path) -> Result<Vec<RunSummary>> {
    create_dir(out)?;
    let mut runs = Vec::new();
    for (mode, name) in ABLATION_MODES {
        let dir = out.join(name);
        cmd_track(&TrackOptions {
            model: model.to_path_buf(),
            frames: frames.to_path_buf(),
            out: dir.clone(),
            tracker: TrackerConfig { adapt: mode, ..tracker.clone() },
            gt: Some(gt.to_path_buf()),
            init_box: None,
            overlays: false,
        })?;
        runs.push((name.to_string(), dir.join("results.csv")));
    }
    cmd_evaluate(&runs, out)
}
