//! Annotation files, images, the binary model container and run
//! configuration files.
//!
//! Container layout (all integers and floats little-endian):
//!
//! ```text
//! magic    8 bytes  "INCALIGN"
//! version  u32
//! count    u32      number of sections
//! section  tag [u8; 4] | length u64 | payload | crc32(payload) u32
//! ```
//!
//! Sections, in order: `META`, `SHAP`, `APPR`, `CASC`, `PERT`, `EVAL`.
//! Matrices are stored as `rows u64 | cols u64 | column-major f64`.

use std::fs;
use std::path::Path;

use nalgebra::{DMatrix, DVector};

use crate::appearance::{AppearanceModel, PatchExpert};
use crate::cascade::{AdaptiveStage, CascadeStage, PerturbationModel};
use crate::error::{Error, Result};
use crate::evaluator::{EvaluatorNet, NetParams, Wiring};
use crate::geometry::{Interocular, Shape};
use crate::hog::HogLayout;
use crate::image::ImagePlane;
use crate::model::{ModelSet, TrainConfig};
use crate::shape::ShapeModel;
use crate::subspace::{PcaSubspace, RankRule};
use crate::synth::SynthConfig;
use crate::tracker::{AdaptMode, TrackerConfig};

pub const MAGIC: &[u8; 8] = b"INCALIGN";
pub const FORMAT_VERSION: u32 = 1;

// ---------------------------------------------------------------- annotations

#[derive(Debug, Clone, PartialEq)]
pub struct AnnotationFile {
    pub version: u32,
    pub points: Vec<(f64, f64)>,
}

impl AnnotationFile {
    pub fn from_shape(shape: &Shape) -> Self {
        Self {
            version: 1,
            points: shape.points().iter().map(|p| (p.x, p.y)).collect(),
        }
    }

    pub fn to_shape(&self) -> Result<Shape> {
        Shape::from_xy(&self.points)
    }

    /// pts layout; coordinates use the shortest representation that parses
    /// back to the same bits.
    pub fn to_text(&self) -> String {
        let mut s = format!("version: {}\nn_points: {}\n{{\n", self.version, self.points.len());
        for (x, y) in &self.points {
            s.push_str(&format!("{x:?} {y:?}\n"));
        }
        s.push_str("}\n");
        s
    }
}

fn parse_err(line: usize, message: impl Into<String>) -> Error {
    Error::Parse { line, message: message.into() }
}

fn header_value<'a>(line: Option<(usize, &'a str)>, key: &str, last: usize) -> Result<(usize, &'a str)> {
    let (n, text) = line.ok_or_else(|| parse_err(last + 1, format!("missing {key} line")))?;
    let (k, v) = text.split_once(':').ok_or_else(|| parse_err(n, format!("expected `{key}: <value>`")))?;
    if k.trim() != key {
        return Err(parse_err(n, format!("expected `{key}`, found `{}`", k.trim())));
    }
    Ok((n, v.trim()))
}

pub fn parse_annotation(text: &str) -> Result<AnnotationFile> {
    let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l.trim())).filter(|(_, l)| !l.is_empty());
    let (n, v) = header_value(lines.next(), "version", 0)?;
    let version: u32 = v.parse().map_err(|_| parse_err(n, format!("bad version `{v}`")))?;
    let (n, v) = header_value(lines.next(), "n_points", n)?;
    let count: usize = v.parse().map_err(|_| parse_err(n, format!("bad point count `{v}`")))?;
    let (n, open) = lines.next().ok_or_else(|| parse_err(n + 1, "missing `{`"))?;
    if open != "{" {
        return Err(parse_err(n, "expected `{`"));
    }
    let mut points = Vec::with_capacity(count);
    let mut last = n;
    loop {
        let (n, l) = lines.next().ok_or_else(|| parse_err(last + 1, "missing closing `}`"))?;
        last = n;
        if l == "}" {
            break;
        }
        let mut it = l.split_whitespace();
        let mut coord = || -> Result<f64> {
            let t = it.next().ok_or_else(|| parse_err(n, "expected two coordinates"))?;
            let v: f64 = t.parse().map_err(|_| parse_err(n, format!("non-numeric coordinate `{t}`")))?;
            if v.is_finite() {
                Ok(v)
            } else {
                Err(parse_err(n, "non-finite coordinate"))
            }
        };
        let (x, y) = (coord()?, coord()?);
        if it.next().is_some() {
            return Err(parse_err(n, "more than two coordinates"));
        }
        points.push((x, y));
    }
    if let Some((n, _)) = lines.next() {
        return Err(parse_err(n, "content after closing `}`"));
    }
    if points.len() != count {
        return Err(parse_err(last, format!("n_points is {count} but {} points were listed", points.len())));
    }
    Ok(AnnotationFile { version, points })
}

pub fn load_annotation(path: &Path) -> Result<AnnotationFile> {
    parse_annotation(&fs::read_to_string(path)?)
}

pub fn save_annotation(path: &Path, a: &AnnotationFile) -> Result<()> {
    Ok(fs::write(path, a.to_text())?)
}

// --------------------------------------------------------------------- images

/// Decodes a PGM/PPM or PNG file into intensities in `[0, 1]`. 16-bit data
/// is scaled by `1/65535`, everything else by `1/255` after grayscale
/// conversion.
pub fn decode_image(bytes: &[u8]) -> Result<ImagePlane> {
    let format = image::guess_format(bytes).map_err(|_| Error::UnsupportedFormat("unrecognized image header".into()))?;
    if !matches!(format, image::ImageFormat::Png | image::ImageFormat::Pnm) {
        return Err(Error::UnsupportedFormat(format!("{format:?} images are not supported (use PGM or PNG)")));
    }
    let img = image::load_from_memory_with_format(bytes, format)?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    let pixels: Vec<f64> = match img.color() {
        image::ColorType::L16 | image::ColorType::La16 | image::ColorType::Rgb16 | image::ColorType::Rgba16 => img.to_luma16().pixels().map(|p| p.0[0] as f64 / 65535.0).collect(),
        _ => img.to_luma8().pixels().map(|p| p.0[0] as f64 / 255.0).collect(),
    };
    ImagePlane::new(w, h, pixels)
}

pub fn load_image(path: &Path) -> Result<ImagePlane> {
    decode_image(&fs::read(path)?)
}

fn to_gray8(img: &ImagePlane) -> image::GrayImage {
    let mut buf = image::GrayImage::new(img.width() as u32, img.height() as u32);
    for (p, v) in buf.pixels_mut().zip(img.pixels()) {
        p.0[0] = (v.clamp(0.0, 1.0) * 255.0).round() as u8;
    }
    buf
}

/// Writes an 8-bit image; the format follows the extension (`pgm` or `png`).
pub fn save_image(path: &Path, img: &ImagePlane) -> Result<()> {
    let ext = path.extension().and_then(|e| e.to_str()).unwrap_or("").to_ascii_lowercase();
    let format = match ext.as_str() {
        "pgm" => image::ImageFormat::Pnm,
        "png" => image::ImageFormat::Png,
        other => return Err(Error::UnsupportedFormat(format!("cannot write `.{other}` images"))),
    };
    if format == image::ImageFormat::Pnm {
        let buf = to_gray8(img);
        let mut bytes = format!("P5\n{} {}\n255\n", img.width(), img.height()).into_bytes();
        bytes.extend_from_slice(buf.as_raw());
        fs::write(path, bytes)?;
        return Ok(());
    }
    to_gray8(img).save_with_format(path, format)?;
    Ok(())
}

/// Copy of `img` with each landmark drawn as a small white cross, for
/// visual inspection.
pub fn overlay(img: &ImagePlane, shape: &Shape) -> ImagePlane {
    let mut out = img.clone();
    let (w, h) = (img.width() as isize, img.height() as isize);
    for p in shape.points() {
        let (cx, cy) = (p.x.round() as isize, p.y.round() as isize);
        for (dx, dy) in [(0, 0), (-1, 0), (1, 0), (0, -1), (0, 1)] {
            let (x, y) = (cx + dx, cy + dy);
            if x >= 0 && y >= 0 && x < w && y < h {
                out.set(x as usize, y as usize, 1.0);
            }
        }
    }
    out
}

// ------------------------------------------------------------------ container

#[derive(Default)]
struct Writer {
    buf: Vec<u8>,
}

impl Writer {
    fn u32(&mut self, v: u32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    fn u64(&mut self, v: u64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    fn usize(&mut self, v: usize) {
        self.u64(v as u64);
    }

    fn f64(&mut self, v: f64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    fn opt(&mut self, v: Option<usize>) {
        match v {
            Some(x) => {
                self.u32(1);
                self.usize(x);
            }
            None => self.u32(0),
        }
    }

    fn f64s(&mut self, v: &[f64]) {
        self.usize(v.len());
        v.iter().for_each(|x| self.f64(*x));
    }

    fn matrix(&mut self, m: &DMatrix<f64>) {
        self.usize(m.nrows());
        self.usize(m.ncols());
        m.iter().for_each(|x| self.f64(*x));
    }

    fn vector(&mut self, v: &DVector<f64>) {
        self.f64s(v.as_slice());
    }

    fn subspace(&mut self, s: &PcaSubspace) {
        self.vector(s.mean());
        self.matrix(s.basis());
        self.vector(s.singular_values());
        self.usize(s.observation_count());
        self.f64(s.effective_count());
        let r = s.rank_rule();
        self.f64(r.energy);
        self.opt(r.max_rank);
        self.opt(r.fixed_rank);
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
    section: &'static str,
}

impl<'a> Reader<'a> {
    fn new(buf: &'a [u8], section: &'static str) -> Self {
        Self { buf, pos: 0, section }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::Integrity(format!("section {} is truncated", self.section)));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn usize(&mut self) -> Result<usize> {
        usize::try_from(self.u64()?).map_err(|_| Error::Integrity("length does not fit in memory".into()))
    }

    /// A length that must be payable from the remaining bytes.
    fn count(&mut self, item_bytes: usize) -> Result<usize> {
        let n = self.usize()?;
        if n.saturating_mul(item_bytes) > self.buf.len() - self.pos {
            return Err(Error::Integrity(format!("section {} declares more data than it holds", self.section)));
        }
        Ok(n)
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn opt(&mut self) -> Result<Option<usize>> {
        match self.u32()? {
            0 => Ok(None),
            1 => Ok(Some(self.usize()?)),
            t => Err(Error::Integrity(format!("bad option tag {t}"))),
        }
    }

    fn f64s(&mut self) -> Result<Vec<f64>> {
        let n = self.count(8)?;
        (0..n).map(|_| self.f64()).collect()
    }

    fn matrix(&mut self) -> Result<DMatrix<f64>> {
        let rows = self.usize()?;
        let cols = self.usize()?;
        let n = rows.checked_mul(cols).ok_or_else(|| Error::Integrity("matrix size overflows".into()))?;
        if n.saturating_mul(8) > self.buf.len() - self.pos {
            return Err(Error::Integrity(format!("section {} declares more data than it holds", self.section)));
        }
        let data = (0..n).map(|_| self.f64()).collect::<Result<Vec<_>>>()?;
        Ok(DMatrix::from_vec(rows, cols, data))
    }

    fn vector(&mut self) -> Result<DVector<f64>> {
        Ok(DVector::from_vec(self.f64s()?))
    }

    fn subspace(&mut self) -> Result<PcaSubspace> {
        let mean = self.vector()?;
        let basis = self.matrix()?;
        let sigma = self.vector()?;
        let count = self.usize()?;
        let effective = self.f64()?;
        let rule = RankRule {
            energy: self.f64()?,
            max_rank: self.opt()?,
            fixed_rank: self.opt()?,
        };
        PcaSubspace::from_parts(mean, basis, sigma, count, effective, rule)
    }

    fn finish(&self) -> Result<()> {
        if self.pos != self.buf.len() {
            return Err(Error::Integrity(format!("section {} has trailing bytes", self.section)));
        }
        Ok(())
    }
}

const SECTIONS: [&[u8; 4]; 6] = [b"META", b"SHAP", b"APPR", b"CASC", b"PERT", b"EVAL"];

fn wiring_code(w: Wiring) -> u32 {
    match w {
        Wiring::InputConcat => 0,
        Wiring::FcConcat => 1,
    }
}

/// Serializes a model set into container bytes.
pub fn encode_model(m: &ModelSet) -> Vec<u8> {
    let mut meta = Writer::default();
    meta.usize(m.shape.landmark_count());
    let eyes = m.shape.eyes();
    meta.usize(eyes.left);
    meta.usize(eyes.right);
    let l = &m.appearance.layout;
    meta.usize(l.patch_side);
    meta.usize(l.cells);
    meta.usize(l.bins);
    meta.f64(l.clip);
    meta.f64(l.eps);
    meta.usize(m.appearance.support);
    meta.f64(crate::geometry::REFERENCE_INTEROCULAR);
    meta.f64(crate::evaluator::CROP_MARGIN);

    let mut shape = Writer::default();
    shape.subspace(m.shape.subspace());

    let mut appr = Writer::default();
    appr.usize(m.appearance.experts.len());
    for (e, s) in m.appearance.experts.iter().zip(&m.appearance.subspaces) {
        appr.usize(e.landmark);
        appr.vector(&e.weights);
        appr.f64(e.bias);
        appr.subspace(s);
    }

    let mut casc = Writer::default();
    casc.usize(m.stages.len());
    for s in &m.stages {
        casc.f64(s.stage.lambda);
        casc.matrix(&s.stage.regressor);
        casc.matrix(&s.inverse_gram);
    }

    let mut pert = Writer::default();
    pert.usize(m.perturbation.stages());
    m.perturbation.variances().iter().for_each(|v| pert.vector(v));

    let mut eval = Writer::default();
    let net = &m.evaluator;
    eval.u32(wiring_code(net.wiring()));
    eval.usize(net.side());
    eval.usize(net.dilation());
    eval.usize(net.params().blocks.len());
    net.params().blocks.iter().for_each(|b| eval.f64s(b));

    let mut out = Writer::default();
    out.buf.extend_from_slice(MAGIC);
    out.u32(FORMAT_VERSION);
    out.u32(SECTIONS.len() as u32);
    for (tag, payload) in SECTIONS.iter().zip([meta, shape, appr, casc, pert, eval]) {
        out.buf.extend_from_slice(*tag);
        out.u64(payload.buf.len() as u64);
        out.buf.extend_from_slice(&payload.buf);
        out.u32(crc32fast::hash(&payload.buf));
    }
    out.buf
}

/// Parses container bytes, verifying magic, version, checksums and the
/// consistency of all components.
pub fn decode_model(bytes: &[u8]) -> Result<ModelSet> {
    let mut top = Reader::new(bytes, "header");
    if top.take(8).map_err(|_| Error::Integrity("file too short for a model container".into()))? != MAGIC {
        return Err(Error::UnsupportedFormat("not a model container (bad magic)".into()));
    }
    let version = top.u32()?;
    if version != FORMAT_VERSION {
        return Err(Error::Version {
            found: version,
            expected: FORMAT_VERSION,
        });
    }
    let count = top.u32()? as usize;
    if count != SECTIONS.len() {
        return Err(Error::Integrity(format!("expected {} sections, found {count}", SECTIONS.len())));
    }
    let mut payloads = Vec::with_capacity(count);
    for tag in SECTIONS {
        let found = top.take(4)?;
        if found != tag {
            return Err(Error::Integrity(format!("expected section {}, found {:?}", String::from_utf8_lossy(tag), String::from_utf8_lossy(found))));
        }
        let len = top.usize()?;
        let payload = top.take(len)?;
        let crc = top.u32()?;
        if crc32fast::hash(payload) != crc {
            return Err(Error::Integrity(format!("checksum mismatch in section {}", String::from_utf8_lossy(tag))));
        }
        payloads.push(payload);
    }
    top.finish()?;

    let mut meta = Reader::new(payloads[0], "META");
    let landmarks = meta.usize()?;
    let eyes = Interocular::new(meta.usize()?, meta.usize()?);
    let layout = HogLayout {
        patch_side: meta.usize()?,
        cells: meta.usize()?,
        bins: meta.usize()?,
        clip: meta.f64()?,
        eps: meta.f64()?,
    };
    let support = meta.usize()?;
    let reference = meta.f64()?;
    let margin = meta.f64()?;
    meta.finish()?;
    if reference != crate::geometry::REFERENCE_INTEROCULAR || margin != crate::evaluator::CROP_MARGIN {
        return Err(Error::Integrity("container uses different normalization constants".into()));
    }

    let mut r = Reader::new(payloads[1], "SHAP");
    let shape = ShapeModel::new(r.subspace()?, eyes)?;
    r.finish()?;
    if shape.landmark_count() != landmarks {
        return Err(Error::Integrity("shape model landmark count disagrees with metadata".into()));
    }

    let mut r = Reader::new(payloads[2], "APPR");
    let n = r.count(8)?;
    let mut experts = Vec::with_capacity(n);
    let mut subspaces = Vec::with_capacity(n);
    for _ in 0..n {
        let landmark = r.usize()?;
        let weights = r.vector()?;
        let bias = r.f64()?;
        experts.push(PatchExpert::new(landmark, weights, bias)?);
        subspaces.push(r.subspace()?);
    }
    r.finish()?;
    let appearance = AppearanceModel::new(layout, support, experts, subspaces)?;

    let mut r = Reader::new(payloads[3], "CASC");
    let n = r.count(8)?;
    let mut stages = Vec::with_capacity(n);
    for _ in 0..n {
        let lambda = r.f64()?;
        let regressor = r.matrix()?;
        let inverse_gram = r.matrix()?;
        stages.push(AdaptiveStage::new(CascadeStage { regressor, lambda }, inverse_gram)?);
    }
    r.finish()?;

    let mut r = Reader::new(payloads[4], "PERT");
    let n = r.count(8)?;
    let variances = (0..n).map(|_| r.vector()).collect::<Result<Vec<_>>>()?;
    r.finish()?;
    let perturbation = PerturbationModel::new(variances)?;

    let mut r = Reader::new(payloads[5], "EVAL");
    let wiring = match r.u32()? {
        0 => Wiring::InputConcat,
        1 => Wiring::FcConcat,
        t => return Err(Error::Integrity(format!("unknown evaluator wiring {t}"))),
    };
    let side = r.usize()?;
    let dilation = r.usize()?;
    let n = r.count(8)?;
    let blocks = (0..n).map(|_| r.f64s()).collect::<Result<Vec<_>>>()?;
    r.finish()?;
    let evaluator = EvaluatorNet::from_parts(wiring, side, dilation, NetParams { blocks })?;

    ModelSet::new(shape, appearance, stages, perturbation, evaluator)
}

pub fn save_model(path: &Path, m: &ModelSet) -> Result<()> {
    Ok(fs::write(path, encode_model(m))?)
}

pub fn load_model(path: &Path) -> Result<ModelSet> {
    decode_model(&fs::read(path)?)
}

// --------------------------------------------------------------------- config

/// Everything a run can be configured with.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct RunConfig {
    pub train: TrainConfig,
    pub tracker: TrackerConfig,
    pub synth: SynthConfig,
    /// Number of training images `synth` writes.
    pub synth_training_images: usize,
}

fn value<T: std::str::FromStr>(line: usize, key: &str, v: &str) -> Result<T> {
    v.parse().map_err(|_| parse_err(line, format!("invalid value `{v}` for `{key}`")))
}

fn optional(line: usize, key: &str, v: &str) -> Result<Option<usize>> {
    if v == "none" {
        Ok(None)
    } else {
        value(line, key, v).map(Some)
    }
}

/// Parses a flat `key = value` file. `#` starts a comment; unknown keys and
/// malformed lines are errors naming the line.
pub fn parse_config(text: &str) -> Result<RunConfig> {
    let mut c = RunConfig {
        synth_training_images: 200,
        ..RunConfig::default()
    };
    for (i, raw) in text.lines().enumerate() {
        let n = i + 1;
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| parse_err(n, format!("expected `key = value`, found `{line}`")))?;
        let (k, v) = (k.trim(), v.trim());
        let t = &mut c.train;
        let tr = &mut c.tracker;
        let s = &mut c.synth;
        match k {
            "interocular_left" => t.eyes.left = value(n, k, v)?,
            "interocular_right" => t.eyes.right = value(n, k, v)?,
            "patch_side" => t.layout.patch_side = value(n, k, v)?,
            "hog_cells" => t.layout.cells = value(n, k, v)?,
            "hog_bins" => t.layout.bins = value(n, k, v)?,
            "support" => t.support = value(n, k, v)?,
            "expert_negatives" => t.experts.negatives_per_image = value(n, k, v)?,
            "expert_folds" => t.experts.folds = value(n, k, v)?,
            "shape_energy" => t.shape_energy = value(n, k, v)?,
            "appearance_energy" => t.appearance_energy = value(n, k, v)?,
            "appearance_max_rank" => t.appearance_max_rank = optional(n, k, v)?,
            "appearance_samples" => t.appearance_samples = value(n, k, v)?,
            "scale_std" => t.scale_std = value(n, k, v)?,
            "rotation_std_deg" => t.rotation_std = value::<f64>(n, k, v)?.to_radians(),
            "translation_std" => t.translation_std = value(n, k, v)?,
            "cascade_stages" => t.cascade.stages = value(n, k, v)?,
            "cascade_samples" => t.cascade.samples_per_image = value(n, k, v)?,
            "ridge_lambda" => t.cascade.relative_lambda = value(n, k, v)?,
            "eval_tolerance" => t.evaluator_samples.tolerance = value(n, k, v)?,
            "eval_negative_ratio" => t.evaluator_samples.negative_ratio = value(n, k, v)?,
            "eval_negative_factor" => t.evaluator_samples.negative_factor = value(n, k, v)?,
            "eval_side" => {
                t.evaluator.side = value(n, k, v)?;
                t.evaluator_samples.side = t.evaluator.side;
            }
            "eval_dilation" => {
                t.evaluator.dilation = value(n, k, v)?;
                t.evaluator_samples.dilation = t.evaluator.dilation;
            }
            "eval_wiring" => {
                t.evaluator.wiring = match v {
                    "input" => Wiring::InputConcat,
                    "fc" => Wiring::FcConcat,
                    _ => return Err(parse_err(n, format!("invalid value `{v}` for `{k}` (expected input or fc)"))),
                }
            }
            "eval_epochs" => t.evaluator.epochs = value(n, k, v)?,
            "eval_learning_rate" => t.evaluator.learning_rate = value(n, k, v)?,
            "eval_batch" => t.evaluator.batch_size = value(n, k, v)?,
            "train_seed" => t.seed = value(n, k, v)?,
            "adapt" => tr.adapt = v.parse::<AdaptMode>().map_err(|e| parse_err(n, e.to_string()))?,
            "n_buf" => tr.buffer_size = value(n, k, v)?,
            "eval_stride" => tr.eval_stride = value(n, k, v)?,
            "threshold" => tr.threshold = value(n, k, v)?,
            "forgetting" => tr.forgetting = value(n, k, v)?,
            "fit_samples" => tr.fit_samples = value(n, k, v)?,
            "rep_samples" => tr.rep_samples = value(n, k, v)?,
            "tracker_seed" => tr.seed = value(n, k, v)?,
            "synth_landmarks" => s.landmarks = value(n, k, v)?,
            "synth_image_side" => s.image_side = value(n, k, v)?,
            "synth_frames" => s.frames = value(n, k, v)?,
            "synth_training_images" => c.synth_training_images = value(n, k, v)?,
            "synth_face_scale" => s.face_scale = value(n, k, v)?,
            "synth_translation_step" => s.translation_step = value(n, k, v)?,
            "synth_scale_step" => s.scale_step = value(n, k, v)?,
            "synth_rotation_step" => s.rotation_step = value(n, k, v)?,
            "synth_translation_range" => s.translation_range = value(n, k, v)?,
            "synth_scale_range" => s.scale_range = value(n, k, v)?,
            "synth_rotation_range" => s.rotation_range = value(n, k, v)?,
            "synth_deformation" => s.deformation = value(n, k, v)?,
            "synth_identity" => s.identity = value(n, k, v)?,
            "synth_drift_rate" => s.drift_rate = value(n, k, v)?,
            "synth_drift_contrast" => s.drift_contrast = value(n, k, v)?,
            "synth_drift_fade" => s.drift_fade = value(n, k, v)?,
            "synth_drift_blur" => s.drift_blur = value(n, k, v)?,
            "synth_noise_std" => s.noise_std = value(n, k, v)?,
            "synth_occlusion_prob" => s.occlusion_prob = value(n, k, v)?,
            "synth_occlusion_size" => s.occlusion_size = value(n, k, v)?,
            "synth_burst_start" => {
                let start = value(n, k, v)?;
                s.occlusion_burst = Some((start, s.occlusion_burst.map_or(30, |b| b.1)));
            }
            "synth_burst_length" => {
                let len = value(n, k, v)?;
                s.occlusion_burst = Some((s.occlusion_burst.map_or(0, |b| b.0), len));
            }
            "synth_seed" => s.seed = value(n, k, v)?,
            _ => return Err(parse_err(n, format!("unknown key `{k}`"))),
        }
    }
    c.tracker.validate()?;
    c.synth.validate()?;
    Ok(c)
}

pub fn load_config(path: &Path) -> Result<RunConfig> {
    parse_config(&fs::read_to_string(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn minimal_annotation_round_trips() {
        let text = "version: 1\nn_points: 3\n{\n1.5 2\n3 4.25\n-1 0\n}\n";
        let a = parse_annotation(text).unwrap();
        assert_eq!(a.points, vec![(1.5, 2.0), (3.0, 4.25), (-1.0, 0.0)]);
        assert_eq!(parse_annotation(&a.to_text()).unwrap(), a);
    }

    #[test]
    fn truncated_annotation_names_the_line() {
        let text = "version: 1\nn_points: 3\n{\n1 2\n3 4\n";
        match parse_annotation(text) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 6),
            other => panic!("{other:?}"),
        }
        match parse_annotation("version: 1\nn_points: 2\n{\n1 x\n2 3\n}\n") {
            Err(Error::Parse { line, message }) => {
                assert_eq!(line, 4);
                assert!(message.contains("non-numeric"));
            }
            other => panic!("{other:?}"),
        }
        assert!(matches!(parse_annotation("version: 1\nn_points: 3\n{\n1 2\n}\n"), Err(Error::Parse { line: 5, .. })));
        assert!(matches!(parse_annotation("n_points: 3\n"), Err(Error::Parse { line: 1, .. })));
    }

    proptest! {
        #[test]
        fn annotation_round_trip_is_bit_exact(pts in proptest::collection::vec((-1e6f64..1e6, -1e6f64..1e6), 1..80)) {
            let a = AnnotationFile { version: 1, points: pts };
            let b = parse_annotation(&a.to_text()).unwrap();
            prop_assert_eq!(a.points.len(), b.points.len());
            for (p, q) in a.points.iter().zip(&b.points) {
                prop_assert_eq!(p.0.to_bits(), q.0.to_bits());
                prop_assert_eq!(p.1.to_bits(), q.1.to_bits());
            }
        }

        #[test]
        fn annotation_parser_is_total(text in "\\PC{0,200}") {
            let _ = parse_annotation(&text);
        }

        #[test]
        fn config_parser_is_total(text in "[a-z_=#0-9. \n]{0,120}") {
            let _ = parse_config(&text);
        }
    }

    #[test]
    fn pgm_bytes_decode_to_known_intensities() {
        let mut bytes = b"P5\n2 2\n255\n".to_vec();
        bytes.extend_from_slice(&[0, 51, 255, 102]);
        let img = decode_image(&bytes).unwrap();
        assert_eq!(img.pixels(), &[0.0, 0.2, 1.0, 0.4]);
        assert!(decode_image(b"P5\n2 x\n255\n").is_err());
        assert!(matches!(decode_image(b"GIF89a......"), Err(Error::UnsupportedFormat(_))));
    }

    #[test]
    fn png_and_pgm_decode_identically() {
        let dir = tempfile::tempdir().unwrap();
        let img = ImagePlane::from_fn(7, 5, |x, y| ((x * 37 + y * 11) % 256) as f64 / 255.0).unwrap();
        save_image(&dir.path().join("a.pgm"), &img).unwrap();
        save_image(&dir.path().join("a.png"), &img).unwrap();
        let a = load_image(&dir.path().join("a.pgm")).unwrap();
        let b = load_image(&dir.path().join("a.png")).unwrap();
        assert_eq!(a, b);
        assert_eq!(a, img);
        assert!(save_image(&dir.path().join("a.bmp"), &img).is_err());
    }

    #[test]
    fn empty_config_gives_defaults() {
        let c = parse_config("").unwrap();
        assert_eq!(c.tracker, TrackerConfig::default());
        assert_eq!(c.train, TrainConfig::default());
        assert_eq!(c.synth, SynthConfig::default());
    }

    #[test]
    fn config_overrides_and_errors() {
        let c = parse_config("# tracker\nn_buf = 5\nadapt=fit\n\nappearance_max_rank = none\nrotation_std_deg = 5 # degrees\n").unwrap();
        assert_eq!(c.tracker.buffer_size, 5);
        assert_eq!(c.tracker.adapt, AdaptMode::Fit);
        assert!((c.train.rotation_std - 5f64.to_radians()).abs() < 1e-15);
        assert!(matches!(parse_config("n_buf = 5\nbogus = 1\n"), Err(Error::Parse { line: 2, .. })));
        assert!(matches!(parse_config("n_buf 5\n"), Err(Error::Parse { line: 1, .. })));
        assert!(matches!(parse_config("\n\nn_buf = five\n"), Err(Error::Parse { line: 3, .. })));
        assert!(parse_config("n_buf = 0\n").is_err());
    }
}
