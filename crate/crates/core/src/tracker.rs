//! Frame-by-frame tracking with gated online adaptation.
//!
//! Each frame is fitted from the previous accepted parameters (or from a box
//! when the track is lost), judged by the evaluator, and, if aligned, queued.
//! A full queue triggers one adaptation: representation update, then
//! re-expression of everything that depends on the representation, then the
//! regressor update against the updated features. The new model set replaces
//! the old one in a single swap.

use std::sync::{Arc, RwLock};
use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::appearance::ScoredImage;
use crate::cascade::{adapt_all, fit, PerturbationModel};
use crate::error::{Error, Result};
use crate::evaluator::{evaluate_fitting, Label, DEFAULT_THRESHOLD};
use crate::geometry::{fit_similarity, norm_rmse, Shape};
use crate::image::ImagePlane;
use crate::linalg::polar_factor;
use crate::model::ModelSet;
use crate::shape::RIGID_PARAMS;
use crate::subspace::{skl_update, ObservationBatch, PcaSubspace};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AdaptMode {
    None,
    Rep,
    Fit,
    Both,
}

impl AdaptMode {
    pub fn updates_representation(self) -> bool {
        matches!(self, AdaptMode::Rep | AdaptMode::Both)
    }

    pub fn updates_fitting(self) -> bool {
        matches!(self, AdaptMode::Fit | AdaptMode::Both)
    }
}

impl std::str::FromStr for AdaptMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(AdaptMode::None),
            "rep" => Ok(AdaptMode::Rep),
            "fit" => Ok(AdaptMode::Fit),
            "both" => Ok(AdaptMode::Both),
            other => Err(Error::InvalidInput(format!("unknown adapt mode {other:?} (expected none, rep, fit or both)"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Verdict {
    Aligned,
    Misaligned,
    NotEvaluated,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Status {
    Tracking,
    Lost,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrackerConfig {
    pub adapt: AdaptMode,
    pub buffer_size: usize,
    /// Evaluate every `eval_stride`-th frame of a track; others are neither
    /// judged nor buffered.
    pub eval_stride: usize,
    pub threshold: f64,
    pub forgetting: f64,
    /// Perturbed samples per buffered frame for each regressor update.
    pub fit_samples: usize,
    /// Perturbed response maps per buffered frame for each subspace update.
    pub rep_samples: usize,
    pub seed: u64,
}

impl Default for TrackerConfig {
    fn default() -> Self {
        Self {
            adapt: AdaptMode::Both,
            buffer_size: 10,
            eval_stride: 1,
            threshold: DEFAULT_THRESHOLD,
            forgetting: 1.0,
            fit_samples: 10,
            rep_samples: 10,
            seed: 0x5eed_0004,
        }
    }
}

impl TrackerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.buffer_size == 0 || self.eval_stride == 0 {
            return Err(Error::InvalidInput("buffer size and evaluation stride must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.threshold) {
            return Err(Error::InvalidInput("threshold must lie in [0, 1]".into()));
        }
        if !(self.forgetting > 0.0 && self.forgetting <= 1.0) {
            return Err(Error::InvalidInput("forgetting factor must lie in (0, 1]".into()));
        }
        Ok(())
    }
}

/// Axis-aligned box used to (re)initialize a track.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InitBox {
    pub x: f64,
    pub y: f64,
    pub width: f64,
    pub height: f64,
}

impl InitBox {
    pub fn around(shape: &Shape) -> Self {
        let (lo, hi) = shape.bounds();
        Self {
            x: lo.x,
            y: lo.y,
            width: hi.x - lo.x,
            height: hi.y - lo.y,
        }
    }
}

/// Upright mean shape scaled and centered into `b`.
pub fn params_in_box(models: &ModelSet, b: &InitBox) -> Result<DVector<f64>> {
    let reference = models.shape.reference();
    let (lo, hi) = reference.bounds();
    let (rw, rh) = (hi.x - lo.x, hi.y - lo.y);
    if !(b.width > 0.0 && b.height > 0.0) || !(rw > 0.0 && rh > 0.0) {
        return Err(Error::DegenerateGeometry("empty initialization box".into()));
    }
    let s = 0.5 * (b.width / rw + b.height / rh);
    let mut p = DVector::zeros(models.shape.param_count());
    p[0] = s;
    p[2] = b.x + b.width / 2.0 - s * (lo.x + hi.x) / 2.0;
    p[3] = b.y + b.height / 2.0 - s * (lo.y + hi.y) / 2.0;
    Ok(p)
}

/// Shared, atomically replaceable model set. Readers take a snapshot and keep
/// using it while a writer swaps in a new one.
#[derive(Debug)]
pub struct SharedModels {
    inner: RwLock<Arc<ModelSet>>,
}

impl SharedModels {
    pub fn new(models: ModelSet) -> Self {
        Self {
            inner: RwLock::new(Arc::new(models)),
        }
    }

    pub fn snapshot(&self) -> Arc<ModelSet> {
        self.inner.read().unwrap_or_else(|e| e.into_inner()).clone()
    }

    pub fn swap(&self, models: ModelSet) -> Arc<ModelSet> {
        let mut guard = self.inner.write().unwrap_or_else(|e| e.into_inner());
        std::mem::replace(&mut *guard, Arc::new(models))
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Timing {
    pub fit_ms: f64,
    pub eval_ms: f64,
    pub adapt_ms: f64,
}

/// What one adaptation changed.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct AdaptReport {
    pub frames: usize,
    pub representation_updated: bool,
    pub stages_updated: usize,
    /// Components that kept their previous value, with the reason.
    pub rejected: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameResult {
    pub frame: usize,
    /// `None` when the frame was skipped because the track was lost.
    pub shape: Option<Shape>,
    pub rmse: Option<f64>,
    pub verdict: Verdict,
    pub confidence: Option<f64>,
    pub adapted: bool,
    pub adaptation: Option<AdaptReport>,
    pub status: Status,
    pub skipped: bool,
    pub timing: Timing,
}

impl FrameResult {
    pub fn to_json_line(&self) -> String {
        serde_json::to_string(self).expect("frame results serialize")
    }
}

struct Buffered {
    scored: Arc<ScoredImage>,
    params: DVector<f64>,
    shape: Shape,
}

pub struct TrackerState {
    previous: Option<DVector<f64>>,
    buffer: Vec<Buffered>,
    frame: usize,
    since_init: usize,
    status: Status,
    adaptations: usize,
}

impl TrackerState {
    pub fn previous(&self) -> Option<&DVector<f64>> {
        self.previous.as_ref()
    }

    pub fn buffered(&self) -> usize {
        self.buffer.len()
    }

    pub fn frame(&self) -> usize {
        self.frame
    }

    pub fn status(&self) -> Status {
        self.status
    }

    pub fn adaptations(&self) -> usize {
        self.adaptations
    }
}

pub struct Tracker {
    models: Arc<SharedModels>,
    cfg: TrackerConfig,
    state: TrackerState,
    /// Shape-model reference at construction; online shape observations are
    /// normalized onto it.
    reference: Shape,
}

impl Tracker {
    pub fn new(models: Arc<SharedModels>, cfg: TrackerConfig) -> Result<Self> {
        cfg.validate()?;
        let reference = models.snapshot().shape.reference();
        Ok(Self {
            models,
            cfg,
            reference,
            state: TrackerState {
                previous: None,
                buffer: Vec::new(),
                frame: 0,
                since_init: 0,
                status: Status::Lost,
                adaptations: 0,
            },
        })
    }

    pub fn models(&self) -> &Arc<SharedModels> {
        &self.models
    }

    pub fn config(&self) -> &TrackerConfig {
        &self.cfg
    }

    pub fn state(&self) -> &TrackerState {
        &self.state
    }

    /// Fits one frame. `init` is used only when there is no previous accepted
    /// fit; `truth` only feeds the reported error.
    pub fn process_frame(&mut self, image: ImagePlane, init: Option<InitBox>, truth: Option<&Shape>) -> Result<FrameResult> {
        let index = self.state.frame;
        self.state.frame += 1;
        let models = self.models.snapshot();
        let start = match (&self.state.previous, init) {
            (Some(p), _) => p.clone(),
            (None, Some(b)) => {
                self.state.since_init = 0;
                params_in_box(&models, &b)?
            }
            (None, None) => {
                self.state.status = Status::Lost;
                return Ok(FrameResult {
                    frame: index,
                    shape: None,
                    rmse: None,
                    verdict: Verdict::NotEvaluated,
                    confidence: None,
                    adapted: false,
                    adaptation: None,
                    status: Status::Lost,
                    skipped: true,
                    timing: Timing::default(),
                });
            }
        };

        let t0 = Instant::now();
        let scored = Arc::new(models.score(Arc::new(image))?);
        let fitted = fit(&scored, &start, &models.stages, &models.shape, &models.appearance);
        let (params, shape, failed) = match fitted {
            Ok((p, _)) => {
                let s = models.shape.shape_from_params(&p)?;
                (p, s, false)
            }
            Err(Error::NumericFailure(_)) => {
                let s = models.shape.shape_from_params(&start)?;
                (start.clone(), s, true)
            }
            Err(e) => return Err(e),
        };
        let fit_ms = t0.elapsed().as_secs_f64() * 1e3;

        let t1 = Instant::now();
        let judge = self.state.since_init % self.cfg.eval_stride == 0;
        self.state.since_init += 1;
        let (verdict, confidence) = if failed {
            (Verdict::Misaligned, Some(0.0))
        } else if judge {
            let e = evaluate_fitting(&models.evaluator, scored.image(), &shape, self.cfg.threshold)?;
            let v = match e.label {
                Label::Aligned => Verdict::Aligned,
                Label::Misaligned => Verdict::Misaligned,
            };
            (v, Some(e.confidence))
        } else {
            (Verdict::NotEvaluated, None)
        };
        let eval_ms = t1.elapsed().as_secs_f64() * 1e3;

        let mut adaptation = None;
        let mut adapt_ms = 0.0;
        match verdict {
            Verdict::Misaligned => {
                self.state.previous = None;
                self.state.status = Status::Lost;
            }
            Verdict::Aligned | Verdict::NotEvaluated => {
                self.state.previous = Some(params.clone());
                self.state.status = Status::Tracking;
                if verdict == Verdict::Aligned && self.cfg.adapt != AdaptMode::None {
                    self.state.buffer.push(Buffered { scored, params, shape: shape.clone() });
                    if self.state.buffer.len() >= self.cfg.buffer_size {
                        let t2 = Instant::now();
                        adaptation = Some(self.adapt()?);
                        adapt_ms = t2.elapsed().as_secs_f64() * 1e3;
                    }
                }
            }
        }
        let rmse = truth.map(|t| norm_rmse(&shape, t, models.shape.eyes())).transpose()?;
        Ok(FrameResult {
            frame: index,
            shape: Some(shape),
            rmse,
            verdict,
            confidence,
            adapted: adaptation.is_some(),
            adaptation,
            status: self.state.status,
            skipped: false,
            timing: Timing { fit_ms, eval_ms, adapt_ms },
        })
    }

    /// Adapts the models to the buffered frames and clears the buffer.
    pub fn adapt(&mut self) -> Result<AdaptReport> {
        let buffer = std::mem::take(&mut self.state.buffer);
        if buffer.is_empty() {
            return Err(Error::InvalidInput("adaptation needs buffered frames".into()));
        }
        let seed = self.cfg.seed ^ (self.state.adaptations as u64 + 1).wrapping_mul(0xa076_1d64_78bd_642f);
        self.state.adaptations += 1;
        let current = self.models.snapshot();
        let mut next = (*current).clone();
        let mut params: Vec<DVector<f64>> = buffer.iter().map(|b| b.params.clone()).collect();
        let mut report = AdaptReport {
            frames: buffer.len(),
            ..AdaptReport::default()
        };

        if self.cfg.adapt.updates_representation() {
            let shapes: Vec<Shape> = buffer.iter().map(|b| b.shape.clone()).collect();
            let scored: Vec<&ScoredImage> = buffer.iter().map(|b| b.scored.as_ref()).collect();
            let feature_map = self.update_appearance(&mut next, &scored, &params, seed, &mut report)?;
            let target_map = self.update_shape(&mut next, &shapes, &mut params, &mut report)?;
            let mut stages = Vec::with_capacity(next.stages.len());
            for s in &next.stages {
                stages.push(s.reexpress(&feature_map, &target_map)?);
            }
            next.stages = stages;
            report.representation_updated = true;
        }

        if self.cfg.adapt.updates_fitting() {
            let frames: Vec<(&ScoredImage, &DVector<f64>)> = buffer.iter().zip(&params).map(|(b, p)| (b.scored.as_ref(), p)).collect();
            let results = adapt_all(&next.stages, &frames, &next.shape, &next.appearance, &next.perturbation, self.cfg.fit_samples, seed)?;
            for (k, r) in results.into_iter().enumerate() {
                if r.accepted {
                    next.stages[k] = r.stage;
                    report.stages_updated += 1;
                } else {
                    report.rejected.push(format!("stage {k}: condition {:.3e}", r.condition));
                }
            }
        }

        let next = ModelSet::new(next.shape, next.appearance, next.stages, next.perturbation, next.evaluator)?;
        self.models.swap(next);
        Ok(report)
    }

    /// Folds perturbed response maps around the accepted fits into every
    /// appearance subspace. Returns the map from new to old augmented
    /// features.
    fn update_appearance(&self, next: &mut ModelSet, scored: &[&ScoredImage], params: &[DVector<f64>], seed: u64, report: &mut AdaptReport) -> Result<DMatrix<f64>> {
        let app = &next.appearance;
        let per = self.cfg.rep_samples.max(1);
        let mut starts = Vec::with_capacity(params.len());
        for (i, p) in params.iter().enumerate() {
            let draws = next.perturbation.sample(p, 0, per, seed.wrapping_add(0x51 * (i as u64 + 1)))?;
            starts.push(draws.iter().map(|d| next.shape.shape_from_params(d)).collect::<Result<Vec<_>>>()?);
        }
        let updated: Vec<Result<PcaSubspace>> = (0..app.landmark_count())
            .into_par_iter()
            .map(|l| {
                let mut cols = Vec::with_capacity(params.len() * per);
                for (img, shapes) in scored.iter().zip(&starts) {
                    for s in shapes {
                        cols.push(img.response_map(l, s.point(l), app.support)?.to_vector());
                    }
                }
                skl_update(&app.subspaces[l], &ObservationBatch::from_columns(&cols)?, self.cfg.forgetting)
            })
            .collect();
        let mut subspaces = Vec::with_capacity(updated.len());
        for (l, (u, old)) in updated.into_iter().zip(&app.subspaces).enumerate() {
            match u {
                Ok(s) if s.rank() == old.rank() => subspaces.push(s),
                Ok(s) => {
                    report.rejected.push(format!("appearance subspace {l}: rank {} → {}", old.rank(), s.rank()));
                    subspaces.push(old.clone());
                }
                Err(e) => {
                    report.rejected.push(format!("appearance subspace {l}: {e}"));
                    subspaces.push(old.clone());
                }
            }
        }
        let d = app.dim();
        let mut t = DMatrix::zeros(d + 1, d + 1);
        let mut offset = 0;
        for (old, new) in app.subspaces.iter().zip(&subspaces) {
            let r = old.rank();
            if r > 0 {
                let q = polar_factor(&old.basis().tr_mul(new.basis()))?;
                t.view_mut((offset, offset), (r, r)).copy_from(&q);
                let c = old.basis().tr_mul(&(new.mean() - old.mean()));
                t.view_mut((offset, d), (r, 1)).copy_from(&c);
            }
            offset += r;
        }
        t[(d, d)] = 1.0;
        next.appearance = next.appearance.with_subspaces(subspaces)?;
        Ok(t)
    }

    /// Folds the accepted shapes, normalized onto the original reference,
    /// into the shape subspace. Re-expresses `params`, the previous fit and
    /// the perturbation model in the new coordinates and returns the map
    /// from old to new parameter updates.
    fn update_shape(&mut self, next: &mut ModelSet, shapes: &[Shape], params: &mut [DVector<f64>], report: &mut AdaptReport) -> Result<DMatrix<f64>> {
        let rp = next.shape.param_count();
        let old = next.shape.subspace().clone();
        let cols = shapes
            .iter()
            .map(|s| Ok(DVector::from_vec(s.transformed(&fit_similarity(s, &self.reference)?).to_interleaved())))
            .collect::<Result<Vec<_>>>()?;
        let new = match skl_update(&old, &ObservationBatch::from_columns(&cols)?, self.cfg.forgetting) {
            Ok(s) if s.rank() == old.rank() => s,
            Ok(s) => {
                report.rejected.push(format!("shape subspace: rank {} → {}", old.rank(), s.rank()));
                return Ok(DMatrix::identity(rp, rp));
            }
            Err(e) => {
                report.rejected.push(format!("shape subspace: {e}"));
                return Ok(DMatrix::identity(rp, rp));
            }
        };
        let r = old.rank();
        let b = new.basis().tr_mul(old.basis());
        let shift = new.basis().tr_mul(&(old.mean() - new.mean()));
        let mut a = DMatrix::identity(rp, rp);
        a.view_mut((RIGID_PARAMS, RIGID_PARAMS), (r, r)).copy_from(&b);
        let map_params = |p: &DVector<f64>| -> DVector<f64> {
            let mut q = &a * p;
            let mut tail = q.rows_mut(RIGID_PARAMS, r);
            tail += &shift;
            q
        };
        params.iter_mut().for_each(|p| *p = map_params(p));
        if let Some(p) = self.state.previous.as_mut() {
            *p = map_params(p);
        }
        let variances = next
            .perturbation
            .variances()
            .iter()
            .map(|v| {
                let cov = &a * DMatrix::from_diagonal(v) * a.transpose();
                cov.diagonal()
            })
            .collect();
        next.perturbation = PerturbationModel::new(variances)?;
        next.shape = next.shape.with_subspace(new)?;
        Ok(a.transpose())
    }
}
