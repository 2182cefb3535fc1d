//! The complete offline model and its training pipeline.

use std::sync::Arc;

use nalgebra::DVector;
use rayon::prelude::*;

use crate::appearance::{build_appearance_subspaces, train_patch_experts, AppearanceModel, CrossValidation, ExpertTraining, ScoredImage, DEFAULT_SUPPORT};
use crate::cascade::{train_cascade, AdaptiveStage, CascadeTraining, PerturbationModel, SCALE_STD, ROTATION_STD, TRANSLATION_STD};
use crate::error::{ensure_dim, Error, Result};
use crate::evaluator::{generate_samples, train_evaluator, EvaluatorNet, EvaluatorTraining, SampleGeneration};
use crate::geometry::{Interocular, Shape};
use crate::hog::HogLayout;
use crate::image::ImagePlane;
use crate::shape::ShapeModel;
use crate::subspace::{PcaSubspace, RankRule, DEFAULT_ENERGY};

/// Everything the tracker runs with. Subspace ranks are pinned so online
/// updates never change the parameter or feature dimensions.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelSet {
    pub shape: ShapeModel,
    pub appearance: AppearanceModel,
    pub stages: Vec<AdaptiveStage>,
    pub perturbation: PerturbationModel,
    pub evaluator: EvaluatorNet,
}

impl ModelSet {
    /// Assembles a model set after checking that all components agree on
    /// landmark count, feature length and parameter length.
    pub fn new(shape: ShapeModel, appearance: AppearanceModel, stages: Vec<AdaptiveStage>, perturbation: PerturbationModel, evaluator: EvaluatorNet) -> Result<Self> {
        ensure_dim("appearance landmark count", shape.landmark_count(), appearance.landmark_count())?;
        if stages.is_empty() {
            return Err(Error::InvalidInput("model set needs at least one cascade stage".into()));
        }
        if perturbation.stages() < stages.len() {
            return Err(Error::InvalidInput("perturbation model has fewer stages than the cascade".into()));
        }
        ensure_dim("perturbation length", shape.param_count(), perturbation.variances()[0].len())?;
        for s in &stages {
            ensure_dim("regressor feature length", appearance.dim(), s.stage.feature_dim())?;
            ensure_dim("regressor output length", shape.param_count(), s.stage.param_dim())?;
        }
        Ok(Self {
            shape,
            appearance,
            stages,
            perturbation,
            evaluator,
        })
    }

    pub fn score(&self, image: Arc<ImagePlane>) -> Result<ScoredImage> {
        self.appearance.score(image)
    }
}

/// Offline training settings.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub eyes: Interocular,
    pub layout: HogLayout,
    pub support: usize,
    pub experts: ExpertTraining,
    pub shape_energy: f64,
    pub appearance_energy: f64,
    pub appearance_max_rank: Option<usize>,
    /// Perturbed response maps per image for the appearance subspaces.
    pub appearance_samples: usize,
    pub scale_std: f64,
    pub rotation_std: f64,
    pub translation_std: f64,
    pub cascade: CascadeTraining,
    pub evaluator_samples: SampleGeneration,
    pub evaluator: EvaluatorTraining,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            eyes: Interocular::default(),
            layout: HogLayout::default(),
            support: DEFAULT_SUPPORT,
            experts: ExpertTraining::default(),
            shape_energy: DEFAULT_ENERGY,
            appearance_energy: DEFAULT_ENERGY,
            appearance_max_rank: None,
            appearance_samples: 10,
            scale_std: SCALE_STD,
            rotation_std: ROTATION_STD,
            translation_std: TRANSLATION_STD,
            cascade: CascadeTraining::default(),
            evaluator_samples: SampleGeneration::default(),
            evaluator: EvaluatorTraining::default(),
            seed: 0x5eed_0003,
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainingReport {
    pub expert_validation: Vec<CrossValidation>,
    /// Mean Norm RMSE of the cascade training samples before and after each stage.
    pub cascade_residuals: Vec<f64>,
    pub evaluator_losses: Vec<f64>,
    pub shape_modes: usize,
    pub appearance_dim: usize,
}

/// Pins a subspace to its current rank for later online updates.
fn pinned(s: PcaSubspace) -> PcaSubspace {
    let r = s.rank();
    s.with_rank_rule(RankRule::fixed(r))
}

/// Trains patch experts, shape and appearance subspaces, the cascade and the
/// evaluator from annotated images.
pub fn train_models(data: &[(ImagePlane, Shape)], cfg: &TrainConfig) -> Result<(ModelSet, TrainingReport)> {
    if data.len() < 2 {
        return Err(Error::InvalidInput("training needs at least two annotated images".into()));
    }
    let shapes: Vec<Shape> = data.iter().map(|(_, s)| s.clone()).collect();
    let shape_model = ShapeModel::train(&shapes, cfg.eyes, RankRule::energy(cfg.shape_energy))?;
    let shape_model = shape_model.with_subspace(pinned(shape_model.subspace().clone()))?;

    let trained = train_patch_experts(data, &cfg.layout, cfg.support, &cfg.experts)?;
    let (experts, validation): (Vec<_>, Vec<_>) = trained.into_iter().unzip();

    let truths: Vec<DVector<f64>> = shapes.par_iter().map(|s| shape_model.params_from_shape(s)).collect::<Result<_>>()?;
    let initial = PerturbationModel::initial(&shape_model, cfg.scale_std, cfg.rotation_std, cfg.translation_std)?;
    let empty: Vec<PcaSubspace> = (0..experts.len()).map(|_| PcaSubspace::single(DVector::zeros(cfg.support * cfg.support), RankRule::default())).collect::<Result<_>>()?;
    let scaffold = AppearanceModel::new(cfg.layout, cfg.support, experts, empty)?;
    let scored: Vec<ScoredImage> = data.par_iter().map(|(img, _)| scaffold.score(Arc::new(img.clone()))).collect::<Result<_>>()?;

    let rule = RankRule::energy(cfg.appearance_energy).with_max_rank(cfg.appearance_max_rank);
    let subspaces = build_appearance_subspaces(&scored, &truths, &shape_model, cfg.support, &initial, cfg.appearance_samples, cfg.seed, rule)?;
    let appearance = scaffold.with_subspaces(subspaces.into_iter().map(pinned).collect())?;

    let pairs: Vec<(ScoredImage, DVector<f64>)> = scored.into_iter().zip(truths).collect();
    let cascade = train_cascade(&pairs, &shape_model, &appearance, &initial, &cfg.cascade)?;
    drop(pairs);

    let samples = generate_samples(data, &shape_model, &initial, &cfg.evaluator_samples)?;
    let (evaluator, evaluator_losses) = train_evaluator(&samples, &cfg.evaluator)?;

    let report = TrainingReport {
        expert_validation: validation,
        cascade_residuals: cascade.residuals.clone(),
        evaluator_losses,
        shape_modes: shape_model.mode_count(),
        appearance_dim: appearance.dim(),
    };
    let models = ModelSet::new(shape_model, appearance, cascade.stages, cascade.perturbation, evaluator)?;
    Ok((models, report))
}
