//! Cascaded linear regression over appearance vectors, with per-stage
//! incremental adaptation.
//!
//! Each stage maps the augmented appearance vector `x̃ = [x, 1]` to a
//! parameter update through `R̃` (the last row is the bias). Stages keep the
//! regularized inverse Gram matrix `P = (x̃ᵀx̃ + λI)⁻¹` of their training data so
//! that new rows can be folded in by a Woodbury update that only inverts an
//! `n × n` matrix.

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::appearance::{AppearanceModel, ScoredImage};
use crate::error::{ensure_dim, Error, Result};
use crate::geometry::norm_rmse;
use crate::linalg;
use crate::shape::{ShapeModel, RIGID_PARAMS};

/// Default standard deviation of the scale perturbation.
pub const SCALE_STD: f64 = 0.1;
/// Default standard deviation of the rotation perturbation (radians).
pub const ROTATION_STD: f64 = 10.0 * std::f64::consts::PI / 180.0;
/// Default standard deviation of the translation perturbation (pixels).
pub const TRANSLATION_STD: f64 = 10.0;
/// Floor applied to estimated per-stage variances.
pub const VARIANCE_FLOOR: f64 = 1e-6;
/// Default ridge strength relative to the mean diagonal of `x̃ᵀx̃`.
pub const DEFAULT_RELATIVE_LAMBDA: f64 = 1e-2;
/// Woodbury systems with a worse condition number are rejected.
pub const MAX_CONDITION: f64 = 1e12;

/// Diagonal Gaussian perturbation covariance for every stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PerturbationModel {
    variances: Vec<DVector<f64>>,
}

impl PerturbationModel {
    pub fn new(variances: Vec<DVector<f64>>) -> Result<Self> {
        if variances.is_empty() {
            return Err(Error::InvalidInput("perturbation model needs at least one stage".into()));
        }
        let len = variances[0].len();
        for v in &variances {
            ensure_dim("perturbation variance length", len, v.len())?;
            if v.iter().any(|x| !(x.is_finite() && *x >= 0.0)) {
                return Err(Error::InvalidInput("perturbation variances must be finite and non-negative".into()));
            }
        }
        Ok(Self { variances })
    }

    /// Stage-0 model: rigid standard deviations plus the training variance of
    /// every shape mode.
    pub fn initial(shape_model: &ShapeModel, scale_std: f64, rotation_std: f64, translation_std: f64) -> Result<Self> {
        let modes = shape_model.mode_variances();
        let mut v = DVector::zeros(RIGID_PARAMS + modes.len());
        v[0] = scale_std * scale_std;
        v[1] = rotation_std * rotation_std;
        v[2] = translation_std * translation_std;
        v[3] = translation_std * translation_std;
        v.rows_mut(RIGID_PARAMS, modes.len()).copy_from(&modes);
        Self::new(vec![v])
    }

    pub fn default_for(shape_model: &ShapeModel) -> Result<Self> {
        Self::initial(shape_model, SCALE_STD, ROTATION_STD, TRANSLATION_STD)
    }

    pub fn stages(&self) -> usize {
        self.variances.len()
    }

    pub fn variance(&self, stage: usize) -> Option<&DVector<f64>> {
        self.variances.get(stage)
    }

    pub fn variances(&self) -> &[DVector<f64>] {
        &self.variances
    }

    /// Every variance multiplied by `factor`.
    pub fn inflated(&self, factor: f64) -> Self {
        Self {
            variances: self.variances.iter().map(|v| v * factor).collect(),
        }
    }

    /// `count` draws from `N(truth, Λ^stage)`; bit-identical for a given seed.
    pub fn sample(&self, truth: &DVector<f64>, stage: usize, count: usize, seed: u64) -> Result<Vec<DVector<f64>>> {
        let var = self
            .variances
            .get(stage)
            .ok_or_else(|| Error::InvalidInput(format!("stage {stage} out of range ({} stages)", self.variances.len())))?;
        ensure_dim("perturbation truth length", var.len(), truth.len())?;
        let std = var.map(f64::sqrt);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Ok((0..count)
            .map(|_| {
                DVector::from_fn(truth.len(), |i, _| {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    truth[i] + std[i] * z
                })
            })
            .collect())
    }
}

/// One regressor of the cascade.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CascadeStage {
    /// `(D + 1) × r_p`; the last row is the bias.
    pub regressor: DMatrix<f64>,
    pub lambda: f64,
}

impl CascadeStage {
    pub fn feature_dim(&self) -> usize {
        self.regressor.nrows() - 1
    }

    pub fn param_dim(&self) -> usize {
        self.regressor.ncols()
    }

    /// Parameter update `x R + b` for an appearance vector `x`.
    pub fn update(&self, x: &DVector<f64>) -> Result<DVector<f64>> {
        ensure_dim("stage feature length", self.feature_dim(), x.len())?;
        let d = self.feature_dim();
        let r = self.regressor.rows(0, d);
        let mut out = r.tr_mul(x);
        out += self.regressor.row(d).transpose();
        Ok(out)
    }
}

/// A stage together with its cached inverse Gram matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdaptiveStage {
    pub stage: CascadeStage,
    /// `(x̃ᵀx̃ + λI)⁻¹`, `(D + 1) × (D + 1)`.
    pub inverse_gram: DMatrix<f64>,
}

impl AdaptiveStage {
    pub fn new(stage: CascadeStage, inverse_gram: DMatrix<f64>) -> Result<Self> {
        let n = stage.regressor.nrows();
        ensure_dim("inverse Gram rows", n, inverse_gram.nrows())?;
        ensure_dim("inverse Gram cols", n, inverse_gram.ncols())?;
        if stage.regressor.iter().chain(inverse_gram.iter()).any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("cascade stage"));
        }
        Ok(Self { stage, inverse_gram })
    }

    /// Expresses the stage in new feature and target coordinates, where old
    /// augmented features are `x̃ = T x̃'` and new targets are `y' = y S`
    /// (row vectors). Predictions are preserved exactly.
    ///
    /// For orthogonal `T` the cached inverse Gram equals that of re-solving
    /// the ridge problem on the transformed training data; otherwise it
    /// corresponds to the penalty `λ‖T⁻ᵀ r‖²` on each regressor column.
    pub fn reexpress(&self, t: &DMatrix<f64>, s: &DMatrix<f64>) -> Result<Self> {
        let n = self.inverse_gram.nrows();
        ensure_dim("feature transform size", n, t.nrows())?;
        ensure_dim("target transform rows", self.stage.param_dim(), s.nrows())?;
        let regressor = t.tr_mul(&self.stage.regressor) * s;
        let mut inverse_gram = t.tr_mul(&self.inverse_gram) * t;
        linalg::symmetrize(&mut inverse_gram);
        Self::new(
            CascadeStage {
                regressor,
                lambda: self.stage.lambda,
            },
            inverse_gram,
        )
    }
}

/// Result of folding a batch into a stage.
#[derive(Debug, Clone)]
pub struct StageAdaptation {
    pub stage: AdaptiveStage,
    pub accepted: bool,
    /// Condition number of `x̃_B P x̃_Bᵀ + I`.
    pub condition: f64,
}

/// Appends the bias column.
pub fn augment(x: &DMatrix<f64>) -> DMatrix<f64> {
    let (n, d) = x.shape();
    let mut out = DMatrix::from_element(n, d + 1, 1.0);
    out.columns_mut(0, d).copy_from(x);
    out
}

/// Absolute ridge strength for a relative one: `λ_rel · trace(x̃ᵀx̃) / (D + 1)`.
pub fn absolute_lambda(x_aug: &DMatrix<f64>, relative: f64) -> f64 {
    let trace = x_aug.norm_squared();
    let scaled = relative * trace / x_aug.ncols() as f64;
    if scaled > 0.0 {
        scaled
    } else {
        relative
    }
}

/// Closed-form stage from augmented features and targets.
pub fn solve_stage(x_aug: &DMatrix<f64>, targets: &DMatrix<f64>, lambda: f64) -> Result<AdaptiveStage> {
    let (regressor, inverse_gram) = linalg::ridge_solve(x_aug, targets, lambda)?;
    AdaptiveStage::new(CascadeStage { regressor, lambda }, inverse_gram)
}

/// Woodbury update of a stage with new rows `x̃_B` (`n × (D+1)`) and targets
/// `Δp_B` (`n × r_p`). The result equals the ridge solution over the old and
/// new rows together.
pub fn adapt_stage(stage: &AdaptiveStage, x_b: &DMatrix<f64>, dp_b: &DMatrix<f64>) -> Result<StageAdaptation> {
    let d1 = stage.inverse_gram.nrows();
    ensure_dim("online feature width", d1, x_b.ncols())?;
    ensure_dim("online target rows", x_b.nrows(), dp_b.nrows())?;
    ensure_dim("online target width", stage.stage.param_dim(), dp_b.ncols())?;
    if x_b.nrows() == 0 {
        return Err(Error::InvalidInput("online batch is empty".into()));
    }
    if x_b.iter().chain(dp_b.iter()).any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("online batch"));
    }
    let n = x_b.nrows();
    let p = &stage.inverse_gram;
    let k = p * x_b.transpose();
    let mut s = x_b * &k;
    for i in 0..n {
        s[(i, i)] += 1.0;
    }
    linalg::symmetrize(&mut s);
    let condition = linalg::spd_condition(&s);
    let rejected = StageAdaptation {
        stage: stage.clone(),
        accepted: false,
        condition,
    };
    if !(condition.is_finite() && condition <= MAX_CONDITION) {
        return Ok(rejected);
    }
    let p_b = match linalg::spd_inverse(&s) {
        Ok(m) => m,
        Err(_) => return Ok(rejected),
    };
    let gain = &k * p_b;
    let r = &stage.stage.regressor;
    let innovation = dp_b - x_b * r;
    let regressor = r + &gain * innovation;
    let mut inverse_gram = p - &gain * k.transpose();
    linalg::symmetrize(&mut inverse_gram);
    if regressor.iter().chain(inverse_gram.iter()).any(|v| !v.is_finite()) {
        return Ok(rejected);
    }
    Ok(StageAdaptation {
        stage: AdaptiveStage {
            stage: CascadeStage {
                regressor,
                lambda: stage.stage.lambda,
            },
            inverse_gram,
        },
        accepted: true,
        condition,
    })
}

/// Augmented appearance rows and parameter targets for perturbed samples
/// around `centers`.
pub fn stage_samples(
    frames: &[(&ScoredImage, &DVector<f64>)],
    shape_model: &ShapeModel,
    appearance: &AppearanceModel,
    perturbation: &PerturbationModel,
    stage: usize,
    per_frame: usize,
    seed: u64,
) -> Result<(DMatrix<f64>, DMatrix<f64>, Vec<DVector<f64>>)> {
    let rp = shape_model.param_count();
    let d = appearance.dim();
    let rows = frames.len() * per_frame;
    let mut x = DMatrix::from_element(rows, d + 1, 1.0);
    let mut y = DMatrix::zeros(rows, rp);
    let mut starts = Vec::with_capacity(rows);
    for (i, (scored, center)) in frames.iter().enumerate() {
        let samples = perturbation.sample(center, stage, per_frame, sample_seed(seed, stage, i))?;
        for (j, p) in samples.into_iter().enumerate() {
            let row = i * per_frame + j;
            let shape = shape_model.shape_from_params(&p)?;
            let a = appearance.appearance_vector(scored, &shape)?;
            x.view_mut((row, 0), (1, d)).copy_from(&a.transpose());
            y.set_row(row, &(*center - &p).transpose());
            starts.push(p);
        }
    }
    Ok((x, y, starts))
}

fn sample_seed(seed: u64, stage: usize, frame: usize) -> u64 {
    seed ^ (stage as u64 + 1).wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ (frame as u64).wrapping_mul(0xc2b2_ae3d_27d4_eb4f)
}

/// Settings for offline cascade training.
#[derive(Debug, Clone, PartialEq)]
pub struct CascadeTraining {
    pub stages: usize,
    pub samples_per_image: usize,
    pub relative_lambda: f64,
    pub seed: u64,
}

impl Default for CascadeTraining {
    fn default() -> Self {
        Self {
            stages: 3,
            samples_per_image: 10,
            relative_lambda: DEFAULT_RELATIVE_LAMBDA,
            seed: 0x5eed_0002,
        }
    }
}

/// Trained cascade plus training diagnostics.
#[derive(Debug, Clone)]
pub struct TrainedCascade {
    pub stages: Vec<AdaptiveStage>,
    pub perturbation: PerturbationModel,
    /// Mean Norm RMSE of the training samples before stage 0 and after each stage.
    pub residuals: Vec<f64>,
}

/// Trains the cascade on `(scored image, truth params)` pairs. Stages are
/// chained: stage `k` trains on the outputs of stage `k − 1`, and its sampling
/// covariance is the per-parameter second moment of those residuals.
pub fn train_cascade(
    data: &[(ScoredImage, DVector<f64>)],
    shape_model: &ShapeModel,
    appearance: &AppearanceModel,
    initial: &PerturbationModel,
    cfg: &CascadeTraining,
) -> Result<TrainedCascade> {
    if cfg.stages == 0 {
        return Err(Error::InvalidInput("cascade needs at least one stage".into()));
    }
    if data.is_empty() || cfg.samples_per_image == 0 {
        return Err(Error::InvalidInput("cascade training needs samples".into()));
    }
    if !(cfg.relative_lambda > 0.0) {
        return Err(Error::InvalidInput(format!("ridge strength must be positive, got {}", cfg.relative_lambda)));
    }
    let rp = shape_model.param_count();
    let eyes = shape_model.eyes();
    let per = cfg.samples_per_image;
    let frames: Vec<(&ScoredImage, &DVector<f64>)> = data.iter().map(|(s, p)| (s, p)).collect();
    let truths: Vec<_> = data.iter().map(|(_, p)| shape_model.shape_from_params(p)).collect::<Result<_>>()?;

    let stage0 = initial
        .variance(0)
        .ok_or_else(|| Error::InvalidInput("initial perturbation model is empty".into()))?
        .clone();
    ensure_dim("perturbation length", rp, stage0.len())?;
    let (mut x, _, mut current) = stage_samples(&frames, shape_model, appearance, initial, 0, per, cfg.seed)?;

    let mean_error = |params: &[DVector<f64>]| -> Result<f64> {
        let mut total = 0.0;
        for (row, p) in params.iter().enumerate() {
            total += norm_rmse(&shape_model.shape_from_params(p)?, &truths[row / per], eyes)?;
        }
        Ok(total / params.len() as f64)
    };

    let mut variances = vec![stage0];
    let mut stages = Vec::with_capacity(cfg.stages);
    let mut residuals = vec![mean_error(&current)?];
    for k in 0..cfg.stages {
        if k > 0 {
            let mut second = DVector::zeros(rp);
            for (row, p) in current.iter().enumerate() {
                second += (p - &data[row / per].1).map(|v| v * v);
            }
            second /= current.len() as f64;
            variances.push(second.map(|v| v.max(VARIANCE_FLOOR)));
            // Features at the chained positions.
            for (row, p) in current.iter().enumerate() {
                let shape = shape_model.shape_from_params(p)?;
                let a = appearance.appearance_vector(&data[row / per].0, &shape)?;
                x.view_mut((row, 0), (1, a.len())).copy_from(&a.transpose());
            }
        }
        let mut y = DMatrix::zeros(current.len(), rp);
        for (row, p) in current.iter().enumerate() {
            y.set_row(row, &(&data[row / per].1 - p).transpose());
        }
        let lambda = absolute_lambda(&x, cfg.relative_lambda);
        let stage = solve_stage(&x, &y, lambda)?;
        let step = &x * &stage.stage.regressor;
        for (row, p) in current.iter_mut().enumerate() {
            *p += step.row(row).transpose();
        }
        residuals.push(mean_error(&current)?);
        stages.push(stage);
    }
    Ok(TrainedCascade {
        stages,
        perturbation: PerturbationModel::new(variances)?,
        residuals,
    })
}

/// Runs every stage from `init`; returns the final parameters and the
/// parameters after each stage.
pub fn fit(
    scored: &ScoredImage,
    init: &DVector<f64>,
    stages: &[AdaptiveStage],
    shape_model: &ShapeModel,
    appearance: &AppearanceModel,
) -> Result<(DVector<f64>, Vec<DVector<f64>>)> {
    ensure_dim("initial parameters", shape_model.param_count(), init.len())?;
    let mut p = init.clone();
    let mut trajectory = Vec::with_capacity(stages.len());
    for stage in stages {
        let shape = shape_model.shape_from_params(&p).map_err(|e| match e {
            Error::NonFinite(_) | Error::InvalidInput(_) => Error::NumericFailure(format!("cascade produced invalid parameters: {e}")),
            other => other,
        })?;
        let x = appearance.appearance_vector(scored, &shape)?;
        p += stage.stage.update(&x)?;
        if p.iter().any(|v| !v.is_finite()) || !(p[0] > 0.0) {
            return Err(Error::NumericFailure("cascade produced invalid parameters".into()));
        }
        trajectory.push(p.clone());
    }
    Ok((p, trajectory))
}

/// Adapts every stage independently with perturbed samples around the
/// accepted fits. Stage `k` samples from `N(fitted, Λ^k)` with a seed derived
/// from `(seed, k)`, so the outcome does not depend on execution order.
pub fn adapt_all(
    stages: &[AdaptiveStage],
    frames: &[(&ScoredImage, &DVector<f64>)],
    shape_model: &ShapeModel,
    appearance: &AppearanceModel,
    perturbation: &PerturbationModel,
    samples_per_frame: usize,
    seed: u64,
) -> Result<Vec<StageAdaptation>> {
    if frames.is_empty() || samples_per_frame == 0 {
        return Ok(stages
            .iter()
            .map(|s| StageAdaptation {
                stage: s.clone(),
                accepted: true,
                condition: 1.0,
            })
            .collect());
    }
    if perturbation.stages() < stages.len() {
        return Err(Error::InvalidInput("perturbation model has fewer stages than the cascade".into()));
    }
    stages
        .par_iter()
        .enumerate()
        .map(|(k, stage)| {
            let (x, y, _) = stage_samples(frames, shape_model, appearance, perturbation, k, samples_per_frame, seed)?;
            adapt_stage(stage, &x, &y)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn random(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
        DMatrix::from_fn(rows, cols, |_, _| rng.random_range(-1.0..1.0))
    }

    fn stack(a: &DMatrix<f64>, b: &DMatrix<f64>) -> DMatrix<f64> {
        let mut out = DMatrix::zeros(a.nrows() + b.nrows(), a.ncols());
        out.rows_mut(0, a.nrows()).copy_from(a);
        out.rows_mut(a.nrows(), b.nrows()).copy_from(b);
        out
    }

    #[test]
    fn zero_variance_samples_equal_truth() {
        let m = PerturbationModel::new(vec![DVector::zeros(5)]).unwrap();
        let t = DVector::from_vec(vec![1.0, 0.1, 3.0, 4.0, -0.5]);
        for s in m.sample(&t, 0, 4, 7).unwrap() {
            assert_eq!(s, t);
        }
        assert!(m.sample(&t, 1, 1, 7).is_err());
    }

    #[test]
    fn sampling_is_seed_deterministic_and_matches_variance() {
        let var = DVector::from_vec(vec![0.01, 0.03, 100.0, 25.0]);
        let m = PerturbationModel::new(vec![var.clone()]).unwrap();
        let t = DVector::from_vec(vec![1.0, 0.0, 50.0, 60.0]);
        let a = m.sample(&t, 0, 10_000, 11).unwrap();
        assert_eq!(a, m.sample(&t, 0, 10_000, 11).unwrap());
        for i in 0..4 {
            let mean = a.iter().map(|s| s[i]).sum::<f64>() / a.len() as f64;
            let v = a.iter().map(|s| (s[i] - mean).powi(2)).sum::<f64>() / (a.len() - 1) as f64;
            assert!((v / var[i] - 1.0).abs() < 0.05, "coordinate {i}: {v} vs {}", var[i]);
        }
    }

    /// Planted linear model: with tiny λ the ridge solution recovers it.
    #[test]
    fn ridge_recovers_planted_regressor() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = augment(&random(200, 6, &mut rng));
        let truth = random(7, 3, &mut rng);
        let y = &x * &truth;
        let stage = solve_stage(&x, &y, 1e-10).unwrap();
        assert!((stage.stage.regressor - truth).amax() < 1e-6);
    }

    /// With λ much larger than the data, every coefficient, bias included,
    /// shrinks to zero because the penalty covers the bias row.
    #[test]
    fn huge_lambda_shrinks_to_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = augment(&random(50, 4, &mut rng));
        let y = random(50, 2, &mut rng).add_scalar(3.0);
        let stage = solve_stage(&x, &y, 1e12).unwrap();
        assert!(stage.stage.regressor.amax() < 1e-8);
        assert!(solve_stage(&x, &y, 0.0).is_err());
    }

    #[test]
    fn zero_row_adaptation_is_a_no_op() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = augment(&random(30, 5, &mut rng));
        let y = random(30, 2, &mut rng);
        let stage = solve_stage(&x, &y, 0.1).unwrap();
        let out = adapt_stage(&stage, &DMatrix::zeros(1, 6), &DMatrix::zeros(1, 2)).unwrap();
        assert!(out.accepted);
        assert!((out.stage.stage.regressor - &stage.stage.regressor).amax() < 1e-15);
        assert!((out.stage.inverse_gram - &stage.inverse_gram).amax() < 1e-15);
    }

    /// Oracle: batch ridge re-solve over the concatenated rows.
    #[test]
    fn adaptation_matches_batch_resolve_and_is_partition_free() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let xa = augment(&random(40, 6, &mut rng));
        let ya = random(40, 3, &mut rng);
        let xb = augment(&random(3, 6, &mut rng));
        let yb = random(3, 3, &mut rng);
        let xc = augment(&random(2, 6, &mut rng));
        let yc = random(2, 3, &mut rng);
        let lambda = 0.5;
        let offline = solve_stage(&xa, &ya, lambda).unwrap();
        let once = adapt_stage(&offline, &stack(&xb, &xc), &stack(&yb, &yc)).unwrap().stage;
        let b = adapt_stage(&offline, &xb, &yb).unwrap().stage;
        let twice = adapt_stage(&b, &xc, &yc).unwrap().stage;
        let batch = solve_stage(&stack(&stack(&xa, &xb), &xc), &stack(&stack(&ya, &yb), &yc), lambda).unwrap();
        assert!((&once.stage.regressor - &batch.stage.regressor).amax() < 1e-6);
        assert!((&twice.stage.regressor - &batch.stage.regressor).amax() < 1e-6);
        assert!((&twice.inverse_gram - &batch.inverse_gram).amax() < 1e-6);
        assert!(linalg::spd_condition(&twice.inverse_gram).is_finite());
    }

    #[test]
    fn ill_conditioned_batch_is_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = augment(&random(20, 3, &mut rng));
        let stage = solve_stage(&x, &random(20, 2, &mut rng), 1e-9).unwrap();
        let huge = DMatrix::from_element(2, 4, 1e12);
        let out = adapt_stage(&stage, &huge, &DMatrix::zeros(2, 2)).unwrap();
        assert!(!out.accepted);
        assert_eq!(out.stage, stage);
    }

    /// Oracle: re-expression equals a re-solve on transformed data.
    #[test]
    fn reexpression_matches_transformed_resolve() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let x = augment(&random(30, 4, &mut rng));
        let y = random(30, 3, &mut rng);
        let lambda = 0.3;
        let stage = solve_stage(&x, &y, lambda).unwrap();
        let q = random(5, 5, &mut rng).qr().q();
        let s = random(3, 3, &mut rng);
        let moved = stage.reexpress(&q, &s).unwrap();
        let direct = solve_stage(&(&x * &q), &(&y * &s), lambda).unwrap();
        assert!((moved.stage.regressor - direct.stage.regressor).amax() < 1e-10);
        assert!((moved.inverse_gram - direct.inverse_gram).amax() < 1e-10);
    }

    #[test]
    fn stage_update_uses_bias_row() {
        let stage = CascadeStage {
            regressor: DMatrix::from_row_slice(3, 2, &[1.0, 0.0, 0.0, 2.0, 0.5, -0.5]),
            lambda: 1.0,
        };
        let u = stage.update(&DVector::from_vec(vec![2.0, 3.0])).unwrap();
        assert_eq!(u, DVector::from_vec(vec![2.5, 5.5]));
        assert!(stage.update(&DVector::zeros(3)).is_err());
    }
}
