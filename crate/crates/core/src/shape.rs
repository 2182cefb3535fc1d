//! Point-distribution shape model: a similarity transform applied to the
//! Procrustes mean plus a linear combination of shape modes.
//!
//! Parameters are laid out as `[scale, rotation, tx, ty, q_0, …, q_{r-1}]`
//! with rotation in radians and `q` the non-rigid mode coefficients.

use nalgebra::{DMatrix, DVector, Vector2};
use serde::{Deserialize, Serialize};

use crate::error::{ensure_dim, Error, Result};
use crate::geometry::{fit_similarity, procrustes_align, Interocular, Shape, SimilarityTransform};
use crate::subspace::{pca_fit, PcaSubspace, RankRule};

/// Number of rigid parameters ahead of the mode coefficients.
pub const RIGID_PARAMS: usize = 4;

/// Statistical shape model over Procrustes-normalized shapes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShapeModel {
    subspace: PcaSubspace,
    eyes: Interocular,
}

impl ShapeModel {
    pub fn new(subspace: PcaSubspace, eyes: Interocular) -> Result<Self> {
        if subspace.dim() % 2 != 0 || subspace.dim() < 6 {
            return Err(Error::InvalidInput(format!("shape subspace dimension {} is not 2·L with L ≥ 3", subspace.dim())));
        }
        let n = subspace.dim() / 2;
        if eyes.left >= n || eyes.right >= n || eyes.left == eyes.right {
            return Err(Error::InvalidInput("interocular indices out of range".into()));
        }
        Ok(Self { subspace, eyes })
    }

    /// Procrustes-aligns `shapes` and fits the mode subspace.
    pub fn train(shapes: &[Shape], eyes: Interocular, rule: RankRule) -> Result<Self> {
        let aligned = procrustes_align(shapes, eyes)?;
        let data = DMatrix::from_columns(
            &aligned
                .transforms
                .iter()
                .zip(shapes)
                .map(|(t, s)| DVector::from_vec(s.transformed(t).to_interleaved()))
                .collect::<Vec<_>>(),
        );
        Self::new(pca_fit(&data, rule)?, eyes)
    }

    pub fn subspace(&self) -> &PcaSubspace {
        &self.subspace
    }

    pub fn eyes(&self) -> Interocular {
        self.eyes
    }

    pub fn landmark_count(&self) -> usize {
        self.subspace.dim() / 2
    }

    pub fn mode_count(&self) -> usize {
        self.subspace.rank()
    }

    pub fn param_count(&self) -> usize {
        RIGID_PARAMS + self.mode_count()
    }

    /// The mean shape in the normalized frame.
    pub fn reference(&self) -> Shape {
        Shape::from_interleaved(self.subspace.mean().as_slice()).expect("mean is a valid shape")
    }

    /// Replaces the mode subspace, keeping the interocular definition.
    pub fn with_subspace(&self, subspace: PcaSubspace) -> Result<Self> {
        ensure_dim("shape subspace dimension", self.subspace.dim(), subspace.dim())?;
        Self::new(subspace, self.eyes)
    }

    /// Per-parameter variance of the training distribution of the mode
    /// coefficients (`σ_i² / m`).
    pub fn mode_variances(&self) -> DVector<f64> {
        let m = self.subspace.effective_count().max(1.0);
        self.subspace.singular_values().map(|s| s * s / m)
    }

    /// Similarity part of a parameter vector.
    pub fn pose(&self, params: &DVector<f64>) -> Result<SimilarityTransform> {
        ensure_dim("shape parameters", self.param_count(), params.len())?;
        SimilarityTransform::new(params[0], params[1], Vector2::new(params[2], params[3]))
    }

    /// Shape in the normalized frame for the non-rigid part of `params`.
    pub fn local_shape(&self, params: &DVector<f64>) -> Result<Shape> {
        ensure_dim("shape parameters", self.param_count(), params.len())?;
        let q = params.rows(RIGID_PARAMS, self.mode_count()).into_owned();
        let v = self.subspace.reconstruct(&q)?;
        Shape::from_interleaved(v.as_slice())
    }

    /// Image-space landmarks for a parameter vector.
    pub fn shape_from_params(&self, params: &DVector<f64>) -> Result<Shape> {
        if params.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("shape parameters"));
        }
        let pose = self.pose(params)?;
        Ok(self.local_shape(params)?.transformed(&pose))
    }

    /// Parameters whose shape best matches `shape` in the least-squares sense,
    /// by alternating the similarity fit and the mode projection.
    pub fn params_from_shape(&self, shape: &Shape) -> Result<DVector<f64>> {
        ensure_dim("shape landmark count", self.landmark_count(), shape.len())?;
        let r = self.mode_count();
        let mut q = DVector::zeros(r);
        let mut pose = SimilarityTransform::identity();
        for _ in 0..50 {
            let local = Shape::from_interleaved(self.subspace.reconstruct(&q)?.as_slice())?;
            pose = fit_similarity(&local, shape)?;
            let normalized = shape.transformed(&pose.inverse());
            let next = self.subspace.project(&DVector::from_vec(normalized.to_interleaved()))?;
            let delta = (&next - &q).amax();
            q = next;
            if delta < 1e-12 {
                break;
            }
        }
        let mut p = DVector::zeros(RIGID_PARAMS + r);
        p[0] = pose.scale;
        p[1] = pose.rotation;
        p[2] = pose.translation.x;
        p[3] = pose.translation.y;
        p.rows_mut(RIGID_PARAMS, r).copy_from(&q);
        Ok(p)
    }

    /// Similarity-normalizes `shape` onto the model reference, the frame in
    /// which the shape subspace lives.
    pub fn normalize(&self, shape: &Shape) -> Result<Shape> {
        let t = fit_similarity(shape, &self.reference())?;
        Ok(shape.transformed(&t))
    }
}

/// Wraps a rotation angle into `(-π, π]`.
pub fn wrap_angle(a: f64) -> f64 {
    let two_pi = std::f64::consts::TAU;
    let mut w = a.rem_euclid(two_pi);
    if w > std::f64::consts::PI {
        w -= two_pi;
    }
    w
}
