//! Batch PCA and the sequential Karhunen-Loeve (SKL) incremental update.
//!
//! A [`PcaSubspace`] keeps only the mean, the left singular vectors and the
//! singular values of the centered observations seen so far. The right
//! singular vectors are never stored, so memory is `O(d·r)` regardless of how
//! many observations produced the subspace.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{ensure_dim, Error, Result};
use crate::linalg;

/// Default cumulative energy retained when choosing the rank.
pub const DEFAULT_ENERGY: f64 = 0.98;

/// Singular values below this fraction of the largest are treated as zero.
const RELATIVE_ZERO: f64 = 1e-12;
/// Residual-norm fraction below which a new direction counts as already spanned.
const ORTHO_DROP: f64 = 1e-10;

/// How many components a fit or update keeps.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RankRule {
    /// Smallest rank whose cumulative squared singular values reach this
    /// fraction of the total.
    pub energy: f64,
    /// Hard cap applied after the energy rule.
    pub max_rank: Option<usize>,
    /// Exact rank (overrides the energy rule, still limited by numerical rank).
    pub fixed_rank: Option<usize>,
}

impl RankRule {
    pub fn energy(energy: f64) -> Self {
        Self {
            energy,
            max_rank: None,
            fixed_rank: None,
        }
    }

    pub fn fixed(rank: usize) -> Self {
        Self {
            energy: 1.0,
            max_rank: None,
            fixed_rank: Some(rank),
        }
    }

    pub fn with_max_rank(mut self, max_rank: Option<usize>) -> Self {
        self.max_rank = max_rank;
        self
    }

    fn validate(&self) -> Result<()> {
        if !(self.energy > 0.0 && self.energy <= 1.0) {
            return Err(Error::InvalidInput(format!("energy fraction must lie in (0, 1], got {}", self.energy)));
        }
        Ok(())
    }

    /// Number of leading singular values to keep. `scale` is the magnitude
    /// of the raw data; singular values that are rounding noise relative to
    /// it count as zero.
    fn select(&self, sigma: &DVector<f64>, scale: f64) -> usize {
        let max = sigma.iter().cloned().fold(0.0, f64::max);
        let floor = RELATIVE_ZERO * max.max(scale);
        if max <= floor {
            return 0;
        }
        let numerical = sigma.iter().take_while(|&&s| s > floor).count();
        if let Some(r) = self.fixed_rank {
            return r.min(numerical);
        }
        if self.energy >= 1.0 {
            return self.max_rank.map_or(numerical, |cap| numerical.min(cap));
        }
        let total: f64 = sigma.iter().take(numerical).map(|s| s * s).sum();
        let target = self.energy * total * (1.0 - 1e-12);
        let mut acc = 0.0;
        let mut rank = numerical;
        for (i, s) in sigma.iter().take(numerical).enumerate() {
            acc += s * s;
            if acc >= target {
                rank = i + 1;
                break;
            }
        }
        match self.max_rank {
            Some(cap) => rank.min(cap),
            None => rank,
        }
    }
}

impl Default for RankRule {
    fn default() -> Self {
        Self::energy(DEFAULT_ENERGY)
    }
}

/// Mean, orthonormal basis and singular values of a set of observations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PcaSubspace {
    mean: DVector<f64>,
    basis: DMatrix<f64>,
    singular_values: DVector<f64>,
    observation_count: usize,
    /// Observation weight after forgetting; equals `observation_count` when
    /// the forgetting factor has always been 1.
    effective_count: f64,
    rule: RankRule,
}

/// New observations as the columns of a `d × n` matrix.
#[derive(Debug, Clone)]
pub struct ObservationBatch {
    columns: DMatrix<f64>,
}

impl ObservationBatch {
    pub fn new(columns: DMatrix<f64>) -> Result<Self> {
        if columns.ncols() == 0 {
            return Err(Error::InvalidInput("observation batch is empty".into()));
        }
        if columns.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("observation batch"));
        }
        Ok(Self { columns })
    }

    pub fn from_columns(cols: &[DVector<f64>]) -> Result<Self> {
        if cols.is_empty() {
            return Err(Error::InvalidInput("observation batch is empty".into()));
        }
        Self::new(DMatrix::from_columns(cols))
    }

    pub fn columns(&self) -> &DMatrix<f64> {
        &self.columns
    }

    pub fn len(&self) -> usize {
        self.columns.ncols()
    }

    pub fn is_empty(&self) -> bool {
        self.columns.ncols() == 0
    }

    pub fn dim(&self) -> usize {
        self.columns.nrows()
    }
}

impl PcaSubspace {
    /// Assembles a subspace from stored parts, checking every invariant.
    pub fn from_parts(
        mean: DVector<f64>,
        basis: DMatrix<f64>,
        singular_values: DVector<f64>,
        observation_count: usize,
        effective_count: f64,
        rule: RankRule,
    ) -> Result<Self> {
        rule.validate()?;
        ensure_dim("subspace basis rows", mean.len(), basis.nrows())?;
        ensure_dim("subspace singular values", basis.ncols(), singular_values.len())?;
        if observation_count == 0 || !(effective_count > 0.0) {
            return Err(Error::InvalidInput("a subspace needs at least one observation".into()));
        }
        if mean.iter().chain(basis.iter()).chain(singular_values.iter()).any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("subspace parameters"));
        }
        if singular_values.iter().any(|&s| !(s > 0.0)) {
            return Err(Error::InvalidInput("singular values must be positive".into()));
        }
        if singular_values.as_slice().windows(2).any(|w| w[1] > w[0]) {
            return Err(Error::InvalidInput("singular values must be non-increasing".into()));
        }
        let sub = Self {
            mean,
            basis,
            singular_values,
            observation_count,
            effective_count,
            rule,
        };
        if sub.orthonormality_error() > 1e-8 {
            return Err(Error::InvalidInput("subspace basis is not orthonormal".into()));
        }
        Ok(sub)
    }

    /// Rank-0 subspace holding a single observation.
    pub fn single(observation: DVector<f64>, rule: RankRule) -> Result<Self> {
        let d = observation.len();
        Self::from_parts(observation, DMatrix::zeros(d, 0), DVector::zeros(0), 1, 1.0, rule)
    }

    pub fn mean(&self) -> &DVector<f64> {
        &self.mean
    }

    pub fn basis(&self) -> &DMatrix<f64> {
        &self.basis
    }

    pub fn singular_values(&self) -> &DVector<f64> {
        &self.singular_values
    }

    pub fn observation_count(&self) -> usize {
        self.observation_count
    }

    pub fn effective_count(&self) -> f64 {
        self.effective_count
    }

    pub fn rank_rule(&self) -> RankRule {
        self.rule
    }

    /// Same subspace, different truncation rule for future updates.
    pub fn with_rank_rule(mut self, rule: RankRule) -> Self {
        self.rule = rule;
        self
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn rank(&self) -> usize {
        self.basis.ncols()
    }

    /// Largest entry of `|basisᵀ·basis − I|`.
    pub fn orthonormality_error(&self) -> f64 {
        let g = self.basis.tr_mul(&self.basis);
        let r = g.nrows();
        (g - DMatrix::<f64>::identity(r, r)).amax()
    }

    /// `basisᵀ (observation − mean)`.
    pub fn project(&self, observation: &DVector<f64>) -> Result<DVector<f64>> {
        ensure_dim("projection observation", self.dim(), observation.len())?;
        Ok(self.basis.tr_mul(&(observation - &self.mean)))
    }

    /// `mean + basis · coeffs`.
    pub fn reconstruct(&self, coeffs: &DVector<f64>) -> Result<DVector<f64>> {
        ensure_dim("reconstruction coefficients", self.rank(), coeffs.len())?;
        Ok(&self.mean + &self.basis * coeffs)
    }
}

/// Fits a subspace to the columns of `data` (`d × m`, `m ≥ 2`).
///
/// All-equal columns yield a rank-0 subspace with a valid mean.
pub fn pca_fit(data: &DMatrix<f64>, rule: RankRule) -> Result<PcaSubspace> {
    rule.validate()?;
    let m = data.ncols();
    if m < 2 {
        return Err(Error::InvalidInput(format!("PCA needs at least 2 observations, got {m}")));
    }
    if data.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("PCA data"));
    }
    let mean = data.column_mean();
    let mut centered = data.clone();
    for mut col in centered.column_iter_mut() {
        col -= &mean;
    }
    let (u, sigma) = linalg::sorted_svd_left(centered)?;
    let rank = rule.select(&sigma, data.norm());
    let mut basis = u.columns(0, rank).into_owned();
    linalg::canonicalize_signs(&mut basis);
    Ok(PcaSubspace {
        mean,
        basis,
        singular_values: sigma.rows(0, rank).into_owned(),
        observation_count: m,
        effective_count: m as f64,
        rule,
    })
}

/// Sequential Karhunen-Loeve update with a batch of new observations.
///
/// `forgetting` in (0, 1] down-weights the existing singular values and
/// observation weight before the merge; 1 gives the exact update.
pub fn skl_update(state: &PcaSubspace, batch: &ObservationBatch, forgetting: f64) -> Result<PcaSubspace> {
    ensure_dim("SKL batch dimension", state.dim(), batch.dim())?;
    if !(forgetting > 0.0 && forgetting <= 1.0) {
        return Err(Error::InvalidInput(format!("forgetting factor must lie in (0, 1], got {forgetting}")));
    }
    let obs = batch.columns();
    let n = obs.ncols();
    let nf = n as f64;
    let m = forgetting * state.effective_count;

    // Mean-corrected augmented batch: centered new columns plus the scaled
    // mean-difference column that accounts for the shift between old and new means.
    let batch_mean = obs.column_mean();
    let mut augmented = DMatrix::zeros(state.dim(), n + 1);
    for j in 0..n {
        let mut col = augmented.column_mut(j);
        col.copy_from(&obs.column(j));
        col -= &batch_mean;
    }
    let shift = (m * nf / (m + nf)).sqrt();
    augmented.set_column(n, &((&batch_mean - &state.mean) * shift));

    let u = &state.basis;
    let r = u.ncols();
    let in_span = u.tr_mul(&augmented);
    let residual = &augmented - u * &in_span;
    let e = linalg::orthonormal_complement(u, &residual, ORTHO_DROP);
    let k = e.ncols();

    // Small middle factor [[fΣ, Uᵀ T̂], [0, Eᵀ(T̂ − UUᵀT̂)]].
    let mut middle = DMatrix::zeros(r + k, r + n + 1);
    for i in 0..r {
        middle[(i, i)] = forgetting * state.singular_values[i];
    }
    middle.view_mut((0, r), (r, n + 1)).copy_from(&in_span);
    if k > 0 {
        middle.view_mut((r, r), (k, n + 1)).copy_from(&e.tr_mul(&residual));
    }
    let (u_small, sigma) = linalg::sorted_svd_left(middle)?;
    let scale = obs.norm() + state.mean.norm() * m.sqrt();
    let rank = state.rule.select(&sigma, scale);
    let rotation = u_small.columns(0, rank);

    let mut basis = u * rotation.rows(0, r);
    if k > 0 {
        basis += &e * rotation.rows(r, k);
    }
    linalg::canonicalize_signs(&mut basis);

    let mean = (&state.mean * m + &batch_mean * nf) / (m + nf);
    Ok(PcaSubspace {
        mean,
        basis,
        singular_values: sigma.rows(0, rank).into_owned(),
        observation_count: state.observation_count + n,
        effective_count: m + nf,
        rule: state.rule,
    })
}
