//! Patch experts, response maps and the per-landmark appearance subspaces.
//!
//! A patch expert scores a descriptor with `1 / (1 + exp(a·φ + b))`. Experts
//! are trained as ordinary logistic classifiers and stored with negated
//! weights, so that the true landmark position still gets a response near 1
//! under that sign convention.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector, Point2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cascade::PerturbationModel;
use crate::error::{ensure_dim, Error, Result};
use crate::geometry::Shape;
use crate::hog::{extract_features, DescriptorField, HogLayout};
use crate::image::ImagePlane;
use crate::shape::ShapeModel;
use crate::subspace::{pca_fit, PcaSubspace, RankRule};

/// Side of the square response-map window.
pub const DEFAULT_SUPPORT: usize = 21;
/// Ridge strengths tried by cross-validation.
pub const LAMBDA_GRID: [f64; 4] = [1e-3, 1e-2, 1e-1, 1.0];
/// Exponents are clamped here so responses stay strictly inside (0, 1).
const EXPONENT_LIMIT: f64 = 30.0;

#[inline]
fn response_of(z: f64) -> f64 {
    1.0 / (1.0 + z.clamp(-EXPONENT_LIMIT, EXPONENT_LIMIT).exp())
}

/// Linear scorer for one landmark.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatchExpert {
    pub landmark: usize,
    pub weights: DVector<f64>,
    pub bias: f64,
}

impl PatchExpert {
    pub fn new(landmark: usize, weights: DVector<f64>, bias: f64) -> Result<Self> {
        if weights.iter().any(|v| !v.is_finite()) || !bias.is_finite() {
            return Err(Error::NonFinite("patch expert"));
        }
        Ok(Self { landmark, weights, bias })
    }

    /// `a·φ + b`.
    pub fn exponent(&self, features: &[f64]) -> f64 {
        self.weights.iter().zip(features).map(|(w, f)| w * f).sum::<f64>() + self.bias
    }

    pub fn response(&self, features: &[f64]) -> f64 {
        response_of(self.exponent(features))
    }
}

/// Responses over a square window centered on a landmark estimate.
#[derive(Debug, Clone, PartialEq)]
pub struct ResponseMap {
    pub side: usize,
    pub center: Point2<f64>,
    /// Row-major, `grid[(dy + h) * side + (dx + h)]` for offsets in `-h..=h`.
    pub grid: Vec<f64>,
}

impl ResponseMap {
    pub fn to_vector(&self) -> DVector<f64> {
        DVector::from_column_slice(&self.grid)
    }

    pub fn at(&self, dx: isize, dy: isize) -> f64 {
        let h = (self.side / 2) as isize;
        self.grid[((dy + h) as usize) * self.side + (dx + h) as usize]
    }

    /// Offset of the largest entry.
    pub fn argmax(&self) -> (isize, isize) {
        let h = (self.side / 2) as isize;
        let (idx, _) = self
            .grid
            .iter()
            .enumerate()
            .fold((0, f64::NEG_INFINITY), |best, (i, &v)| if v > best.1 { (i, v) } else { best });
        ((idx % self.side) as isize - h, (idx / self.side) as isize - h)
    }
}

/// Offsets of a support window, row-major.
fn window_offsets(side: usize) -> impl Iterator<Item = (isize, isize)> {
    let h = (side / 2) as isize;
    (-h..=h).flat_map(move |dy| (-h..=h).map(move |dx| (dx, dy)))
}

fn check_support(side: usize) -> Result<()> {
    if side % 2 == 0 || side == 0 {
        return Err(Error::InvalidInput(format!("support window side must be odd, got {side}")));
    }
    Ok(())
}

/// Reference response map computed patch by patch. The exponent at a
/// subpixel position is the bilinear blend of the exponents at the four
/// surrounding pixels.
pub fn response_map(image: &ImagePlane, expert: &PatchExpert, center: Point2<f64>, layout: &HogLayout, side: usize) -> Result<ResponseMap> {
    check_support(side)?;
    ensure_dim("patch expert length", layout.descriptor_len(), expert.weights.len())?;
    if !center.x.is_finite() || !center.y.is_finite() {
        return Err(Error::NonFinite("response map center"));
    }
    let z_at = |x: isize, y: isize| -> Result<f64> {
        Ok(expert.exponent(&extract_features(image, Point2::new(x as f64, y as f64), layout)?))
    };
    let mut grid = Vec::with_capacity(side * side);
    for (dx, dy) in window_offsets(side) {
        let z = bilinear(center.x + dx as f64, center.y + dy as f64, &z_at)?;
        grid.push(response_of(z));
    }
    Ok(ResponseMap { side, center, grid })
}

fn bilinear(x: f64, y: f64, f: &impl Fn(isize, isize) -> Result<f64>) -> Result<f64> {
    let x0 = x.floor();
    let y0 = y.floor();
    let (fx, fy) = (x - x0, y - y0);
    let (xi, yi) = (x0 as isize, y0 as isize);
    let a = f(xi, yi)?;
    let b = if fx > 0.0 { f(xi + 1, yi)? } else { 0.0 };
    let c = if fy > 0.0 { f(xi, yi + 1)? } else { 0.0 };
    let d = if fx > 0.0 && fy > 0.0 { f(xi + 1, yi + 1)? } else { 0.0 };
    Ok((1.0 - fy) * ((1.0 - fx) * a + fx * b) + fy * ((1.0 - fx) * c + fx * d))
}

/// Expert exponents precomputed at every pixel of an image (plus a margin)
/// for every landmark, so response maps become table lookups.
#[derive(Debug, Clone)]
pub struct ScoredImage {
    image: Arc<ImagePlane>,
    layout: HogLayout,
    experts: Arc<Vec<PatchExpert>>,
    x0: isize,
    y0: isize,
    width: usize,
    height: usize,
    scores: Vec<Vec<f64>>,
}

impl ScoredImage {
    pub fn new(image: Arc<ImagePlane>, experts: Arc<Vec<PatchExpert>>, layout: &HogLayout, margin: usize) -> Result<Self> {
        for e in experts.iter() {
            ensure_dim("patch expert length", layout.descriptor_len(), e.weights.len())?;
        }
        let field = DescriptorField::for_image(&image, layout, margin)?;
        let (x0, y0) = field.origin();
        let (width, height) = field.size();
        let scores = experts
            .iter()
            .map(|e| {
                let mut plane = Vec::with_capacity(width * height);
                for y in 0..height as isize {
                    for x in 0..width as isize {
                        plane.push(e.exponent(field.get(x0 + x, y0 + y).expect("inside field")));
                    }
                }
                plane
            })
            .collect();
        Ok(Self {
            image,
            layout: *layout,
            experts,
            x0,
            y0,
            width,
            height,
            scores,
        })
    }

    pub fn image(&self) -> &Arc<ImagePlane> {
        &self.image
    }

    pub fn landmark_count(&self) -> usize {
        self.scores.len()
    }

    /// Exponent of landmark `l` at an integer pixel; positions outside the
    /// precomputed table fall back to direct extraction.
    pub fn exponent(&self, l: usize, x: isize, y: isize) -> Result<f64> {
        let (rx, ry) = (x - self.x0, y - self.y0);
        if rx >= 0 && ry >= 0 && (rx as usize) < self.width && (ry as usize) < self.height {
            return Ok(self.scores[l][ry as usize * self.width + rx as usize]);
        }
        let f = extract_features(&self.image, Point2::new(x as f64, y as f64), &self.layout)?;
        Ok(self.experts[l].exponent(&f))
    }

    pub fn response_map(&self, l: usize, center: Point2<f64>, side: usize) -> Result<ResponseMap> {
        check_support(side)?;
        if l >= self.scores.len() {
            return Err(Error::InvalidInput(format!("landmark {l} has no expert")));
        }
        if !center.x.is_finite() || !center.y.is_finite() {
            return Err(Error::NonFinite("response map center"));
        }
        let f = |x: isize, y: isize| self.exponent(l, x, y);
        let mut grid = Vec::with_capacity(side * side);
        for (dx, dy) in window_offsets(side) {
            grid.push(response_of(bilinear(center.x + dx as f64, center.y + dy as f64, &f)?));
        }
        Ok(ResponseMap { side, center, grid })
    }
}

/// Settings for patch-expert training.
#[derive(Debug, Clone, PartialEq)]
pub struct ExpertTraining {
    pub negatives_per_image: usize,
    /// Negatives are at least this far (pixels) from the truth.
    pub min_negative_offset: f64,
    pub folds: usize,
    pub lambdas: Vec<f64>,
    pub seed: u64,
}

impl Default for ExpertTraining {
    fn default() -> Self {
        Self {
            negatives_per_image: 8,
            min_negative_offset: 3.0,
            folds: 5,
            lambdas: LAMBDA_GRID.to_vec(),
            seed: 0x5eed_0001,
        }
    }
}

/// Labelled descriptors for one landmark; `groups` holds the source image index.
#[derive(Debug, Clone)]
pub struct ExpertSamples {
    pub features: DMatrix<f64>,
    pub labels: Vec<bool>,
    pub groups: Vec<usize>,
}

/// Descriptors at the true landmark (positive) and at displaced positions
/// inside the support window (negative).
pub fn collect_expert_samples(data: &[(ImagePlane, Shape)], landmark: usize, layout: &HogLayout, support: usize, cfg: &ExpertTraining) -> Result<ExpertSamples> {
    check_support(support)?;
    let h = (support / 2) as i64;
    if (h as f64) < cfg.min_negative_offset {
        return Err(Error::InvalidInput("support window too small for the negative offset floor".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ (landmark as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15));
    let mut rows: Vec<Vec<f64>> = Vec::new();
    let mut labels = Vec::new();
    let mut groups = Vec::new();
    for (i, (image, shape)) in data.iter().enumerate() {
        if landmark >= shape.len() {
            return Err(Error::InvalidInput(format!("landmark {landmark} missing from annotation {i}")));
        }
        let p = shape.point(landmark);
        let (cx, cy) = (p.x.round(), p.y.round());
        rows.push(extract_features(image, Point2::new(cx, cy), layout)?);
        labels.push(true);
        groups.push(i);
        let mut drawn = 0;
        while drawn < cfg.negatives_per_image {
            let dx = rng.random_range(-h..=h) as f64;
            let dy = rng.random_range(-h..=h) as f64;
            if (dx * dx + dy * dy).sqrt() < cfg.min_negative_offset {
                continue;
            }
            rows.push(extract_features(image, Point2::new(cx + dx, cy + dy), layout)?);
            labels.push(false);
            groups.push(i);
            drawn += 1;
        }
    }
    let f = layout.descriptor_len();
    let features = DMatrix::from_fn(rows.len(), f, |r, c| rows[r][c]);
    Ok(ExpertSamples { features, labels, groups })
}

/// L2-regularized logistic regression by damped Newton iterations.
///
/// Minimizes `mean(log(1 + e^z) − y·z) + λ/2·|w|²` with `z = x·w + c`; the
/// intercept is not penalized. Returns `(w, c)` in the conventional
/// orientation (large `z` means positive).
pub fn fit_logistic(features: &DMatrix<f64>, labels: &[bool], lambda: f64) -> Result<(DVector<f64>, f64)> {
    let (n, f) = features.shape();
    ensure_dim("logistic labels", n, labels.len())?;
    if n == 0 {
        return Err(Error::InvalidInput("no training samples".into()));
    }
    if !(lambda > 0.0) {
        return Err(Error::InvalidInput(format!("regularization must be positive, got {lambda}")));
    }
    let mut x = DMatrix::zeros(n, f + 1);
    x.columns_mut(0, f).copy_from(features);
    x.column_mut(f).fill(1.0);
    let y = DVector::from_iterator(n, labels.iter().map(|&l| if l { 1.0 } else { 0.0 }));
    let inv_n = 1.0 / n as f64;
    let objective = |beta: &DVector<f64>| -> f64 {
        let z = &x * beta;
        let loss: f64 = z.iter().zip(y.iter()).map(|(&z, &y)| softplus(z) - y * z).sum();
        loss * inv_n + 0.5 * lambda * beta.rows(0, f).norm_squared()
    };
    let mut beta = DVector::zeros(f + 1);
    let mut current = objective(&beta);
    for _ in 0..100 {
        let z = &x * &beta;
        let p = z.map(sigmoid);
        let mut grad = x.tr_mul(&(&p - &y)) * inv_n;
        for k in 0..f {
            grad[k] += lambda * beta[k];
        }
        let weights = p.map(|v| v * (1.0 - v) * inv_n);
        let mut hess = DMatrix::zeros(f + 1, f + 1);
        for (r, row) in x.row_iter().enumerate() {
            let w = weights[r];
            if w == 0.0 {
                continue;
            }
            hess.ger(w, &row.transpose(), &row.transpose(), 1.0);
        }
        for k in 0..f {
            hess[(k, k)] += lambda;
        }
        hess[(f, f)] += 1e-10;
        let step = hess
            .cholesky()
            .ok_or_else(|| Error::NumericFailure("logistic Hessian is not positive definite".into()))?
            .solve(&grad);
        let mut t = 1.0;
        let mut accepted = false;
        for _ in 0..40 {
            let cand = &beta - &step * t;
            let val = objective(&cand);
            if val <= current - 1e-4 * t * grad.dot(&step) {
                beta = cand;
                current = val;
                accepted = true;
                break;
            }
            t *= 0.5;
        }
        if !accepted || step.amax() * t < 1e-10 {
            break;
        }
    }
    if beta.iter().any(|v| !v.is_finite()) {
        return Err(Error::NumericFailure("logistic fit diverged".into()));
    }
    Ok((beta.rows(0, f).into_owned(), beta[f]))
}

#[inline]
fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

#[inline]
fn softplus(z: f64) -> f64 {
    if z > 0.0 {
        z + (-z).exp().ln_1p()
    } else {
        z.exp().ln_1p()
    }
}

/// Area under the ROC curve (Mann-Whitney statistic, ties count half).
pub fn auc(scores: &[f64], labels: &[bool]) -> f64 {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && scores[idx[j + 1]] == scores[idx[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            if labels[k] {
                rank_sum += avg;
            }
        }
        i = j + 1;
    }
    let pos = labels.iter().filter(|&&l| l).count() as f64;
    let neg = labels.len() as f64 - pos;
    if pos == 0.0 || neg == 0.0 {
        return 0.5;
    }
    (rank_sum - pos * (pos + 1.0) / 2.0) / (pos * neg)
}

/// Outcome of the ridge-strength search for one landmark.
#[derive(Debug, Clone, PartialEq)]
pub struct CrossValidation {
    pub lambda: f64,
    /// Mean held-out AUC per grid entry, in grid order.
    pub mean_auc: Vec<f64>,
}

/// k-fold cross-validation grouped by source image. Near-ties (within 1e-3
/// AUC) go to the stronger regularization.
pub fn cross_validate(samples: &ExpertSamples, lambdas: &[f64], folds: usize) -> Result<CrossValidation> {
    if lambdas.is_empty() {
        return Err(Error::InvalidInput("empty regularization grid".into()));
    }
    let group_count = samples.groups.iter().max().map_or(0, |g| g + 1);
    let k = folds.min(group_count).max(2);
    let mut mean_auc = vec![0.0; lambdas.len()];
    for (li, &lambda) in lambdas.iter().enumerate() {
        let mut total = 0.0;
        let mut used = 0;
        for fold in 0..k {
            let test: Vec<usize> = (0..samples.labels.len()).filter(|&r| samples.groups[r] % k == fold).collect();
            let train: Vec<usize> = (0..samples.labels.len()).filter(|&r| samples.groups[r] % k != fold).collect();
            let train_labels: Vec<bool> = train.iter().map(|&r| samples.labels[r]).collect();
            if test.is_empty() || !train_labels.iter().any(|&l| l) || train_labels.iter().all(|&l| l) {
                continue;
            }
            let xt = samples.features.select_rows(&train);
            let (w, c) = fit_logistic(&xt, &train_labels, lambda)?;
            let xs = samples.features.select_rows(&test);
            let scores: Vec<f64> = (&xs * &w).iter().map(|z| z + c).collect();
            let labels: Vec<bool> = test.iter().map(|&r| samples.labels[r]).collect();
            total += auc(&scores, &labels);
            used += 1;
        }
        mean_auc[li] = if used > 0 { total / used as f64 } else { 0.5 };
    }
    let best = mean_auc.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lambda = lambdas
        .iter()
        .zip(&mean_auc)
        .filter(|(_, &a)| a >= best - 1e-3)
        .map(|(&l, _)| l)
        .fold(f64::NEG_INFINITY, f64::max);
    Ok(CrossValidation { lambda, mean_auc })
}

/// Trains one expert per landmark, choosing the ridge strength per landmark
/// by cross-validation.
pub fn train_patch_experts(data: &[(ImagePlane, Shape)], layout: &HogLayout, support: usize, cfg: &ExpertTraining) -> Result<Vec<(PatchExpert, CrossValidation)>> {
    if data.len() < 2 {
        return Err(Error::InvalidInput(format!("patch experts need at least 2 images, got {}", data.len())));
    }
    let landmarks = data[0].1.len();
    if data.iter().any(|(_, s)| s.len() != landmarks) {
        return Err(Error::InvalidInput("annotations disagree on landmark count".into()));
    }
    (0..landmarks)
        .into_par_iter()
        .map(|l| {
            let samples = collect_expert_samples(data, l, layout, support, cfg)?;
            let cv = cross_validate(&samples, &cfg.lambdas, cfg.folds)?;
            let (w, c) = fit_logistic(&samples.features, &samples.labels, cv.lambda)?;
            Ok((PatchExpert::new(l, -w, -c)?, cv))
        })
        .collect()
}

/// Patch experts, response-map subspaces and the settings they were built with.
#[derive(Debug, Clone, PartialEq)]
pub struct AppearanceModel {
    pub layout: HogLayout,
    pub support: usize,
    pub experts: Arc<Vec<PatchExpert>>,
    pub subspaces: Vec<PcaSubspace>,
}

impl AppearanceModel {
    pub fn new(layout: HogLayout, support: usize, experts: Vec<PatchExpert>, subspaces: Vec<PcaSubspace>) -> Result<Self> {
        layout.validate()?;
        check_support(support)?;
        ensure_dim("appearance subspace count", experts.len(), subspaces.len())?;
        for (i, (e, s)) in experts.iter().zip(&subspaces).enumerate() {
            if e.landmark != i {
                return Err(Error::InvalidInput(format!("expert {i} is labelled for landmark {}", e.landmark)));
            }
            ensure_dim("patch expert length", layout.descriptor_len(), e.weights.len())?;
            ensure_dim("appearance subspace dimension", support * support, s.dim())?;
        }
        Ok(Self {
            layout,
            support,
            experts: Arc::new(experts),
            subspaces,
        })
    }

    pub fn landmark_count(&self) -> usize {
        self.experts.len()
    }

    /// Length of the stacked appearance vector.
    pub fn dim(&self) -> usize {
        self.subspaces.iter().map(|s| s.rank()).sum()
    }

    /// Margin around the image covered by the precomputed score tables.
    pub fn margin(&self) -> usize {
        self.support / 2 + 2
    }

    pub fn score(&self, image: Arc<ImagePlane>) -> Result<ScoredImage> {
        ScoredImage::new(image, self.experts.clone(), &self.layout, self.margin())
    }

    /// Same experts with replaced subspaces.
    pub fn with_subspaces(&self, subspaces: Vec<PcaSubspace>) -> Result<Self> {
        ensure_dim("appearance subspace count", self.subspaces.len(), subspaces.len())?;
        for (old, new) in self.subspaces.iter().zip(&subspaces) {
            ensure_dim("appearance subspace dimension", old.dim(), new.dim())?;
        }
        Ok(Self {
            subspaces,
            ..self.clone()
        })
    }

    /// Response maps of every landmark at the given shape, in landmark order.
    pub fn response_maps(&self, scored: &ScoredImage, shape: &Shape) -> Result<Vec<ResponseMap>> {
        ensure_dim("shape landmark count", self.landmark_count(), shape.len())?;
        (0..self.landmark_count()).map(|l| scored.response_map(l, shape.point(l), self.support)).collect()
    }

    /// Stacked per-landmark projections of the response maps at `shape`.
    pub fn appearance_vector(&self, scored: &ScoredImage, shape: &Shape) -> Result<DVector<f64>> {
        let maps = self.response_maps(scored, shape)?;
        let mut out = DVector::zeros(self.dim());
        let mut offset = 0;
        for (map, sub) in maps.iter().zip(&self.subspaces) {
            let block = sub.project(&map.to_vector())?;
            out.rows_mut(offset, block.len()).copy_from(&block);
            offset += block.len();
        }
        if out.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("appearance vector"));
        }
        Ok(out)
    }
}

/// Appearance vector of `image` at the shape described by `params`.
pub fn appearance_vector(image: &ImagePlane, params: &DVector<f64>, shape_model: &ShapeModel, appearance: &AppearanceModel) -> Result<DVector<f64>> {
    let shape = shape_model.shape_from_params(params)?;
    let scored = appearance.score(Arc::new(image.clone()))?;
    appearance.appearance_vector(&scored, &shape)
}

/// Fits one response-map subspace per landmark from maps sampled at
/// perturbed versions of the annotated shapes.
///
/// `scored[i]` must be the scored version of the image annotated by
/// `truths[i]`. Perturbations follow stage 0 of `perturbation`.
pub fn build_appearance_subspaces(
    scored: &[ScoredImage],
    truths: &[DVector<f64>],
    shape_model: &ShapeModel,
    support: usize,
    perturbation: &PerturbationModel,
    per_image: usize,
    seed: u64,
    rule: RankRule,
) -> Result<Vec<PcaSubspace>> {
    ensure_dim("annotated image count", scored.len(), truths.len())?;
    if scored.is_empty() || per_image == 0 {
        return Err(Error::InvalidInput("appearance subspaces need at least one sample".into()));
    }
    let landmarks = shape_model.landmark_count();
    let d = support * support;
    let total = scored.len() * per_image;
    let mut columns: Vec<DMatrix<f64>> = vec![DMatrix::zeros(d, total); landmarks];
    for (i, (img, truth)) in scored.iter().zip(truths).enumerate() {
        let samples = perturbation.sample(truth, 0, per_image, seed.wrapping_add(i as u64))?;
        for (j, p) in samples.iter().enumerate() {
            let shape = shape_model.shape_from_params(p)?;
            for (l, cols) in columns.iter_mut().enumerate() {
                let map = img.response_map(l, shape.point(l), support)?;
                cols.set_column(i * per_image + j, &map.to_vector());
            }
        }
    }
    columns
        .into_iter()
        .map(|data| {
            if data.ncols() == 1 {
                PcaSubspace::single(data.column(0).into_owned(), rule)
            } else {
                pca_fit(&data, rule)
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn noise(w: usize, h: usize, seed: u64) -> ImagePlane {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        ImagePlane::new(w, h, (0..w * h).map(|_| rng.random::<f64>()).collect()).unwrap()
    }

    /// Image with a bright ring-and-bar marker at `(cx, cy)` over mild noise.
    fn blob_image(cx: f64, cy: f64, seed: u64) -> ImagePlane {
        let base = noise(48, 48, seed);
        ImagePlane::from_fn(48, 48, |x, y| {
            let dx = x as f64 - cx;
            let dy = y as f64 - cy;
            let r = (dx * dx + dy * dy).sqrt();
            let ring = if (2.0..4.0).contains(&r) { 0.8 } else { 0.0 };
            let bar = if dx.abs() < 1.0 && dy > 0.0 && dy < 5.0 { 0.6 } else { 0.0 };
            0.1 + 0.15 * base.get(x, y) + ring + bar
        })
        .unwrap()
    }

    fn blob_set(count: usize, seed: u64) -> Vec<(ImagePlane, Shape)> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..count)
            .map(|i| {
                let cx = rng.random_range(16.0..32.0f64).round();
                let cy = rng.random_range(16.0..32.0f64).round();
                let img = blob_image(cx, cy, seed * 1000 + i as u64);
                let shape = Shape::from_xy(&[(cx, cy), (cx + 5.0, cy), (cx, cy + 5.0)]).unwrap();
                (img, shape)
            })
            .collect()
    }

    #[test]
    fn zero_expert_gives_uniform_half() {
        let layout = HogLayout::default();
        let e = PatchExpert::new(0, DVector::zeros(54), 0.0).unwrap();
        let m = response_map(&noise(30, 30, 1), &e, Point2::new(15.0, 15.0), &layout, 5).unwrap();
        assert!(m.grid.iter().all(|&v| v == 0.5));
    }

    #[test]
    fn large_positive_bias_saturates_toward_zero() {
        let layout = HogLayout::default();
        let e = PatchExpert::new(0, DVector::zeros(54), 1e6).unwrap();
        let m = response_map(&noise(30, 30, 2), &e, Point2::new(15.0, 15.0), &layout, 5).unwrap();
        assert!(m.grid.iter().all(|&v| v > 0.0 && v < 1e-12));
    }

    #[test]
    fn scored_image_matches_reference_response_map() {
        let img = Arc::new(noise(40, 36, 3));
        let layout = HogLayout::default();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let experts: Vec<PatchExpert> = (0..2)
            .map(|l| PatchExpert::new(l, DVector::from_fn(54, |_, _| rng.random_range(-2.0..2.0)), rng.random_range(-1.0..1.0)).unwrap())
            .collect();
        let scored = ScoredImage::new(img.clone(), Arc::new(experts.clone()), &layout, 6).unwrap();
        // Interior, subpixel, and far outside the table (direct fallback).
        for &(x, y) in &[(20.0, 18.0), (3.3, 7.8), (-9.6, 40.2)] {
            for (l, e) in experts.iter().enumerate() {
                let a = scored.response_map(l, Point2::new(x, y), 7).unwrap();
                let b = response_map(&img, e, Point2::new(x, y), &layout, 7).unwrap();
                for (u, v) in a.grid.iter().zip(&b.grid) {
                    assert!((u - v).abs() < 1e-10);
                }
                assert!(a.grid.iter().all(|&v| v > 0.0 && v < 1.0));
            }
        }
    }

    #[test]
    fn auc_of_perfect_and_reversed_rankings() {
        let labels = [true, false, true, false];
        assert_eq!(auc(&[0.9, 0.1, 0.8, 0.2], &labels), 1.0);
        assert_eq!(auc(&[0.1, 0.9, 0.2, 0.8], &labels), 0.0);
        assert_eq!(auc(&[0.5; 4], &labels), 0.5);
    }

    /// Oracle: the Newton solution zeroes the analytic gradient.
    #[test]
    fn logistic_fit_is_stationary() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = DMatrix::from_fn(80, 3, |_, _| rng.random_range(-1.0..1.0));
        let labels: Vec<bool> = (0..80).map(|r| x[(r, 0)] + 0.5 * x[(r, 1)] + rng.random_range(-0.5..0.5) > 0.0).collect();
        let lambda = 0.05;
        let (w, c) = fit_logistic(&x, &labels, lambda).unwrap();
        let mut grad = vec![0.0; 4];
        for r in 0..80 {
            let z = x.row(r).dot(&w.transpose()) + c;
            let e = sigmoid(z) - if labels[r] { 1.0 } else { 0.0 };
            for k in 0..3 {
                grad[k] += e * x[(r, k)] / 80.0;
            }
            grad[3] += e / 80.0;
        }
        for k in 0..3 {
            grad[k] += lambda * w[k];
        }
        assert!(grad.iter().all(|g| g.abs() < 1e-8), "{grad:?}");
        assert!(w[0] > 0.0 && w[1] > 0.0);
    }

    #[test]
    fn trained_experts_localize_blob_landmarks() {
        let train = blob_set(30, 6);
        let layout = HogLayout::default();
        let experts = train_patch_experts(&train, &layout, 15, &ExpertTraining::default()).unwrap();
        let test = blob_set(20, 7);
        let mut wins = 0;
        let mut total = 0;
        for (img, shape) in &test {
            let p = shape.point(0);
            let e = &experts[0].0;
            let at = e.response(&extract_features(img, p, &layout).unwrap());
            for (dx, dy) in [(5.0, 0.0), (-5.0, 0.0), (0.0, 5.0), (0.0, -5.0)] {
                let off = e.response(&extract_features(img, Point2::new(p.x + dx, p.y + dy), &layout).unwrap());
                wins += usize::from(at > off);
                total += 1;
            }
            let map = response_map(img, e, p, &layout, 15).unwrap();
            let (ax, ay) = map.argmax();
            assert!(ax.abs() <= 2 && ay.abs() <= 2, "argmax offset ({ax}, {ay})");
        }
        assert!(wins as f64 >= 0.95 * total as f64, "{wins}/{total}");
    }

    #[test]
    fn duplicated_image_picks_strongest_regularization() {
        let one = blob_set(1, 8);
        let data = vec![one[0].clone(), one[0].clone()];
        let experts = train_patch_experts(&data, &HogLayout::default(), 15, &ExpertTraining::default()).unwrap();
        for (e, cv) in &experts {
            assert!(e.weights.iter().all(|v| v.is_finite()) && e.bias.is_finite());
            assert_eq!(cv.lambda, 1.0);
        }
    }

    #[test]
    fn noise_images_give_chance_auc() {
        let data: Vec<(ImagePlane, Shape)> = (0..40)
            .map(|i| (noise(40, 40, 100 + i), Shape::from_xy(&[(20.0, 20.0), (12.0, 14.0), (26.0, 25.0)]).unwrap()))
            .collect();
        let experts = train_patch_experts(&data, &HogLayout::default(), 15, &ExpertTraining::default()).unwrap();
        for (_, cv) in &experts {
            let chosen = cv.mean_auc[LAMBDA_GRID.iter().position(|&l| l == cv.lambda).unwrap()];
            assert!((chosen - 0.5).abs() <= 0.1, "auc {chosen}");
        }
    }

    #[test]
    fn rejects_single_image() {
        let one = blob_set(1, 9);
        assert!(train_patch_experts(&one, &HogLayout::default(), 15, &ExpertTraining::default()).is_err());
    }
}
