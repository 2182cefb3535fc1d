//! Landmark shapes, reflection-free similarity alignment and the
//! interocular-normalized RMSE.

use nalgebra::{Point2, Vector2};
use serde::{Deserialize, Serialize};

use crate::error::{ensure_dim, Error, Result};

/// Interocular distance the offline reference shape is normalized to.
pub const REFERENCE_INTEROCULAR: f64 = 50.0;

const PROCRUSTES_TOLERANCE: f64 = 1e-8;
const PROCRUSTES_MAX_ITERATIONS: usize = 100;

/// Ordered set of 2-D landmarks in image pixels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Shape {
    points: Vec<Point2<f64>>,
}

impl Shape {
    pub fn new(points: Vec<Point2<f64>>) -> Result<Self> {
        if points.len() < 3 {
            return Err(Error::InvalidInput(format!(
                "a shape needs at least 3 landmarks, got {}",
                points.len()
            )));
        }
        if points.iter().any(|p| !p.x.is_finite() || !p.y.is_finite()) {
            return Err(Error::NonFinite("shape coordinates"));
        }
        Ok(Self { points })
    }

    pub fn from_xy(coords: &[(f64, f64)]) -> Result<Self> {
        Self::new(coords.iter().map(|&(x, y)| Point2::new(x, y)).collect())
    }

    /// Builds a shape from an interleaved `[x0, y0, x1, y1, ...]` vector.
    pub fn from_interleaved(v: &[f64]) -> Result<Self> {
        if v.len() % 2 != 0 {
            return Err(Error::InvalidInput("interleaved coordinate vector has odd length".into()));
        }
        Self::new(v.chunks_exact(2).map(|c| Point2::new(c[0], c[1])).collect())
    }

    pub fn to_interleaved(&self) -> Vec<f64> {
        self.points.iter().flat_map(|p| [p.x, p.y]).collect()
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn points(&self) -> &[Point2<f64>] {
        &self.points
    }

    pub fn point(&self, i: usize) -> Point2<f64> {
        self.points[i]
    }

    pub fn centroid(&self) -> Point2<f64> {
        let sum = self.points.iter().fold(Vector2::zeros(), |acc, p| acc + p.coords);
        Point2::from(sum / self.points.len() as f64)
    }

    /// Axis-aligned bounding box as `(min, max)`.
    pub fn bounds(&self) -> (Point2<f64>, Point2<f64>) {
        let mut lo = self.points[0];
        let mut hi = self.points[0];
        for p in &self.points[1..] {
            lo.x = lo.x.min(p.x);
            lo.y = lo.y.min(p.y);
            hi.x = hi.x.max(p.x);
            hi.y = hi.y.max(p.y);
        }
        (lo, hi)
    }

    pub fn translated(&self, offset: Vector2<f64>) -> Shape {
        Shape {
            points: self.points.iter().map(|p| p + offset).collect(),
        }
    }

    pub fn transformed(&self, t: &SimilarityTransform) -> Shape {
        Shape {
            points: self.points.iter().map(|p| t.apply(p)).collect(),
        }
    }

    pub fn interocular_distance(&self, eyes: Interocular) -> Result<f64> {
        eyes.check(self.len())?;
        Ok((self.points[eyes.right] - self.points[eyes.left]).norm())
    }

    fn centered_norm_sq(&self) -> f64 {
        let c = self.centroid();
        self.points.iter().map(|p| (p - c).norm_squared()).sum()
    }

    fn scale_hint(&self) -> f64 {
        self.points.iter().map(|p| p.coords.norm_squared()).sum::<f64>() / self.points.len() as f64
    }
}

/// Landmark indices whose distance normalizes errors and reference scale.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Interocular {
    pub left: usize,
    pub right: usize,
}

impl Interocular {
    pub const fn new(left: usize, right: usize) -> Self {
        Self { left, right }
    }

    fn check(&self, len: usize) -> Result<()> {
        if self.left >= len || self.right >= len || self.left == self.right {
            return Err(Error::InvalidInput(format!(
                "interocular indices ({}, {}) invalid for {len} landmarks",
                self.left, self.right
            )));
        }
        Ok(())
    }
}

impl Default for Interocular {
    /// Outer eye corners in the common 68-point layout.
    fn default() -> Self {
        Self { left: 36, right: 45 }
    }
}

/// `x ↦ scale · R(rotation) · x + translation`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SimilarityTransform {
    pub scale: f64,
    pub rotation: f64,
    pub translation: Vector2<f64>,
}

impl SimilarityTransform {
    pub fn identity() -> Self {
        Self {
            scale: 1.0,
            rotation: 0.0,
            translation: Vector2::zeros(),
        }
    }

    pub fn new(scale: f64, rotation: f64, translation: Vector2<f64>) -> Result<Self> {
        if !(scale > 0.0) || !scale.is_finite() {
            return Err(Error::InvalidInput(format!("similarity scale must be positive, got {scale}")));
        }
        Ok(Self {
            scale,
            rotation,
            translation,
        })
    }

    pub fn apply(&self, p: &Point2<f64>) -> Point2<f64> {
        Point2::from(self.linear(&p.coords) + self.translation)
    }

    /// Applies only the scaled rotation (no translation).
    pub fn linear(&self, v: &Vector2<f64>) -> Vector2<f64> {
        let (s, c) = self.rotation.sin_cos();
        self.scale * Vector2::new(c * v.x - s * v.y, s * v.x + c * v.y)
    }

    pub fn inverse(&self) -> Self {
        let inv = Self {
            scale: 1.0 / self.scale,
            rotation: -self.rotation,
            translation: Vector2::zeros(),
        };
        Self {
            translation: -inv.linear(&self.translation),
            ..inv
        }
    }

    /// `self ∘ other`: applies `other` first.
    pub fn compose(&self, other: &Self) -> Self {
        Self {
            scale: self.scale * other.scale,
            rotation: self.rotation + other.rotation,
            translation: self.linear(&other.translation) + self.translation,
        }
    }
}

/// Least-squares similarity (no reflection) mapping `src` onto `dst`.
pub fn fit_similarity(src: &Shape, dst: &Shape) -> Result<SimilarityTransform> {
    ensure_dim("fit_similarity landmark count", src.len(), dst.len())?;
    let cs = src.centroid();
    let cd = dst.centroid();
    let mut norm = 0.0;
    let mut a = 0.0;
    let mut b = 0.0;
    for (ps, pd) in src.points.iter().zip(&dst.points) {
        let s = ps - cs;
        let d = pd - cd;
        norm += s.norm_squared();
        a += s.x * d.x + s.y * d.y;
        b += s.x * d.y - s.y * d.x;
    }
    if norm <= 1e-24 * (1.0 + src.scale_hint()) {
        return Err(Error::DegenerateGeometry("source shape has coincident points".into()));
    }
    let scale = (a * a + b * b).sqrt() / norm;
    if !(scale > 0.0) {
        return Err(Error::DegenerateGeometry("target shape has coincident points".into()));
    }
    let rotation = b.atan2(a);
    let mut t = SimilarityTransform {
        scale,
        rotation,
        translation: Vector2::zeros(),
    };
    t.translation = cd.coords - t.linear(&cs.coords);
    Ok(t)
}

/// Canonical pose: centroid at the origin, eye axis along +x, interocular
/// distance equal to `target`.
pub fn normalize_to_reference(shape: &Shape, eyes: Interocular, target: f64) -> Result<Shape> {
    let dist = shape.interocular_distance(eyes)?;
    if dist <= 1e-12 * (1.0 + shape.scale_hint().sqrt()) {
        return Err(Error::DegenerateGeometry("zero interocular distance".into()));
    }
    let axis = shape.points[eyes.right] - shape.points[eyes.left];
    let c = shape.centroid();
    let t = SimilarityTransform {
        scale: target / dist,
        rotation: -axis.y.atan2(axis.x),
        translation: Vector2::zeros(),
    };
    let t = SimilarityTransform {
        translation: -t.linear(&c.coords),
        ..t
    };
    Ok(shape.transformed(&t))
}

/// Result of generalized Procrustes analysis.
#[derive(Debug, Clone)]
pub struct ProcrustesResult {
    pub reference: Shape,
    /// Per-input transforms mapping each input onto `reference`.
    pub transforms: Vec<SimilarityTransform>,
    pub iterations: usize,
}

/// Generalized Procrustes analysis: iterate align-to-reference, average,
/// renormalize until the reference moves less than 1e-8 (RMS per landmark)
/// or 100 iterations elapse.
pub fn procrustes_align(shapes: &[Shape], eyes: Interocular) -> Result<ProcrustesResult> {
    if shapes.len() < 2 {
        return Err(Error::InvalidInput("Procrustes analysis needs at least 2 shapes".into()));
    }
    let l = shapes[0].len();
    for s in shapes {
        ensure_dim("procrustes landmark count", l, s.len())?;
        if s.centered_norm_sq() <= 1e-24 * (1.0 + s.scale_hint()) {
            return Err(Error::DegenerateGeometry("input shape has coincident points".into()));
        }
    }
    let mut reference = normalize_to_reference(&shapes[0], eyes, REFERENCE_INTEROCULAR)?;
    let mut iterations = 0;
    while iterations < PROCRUSTES_MAX_ITERATIONS {
        iterations += 1;
        let mut acc = vec![Vector2::zeros(); l];
        for s in shapes {
            let t = fit_similarity(s, &reference)?;
            for (a, p) in acc.iter_mut().zip(s.points()) {
                *a += t.apply(p).coords;
            }
        }
        let mean = Shape::new(acc.into_iter().map(|v| Point2::from(v / shapes.len() as f64)).collect())?;
        let next = normalize_to_reference(&mean, eyes, REFERENCE_INTEROCULAR)?;
        let movement = rms_distance(&next, &reference);
        reference = next;
        if movement < PROCRUSTES_TOLERANCE {
            break;
        }
    }
    let transforms = shapes
        .iter()
        .map(|s| fit_similarity(s, &reference))
        .collect::<Result<Vec<_>>>()?;
    Ok(ProcrustesResult {
        reference,
        transforms,
        iterations,
    })
}

fn rms_distance(a: &Shape, b: &Shape) -> f64 {
    let sum: f64 = a.points.iter().zip(&b.points).map(|(p, q)| (p - q).norm_squared()).sum();
    (sum / a.len() as f64).sqrt()
}

/// Root-mean-square landmark distance divided by the interocular distance of `truth`.
pub fn norm_rmse(fitted: &Shape, truth: &Shape, eyes: Interocular) -> Result<f64> {
    ensure_dim("norm_rmse landmark count", truth.len(), fitted.len())?;
    let iod = truth.interocular_distance(eyes)?;
    if !(iod > 0.0) {
        return Err(Error::DegenerateGeometry("zero interocular distance in ground truth".into()));
    }
    Ok(rms_distance(fitted, truth) / iod)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    const EYES: Interocular = Interocular::new(0, 2);

    fn pentagon() -> Shape {
        let pts = (0..5)
            .map(|k| {
                let a = std::f64::consts::TAU * k as f64 / 5.0 + 0.1;
                Point2::new(30.0 * a.cos(), 22.0 * a.sin())
            })
            .collect();
        Shape::new(pts).unwrap()
    }

    #[test]
    fn shape_rejects_too_few_or_non_finite() {
        assert!(Shape::from_xy(&[(0.0, 0.0), (1.0, 1.0)]).is_err());
        assert!(Shape::from_xy(&[(0.0, 0.0), (1.0, 1.0), (f64::NAN, 0.0)]).is_err());
    }

    #[test]
    fn fit_similarity_identity_and_scale() {
        let s = pentagon();
        let t = fit_similarity(&s, &s).unwrap();
        assert!((t.scale - 1.0).abs() < 1e-12);
        assert!(t.rotation.abs() < 1e-12);
        assert!(t.translation.norm() < 1e-12);

        let doubled = s.transformed(&SimilarityTransform::new(2.0, 0.0, Vector2::zeros()).unwrap());
        let t = fit_similarity(&s, &doubled).unwrap();
        assert!((t.scale - 2.0).abs() < 1e-12);
        assert!(t.rotation.abs() < 1e-12);
        assert!(t.translation.norm() < 1e-10);
    }

    #[test]
    fn fit_similarity_recovers_planted_transform() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        let src = Shape::new((0..12).map(|_| Point2::new(rng.random_range(-40.0..40.0), rng.random_range(-40.0..40.0))).collect()).unwrap();
        let truth = SimilarityTransform::new(1.37, -0.61, Vector2::new(12.5, -3.25)).unwrap();
        let dst = Shape::new(
            src.transformed(&truth)
                .points()
                .iter()
                .map(|p| p + Vector2::new(rng.random_range(-1e-9..1e-9), rng.random_range(-1e-9..1e-9)))
                .collect(),
        )
        .unwrap();
        let t = fit_similarity(&src, &dst).unwrap();
        assert!((t.scale - truth.scale).abs() < 1e-6);
        assert!((t.rotation - truth.rotation).abs() < 1e-6);
        assert!((t.translation - truth.translation).norm() < 1e-6);
    }

    #[test]
    fn degenerate_source_rejected() {
        let s = Shape::from_xy(&[(1.0, 1.0), (1.0, 1.0), (1.0, 1.0)]).unwrap();
        let d = pentagon();
        let d3 = Shape::new(d.points()[..3].to_vec()).unwrap();
        assert!(matches!(fit_similarity(&s, &d3), Err(Error::DegenerateGeometry(_))));
        assert!(matches!(procrustes_align(&[s.clone(), s], EYES), Err(Error::DegenerateGeometry(_))));
    }

    #[test]
    fn inverse_composes_to_identity() {
        let t = SimilarityTransform::new(0.8, 1.1, Vector2::new(3.0, -7.0)).unwrap();
        let s = pentagon();
        let back = s.transformed(&t).transformed(&t.inverse());
        for (a, b) in back.points().iter().zip(s.points()) {
            assert!((a - b).norm() < 1e-10);
        }
        let id = t.compose(&t.inverse());
        assert!((id.scale - 1.0).abs() < 1e-12 && id.translation.norm() < 1e-12);
    }

    #[test]
    fn procrustes_two_identical_shapes() {
        let s = pentagon();
        let res = procrustes_align(&[s.clone(), s.clone()], EYES).unwrap();
        let expected = normalize_to_reference(&s, EYES, REFERENCE_INTEROCULAR).unwrap();
        assert!(rms_distance(&res.reference, &expected) < 1e-10);
        let (a, b) = (res.transforms[0], res.transforms[1]);
        assert!((a.scale - b.scale).abs() < 1e-12);
        assert!((a.rotation - b.rotation).abs() < 1e-12);
        assert!((a.translation - b.translation).norm() < 1e-10);
        assert!((res.reference.interocular_distance(EYES).unwrap() - 50.0).abs() < 1e-10);
        assert!(res.reference.centroid().coords.norm() < 1e-10);
    }

    #[test]
    fn procrustes_rotated_copy_aligns_exactly() {
        let s = pentagon();
        let rotated = s.transformed(&SimilarityTransform::new(1.0, 30f64.to_radians(), Vector2::zeros()).unwrap());
        let res = procrustes_align(&[s.clone(), rotated.clone()], EYES).unwrap();
        for (shape, t) in [s, rotated].iter().zip(&res.transforms) {
            assert!(rms_distance(&shape.transformed(t), &res.reference) < 1e-8);
        }
    }

    /// Independent route: closed-form two-shape Procrustes of every noisy copy
    /// onto the known base, averaged. GPA must agree with it up to similarity.
    #[test]
    fn procrustes_noisy_pentagons_match_pairwise_oracle() {
        use rand::SeedableRng;
        use rand_distr::{Distribution, Normal};
        let base = pentagon();
        let sigma = 0.3;
        let noise = Normal::new(0.0, sigma).unwrap();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        let copies: Vec<Shape> = (0..20)
            .map(|i| {
                let t = SimilarityTransform::new(0.5 + 0.1 * i as f64, 0.3 * i as f64, Vector2::new(i as f64, -2.0 * i as f64)).unwrap();
                let noisy: Vec<_> = base
                    .points()
                    .iter()
                    .map(|p| p + Vector2::new(noise.sample(&mut rng), noise.sample(&mut rng)))
                    .collect();
                Shape::new(noisy).unwrap().transformed(&t)
            })
            .collect();

        let oracle_mean = {
            let mut acc = vec![Vector2::zeros(); base.len()];
            for c in &copies {
                // closed-form 2-D Procrustes written out directly
                let cc = c.centroid();
                let cb = base.centroid();
                let (mut a, mut b, mut n) = (0.0, 0.0, 0.0);
                for (p, q) in c.points().iter().zip(base.points()) {
                    let u = p - cc;
                    let v = q - cb;
                    n += u.norm_squared();
                    a += u.dot(&v);
                    b += u.x * v.y - u.y * v.x;
                }
                let (sr, sc) = (b / n, a / n);
                for (acc_i, p) in acc.iter_mut().zip(c.points()) {
                    let u = p - cc;
                    *acc_i += Vector2::new(sc * u.x - sr * u.y, sr * u.x + sc * u.y) + cb.coords;
                }
            }
            Shape::new(acc.into_iter().map(|v| Point2::from(v / 20.0)).collect()).unwrap()
        };

        let res = procrustes_align(&copies, EYES).unwrap();
        let to_ref = fit_similarity(&oracle_mean, &res.reference).unwrap();
        let iod = res.reference.interocular_distance(EYES).unwrap();
        // Both averages estimate the base; their gap is bounded by the noise
        // of a 20-sample mean, expressed at the reference scale.
        let tolerance = 3.0 * sigma / (20f64).sqrt() * iod / base.interocular_distance(EYES).unwrap();
        assert!(rms_distance(&oracle_mean.transformed(&to_ref), &res.reference) < tolerance);
        let base_fit = fit_similarity(&base, &res.reference).unwrap();
        assert!(rms_distance(&base.transformed(&base_fit), &res.reference) < tolerance);
    }

    #[test]
    fn norm_rmse_cases() {
        let truth = Shape::from_xy(&[(0.0, 0.0), (10.0, 5.0), (50.0, 0.0), (25.0, 30.0)]).unwrap();
        assert_eq!(norm_rmse(&truth, &truth, EYES).unwrap(), 0.0);
        let d = 3.0;
        let moved = truth.translated(Vector2::new(d * 0.6, d * 0.8));
        assert!((norm_rmse(&moved, &truth, EYES).unwrap() - d / 50.0).abs() < 1e-14);

        let degenerate = Shape::from_xy(&[(0.0, 0.0), (10.0, 5.0), (0.0, 0.0)]).unwrap();
        assert!(matches!(norm_rmse(&degenerate, &degenerate, EYES), Err(Error::DegenerateGeometry(_))));
    }

    #[test]
    fn norm_rmse_matches_direct_summation() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let truth = Shape::new((0..9).map(|_| Point2::new(rng.random_range(0.0..100.0), rng.random_range(0.0..100.0))).collect()).unwrap();
        let fitted = Shape::new(truth.points().iter().map(|p| p + Vector2::new(rng.random_range(-4.0..4.0), rng.random_range(-4.0..4.0))).collect()).unwrap();
        let mut sum = 0.0;
        for i in 0..9 {
            let dx = fitted.point(i).x - truth.point(i).x;
            let dy = fitted.point(i).y - truth.point(i).y;
            sum += dx * dx + dy * dy;
        }
        let iod = ((truth.point(2).x - truth.point(0).x).powi(2) + (truth.point(2).y - truth.point(0).y).powi(2)).sqrt();
        let expected = (sum / 9.0).sqrt() / iod;
        assert!((norm_rmse(&fitted, &truth, EYES).unwrap() - expected).abs() < 1e-14);
    }

    fn arb_shape() -> impl Strategy<Value = Shape> {
        proptest::collection::vec((-100.0f64..100.0, -100.0f64..100.0), 5..12)
            .prop_filter_map("non-degenerate", |pts| {
                let s = Shape::from_xy(&pts).ok()?;
                let iod = s.interocular_distance(EYES).ok()?;
                (iod > 1.0 && s.centered_norm_sq() > 10.0).then_some(s)
            })
    }

    proptest! {
        #[test]
        fn procrustes_invariant_to_joint_similarity(
            a in arb_shape(),
            jitter in proptest::collection::vec((-2.0f64..2.0, -2.0f64..2.0), 12),
            scale in 0.3f64..3.0, rot in -3.0f64..3.0, tx in -50.0f64..50.0, ty in -50.0f64..50.0,
        ) {
            let b = Shape::new(a.points().iter().zip(&jitter).map(|(p, j)| p + Vector2::new(j.0, j.1)).collect()).unwrap();
            prop_assume!(b.interocular_distance(EYES).unwrap() > 1.0);
            let t = SimilarityTransform::new(scale, rot, Vector2::new(tx, ty)).unwrap();
            let r1 = procrustes_align(&[a.clone(), b.clone()], EYES).unwrap();
            let r2 = procrustes_align(&[a.transformed(&t), b.transformed(&t)], EYES).unwrap();
            prop_assert!(rms_distance(&r1.reference, &r2.reference) < 1e-8);
        }

        #[test]
        fn fit_similarity_self_is_identity(s in arb_shape()) {
            let t = fit_similarity(&s, &s).unwrap();
            prop_assert!((t.scale - 1.0).abs() < 1e-10);
            prop_assert!(t.rotation.abs() < 1e-10);
            prop_assert!(t.translation.norm() < 1e-8);
        }

        #[test]
        fn norm_rmse_nonnegative_and_translation_invariant(s in arb_shape(), dx in -30.0f64..30.0, dy in -30.0f64..30.0, ox in -5.0f64..5.0) {
            let fitted = s.translated(Vector2::new(ox, 0.0));
            let e = norm_rmse(&fitted, &s, EYES).unwrap();
            prop_assert!(e >= 0.0);
            prop_assert_eq!(e == 0.0, ox == 0.0);
            let shift = Vector2::new(dx, dy);
            let e2 = norm_rmse(&fitted.translated(shift), &s.translated(shift), EYES).unwrap();
            prop_assert!((e - e2).abs() < 1e-12);
        }
    }
}
