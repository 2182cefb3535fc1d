//! Synthetic annotated faces and sequences.
//!
//! A "face" is a textured ellipse carrying one L-shaped corner marker per
//! landmark (each rotated differently, so every landmark is locally
//! distinctive), on a smooth background. Sequences animate it with
//! similarity motion, non-rigid deformation, optional appearance drift toward
//! a person-specific texture, noise and occlusions. Ground truth is exact by
//! construction.

use std::f64::consts::{PI, TAU};

use nalgebra::{Point2, Vector2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{Interocular, Shape, SimilarityTransform};
use crate::image::ImagePlane;

/// Outer eye corners of the synthetic template.
pub const INTEROCULAR: Interocular = Interocular::new(0, 3);

/// Base constellation in template units (interocular distance 50).
const TEMPLATE: [(f64, f64); 10] = [
    (-25.0, -15.0), // outer eye corners and inner corners
    (-8.0, -15.0),
    (8.0, -15.0),
    (25.0, -15.0),
    (0.0, 2.0), // nose tip
    (0.0, 15.0), // upper lip
    (-16.0, 22.0), // mouth corners
    (16.0, 22.0),
    (0.0, 29.0), // lower lip
    (0.0, 44.0), // chin
];

const FACE_CENTER: (f64, f64) = (0.0, 10.0);
const FACE_RADII: (f64, f64) = (40.0, 48.0);
const MARKER_ARM: f64 = 7.0;
const MARKER_HALF_WIDTH: f64 = 1.1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub landmarks: usize,
    pub image_side: usize,
    pub frames: usize,
    /// Face scale relative to the template (1.0 → interocular 50 px).
    pub face_scale: f64,
    /// Exact per-frame displacement of the face center (pixels).
    pub translation_step: f64,
    /// Per-frame change of the relative scale.
    pub scale_step: f64,
    /// Per-frame change of the rotation (radians).
    pub rotation_step: f64,
    /// Largest distance of the face center from the image center.
    pub translation_range: f64,
    /// Largest relative scale deviation.
    pub scale_range: f64,
    /// Largest rotation (radians).
    pub rotation_range: f64,
    /// Amplitude of the non-rigid expression modes (template units).
    pub deformation: f64,
    /// Amplitude of the per-person identity modes (template units).
    pub identity: f64,
    /// Per-frame increase of the blend toward the person-specific texture.
    pub drift_rate: f64,
    /// Contrast of the person-specific texture.
    pub drift_contrast: f64,
    /// Fraction of marker contrast lost at full blend.
    pub drift_fade: f64,
    /// Extra marker edge softness at full blend, in multiples of a pixel.
    pub drift_blur: f64,
    pub noise_std: f64,
    /// Per-frame probability of a random occluding rectangle.
    pub occlusion_prob: f64,
    /// Occluder side relative to the face width.
    pub occlusion_size: f64,
    /// `(first frame, length)` of frames where the whole face is covered.
    pub occlusion_burst: Option<(usize, usize)>,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            landmarks: 10,
            image_side: 128,
            frames: 300,
            face_scale: 0.8,
            translation_step: 1.0,
            scale_step: 0.002,
            rotation_step: 0.004,
            translation_range: 18.0,
            scale_range: 0.08,
            rotation_range: 0.15,
            deformation: 3.0,
            identity: 3.0,
            drift_rate: 0.0,
            drift_contrast: 0.25,
            drift_fade: 0.0,
            drift_blur: 0.0,
            noise_std: 0.02,
            occlusion_prob: 0.0,
            occlusion_size: 0.4,
            occlusion_burst: None,
            seed: 1,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.landmarks < 4 {
            return Err(Error::InvalidInput("synthetic faces need at least 4 landmarks".into()));
        }
        if self.image_side < 48 {
            return Err(Error::InvalidInput("synthetic images must be at least 48 px".into()));
        }
        let amplitudes = [
            self.face_scale,
            self.translation_step,
            self.scale_step,
            self.rotation_step,
            self.translation_range,
            self.scale_range,
            self.rotation_range,
            self.deformation,
            self.identity,
            self.drift_rate,
            self.drift_contrast,
            self.drift_blur,
            self.noise_std,
            self.occlusion_prob,
            self.occlusion_size,
        ];
        if amplitudes.iter().any(|a| !(a.is_finite() && *a >= 0.0)) {
            return Err(Error::InvalidInput("synthetic amplitudes must be finite and non-negative".into()));
        }
        if !(self.face_scale > 0.0) || self.occlusion_prob > 1.0 || !(0.0..=1.0).contains(&self.drift_fade) || self.scale_range >= 1.0 {
            return Err(Error::InvalidInput("face scale must be positive, probabilities and fade at most 1, scale range below 1".into()));
        }
        Ok(())
    }
}

/// Landmark template for `l` landmarks, centered on its centroid. Beyond the
/// ten base points, extra landmarks sit on the jaw line.
pub fn template(l: usize) -> Vec<Vector2<f64>> {
    let mut pts: Vec<Vector2<f64>> = TEMPLATE.iter().take(l).map(|&(x, y)| Vector2::new(x, y)).collect();
    let extra = l.saturating_sub(TEMPLATE.len());
    for k in 0..extra {
        let a = PI * (0.15 + 0.7 * (k as f64 + 0.5) / extra as f64);
        pts.push(Vector2::new(-36.0 * a.cos(), 10.0 + 40.0 * a.sin()));
    }
    let c = pts.iter().sum::<Vector2<f64>>() / l as f64;
    pts.iter().map(|p| p - c).collect()
}

/// Zero-mean displacement fields of the expression modes (mouth opening,
/// smile) and the identity modes (eye spacing, face length, nose height).
fn modes(l: usize) -> (Vec<Vec<Vector2<f64>>>, Vec<Vec<Vector2<f64>>>) {
    let field = |f: &dyn Fn(usize) -> (f64, f64)| -> Vec<Vector2<f64>> {
        let mut v: Vec<Vector2<f64>> = (0..l).map(|i| if i < TEMPLATE.len() { let (x, y) = f(i); Vector2::new(x, y) } else { Vector2::zeros() }).collect();
        let c = v.iter().sum::<Vector2<f64>>() / l as f64;
        v.iter_mut().for_each(|p| *p -= c);
        v
    };
    let mouth = field(&|i| match i {
        5 => (0.0, -0.3),
        6 | 7 => (0.0, 0.3),
        8 => (0.0, 1.0),
        9 => (0.0, 0.8),
        _ => (0.0, 0.0),
    });
    let smile = field(&|i| match i {
        6 => (-1.0, -0.5),
        7 => (1.0, -0.5),
        5 | 8 => (0.0, -0.2),
        _ => (0.0, 0.0),
    });
    let eyes = field(&|i| match i {
        1 => (0.6, 0.0),
        2 => (-0.6, 0.0),
        _ => (0.0, 0.0),
    });
    let length = field(&|i| match i {
        5..=8 => (0.0, 0.5),
        9 => (0.0, 1.0),
        _ => (0.0, 0.0),
    });
    let nose = field(&|i| match i {
        4 => (0.0, 1.0),
        _ => (0.0, 0.0),
    });
    (vec![mouth, smile], vec![eyes, length, nose])
}

/// Per-person appearance and shape constants.
#[derive(Debug, Clone)]
struct Person {
    local: Vec<Vector2<f64>>,
    expression: Vec<Vec<Vector2<f64>>>,
    tone: f64,
    marker_angles: Vec<f64>,
    shade: [f64; 4],
    drift: [f64; 6],
    background: [f64; 6],
}

impl Person {
    fn new(cfg: &SynthConfig, rng: &mut ChaCha8Rng) -> Self {
        let l = cfg.landmarks;
        let (expression, identity) = modes(l);
        let mut local = template(l);
        for m in &identity {
            let w: f64 = rng.random_range(-1.0..1.0) * cfg.identity;
            for (p, d) in local.iter_mut().zip(m) {
                *p += d * w;
            }
        }
        let marker_angles = (0..l).map(|i| TAU * i as f64 / l as f64).collect();
        let mut r = |lo: f64, hi: f64| rng.random_range(lo..hi);
        Self {
            local,
            expression,
            tone: r(0.55, 0.7),
            marker_angles,
            shade: [r(0.05, 0.12), r(0.05, 0.12), r(0.0, TAU), r(0.0, TAU)],
            drift: [r(0.7, 1.0), r(0.7, 1.0), r(0.0, TAU), r(0.0, TAU), r(-0.6, 0.6), r(0.0, TAU)],
            background: [r(0.02, 0.05), r(0.02, 0.05), r(0.0, TAU), r(0.0, TAU), r(0.25, 0.45), r(0.05, 0.12)],
        }
    }

    /// Landmarks in template units for the given expression weights.
    fn local_shape(&self, expression: &[f64]) -> Vec<Vector2<f64>> {
        let mut pts = self.local.clone();
        for (m, &w) in self.expression.iter().zip(expression) {
            for (p, d) in pts.iter_mut().zip(m) {
                *p += d * w;
            }
        }
        pts
    }
}

fn smoothstep01(x: f64) -> f64 {
    let t = x.clamp(0.0, 1.0);
    t * t * (3.0 - 2.0 * t)
}

/// Coverage of the L marker at local offset `d` (template units) from its
/// corner, with the first arm along `angle`.
fn marker_coverage(d: Vector2<f64>, angle: f64, pixel: f64) -> f64 {
    let (s, c) = angle.sin_cos();
    let u = d.x * c + d.y * s;
    let v = -d.x * s + d.y * c;
    let arm = |along: f64, across: f64| -> f64 {
        let inside_len = smoothstep01((along + MARKER_HALF_WIDTH) / pixel + 0.5) * smoothstep01((MARKER_ARM - along) / pixel + 0.5);
        let inside_w = smoothstep01((MARKER_HALF_WIDTH - across.abs()) / pixel + 0.5);
        inside_len * inside_w
    };
    arm(u, v).max(arm(v, u))
}

/// Renders one frame. `alpha` blends toward the person-specific texture.
fn render(cfg: &SynthConfig, person: &Person, pose: &SimilarityTransform, shape_local: &[Vector2<f64>], alpha: f64, occluders: &[(f64, f64, f64, f64, f64)], rng: &mut ChaCha8Rng) -> Result<(ImagePlane, Shape)> {
    let side = cfg.image_side;
    let inv = pose.inverse();
    let pixel = 1.0 / pose.scale;
    let noise = Normal::new(0.0, cfg.noise_std.max(1e-300)).expect("positive std");
    let bg = person.background;
    let sh = person.shade;
    let dr = person.drift;
    let edge = pixel * (1.0 + cfg.drift_blur * alpha);
    let darkness = 0.8 * (1.0 - cfg.drift_fade * alpha);
    let mut px = Vec::with_capacity(side * side);
    for y in 0..side {
        for x in 0..side {
            let (xf, yf) = (x as f64, y as f64);
            let mut v = bg[4] + bg[5] * (bg[0] * xf + bg[2]).sin() * (bg[1] * yf + bg[3]).cos();
            let q = inv.apply(&Point2::new(xf, yf));
            let e = ((q.x - FACE_CENTER.0) / FACE_RADII.0).powi(2) + ((q.y - FACE_CENTER.1) / FACE_RADII.1).powi(2);
            let inside = smoothstep01((1.0 - e.sqrt()) * FACE_RADII.0 / pixel + 0.5);
            if inside > 0.0 {
                let generic = person.tone + sh[0] * (0.08 * q.x + sh[2]).sin() + sh[1] * (0.07 * q.y + sh[3]).cos();
                let stripes = ((dr[0] * q.x + dr[4] * q.y + dr[2]).sin() * (dr[1] * q.y + dr[3]).sin() + 0.5 * (0.6 * (q.x - q.y) + dr[5]).sin()).tanh();
                let specific = person.tone + cfg.drift_contrast * stripes;
                let mut face = (1.0 - alpha) * generic + alpha * specific;
                let mut cover: f64 = 0.0;
                for (p, &a) in shape_local.iter().zip(&person.marker_angles) {
                    let d = Vector2::new(q.x - p.x, q.y - p.y);
                    if d.x.abs() > MARKER_ARM + 2.0 || d.y.abs() > MARKER_ARM + 2.0 {
                        continue;
                    }
                    cover = cover.max(marker_coverage(d, a, edge));
                }
                face *= 1.0 - darkness * cover;
                v = (1.0 - inside) * v + inside * face;
            }
            for &(ox, oy, w, h, level) in occluders {
                if xf >= ox && xf < ox + w && yf >= oy && yf < oy + h {
                    v = level;
                }
            }
            if cfg.noise_std > 0.0 {
                v += noise.sample(rng);
            }
            px.push(v.clamp(0.0, 1.0));
        }
    }
    let shape = Shape::new(shape_local.iter().map(|p| pose.apply(&Point2::from(*p))).collect())?;
    Ok((ImagePlane::new(side, side, px)?, shape))
}

/// Occluders of one frame: random rectangles and, inside the burst, one
/// covering the whole face.
fn frame_occluders(cfg: &SynthConfig, t: usize, pose: &SimilarityTransform, rng: &mut ChaCha8Rng) -> Vec<(f64, f64, f64, f64, f64)> {
    let mut out = Vec::new();
    let face_w = 2.0 * FACE_RADII.0 * pose.scale;
    let face_h = 2.0 * FACE_RADII.1 * pose.scale;
    let c = pose.apply(&Point2::new(FACE_CENTER.0, FACE_CENTER.1));
    if cfg.occlusion_prob > 0.0 && rng.random::<f64>() < cfg.occlusion_prob {
        let w = cfg.occlusion_size * face_w;
        let ox = c.x + rng.random_range(-0.5..0.5) * face_w - w / 2.0;
        let oy = c.y + rng.random_range(-0.5..0.5) * face_h - w / 2.0;
        out.push((ox, oy, w, w, rng.random_range(0.2..0.8)));
    }
    if let Some((start, len)) = cfg.occlusion_burst {
        if t >= start && t < start + len {
            let margin = 0.15 * face_w;
            out.push((c.x - face_w / 2.0 - margin, c.y - face_h / 2.0 - margin, face_w + 2.0 * margin, face_h + 2.0 * margin, 0.45));
        }
    }
    out
}

/// Triangle wave: moves by `step` each frame, bouncing inside `[-range, range]`.
fn bounce(value: &mut f64, direction: &mut f64, step: f64, range: f64) {
    if range == 0.0 {
        return;
    }
    let mut next = *value + *direction * step;
    if next > range {
        next = 2.0 * range - next;
        *direction = -1.0;
    } else if next < -range {
        next = -2.0 * range - next;
        *direction = 1.0;
    }
    *value = next;
}

/// A seeded sequence of frames with exact ground-truth shapes.
pub fn generate_sequence(cfg: &SynthConfig) -> Result<Vec<(ImagePlane, Shape)>> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let person = Person::new(cfg, &mut rng);
    let center = cfg.image_side as f64 / 2.0;
    let mut offset = Vector2::new(rng.random_range(-0.5..0.5), rng.random_range(-0.5..0.5)) * cfg.translation_range;
    let mut heading: f64 = rng.random_range(0.0..TAU);
    let mut scale_dev = rng.random_range(-1.0..1.0) * cfg.scale_range;
    let mut scale_dir = 1.0;
    let mut rot = rng.random_range(-1.0..1.0) * cfg.rotation_range;
    let mut rot_dir = -1.0;
    let phases = [rng.random_range(0.0..TAU), rng.random_range(0.0..TAU)];
    let periods = [41.0, 67.0];
    let mut frames = Vec::with_capacity(cfg.frames);
    for t in 0..cfg.frames {
        if t > 0 {
            heading += rng.random_range(-0.3..0.3);
            let mut step = Vector2::new(heading.cos(), heading.sin()) * cfg.translation_step;
            if (offset.x + step.x).abs() > cfg.translation_range {
                heading = PI - heading;
                step.x = -step.x;
            }
            if (offset.y + step.y).abs() > cfg.translation_range {
                heading = -heading;
                step.y = -step.y;
            }
            offset += step;
            bounce(&mut scale_dev, &mut scale_dir, cfg.scale_step, cfg.scale_range);
            bounce(&mut rot, &mut rot_dir, cfg.rotation_step, cfg.rotation_range);
        }
        let expression: Vec<f64> = (0..2).map(|k| cfg.deformation * (TAU * t as f64 / periods[k] + phases[k]).sin()).collect();
        let pose = SimilarityTransform::new(cfg.face_scale * (1.0 + scale_dev), rot, Vector2::new(center + offset.x, center + offset.y))?;
        let alpha = (cfg.drift_rate * t as f64).min(1.0);
        let mut frame_rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_mul(0x9e37_79b9_7f4a_7c15).wrapping_add(t as u64 + 1));
        let occluders = frame_occluders(cfg, t, &pose, &mut frame_rng);
        frames.push(render(cfg, &person, &pose, &person.local_shape(&expression), alpha, &occluders, &mut frame_rng)?);
    }
    Ok(frames)
}

/// Independent annotated images: every image is a new person in a random
/// pose and expression drawn from the motion ranges of `cfg`.
pub fn generate_training_set(cfg: &SynthConfig, count: usize) -> Result<Vec<(ImagePlane, Shape)>> {
    cfg.validate()?;
    let center = cfg.image_side as f64 / 2.0;
    (0..count)
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_mul(0xd134_2543_de82_ef95).wrapping_add(i as u64));
            let person = Person::new(cfg, &mut rng);
            let expression: Vec<f64> = (0..2).map(|_| rng.random_range(-1.0..1.0) * cfg.deformation).collect();
            let pose = SimilarityTransform::new(
                cfg.face_scale * (1.0 + rng.random_range(-1.0..1.0) * cfg.scale_range),
                rng.random_range(-1.0..1.0) * cfg.rotation_range,
                Vector2::new(center + rng.random_range(-1.0..1.0) * cfg.translation_range, center + rng.random_range(-1.0..1.0) * cfg.translation_range),
            )?;
            let occluders = frame_occluders(cfg, usize::MAX, &pose, &mut rng);
            render(cfg, &person, &pose, &person.local_shape(&expression), 0.0, &occluders, &mut rng)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn still() -> SynthConfig {
        SynthConfig {
            frames: 5,
            translation_step: 0.0,
            scale_step: 0.0,
            rotation_step: 0.0,
            deformation: 0.0,
            noise_std: 0.0,
            ..SynthConfig::default()
        }
    }

    #[test]
    fn motionless_noiseless_frames_are_identical() {
        let seq = generate_sequence(&still()).unwrap();
        for f in &seq[1..] {
            assert_eq!(f.0, seq[0].0);
            assert_eq!(f.1, seq[0].1);
        }
    }

    #[test]
    fn same_seed_same_sequence() {
        let cfg = SynthConfig { frames: 4, ..SynthConfig::default() };
        assert_eq!(generate_sequence(&cfg).unwrap(), generate_sequence(&cfg).unwrap());
        let other = SynthConfig { seed: 2, ..cfg.clone() };
        assert_ne!(generate_sequence(&cfg).unwrap()[0].0, generate_sequence(&other).unwrap()[0].0);
    }

    /// The centroid moves by exactly the configured step each frame; the
    /// template and all deformation modes are centroid-free.
    #[test]
    fn per_frame_displacement_matches_configured_step() {
        let cfg = SynthConfig { frames: 300, translation_step: 1.5, ..SynthConfig::default() };
        let seq = generate_sequence(&cfg).unwrap();
        let steps: Vec<f64> = seq.windows(2).map(|w| (w[1].1.centroid() - w[0].1.centroid()).norm()).collect();
        let mean = steps.iter().sum::<f64>() / steps.len() as f64;
        assert!((mean / 1.5 - 1.0).abs() < 0.05, "mean step {mean}");
    }

    #[test]
    fn markers_darken_landmark_sites() {
        let (img, shape) = generate_sequence(&still()).unwrap().remove(0);
        for p in shape.points() {
            let v = img.get(p.x.round() as usize, p.y.round() as usize);
            assert!(v < 0.35, "landmark pixel {v}");
        }
        assert_eq!(shape.len(), 10);
    }

    #[test]
    fn burst_covers_face() {
        let cfg = SynthConfig { frames: 3, occlusion_burst: Some((1, 1)), noise_std: 0.0, ..SynthConfig::default() };
        let seq = generate_sequence(&cfg).unwrap();
        for p in seq[1].1.points() {
            assert!((seq[1].0.get(p.x.round() as usize, p.y.round() as usize) - 0.45).abs() < 1e-12);
        }
    }

    #[test]
    fn training_set_is_deterministic_and_varied() {
        let cfg = SynthConfig::default();
        let a = generate_training_set(&cfg, 3).unwrap();
        assert_eq!(a, generate_training_set(&cfg, 3).unwrap());
        assert_ne!(a[0].1, a[1].1);
    }

    #[test]
    fn more_landmarks_extend_the_jaw() {
        let t = template(14);
        assert_eq!(t.len(), 14);
        let c: Vector2<f64> = t.iter().sum();
        assert!(c.norm() < 1e-9);
    }

    #[test]
    fn rejects_negative_amplitudes() {
        let cfg = SynthConfig { noise_std: -0.1, ..SynthConfig::default() };
        assert!(generate_sequence(&cfg).is_err());
    }
}
