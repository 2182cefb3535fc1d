//! Histogram-of-oriented-gradients descriptors for square patches.
//!
//! Two routes compute the same descriptor: [`extract_features`] builds one
//! patch directly, and [`DescriptorField`] computes every integer center of a
//! region at once with separable cell kernels. The dense route is what the
//! response maps use; the direct one is the reference it is tested against.

use nalgebra::Point2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::ImagePlane;

/// Cell grid, orientation bins and block normalization of a descriptor.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HogLayout {
    /// Side of the square patch in pixels (odd).
    pub patch_side: usize,
    /// Cells per patch side.
    pub cells: usize,
    /// Unsigned orientation bins over `[0, π)`, centered at multiples of `π / bins`.
    pub bins: usize,
    /// L2-Hys clipping level.
    pub clip: f64,
    /// Regularizer in `v / sqrt(|v|² + eps²)`.
    pub eps: f64,
}

impl Default for HogLayout {
    fn default() -> Self {
        Self {
            patch_side: 11,
            cells: 3,
            bins: 6,
            clip: 0.2,
            eps: 0.1,
        }
    }
}

impl HogLayout {
    pub fn validate(&self) -> Result<()> {
        if self.patch_side % 2 == 0 || self.patch_side < 3 {
            return Err(Error::InvalidInput(format!("patch side must be odd and ≥ 3, got {}", self.patch_side)));
        }
        if self.cells == 0 || self.cells > self.patch_side || self.bins < 2 {
            return Err(Error::InvalidInput("invalid cell or bin count".into()));
        }
        if !(self.clip > 0.0) || !(self.eps > 0.0) {
            return Err(Error::InvalidInput("clip and eps must be positive".into()));
        }
        Ok(())
    }

    pub fn descriptor_len(&self) -> usize {
        self.cells * self.cells * self.bins
    }

    pub fn half(&self) -> usize {
        self.patch_side / 2
    }

    /// `weights[c][i]`: share of pixel column/row `i` of the patch that goes
    /// to cell `c`, by linear interpolation between cell centers.
    fn cell_weights(&self) -> Vec<Vec<f64>> {
        let p = self.patch_side;
        let cells = self.cells;
        let mut w = vec![vec![0.0; p]; cells];
        for i in 0..p {
            let f = ((i as f64 + 0.5) * cells as f64 / p as f64 - 0.5).clamp(0.0, (cells - 1) as f64);
            let c0 = (f.floor() as usize).min(cells - 1);
            let frac = f - c0 as f64;
            w[c0][i] += 1.0 - frac;
            if frac > 0.0 {
                w[c0 + 1][i] += frac;
            }
        }
        w
    }

    /// In-place L2-Hys normalization. A zero vector stays zero.
    fn normalize(&self, v: &mut [f64]) {
        let scale = |v: &mut [f64], eps: f64| {
            let n = (v.iter().map(|x| x * x).sum::<f64>() + eps * eps).sqrt();
            v.iter_mut().for_each(|x| *x /= n);
        };
        if v.iter().all(|&x| x == 0.0) {
            return;
        }
        scale(v, self.eps);
        v.iter_mut().for_each(|x| *x = x.min(self.clip));
        scale(v, 1e-12);
    }
}

/// Gradient votes `(bin0, weight0, bin1, weight1)` of one pixel.
#[inline]
fn pixel_votes(image: &ImagePlane, x: isize, y: isize, bins: usize) -> (usize, f64, usize, f64) {
    let gx = 0.5 * (image.get_reflect(x + 1, y) - image.get_reflect(x - 1, y));
    let gy = 0.5 * (image.get_reflect(x, y + 1) - image.get_reflect(x, y - 1));
    let mag = (gx * gx + gy * gy).sqrt();
    if mag == 0.0 {
        return (0, 0.0, 0, 0.0);
    }
    let mut theta = gy.atan2(gx);
    if theta < 0.0 {
        theta += std::f64::consts::PI;
    }
    let t = theta / (std::f64::consts::PI / bins as f64);
    let b0f = t.floor();
    let frac = t - b0f;
    let b0 = (b0f as usize) % bins;
    (b0, mag * (1.0 - frac), (b0 + 1) % bins, mag * frac)
}

/// Descriptor of the patch centered at the pixel nearest to `center`.
///
/// Pixels outside the image are reflected, so any finite center is valid.
pub fn extract_features(image: &ImagePlane, center: Point2<f64>, layout: &HogLayout) -> Result<Vec<f64>> {
    layout.validate()?;
    if !center.x.is_finite() || !center.y.is_finite() {
        return Err(Error::NonFinite("patch center"));
    }
    let cx = center.x.round() as isize;
    let cy = center.y.round() as isize;
    let half = layout.half() as isize;
    let weights = layout.cell_weights();
    let (cells, bins) = (layout.cells, layout.bins);
    let mut out = vec![0.0; layout.descriptor_len()];
    for j in 0..layout.patch_side {
        for i in 0..layout.patch_side {
            let (b0, w0, b1, w1) = pixel_votes(image, cx + i as isize - half, cy + j as isize - half, bins);
            if w0 == 0.0 && w1 == 0.0 {
                continue;
            }
            for ry in 0..cells {
                let wy = weights[ry][j];
                if wy == 0.0 {
                    continue;
                }
                for rx in 0..cells {
                    let w = wy * weights[rx][i];
                    if w == 0.0 {
                        continue;
                    }
                    let base = (ry * cells + rx) * bins;
                    out[base + b0] += w * w0;
                    out[base + b1] += w * w1;
                }
            }
        }
    }
    layout.normalize(&mut out);
    Ok(out)
}

/// Descriptors for every integer center of a rectangular region.
#[derive(Debug, Clone)]
pub struct DescriptorField {
    layout: HogLayout,
    x0: isize,
    y0: isize,
    width: usize,
    height: usize,
    data: Vec<f64>,
}

impl DescriptorField {
    /// Computes descriptors for centers `x0..x0+width`, `y0..y0+height`.
    pub fn compute(image: &ImagePlane, layout: &HogLayout, x0: isize, y0: isize, width: usize, height: usize) -> Result<Self> {
        layout.validate()?;
        let half = layout.half();
        let p = layout.patch_side;
        let (cells, bins) = (layout.cells, layout.bins);
        let len = layout.descriptor_len();
        let weights = layout.cell_weights();

        // Vote planes over the region grown by the patch half-width.
        let ew = width + 2 * half;
        let eh = height + 2 * half;
        let mut votes = vec![0.0; bins * ew * eh];
        for ey in 0..eh {
            for ex in 0..ew {
                let x = x0 + ex as isize - half as isize;
                let y = y0 + ey as isize - half as isize;
                let (b0, w0, b1, w1) = pixel_votes(image, x, y, bins);
                let idx = ey * ew + ex;
                votes[b0 * ew * eh + idx] += w0;
                votes[b1 * ew * eh + idx] += w1;
            }
        }

        let mut data = vec![0.0; width * height * len];
        let mut horiz = vec![0.0; width * eh];
        for b in 0..bins {
            let plane = &votes[b * ew * eh..(b + 1) * ew * eh];
            for rx in 0..cells {
                let kx = &weights[rx];
                for ey in 0..eh {
                    let row = &plane[ey * ew..(ey + 1) * ew];
                    for x in 0..width {
                        let mut acc = 0.0;
                        for i in 0..p {
                            acc += kx[i] * row[x + i];
                        }
                        horiz[ey * width + x] = acc;
                    }
                }
                for ry in 0..cells {
                    let ky = &weights[ry];
                    let slot = (ry * cells + rx) * bins + b;
                    for y in 0..height {
                        for x in 0..width {
                            let mut acc = 0.0;
                            for j in 0..p {
                                acc += ky[j] * horiz[(y + j) * width + x];
                            }
                            data[(y * width + x) * len + slot] = acc;
                        }
                    }
                }
            }
        }
        for d in data.chunks_mut(len) {
            layout.normalize(d);
        }
        Ok(Self {
            layout: *layout,
            x0,
            y0,
            width,
            height,
            data,
        })
    }

    /// Field covering the whole image plus `margin` pixels on every side.
    pub fn for_image(image: &ImagePlane, layout: &HogLayout, margin: usize) -> Result<Self> {
        let m = margin as isize;
        Self::compute(image, layout, -m, -m, image.width() + 2 * margin, image.height() + 2 * margin)
    }

    pub fn layout(&self) -> &HogLayout {
        &self.layout
    }

    pub fn origin(&self) -> (isize, isize) {
        (self.x0, self.y0)
    }

    pub fn size(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    pub fn contains(&self, x: isize, y: isize) -> bool {
        x >= self.x0 && y >= self.y0 && x < self.x0 + self.width as isize && y < self.y0 + self.height as isize
    }

    /// Descriptor at an integer center inside the field.
    pub fn get(&self, x: isize, y: isize) -> Option<&[f64]> {
        if !self.contains(x, y) {
            return None;
        }
        let len = self.layout.descriptor_len();
        let idx = (y - self.y0) as usize * self.width + (x - self.x0) as usize;
        Some(&self.data[idx * len..(idx + 1) * len])
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};

    fn noise_image(w: usize, h: usize, seed: u64) -> ImagePlane {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let px: Vec<f64> = (0..w * h).map(|_| rng.random::<f64>()).collect();
        ImagePlane::new(w, h, px).unwrap()
    }

    #[test]
    fn constant_image_gives_zero_descriptor() {
        let img = ImagePlane::filled(20, 20, 0.4).unwrap();
        let d = extract_features(&img, Point2::new(10.0, 10.0), &HogLayout::default()).unwrap();
        assert_eq!(d.len(), 54);
        assert!(d.iter().all(|&v| v == 0.0));
    }

    /// A vertical step has a purely horizontal gradient, so all mass lands in
    /// the orientation bin centered at 0.
    #[test]
    fn vertical_step_votes_horizontal_bin() {
        let img = ImagePlane::from_fn(30, 30, |x, _| if x < 15 { 0.1 } else { 0.9 }).unwrap();
        let layout = HogLayout::default();
        let d = extract_features(&img, Point2::new(15.0, 15.0), &layout).unwrap();
        let total: f64 = d.iter().sum();
        let horizontal: f64 = d.chunks(layout.bins).map(|c| c[0]).sum();
        assert!(total > 0.0);
        assert!(horizontal / total > 0.9, "ratio {}", horizontal / total);
    }

    #[test]
    fn normalization_clips_and_keeps_unit_norm() {
        let img = noise_image(25, 25, 3);
        let layout = HogLayout::default();
        let d = extract_features(&img, Point2::new(12.0, 12.0), &layout).unwrap();
        let n: f64 = d.iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!((n - 1.0).abs() < 1e-9);
        assert!(d.iter().all(|&v| (0.0..=1.0).contains(&v)));
    }

    /// Rotating the image by 180° reverses every gradient, which unsigned
    /// bins ignore; the cell grid is mirrored through the patch center.
    #[test]
    fn half_turn_permutes_cells_only() {
        let img = noise_image(31, 31, 5);
        let rot = ImagePlane::from_fn(31, 31, |x, y| img.get(30 - x, 30 - y)).unwrap();
        let layout = HogLayout::default();
        let a = extract_features(&img, Point2::new(15.0, 15.0), &layout).unwrap();
        let b = extract_features(&rot, Point2::new(15.0, 15.0), &layout).unwrap();
        let (c, bins) = (layout.cells, layout.bins);
        for ry in 0..c {
            for rx in 0..c {
                for k in 0..bins {
                    let ia = (ry * c + rx) * bins + k;
                    let ib = ((c - 1 - ry) * c + (c - 1 - rx)) * bins + k;
                    assert!((a[ia] - b[ib]).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn centrally_symmetric_image_is_half_turn_invariant() {
        let base = noise_image(31, 31, 6);
        let img = ImagePlane::from_fn(31, 31, |x, y| base.get(x, y) + base.get(30 - x, 30 - y)).unwrap();
        let rot = ImagePlane::from_fn(31, 31, |x, y| img.get(30 - x, 30 - y)).unwrap();
        let layout = HogLayout::default();
        let a = extract_features(&img, Point2::new(15.0, 15.0), &layout).unwrap();
        let b = extract_features(&rot, Point2::new(15.0, 15.0), &layout).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn cell_weights_partition_unity() {
        let layout = HogLayout::default();
        let w = layout.cell_weights();
        for i in 0..layout.patch_side {
            let s: f64 = w.iter().map(|c| c[i]).sum();
            assert!((s - 1.0).abs() < 1e-15);
        }
    }

    #[test]
    fn rejects_even_patch_and_nan_center() {
        let img = noise_image(20, 20, 7);
        let layout = HogLayout { patch_side: 10, ..HogLayout::default() };
        assert!(extract_features(&img, Point2::new(5.0, 5.0), &layout).is_err());
        assert!(extract_features(&img, Point2::new(f64::NAN, 5.0), &HogLayout::default()).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(16))]

        /// Dense and direct descriptors agree everywhere, including centers
        /// outside the image where both reflect.
        #[test]
        fn dense_field_matches_direct_extraction(seed in 0u64..500, x0 in -12isize..20, y0 in -12isize..20) {
            let img = noise_image(24, 20, seed);
            let layout = HogLayout::default();
            let field = DescriptorField::compute(&img, &layout, x0, y0, 7, 5).unwrap();
            for y in y0..y0 + 5 {
                for x in x0..x0 + 7 {
                    let direct = extract_features(&img, Point2::new(x as f64, y as f64), &layout).unwrap();
                    let dense = field.get(x, y).unwrap();
                    for (a, b) in direct.iter().zip(dense) {
                        prop_assert!((a - b).abs() < 1e-10);
                    }
                }
            }
            prop_assert!(field.get(x0 - 1, y0).is_none());
        }
    }
}
