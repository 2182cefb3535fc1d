//! Fitting-quality classifier.
//!
//! A small convolutional network decides whether a fitted shape sits on the
//! face it was fitted to. Its input is a square crop around the shape plus a
//! binary map marking the landmark positions inside the crop. With
//! [`Wiring::InputConcat`] the two planes enter the first convolution as two
//! channels; with [`Wiring::FcConcat`] the convolutions see only the image
//! and the pooled map joins at the fully connected layer.
//!
//! Layers: conv 3×3 → ReLU → max-pool 2, conv 3×3 → ReLU → max-pool 2,
//! fully connected → ReLU, fully connected → softmax over
//! `[misaligned, aligned]`.

use nalgebra::{Point2, Vector2};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cascade::PerturbationModel;
use crate::error::{ensure_dim, Error, Result};
use crate::geometry::{norm_rmse, Interocular, Shape};
use crate::image::ImagePlane;
use crate::shape::ShapeModel;

pub const DEFAULT_SIDE: usize = 64;
pub const DEFAULT_DILATION: usize = 1;
/// Crop margin on each side, relative to the larger bounding-box side.
pub const CROP_MARGIN: f64 = 0.2;
pub const DEFAULT_THRESHOLD: f64 = 0.5;
/// Largest Norm RMSE still counted as a correct fitting.
pub const FITTING_TOLERANCE: f64 = 0.08;

const CONV1: usize = 4;
const CONV2: usize = 8;
const HIDDEN: usize = 16;
const CLASSES: usize = 2;
const CONFIDENCE_FLOOR: f64 = 1e-12;

pub const BLOCK_NAMES: [&str; 8] = ["conv1.weight", "conv1.bias", "conv2.weight", "conv2.bias", "fc1.weight", "fc1.bias", "fc2.weight", "fc2.bias"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Wiring {
    InputConcat,
    FcConcat,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Label {
    Aligned,
    Misaligned,
}

impl Label {
    pub fn sign(self) -> i8 {
        match self {
            Label::Aligned => 1,
            Label::Misaligned => -1,
        }
    }

    fn class(self) -> usize {
        match self {
            Label::Aligned => 1,
            Label::Misaligned => 0,
        }
    }
}

/// Square image region mapped onto a `side × side` grid.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CropWindow {
    pub x0: f64,
    pub y0: f64,
    pub size: f64,
    pub side: usize,
}

impl CropWindow {
    /// Square around the bounding box of `shape`, widened by `margin` times
    /// the larger box side on every edge.
    pub fn around(shape: &Shape, margin: f64, side: usize) -> Result<Self> {
        if side == 0 || !(margin >= 0.0) {
            return Err(Error::InvalidInput("crop side must be positive and margin non-negative".into()));
        }
        let (lo, hi) = shape.bounds();
        let extent = (hi.x - lo.x).max(hi.y - lo.y).max(1.0);
        let size = extent * (1.0 + 2.0 * margin);
        let cx = 0.5 * (lo.x + hi.x);
        let cy = 0.5 * (lo.y + hi.y);
        Ok(Self {
            x0: cx - size / 2.0,
            y0: cy - size / 2.0,
            size,
            side,
        })
    }

    /// Continuous crop coordinates of an image point (crop pixel centers at
    /// integers).
    pub fn to_crop(&self, p: &Point2<f64>) -> Vector2<f64> {
        let k = self.side as f64 / self.size;
        Vector2::new((p.x - self.x0) * k - 0.5, (p.y - self.y0) * k - 0.5)
    }

    /// Bilinear resampling of the window, normalized to zero mean and unit
    /// variance (a flat crop stays all zero).
    pub fn extract(&self, image: &ImagePlane) -> Vec<f64> {
        let step = self.size / self.side as f64;
        let mut out = Vec::with_capacity(self.side * self.side);
        for j in 0..self.side {
            for i in 0..self.side {
                out.push(image.sample(self.x0 + (i as f64 + 0.5) * step - 0.5, self.y0 + (j as f64 + 0.5) * step - 0.5));
            }
        }
        let n = out.len() as f64;
        let mean = out.iter().sum::<f64>() / n;
        let std = (out.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
        let scale = if std > 1e-8 { 1.0 / std } else { 0.0 };
        out.iter_mut().for_each(|v| *v = (*v - mean) * scale);
        out
    }
}

/// Binary plane marking landmark positions.
#[derive(Debug, Clone, PartialEq)]
pub struct LandmarkMap {
    pub side: usize,
    pub dilation: usize,
    pub grid: Vec<f64>,
}

impl LandmarkMap {
    pub fn nonzero(&self) -> usize {
        self.grid.iter().filter(|&&v| v != 0.0).count()
    }
}

/// Marks the nearest crop pixel of every landmark and its square
/// neighborhood of radius `dilation`. Landmarks outside the crop land on the
/// border ring.
pub fn render_landmark_map(shape: &Shape, window: &CropWindow, dilation: usize) -> LandmarkMap {
    let side = window.side;
    let mut grid = vec![0.0; side * side];
    let last = side as isize - 1;
    let d = dilation as isize;
    for p in shape.points() {
        let c = window.to_crop(p);
        let cx = (c.x.round() as isize).clamp(0, last);
        let cy = (c.y.round() as isize).clamp(0, last);
        for y in (cy - d).max(0)..=(cy + d).min(last) {
            for x in (cx - d).max(0)..=(cx + d).min(last) {
                grid[y as usize * side + x as usize] = 1.0;
            }
        }
    }
    LandmarkMap { side, dilation, grid }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvaluatorSample {
    pub crop: Vec<f64>,
    pub map: LandmarkMap,
    pub label: Label,
}

impl EvaluatorSample {
    pub fn new(image: &ImagePlane, shape: &Shape, label: Label, side: usize, dilation: usize) -> Result<Self> {
        let window = CropWindow::around(shape, CROP_MARGIN, side)?;
        Ok(Self {
            crop: window.extract(image),
            map: render_landmark_map(shape, &window, dilation),
            label,
        })
    }
}

/// Flat parameter blocks in [`BLOCK_NAMES`] order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetParams {
    pub blocks: Vec<Vec<f64>>,
}

impl NetParams {
    fn zeros_like(&self) -> Self {
        Self {
            blocks: self.blocks.iter().map(|b| vec![0.0; b.len()]).collect(),
        }
    }

    fn axpy(&mut self, a: f64, other: &Self) {
        for (x, y) in self.blocks.iter_mut().zip(&other.blocks) {
            x.iter_mut().zip(y).for_each(|(x, y)| *x += a * y);
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluatorNet {
    wiring: Wiring,
    side: usize,
    dilation: usize,
    params: NetParams,
}

/// Intermediate activations kept for back-propagation.
struct Trace {
    input: Vec<f64>,
    pre1: Vec<f64>,
    arg1: Vec<usize>,
    pool1: Vec<f64>,
    pre2: Vec<f64>,
    arg2: Vec<usize>,
    fc_in: Vec<f64>,
    hidden_pre: Vec<f64>,
    hidden: Vec<f64>,
    logits: [f64; CLASSES],
}

fn conv3x3_forward(input: &[f64], cin: usize, side: usize, w: &[f64], b: &[f64], out: &mut [f64]) {
    let n = side * side;
    let cout = b.len();
    for o in 0..cout {
        let plane = &mut out[o * n..(o + 1) * n];
        plane.fill(b[o]);
        for c in 0..cin {
            let src = &input[c * n..(c + 1) * n];
            for ky in 0..3 {
                let dy = ky as isize - 1;
                for kx in 0..3 {
                    let dx = kx as isize - 1;
                    let wv = w[((o * cin + c) * 3 + ky) * 3 + kx];
                    let y_lo = (-dy).max(0) as usize;
                    let y_hi = (side as isize - dy.max(0)) as usize;
                    let x_lo = (-dx).max(0) as usize;
                    let x_hi = (side as isize - dx.max(0)) as usize;
                    for y in y_lo..y_hi {
                        let sy = (y as isize + dy) as usize;
                        let dst = &mut plane[y * side + x_lo..y * side + x_hi];
                        let s = &src[sy * side + (x_lo as isize + dx) as usize..sy * side + (x_hi as isize + dx) as usize];
                        dst.iter_mut().zip(s).for_each(|(d, s)| *d += wv * s);
                    }
                }
            }
        }
    }
}

/// Accumulates weight and bias gradients; input gradients only when asked.
#[allow(clippy::too_many_arguments)]
fn conv3x3_backward(input: &[f64], cin: usize, side: usize, w: &[f64], d_out: &[f64], cout: usize, dw: &mut [f64], db: &mut [f64], mut d_in: Option<&mut [f64]>) {
    let n = side * side;
    for o in 0..cout {
        let g = &d_out[o * n..(o + 1) * n];
        db[o] += g.iter().sum::<f64>();
        for c in 0..cin {
            let src = &input[c * n..(c + 1) * n];
            for ky in 0..3 {
                let dy = ky as isize - 1;
                for kx in 0..3 {
                    let dx = kx as isize - 1;
                    let wi = ((o * cin + c) * 3 + ky) * 3 + kx;
                    let y_lo = (-dy).max(0) as usize;
                    let y_hi = (side as isize - dy.max(0)) as usize;
                    let x_lo = (-dx).max(0) as usize;
                    let x_hi = (side as isize - dx.max(0)) as usize;
                    let mut acc = 0.0;
                    for y in y_lo..y_hi {
                        let sy = (y as isize + dy) as usize;
                        let gr = &g[y * side + x_lo..y * side + x_hi];
                        let s0 = sy * side + (x_lo as isize + dx) as usize;
                        let s = &src[s0..s0 + (x_hi - x_lo)];
                        acc += gr.iter().zip(s).map(|(a, b)| a * b).sum::<f64>();
                        if let Some(d_in) = d_in.as_deref_mut() {
                            let wv = w[wi];
                            let di = &mut d_in[c * n + s0..c * n + s0 + (x_hi - x_lo)];
                            di.iter_mut().zip(gr).for_each(|(d, g)| *d += wv * g);
                        }
                    }
                    dw[wi] += acc;
                }
            }
        }
    }
}

/// ReLU followed by 2×2 max pooling; returns pooled values and the flat index
/// of each winner.
fn relu_pool(pre: &[f64], channels: usize, side: usize) -> (Vec<f64>, Vec<usize>) {
    let half = side / 2;
    let mut out = Vec::with_capacity(channels * half * half);
    let mut arg = Vec::with_capacity(channels * half * half);
    for c in 0..channels {
        let base = c * side * side;
        for y in 0..half {
            for x in 0..half {
                let mut best = base + 2 * y * side + 2 * x;
                for (oy, ox) in [(0, 1), (1, 0), (1, 1)] {
                    let i = base + (2 * y + oy) * side + 2 * x + ox;
                    if pre[i] > pre[best] {
                        best = i;
                    }
                }
                out.push(pre[best].max(0.0));
                arg.push(best);
            }
        }
    }
    (out, arg)
}

fn relu_pool_backward(pre: &[f64], arg: &[usize], d_pooled: &[f64], d_pre: &mut [f64]) {
    for (&i, &g) in arg.iter().zip(d_pooled) {
        if pre[i] > 0.0 {
            d_pre[i] += g;
        }
    }
}

/// Max pooling of the landmark map by 4, the resolution of the last
/// convolution.
fn pooled_map(map: &[f64], side: usize) -> Vec<f64> {
    let q = side / 4;
    let mut out: Vec<f64> = vec![0.0; q * q];
    for y in 0..side {
        for x in 0..side {
            let o = &mut out[(y / 4) * q + x / 4];
            *o = o.max(map[y * side + x]);
        }
    }
    out
}

fn softmax(z: &[f64; CLASSES]) -> [f64; CLASSES] {
    let m = z[0].max(z[1]);
    let e = [(z[0] - m).exp(), (z[1] - m).exp()];
    let s = e[0] + e[1];
    [e[0] / s, e[1] / s]
}

/// Cross-entropy from logits, computed through log-sum-exp.
fn cross_entropy(z: &[f64; CLASSES], class: usize) -> f64 {
    let m = z[0].max(z[1]);
    m + ((z[0] - m).exp() + (z[1] - m).exp()).ln() - z[class]
}

impl EvaluatorNet {
    /// Freshly initialized network (uniform He initialization, zero biases).
    pub fn new(wiring: Wiring, side: usize, dilation: usize, seed: u64) -> Result<Self> {
        if side < 8 || side % 4 != 0 {
            return Err(Error::InvalidInput(format!("evaluator side {side} must be a multiple of 4 and at least 8")));
        }
        let cin = Self::input_channels(wiring);
        let fc_in = Self::fc_inputs(wiring, side);
        let shapes = [(CONV1 * cin * 9, cin * 9), (CONV1, 0), (CONV2 * CONV1 * 9, CONV1 * 9), (CONV2, 0), (HIDDEN * fc_in, fc_in), (HIDDEN, 0), (CLASSES * HIDDEN, HIDDEN), (CLASSES, 0)];
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let blocks = shapes
            .iter()
            .map(|&(len, fan_in)| {
                if fan_in == 0 {
                    vec![0.0; len]
                } else {
                    let a = (6.0 / fan_in as f64).sqrt();
                    (0..len).map(|_| rng.random_range(-a..a)).collect()
                }
            })
            .collect();
        Ok(Self {
            wiring,
            side,
            dilation,
            params: NetParams { blocks },
        })
    }

    /// Rebuilds a network from stored parameters, checking every block size.
    pub fn from_parts(wiring: Wiring, side: usize, dilation: usize, params: NetParams) -> Result<Self> {
        let template = Self::new(wiring, side, dilation, 0)?;
        ensure_dim("evaluator parameter blocks", template.params.blocks.len(), params.blocks.len())?;
        for (name, (a, b)) in BLOCK_NAMES.iter().zip(template.params.blocks.iter().zip(&params.blocks)) {
            ensure_dim(name, a.len(), b.len())?;
        }
        if params.blocks.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("evaluator parameters"));
        }
        Ok(Self { params, ..template })
    }

    fn input_channels(wiring: Wiring) -> usize {
        match wiring {
            Wiring::InputConcat => 2,
            Wiring::FcConcat => 1,
        }
    }

    fn fc_inputs(wiring: Wiring, side: usize) -> usize {
        let q = side / 4;
        match wiring {
            Wiring::InputConcat => CONV2 * q * q,
            Wiring::FcConcat => CONV2 * q * q + q * q,
        }
    }

    pub fn wiring(&self) -> Wiring {
        self.wiring
    }

    pub fn side(&self) -> usize {
        self.side
    }

    pub fn dilation(&self) -> usize {
        self.dilation
    }

    pub fn params(&self) -> &NetParams {
        &self.params
    }

    fn check_sample(&self, sample: &EvaluatorSample) -> Result<()> {
        let n = self.side * self.side;
        ensure_dim("evaluator crop size", n, sample.crop.len())?;
        ensure_dim("evaluator map size", n, sample.map.grid.len())
    }

    fn trace(&self, sample: &EvaluatorSample) -> Trace {
        let b = &self.params.blocks;
        let s1 = self.side;
        let s2 = s1 / 2;
        let input = match self.wiring {
            Wiring::InputConcat => [sample.crop.as_slice(), sample.map.grid.as_slice()].concat(),
            Wiring::FcConcat => sample.crop.clone(),
        };
        let cin = Self::input_channels(self.wiring);
        let mut pre1 = vec![0.0; CONV1 * s1 * s1];
        conv3x3_forward(&input, cin, s1, &b[0], &b[1], &mut pre1);
        let (pool1, arg1) = relu_pool(&pre1, CONV1, s1);
        let mut pre2 = vec![0.0; CONV2 * s2 * s2];
        conv3x3_forward(&pool1, CONV1, s2, &b[2], &b[3], &mut pre2);
        let (mut fc_in, arg2) = relu_pool(&pre2, CONV2, s2);
        if self.wiring == Wiring::FcConcat {
            fc_in.extend(pooled_map(&sample.map.grid, s1));
        }
        let k = fc_in.len();
        let hidden_pre: Vec<f64> = (0..HIDDEN).map(|h| b[5][h] + b[4][h * k..(h + 1) * k].iter().zip(&fc_in).map(|(w, x)| w * x).sum::<f64>()).collect();
        let hidden: Vec<f64> = hidden_pre.iter().map(|v| v.max(0.0)).collect();
        let mut logits = [0.0; CLASSES];
        for (c, z) in logits.iter_mut().enumerate() {
            *z = b[7][c] + b[6][c * HIDDEN..(c + 1) * HIDDEN].iter().zip(&hidden).map(|(w, x)| w * x).sum::<f64>();
        }
        Trace {
            input,
            pre1,
            arg1,
            pool1,
            pre2,
            arg2,
            fc_in,
            hidden_pre,
            hidden,
            logits,
        }
    }

    /// `[P(misaligned), P(aligned)]`.
    pub fn forward(&self, sample: &EvaluatorSample) -> Result<[f64; CLASSES]> {
        self.check_sample(sample)?;
        Ok(softmax(&self.trace(sample).logits))
    }

    /// Adds the gradient of this sample's cross-entropy, scaled by `weight`,
    /// into `grad`; returns the loss.
    fn accumulate_gradient(&self, sample: &EvaluatorSample, weight: f64, grad: &mut NetParams) -> f64 {
        let t = self.trace(sample);
        let b = &self.params.blocks;
        let g = &mut grad.blocks;
        let class = sample.label.class();
        let p = softmax(&t.logits);
        let dz = [weight * (p[0] - (class == 0) as u8 as f64), weight * (p[1] - (class == 1) as u8 as f64)];
        let mut d_hidden = vec![0.0; HIDDEN];
        for c in 0..CLASSES {
            g[7][c] += dz[c];
            for h in 0..HIDDEN {
                g[6][c * HIDDEN + h] += dz[c] * t.hidden[h];
                d_hidden[h] += dz[c] * b[6][c * HIDDEN + h];
            }
        }
        let k = t.fc_in.len();
        let mut d_fc_in = vec![0.0; k];
        for h in 0..HIDDEN {
            if t.hidden_pre[h] <= 0.0 {
                continue;
            }
            let dh = d_hidden[h];
            g[5][h] += dh;
            let row = h * k;
            for i in 0..k {
                g[4][row + i] += dh * t.fc_in[i];
                d_fc_in[i] += dh * b[4][row + i];
            }
        }
        let s1 = self.side;
        let s2 = s1 / 2;
        let mut d_pre2 = vec![0.0; t.pre2.len()];
        relu_pool_backward(&t.pre2, &t.arg2, &d_fc_in[..t.arg2.len()], &mut d_pre2);
        let mut d_pool1 = vec![0.0; t.pool1.len()];
        let (g2, rest) = g[2..].split_at_mut(1);
        conv3x3_backward(&t.pool1, CONV1, s2, &b[2], &d_pre2, CONV2, &mut g2[0], &mut rest[0], Some(&mut d_pool1));
        let mut d_pre1 = vec![0.0; t.pre1.len()];
        relu_pool_backward(&t.pre1, &t.arg1, &d_pool1, &mut d_pre1);
        let (g0, rest) = g.split_at_mut(1);
        conv3x3_backward(&t.input, Self::input_channels(self.wiring), s1, &b[0], &d_pre1, CONV1, &mut g0[0], &mut rest[0], None);
        weight * cross_entropy(&t.logits, class)
    }

    /// Mean cross-entropy over `samples` and its gradient.
    pub fn loss_and_gradient(&self, samples: &[&EvaluatorSample]) -> Result<(f64, NetParams)> {
        if samples.is_empty() {
            return Err(Error::InvalidInput("empty evaluator batch".into()));
        }
        for s in samples {
            self.check_sample(s)?;
        }
        let w = 1.0 / samples.len() as f64;
        // Per-sample gradients summed in input order keep training bit-reproducible.
        let parts: Vec<(f64, NetParams)> = samples
            .par_iter()
            .map(|s| {
                let mut g = self.params.zeros_like();
                let l = self.accumulate_gradient(s, w, &mut g);
                (l, g)
            })
            .collect();
        let mut grad = self.params.zeros_like();
        let mut loss = 0.0;
        for (l, g) in &parts {
            loss += l;
            grad.axpy(1.0, g);
        }
        Ok((loss, grad))
    }

    /// Mean cross-entropy over `samples`.
    pub fn loss(&self, samples: &[&EvaluatorSample]) -> Result<f64> {
        let mut total = 0.0;
        for s in samples {
            self.check_sample(s)?;
            total += cross_entropy(&self.trace(s).logits, s.label.class());
        }
        Ok(total / samples.len().max(1) as f64)
    }
}

/// Relative error of the analytic gradient against central differences on
/// one parameter block.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockCheck {
    pub name: &'static str,
    pub checked: usize,
    pub relative_error: f64,
}

/// Compares analytic and central-difference gradients of the mean loss on
/// `samples`, checking at most `per_block` evenly spaced entries per block.
pub fn gradient_check(net: &EvaluatorNet, samples: &[&EvaluatorSample], step: f64, per_block: usize) -> Result<Vec<BlockCheck>> {
    let (_, analytic) = net.loss_and_gradient(samples)?;
    let mut probe = net.clone();
    let mut out = Vec::new();
    for (bi, name) in BLOCK_NAMES.iter().enumerate() {
        let len = net.params.blocks[bi].len();
        let count = per_block.min(len).max(1);
        let mut diff = 0.0;
        let mut norm_a: f64 = 0.0;
        let mut norm_n: f64 = 0.0;
        for j in 0..count {
            let i = j * len / count;
            let orig = net.params.blocks[bi][i];
            probe.params.blocks[bi][i] = orig + step;
            let up = probe.loss(samples)?;
            probe.params.blocks[bi][i] = orig - step;
            let down = probe.loss(samples)?;
            probe.params.blocks[bi][i] = orig;
            let numeric = (up - down) / (2.0 * step);
            let a = analytic.blocks[bi][i];
            diff += (a - numeric).powi(2);
            norm_a += a * a;
            norm_n += numeric * numeric;
        }
        let scale = norm_a.sqrt().max(norm_n.sqrt()).max(1e-12);
        out.push(BlockCheck {
            name,
            checked: count,
            relative_error: diff.sqrt() / scale,
        });
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvaluatorTraining {
    pub wiring: Wiring,
    pub side: usize,
    pub dilation: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for EvaluatorTraining {
    fn default() -> Self {
        Self {
            wiring: Wiring::InputConcat,
            side: DEFAULT_SIDE,
            dilation: DEFAULT_DILATION,
            epochs: 20,
            learning_rate: 0.05,
            batch_size: 16,
            seed: 5,
        }
    }
}

/// Mini-batch gradient descent on the mean cross-entropy. Returns the trained
/// network and the full-data loss after every epoch.
pub fn train_evaluator(samples: &[EvaluatorSample], cfg: &EvaluatorTraining) -> Result<(EvaluatorNet, Vec<f64>)> {
    let net = EvaluatorNet::new(cfg.wiring, cfg.side, cfg.dilation, cfg.seed)?;
    continue_training(net, samples, cfg)
}

/// Like [`train_evaluator`], starting from an existing network.
pub fn continue_training(mut net: EvaluatorNet, samples: &[EvaluatorSample], cfg: &EvaluatorTraining) -> Result<(EvaluatorNet, Vec<f64>)> {
    let positives = samples.iter().filter(|s| s.label == Label::Aligned).count();
    if positives == 0 || positives == samples.len() {
        return Err(Error::InvalidInput("evaluator training needs both aligned and misaligned samples".into()));
    }
    if cfg.batch_size == 0 || !(cfg.learning_rate >= 0.0 && cfg.learning_rate.is_finite()) {
        return Err(Error::InvalidInput("batch size must be positive and the learning rate finite and non-negative".into()));
    }
    let mut order: Vec<usize> = (0..samples.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed);
    let all: Vec<&EvaluatorSample> = samples.iter().collect();
    let mut history = Vec::with_capacity(cfg.epochs);
    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<&EvaluatorSample> = chunk.iter().map(|&i| &samples[i]).collect();
            let (_, grad) = net.loss_and_gradient(&batch)?;
            net.params.axpy(-cfg.learning_rate, &grad);
        }
        if net.params.blocks.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::NumericFailure("evaluator training diverged".into()));
        }
        history.push(net.loss(&all)?);
    }
    Ok((net, history))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub label: Label,
    /// Probability of the aligned class, clamped away from 0 and 1.
    pub confidence: f64,
}

/// Crops around `shape`, renders its landmark map and classifies the pair.
/// Aligned iff the confidence reaches `threshold`.
pub fn evaluate_fitting(net: &EvaluatorNet, image: &ImagePlane, shape: &Shape, threshold: f64) -> Result<Evaluation> {
    if !(0.0..=1.0).contains(&threshold) {
        return Err(Error::InvalidInput(format!("threshold {threshold} outside [0, 1]")));
    }
    let sample = EvaluatorSample::new(image, shape, Label::Aligned, net.side, net.dilation)?;
    let p = net.forward(&sample)?;
    let confidence = p[1].clamp(CONFIDENCE_FLOOR, 1.0 - CONFIDENCE_FLOOR);
    Ok(Evaluation {
        label: if confidence >= threshold { Label::Aligned } else { Label::Misaligned },
        confidence,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SampleGeneration {
    /// Positives have Norm RMSE at most this.
    pub tolerance: f64,
    /// Negatives have Norm RMSE at least `negative_factor · tolerance`.
    pub negative_factor: f64,
    /// Negatives per positive.
    pub negative_ratio: usize,
    /// Variance multiplier applied to the stage-0 perturbation model when
    /// drawing negatives.
    pub inflation: f64,
    pub side: usize,
    pub dilation: usize,
    pub seed: u64,
}

impl Default for SampleGeneration {
    fn default() -> Self {
        Self {
            tolerance: FITTING_TOLERANCE,
            negative_factor: 2.0,
            negative_ratio: 5,
            inflation: 4.0,
            side: DEFAULT_SIDE,
            dilation: DEFAULT_DILATION,
            seed: 9,
        }
    }
}

/// Random displacement of `truth` with Norm RMSE exactly `target`: a shared
/// offset plus per-landmark jitter, rescaled.
fn displaced(truth: &Shape, eyes: Interocular, target: f64, rng: &mut ChaCha8Rng) -> Result<Shape> {
    let shared = Vector2::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
    let offsets: Vec<Vector2<f64>> = (0..truth.len()).map(|_| shared + Vector2::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0))).collect();
    let rms = (offsets.iter().map(|o| o.norm_squared()).sum::<f64>() / offsets.len() as f64).sqrt();
    let k = if rms > 0.0 { target * truth.interocular_distance(eyes)? / rms } else { 0.0 };
    Shape::new(truth.points().iter().zip(&offsets).map(|(p, o)| p + o * k).collect())
}

/// One aligned sample per image (the ground truth displaced by a random
/// Norm RMSE up to the tolerance) and `negative_ratio` misaligned ones drawn
/// from the inflated perturbation model, rejecting draws closer than
/// `negative_factor · tolerance`.
pub fn generate_samples(data: &[(ImagePlane, Shape)], shape_model: &ShapeModel, perturbation: &PerturbationModel, cfg: &SampleGeneration) -> Result<Vec<EvaluatorSample>> {
    let eyes = shape_model.eyes();
    let wide = perturbation.inflated(cfg.inflation);
    let per_image: Vec<Vec<EvaluatorSample>> = data
        .par_iter()
        .enumerate()
        .map(|(i, (image, truth))| {
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_mul(0x2545_f491_4f6c_dd1d).wrapping_add(i as u64));
            let mut out = Vec::with_capacity(1 + cfg.negative_ratio);
            let pos = displaced(truth, eyes, rng.random_range(0.0..=cfg.tolerance), &mut rng)?;
            out.push(EvaluatorSample::new(image, &pos, Label::Aligned, cfg.side, cfg.dilation)?);
            let params = shape_model.params_from_shape(truth)?;
            let floor = cfg.negative_factor * cfg.tolerance;
            let mut attempt = 0u64;
            while out.len() < 1 + cfg.negative_ratio {
                let draws = wide.sample(&params, 0, 8, rng.random::<u64>())?;
                for p in draws {
                    if out.len() > cfg.negative_ratio || !(p[0] > 0.0) {
                        continue;
                    }
                    let s = shape_model.shape_from_params(&p)?;
                    if norm_rmse(&s, truth, eyes)? >= floor {
                        out.push(EvaluatorSample::new(image, &s, Label::Misaligned, cfg.side, cfg.dilation)?);
                    }
                }
                attempt += 1;
                if attempt > 1000 {
                    return Err(Error::NumericFailure("could not draw misaligned samples; raise the inflation".into()));
                }
            }
            Ok(out)
        })
        .collect::<Result<_>>()?;
    Ok(per_image.into_iter().flatten().collect())
}

/// Fraction of samples whose verdict at `threshold` matches their label.
pub fn accuracy(net: &EvaluatorNet, samples: &[EvaluatorSample], threshold: f64) -> Result<f64> {
    let hits = samples
        .par_iter()
        .map(|s| {
            let p = net.forward(s)?[1].clamp(CONFIDENCE_FLOOR, 1.0 - CONFIDENCE_FLOOR);
            let predicted = if p >= threshold { Label::Aligned } else { Label::Misaligned };
            Ok((predicted == s.label) as usize)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(hits.iter().sum::<usize>() as f64 / samples.len().max(1) as f64)
}
