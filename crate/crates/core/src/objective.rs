//! Log-depth normalisation and the training objective.
//!
//! Metric depth maps to `[0, 1]` through `D = ln(d / d_max) / alpha + 1`.
//! Losses are computed on the residual of normalised depths: a masked MSE
//! plus a multi-scale Sobel gradient-matching term weighted by `lambda`.

use std::sync::atomic::{AtomicUsize, Ordering};

use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::mask::sobel_kernel;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DepthSpace {
    Meters,
    Log01,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogDepthParams {
    pub alpha: f64,
    pub d_max: f64,
}

impl LogDepthParams {
    pub const MVSEC: Self = Self { alpha: 3.7, d_max: 80.0 };
    pub const DENSE: Self = Self { alpha: 5.7, d_max: 1000.0 };

    pub fn new(alpha: f64, d_max: f64) -> Result<Self> {
        let p = Self { alpha, d_max };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0 && self.alpha.is_finite()) {
            return Err(Error::Config(format!("alpha must be positive, got {}", self.alpha)));
        }
        if !(self.d_max > 0.0 && self.d_max.is_finite()) {
            return Err(Error::Config(format!("d_max must be positive, got {}", self.d_max)));
        }
        Ok(())
    }

    /// Smallest representable depth, `d_max * exp(-alpha)`; it maps to 0.
    pub fn floor(&self) -> f64 {
        self.d_max * (-self.alpha).exp()
    }

    /// Unclamped forward map.
    #[inline]
    pub fn normalize(&self, depth: f64) -> f64 {
        (depth / self.d_max).ln() / self.alpha + 1.0
    }

    #[inline]
    pub fn denormalize(&self, value: f64) -> f64 {
        self.d_max * (self.alpha * (value - 1.0)).exp()
    }
}

impl Default for LogDepthParams {
    fn default() -> Self {
        Self::MVSEC
    }
}

/// Dense depth with a validity mask.
#[derive(Clone, Debug, PartialEq)]
pub struct DepthRaster {
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
    pub valid: Vec<bool>,
    pub space: DepthSpace,
    pub params: LogDepthParams,
}

impl DepthRaster {
    pub fn new(height: usize, width: usize, data: Vec<f64>, valid: Vec<bool>, space: DepthSpace, params: LogDepthParams) -> Self {
        assert_eq!(data.len(), height * width, "depth data length mismatch");
        assert_eq!(valid.len(), height * width, "validity length mismatch");
        Self {
            height,
            width,
            data,
            valid,
            space,
            params,
        }
    }

    /// Every pixel valid.
    pub fn dense(height: usize, width: usize, data: Vec<f64>, space: DepthSpace, params: LogDepthParams) -> Self {
        let valid = vec![true; data.len()];
        Self::new(height, width, data, valid, space, params)
    }

    pub fn valid_count(&self) -> usize {
        self.valid.iter().filter(|&&v| v).count()
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::from_plane(self.height, self.width, self.data.clone())
    }

    pub fn valid_tensor(&self) -> Tensor {
        let v = self.valid.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect();
        Tensor::from_plane(self.height, self.width, v)
    }

    /// Metres-space copy in which depths below the representable floor are
    /// invalid rather than clamped.
    pub fn with_floor_invalid(&self) -> Self {
        assert_eq!(self.space, DepthSpace::Meters);
        let floor = self.params.floor();
        let mut out = self.clone();
        for (v, &d) in out.valid.iter_mut().zip(&self.data) {
            *v = *v && d.is_finite() && d >= floor * (1.0 - 1e-12);
        }
        out
    }

    pub fn flip_horizontal(&self) -> Self {
        let mut out = self.clone();
        for y in 0..self.height {
            let row = y * self.width;
            out.data[row..row + self.width].reverse();
            out.valid[row..row + self.width].reverse();
        }
        out
    }

    pub fn crop(&self, top: usize, left: usize, height: usize, width: usize) -> Self {
        assert!(top + height <= self.height && left + width <= self.width, "crop out of range");
        let mut data = Vec::with_capacity(height * width);
        let mut valid = Vec::with_capacity(height * width);
        for y in top..top + height {
            let row = y * self.width;
            data.extend_from_slice(&self.data[row + left..row + left + width]);
            valid.extend_from_slice(&self.valid[row + left..row + left + width]);
        }
        Self::new(height, width, data, valid, self.space, self.params)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Normalized {
    pub raster: DepthRaster,
    /// Valid pixels clamped into `[0, 1]`.
    pub clamped: usize,
}

/// Metres to log01. Valid pixels outside `[floor, d_max]` are clamped and
/// counted; a non-positive valid depth is a data error.
pub fn log_normalize(depth: &DepthRaster, params: LogDepthParams) -> Result<Normalized> {
    params.validate()?;
    if depth.space != DepthSpace::Meters {
        return Err(Error::Data("log_normalize expects a metres raster".into()));
    }
    let mut clamped = 0;
    let mut data = Vec::with_capacity(depth.data.len());
    for (i, (&d, &ok)) in depth.data.iter().zip(&depth.valid).enumerate() {
        if !ok {
            data.push(0.0);
            continue;
        }
        if !(d > 0.0) || !d.is_finite() {
            return Err(Error::Data(format!(
                "non-positive depth {d} at pixel ({}, {})",
                i / depth.width,
                i % depth.width
            )));
        }
        let v = params.normalize(d);
        if !(0.0..=1.0).contains(&v) {
            clamped += 1;
        }
        data.push(v.clamp(0.0, 1.0));
    }
    Ok(Normalized {
        raster: DepthRaster::new(depth.height, depth.width, data, depth.valid.clone(), DepthSpace::Log01, params),
        clamped,
    })
}

/// Log01 back to metres. Exact inverse of [`log_normalize`] on `[0, 1]`.
pub fn log_denormalize(depth: &DepthRaster) -> Result<DepthRaster> {
    if depth.space != DepthSpace::Log01 {
        return Err(Error::Data("log_denormalize expects a log01 raster".into()));
    }
    let p = depth.params;
    p.validate()?;
    let data = depth.data.iter().map(|&v| p.denormalize(v)).collect();
    Ok(DepthRaster::new(depth.height, depth.width, data, depth.valid.clone(), DepthSpace::Meters, p))
}

static EMPTY_VALID_WARNINGS: AtomicUsize = AtomicUsize::new(0);

/// Number of loss evaluations so far that found no valid pixel.
pub fn empty_valid_warnings() -> usize {
    EMPTY_VALID_WARNINGS.load(Ordering::Relaxed)
}

fn count_valid(mask: &Tensor) -> usize {
    mask.data().iter().filter(|&&v| v > 0.0).count()
}

/// Mean squared residual over valid pixels, pooled over the batch.
/// `valid` holds 1 for valid and 0 for invalid pixels.
pub fn mse_loss(g: &mut Graph<'_>, residual: Var, valid: &Tensor) -> Var {
    assert_eq!(g.shape(residual), valid.shape(), "residual and validity shapes differ");
    let n = count_valid(valid);
    if n == 0 {
        EMPTY_VALID_WARNINGS.fetch_add(1, Ordering::Relaxed);
        return g.constant(Tensor::scalar(0.0));
    }
    let m = g.constant(valid.clone());
    let r = g.mul(residual, m);
    let sq = g.square(r);
    let s = g.sum(sq);
    g.scale(s, 1.0 / n as f64)
}

/// Pixels whose whole 3x3 neighbourhood lies inside the image and is valid.
pub fn erode_valid(valid: &Tensor) -> Tensor {
    let [n, c, h, w] = valid.shape();
    let mut out = Tensor::zeros(valid.shape());
    for b in 0..n {
        for ch in 0..c {
            let p = valid.plane(b, ch);
            let o = out.plane_mut(b, ch);
            for y in 1..h.saturating_sub(1) {
                for x in 1..w.saturating_sub(1) {
                    let all = (y - 1..=y + 1).all(|yy| (x - 1..=x + 1).all(|xx| p[yy * w + xx] > 0.0));
                    if all {
                        o[y * w + x] = 1.0;
                    }
                }
            }
        }
    }
    out
}

/// 2x2 all-valid pooling matching `avg_pool2` on the residual.
pub fn pool_valid(valid: &Tensor) -> Tensor {
    let [n, c, h, w] = valid.shape();
    let (oh, ow) = (h / 2, w / 2);
    let mut out = Tensor::zeros([n, c, oh, ow]);
    for b in 0..n {
        for ch in 0..c {
            for y in 0..oh {
                for x in 0..ow {
                    let all = [(0, 0), (0, 1), (1, 0), (1, 1)]
                        .iter()
                        .all(|&(dy, dx)| valid.at(b, ch, 2 * y + dy, 2 * x + dx) > 0.0);
                    if all {
                        out.set(b, ch, y, x, 1.0);
                    }
                }
            }
        }
    }
    out
}

/// Sum over `scales` pyramid levels of the mean `|Gx| + |Gy|` of the Sobel
/// residual gradient. Level 0 is full resolution and each further level is a
/// 2x2 average pool. Only pixels whose 3x3 support is valid contribute; a
/// level without such pixels contributes 0.
pub fn grad_matching_loss(g: &mut Graph<'_>, residual: Var, valid: &Tensor, scales: usize) -> Var {
    assert_eq!(g.shape(residual), valid.shape(), "residual and validity shapes differ");
    let kernel = g.constant(sobel_kernel());
    let mut total = g.constant(Tensor::scalar(0.0));
    let mut r = residual;
    let mut v = valid.clone();
    let mut any = false;
    for s in 0..scales {
        if s > 0 {
            let [_, _, h, w] = g.shape(r);
            if h < 2 || w < 2 {
                break;
            }
            r = g.avg_pool2(r);
            v = pool_valid(&v);
        }
        let support = erode_valid(&v);
        let n = count_valid(&support);
        if n == 0 {
            continue;
        }
        any = true;
        let grads = g.conv2d(r, kernel, None, 1, 1);
        let a = g.abs(grads);
        let m = g.constant(support);
        let masked = g.mul(a, m);
        let sum = g.sum(masked);
        let term = g.scale(sum, 1.0 / n as f64);
        total = g.add(total, term);
    }
    if !any {
        EMPTY_VALID_WARNINGS.fetch_add(1, Ordering::Relaxed);
    }
    total
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    pub lambda: f64,
    pub scales: usize,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self { lambda: 0.25, scales: 4 }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct LossTerms {
    pub mse: Var,
    pub grad: Var,
    pub total: Var,
}

impl LossTerms {
    pub fn values(&self, g: &Graph<'_>) -> (f64, f64, f64) {
        (
            g.value(self.mse).data()[0],
            g.value(self.grad).data()[0],
            g.value(self.total).data()[0],
        )
    }
}

/// Loss of one time step; `target` is log01 depth and `valid` 0/1.
pub fn step_loss(g: &mut Graph<'_>, prediction: Var, target: &Tensor, valid: &Tensor, cfg: &LossConfig) -> LossTerms {
    let t = g.constant(target.clone());
    let residual = g.sub(prediction, t);
    let mse = mse_loss(g, residual, valid);
    let grad = grad_matching_loss(g, residual, valid, cfg.scales);
    let weighted = g.scale(grad, cfg.lambda);
    let total = g.add(mse, weighted);
    LossTerms { mse, grad, total }
}

/// Per-step losses summed over the sequence.
pub fn total_loss(
    g: &mut Graph<'_>,
    predictions: &[Var],
    targets: &[Tensor],
    valids: &[Tensor],
    cfg: &LossConfig,
) -> LossTerms {
    assert_eq!(predictions.len(), targets.len(), "one target per prediction");
    assert_eq!(predictions.len(), valids.len(), "one validity mask per prediction");
    let zero = Tensor::scalar(0.0);
    let mut mse = g.constant(zero.clone());
    let mut grad = g.constant(zero.clone());
    let mut total = g.constant(zero);
    for ((&p, t), v) in predictions.iter().zip(targets).zip(valids) {
        let step = step_loss(g, p, t, v, cfg);
        mse = g.add(mse, step.mse);
        grad = g.add(grad, step.grad);
        total = g.add(total, step.total);
    }
    LossTerms { mse, grad, total }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn eval(f: impl FnOnce(&mut Graph<'_>) -> Var) -> f64 {
        let mut g = Graph::new();
        let v = f(&mut g);
        g.value(v).data()[0]
    }

    #[test]
    fn normalize_examples() {
        let p = LogDepthParams::MVSEC;
        assert_eq!(p.normalize(80.0), 1.0);
        assert!(p.normalize(80.0 * (-3.7f64).exp()).abs() < 1e-15);
        assert!((p.floor() - 1.977_882_117_627_151_3).abs() < 1e-12);
    }

    #[test]
    fn normalize_clamps_and_rejects() {
        let p = LogDepthParams::MVSEC;
        let r = DepthRaster::new(1, 4, vec![1.0, 40.0, 100.0, -3.0], vec![true, true, true, false], DepthSpace::Meters, p);
        let n = log_normalize(&r, p).unwrap();
        assert_eq!(n.clamped, 2);
        assert_eq!(n.raster.data[0], 0.0);
        assert_eq!(n.raster.data[2], 1.0);
        let bad = DepthRaster::dense(1, 1, vec![0.0], DepthSpace::Meters, p);
        assert!(matches!(log_normalize(&bad, p), Err(Error::Data(_))));
        assert!(LogDepthParams::new(0.0, 80.0).is_err());
        assert!(LogDepthParams::new(3.7, -1.0).is_err());
    }

    #[test]
    fn floor_depths_become_invalid_for_metrics() {
        let p = LogDepthParams::MVSEC;
        let r = DepthRaster::dense(1, 3, vec![1.0, p.floor(), 10.0], DepthSpace::Meters, p);
        assert_eq!(r.with_floor_invalid().valid, vec![false, true, true]);
    }

    #[test]
    fn mse_examples() {
        let v = Tensor::full([1, 1, 4, 4], 1.0);
        assert_eq!(eval(|g| {
            let r = g.constant(Tensor::zeros([1, 1, 4, 4]));
            mse_loss(g, r, &v)
        }), 0.0);
        assert_eq!(eval(|g| {
            let r = g.constant(Tensor::full([1, 1, 4, 4], 0.5));
            mse_loss(g, r, &v)
        }), 0.25);
    }

    #[test]
    fn empty_validity_counts_a_warning() {
        let before = empty_valid_warnings();
        let v = Tensor::zeros([1, 1, 4, 4]);
        let l = eval(|g| {
            let r = g.constant(Tensor::full([1, 1, 4, 4], 3.0));
            mse_loss(g, r, &v)
        });
        assert_eq!(l, 0.0);
        assert!(empty_valid_warnings() > before);
    }

    #[test]
    fn constant_residual_has_no_gradient_loss() {
        let v = Tensor::full([1, 1, 16, 16], 1.0);
        let l = eval(|g| {
            let r = g.constant(Tensor::full([1, 1, 16, 16], 0.3));
            grad_matching_loss(g, r, &v, 4)
        });
        assert!(l.abs() < 1e-14);
    }

    #[test]
    fn ramp_matches_hand_sobel() {
        // Slope s per column: interior Gx = (1 + 2 + 1) * 2s = 8s, Gy = 0.
        let s = 0.05;
        let ramp = Tensor::from_plane(8, 8, (0..64).map(|i| (i % 8) as f64 * s).collect());
        let v = Tensor::full([1, 1, 8, 8], 1.0);
        let l = eval(|g| {
            let r = g.constant(ramp.clone());
            grad_matching_loss(g, r, &v, 1)
        });
        assert!((l - 8.0 * s).abs() < 1e-12);
    }

    #[test]
    fn erosion_and_pooling() {
        let mut v = Tensor::full([1, 1, 4, 4], 1.0);
        assert_eq!(erode_valid(&v).sum(), 4.0);
        v.set(0, 0, 0, 0, 0.0);
        assert_eq!(erode_valid(&v).at(0, 0, 1, 1), 0.0);
        let p = pool_valid(&v);
        assert_eq!(p.data(), &[0.0, 1.0, 1.0, 1.0]);
    }

    #[test]
    fn single_step_total_is_mse_plus_weighted_grad() {
        let mut g = Graph::new();
        let pred = Tensor::from_plane(8, 8, (0..64).map(|i| ((i * 7) % 11) as f64 / 11.0).collect());
        let target = Tensor::full([1, 1, 8, 8], 0.4);
        let valid = Tensor::full([1, 1, 8, 8], 1.0);
        let p = g.constant(pred);
        let terms = total_loss(&mut g, &[p], &[target], &[valid], &LossConfig::default());
        let (mse, grad, total) = terms.values(&g);
        assert!((total - (mse + 0.25 * grad)).abs() < 1e-14);
        assert!(mse > 0.0 && grad > 0.0);
    }
}
