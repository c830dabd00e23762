//! Modality-specific reliability masks.
//!
//! The event mask starts from multi-scale patch densities of the voxel grid;
//! the frame mask starts from the Sobel edge magnitude of the frame. Each
//! prior is mapped to a one-channel mask by a learnable 3x3 convolution, and
//! masks are brought down to the fusion resolution by strided 3x3
//! convolutions, one per pyramid level.

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::event::VoxelGrid;
use crate::frame::GrayFrame;
use crate::nn::{Conv2d, ConvSpec};
use crate::params::{Init, ParamBuilder};
use crate::tensor::Tensor;

pub const DEFAULT_PATCH_SCALES: [usize; 3] = [8, 16, 32];

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MaskSource {
    Event,
    Frame,
    Fused,
}

/// Per-pixel confidence prior `[n, 1, h, w]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ReliabilityMask {
    pub data: Tensor,
    pub source: MaskSource,
}

/// Normalised multi-scale event densities, `[1, scales, h, w]`.
#[derive(Clone, Debug, PartialEq)]
pub struct DensityStack {
    pub scales: Vec<usize>,
    pub data: Tensor,
}

/// Patch density of one plane: the number of nonzero cells per
/// `patch x patch` block divided by the mean count over all blocks, broadcast
/// back to every pixel of its block. Planes whose sides are not multiples of
/// `patch` are replicate-padded first and cropped afterwards. A plane with no
/// nonzero cell yields zeros.
pub fn patch_density_plane(plane: &[f64], height: usize, width: usize, patch: usize) -> Result<Vec<f64>> {
    if patch == 0 {
        return Err(Error::Config("patch size must be positive".into()));
    }
    assert_eq!(plane.len(), height * width);
    let ph = height.div_ceil(patch);
    let pw = width.div_ceil(patch);
    let mut counts = vec![0usize; ph * pw];
    for py in 0..ph * patch {
        let sy = py.min(height - 1);
        for px in 0..pw * patch {
            let sx = px.min(width - 1);
            if plane[sy * width + sx] != 0.0 {
                counts[(py / patch) * pw + px / patch] += 1;
            }
        }
    }
    let total: usize = counts.iter().sum();
    let mut out = vec![0.0; height * width];
    if total == 0 {
        return Ok(out);
    }
    let mean = total as f64 / counts.len() as f64;
    for y in 0..height {
        for x in 0..width {
            out[y * width + x] = counts[(y / patch) * pw + x / patch] as f64 / mean;
        }
    }
    Ok(out)
}

/// Patch density of a voxel grid: per-bin densities averaged over the bins
/// that hold at least one deposit.
pub fn patch_density(grid: &VoxelGrid, patch: usize) -> Result<Vec<f64>> {
    if patch == 0 {
        return Err(Error::Config("patch size must be positive".into()));
    }
    let (h, w) = (grid.height(), grid.width());
    let mut acc = vec![0.0; h * w];
    let mut populated = 0usize;
    for b in 0..grid.bins() {
        let plane = grid.bin(b);
        if plane.iter().all(|&v| v == 0.0) {
            continue;
        }
        populated += 1;
        for (a, d) in acc.iter_mut().zip(patch_density_plane(plane, h, w, patch)?) {
            *a += d;
        }
    }
    if populated > 1 {
        let inv = 1.0 / populated as f64;
        acc.iter_mut().for_each(|v| *v *= inv);
    }
    Ok(acc)
}

pub fn density_stack(grid: &VoxelGrid, scales: &[usize]) -> Result<DensityStack> {
    let (h, w) = (grid.height(), grid.width());
    let mut data = Vec::with_capacity(scales.len() * h * w);
    for &s in scales {
        data.extend(patch_density(grid, s)?);
    }
    Ok(DensityStack {
        scales: scales.to_vec(),
        data: Tensor::new([1, scales.len(), h, w], data),
    })
}

/// Sobel kernels `[2, 1, 3, 3]`: channel 0 is the x derivative, channel 1 the
/// y derivative.
pub fn sobel_kernel() -> Tensor {
    #[rustfmt::skip]
    let k = vec![
        -1.0, 0.0, 1.0,
        -2.0, 0.0, 2.0,
        -1.0, 0.0, 1.0,
        -1.0, -2.0, -1.0,
         0.0,  0.0,  0.0,
         1.0,  2.0,  1.0,
    ];
    Tensor::new([2, 1, 3, 3], k)
}

/// Sobel responses `[n, 2, h, w]` (x then y) of a single-channel map with
/// replicate padding. Each response is a sum of opposite-pixel differences,
/// so a constant map gives exactly zero.
pub fn sobel_gradients(t: &Tensor) -> Tensor {
    assert_eq!(t.channels(), 1, "sobel expects one channel");
    let [n, _, h, w] = t.shape();
    let mut out = Tensor::zeros([n, 2, h, w]);
    for b in 0..n {
        let p = t.plane(b, 0);
        let at = |y: isize, x: isize| {
            let y = y.clamp(0, h as isize - 1) as usize;
            let x = x.clamp(0, w as isize - 1) as usize;
            p[y * w + x]
        };
        for y in 0..h as isize {
            for x in 0..w as isize {
                let gx = (at(y - 1, x + 1) - at(y - 1, x - 1))
                    + 2.0 * (at(y, x + 1) - at(y, x - 1))
                    + (at(y + 1, x + 1) - at(y + 1, x - 1));
                let gy = (at(y + 1, x - 1) - at(y - 1, x - 1))
                    + 2.0 * (at(y + 1, x) - at(y - 1, x))
                    + (at(y + 1, x + 1) - at(y - 1, x + 1));
                let i = y as usize * w + x as usize;
                out.plane_mut(b, 0)[i] = gx;
                out.plane_mut(b, 1)[i] = gy;
            }
        }
    }
    out
}

/// Edge magnitude `sqrt(gx^2 + gy^2)`.
pub fn sobel_edges(frame: &GrayFrame) -> GrayFrame {
    let grads = sobel_gradients(&frame.to_tensor());
    let (gx, gy) = (grads.plane(0, 0), grads.plane(0, 1));
    let data = gx.iter().zip(gy).map(|(a, b)| a.hypot(*b)).collect();
    GrayFrame::new(frame.height, frame.width, data)
}

/// Mean Sobel magnitude, used as a frame edge-energy statistic.
pub fn edge_energy(frame: &GrayFrame) -> f64 {
    sobel_edges(frame).mean()
}

/// Learnable 3x3 head mapping a prior to a one-channel mask.
#[derive(Clone, Debug)]
pub struct MaskHead {
    pub conv: Conv2d,
    pub source: MaskSource,
}

impl MaskHead {
    /// Head weights start at N(0, 0.01) with zero bias.
    pub fn new(pb: &mut ParamBuilder<'_>, in_channels: usize, source: MaskSource) -> Self {
        let spec = ConvSpec::k3().weight_init(Init::Normal(0.01));
        Self {
            conv: Conv2d::new(pb, in_channels, 1, spec),
            source,
        }
    }

    pub fn forward(&self, g: &mut Graph<'_>, prior: Var) -> Var {
        self.conv.forward(g, prior)
    }

    /// Evaluate the head outside of training.
    pub fn evaluate(&self, params: &crate::params::ParamStore, prior: &Tensor) -> ReliabilityMask {
        let mut g = Graph::with_params(params);
        let x = g.constant(prior.clone());
        let m = self.forward(&mut g, x);
        ReliabilityMask {
            data: g.value(m).clone(),
            source: self.source,
        }
    }
}

/// Event mask from a voxel grid: densities at every patch scale, then the head.
pub fn init_event_mask(
    params: &crate::params::ParamStore,
    head: &MaskHead,
    grid: &VoxelGrid,
    scales: &[usize],
) -> Result<ReliabilityMask> {
    let stack = density_stack(grid, scales)?;
    Ok(head.evaluate(params, &stack.data))
}

/// Frame mask from a frame: Sobel magnitude, then the head.
pub fn init_frame_mask(params: &crate::params::ParamStore, head: &MaskHead, frame: &GrayFrame) -> ReliabilityMask {
    head.evaluate(params, &sobel_edges(frame).to_tensor())
}

/// Strided 3x3 convolutions (stride 2, padding 1) taking a full-resolution
/// mask down `levels` pyramid levels. Each stage starts as a 3x3 box filter.
#[derive(Clone, Debug)]
pub struct MaskDownsampler {
    pub stages: Vec<Conv2d>,
}

impl MaskDownsampler {
    pub fn new(pb: &mut ParamBuilder<'_>, levels: usize) -> Self {
        let spec = ConvSpec::k3_s2().weight_init(Init::Constant(1.0 / 9.0));
        let stages = (0..levels)
            .map(|l| Conv2d::new(&mut pb.pp(&format!("down{l}")), 1, 1, spec))
            .collect();
        Self { stages }
    }

    pub fn forward(&self, g: &mut Graph<'_>, mask: Var) -> Var {
        self.stages.iter().fold(mask, |m, s| s.forward(g, m))
    }
}
