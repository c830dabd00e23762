//! The full event-frame depth network.
//!
//! Per time step: mask heads turn the density and edge priors into
//! full-resolution reliability masks, two pyramid encoders extract event and
//! frame features, the masks are taken down to the deepest level, the CL
//! chain fuses the deepest features, and the refinement module decodes,
//! updates the recurrent state and propagates the coarse depth.

use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::backbone::{Encoder, Modality, PyramidEncoder};
use crate::error::{Error, Result};
use crate::fusion::{AifModule, FusionOutput};
use crate::mask::{MaskDownsampler, MaskHead, MaskSource};
use crate::params::{seeded_rng, ParamBuilder, ParamGroup, ParamStore};
use crate::refine::{RdrConfig, RdrModule, RdrOutput};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Ablation {
    #[default]
    None,
    /// Event features and the event mask are replaced by zeros.
    FrameOnly,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub bins: usize,
    pub patch_scales: Vec<usize>,
    pub encoder_channels: Vec<usize>,
    pub n_blocks: usize,
    pub reduction: usize,
    /// Decoder width after the reduction and after each skip stage.
    pub decoder_widths: Vec<usize>,
    pub gru_hidden: usize,
    pub neighbors: usize,
    pub offset_radius: f64,
    pub iterations: usize,
    pub gamma_init: Option<f64>,
    pub ablation: Ablation,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            bins: 5,
            patch_scales: vec![8, 16, 32],
            encoder_channels: vec![16, 32, 64],
            n_blocks: 3,
            reduction: 4,
            decoder_widths: vec![64, 32, 16],
            gru_hidden: 16,
            neighbors: 8,
            offset_radius: 6.0,
            iterations: 18,
            gamma_init: None,
            ablation: Ablation::None,
        }
    }
}

impl ModelConfig {
    /// Narrow variant for single-core experiments.
    pub fn desk() -> Self {
        Self {
            encoder_channels: vec![8, 16, 16],
            decoder_widths: vec![16, 16, 8],
            gru_hidden: 8,
            reduction: 2,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.bins == 0 {
            return Err(Error::Config("bins must be positive".into()));
        }
        if self.patch_scales.is_empty() || self.patch_scales.contains(&0) {
            return Err(Error::Config("patch scales must be a non-empty list of positive sizes".into()));
        }
        if self.encoder_channels.len() < 2 {
            return Err(Error::Config("the encoder needs at least two levels".into()));
        }
        if self.decoder_widths.len() != self.encoder_channels.len() {
            return Err(Error::Config(format!(
                "decoder_widths needs {} entries (reduction plus one per skip level), got {}",
                self.encoder_channels.len(),
                self.decoder_widths.len()
            )));
        }
        if self.n_blocks == 0 {
            return Err(Error::Config("n_blocks must be positive".into()));
        }
        if self.neighbors == 0 || self.gru_hidden == 0 {
            return Err(Error::Config("neighbors and gru_hidden must be positive".into()));
        }
        Ok(())
    }

    /// Input height and width must be multiples of this.
    pub fn size_multiple(&self) -> usize {
        1 << self.encoder_channels.len()
    }
}

/// Network inputs of one time step, batched along the first axis.
#[derive(Clone, Debug, PartialEq)]
pub struct StepInput {
    /// `[n, B, H, W]` standardised voxel grids.
    pub voxels: Tensor,
    /// `[n, 1, H, W]` frames mapped to `[-1, 1]`.
    pub frames: Tensor,
    /// `[n, S, H, W]` event density priors.
    pub event_priors: Tensor,
    /// `[n, 1, H, W]` Sobel magnitude priors.
    pub frame_priors: Tensor,
}

#[derive(Clone, Debug)]
pub struct StepOutput {
    pub event_mask: Var,
    pub frame_mask: Var,
    pub fusion: FusionOutput,
    pub rdr: RdrOutput,
}

impl StepOutput {
    /// Refined log01 depth, `[n, 1, H, W]`.
    pub fn depth(&self) -> Var {
        self.rdr.refined
    }
}

#[derive(Clone, Debug)]
pub struct SrfNet {
    pub config: ModelConfig,
    pub event_mask_head: MaskHead,
    pub frame_mask_head: MaskHead,
    pub event_encoder: PyramidEncoder,
    pub frame_encoder: PyramidEncoder,
    pub event_mask_down: MaskDownsampler,
    pub frame_mask_down: MaskDownsampler,
    pub aif: AifModule,
    pub rdr: RdrModule,
}

impl SrfNet {
    pub fn build(pb: &mut ParamBuilder<'_>, config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let levels = config.encoder_channels.len();
        let deepest = *config.encoder_channels.last().unwrap();
        let mut fusion = pb.with_group(ParamGroup::Fusion);
        let event_mask_head = MaskHead::new(
            &mut fusion.pp("event_mask_head"),
            config.patch_scales.len(),
            MaskSource::Event,
        );
        let frame_mask_head = MaskHead::new(&mut fusion.pp("frame_mask_head"), 1, MaskSource::Frame);
        let event_encoder = PyramidEncoder::new(
            &mut fusion.pp("event_encoder"),
            Modality::Event,
            config.bins,
            &config.encoder_channels,
        );
        let frame_encoder = PyramidEncoder::new(&mut fusion.pp("frame_encoder"), Modality::Frame, 1, &config.encoder_channels);
        let event_mask_down = MaskDownsampler::new(&mut fusion.pp("event_mask_down"), levels);
        let frame_mask_down = MaskDownsampler::new(&mut fusion.pp("frame_mask_down"), levels);
        let aif = AifModule::new(&mut fusion.pp("aif"), deepest, config.n_blocks, config.reduction)?;
        let skip_channels: Vec<usize> = config.encoder_channels[..levels - 1]
            .iter()
            .rev()
            .map(|&c| 2 * c)
            .collect();
        let rdr = RdrModule::new(
            &mut pb.pp("rdr"),
            2 * deepest,
            &skip_channels,
            &config.decoder_widths,
            config.gru_hidden,
            config.n_blocks,
            config.reduction,
            RdrConfig {
                neighbors: config.neighbors,
                offset_radius: config.offset_radius,
                iterations: config.iterations,
                gamma_init: config.gamma_init,
            },
        )?;
        Ok(Self {
            config,
            event_mask_head,
            frame_mask_head,
            event_encoder,
            frame_encoder,
            event_mask_down,
            frame_mask_down,
            aif,
            rdr,
        })
    }

    /// Fresh parameters drawn from `seed`.
    pub fn new(config: ModelConfig, seed: u64) -> Result<(Self, ParamStore)> {
        let mut store = ParamStore::new();
        let mut rng = seeded_rng(seed);
        let net = {
            let mut pb = ParamBuilder::new(&mut store, &mut rng, ParamGroup::Fusion);
            Self::build(&mut pb, config)?
        };
        Ok((net, store))
    }

    fn check_input(&self, input: &StepInput) -> Result<()> {
        let [n, b, h, w] = input.voxels.shape();
        let m = self.config.size_multiple();
        if h % m != 0 || w % m != 0 {
            return Err(Error::Config(format!(
                "input {h}x{w} is not divisible by {m}; pad or crop to a multiple of {m}"
            )));
        }
        if b != self.config.bins {
            return Err(Error::Config(format!("expected {} voxel bins, got {b}", self.config.bins)));
        }
        let s = self.config.patch_scales.len();
        for (what, t, c) in [
            ("frames", &input.frames, 1),
            ("event priors", &input.event_priors, s),
            ("frame priors", &input.frame_priors, 1),
        ] {
            if t.shape() != [n, c, h, w] {
                return Err(Error::Config(format!(
                    "{what} have shape {:?}, expected {:?}",
                    t.shape(),
                    [n, c, h, w]
                )));
            }
        }
        Ok(())
    }

    /// One time step. `state` is the recurrent state from the previous step.
    pub fn step(&self, g: &mut Graph<'_>, input: &StepInput, state: Option<Var>) -> Result<StepOutput> {
        self.check_input(input)?;
        let [_, _, h, w] = input.voxels.shape();
        let frame_only = self.config.ablation == Ablation::FrameOnly;
        let frame_prior = g.constant(input.frame_priors.clone());
        let frame_mask = self.frame_mask_head.forward(g, frame_prior);
        let frames = g.constant(input.frames.clone());
        let frame_levels = self.frame_encoder.encode(g, frames)?;
        let (event_mask, event_levels) = if frame_only {
            let zero_mask = g.constant(Tensor::zeros(g.shape(frame_mask)));
            let zeros = frame_levels
                .iter()
                .map(|&f| g.constant(Tensor::zeros(g.shape(f))))
                .collect::<Vec<_>>();
            (zero_mask, zeros)
        } else {
            let event_prior = g.constant(input.event_priors.clone());
            let mask = self.event_mask_head.forward(g, event_prior);
            let voxels = g.constant(input.voxels.clone());
            (mask, self.event_encoder.encode(g, voxels)?)
        };
        let deep_event_mask = if frame_only {
            let [n, _, dh, dw] = g.shape(*event_levels.last().unwrap());
            g.constant(Tensor::zeros([n, 1, dh, dw]))
        } else {
            self.event_mask_down.forward(g, event_mask)
        };
        let deep_frame_mask = self.frame_mask_down.forward(g, frame_mask);
        let fe = *event_levels.last().unwrap();
        let fi = *frame_levels.last().unwrap();
        let fusion = self.aif.forward(g, fe, fi, deep_event_mask, deep_frame_mask)?;
        let levels = event_levels.len();
        let skips: Vec<(Var, Var)> = (0..levels - 1)
            .rev()
            .map(|l| (event_levels[l], frame_levels[l]))
            .collect();
        let rdr = self.rdr.forward(g, fusion.fused, fusion.mask_stack, &skips, state, h, w);
        Ok(StepOutput {
            event_mask,
            frame_mask,
            fusion,
            rdr,
        })
    }

    /// Run a whole sequence, carrying the recurrent state across steps.
    pub fn forward_sequence(&self, g: &mut Graph<'_>, inputs: &[StepInput]) -> Result<Vec<StepOutput>> {
        let mut state = None;
        let mut outputs = Vec::with_capacity(inputs.len());
        for input in inputs {
            let out = self.step(g, input, state)?;
            state = Some(out.rdr.state);
            outputs.push(out);
        }
        Ok(outputs)
    }

    /// Refined log01 depth for every step, without gradients.
    pub fn predict(&self, params: &ParamStore, inputs: &[StepInput]) -> Result<Vec<Tensor>> {
        let mut g = Graph::with_params(params);
        let outs = self.forward_sequence(&mut g, inputs)?;
        Ok(outs.iter().map(|o| g.value(o.depth()).clone()).collect())
    }
}
