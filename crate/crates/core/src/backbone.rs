//! Per-modality pyramid encoders.
//!
//! The encoder is a stack of strided 3x3 convolutions, each followed by an
//! ELU, so level `l` sits at `1 / 2^l` of the input resolution. Anything
//! implementing [`Encoder`] can replace it.

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::nn::{Conv2d, ConvSpec};
use crate::params::ParamBuilder;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Modality {
    Event,
    Frame,
}

/// Multi-level features of one modality, finest level first.
#[derive(Clone, Debug, PartialEq)]
pub struct FeaturePyramid {
    pub modality: Modality,
    pub levels: Vec<Tensor>,
}

pub trait Encoder {
    fn modality(&self) -> Modality;

    /// Output channels per level, finest first.
    fn channels(&self) -> &[usize];

    fn num_levels(&self) -> usize {
        self.channels().len()
    }

    /// Feature vars for every level, finest first.
    fn encode(&self, g: &mut Graph<'_>, input: Var) -> Result<Vec<Var>>;
}

#[derive(Clone, Debug)]
pub struct PyramidEncoder {
    modality: Modality,
    channels: Vec<usize>,
    stages: Vec<Conv2d>,
}

impl PyramidEncoder {
    pub fn new(pb: &mut ParamBuilder<'_>, modality: Modality, in_channels: usize, channels: &[usize]) -> Self {
        let mut c_in = in_channels;
        let stages = channels
            .iter()
            .enumerate()
            .map(|(l, &c)| {
                let conv = Conv2d::new(&mut pb.pp(&format!("level{}", l + 1)), c_in, c, ConvSpec::k3_s2());
                c_in = c;
                conv
            })
            .collect();
        Self {
            modality,
            channels: channels.to_vec(),
            stages,
        }
    }

    pub fn stages(&self) -> &[Conv2d] {
        &self.stages
    }

    /// Run outside of training and collect the pyramid values.
    pub fn evaluate(&self, params: &crate::params::ParamStore, input: &Tensor) -> Result<FeaturePyramid> {
        let mut g = Graph::with_params(params);
        let x = g.constant(input.clone());
        let levels = self.encode(&mut g, x)?;
        Ok(FeaturePyramid {
            modality: self.modality,
            levels: levels.into_iter().map(|v| g.value(v).clone()).collect(),
        })
    }
}

impl Encoder for PyramidEncoder {
    fn modality(&self) -> Modality {
        self.modality
    }

    fn channels(&self) -> &[usize] {
        &self.channels
    }

    fn encode(&self, g: &mut Graph<'_>, input: Var) -> Result<Vec<Var>> {
        let [_, c, h, w] = g.shape(input);
        let factor = 1usize << self.stages.len();
        if h % factor != 0 || w % factor != 0 {
            return Err(Error::Config(format!(
                "input {h}x{w} is not divisible by {factor}; pad or crop to a multiple of {factor}"
            )));
        }
        if let Some(first) = self.stages.first() {
            if first.in_channels != c {
                return Err(Error::Config(format!(
                    "encoder expects {} input channels, got {c}",
                    first.in_channels
                )));
            }
        }
        let mut x = input;
        let mut levels = Vec::with_capacity(self.stages.len());
        for stage in &self.stages {
            let y = stage.forward(g, x);
            x = g.elu(y);
            levels.push(x);
        }
        Ok(levels)
    }
}
