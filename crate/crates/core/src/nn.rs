//! Parameterised building blocks shared across modules.

use crate::autograd::{Graph, Var};
use crate::params::{Init, ParamBuilder, ParamId};

#[derive(Clone, Debug)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

#[derive(Clone, Copy, Debug)]
pub struct ConvSpec {
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub bias: bool,
    pub weight_init: Init,
    pub bias_init: Init,
}

impl ConvSpec {
    /// Same-size 3x3 convolution.
    pub fn k3() -> Self {
        Self {
            kernel: 3,
            stride: 1,
            padding: 1,
            bias: true,
            weight_init: Init::FanIn { gain: 1.0 },
            bias_init: Init::Zeros,
        }
    }

    /// 3x3 convolution with stride 2 and padding 1 (halves resolution).
    pub fn k3_s2() -> Self {
        Self {
            stride: 2,
            ..Self::k3()
        }
    }

    pub fn k1() -> Self {
        Self {
            kernel: 1,
            padding: 0,
            ..Self::k3()
        }
    }

    pub fn weight_init(mut self, init: Init) -> Self {
        self.weight_init = init;
        self
    }

    pub fn bias_init(mut self, init: Init) -> Self {
        self.bias_init = init;
        self
    }
}

impl Conv2d {
    pub fn new(pb: &mut ParamBuilder<'_>, in_channels: usize, out_channels: usize, spec: ConvSpec) -> Self {
        let weight = pb.tensor(
            "weight",
            [out_channels, in_channels, spec.kernel, spec.kernel],
            spec.weight_init,
        );
        let bias = spec
            .bias
            .then(|| pb.tensor("bias", [1, out_channels, 1, 1], spec.bias_init));
        Self {
            weight,
            bias,
            in_channels,
            out_channels,
            kernel: spec.kernel,
            stride: spec.stride,
            padding: spec.padding,
        }
    }

    pub fn forward(&self, g: &mut Graph<'_>, x: Var) -> Var {
        let w = g.param(self.weight);
        let b = self.bias.map(|b| g.param(b));
        g.conv2d(x, w, b, self.stride, self.padding)
    }
}
