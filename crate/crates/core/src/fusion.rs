//! Attention-based interactive fusion.
//!
//! A chain of consensus-learning (CL) blocks fuses event and frame features
//! at the deepest pyramid level. Each block emphasises both modalities with
//! their masks, fuses them with a channel-attention layer, feeds the fused
//! feature back into both branches and residually updates both masks with a
//! fused mask. The last block adds the emphasised features instead of
//! concatenating them and produces the final fused feature.
//!
//! Channel split order for feedback: the first `C` channels of the fused
//! feature go to the event branch, the last `C` to the frame branch.

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::nn::{Conv2d, ConvSpec};
use crate::params::{Init, ParamBuilder};

/// `features * (1 + mask)`, the mask broadcast over channels.
pub fn emphasize(g: &mut Graph<'_>, features: Var, mask: Var) -> Var {
    let [n, _, h, w] = g.shape(features);
    let ms = g.shape(mask);
    assert_eq!(ms, [n, 1, h, w], "mask {ms:?} does not match features {:?}", g.shape(features));
    let gain = g.add_scalar(mask, 1.0);
    g.mul(features, gain)
}

/// Squeeze-and-excitation gating followed by a 3x3 convolution.
#[derive(Clone, Debug)]
pub struct ChannelAttention {
    pub squeeze: Conv2d,
    pub excite: Conv2d,
    pub conv: Conv2d,
}

impl ChannelAttention {
    pub fn new(pb: &mut ParamBuilder<'_>, in_channels: usize, out_channels: usize, reduction: usize) -> Self {
        let hidden = (in_channels / reduction.max(1)).max(1);
        Self {
            squeeze: Conv2d::new(&mut pb.pp("squeeze"), in_channels, hidden, ConvSpec::k1()),
            excite: Conv2d::new(&mut pb.pp("excite"), hidden, in_channels, ConvSpec::k1()),
            conv: Conv2d::new(
                &mut pb.pp("conv"),
                in_channels,
                out_channels,
                ConvSpec::k3().weight_init(Init::FanIn { gain: 0.5 }),
            ),
        }
    }

    /// Per-channel gates in `(0, 1)`, shape `[n, c, 1, 1]`.
    pub fn gates(&self, g: &mut Graph<'_>, x: Var) -> Var {
        let pooled = g.mean_hw(x);
        let s = self.squeeze.forward(g, pooled);
        let s = g.relu(s);
        let e = self.excite.forward(g, s);
        g.sigmoid(e)
    }

    pub fn forward(&self, g: &mut Graph<'_>, x: Var) -> Var {
        let gates = self.gates(g, x);
        let gated = g.mul(x, gates);
        self.conv.forward(g, gated)
    }
}

/// 1x1 convolution and sigmoid producing a fused mask in `(0, 1)`.
#[derive(Clone, Debug)]
pub struct FusedMaskHead {
    pub conv: Conv2d,
}

impl FusedMaskHead {
    pub fn new(pb: &mut ParamBuilder<'_>, in_channels: usize) -> Self {
        Self {
            conv: Conv2d::new(pb, in_channels, 1, ConvSpec::k1().weight_init(Init::Normal(0.01))),
        }
    }

    pub fn forward(&self, g: &mut Graph<'_>, fused: Var) -> Var {
        let logits = self.conv.forward(g, fused);
        g.sigmoid(logits)
    }
}

/// Features and masks of both modalities entering or leaving a CL block.
#[derive(Clone, Copy, Debug)]
pub struct ClState {
    pub event_features: Var,
    pub frame_features: Var,
    pub event_mask: Var,
    pub frame_mask: Var,
}

#[derive(Clone, Copy, Debug)]
pub struct ClOutput {
    /// Updated state; equal to the input state for the last block.
    pub state: ClState,
    pub fused: Var,
    pub fused_mask: Var,
    /// Feedback features `(event, frame)` added to the branches; `None` for
    /// the last block.
    pub feedback: Option<(Var, Var)>,
}

#[derive(Clone, Debug)]
pub struct ClBlock {
    pub attention: ChannelAttention,
    pub mask_head: FusedMaskHead,
    pub channels: usize,
    pub is_last: bool,
}

impl ClBlock {
    pub fn new(pb: &mut ParamBuilder<'_>, channels: usize, reduction: usize, is_last: bool) -> Self {
        let attn_in = if is_last { channels } else { 2 * channels };
        Self {
            attention: ChannelAttention::new(&mut pb.pp("attention"), attn_in, 2 * channels, reduction),
            mask_head: FusedMaskHead::new(&mut pb.pp("mask_head"), 2 * channels),
            channels,
            is_last,
        }
    }

    pub fn forward(&self, g: &mut Graph<'_>, state: ClState) -> Result<ClOutput> {
        let c = self.channels;
        for f in [state.event_features, state.frame_features] {
            let got = g.shape(f)[1];
            if got != c {
                return Err(Error::Config(format!("CL block expects {c} channels, got {got}")));
            }
        }
        let fe = emphasize(g, state.event_features, state.event_mask);
        let fi = emphasize(g, state.frame_features, state.frame_mask);
        if self.is_last {
            let combined = g.add(fe, fi);
            let fused = self.attention.forward(g, combined);
            let fused_mask = self.mask_head.forward(g, fused);
            return Ok(ClOutput {
                state,
                fused,
                fused_mask,
                feedback: None,
            });
        }
        let combined = g.concat(&[fe, fi]);
        let fused = self.attention.forward(g, combined);
        let fused_mask = self.mask_head.forward(g, fused);
        let back_e = g.slice_channels(fused, 0, c);
        let back_i = g.slice_channels(fused, c, c);
        let next = ClState {
            event_features: g.add(state.event_features, back_e),
            frame_features: g.add(state.frame_features, back_i),
            event_mask: g.add(state.event_mask, fused_mask),
            frame_mask: g.add(state.frame_mask, fused_mask),
        };
        Ok(ClOutput {
            state: next,
            fused,
            fused_mask,
            feedback: Some((back_e, back_i)),
        })
    }
}

#[derive(Clone, Debug)]
pub struct FusionOutput {
    /// Final fused feature, `[n, 2C, h, w]`.
    pub fused: Var,
    /// Fused masks of every block stacked along channels, `[n, blocks, h, w]`.
    pub mask_stack: Var,
    pub block_outputs: Vec<ClOutput>,
}

/// The CL block chain. Blocks do not share parameters.
#[derive(Clone, Debug)]
pub struct AifModule {
    pub blocks: Vec<ClBlock>,
    pub channels: usize,
}

impl AifModule {
    pub fn new(pb: &mut ParamBuilder<'_>, channels: usize, n_blocks: usize, reduction: usize) -> Result<Self> {
        if n_blocks == 0 {
            return Err(Error::Config("fusion needs at least one CL block".into()));
        }
        let blocks = (0..n_blocks)
            .map(|i| ClBlock::new(&mut pb.pp(&format!("block{i}")), channels, reduction, i + 1 == n_blocks))
            .collect();
        Ok(Self { blocks, channels })
    }

    /// Fuse the deepest-level features. Masks must already be at the
    /// feature resolution.
    pub fn forward(
        &self,
        g: &mut Graph<'_>,
        event_features: Var,
        frame_features: Var,
        event_mask: Var,
        frame_mask: Var,
    ) -> Result<FusionOutput> {
        let se = g.shape(event_features);
        let si = g.shape(frame_features);
        if se != si {
            return Err(Error::Config(format!("event features {se:?} and frame features {si:?} differ")));
        }
        let mut state = ClState {
            event_features,
            frame_features,
            event_mask,
            frame_mask,
        };
        let mut outputs = Vec::with_capacity(self.blocks.len());
        for block in &self.blocks {
            let out = block.forward(g, state)?;
            state = out.state;
            outputs.push(out);
        }
        let masks: Vec<Var> = outputs.iter().map(|o| o.fused_mask).collect();
        let mask_stack = g.concat(&masks);
        let fused = outputs.last().expect("at least one block").fused;
        Ok(FusionOutput {
            fused,
            mask_stack,
            block_outputs: outputs,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::{seeded_rng, ParamGroup, ParamStore};
    use crate::tensor::Tensor;

    #[test]
    fn emphasize_examples() {
        let mut rng = seeded_rng(0);
        let f = Tensor::randn([2, 3, 4, 5], 1.0, &mut rng);
        let m = Tensor::randn([2, 1, 4, 5], 1.0, &mut rng);
        let mut g = Graph::new();
        let fv = g.constant(f.clone());
        let zero = g.constant(Tensor::zeros([2, 1, 4, 5]));
        let one = g.constant(Tensor::full([2, 1, 4, 5], 1.0));
        let mv = g.constant(m.clone());
        let a = emphasize(&mut g, fv, zero);
        assert_eq!(g.value(a), &f);
        let b = emphasize(&mut g, fv, one);
        assert_eq!(g.value(b), &f.scale(2.0));
        let c = emphasize(&mut g, fv, mv);
        for n in 0..2 {
            for ch in 0..3 {
                for y in 0..4 {
                    for x in 0..5 {
                        let expected = f.at(n, ch, y, x) * (1.0 + m.at(n, 0, y, x));
                        assert_eq!(g.value(c).at(n, ch, y, x), expected);
                    }
                }
            }
        }
    }

    #[test]
    #[should_panic(expected = "does not match")]
    fn emphasize_rejects_mismatched_mask() {
        let mut g = Graph::new();
        let f = g.constant(Tensor::zeros([1, 2, 4, 4]));
        let m = g.constant(Tensor::zeros([1, 1, 2, 2]));
        emphasize(&mut g, f, m);
    }

    fn attention(c_in: usize, c_out: usize) -> (ParamStore, ChannelAttention) {
        let mut store = ParamStore::new();
        let mut rng = seeded_rng(4);
        let a = {
            let mut pb = ParamBuilder::new(&mut store, &mut rng, ParamGroup::Fusion);
            ChannelAttention::new(&mut pb.pp("attn"), c_in, c_out, 2)
        };
        (store, a)
    }

    #[test]
    fn attention_zero_input_zero_output() {
        let (store, a) = attention(4, 4);
        let mut g = Graph::with_params(&store);
        let x = g.constant(Tensor::zeros([1, 4, 3, 3]));
        let y = a.forward(&mut g, x);
        assert!(g.value(y).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn attention_with_open_gates_and_identity_conv_is_identity() {
        let (mut store, a) = attention(4, 4);
        store.set(a.excite.bias.unwrap(), Tensor::full([1, 4, 1, 1], 60.0));
        let mut w = Tensor::zeros([4, 4, 3, 3]);
        for c in 0..4 {
            w.set(c, c, 1, 1, 1.0);
        }
        store.set(a.conv.weight, w);
        let mut rng = seeded_rng(7);
        let x = Tensor::randn([2, 4, 5, 5], 1.0, &mut rng);
        let mut g = Graph::with_params(&store);
        let xv = g.constant(x.clone());
        let y = a.forward(&mut g, xv);
        for (p, q) in g.value(y).data().iter().zip(x.data()) {
            assert!((p - q).abs() < 1e-12);
        }
    }

    #[test]
    fn fused_mask_head_range_and_monotonic_bias() {
        let mut store = ParamStore::new();
        let mut rng = seeded_rng(5);
        let head = {
            let mut pb = ParamBuilder::new(&mut store, &mut rng, ParamGroup::Fusion);
            FusedMaskHead::new(&mut pb.pp("head"), 4)
        };
        let zeros = store.clone();
        let mut zeros = zeros;
        zeros.set(head.conv.weight, Tensor::zeros([1, 4, 1, 1]));
        let mut g = Graph::with_params(&zeros);
        let x = g.constant(Tensor::randn([1, 4, 3, 3], 1.0, &mut rng));
        let m = head.forward(&mut g, x);
        assert!(g.value(m).data().iter().all(|&v| v == 0.5));

        let input = Tensor::randn([1, 4, 6, 6], 3.0, &mut rng);
        let eval = |store: &ParamStore| {
            let mut g = Graph::with_params(store);
            let x = g.constant(input.clone());
            let m = head.forward(&mut g, x);
            g.value(m).clone()
        };
        let low = eval(&store);
        assert!(low.data().iter().all(|&v| v > 0.0 && v < 1.0));
        let mut raised = store.clone();
        raised.set(head.conv.bias.unwrap(), Tensor::full([1, 1, 1, 1], 0.5));
        let high = eval(&raised);
        assert!(low.data().iter().zip(high.data()).all(|(a, b)| b > a));
    }

    fn zero_params(store: &mut ParamStore) {
        for id in store.ids().collect::<Vec<_>>() {
            let shape = store.get(id).shape();
            store.set(id, Tensor::zeros(shape));
        }
    }

    #[test]
    fn zero_block_hand_trace() {
        let mut store = ParamStore::new();
        let mut rng = seeded_rng(5);
        let block = {
            let mut pb = ParamBuilder::new(&mut store, &mut rng, ParamGroup::Fusion);
            ClBlock::new(&mut pb.pp("cl"), 4, 2, false)
        };
        zero_params(&mut store);
        let mut g = Graph::with_params(&store);
        let z = |g: &mut Graph<'_>, c| g.constant(Tensor::zeros([1, c, 4, 4]));
        let state = ClState {
            event_features: z(&mut g, 4),
            frame_features: z(&mut g, 4),
            event_mask: z(&mut g, 1),
            frame_mask: z(&mut g, 1),
        };
        let out = block.forward(&mut g, state).unwrap();
        assert!(g.value(out.fused).data().iter().all(|&v| v == 0.0));
        let (be, bi) = out.feedback.unwrap();
        assert!(g.value(be).data().iter().all(|&v| v == 0.0));
        assert!(g.value(bi).data().iter().all(|&v| v == 0.0));
        assert!(g.value(out.state.event_features).data().iter().all(|&v| v == 0.0));
        assert!(g.value(out.fused_mask).data().iter().all(|&v| v == 0.5));
        assert!(g.value(out.state.event_mask).data().iter().all(|&v| v == 0.5));
        assert!(g.value(out.state.frame_mask).data().iter().all(|&v| v == 0.5));
    }

    #[test]
    fn odd_channel_count_is_rejected() {
        let mut store = ParamStore::new();
        let mut rng = seeded_rng(5);
        let block = {
            let mut pb = ParamBuilder::new(&mut store, &mut rng, ParamGroup::Fusion);
            ClBlock::new(&mut pb.pp("cl"), 4, 2, false)
        };
        let mut g = Graph::with_params(&store);
        let f = g.constant(Tensor::zeros([1, 3, 2, 2]));
        let m = g.constant(Tensor::zeros([1, 1, 2, 2]));
        let state = ClState {
            event_features: f,
            frame_features: f,
            event_mask: m,
            frame_mask: m,
        };
        assert!(block.forward(&mut g, state).is_err());
    }

    #[test]
    fn single_block_stack_has_one_channel() {
        let mut store = ParamStore::new();
        let mut rng = seeded_rng(5);
        let aif = {
            let mut pb = ParamBuilder::new(&mut store, &mut rng, ParamGroup::Fusion);
            AifModule::new(&mut pb.pp("aif"), 4, 1, 2).unwrap()
        };
        let mut g = Graph::with_params(&store);
        let f = g.constant(Tensor::randn([1, 4, 4, 4], 1.0, &mut rng));
        let m = g.constant(Tensor::randn([1, 1, 4, 4], 1.0, &mut rng));
        let out = aif.forward(&mut g, f, f, m, m).unwrap();
        assert_eq!(g.shape(out.mask_stack), [1, 1, 4, 4]);
        assert_eq!(g.shape(out.fused), [1, 8, 4, 4]);
    }
}
