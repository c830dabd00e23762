//! Reliability-oriented depth refinement.
//!
//! The decoder lifts the fused feature back towards input resolution, a
//! convolutional GRU carries temporal state across the sequence, and three
//! heads read the temporal feature: a coarse log-depth head, an affinity head
//! (raw affinities plus non-local neighbour offsets) and a confidence head
//! that also sees the stacked fused masks. Affinities are normalised as
//! `w = c * tanh(w_raw) / gamma` and the coarse map is refined by iterative
//! non-local propagation.

use crate::autograd::{propagate_forward_n, Graph, Var};
use crate::error::{Error, Result};
use crate::fusion::ChannelAttention;
use crate::nn::{Conv2d, ConvSpec};
use crate::params::{Init, ParamBuilder, ParamGroup, ParamId};
use crate::tensor::Tensor;

/// Convolutional GRU. The returned temporal feature is the new state.
#[derive(Clone, Debug)]
pub struct ConvGru {
    pub update: Conv2d,
    pub reset: Conv2d,
    pub candidate: Conv2d,
    pub hidden: usize,
}

impl ConvGru {
    pub fn new(pb: &mut ParamBuilder<'_>, in_channels: usize, hidden: usize) -> Self {
        let spec = ConvSpec::k3().weight_init(Init::FanIn { gain: 0.5 });
        Self {
            update: Conv2d::new(&mut pb.pp("update"), in_channels + hidden, hidden, spec),
            reset: Conv2d::new(&mut pb.pp("reset"), in_channels + hidden, hidden, spec),
            candidate: Conv2d::new(&mut pb.pp("candidate"), in_channels + hidden, hidden, spec),
            hidden,
        }
    }

    /// Zero state matching `input`'s batch and spatial size.
    pub fn zero_state(&self, g: &mut Graph<'_>, input: Var) -> Var {
        let [n, _, h, w] = g.shape(input);
        g.constant(Tensor::zeros([n, self.hidden, h, w]))
    }

    /// `z = s(Wz*[x,S])`, `r = s(Wr*[x,S])`, `h = tanh(Wh*[x, r.S])`,
    /// `S' = (1 - z).S + z.h`.
    pub fn step(&self, g: &mut Graph<'_>, input: Var, state: Var) -> Var {
        let [n, _, h, w] = g.shape(input);
        let ss = g.shape(state);
        assert_eq!(ss, [n, self.hidden, h, w], "recurrent state shape drifted");
        let xs = g.concat(&[input, state]);
        let z = self.update.forward(g, xs);
        let z = g.sigmoid(z);
        let r = self.reset.forward(g, xs);
        let r = g.sigmoid(r);
        let rs = g.mul(r, state);
        let xr = g.concat(&[input, rs]);
        let cand = self.candidate.forward(g, xr);
        let cand = g.tanh(cand);
        let delta = g.sub(cand, state);
        let step = g.mul(z, delta);
        g.add(state, step)
    }
}

/// Upsampling decoder with skip connections from the shallower pyramid
/// levels of both branches.
#[derive(Clone, Debug)]
pub struct Decoder {
    pub reduce: Conv2d,
    pub stages: Vec<Conv2d>,
    pub out_channels: usize,
}

impl Decoder {
    /// `skip_channels[i]` is the combined channel count (event + frame) of
    /// the i-th skip, deepest first; `widths` the decoder width after the
    /// reduction and after each stage.
    pub fn new(pb: &mut ParamBuilder<'_>, fused_channels: usize, skip_channels: &[usize], widths: &[usize]) -> Self {
        assert_eq!(widths.len(), skip_channels.len() + 1, "one width per decoder stage plus the reduction");
        let reduce = Conv2d::new(&mut pb.pp("reduce"), fused_channels, widths[0], ConvSpec::k3());
        let stages = skip_channels
            .iter()
            .enumerate()
            .map(|(i, &sc)| Conv2d::new(&mut pb.pp(&format!("stage{i}")), widths[i] + sc, widths[i + 1], ConvSpec::k3()))
            .collect();
        Self {
            reduce,
            stages,
            out_channels: *widths.last().unwrap(),
        }
    }

    /// `skips` pairs `(event, frame)` features, deepest first.
    pub fn forward(&self, g: &mut Graph<'_>, fused: Var, skips: &[(Var, Var)]) -> Var {
        assert_eq!(skips.len(), self.stages.len(), "decoder skip count mismatch");
        let x = self.reduce.forward(g, fused);
        let mut x = g.elu(x);
        for (stage, &(se, si)) in self.stages.iter().zip(skips) {
            let [_, _, h, w] = g.shape(se);
            let up = g.upsample_bilinear(x, h, w);
            let cat = g.concat(&[up, se, si]);
            let y = stage.forward(g, cat);
            x = g.elu(y);
        }
        x
    }
}

#[derive(Clone, Debug)]
pub struct CoarseDepthHead {
    pub conv: Conv2d,
}

impl CoarseDepthHead {
    pub fn new(pb: &mut ParamBuilder<'_>, in_channels: usize) -> Self {
        Self {
            conv: Conv2d::new(pb, in_channels, 1, ConvSpec::k3().weight_init(Init::FanIn { gain: 0.5 })),
        }
    }

    /// Sigmoid log-depth at feature resolution, bilinearly resized to
    /// `out_h x out_w`.
    pub fn forward(&self, g: &mut Graph<'_>, feature: Var, out_h: usize, out_w: usize) -> Var {
        let logits = self.conv.forward(g, feature);
        let d = g.sigmoid(logits);
        g.upsample_bilinear(d, out_h, out_w)
    }
}

#[derive(Clone, Debug)]
pub struct AffinityHead {
    pub conv: Conv2d,
    pub neighbors: usize,
    pub radius: f64,
}

impl AffinityHead {
    pub fn new(pb: &mut ParamBuilder<'_>, in_channels: usize, neighbors: usize, radius: f64) -> Self {
        Self {
            conv: Conv2d::new(
                pb,
                in_channels,
                3 * neighbors,
                ConvSpec::k3().weight_init(Init::FanIn { gain: 0.1 }),
            ),
            neighbors,
            radius,
        }
    }

    /// Raw affinities `[n, K, H, W]` and offsets `[n, 2K, H, W]` as `(dy, dx)`
    /// pairs in output pixels, each component bounded by `radius` via tanh.
    pub fn forward(&self, g: &mut Graph<'_>, feature: Var, out_h: usize, out_w: usize) -> (Var, Var) {
        let k = self.neighbors;
        let raw = self.conv.forward(g, feature);
        let aff = g.slice_channels(raw, 0, k);
        let off = g.slice_channels(raw, k, 2 * k);
        let off = g.tanh(off);
        let off = g.scale(off, self.radius);
        let aff = g.upsample_bilinear(aff, out_h, out_w);
        let off = g.upsample_bilinear(off, out_h, out_w);
        (aff, off)
    }
}

/// Confidence from the temporal feature and the fused-mask stack: channel
/// attention over their concatenation, then a 1x1 convolution and sigmoid.
#[derive(Clone, Debug)]
pub struct ConfidenceHead {
    pub attention: ChannelAttention,
    pub out: Conv2d,
}

impl ConfidenceHead {
    pub fn new(pb: &mut ParamBuilder<'_>, feature_channels: usize, mask_channels: usize, reduction: usize) -> Self {
        let c = feature_channels + mask_channels;
        Self {
            attention: ChannelAttention::new(&mut pb.pp("attention"), c, c, reduction),
            out: Conv2d::new(&mut pb.pp("out"), c, 1, ConvSpec::k1().weight_init(Init::FanIn { gain: 0.5 })),
        }
    }

    pub fn forward(&self, g: &mut Graph<'_>, feature: Var, mask_stack: Var, out_h: usize, out_w: usize) -> Var {
        let [_, _, h, w] = g.shape(feature);
        let masks = g.upsample_bilinear(mask_stack, h, w);
        let cat = g.concat(&[feature, masks]);
        let att = self.attention.forward(g, cat);
        let logits = self.out.forward(g, att);
        let c = g.sigmoid(logits);
        g.upsample_bilinear(c, out_h, out_w)
    }
}

/// `w = c * tanh(w_raw) * exp(-log_gamma)`, the confidence broadcast over
/// neighbours.
pub fn normalize_affinity(g: &mut Graph<'_>, raw: Var, confidence: Var, log_gamma: Var) -> Var {
    let t = g.tanh(raw);
    let cw = g.mul(t, confidence);
    let inv = g.scale(log_gamma, -1.0);
    let inv = g.exp(inv);
    g.mul(cw, inv)
}

/// Tensor form of [`normalize_affinity`] with an explicit `gamma`.
pub fn normalize_affinity_values(raw: &Tensor, confidence: &Tensor, gamma: f64) -> Result<Tensor> {
    if gamma <= 0.0 || !gamma.is_finite() {
        return Err(Error::Config(format!("gamma must be positive, got {gamma}")));
    }
    let [n, k, h, w] = raw.shape();
    assert_eq!(confidence.shape(), [n, 1, h, w], "confidence shape mismatch");
    let mut out = Tensor::zeros([n, k, h, w]);
    for b in 0..n {
        for m in 0..k {
            for y in 0..h {
                for x in 0..w {
                    let v = confidence.at(b, 0, y, x) * raw.at(b, m, y, x).tanh() / gamma;
                    out.set(b, m, y, x, v);
                }
            }
        }
    }
    Ok(out)
}

/// `iterations` propagation steps in the graph.
pub fn propagate(g: &mut Graph<'_>, coarse: Var, weights: Var, offsets: Var, iterations: usize) -> Var {
    g.propagate(coarse, weights, offsets, iterations)
}

/// Tensor form of [`propagate`].
pub fn propagate_values(coarse: &Tensor, weights: &Tensor, offsets: &Tensor, iterations: usize) -> Tensor {
    propagate_forward_n(coarse, weights, offsets, iterations)
}

#[derive(Clone, Debug)]
pub struct RdrConfig {
    pub neighbors: usize,
    pub offset_radius: f64,
    pub iterations: usize,
    /// Initial value of gamma; defaults to the neighbour count.
    pub gamma_init: Option<f64>,
}

impl Default for RdrConfig {
    fn default() -> Self {
        Self {
            neighbors: 8,
            offset_radius: 6.0,
            iterations: 18,
            gamma_init: None,
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct RdrOutput {
    pub refined: Var,
    pub coarse: Var,
    pub state: Var,
    pub temporal: Var,
    pub confidence: Var,
    pub raw_affinity: Var,
    pub offsets: Var,
    pub weights: Var,
}

#[derive(Clone, Debug)]
pub struct RdrModule {
    pub decoder: Decoder,
    pub gru: ConvGru,
    pub coarse_head: CoarseDepthHead,
    pub affinity_head: AffinityHead,
    pub confidence_head: ConfidenceHead,
    /// Stores `ln(gamma)` so gamma stays positive.
    pub log_gamma: ParamId,
    pub config: RdrConfig,
}

impl RdrModule {
    pub fn new(
        pb: &mut ParamBuilder<'_>,
        fused_channels: usize,
        skip_channels: &[usize],
        decoder_widths: &[usize],
        gru_hidden: usize,
        mask_channels: usize,
        reduction: usize,
        config: RdrConfig,
    ) -> Result<Self> {
        if config.neighbors == 0 {
            return Err(Error::Config("propagation needs at least one neighbour".into()));
        }
        let gamma = config.gamma_init.unwrap_or(config.neighbors as f64);
        if gamma <= 0.0 {
            return Err(Error::Config(format!("gamma must be positive, got {gamma}")));
        }
        let mut pb = pb.with_group(ParamGroup::Refinement);
        let decoder = Decoder::new(&mut pb.pp("decoder"), fused_channels, skip_channels, decoder_widths);
        let d = decoder.out_channels;
        let gru = ConvGru::new(&mut pb.pp("gru"), d, gru_hidden);
        let coarse_head = CoarseDepthHead::new(&mut pb.pp("coarse_head"), gru_hidden);
        let affinity_head = AffinityHead::new(
            &mut pb.pp("affinity_head"),
            gru_hidden,
            config.neighbors,
            config.offset_radius,
        );
        let confidence_head = ConfidenceHead::new(&mut pb.pp("confidence_head"), gru_hidden, mask_channels, reduction);
        let log_gamma = pb.tensor("log_gamma", [1, 1, 1, 1], Init::Constant(gamma.ln()));
        Ok(Self {
            decoder,
            gru,
            coarse_head,
            affinity_head,
            confidence_head,
            log_gamma,
            config,
        })
    }

    /// Decoder, recurrence, heads, affinity normalisation and propagation for
    /// one time step. `state` is `None` at the start of a sequence.
    pub fn forward(
        &self,
        g: &mut Graph<'_>,
        fused: Var,
        mask_stack: Var,
        skips: &[(Var, Var)],
        state: Option<Var>,
        out_h: usize,
        out_w: usize,
    ) -> RdrOutput {
        let decoded = self.decoder.forward(g, fused, skips);
        let prev = state.unwrap_or_else(|| self.gru.zero_state(g, decoded));
        let temporal = self.gru.step(g, decoded, prev);
        let coarse = self.coarse_head.forward(g, temporal, out_h, out_w);
        let (raw_affinity, offsets) = self.affinity_head.forward(g, temporal, out_h, out_w);
        let confidence = self.confidence_head.forward(g, temporal, mask_stack, out_h, out_w);
        let log_gamma = g.param(self.log_gamma);
        let weights = normalize_affinity(g, raw_affinity, confidence, log_gamma);
        let refined = propagate(g, coarse, weights, offsets, self.config.iterations);
        RdrOutput {
            refined,
            coarse,
            state: temporal,
            temporal,
            confidence,
            raw_affinity,
            offsets,
            weights,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::{seeded_rng, ParamStore};

    fn zero_all(store: &mut ParamStore) {
        for id in store.ids().collect::<Vec<_>>() {
            let shape = store.get(id).shape();
            store.set(id, Tensor::zeros(shape));
        }
    }

    fn gru() -> (ParamStore, ConvGru) {
        let mut store = ParamStore::new();
        let mut rng = seeded_rng(3);
        let gru = {
            let mut pb = ParamBuilder::new(&mut store, &mut rng, ParamGroup::Refinement);
            ConvGru::new(&mut pb.pp("gru"), 3, 4)
        };
        (store, gru)
    }

    #[test]
    fn gru_with_zero_params_stays_at_zero() {
        let (mut store, gru) = gru();
        zero_all(&mut store);
        let mut rng = seeded_rng(1);
        let mut g = Graph::with_params(&store);
        let x = g.constant(Tensor::randn([1, 3, 5, 5], 1.0, &mut rng));
        let s0 = gru.zero_state(&mut g, x);
        let s1 = gru.step(&mut g, x, s0);
        assert!(g.value(s1).data().iter().all(|&v| v == 0.0));
        assert_eq!(g.shape(s1), g.shape(s0));
    }

    #[test]
    fn closed_update_gate_freezes_state() {
        let (mut store, gru) = gru();
        store.set(gru.update.bias.unwrap(), Tensor::full([1, 4, 1, 1], -30.0));
        let mut rng = seeded_rng(2);
        let mut g = Graph::with_params(&store);
        let x = g.constant(Tensor::randn([1, 3, 5, 5], 1.0, &mut rng));
        let s = Tensor::randn([1, 4, 5, 5], 1.0, &mut rng);
        let sv = g.constant(s.clone());
        let s1 = gru.step(&mut g, x, sv);
        for (a, b) in g.value(s1).data().iter().zip(s.data()) {
            assert!((a - b).abs() < 1e-3);
        }
    }

    #[test]
    fn zero_heads_give_neutral_outputs() {
        let mut store = ParamStore::new();
        let mut rng = seeded_rng(3);
        let (coarse, aff, conf) = {
            let mut pb = ParamBuilder::new(&mut store, &mut rng, ParamGroup::Refinement);
            (
                CoarseDepthHead::new(&mut pb.pp("c"), 4),
                AffinityHead::new(&mut pb.pp("a"), 4, 8, 6.0),
                ConfidenceHead::new(&mut pb.pp("k"), 4, 3, 2),
            )
        };
        zero_all(&mut store);
        let mut g = Graph::with_params(&store);
        let f = g.constant(Tensor::randn([1, 4, 4, 4], 1.0, &mut rng));
        let m = g.constant(Tensor::randn([1, 3, 2, 2], 1.0, &mut rng));
        let d = coarse.forward(&mut g, f, 8, 8);
        assert_eq!(g.shape(d), [1, 1, 8, 8]);
        assert!(g.value(d).data().iter().all(|&v| v == 0.5));
        let (w, o) = aff.forward(&mut g, f, 8, 8);
        assert_eq!(g.shape(w), [1, 8, 8, 8]);
        assert_eq!(g.shape(o), [1, 16, 8, 8]);
        assert!(g.value(w).data().iter().all(|&v| v == 0.0));
        assert!(g.value(o).data().iter().all(|&v| v == 0.0));
        let c = conf.forward(&mut g, f, m, 8, 8);
        assert!(g.value(c).data().iter().all(|&v| v == 0.5));
    }

    #[test]
    fn offsets_stay_within_radius() {
        let mut store = ParamStore::new();
        let mut rng = seeded_rng(3);
        let aff = {
            let mut pb = ParamBuilder::new(&mut store, &mut rng, ParamGroup::Refinement);
            AffinityHead::new(&mut pb.pp("a"), 4, 8, 6.0)
        };
        let w = store.get(aff.conv.weight).scale(500.0);
        store.set(aff.conv.weight, w);
        let mut g = Graph::with_params(&store);
        let f = g.constant(Tensor::randn([1, 4, 4, 4], 5.0, &mut rng));
        let (_, o) = aff.forward(&mut g, f, 16, 16);
        assert!(g.value(o).data().iter().all(|&v| v.abs() <= 6.0));
    }

    #[test]
    fn normalization_examples() {
        let raw = Tensor::zeros([1, 8, 2, 2]);
        let c = Tensor::full([1, 1, 2, 2], 0.7);
        assert!(normalize_affinity_values(&raw, &c, 8.0).unwrap().data().iter().all(|&v| v == 0.0));

        let mut rng = seeded_rng(0);
        let raw = Tensor::randn([1, 8, 2, 2], 2.0, &mut rng);
        let mut c = Tensor::full([1, 1, 2, 2], 0.9);
        c.set(0, 0, 1, 0, 0.0);
        let w = normalize_affinity_values(&raw, &c, 8.0).unwrap();
        assert!((0..8).all(|m| w.at(0, m, 1, 0) == 0.0));

        let raw = Tensor::full([1, 8, 1, 1], 1e6);
        let w = normalize_affinity_values(&raw, &Tensor::full([1, 1, 1, 1], 1.0), 8.0).unwrap();
        assert!(w.data().iter().all(|&v| (v - 0.125).abs() < 1e-12));
        assert!((w.sum() - 1.0).abs() < 1e-12);

        assert!(normalize_affinity_values(&raw, &Tensor::full([1, 1, 1, 1], 1.0), 0.0).is_err());
        assert!(normalize_affinity_values(&raw, &Tensor::full([1, 1, 1, 1], 1.0), -1.0).is_err());
    }

    #[test]
    fn propagation_examples() {
        let mut rng = seeded_rng(0);
        let coarse = Tensor::uniform([1, 1, 6, 6], 0.0, 1.0, &mut rng);
        let zero_w = Tensor::zeros([1, 8, 6, 6]);
        let off = Tensor::uniform([1, 16, 6, 6], -3.0, 3.0, &mut rng);
        assert_eq!(propagate_values(&coarse, &zero_w, &off, 18), coarse);

        let flat = Tensor::full([1, 1, 6, 6], 0.37);
        let w = Tensor::uniform([1, 8, 6, 6], -0.12, 0.12, &mut rng);
        let out = propagate_values(&flat, &w, &off, 18);
        assert!(out.data().iter().all(|&v| (v - 0.37).abs() < 1e-9));

        // 1x2 map, each pixel's single neighbour is the other one.
        let d = Tensor::from_plane(1, 2, vec![0.0, 1.0]);
        let w = Tensor::full([1, 1, 1, 2], 0.5);
        let off = Tensor::new([1, 2, 1, 2], vec![0.0, 0.0, 1.0, -1.0]);
        let one = propagate_values(&d, &w, &off, 1);
        assert_eq!(one.data(), &[0.5, 0.5]);
        assert_eq!(propagate_values(&d, &w, &off, 7).data(), &[0.5, 0.5]);
    }
}
