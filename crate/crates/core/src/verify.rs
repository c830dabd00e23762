//! Registered verification suite: gradient checks for every parameterised
//! layer and module, and the affinity bound checks.

use rand::Rng;

use crate::autograd::Var;
use crate::backbone::{Encoder, Modality, PyramidEncoder};
use crate::fusion::{AifModule, ChannelAttention, ClBlock, ClState, FusedMaskHead};
use crate::gradcheck::{check_gradients, random_projection, GradCheckConfig, GradCheckReport};
use crate::mask::{MaskDownsampler, MaskHead, MaskSource};
use crate::model::{ModelConfig, SrfNet, StepInput};
use crate::nn::{Conv2d, ConvSpec};
use crate::objective::{total_loss, LossConfig};
use crate::params::{seeded_rng, ParamBuilder, ParamGroup, ParamStore};
use crate::refine::{
    normalize_affinity, normalize_affinity_values, propagate, AffinityHead, CoarseDepthHead, ConfidenceHead, ConvGru,
    Decoder, RdrConfig, RdrModule,
};
use crate::tensor::Tensor;

pub type CheckFn = fn(&GradCheckConfig) -> GradCheckReport;

/// Every registered gradient check, in report order.
pub fn gradient_checks() -> Vec<(&'static str, CheckFn)> {
    vec![
        ("conv2d_3x3", conv_3x3),
        ("conv2d_3x3_stride2", conv_3x3_s2),
        ("conv2d_1x1", conv_1x1),
        ("event_mask_head", event_mask_head),
        ("frame_mask_head", frame_mask_head),
        ("mask_downsampler", mask_downsampler),
        ("event_encoder", event_encoder),
        ("frame_encoder", frame_encoder),
        ("channel_attention", channel_attention),
        ("fused_mask_head", fused_mask_head),
        ("cl_block", cl_block),
        ("cl_block_last", cl_block_last),
        ("cl_chain", cl_chain),
        ("conv_gru", conv_gru),
        ("decoder", decoder),
        ("coarse_depth_head", coarse_head),
        ("affinity_head", affinity_head),
        ("confidence_head", confidence_head),
        ("affinity_normalization", affinity_normalization),
        ("propagation", propagation),
        ("rdr_forward", rdr_forward),
        ("total_loss", loss),
        ("srfnet_sequence", srfnet_sequence),
    ]
}

pub fn run_gradient_checks(cfg: &GradCheckConfig) -> Vec<GradCheckReport> {
    gradient_checks().into_iter().map(|(_, f)| f(cfg)).collect()
}

/// Outcome of a non-gradient check.
#[derive(Clone, Debug)]
pub struct CheckLine {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

impl CheckLine {
    pub fn line(&self) -> String {
        format!("{} {:<32} {}", if self.passed { "PASS" } else { "FAIL" }, self.name, self.detail)
    }
}

/// Affinity bound: with `gamma = K`, `sum_k |w_k| <= c <= 1` on random
/// inputs, and saturated raw affinities with `c = 1` sum to one.
pub fn affinity_bound_checks(seed: u64, trials: usize) -> Vec<CheckLine> {
    const K: usize = 8;
    let mut rng = seeded_rng(seed);
    let mut worst = f64::NEG_INFINITY;
    let mut failures = 0;
    for _ in 0..trials {
        let scale = 10f64.powf(rng.gen_range(-2.0..3.0));
        let raw = Tensor::uniform([1, K, 4, 4], -scale, scale, &mut rng);
        let conf = Tensor::uniform([1, 1, 4, 4], 0.0, 1.0, &mut rng);
        let w = normalize_affinity_values(&raw, &conf, K as f64).expect("gamma is positive");
        for p in 0..16 {
            let sum: f64 = (0..K).map(|k| w.data()[k * 16 + p].abs()).sum();
            let c = conf.data()[p];
            worst = worst.max(sum - c);
            if sum > c + 1e-12 || c > 1.0 {
                failures += 1;
            }
        }
    }
    let raw = Tensor::full([1, K, 2, 2], 1e6);
    let conf = Tensor::full([1, 1, 2, 2], 1.0);
    let w = normalize_affinity_values(&raw, &conf, K as f64).expect("gamma is positive");
    let sat: f64 = (0..K).map(|k| w.data()[k * 4]).sum();
    vec![
        CheckLine {
            name: "affinity_bound_random".into(),
            passed: failures == 0,
            detail: format!("trials={trials} violations={failures} max(sum|w|-c)={worst:.3e}"),
        },
        CheckLine {
            name: "affinity_bound_saturated".into(),
            passed: (sat - 1.0).abs() <= 1e-6,
            detail: format!("sum w = {sat:.12}"),
        },
    ]
}

fn build<T>(seed: u64, f: impl FnOnce(&mut ParamBuilder<'_>) -> T) -> (ParamStore, T) {
    let mut store = ParamStore::new();
    let mut rng = seeded_rng(seed);
    let module = {
        let mut pb = ParamBuilder::new(&mut store, &mut rng, ParamGroup::Fusion);
        f(&mut pb)
    };
    // Push every parameter away from its structured initialisation so that
    // gradients are generic.
    let mut rng = seeded_rng(seed ^ 0xa5a5);
    for id in store.ids().collect::<Vec<_>>() {
        let shape = store.get(id).shape();
        let noise = Tensor::uniform(shape, -0.3, 0.3, &mut rng);
        let v = store.get(id).zip_map(&noise, |a, b| a + b);
        store.set(id, v);
    }
    (store, module)
}

fn inputs(seed: u64, shapes: &[[usize; 4]]) -> Vec<Tensor> {
    let mut rng = seeded_rng(seed);
    shapes.iter().map(|&s| Tensor::uniform(s, -1.0, 1.0, &mut rng)).collect()
}

fn conv_case(name: &str, spec: ConvSpec, cfg: &GradCheckConfig) -> GradCheckReport {
    let (store, conv) = build(1, |pb| Conv2d::new(&mut pb.pp("conv"), 3, 4, spec));
    check_gradients(
        name,
        &store,
        &inputs(2, &[[2, 3, 7, 6]]),
        |g, v| {
            let y = conv.forward(g, v[0]);
            random_projection(g, y, 3)
        },
        cfg,
    )
}

fn conv_3x3(cfg: &GradCheckConfig) -> GradCheckReport {
    conv_case("conv2d_3x3", ConvSpec::k3(), cfg)
}

fn conv_3x3_s2(cfg: &GradCheckConfig) -> GradCheckReport {
    conv_case("conv2d_3x3_stride2", ConvSpec::k3_s2(), cfg)
}

fn conv_1x1(cfg: &GradCheckConfig) -> GradCheckReport {
    conv_case("conv2d_1x1", ConvSpec::k1(), cfg)
}

fn mask_head_case(name: &str, channels: usize, source: MaskSource, cfg: &GradCheckConfig) -> GradCheckReport {
    let (store, head) = build(4, |pb| MaskHead::new(&mut pb.pp("head"), channels, source));
    check_gradients(
        name,
        &store,
        &inputs(5, &[[2, channels, 8, 8]]),
        |g, v| {
            let m = head.forward(g, v[0]);
            random_projection(g, m, 6)
        },
        cfg,
    )
}

fn event_mask_head(cfg: &GradCheckConfig) -> GradCheckReport {
    mask_head_case("event_mask_head", 3, MaskSource::Event, cfg)
}

fn frame_mask_head(cfg: &GradCheckConfig) -> GradCheckReport {
    mask_head_case("frame_mask_head", 1, MaskSource::Frame, cfg)
}

fn mask_downsampler(cfg: &GradCheckConfig) -> GradCheckReport {
    let (store, down) = build(7, |pb| MaskDownsampler::new(&mut pb.pp("down"), 2));
    check_gradients(
        "mask_downsampler",
        &store,
        &inputs(8, &[[2, 1, 16, 16]]),
        |g, v| {
            let m = down.forward(g, v[0]);
            random_projection(g, m, 9)
        },
        cfg,
    )
}

fn encoder_case(name: &str, modality: Modality, channels: usize, cfg: &GradCheckConfig) -> GradCheckReport {
    let (store, enc) = build(10, |pb| PyramidEncoder::new(&mut pb.pp("enc"), modality, channels, &[4, 4, 6]));
    check_gradients(
        name,
        &store,
        &inputs(11, &[[1, channels, 16, 16]]),
        |g, v| {
            let levels = enc.encode(g, v[0]).expect("encoder accepts the input");
            let parts: Vec<Var> = levels
                .iter()
                .enumerate()
                .map(|(i, &l)| random_projection(g, l, 12 + i as u64))
                .collect();
            parts.into_iter().reduce(|a, b| g.add(a, b)).unwrap()
        },
        cfg,
    )
}

fn event_encoder(cfg: &GradCheckConfig) -> GradCheckReport {
    encoder_case("event_encoder", Modality::Event, 5, cfg)
}

fn frame_encoder(cfg: &GradCheckConfig) -> GradCheckReport {
    encoder_case("frame_encoder", Modality::Frame, 1, cfg)
}

fn channel_attention(cfg: &GradCheckConfig) -> GradCheckReport {
    let (store, attn) = build(13, |pb| ChannelAttention::new(&mut pb.pp("attn"), 8, 6, 2));
    check_gradients(
        "channel_attention",
        &store,
        &inputs(14, &[[2, 8, 6, 6]]),
        |g, v| {
            let y = attn.forward(g, v[0]);
            random_projection(g, y, 15)
        },
        cfg,
    )
}

fn fused_mask_head(cfg: &GradCheckConfig) -> GradCheckReport {
    let (store, head) = build(16, |pb| FusedMaskHead::new(&mut pb.pp("mask"), 6));
    check_gradients(
        "fused_mask_head",
        &store,
        &inputs(17, &[[2, 6, 5, 5]]),
        |g, v| {
            let y = head.forward(g, v[0]);
            random_projection(g, y, 18)
        },
        cfg,
    )
}

const FUSION_SHAPES: [[usize; 4]; 4] = [[2, 4, 4, 4], [2, 4, 4, 4], [2, 1, 4, 4], [2, 1, 4, 4]];

fn cl_case(name: &str, is_last: bool, cfg: &GradCheckConfig) -> GradCheckReport {
    let (store, block) = build(19, |pb| ClBlock::new(&mut pb.pp("cl"), 4, 2, is_last));
    check_gradients(
        name,
        &store,
        &inputs(20, &FUSION_SHAPES),
        |g, v| {
            let out = block
                .forward(
                    g,
                    ClState {
                        event_features: v[0],
                        frame_features: v[1],
                        event_mask: v[2],
                        frame_mask: v[3],
                    },
                )
                .expect("channel counts match");
            let mut terms = vec![random_projection(g, out.fused, 21), random_projection(g, out.fused_mask, 22)];
            if !is_last {
                terms.push(random_projection(g, out.state.event_features, 23));
                terms.push(random_projection(g, out.state.frame_mask, 24));
            }
            terms.into_iter().reduce(|a, b| g.add(a, b)).unwrap()
        },
        cfg,
    )
}

fn cl_block(cfg: &GradCheckConfig) -> GradCheckReport {
    cl_case("cl_block", false, cfg)
}

fn cl_block_last(cfg: &GradCheckConfig) -> GradCheckReport {
    cl_case("cl_block_last", true, cfg)
}

fn cl_chain(cfg: &GradCheckConfig) -> GradCheckReport {
    let (store, aif) = build(25, |pb| AifModule::new(&mut pb.pp("aif"), 4, 3, 2).expect("three blocks"));
    check_gradients(
        "cl_chain",
        &store,
        &inputs(26, &FUSION_SHAPES),
        |g, v| {
            let out = aif.forward(g, v[0], v[1], v[2], v[3]).expect("shapes match");
            let a = random_projection(g, out.fused, 27);
            let b = random_projection(g, out.mask_stack, 28);
            g.add(a, b)
        },
        cfg,
    )
}

fn conv_gru(cfg: &GradCheckConfig) -> GradCheckReport {
    let (store, gru) = build(29, |pb| ConvGru::new(&mut pb.pp("gru"), 3, 4));
    check_gradients(
        "conv_gru",
        &store,
        &inputs(30, &[[2, 3, 5, 6], [2, 3, 5, 6], [2, 4, 5, 6]]),
        |g, v| {
            let s1 = gru.step(g, v[0], v[2]);
            let s2 = gru.step(g, v[1], s1);
            random_projection(g, s2, 31)
        },
        cfg,
    )
}

fn decoder(cfg: &GradCheckConfig) -> GradCheckReport {
    let (store, dec) = build(32, |pb| Decoder::new(&mut pb.pp("dec"), 8, &[8, 4], &[6, 4, 3]));
    check_gradients(
        "decoder",
        &store,
        &inputs(33, &[[1, 8, 2, 2], [1, 4, 4, 4], [1, 4, 4, 4], [1, 2, 8, 8], [1, 2, 8, 8]]),
        |g, v| {
            let y = dec.forward(g, v[0], &[(v[1], v[2]), (v[3], v[4])]);
            random_projection(g, y, 34)
        },
        cfg,
    )
}

fn coarse_head(cfg: &GradCheckConfig) -> GradCheckReport {
    let (store, head) = build(35, |pb| CoarseDepthHead::new(&mut pb.pp("coarse"), 4));
    check_gradients(
        "coarse_depth_head",
        &store,
        &inputs(36, &[[2, 4, 4, 4]]),
        |g, v| {
            let y = head.forward(g, v[0], 8, 8);
            random_projection(g, y, 37)
        },
        cfg,
    )
}

fn affinity_head(cfg: &GradCheckConfig) -> GradCheckReport {
    let (store, head) = build(38, |pb| AffinityHead::new(&mut pb.pp("affinity"), 4, 4, 3.0));
    check_gradients(
        "affinity_head",
        &store,
        &inputs(39, &[[2, 4, 4, 4]]),
        |g, v| {
            let (raw, off) = head.forward(g, v[0], 8, 8);
            let a = random_projection(g, raw, 40);
            let b = random_projection(g, off, 41);
            g.add(a, b)
        },
        cfg,
    )
}

fn confidence_head(cfg: &GradCheckConfig) -> GradCheckReport {
    let (store, head) = build(42, |pb| ConfidenceHead::new(&mut pb.pp("confidence"), 4, 3, 2));
    check_gradients(
        "confidence_head",
        &store,
        &inputs(43, &[[2, 4, 4, 4], [2, 3, 2, 2]]),
        |g, v| {
            let y = head.forward(g, v[0], v[1], 8, 8);
            random_projection(g, y, 44)
        },
        cfg,
    )
}

fn affinity_normalization(cfg: &GradCheckConfig) -> GradCheckReport {
    let mut ins = inputs(45, &[[2, 4, 5, 5], [2, 1, 5, 5]]);
    ins.push(Tensor::full([1, 1, 1, 1], 4f64.ln()));
    check_gradients(
        "affinity_normalization",
        &ParamStore::new(),
        &ins,
        |g, v| {
            let w = normalize_affinity(g, v[0], v[1], v[2]);
            random_projection(g, w, 46)
        },
        cfg,
    )
}

fn propagation(cfg: &GradCheckConfig) -> GradCheckReport {
    let mut rng = seeded_rng(47);
    let d = Tensor::uniform([2, 1, 6, 7], 0.0, 1.0, &mut rng);
    let w = Tensor::uniform([2, 4, 6, 7], -0.24, 0.24, &mut rng);
    let off = Tensor::uniform([2, 8, 6, 7], -2.7, 2.7, &mut rng);
    check_gradients(
        "propagation",
        &ParamStore::new(),
        &[d, w, off],
        |g, v| {
            let y = propagate(g, v[0], v[1], v[2], 3);
            random_projection(g, y, 48)
        },
        &GradCheckConfig {
            max_coords: cfg.max_coords.max(48),
            ..cfg.clone()
        },
    )
}

fn rdr_forward(cfg: &GradCheckConfig) -> GradCheckReport {
    let config = RdrConfig {
        neighbors: 4,
        offset_radius: 2.0,
        iterations: 3,
        gamma_init: None,
    };
    let (store, rdr) = build(49, |pb| {
        RdrModule::new(pb, 8, &[8, 4], &[6, 4, 4], 4, 3, 2, config).expect("valid rdr config")
    });
    check_gradients(
        "rdr_forward",
        &store,
        &inputs(
            50,
            &[[1, 8, 2, 2], [1, 3, 2, 2], [1, 4, 4, 4], [1, 4, 4, 4], [1, 2, 8, 8], [1, 2, 8, 8], [1, 4, 8, 8]],
        ),
        |g, v| {
            let out = rdr.forward(g, v[0], v[1], &[(v[2], v[3]), (v[4], v[5])], Some(v[6]), 16, 16);
            let a = random_projection(g, out.refined, 51);
            let b = random_projection(g, out.state, 52);
            g.add(a, b)
        },
        cfg,
    )
}

fn loss(cfg: &GradCheckConfig) -> GradCheckReport {
    let mut rng = seeded_rng(53);
    let preds: Vec<Tensor> = (0..2).map(|_| Tensor::uniform([2, 1, 16, 16], 0.0, 1.0, &mut rng)).collect();
    let targets: Vec<Tensor> = (0..2).map(|_| Tensor::uniform([2, 1, 16, 16], 0.0, 1.0, &mut rng)).collect();
    let valids: Vec<Tensor> = (0..2)
        .map(|_| Tensor::uniform([2, 1, 16, 16], 0.0, 1.0, &mut rng).map(|v| if v < 0.85 { 1.0 } else { 0.0 }))
        .collect();
    let lc = LossConfig::default();
    check_gradients(
        "total_loss",
        &ParamStore::new(),
        &preds,
        |g, v| total_loss(g, v, &targets, &valids, &lc).total,
        &GradCheckConfig {
            max_coords: cfg.max_coords.max(64),
            ..cfg.clone()
        },
    )
}

fn srfnet_sequence(cfg: &GradCheckConfig) -> GradCheckReport {
    let config = ModelConfig {
        patch_scales: vec![2, 4],
        encoder_channels: vec![4, 4, 6],
        decoder_widths: vec![6, 4, 4],
        gru_hidden: 4,
        n_blocks: 2,
        reduction: 2,
        neighbors: 4,
        offset_radius: 2.0,
        iterations: 2,
        ..ModelConfig::default()
    };
    let (store, net) = build(54, |pb| SrfNet::build(pb, config).expect("valid model config"));
    let mut rng = seeded_rng(55);
    let step = |rng: &mut rand_chacha::ChaCha8Rng| StepInput {
        voxels: Tensor::uniform([1, 5, 16, 16], -1.0, 1.0, rng),
        frames: Tensor::uniform([1, 1, 16, 16], -1.0, 1.0, rng),
        event_priors: Tensor::uniform([1, 2, 16, 16], 0.0, 2.0, rng),
        frame_priors: Tensor::uniform([1, 1, 16, 16], 0.0, 2.0, rng),
    };
    let steps = [step(&mut rng), step(&mut rng)];
    check_gradients(
        "srfnet_sequence",
        &store,
        &[],
        |g, _| {
            let outs = net.forward_sequence(g, &steps).expect("inputs match the model");
            let a = random_projection(g, outs[0].depth(), 56);
            let b = random_projection(g, outs[1].depth(), 57);
            g.add(a, b)
        },
        &GradCheckConfig {
            max_coords: cfg.max_coords.min(6),
            ..cfg.clone()
        },
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn registry_names_match_reports() {
        let names: Vec<_> = gradient_checks().iter().map(|(n, _)| *n).collect();
        let mut sorted = names.clone();
        sorted.sort_unstable();
        sorted.dedup();
        assert_eq!(sorted.len(), names.len());
    }

    #[test]
    fn bound_suite_passes() {
        assert!(affinity_bound_checks(0, 20).iter().all(|c| c.passed));
    }

    #[test]
    fn corruption_fails_a_layer_check() {
        let r = conv_3x3(&GradCheckConfig {
            corrupt: Some(1.01),
            ..GradCheckConfig::default()
        });
        assert!(!r.passed());
    }
}
