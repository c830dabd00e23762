//! Run configuration, batching and the supervised training loop.

use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::Graph;
use crate::checkpoint::{Checkpoint, OptimizerState};
use crate::dataset::{AssemblyConfig, SequenceSample};
use crate::error::{Error, Result};
use crate::metrics::{CutoffMode, DEFAULT_CUTOFFS};
use crate::model::{Ablation, ModelConfig, SrfNet, StepInput};
use crate::objective::{log_normalize, total_loss, DepthRaster, LogDepthParams, LossConfig};
use crate::params::{seeded_rng, ParamGroup, ParamId, ParamStore};
use crate::synth::SynthConfig;
use crate::tensor::Tensor;

/// Every tunable of a run. JSON keys are the field names; missing keys take
/// the defaults below.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,

    pub sequences: usize,
    pub frames: usize,
    /// `[height, width]`.
    pub resolution: [usize; 2],
    pub frame_period_us: u64,
    pub gain: f64,
    pub noise_std: f64,
    pub threshold_c: f64,
    pub substeps: usize,
    pub boxes: usize,
    pub speed: f64,

    pub bins: usize,
    pub sequence_length: usize,
    pub patch_scales: Vec<usize>,
    pub alpha: f64,
    pub d_max: f64,

    pub encoder_channels: Vec<usize>,
    pub decoder_widths: Vec<usize>,
    pub gru_hidden: usize,
    pub n_blocks: usize,
    pub reduction: usize,
    pub neighbors: usize,
    pub offset_radius: f64,
    pub iterations: usize,
    pub gamma_init: Option<f64>,
    pub ablation: Ablation,

    pub lambda: f64,
    pub grad_scales: usize,

    pub lr_fusion: f64,
    pub lr_refinement: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub max_steps: Option<usize>,
    /// Write `epoch_%04d.ckpt` every this many epochs.
    pub checkpoint_every: usize,
    pub grad_clip: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub flip: bool,
    /// Random crop size `[height, width]`; `null` disables cropping.
    pub crop: Option<[usize; 2]>,

    pub cutoffs: Vec<f64>,
    pub cutoff_mode: CutoffMode,
}

impl Default for RunConfig {
    fn default() -> Self {
        let model = ModelConfig::default();
        let synth = SynthConfig::default();
        Self {
            seed: 0,
            sequences: 8,
            frames: synth.frames,
            resolution: [synth.height, synth.width],
            frame_period_us: synth.frame_period_us,
            gain: synth.gain,
            noise_std: synth.noise_std,
            threshold_c: synth.threshold_c,
            substeps: synth.substeps,
            boxes: synth.boxes,
            speed: synth.speed,
            bins: model.bins,
            sequence_length: 8,
            patch_scales: model.patch_scales,
            alpha: LogDepthParams::MVSEC.alpha,
            d_max: LogDepthParams::MVSEC.d_max,
            encoder_channels: model.encoder_channels,
            decoder_widths: model.decoder_widths,
            gru_hidden: model.gru_hidden,
            n_blocks: model.n_blocks,
            reduction: model.reduction,
            neighbors: model.neighbors,
            offset_radius: model.offset_radius,
            iterations: model.iterations,
            gamma_init: model.gamma_init,
            ablation: model.ablation,
            lambda: 0.25,
            grad_scales: 4,
            lr_fusion: 5e-6,
            lr_refinement: 1e-5,
            batch_size: 4,
            epochs: 100,
            max_steps: None,
            checkpoint_every: 1,
            grad_clip: 1.0,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            flip: true,
            crop: Some([56, 56]),
            cutoffs: DEFAULT_CUTOFFS.to_vec(),
            cutoff_mode: CutoffMode::GroundTruth,
        }
    }
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| Error::Config(format!("bad run config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io_at(path, e))?;
        Self::from_json(&text).map_err(|e| e.in_file(path))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.model_config().validate()?;
        self.synth_config().validate()?;
        if self.sequence_length == 0 || self.batch_size == 0 {
            return Err(Error::Config("sequence_length and batch_size must be positive".into()));
        }
        if !(self.lr_fusion >= 0.0 && self.lr_refinement >= 0.0) {
            return Err(Error::Config("learning rates must be non-negative".into()));
        }
        if self.checkpoint_every == 0 {
            return Err(Error::Config("checkpoint_every must be positive".into()));
        }
        if !(self.grad_clip > 0.0) {
            return Err(Error::Config("grad_clip must be positive".into()));
        }
        let m = self.model_config().size_multiple();
        let [h, w] = self.resolution;
        if h % m != 0 || w % m != 0 {
            return Err(Error::Config(format!("resolution {h}x{w} must be a multiple of {m}")));
        }
        if let Some([ch, cw]) = self.crop {
            if ch > h || cw > w || ch % m != 0 || cw % m != 0 || ch == 0 || cw == 0 {
                return Err(Error::Config(format!(
                    "crop {ch}x{cw} must fit in {h}x{w} and be a positive multiple of {m}"
                )));
            }
        }
        Ok(())
    }

    pub fn log_params(&self) -> LogDepthParams {
        LogDepthParams {
            alpha: self.alpha,
            d_max: self.d_max,
        }
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            bins: self.bins,
            patch_scales: self.patch_scales.clone(),
            encoder_channels: self.encoder_channels.clone(),
            n_blocks: self.n_blocks,
            reduction: self.reduction,
            decoder_widths: self.decoder_widths.clone(),
            gru_hidden: self.gru_hidden,
            neighbors: self.neighbors,
            offset_radius: self.offset_radius,
            iterations: self.iterations,
            gamma_init: self.gamma_init,
            ablation: self.ablation,
        }
    }

    pub fn synth_config(&self) -> SynthConfig {
        SynthConfig {
            height: self.resolution[0],
            width: self.resolution[1],
            frames: self.frames,
            frame_period_us: self.frame_period_us,
            threshold_c: self.threshold_c,
            substeps: self.substeps,
            gain: self.gain,
            noise_std: self.noise_std,
            boxes: self.boxes,
            speed: self.speed,
            params: self.log_params(),
        }
    }

    pub fn assembly_config(&self) -> AssemblyConfig {
        AssemblyConfig {
            sequence_length: self.sequence_length,
            bins: self.bins,
            delta_t: self.frame_period_us,
            patch_scales: self.patch_scales.clone(),
        }
    }

    pub fn loss_config(&self) -> LossConfig {
        LossConfig {
            lambda: self.lambda,
            scales: self.grad_scales,
        }
    }

    pub fn learning_rate(&self, group: ParamGroup) -> f64 {
        match group {
            ParamGroup::Fusion => self.lr_fusion,
            ParamGroup::Refinement => self.lr_refinement,
        }
    }

    /// Narrow model, no augmentation and a raised learning rate, sized for
    /// single-core experiments.
    pub fn desk() -> Self {
        let model = ModelConfig::desk();
        Self {
            encoder_channels: model.encoder_channels,
            decoder_widths: model.decoder_widths,
            gru_hidden: model.gru_hidden,
            reduction: model.reduction,
            lr_fusion: 1e-3,
            lr_refinement: 2e-3,
            flip: false,
            crop: None,
            ..Self::default()
        }
    }
}

/// Per-sample augmentation, applied identically to every step.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Augment {
    pub flip: bool,
    pub top: usize,
    pub left: usize,
    pub height: usize,
    pub width: usize,
}

impl Augment {
    pub fn none(height: usize, width: usize) -> Self {
        Self {
            flip: false,
            top: 0,
            left: 0,
            height,
            width,
        }
    }

    pub fn random(rng: &mut ChaCha8Rng, height: usize, width: usize, flip: bool, crop: Option<[usize; 2]>) -> Self {
        let flip = flip && rng.gen_bool(0.5);
        let (ch, cw) = crop.map_or((height, width), |[a, b]| (a.min(height), b.min(width)));
        Self {
            flip,
            top: rng.gen_range(0..=height - ch),
            left: rng.gen_range(0..=width - cw),
            height: ch,
            width: cw,
        }
    }

    fn tensor(&self, t: &Tensor) -> Tensor {
        let t = if self.flip { t.flip_horizontal() } else { t.clone() };
        if (self.top, self.left, self.height, self.width) == (0, 0, t.height(), t.width()) {
            t
        } else {
            t.crop(self.top, self.left, self.height, self.width)
        }
    }

    fn depth(&self, d: &DepthRaster) -> DepthRaster {
        let d = if self.flip { d.flip_horizontal() } else { d.clone() };
        d.crop(self.top, self.left, self.height, self.width)
    }
}

/// Frames enter the network mapped from `[0, 1]` to `[-1, 1]`. The mapping is
/// fixed, so a darker scene stays darker after normalisation.
pub fn normalize_frame(t: &Tensor) -> Tensor {
    t.map(|v| (v - 0.5) / 0.5)
}

/// Network inputs and log01 targets for a batch of samples.
#[derive(Clone, Debug)]
pub struct Batch {
    pub inputs: Vec<StepInput>,
    pub targets: Vec<Tensor>,
    pub valids: Vec<Tensor>,
    /// Metres ground truth per step and batch item, after augmentation.
    pub depths: Vec<Vec<DepthRaster>>,
}

pub fn make_batch(samples: &[&SequenceSample], augments: &[Augment], params: LogDepthParams) -> Result<Batch> {
    assert_eq!(samples.len(), augments.len(), "one augmentation per sample");
    let Some(first) = samples.first() else {
        return Err(Error::Data("empty batch".into()));
    };
    let l = first.len();
    if samples.iter().any(|s| s.len() != l) {
        return Err(Error::Data("samples in a batch differ in length".into()));
    }
    let mut batch = Batch {
        inputs: Vec::with_capacity(l),
        targets: Vec::with_capacity(l),
        valids: Vec::with_capacity(l),
        depths: Vec::with_capacity(l),
    };
    for k in 0..l {
        let mut voxels = Vec::new();
        let mut frames = Vec::new();
        let mut event_priors = Vec::new();
        let mut frame_priors = Vec::new();
        let mut targets = Vec::new();
        let mut valids = Vec::new();
        let mut depths = Vec::new();
        for (s, a) in samples.iter().zip(augments) {
            voxels.push(a.tensor(&s.voxel_grids[k].to_tensor()));
            frames.push(a.tensor(&normalize_frame(&s.frames[k].to_tensor())));
            event_priors.push(a.tensor(&s.event_priors[k]));
            frame_priors.push(a.tensor(&s.frame_priors[k]));
            let depth = a.depth(&s.depths[k]);
            let norm = log_normalize(&depth, params)?;
            targets.push(norm.raster.to_tensor());
            valids.push(norm.raster.valid_tensor());
            depths.push(depth);
        }
        let stack = |v: &[Tensor]| Tensor::stack_batch(&v.iter().collect::<Vec<_>>());
        batch.inputs.push(StepInput {
            voxels: stack(&voxels),
            frames: stack(&frames),
            event_priors: stack(&event_priors),
            frame_priors: stack(&frame_priors),
        });
        batch.targets.push(stack(&targets));
        batch.valids.push(stack(&valids));
        batch.depths.push(depths);
    }
    Ok(batch)
}

/// Global L2 norm of all gradients; rescales them to at most `max_norm`.
pub fn clip_grad_norm(grads: &mut [(ParamId, Tensor)], max_norm: f64) -> f64 {
    let norm = grads
        .iter()
        .flat_map(|(_, g)| g.data())
        .map(|v| v * v)
        .sum::<f64>()
        .sqrt();
    if norm > max_norm {
        let s = max_norm / norm;
        for (_, g) in grads.iter_mut() {
            *g = g.scale(s);
        }
    }
    norm
}

#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub t: u64,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
}

impl Adam {
    pub fn new(store: &ParamStore, beta1: f64, beta2: f64, eps: f64) -> Self {
        let zeros: Vec<Tensor> = store.entries().iter().map(|e| Tensor::zeros(e.value.shape())).collect();
        Self {
            beta1,
            beta2,
            eps,
            t: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    /// One update. Parameters without a gradient keep their value and
    /// moments.
    pub fn step(&mut self, store: &mut ParamStore, grads: &[(ParamId, Tensor)], lr: impl Fn(ParamGroup) -> f64) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for (id, g) in grads {
            let i = id.index();
            let rate = lr(store.entry(*id).group);
            let (b1, b2, eps) = (self.beta1, self.beta2, self.eps);
            let m = self.m[i].zip_map(g, |m, g| b1 * m + (1.0 - b1) * g);
            let v = self.v[i].zip_map(g, |v, g| b2 * v + (1.0 - b2) * g * g);
            let mut p = store.get(*id).clone();
            for ((p, &m), &v) in p.data_mut().iter_mut().zip(m.data()).zip(v.data()) {
                *p -= rate * (m / bc1) / ((v / bc2).sqrt() + eps);
            }
            store.set(*id, p);
            self.m[i] = m;
            self.v[i] = v;
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepLog {
    pub step: u64,
    pub epoch: u64,
    pub mse: f64,
    pub grad: f64,
    pub total: f64,
    pub grad_norm: f64,
}

pub const LOSS_LOG_HEADER: &str = "step,epoch,mse,grad,total";

impl StepLog {
    pub fn csv_line(&self) -> String {
        format!("{},{},{},{},{}", self.step, self.epoch, self.mse, self.grad, self.total)
    }
}

/// Model, parameters and optimiser state of a run.
pub struct Trainer {
    pub config: RunConfig,
    pub net: SrfNet,
    pub params: ParamStore,
    pub adam: Adam,
    /// Optimisation steps taken.
    pub step: u64,
    /// Completed epochs.
    pub epoch: u64,
}

fn epoch_rng(seed: u64, epoch: u64) -> ChaCha8Rng {
    seeded_rng(seed.wrapping_mul(0x9e37_79b9_7f4a_7c15).wrapping_add(epoch.wrapping_add(1)))
}

impl Trainer {
    pub fn new(config: RunConfig) -> Result<Self> {
        config.validate()?;
        let (net, params) = SrfNet::new(config.model_config(), config.seed)?;
        let adam = Adam::new(&params, config.beta1, config.beta2, config.adam_eps);
        Ok(Self {
            config,
            net,
            params,
            adam,
            step: 0,
            epoch: 0,
        })
    }

    /// Rebuild from a checkpoint; `config` overrides the stored one when
    /// given (it must describe the same architecture).
    pub fn from_checkpoint(ck: &Checkpoint, config: Option<RunConfig>) -> Result<Self> {
        let config = match config {
            Some(c) => c,
            None => RunConfig::from_json(&ck.config)?,
        };
        let mut t = Self::new(config)?;
        ck.restore_into(&mut t.params)?;
        if let Some(o) = &ck.optimizer {
            if o.first_moments.len() != t.params.len() {
                return Err(Error::Data("optimiser state does not match the model".into()));
            }
            t.adam.t = o.adam_step;
            t.adam.m = o.first_moments.clone();
            t.adam.v = o.second_moments.clone();
            t.step = o.step;
            t.epoch = o.epoch;
        }
        Ok(t)
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint::from_store(
            self.config.to_json(),
            &self.params,
            Some(OptimizerState {
                adam_step: self.adam.t,
                step: self.step,
                epoch: self.epoch,
                first_moments: self.adam.m.clone(),
                second_moments: self.adam.v.clone(),
            }),
        )
    }

    /// `(mse, grad, total)` on a batch without updating anything.
    pub fn loss(&self, batch: &Batch) -> Result<(f64, f64, f64)> {
        let mut g = Graph::with_params(&self.params);
        let outs = self.net.forward_sequence(&mut g, &batch.inputs)?;
        let preds: Vec<_> = outs.iter().map(|o| o.depth()).collect();
        let terms = total_loss(&mut g, &preds, &batch.targets, &batch.valids, &self.config.loss_config());
        Ok(terms.values(&g))
    }

    pub fn train_step(&mut self, batch: &Batch, epoch: u64) -> Result<StepLog> {
        let (mut grads, mse, grad, total) = {
            let mut g = Graph::with_params(&self.params);
            let outs = self.net.forward_sequence(&mut g, &batch.inputs)?;
            let preds: Vec<_> = outs.iter().map(|o| o.depth()).collect();
            let terms = total_loss(&mut g, &preds, &batch.targets, &batch.valids, &self.config.loss_config());
            let (mse, grad, total) = terms.values(&g);
            if !total.is_finite() {
                return Err(Error::Data(format!("loss became {total} at step {}", self.step)));
            }
            let grads = g.backward(terms.total).params(&g);
            (grads, mse, grad, total)
        };
        let grad_norm = clip_grad_norm(&mut grads, self.config.grad_clip);
        let cfg = &self.config;
        self.adam.step(&mut self.params, &grads, |group| cfg.learning_rate(group));
        self.step += 1;
        Ok(StepLog {
            step: self.step,
            epoch,
            mse,
            grad,
            total,
            grad_norm,
        })
    }

    /// Shuffled batches of sample indices with their augmentations for one
    /// epoch; a function of the seed and the epoch only.
    pub fn epoch_plan(&self, samples: &[SequenceSample], epoch: u64) -> Vec<(Vec<usize>, Vec<Augment>)> {
        let mut rng = epoch_rng(self.config.seed, epoch);
        let mut order: Vec<usize> = (0..samples.len()).collect();
        order.shuffle(&mut rng);
        order
            .chunks(self.config.batch_size)
            .map(|idx| {
                let augs = idx
                    .iter()
                    .map(|&i| {
                        let s = &samples[i];
                        Augment::random(&mut rng, s.height(), s.width(), self.config.flip, self.config.crop)
                    })
                    .collect();
                (idx.to_vec(), augs)
            })
            .collect()
    }

    /// Train until `epochs` are complete or `max_steps` is reached,
    /// continuing from the current step. With `out`, appends to
    /// `loss.csv` and writes `last.ckpt` plus a checkpoint per epoch.
    pub fn run(
        &mut self,
        samples: &[SequenceSample],
        out: Option<&Path>,
        mut on_step: impl FnMut(&StepLog),
    ) -> Result<Vec<StepLog>> {
        if samples.is_empty() {
            return Err(Error::Data("no training samples".into()));
        }
        let per_epoch = samples.len().div_ceil(self.config.batch_size) as u64;
        let max_steps = self.config.max_steps.map_or(u64::MAX, |m| m as u64);
        let mut log_file = match out {
            Some(dir) => {
                std::fs::create_dir_all(dir).map_err(|e| Error::io_at(dir, e))?;
                let path = dir.join("loss.csv");
                let fresh = self.step == 0 || !path.exists();
                let mut f = std::fs::OpenOptions::new()
                    .create(true)
                    .append(!fresh)
                    .write(true)
                    .truncate(fresh)
                    .open(&path)
                    .map_err(|e| Error::io_at(&path, e))?;
                if fresh {
                    writeln!(f, "{LOSS_LOG_HEADER}").map_err(|e| Error::io_at(&path, e))?;
                }
                Some((f, path))
            }
            None => None,
        };
        let params = self.config.log_params();
        let mut logs = Vec::new();
        let mut epoch = self.step / per_epoch;
        while epoch < self.config.epochs as u64 && self.step < max_steps {
            let skip = (self.step - epoch * per_epoch) as usize;
            for (idx, augs) in self.epoch_plan(samples, epoch).into_iter().skip(skip) {
                if self.step >= max_steps {
                    break;
                }
                let refs: Vec<&SequenceSample> = idx.iter().map(|&i| &samples[i]).collect();
                let batch = make_batch(&refs, &augs, params)?;
                let log = self.train_step(&batch, epoch)?;
                if let Some((f, path)) = log_file.as_mut() {
                    writeln!(f, "{}", log.csv_line()).map_err(|e| Error::io_at(path, e))?;
                }
                on_step(&log);
                logs.push(log);
            }
            if self.step == (epoch + 1) * per_epoch {
                epoch += 1;
                self.epoch = epoch;
                if let Some(dir) = out.filter(|_| epoch % self.config.checkpoint_every as u64 == 0) {
                    self.checkpoint().save(&dir.join(format!("epoch_{epoch:04}.ckpt")))?;
                }
            }
        }
        if let Some(dir) = out {
            self.checkpoint().save(&dir.join("last.ckpt"))?;
        }
        Ok(logs)
    }
}

/// Default output directory for a command.
pub fn default_out(kind: &str) -> PathBuf {
    PathBuf::from("runs").join(kind)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::assemble_synthetic;
    use crate::synth::generate_sequence;

    fn tiny() -> RunConfig {
        RunConfig {
            resolution: [16, 16],
            frames: 4,
            sequence_length: 2,
            patch_scales: vec![4, 8],
            encoder_channels: vec![4, 4, 8],
            decoder_widths: vec![8, 4, 4],
            gru_hidden: 4,
            reduction: 2,
            iterations: 2,
            batch_size: 2,
            epochs: 2,
            crop: Some([8, 16]),
            lr_fusion: 1e-3,
            lr_refinement: 1e-3,
            ..RunConfig::default()
        }
    }

    fn samples(cfg: &RunConfig) -> Vec<SequenceSample> {
        let mut out = Vec::new();
        for s in 0..2 {
            let seq = generate_sequence(&cfg.synth_config(), s).unwrap();
            out.extend(assemble_synthetic("s", &seq, &cfg.assembly_config()).unwrap().0);
        }
        out
    }

    #[test]
    fn config_json_roundtrip_and_unknown_keys() {
        let cfg = RunConfig::default();
        assert_eq!(RunConfig::from_json(&cfg.to_json()).unwrap(), cfg);
        let partial = RunConfig::from_json("{\"seed\": 7, \"lambda\": 0.5}").unwrap();
        assert_eq!((partial.seed, partial.lambda, partial.sequence_length), (7, 0.5, 8));
        assert!(RunConfig::from_json("{\"lamda\": 0.5}").is_err());
    }

    #[test]
    fn defaults_follow_the_training_recipe() {
        let c = RunConfig::default();
        assert_eq!((c.lambda, c.sequence_length, c.bins, c.batch_size), (0.25, 8, 5, 4));
        assert_eq!((c.lr_fusion, c.lr_refinement), (5e-6, 1e-5));
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        let mut store = ParamStore::new();
        let mut rng = seeded_rng(0);
        let id = crate::params::ParamBuilder::new(&mut store, &mut rng, ParamGroup::Fusion).tensor(
            "p",
            [1, 1, 1, 2],
            crate::params::Init::Zeros,
        );
        let mut adam = Adam::new(&store, 0.9, 0.999, 1e-8);
        let g = Tensor::new([1, 1, 1, 2], vec![3.0, -0.5]);
        adam.step(&mut store, &[(id, g)], |_| 0.1);
        let p = store.get(id).data();
        assert!((p[0] + 0.1).abs() < 1e-6 && (p[1] - 0.1).abs() < 1e-6);
    }

    #[test]
    fn clipping_bounds_the_global_norm() {
        let mut grads = vec![
            (ParamId(0), Tensor::new([1, 1, 1, 2], vec![3.0, 0.0])),
            (ParamId(1), Tensor::new([1, 1, 1, 1], vec![4.0])),
        ];
        assert_eq!(clip_grad_norm(&mut grads, 1.0), 5.0);
        let n: f64 = grads.iter().flat_map(|(_, g)| g.data()).map(|v| v * v).sum();
        assert!((n.sqrt() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn flip_mirrors_every_modality_consistently() {
        let cfg = tiny();
        let s = samples(&cfg);
        let a = Augment {
            flip: true,
            ..Augment::none(16, 16)
        };
        let plain = make_batch(&[&s[0]], &[Augment::none(16, 16)], cfg.log_params()).unwrap();
        let flipped = make_batch(&[&s[0]], &[a], cfg.log_params()).unwrap();
        for k in 0..plain.inputs.len() {
            assert_eq!(flipped.inputs[k].voxels, plain.inputs[k].voxels.flip_horizontal());
            assert_eq!(flipped.inputs[k].frames, plain.inputs[k].frames.flip_horizontal());
            assert_eq!(flipped.targets[k], plain.targets[k].flip_horizontal());
        }
    }

    #[test]
    fn zero_epochs_keep_the_initialisation() {
        let cfg = RunConfig { epochs: 0, ..tiny() };
        let s = samples(&cfg);
        let mut t = Trainer::new(cfg.clone()).unwrap();
        let init = t.params.clone();
        let dir = tempfile::tempdir().unwrap();
        assert!(t.run(&s, Some(dir.path()), |_| {}).unwrap().is_empty());
        let ck = Checkpoint::load(&dir.path().join("last.ckpt")).unwrap();
        let mut restored = Trainer::new(cfg).unwrap();
        ck.restore_into(&mut restored.params).unwrap();
        for (a, b) in restored.params.entries().iter().zip(init.entries()) {
            assert_eq!(a.value, b.value);
        }
    }

    #[test]
    fn resume_matches_unbroken_run() {
        let cfg = tiny();
        let s = samples(&cfg);
        let mut full = Trainer::new(cfg.clone()).unwrap();
        let unbroken = full.run(&s, None, |_| {}).unwrap();
        assert_eq!(unbroken.len(), 4);

        let mut first = Trainer::new(RunConfig {
            max_steps: Some(3),
            ..cfg.clone()
        })
        .unwrap();
        first.run(&s, None, |_| {}).unwrap();
        let mut buf = Vec::new();
        first.checkpoint().write(&mut buf).unwrap();
        let ck = Checkpoint::read(&buf[..]).unwrap();
        let mut resumed = Trainer::from_checkpoint(&ck, Some(cfg)).unwrap();
        let rest = resumed.run(&s, None, |_| {}).unwrap();
        assert_eq!(rest.len(), 1);
        assert_eq!(rest[0], unbroken[3]);
    }
}
