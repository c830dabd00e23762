//! The command-line workflows as library calls.

use std::path::{Path, PathBuf};

use crate::checkpoint::Checkpoint;
use crate::dataset::{assemble_dataset, load_dataset, write_sequence, SequenceMeta, SequenceSample};
use crate::error::{Error, Result};
use crate::eval::{bypass_predictions, dump_predictions, pooled_metrics, predict_samples, write_report};
use crate::gradcheck::{GradCheckConfig, GradCheckReport};
use crate::mask::edge_energy;
use crate::metrics::DepthMetrics;
use crate::synth::generate_sequence;
use crate::train::{RunConfig, StepLog, Trainer};
use crate::verify::{affinity_bound_checks, run_gradient_checks, CheckLine};

/// Seed of the `index`-th synthetic sequence of a run.
pub fn sequence_seed(seed: u64, index: usize) -> u64 {
    seed.wrapping_mul(1_000_003).wrapping_add(index as u64)
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthSummary {
    pub sequences: usize,
    pub frames: usize,
    pub events: usize,
    pub positive_events: usize,
    /// Mean Sobel magnitude over every written frame.
    pub mean_sobel_energy: f64,
}

impl SynthSummary {
    pub fn report(&self) -> String {
        let per_seq = self.events as f64 / self.sequences.max(1) as f64;
        let pos = self.positive_events as f64 / self.events.max(1) as f64;
        format!(
            "sequences: {}\nframes: {}\nevents: {} ({per_seq:.1} per sequence, {:.1}% positive)\nmean frame Sobel energy: {:.6}",
            self.sequences,
            self.frames,
            self.events,
            100.0 * pos,
            self.mean_sobel_energy
        )
    }
}

/// Write `cfg.sequences` synthetic sequences under `root` as `seq_%03d`.
pub fn synth_dataset(cfg: &RunConfig, root: &Path) -> Result<SynthSummary> {
    cfg.validate()?;
    let synth = cfg.synth_config();
    let meta = SequenceMeta {
        resolution: cfg.resolution,
        frame_period_us: cfg.frame_period_us,
        alpha: cfg.alpha,
        d_max: cfg.d_max,
        threshold_c: cfg.threshold_c,
    };
    let mut summary = SynthSummary {
        sequences: 0,
        frames: 0,
        events: 0,
        positive_events: 0,
        mean_sobel_energy: 0.0,
    };
    let mut energy = 0.0;
    for i in 0..cfg.sequences {
        let seq = generate_sequence(&synth, sequence_seed(cfg.seed, i))?;
        write_sequence(&root.join(format!("seq_{i:03}")), &seq, &meta)?;
        summary.sequences += 1;
        summary.frames += seq.frames.len();
        summary.events += seq.events.len();
        summary.positive_events += seq.events.events().iter().filter(|e| e.p.sign() > 0.0).count();
        energy += seq.frames.iter().map(edge_energy).sum::<f64>();
    }
    summary.mean_sobel_energy = energy / summary.frames.max(1) as f64;
    Ok(summary)
}

/// Load and assemble a dataset, checking it against the run configuration.
pub fn load_samples(cfg: &RunConfig, root: &Path) -> Result<Vec<SequenceSample>> {
    let seqs = load_dataset(root)?;
    if seqs.is_empty() {
        return Err(Error::Data(format!("no sequences found under {}", root.display())));
    }
    for s in &seqs {
        let p = s.meta.params();
        if (p.alpha, p.d_max) != (cfg.alpha, cfg.d_max) {
            return Err(Error::Config(format!(
                "sequence {} uses alpha={} d_max={}, the run expects alpha={} d_max={}",
                s.name, p.alpha, p.d_max, cfg.alpha, cfg.d_max
            )));
        }
    }
    let (samples, report) = assemble_dataset(&seqs, &cfg.assembly_config())?;
    if report.dropped > 0 {
        eprintln!("warning: dropped {} samples with missing frames or depth", report.dropped);
    }
    if samples.is_empty() {
        return Err(Error::Data(format!(
            "no complete samples of length {} under {}",
            cfg.sequence_length,
            root.display()
        )));
    }
    let m = cfg.model_config().size_multiple();
    for s in &samples {
        if s.height() % m != 0 || s.width() % m != 0 {
            return Err(Error::Data(format!(
                "sequence {} is {}x{}, which is not a multiple of {m}",
                s.sequence,
                s.height(),
                s.width()
            )));
        }
    }
    Ok(samples)
}

/// Train on the dataset under `root`, writing `config.json`, `loss.csv` and
/// checkpoints into `out`. With `resume`, continues from that checkpoint.
pub fn train(
    cfg: &RunConfig,
    root: &Path,
    out: &Path,
    resume: Option<&Path>,
    on_step: impl FnMut(&StepLog),
) -> Result<Trainer> {
    let samples = load_samples(cfg, root)?;
    let mut trainer = match resume {
        Some(path) => Trainer::from_checkpoint(&Checkpoint::load(path)?, Some(cfg.clone()))?,
        None => Trainer::new(cfg.clone())?,
    };
    std::fs::create_dir_all(out).map_err(|e| Error::io_at(out, e))?;
    let path = out.join("config.json");
    std::fs::write(&path, cfg.to_json() + "\n").map_err(|e| Error::io_at(&path, e))?;
    trainer.run(&samples, Some(out), on_step)?;
    Ok(trainer)
}

/// Source of the predictions being evaluated.
#[derive(Clone, Debug)]
pub enum Predictor {
    Checkpoint(PathBuf),
    /// Ground truth scored against itself.
    Bypass,
}

/// Evaluate on the dataset under `root`; writes the report and, with
/// `dump`, depth maps into `out`. Returns the metrics and the table.
pub fn evaluate(cfg: &RunConfig, predictor: &Predictor, root: &Path, out: &Path, dump: bool) -> Result<(DepthMetrics, String)> {
    let samples = load_samples(cfg, root)?;
    let preds = match predictor {
        Predictor::Bypass => bypass_predictions(&samples),
        Predictor::Checkpoint(path) => {
            let trainer = Trainer::from_checkpoint(&Checkpoint::load(path)?, None)?;
            predict_samples(&trainer.net, &trainer.params, &samples, cfg.log_params(), cfg.batch_size)?
        }
    };
    let metrics = pooled_metrics(&preds, &cfg.cutoffs, cfg.cutoff_mode)?;
    let label = match predictor {
        Predictor::Bypass => "ground truth".to_string(),
        Predictor::Checkpoint(p) => p.display().to_string(),
    };
    let table = write_report(out, &label, &metrics)?;
    if dump {
        dump_predictions(&out.join("dumps"), &preds)?;
    }
    Ok((metrics, table))
}

/// Predict depth for every sample and write the maps into `out`.
pub fn infer(checkpoint: &Path, root: &Path, out: &Path) -> Result<usize> {
    let ck = Checkpoint::load(checkpoint)?;
    let cfg = RunConfig::from_json(&ck.config)?;
    let trainer = Trainer::from_checkpoint(&ck, None)?;
    let samples = load_samples(&cfg, root)?;
    let preds = predict_samples(&trainer.net, &trainer.params, &samples, cfg.log_params(), cfg.batch_size)?;
    dump_predictions(out, &preds)?;
    Ok(preds.iter().map(|p| p.predictions.len()).sum())
}

#[derive(Clone, Debug)]
pub struct VerificationReport {
    pub gradients: Vec<GradCheckReport>,
    pub bounds: Vec<CheckLine>,
}

impl VerificationReport {
    pub fn passed(&self) -> bool {
        self.gradients.iter().all(|r| r.passed()) && self.bounds.iter().all(|b| b.passed)
    }

    pub fn lines(&self) -> Vec<String> {
        self.gradients
            .iter()
            .map(|r| r.line())
            .chain(self.bounds.iter().map(|b| b.line()))
            .collect()
    }
}

pub fn gradcheck(seed: u64, corrupt: Option<f64>) -> VerificationReport {
    let cfg = GradCheckConfig {
        seed,
        corrupt,
        ..GradCheckConfig::default()
    };
    VerificationReport {
        gradients: run_gradient_checks(&cfg),
        bounds: affinity_bound_checks(seed, 100),
    }
}
