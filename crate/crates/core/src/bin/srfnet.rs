use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use srfnet::commands::{self, Predictor};
use srfnet::error::{Error, Result};
use srfnet::train::RunConfig;

#[derive(Parser)]
#[command(name = "srfnet", version, about = "Event-frame fusion for monocular depth")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render synthetic sequences into a dataset directory.
    Synth(Common),
    /// Train on a dataset directory.
    Train {
        #[command(flatten)]
        common: Common,
        /// Continue from this checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Evaluate a checkpoint (or the ground truth itself) on a dataset.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long, required_unless_present = "bypass")]
        checkpoint: Option<PathBuf>,
        /// Score the ground truth against itself.
        #[arg(long)]
        bypass: bool,
        /// Skip the depth-map dumps.
        #[arg(long)]
        no_dump: bool,
    },
    /// Predict depth maps with a checkpoint.
    Infer {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long, default_value = "runs/infer")]
        out: PathBuf,
    },
    /// Run every gradient check and the affinity bound checks.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, hide = true)]
        corrupt: Option<f64>,
    },
}

#[derive(Args)]
struct Common {
    /// Run configuration JSON; flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    dataset: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch: Option<usize>,
    /// `HxW`, e.g. `64x64`.
    #[arg(long, value_parser = parse_resolution)]
    resolution: Option<[usize; 2]>,
    #[arg(long)]
    gain: Option<f64>,
    #[arg(long = "threshold-c")]
    threshold_c: Option<f64>,
    /// Comma-separated cut-off depths in metres.
    #[arg(long, value_delimiter = ',')]
    cutoffs: Option<Vec<f64>>,
}

fn parse_resolution(s: &str) -> std::result::Result<[usize; 2], String> {
    let (h, w) = s.split_once(['x', 'X']).ok_or("expected HxW")?;
    let p = |v: &str| v.trim().parse::<usize>().map_err(|e| format!("{v:?}: {e}"));
    Ok([p(h)?, p(w)?])
}

impl Common {
    fn config(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(path) => RunConfig::load(path)?,
            None => RunConfig::default(),
        };
        if let Some(v) = self.seed {
            cfg.seed = v;
        }
        if let Some(v) = self.epochs {
            cfg.epochs = v;
        }
        if let Some(v) = self.batch {
            cfg.batch_size = v;
        }
        if let Some(v) = self.resolution {
            cfg.resolution = v;
        }
        if let Some(v) = self.gain {
            cfg.gain = v;
        }
        if let Some(v) = self.threshold_c {
            cfg.threshold_c = v;
        }
        if let Some(v) = &self.cutoffs {
            cfg.cutoffs = v.clone();
        }
        cfg.validate()?;
        Ok(cfg)
    }

    fn dataset(&self) -> Result<PathBuf> {
        self.dataset
            .clone()
            .ok_or_else(|| Error::Config("--dataset is required".into()))
    }

    fn out(&self, default: &str) -> PathBuf {
        self.out.clone().unwrap_or_else(|| PathBuf::from(default))
    }
}

enum Outcome {
    Ok,
    VerificationFailed,
}

fn run(cli: Cli) -> Result<Outcome> {
    match cli.command {
        Command::Synth(c) => {
            let cfg = c.config()?;
            let out = c.dataset.clone().or_else(|| c.out.clone()).unwrap_or_else(|| "data/synth".into());
            let summary = commands::synth_dataset(&cfg, &out)?;
            println!("wrote {}", out.display());
            println!("{}", summary.report());
        }
        Command::Train { common, resume } => {
            let cfg = common.config()?;
            let out = common.out("runs/train");
            let trainer = commands::train(&cfg, &common.dataset()?, &out, resume.as_deref(), |l| {
                println!("step {} epoch {} mse {:.6} grad {:.6} total {:.6}", l.step, l.epoch, l.mse, l.grad, l.total);
            })?;
            println!("{} steps; checkpoints and loss.csv in {}", trainer.step, out.display());
        }
        Command::Eval {
            common,
            checkpoint,
            bypass,
            no_dump,
        } => {
            let cfg = common.config()?;
            let predictor = match checkpoint {
                Some(p) if !bypass => Predictor::Checkpoint(p),
                _ => Predictor::Bypass,
            };
            let out = common.out("runs/eval");
            let (_, table) = commands::evaluate(&cfg, &predictor, &common.dataset()?, &out, !no_dump)?;
            print!("{table}");
            println!("report in {}", out.display());
        }
        Command::Infer { checkpoint, dataset, out } => {
            let n = commands::infer(&checkpoint, &dataset, &out)?;
            println!("wrote {n} depth maps to {}", out.display());
        }
        Command::Gradcheck { seed, corrupt } => {
            let report = commands::gradcheck(seed, corrupt);
            for line in report.lines() {
                println!("{line}");
            }
            if !report.passed() {
                return Ok(Outcome::VerificationFailed);
            }
        }
    }
    Ok(Outcome::Ok)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(Outcome::Ok) => ExitCode::SUCCESS,
        Ok(Outcome::VerificationFailed) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
