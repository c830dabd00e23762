//! Write a small synthetic dataset, read it back and assemble training
//! samples. Pass an output directory to keep the files.
//!
//! cargo run --release --example synthesize_dataset -- [dir]

use srfnet::commands::{load_samples, synth_dataset};
use srfnet::train::RunConfig;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let tmp;
    let root = match std::env::args().nth(1) {
        Some(dir) => std::path::PathBuf::from(dir),
        None => {
            tmp = std::env::temp_dir().join(format!("srfnet-synth-{}", std::process::id()));
            tmp.clone()
        }
    };
    let mut cfg = RunConfig {
        sequences: 2,
        frames: 16,
        ..RunConfig::default()
    };
    for gain in [1.0, 0.2] {
        cfg.gain = gain;
        let dir = root.join(format!("gain_{gain}"));
        let summary = synth_dataset(&cfg, &dir)?;
        println!("gain {gain} -> {}\n{}", dir.display(), summary.report());
        let samples = load_samples(&cfg, &dir)?;
        for s in &samples {
            println!(
                "  {} frames {}..{} windows {:?} .. {:?}",
                s.sequence,
                s.start,
                s.start + s.len() - 1,
                s.windows[0],
                s.windows[s.len() - 1]
            );
        }
    }
    Ok(())
}
