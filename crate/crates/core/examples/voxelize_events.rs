//! Simulate events for a short synthetic sequence, cut them into frame
//! windows and build voxel grids.
//!
//! cargo run --release --example voxelize_events

use srfnet::event::{accumulate_windows, build_voxel_grid, normalize_voxel_grid};
use srfnet::synth::{generate_sequence, SynthConfig};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let cfg = SynthConfig {
        frames: 6,
        ..SynthConfig::default()
    };
    let seq = generate_sequence(&cfg, 7)?;
    println!("{} events over {} frames", seq.events.len(), seq.frames.len());

    let bins = 5;
    for w in accumulate_windows(&seq.events, cfg.frame_period_us)? {
        let grid = build_voxel_grid(&w, bins, cfg.height, cfg.width)?;
        let polarity: f64 = w.events.iter().map(|e| e.p.sign()).sum();
        let norm = normalize_voxel_grid(&grid);
        let per_bin: Vec<String> = (0..bins).map(|b| format!("{:+.1}", grid.bin(b).iter().sum::<f64>())).collect();
        println!(
            "window {} [{}, {}) events {:>6}  grid sum {:+.3} = polarity sum {:+.0}  bins [{}]  normalized mean {:+.2e}",
            w.index,
            w.t_start,
            w.t_end,
            w.events.len(),
            grid.sum(),
            polarity,
            per_bin.join(" "),
            norm.sum() / norm.data().len() as f64
        );
    }
    Ok(())
}
