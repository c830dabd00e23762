//! Log-depth normalisation round trip and the evaluation metrics on a
//! perturbed prediction.
//!
//! cargo run --release --example depth_metrics

use srfnet::metrics::{depth_metrics, format_table, CutoffMode, DEFAULT_CUTOFFS};
use srfnet::objective::{log_denormalize, log_normalize, DepthRaster, DepthSpace, LogDepthParams};
use srfnet::params::seeded_rng;
use rand::Rng;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    for p in [LogDepthParams::MVSEC, LogDepthParams::DENSE] {
        let depths: Vec<f64> = (0..=4).map(|i| p.floor() * (p.d_max / p.floor()).powf(i as f64 / 4.0)).collect();
        let r = DepthRaster::dense(1, depths.len(), depths.clone(), DepthSpace::Meters, p);
        let n = log_normalize(&r, p)?.raster;
        let back = log_denormalize(&n)?;
        println!("alpha {} d_max {}:", p.alpha, p.d_max);
        for ((d, v), b) in depths.iter().zip(&n.data).zip(&back.data) {
            println!("  {d:>10.4} m -> {v:.4} -> {b:.4} m");
        }
    }

    let p = LogDepthParams::MVSEC;
    let mut rng = seeded_rng(3);
    let (h, w) = (32, 32);
    let gt: Vec<f64> = (0..h * w).map(|_| rng.gen_range(2.0..40.0)).collect();
    let valid: Vec<bool> = (0..h * w).map(|_| rng.gen_bool(0.9)).collect();
    let gt = DepthRaster::new(h, w, gt, valid, DepthSpace::Meters, p);
    let mut rows = Vec::new();
    for (name, f) in [("exact", 0.0), ("5% noise", 0.05), ("20% noise", 0.2)] {
        let data = gt.data.iter().map(|d| d * (1.0 + f * rng.gen_range(-1.0..1.0))).collect();
        let pred = DepthRaster::dense(h, w, data, DepthSpace::Meters, p);
        rows.push((name.to_string(), depth_metrics(&pred, &gt, &DEFAULT_CUTOFFS, CutoffMode::GroundTruth)?));
    }
    let scaled = DepthRaster::dense(h, w, gt.data.iter().map(|d| 2.0 * d).collect(), DepthSpace::Meters, p);
    rows.push(("2x scale".into(), depth_metrics(&scaled, &gt, &DEFAULT_CUTOFFS, CutoffMode::GroundTruth)?));
    print!("{}", format_table(&rows));
    Ok(())
}
