//! Affinity normalisation and non-local propagation on small examples.
//!
//! cargo run --release --example spatial_propagation

use srfnet::params::seeded_rng;
use srfnet::refine::{normalize_affinity_values, propagate_values};
use srfnet::tensor::Tensor;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    // Two pixels that each take half of the other's value.
    let coarse = Tensor::new([1, 1, 1, 2], vec![0.0, 1.0]);
    let weights = Tensor::new([1, 1, 1, 2], vec![0.5, 0.5]);
    let offsets = Tensor::new([1, 2, 1, 2], vec![0.0, 0.0, 1.0, -1.0]);
    let refined = propagate_values(&coarse, &weights, &offsets, 1);
    println!("1x2 example after one step: {:?}", refined.data());

    // Saturated affinities with full confidence sum to one.
    let k = 8;
    let raw = Tensor::full([1, k, 1, 1], 1e6);
    let conf = Tensor::full([1, 1, 1, 1], 1.0);
    let w = normalize_affinity_values(&raw, &conf, k as f64)?;
    println!("saturated weight sum: {:.9}", w.sum());

    // A noisy flat map smoothed by positive bounded affinities.
    let mut rng = seeded_rng(2);
    let (h, wd) = (8, 8);
    let flat = Tensor::full([1, 1, h, wd], 0.5);
    let noise = Tensor::randn([1, 1, h, wd], 0.05, &mut rng);
    let coarse = flat.zip_map(&noise, |a, b| a + b);
    let raw = Tensor::randn([1, k, h, wd], 2.0, &mut rng);
    let conf = Tensor::full([1, 1, h, wd], 1.0);
    let w = normalize_affinity_values(&raw.map(f64::abs), &conf, k as f64)?;
    let offsets = Tensor::uniform([1, 2 * k, h, wd], -2.0, 2.0, &mut rng);
    for iters in [0, 1, 6, 18] {
        let out = propagate_values(&coarse, &w, &offsets, iters);
        let err = out.zip_map(&flat, |a, b| (a - b).powi(2)).mean().sqrt();
        println!("{iters:>2} iterations: rms noise {err:.4}");
    }
    Ok(())
}
