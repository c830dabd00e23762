//! Overfit a narrow model on four short synthetic sequences and report the
//! loss drop and AbsRel on the training data.
//!
//! cargo run --release --example train_overfit -- [steps]

use srfnet::dataset::assemble_synthetic;
use srfnet::eval::{pooled_metrics, predict_samples};
use srfnet::synth::generate_sequence;
use srfnet::train::{RunConfig, Trainer};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let steps: usize = std::env::args().nth(1).map_or(Ok(300), |s| s.parse())?;
    let cfg = RunConfig {
        frames: 8,
        sequence_length: 8,
        epochs: steps,
        max_steps: Some(steps),
        ..RunConfig::desk()
    };
    let mut samples = Vec::new();
    for seed in 0..4 {
        let seq = generate_sequence(&cfg.synth_config(), seed)?;
        samples.extend(assemble_synthetic(&format!("seq{seed}"), &seq, &cfg.assembly_config())?.0);
    }
    let mut trainer = Trainer::new(cfg.clone())?;
    let start = std::time::Instant::now();
    let logs = trainer.run(&samples, None, |l| {
        if l.step % 25 == 0 || l.step == 1 {
            println!("step {:>5} total {:.5} (mse {:.5} grad {:.5}) |g| {:.3}", l.step, l.total, l.mse, l.grad, l.grad_norm);
        }
    })?;
    let first = logs.first().map_or(f64::NAN, |l| l.total);
    let last = trainer.loss(&srfnet::train::make_batch(
        &samples.iter().collect::<Vec<_>>(),
        &samples.iter().map(|s| srfnet::train::Augment::none(s.height(), s.width())).collect::<Vec<_>>(),
        cfg.log_params(),
    )?)?;
    let preds = predict_samples(&trainer.net, &trainer.params, &samples, cfg.log_params(), cfg.batch_size)?;
    let m = pooled_metrics(&preds, &cfg.cutoffs, cfg.cutoff_mode)?;
    println!(
        "{} steps in {:.1}s: loss {:.5} -> {:.5} ({:.1}%), AbsRel {:.4}",
        logs.len(),
        start.elapsed().as_secs_f64(),
        first,
        last.2,
        100.0 * last.2 / first,
        m.abs_rel
    );
    Ok(())
}
