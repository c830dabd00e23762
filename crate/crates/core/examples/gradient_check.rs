//! Run every registered gradient check and the affinity bound checks.
//!
//! cargo run --release --example gradient_check

use srfnet::gradcheck::GradCheckConfig;
use srfnet::verify::{affinity_bound_checks, run_gradient_checks};

fn main() {
    let start = std::time::Instant::now();
    let reports = run_gradient_checks(&GradCheckConfig::default());
    for r in &reports {
        println!("{}", r.line());
    }
    let bounds = affinity_bound_checks(0, 100);
    for b in &bounds {
        println!("{}", b.line());
    }
    let failed = reports.iter().filter(|r| !r.passed()).count() + bounds.iter().filter(|b| !b.passed).count();
    println!("{} checks, {failed} failed, {:.1}s", reports.len() + bounds.len(), start.elapsed().as_secs_f64());
}
