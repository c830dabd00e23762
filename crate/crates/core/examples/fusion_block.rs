//! Run the consensus fusion chain on random features and show the
//! residual mask updates and the fused mask stack.
//!
//! cargo run --release --example fusion_block

use srfnet::autograd::Graph;
use srfnet::fusion::AifModule;
use srfnet::params::{seeded_rng, ParamBuilder, ParamGroup, ParamStore};
use srfnet::tensor::Tensor;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut store = ParamStore::new();
    let mut rng = seeded_rng(5);
    let aif = {
        let mut pb = ParamBuilder::new(&mut store, &mut rng, ParamGroup::Fusion);
        AifModule::new(&mut pb.pp("aif"), 8, 3, 4)?
    };
    let shape = [1, 8, 8, 8];
    let fe = Tensor::randn(shape, 1.0, &mut rng);
    let fi = Tensor::randn(shape, 1.0, &mut rng);
    let me = Tensor::uniform([1, 1, 8, 8], 0.0, 1.0, &mut rng);
    let mi = Tensor::uniform([1, 1, 8, 8], 0.0, 1.0, &mut rng);

    let mut g = Graph::with_params(&store);
    let (e, i, m1, m2) = (g.constant(fe), g.constant(fi), g.constant(me), g.constant(mi));
    let out = aif.forward(&mut g, e, i, m1, m2)?;
    for (k, b) in out.block_outputs.iter().enumerate() {
        let fused_mask = g.value(b.fused_mask);
        print!("block {k}: fused {:?} mask mean {:.4}", g.shape(b.fused), fused_mask.mean());
        if b.feedback.is_some() {
            let before = if k == 0 { m1 } else { out.block_outputs[k - 1].state.event_mask };
            let expected = g.value(before).zip_map(fused_mask, |a, b| a + b);
            print!("  event mask = previous + fused mask: {}", g.value(b.state.event_mask) == &expected);
        }
        println!();
    }
    println!("fused feature {:?}, mask stack {:?}", g.shape(out.fused), g.shape(out.mask_stack));
    Ok(())
}
