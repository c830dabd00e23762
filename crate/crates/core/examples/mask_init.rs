//! Reliability priors and learned masks for one frame and its event window.
//!
//! cargo run --release --example mask_init

use srfnet::event::{build_voxel_grid, EventWindow};
use srfnet::mask::{density_stack, edge_energy, init_event_mask, init_frame_mask, sobel_edges, MaskHead, MaskSource};
use srfnet::params::{seeded_rng, ParamBuilder, ParamGroup, ParamStore};
use srfnet::synth::{generate_sequence, SynthConfig};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let cfg = SynthConfig {
        frames: 3,
        ..SynthConfig::default()
    };
    let seq = generate_sequence(&cfg, 1)?;
    let (t0, t1) = (seq.timestamps[1], seq.timestamps[2]);
    let window = EventWindow::new(2, t0 + 1, t1 + 1, seq.events.slice_time(t0 + 1, t1 + 1).to_vec());
    let grid = build_voxel_grid(&window, 5, cfg.height, cfg.width)?;

    let scales = [8, 16, 32];
    let stack = density_stack(&grid, &scales)?;
    for (i, s) in scales.iter().enumerate() {
        let plane = stack.data.plane(0, i);
        let mean = plane.iter().sum::<f64>() / plane.len() as f64;
        let max = plane.iter().cloned().fold(0.0, f64::max);
        println!("density at patch {s:>2}: mean {mean:.6} max {max:.3}");
    }
    let frame = &seq.frames[2];
    let edges = sobel_edges(frame);
    println!("frame edge energy {:.4}, max edge {:.3}", edge_energy(frame), edges.data.iter().cloned().fold(0.0, f64::max));

    let mut store = ParamStore::new();
    let mut rng = seeded_rng(0);
    let (event_head, frame_head) = {
        let mut pb = ParamBuilder::new(&mut store, &mut rng, ParamGroup::Fusion);
        (
            MaskHead::new(&mut pb.pp("event"), scales.len(), MaskSource::Event),
            MaskHead::new(&mut pb.pp("frame"), 1, MaskSource::Frame),
        )
    };
    let me = init_event_mask(&store, &event_head, &grid, &scales)?;
    let mi = init_frame_mask(&store, &frame_head, frame);
    println!("event mask {:?} range [{:.4}, {:.4}]", me.data.shape(), me.data.min(), me.data.max());
    println!("frame mask {:?} range [{:.4}, {:.4}]", mi.data.shape(), mi.data.min(), mi.data.max());
    Ok(())
}
