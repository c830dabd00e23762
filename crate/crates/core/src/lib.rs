pub mod autograd;
pub mod backbone;
pub mod checkpoint;
pub mod commands;
pub mod dataset;
pub mod error;
pub mod eval;
pub mod event;
pub mod frame;
pub mod fusion;
pub mod gradcheck;
pub mod mask;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod objective;
pub mod params;
pub mod refine;
pub mod synth;
pub mod tensor;
pub mod train;
pub mod verify;
