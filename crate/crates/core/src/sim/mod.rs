//! Synthetic worlds and a parametric Monte-Carlo detector that make the
//! sampling loop runnable without a neural network.

pub mod detector;
pub mod experiment;
pub mod world;

pub use detector::{infer_mc, infer_mc_raw, train_sim_detector, NoiseScales, SimDetector, SimDetectorFactory, SimDetectorParams, SimDetectorState};
pub use experiment::{run_consistency, run_on_world, run_simulation, sweep_forward_passes, ConsistencyParams, SimulationConfig};
pub use world::{generate_world, Shape, ShapeKind, SimImage, SimObject, SimWorld, WorldParams};
