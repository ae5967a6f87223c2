//! Dense-grid scene flow: a pixelized point-cloud representation,
//! window-pruned nearest-neighbor grouping, a small reverse-mode
//! autodiff tape, and a coarse-to-fine flow network with warping
//! projection, built for property-level verification at desk scale.

pub mod bench;
pub mod cost_volume;
pub mod error;
pub mod fusion;
pub mod gradcheck;
pub mod grid;
pub mod grouping;
pub mod io;
pub mod metrics;
pub mod network;
pub mod optim;
pub mod params;
pub mod pyramid;
pub mod synth;
pub mod tape;
pub mod tensor;
