//! Coupled refinement of camera-space 3D trajectories, per-frame pointmaps
//! and relative camera poses.
//!
//! The crate is organised bottom-up:
//!
//! - [`pose`]: SE(3) arithmetic, tangent maps, Umeyama alignment and ICP.
//! - [`grid`]: pointmap grids with bilinear sampling.
//! - [`tracks`]: trajectory sets and static masks.
//! - [`grad`]: flat parameter blocks, gradient tapes, finite-difference checks.
//! - [`losses`]: the coupling objectives with stop-gradient routing.
//! - [`synth`]: deterministic synthetic dynamic scenes.
//! - [`optim`]: gradient descent with backtracking over the coupled objective.
//! - [`metrics`]: trajectory, tracking, pointcloud and depth metrics.
//! - [`io`]: file formats.
//!
//! A guided tour lives in the `book/` directory of the repository; its code
//! snippets are compiled as doctests of this crate.

pub mod config;
pub mod eval;
pub mod experiment;
pub mod grad;
pub mod gradcheck;
pub mod grid;
pub mod io;
pub mod losses;
pub mod metrics;
pub mod optim;
pub mod pose;
pub mod spatial;
pub mod synth;
pub mod tracks;

pub use grad::{BlockId, ParamStore, RoutingMask, Tape};
pub use grid::{PixelLocation, PointMapGrid};
pub use pose::{Pose, PoseTangent, Similarity};
pub use tracks::{TrackSet, WorldTrackSet};

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/poses.md")]
    mod poses {}
    #[doc = include_str!("../../../book/src/pointmaps.md")]
    mod pointmaps {}
    #[doc = include_str!("../../../book/src/tracks.md")]
    mod tracks {}
    #[doc = include_str!("../../../book/src/coupling.md")]
    mod coupling {}
    #[doc = include_str!("../../../book/src/gradients.md")]
    mod gradients {}
    #[doc = include_str!("../../../book/src/synthetic.md")]
    mod synthetic {}
    #[doc = include_str!("../../../book/src/optimization.md")]
    mod optimization {}
    #[doc = include_str!("../../../book/src/metrics.md")]
    mod metrics {}
    #[doc = include_str!("../../../book/src/cli.md")]
    mod cli {}
}
