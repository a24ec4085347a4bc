//! Semantic mosaicing of tissue fragments.
//!
//! Fragments are segmented, their outer boundaries traced, and oriented
//! patches sampled along the boundary are embedded by a pluggable encoder.
//! Context stacks of neighbouring embeddings are matched across fragments,
//! the best partner fragment is chosen by summed similarity, and a rigid
//! pose is estimated with RANSAC. Merged fragments go back into the pool
//! until one remains.
//!
//! The [`harness`] module cuts synthetic or user slides into fragments with
//! known ground truth and scores the pipeline against it.
//!
//! Runnable walkthroughs live in `examples/`:
//!
//! ```bash
//! cargo run --release --example stitch_quadrants
//! ```

pub mod align;
pub mod cli;
pub mod contour;
pub mod encoder;
pub mod error;
pub mod geometry;
pub mod matching;
pub mod harness;
pub mod mosaic;
pub mod parallel;
pub mod patchex;
pub mod raster;

pub use error::{Error, Result};
pub use geometry::{Point, RigidTransform};
