//! Category-level 6D pose estimation by conditional flow matching, with PPO
//! refinement of the sampling policy and value-guided aggregation of pose
//! candidates.
//!
//! The pipeline has three stages:
//!
//! 1. [`flowmatch`] trains a velocity field that transports Gaussian noise in
//!    the 9-dimensional pose space to poses consistent with a partial point
//!    cloud, and samples it with fixed-step Euler integration.
//! 2. [`rlrefine`] treats each Euler step as an action, fine-tunes the
//!    velocity field with clipped PPO against rotation and translation
//!    rewards, and trains a two-headed critic.
//! 3. [`aggregate`] ranks sampled candidates with the critic heads, keeps the
//!    top fraction per head and averages rotations (quaternion eigen-average)
//!    and translations (Euclidean mean) separately.
//!
//! [`synthdata`] produces the synthetic partial point-cloud datasets and
//! [`evalbench`] the metrics and ablation runners.

// Bounds are checked as `!(x > lo)` so that NaN fails them.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod aggregate;
pub mod evalbench;
pub mod exec;
pub mod flowmatch;
pub mod geometry;
pub mod netcore;
pub mod rlrefine;
pub mod rng;
pub mod synthdata;

pub use exec::Exec;
