//! Video-imitation learning laboratory.
//!
//! A planar articulated simulator renders silhouettes of a learning agent,
//! which are compared against a reference video through mask IoU and clip
//! embeddings; the resulting reward drives a soft actor-critic learner.

pub mod physics;
pub mod render;
pub mod video;
pub mod encoder;
pub mod bridge;
pub mod reward;
pub mod nn;
pub mod sac;
pub mod env;
pub mod checkpoint;
pub mod trainer;
