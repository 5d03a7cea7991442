//! Question-driven exploration of Gaussian splatting scenes.
//!
//! A question is mapped to evidence categories, the matching Gaussians are
//! grouped into instances, each instance gets its most visible training view,
//! perturbed novel views are judged by a vision-language model, and the
//! answer is verified against the initial-view answer. The same machinery
//! yields referring segmentation and its volumetric metrics.

pub mod cluster;
pub mod config;
pub mod error;
pub mod gateway;
pub mod grounding;
pub mod pipeline;
pub mod ply;
pub mod prompts;
pub mod refine;
pub mod render;
pub mod scene;
pub mod semantic;
pub mod sh;
pub mod sidecar;
pub mod synthetic;
pub mod views;

pub use error::{Error, Result};
