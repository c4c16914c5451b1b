//! Multi-part implicit shape modeling.
//!
//! Each anatomical part is encoded into a fixed-size set of latent vectors
//! by cross-attention from part-specific learnable queries to its surface
//! points. Part latents are refined by interleaved intra-part and inter-part
//! attention and decoded to per-part signed distances. Training masks whole
//! parts by substituting their queries, a second encoder aligns sparse slice
//! observations with the surface latents, and a flow-matching model generates
//! periodic latent sequences.
//!
//! Module map:
//! - [`tensor`]: tape autodiff, attention blocks, Adam, checkpoints
//! - [`geometry`]: analytic SDFs, sampling, marching cubes, metrics, contacts
//! - [`phantom`]: procedural five-part phantoms and the dataset format
//! - [`model`]: encoders, completion masking, part transformer, SDF decoder
//! - [`training`]: losses and the two optimization stages
//! - [`slicer`]: short/long-axis slice synthesis and corruption
//! - [`flowgen`]: latent-sequence flow matching

pub mod flowgen;
pub mod geometry;
pub mod model;
pub mod phantom;
pub mod rng;
pub mod slicer;
pub mod tensor;
pub mod training;

pub use tensor::{Graph, ParamStore, Tensor, TensorError, Var};
