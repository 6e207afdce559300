//! Adapting a frozen image vision transformer to video.
//!
//! The crate carries the whole numerical stack: a small dense tensor with a
//! reverse-mode tape, the ViT backbone, bottleneck adapters and the adapted
//! block that reuses the frozen self-attention over the frame axis, parameter
//! accounting, AdamW with a warmup/cosine schedule, and synthetic video tasks
//! for training at desk scale.
//!
//! It is `no_std` (with `alloc`). File formats, logging and the CLI live in the
//! companion `aim` crate. The `parallel` feature lets large matrix products
//! split their rows across a rayon pool.

#![no_std]
#![allow(clippy::needless_range_loop)]
#![allow(clippy::too_many_arguments)]

extern crate alloc;
#[cfg(feature = "std")]
extern crate std;

pub mod adapter;
pub mod aim;
mod element;
mod error;
pub mod gradcheck;
pub mod graph;
pub mod model;
pub mod optim;
pub mod params;
mod rng;
pub mod tensor;
pub mod toy;
pub mod train;
pub mod vit;

pub use element::{DType, Element};
pub use error::{Error, Result};
pub use graph::{Graph, Var};
pub use model::{AdaptationPolicy, AimModel, FreezePartition, Mode, Positions};
pub use params::ParamStore;
pub use rng::{derive_seed, seeded_rng, Rng};
pub use tensor::Tensor;
pub use vit::VitConfig;
