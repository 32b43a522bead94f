//! Face super-resolution by latent inversion.
//!
//! Three trained pieces cooperate: a degradation network that maps 64×64
//! images to realistic 16×16 ones (conditioned on a noise vector, so one HR
//! image has many LR renderings), a progressively grown 64×64 face generator,
//! and an inversion engine that — with both networks frozen — optimizes
//! latent codes so the degraded generator output matches a given LR image.
//! Running the search from several random initializations yields multiple
//! HR candidates for one LR input.
//!
//! Start with the `examples/` directory: each example is a runnable walk
//! through one capability. The `invsr` binary exposes the same operations as
//! subcommands (`train-degrader`, `train-generator`, `degrade`, `invert`,
//! `eval`).

pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod degrader;
pub mod error;
pub mod hrgen;
pub mod imagedata;
pub mod metrics;
pub mod naminvert;
pub mod nn;
pub mod percept;
pub mod tensor;

pub use error::{Error, Result};
