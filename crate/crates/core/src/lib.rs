//! Generative trajectory planning on procedurally generated driving scenes.
//!
//! The pipeline rasterizes a synthetic scene into a bird's-eye grid,
//! tokenizes it into map, agent and ego instances with attention, and
//! plans by rolling a latent Gaussian forward with a GRU, decoding one
//! waypoint per step. A future-trajectory encoder supplies the training
//! target distribution; the instance encoder is pulled toward it with KL.

pub mod config;
pub mod error;
pub mod eval;
pub mod geom;
pub mod model;
pub mod nn;
pub mod prior;
pub mod scene;
pub mod tokenizer;
pub mod train;

pub use error::{Error, Result};
