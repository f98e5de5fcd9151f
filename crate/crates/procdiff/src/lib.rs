//! Procedure-aware representation learning on synthetic step corpora.
//!
//! The crate pairs a learnable clip encoder, matched against a fixed table of
//! phrase embeddings through a temperature softmax, with a conditional
//! diffusion model over masked step embeddings. Synthetic task grammars stand
//! in for real instructional video, so the whole pipeline — corpus synthesis,
//! pre-training, fine-tuning protocols, and inference schemes — runs and is
//! testable on a desk.
//!
//! See the guide in `book/` (also compiled as doc-tests under [`guide`]) for
//! a narrative walk through the model and the training objective.

pub mod bundle;
pub mod checkpoint;
pub mod corpus;
pub mod denoiser;
pub mod diffusion;
pub mod encoder;
pub mod error;
pub mod evaluation;
pub mod hash;
pub mod io;
pub mod grammar;
pub mod mat;
pub mod math;
pub mod objective;
pub mod optim;
pub mod report;
pub mod rng;
pub mod tape;
pub mod training;
pub mod types;

pub use error::{Error, Result};
