//! Elastic visual-token compression at desk scale.
//!
//! A matryoshka query transformer compresses grid features into a nested
//! sequence of visual tokens: the first `k` tokens of any larger budget are
//! exactly the `k`-token representation, so one trained model serves every
//! inference budget up to its maximum. The crate bundles a small fp64 autodiff
//! engine, the query transformer, a toy vision–language pipeline to train it
//! end to end, tail-drop / joint / fixed training regimes, synthetic tasks
//! with controllable budget sensitivity, and an analytic FLOPs model for the
//! accuracy–compute trade-off.

pub mod checkpoint;
pub mod config;
pub mod error;
pub mod flops;
pub mod gradcheck;
pub mod optim;
pub mod par;
pub mod qt;
pub mod rng;
pub mod tape;
pub mod tasks;
pub mod train;
pub mod tensor;
pub mod vlm;

pub use error::{Error, Result};
pub use tape::{Tape, TensorId};
pub use tensor::Tensor;
