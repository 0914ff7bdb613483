//! Similar-users-augmented CTR prediction.
//!
//! The pipeline pretrains a sequence encoder over user behavior histories,
//! retrieves the top-K most similar users for each user from a train-split
//! pool, splices the neighbors' recent behaviors into the user's own sequence
//! with user-aware positions, and feeds the result through target attention
//! into a feed-forward CTR head. Everything runs on a small f64 autodiff
//! substrate and is deterministic for a fixed seed.

pub mod error;
pub mod attention;
pub mod augment;
pub mod config;
pub mod data;
pub mod encoder;
pub mod gradcheck;
pub mod io;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod pipeline;
pub mod pool;
pub mod tensor;

pub use error::{Error, Result};
