//! Adversarial feature-style perturbation with crop-ensembled style gradients
//! for cross-domain few-shot learning, built on a small reverse-mode engine.

pub mod array;
pub mod attack;
pub mod backbone;
pub mod config;
pub mod crop;
pub mod data;
pub mod diagnostics;
pub mod error;
pub mod gradcheck;
pub mod io;
pub mod losses;
pub mod ops;
pub mod optim;
pub mod par;
pub mod pipeline;
pub mod rng;
pub mod style;
pub mod tape;
pub mod train;

pub use array::Array;
pub use error::{Error, Result};
pub use tape::{Tape, Var};
