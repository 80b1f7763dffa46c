// SPDX-License-Identifier: MIT OR Apache-2.0

//! Toy-scale testbed for asking whether a language model *exploits* a
//! structural correspondence between its activations and the world.
//!
//! A synthetic world is rendered into a template corpus whose statistics
//! deliberately disagree with the world for a fraction of facts. A small
//! transformer is trained on the corpus, optionally fine-tuned toward world
//! truth, and then audited: its activation geometry is compared with both
//! the world and the corpus co-occurrence structure, and each correspondence
//! is tightened or loosened in place to see which one the model's success
//! depends on.

pub mod cli;
pub mod corpus;
pub mod correspondence;
pub mod error;
pub mod intervention;
pub(crate) mod linalg;
pub mod model;
pub mod oracle;
pub mod stats;
pub mod success;
pub mod world;

pub use error::{Error, Result};
