//! Fact-guided sentence rewriting.
//!
//! A frozen three-way stance classifier supervises a masker that replaces
//! the claim-polarizing span of a sentence with `★`; a two-encoder
//! pointer-generator then fuses the residual sentence with the claim into an
//! updated sentence that agrees with it.

pub mod checkpoint;
pub mod corpus;
mod error;
pub mod generator;
pub mod layers;
pub mod masker;
pub mod metrics;
pub mod pipeline;
pub mod stance;
pub mod vocab;

pub use error::{Error, Result};
