//! Retrieval-augmented unsupervised text style transfer.
//!
//! For each input sentence the model retrieves the top-K most relevant
//! sentences of the target style (BM25, dense cosine search over pooled
//! encoder states, or uniform sampling) and decodes the transferred sentence
//! while attending to both the source states and the retrieved samples.
//! Training combines reconstruction, cycle, adversarial, retrieval, and
//! bag-of-words objectives against a spectrally normalized CNN discriminator.

pub mod autograd;
pub mod config;
pub mod corpus;
pub mod decoder;
pub mod discriminator;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod lm;
pub mod losses;
pub mod model;
pub mod nn;
pub mod params;
pub mod pipeline;
pub mod retriever;
pub mod run;
pub mod synthetic;
pub mod trainer;

pub use error::{Error, Result};
