//! Uncertainty quantification for multimodal retrieval-augmented generation.
//!
//! The crate scores generated responses with classic token-probability
//! baselines and with a learned scorer that reads the response's token
//! probabilities under four input configurations (full input, no image,
//! no context, question only). It also carries the evaluation harness
//! (AUROC, DeLong), a BM25 retriever, and a synthetic record generator used
//! to verify that the learned scorer can exploit cross-configuration signal.

pub mod baselines;
pub mod binning;
pub mod error;
pub mod eval;
pub mod records;
pub mod retrieval;
pub mod scorer;
pub mod synth;

pub use error::{Error, Result};
pub use records::{Dataset, GenerationRecord, SampledResponse, Stream, StreamMask};
