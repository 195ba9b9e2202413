//! Winner-take-all LSH candidate selection for large-vocabulary beam search.
//!
//! Pipeline per decode step: hash the beam hidden states into band codes,
//! count band collisions against a cuckoo-indexed inverted index of the
//! embedding band codes, keep words that reach a hit threshold in any beam,
//! merge the top-`T` frequent words and special tokens, and run the softmax
//! over that shared candidate list only.

pub mod band_index;
pub mod bench;
mod codec;
pub mod candidates;
pub mod cuckoo;
pub mod decoder;
pub mod error;
pub mod matrix;
pub mod model;
pub mod oracle;
pub mod rng;
pub mod wta;

pub use band_index::{lookup_hits, BandIndex, HitMatrix};
pub use candidates::{CandidateSet, DecodeConfig};
pub use cuckoo::CuckooTable;
pub use decoder::{DecodeMode, DecodeOptions, DecodeOutput, Decoder, StageTimings};
pub use error::{Error, Result};
pub use matrix::Matrix;
pub use model::{SynthConfig, SynthModel};
pub use wta::{WtaHasher, WtaParams};
