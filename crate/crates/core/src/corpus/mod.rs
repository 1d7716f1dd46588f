//! Vocabulary, datasets, the synthetic keyword-slot generator and batching.

mod batch;
mod dataset;
mod synth;
mod vocab;

pub use batch::{make_batches, Batch};
pub use dataset::{encode_response, strip_special, Dataset, PostEntry, PostResponsePair};
pub use synth::{associate, generate_synthetic, is_keyword, keyword, SynthConfig, SynthLayout};
pub use vocab::{Vocabulary, EOS, EOS_TOKEN, PAD, PAD_TOKEN, UNK, UNK_TOKEN};
