//! Pre- and post-processing: punctuation normalisation, tokenisation,
//! truecasing, byte-pair encoding and vocabularies.

mod bpe;
mod normalize;
mod truecase;
mod vocab;

pub use bpe::{bpe_undo, bpe_undo_tokens, BpeModel, SEPARATOR};
pub use normalize::{detokenize, normalize_punct, normalize_punct_bytes, tokenize};
pub use truecase::{detruecase, TruecaseModel};
pub use vocab::{Vocabulary, BOS, EOS, PAD, RESERVED, UNK};
