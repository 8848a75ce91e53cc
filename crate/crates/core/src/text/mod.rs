//! Tokenization, the extended text stream and per-word features.

mod extended;
mod phoc;
mod tokenize;
mod vocab;
mod wordvec;

pub use extended::{assemble_extended_text, ExtendedText, Segment, TextCaps};
pub use phoc::{phoc_encode, PhocEncoder, PhocVector, ALPHABET, BIGRAM_LEVEL, PHOC_DIM, UNIGRAM_LEVELS};
pub use tokenize::{ocr_token, tokenize};
pub use vocab::{Vocabulary, BEGIN, END, MASK, PAD, RESERVED, UNK};
pub use wordvec::{
    open_provider, HashWordVectors, TableWordVectors, WordVectorProvider, DEFAULT_WORD_VEC_DIM,
};
