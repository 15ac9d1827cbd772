//! Tokenization, phrase extraction, constraint sampling and synthetic data.

mod bpe;
mod codeswitch;
mod corpus;
mod phrases;
mod sampling;
mod toy;
mod vocab;

pub use bpe::{debpe, debpe_line, learn_bpe, BpeModel, Segmented, SEPARATOR};
pub use codeswitch::{code_switch_corpus, CodeSwitched};
pub use corpus::{AlignmentLinks, ParallelCorpus, SentencePair};
pub use phrases::{extract_phrase_pairs, is_consistent, PhrasePair};
pub use sampling::{mix_seed, sample_constraints, seeded_rng, MAX_CONSTRAINTS, MAX_PHRASE_LEN};
pub use toy::{gen_toy_corpus, ToyConfig, ToyCorpus};
pub use vocab::{TokenId, Vocab, BOS, EOS, UNK};
