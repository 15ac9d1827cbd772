//! Synthetic parallel data with exact word alignments.

use std::collections::HashSet;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

use super::corpus::{AlignmentLinks, ParallelCorpus, SentencePair};

const SOURCE_LETTERS: &str = "abcdefghijklmnop";
const TARGET_CHAR_BASE: u32 = 0x4E00;
/// Size of the CJK Unified Ideographs block.
const TARGET_CHARS: usize = 20992;

#[derive(Clone, Debug, PartialEq)]
pub struct ToyConfig {
    pub vocab_size: usize,
    /// Target words per source word, chosen uniformly per occurrence.
    /// One gives a bijective lexicon.
    pub synonyms: usize,
    pub sentences: usize,
    pub min_len: usize,
    pub max_len: usize,
    pub swap_rate: f64,
    pub seed: u64,
}

impl Default for ToyConfig {
    fn default() -> Self {
        ToyConfig {
            vocab_size: 200,
            synonyms: 1,
            sentences: 1000,
            min_len: 4,
            max_len: 10,
            swap_rate: 0.1,
            seed: 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ToyCorpus {
    pub corpus: ParallelCorpus,
    /// Source words with their target images, in id order.
    pub lexicon: Vec<(String, Vec<String>)>,
}

impl ToyCorpus {
    pub fn translations(&self, source: &str) -> Option<&[String]> {
        self.lexicon
            .iter()
            .find(|(s, _)| s == source)
            .map(|(_, t)| t.as_slice())
    }
}

fn distinct_words<R: Rng>(
    rng: &mut R,
    count: usize,
    lens: std::ops::RangeInclusive<usize>,
    mut letter: impl FnMut(&mut R) -> char,
) -> Vec<String> {
    let mut seen = HashSet::new();
    let mut out = Vec::with_capacity(count);
    while out.len() < count {
        let len = rng.random_range(lens.clone());
        let w: String = (0..len).map(|_| letter(rng)).collect();
        if seen.insert(w.clone()) {
            out.push(w);
        }
    }
    out
}

pub fn gen_toy_corpus(config: &ToyConfig) -> Result<ToyCorpus> {
    if config.vocab_size < 10 {
        return Err(Error::Config(format!(
            "toy vocabulary needs at least 10 words, got {}",
            config.vocab_size
        )));
    }
    if config.vocab_size * config.synonyms > TARGET_CHARS {
        return Err(Error::Config(format!(
            "at most {TARGET_CHARS} target words, asked for {}",
            config.vocab_size * config.synonyms
        )));
    }
    if config.synonyms == 0 || config.min_len == 0 || config.min_len > config.max_len {
        return Err(Error::Config("bad toy synonym count or length range".into()));
    }
    if !(0.0..=1.0).contains(&config.swap_rate) {
        return Err(Error::Config(format!(
            "swap rate {} not in [0, 1]",
            config.swap_rate
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let letters: Vec<char> = SOURCE_LETTERS.chars().collect();
    let source_words = distinct_words(&mut rng, config.vocab_size, 2..=5, |r| {
        *letters.choose(r).unwrap()
    });
    // One ideograph per target word, so every target word is a single
    // subword unit.
    let mut target_words: Vec<String> = (0..(config.vocab_size * config.synonyms) as u32)
        .map(|i| char::from_u32(TARGET_CHAR_BASE + i).unwrap().to_string())
        .collect();
    target_words.shuffle(&mut rng);
    let lexicon: Vec<(String, Vec<String>)> = source_words
        .into_iter()
        .zip(target_words.chunks(config.synonyms))
        .map(|(s, t)| (s, t.to_vec()))
        .collect();

    let mut pairs = Vec::with_capacity(config.sentences);
    let mut links = Vec::with_capacity(config.sentences);
    for _ in 0..config.sentences {
        let len = rng.random_range(config.min_len..=config.max_len);
        let ids: Vec<usize> = (0..len)
            .map(|_| rng.random_range(0..lexicon.len()))
            .collect();
        // perm[j] is the source position translated at target position j.
        let mut perm: Vec<usize> = (0..len).collect();
        let mut j = 0;
        while j + 1 < len {
            if rng.random_bool(config.swap_rate) {
                perm.swap(j, j + 1);
                j += 2;
            } else {
                j += 1;
            }
        }
        let source = ids.iter().map(|&w| lexicon[w].0.clone()).collect();
        let target = perm
            .iter()
            .map(|&i| lexicon[ids[i]].1.choose(&mut rng).unwrap().clone())
            .collect();
        pairs.push(SentencePair { source, target });
        links.push(AlignmentLinks::new(
            perm.iter().enumerate().map(|(j, &i)| (i, j)),
            len,
            len,
        )?);
    }
    Ok(ToyCorpus {
        corpus: ParallelCorpus {
            pairs,
            links: Some(links),
        },
        lexicon,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn no_swaps_is_diagonal() {
        let cfg = ToyConfig {
            swap_rate: 0.0,
            sentences: 50,
            ..Default::default()
        };
        let toy = gen_toy_corpus(&cfg).unwrap();
        for (p, l) in toy.corpus.pairs.iter().zip(toy.corpus.links.as_ref().unwrap()) {
            assert_eq!(l, &AlignmentLinks::identity(p.source.len()));
        }
    }

    #[test]
    fn targets_are_lexicon_images() {
        let cfg = ToyConfig {
            swap_rate: 0.3,
            synonyms: 3,
            sentences: 100,
            ..Default::default()
        };
        let toy = gen_toy_corpus(&cfg).unwrap();
        for (p, l) in toy.corpus.pairs.iter().zip(toy.corpus.links.as_ref().unwrap()) {
            for (i, j) in l.iter() {
                assert!(toy.translations(&p.source[i]).unwrap().contains(&p.target[j]));
            }
        }
    }

    #[test]
    fn small_vocab_rejected() {
        let cfg = ToyConfig {
            vocab_size: 9,
            ..Default::default()
        };
        assert!(gen_toy_corpus(&cfg).is_err());
    }
}
