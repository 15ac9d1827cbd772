//! Joint byte-pair encoding with `@@ ` continuation markers.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};

use super::vocab::{Vocab, UNK};

/// Marker appended to every subword that does not end a word.
pub const SEPARATOR: &str = "@@";
const END_OF_WORD: &str = "</w>";

/// Output of [`BpeModel::segment`].
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Segmented {
    pub tokens: Vec<String>,
    /// Set when a character outside the learned alphabet was replaced by
    /// the unknown-symbol token, so `debpe` cannot restore the input.
    pub lossy: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BpeModel {
    merges: Vec<(String, String)>,
    ranks: HashMap<(String, String), usize>,
    alphabet: BTreeSet<char>,
    vocab: Vocab,
}

fn word_symbols(word: &str) -> Vec<String> {
    let chars: Vec<char> = word.chars().collect();
    let last = chars.len().saturating_sub(1);
    chars
        .iter()
        .enumerate()
        .map(|(i, c)| {
            if i == last {
                format!("{c}{END_OF_WORD}")
            } else {
                c.to_string()
            }
        })
        .collect()
}

fn merge_pair(symbols: &[String], a: &str, b: &str) -> Vec<String> {
    let mut out = Vec::with_capacity(symbols.len());
    let mut i = 0;
    while i < symbols.len() {
        if i + 1 < symbols.len() && symbols[i] == a && symbols[i + 1] == b {
            out.push(format!("{a}{b}"));
            i += 2;
        } else {
            out.push(symbols[i].clone());
            i += 1;
        }
    }
    out
}

fn symbol_to_token(symbol: &str) -> String {
    match symbol.strip_suffix(END_OF_WORD) {
        Some(stem) => stem.to_string(),
        None => format!("{symbol}{SEPARATOR}"),
    }
}

/// Learns `merges` merge operations over the whitespace tokens of every
/// sentence in `corpus`, most frequent pair first.
///
/// Frequency ties go to the lexicographically smallest pair. Learning stops
/// early once every word is a single symbol.
pub fn learn_bpe<'a, I>(corpus: I, merges: i64) -> Result<BpeModel>
where
    I: IntoIterator<Item = &'a str>,
{
    if merges < 0 {
        return Err(Error::Config(format!(
            "merge count must be non-negative, got {merges}"
        )));
    }
    let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
    for sentence in corpus {
        for word in sentence.split_whitespace() {
            *counts.entry(word).or_default() += 1;
        }
    }
    if counts.is_empty() {
        return Err(Error::Invalid("cannot learn BPE from an empty corpus".into()));
    }
    let alphabet: BTreeSet<char> = counts.keys().flat_map(|w| w.chars()).collect();
    let mut words: Vec<(Vec<String>, usize)> = counts
        .iter()
        .map(|(w, &c)| (word_symbols(w), c))
        .collect();

    let mut learned = Vec::new();
    for _ in 0..merges {
        let mut pairs: BTreeMap<(&str, &str), usize> = BTreeMap::new();
        for (symbols, count) in &words {
            for w in symbols.windows(2) {
                *pairs.entry((&w[0], &w[1])).or_default() += count;
            }
        }
        // BTreeMap iterates in lexicographic order, so the first maximum wins ties.
        let Some(((a, b), _)) = pairs
            .iter()
            .fold(None::<(&(&str, &str), usize)>, |best, (pair, &c)| match best {
                Some((_, bc)) if bc >= c => best,
                _ => Some((pair, c)),
            })
        else {
            break;
        };
        let (a, b) = (a.to_string(), b.to_string());
        for (symbols, _) in &mut words {
            *symbols = merge_pair(symbols, &a, &b);
        }
        learned.push((a, b));
    }
    Ok(BpeModel::from_parts(alphabet, learned))
}

impl BpeModel {
    fn from_parts(alphabet: BTreeSet<char>, merges: Vec<(String, String)>) -> Self {
        let mut tokens = Vec::new();
        for c in &alphabet {
            tokens.push(format!("{c}{SEPARATOR}"));
            tokens.push(c.to_string());
        }
        for (a, b) in &merges {
            tokens.push(symbol_to_token(&format!("{a}{b}")));
        }
        let ranks = merges
            .iter()
            .enumerate()
            .map(|(i, (a, b))| ((a.clone(), b.clone()), i))
            .collect();
        BpeModel {
            merges,
            ranks,
            alphabet,
            vocab: Vocab::from_tokens(tokens),
        }
    }

    pub fn merges(&self) -> &[(String, String)] {
        &self.merges
    }

    pub fn vocab(&self) -> &Vocab {
        &self.vocab
    }

    /// Per vocabulary id, whether the token ends in the continuation marker.
    pub fn continuation_mask(&self) -> Vec<bool> {
        (0..self.vocab.len())
            .map(|i| self.vocab.token(i).ends_with(SEPARATOR))
            .collect()
    }

    pub fn knows_char(&self, c: char) -> bool {
        self.alphabet.contains(&c)
    }

    fn segment_word(&self, word: &str, out: &mut Vec<String>) -> bool {
        let mut lossy = false;
        let mut symbols = word_symbols(word);
        for (sym, c) in symbols.iter_mut().zip(word.chars()) {
            if !self.alphabet.contains(&c) {
                lossy = true;
                let final_ = sym.ends_with(END_OF_WORD);
                *sym = if final_ {
                    format!("{UNK}{END_OF_WORD}")
                } else {
                    UNK.to_string()
                };
            }
        }
        loop {
            let best = symbols
                .windows(2)
                .enumerate()
                .filter_map(|(i, w)| {
                    self.ranks
                        .get(&(w[0].clone(), w[1].clone()))
                        .map(|&r| (r, i))
                })
                .min();
            let Some((rank, _)) = best else { break };
            let (a, b) = &self.merges[rank];
            symbols = merge_pair(&symbols, a, b);
        }
        out.extend(symbols.iter().map(|s| symbol_to_token(s)));
        lossy
    }

    /// Splits every whitespace token of `sentence` into subwords.
    pub fn segment(&self, sentence: &str) -> Segmented {
        let mut tokens = Vec::new();
        let mut lossy = false;
        for word in sentence.split_whitespace() {
            lossy |= self.segment_word(word, &mut tokens);
        }
        Segmented { tokens, lossy }
    }

    /// Like [`segment`](Self::segment) but fails on characters outside the
    /// learned alphabet.
    pub fn segment_strict(&self, sentence: &str) -> Result<Vec<String>> {
        if let Some(c) = sentence
            .chars()
            .find(|c| !c.is_whitespace() && !self.alphabet.contains(c))
        {
            return Err(Error::UnknownSymbol {
                symbol: c.to_string(),
            });
        }
        Ok(self.segment(sentence).tokens)
    }

    pub fn encode(&self, sentence: &str) -> Vec<usize> {
        self.vocab.ids(&self.segment(sentence).tokens)
    }

    pub fn encode_strict(&self, sentence: &str) -> Result<Vec<usize>> {
        Ok(self.vocab.ids(&self.segment_strict(sentence)?))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut s = String::from("#bpe v1\n#alphabet ");
        for c in &self.alphabet {
            s.push(*c);
        }
        s.push('\n');
        for (a, b) in &self.merges {
            let _ = writeln!(s, "{a} {b}");
        }
        std::fs::write(path, s).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut lines = text.lines();
        if lines.next() != Some("#bpe v1") {
            return Err(Error::Parse {
                line: 1,
                msg: "missing '#bpe v1' header".into(),
            });
        }
        let alphabet = lines
            .next()
            .and_then(|l| l.strip_prefix("#alphabet "))
            .ok_or_else(|| Error::Parse {
                line: 2,
                msg: "missing '#alphabet' line".into(),
            })?
            .chars()
            .collect();
        let mut merges = Vec::new();
        for (i, line) in lines.enumerate() {
            let mut parts = line.split(' ');
            match (parts.next(), parts.next(), parts.next()) {
                (Some(a), Some(b), None) if !a.is_empty() && !b.is_empty() => {
                    merges.push((a.to_string(), b.to_string()))
                }
                _ => {
                    return Err(Error::Parse {
                        line: i + 3,
                        msg: format!("expected two symbols, got {line:?}"),
                    })
                }
            }
        }
        Ok(BpeModel::from_parts(alphabet, merges))
    }
}

/// Rejoins subwords into words by dropping `@@` continuation markers.
pub fn debpe<S: AsRef<str>>(tokens: &[S]) -> Vec<String> {
    let mut words = Vec::new();
    let mut current = String::new();
    for t in tokens {
        let t = t.as_ref();
        match t.strip_suffix(SEPARATOR) {
            Some(stem) => current.push_str(stem),
            None => {
                current.push_str(t);
                words.push(std::mem::take(&mut current));
            }
        }
    }
    if !current.is_empty() {
        words.push(current);
    }
    words
}

/// `debpe` joined back into a space-separated sentence.
pub fn debpe_line<S: AsRef<str>>(tokens: &[S]) -> String {
    debpe(tokens).join(" ")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_merge_on_low_lower() {
        let m = learn_bpe(["low low lower"], 1).unwrap();
        assert_eq!(m.merges(), &[("l".to_string(), "o".to_string())]);
    }

    #[test]
    fn zero_merges_is_character_level() {
        let m = learn_bpe(["low lower"], 0).unwrap();
        assert!(m.merges().is_empty());
        assert_eq!(m.segment("low").tokens, vec!["l@@", "o@@", "w"]);
    }

    #[test]
    fn negative_merges_rejected() {
        assert!(learn_bpe(["a"], -1).is_err());
    }

    #[test]
    fn deterministic() {
        let corpus = ["the cat sat on the mat", "a cat and a hat"];
        assert_eq!(learn_bpe(corpus, 20).unwrap(), learn_bpe(corpus, 20).unwrap());
    }

    #[test]
    fn split_word_rejoins() {
        assert_eq!(debpe(&["乐@@", "团"]), vec!["乐团"]);
        assert_eq!(debpe_line(&["a@@", "b", "c"]), "ab c");
    }

    #[test]
    fn unseen_character_is_unknown_and_lossy() {
        let m = learn_bpe(["abc"], 2).unwrap();
        let s = m.segment("axc");
        assert!(s.lossy);
        assert!(s.tokens.iter().any(|t| t.starts_with(UNK)));
        assert!(m.encode("axc").contains(&m.vocab().unk()));
        assert!(matches!(
            m.segment_strict("axc"),
            Err(Error::UnknownSymbol { .. })
        ));
    }

    #[test]
    fn every_segment_is_in_vocab() {
        let corpus = ["banana bandana", "ananas"];
        let m = learn_bpe(corpus, 6).unwrap();
        for s in corpus {
            for t in m.segment(s).tokens {
                assert!(m.vocab().get(&t).is_some(), "{t}");
            }
        }
    }
}
