//! Lexical constraint pairs, their file format, and their vectorisation into
//! attention keys and values.
//!
//! A constraint file holds one JSON array per source sentence. Each element
//! is an object `{"src": "...", "tgt": "..."}` whose fields are
//! space-separated surface words; `[]` means no constraints:
//!
//! ```text
//! [{"src": "Beatles", "tgt": "Beatles"}, {"src": "band", "tgt": "乐团"}]
//! []
//! ```

use std::collections::BTreeSet;
use std::ops::Range;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::datapipe::{BpeModel, PhrasePair, TokenId};
use crate::error::{Error, Result};
use crate::model::{Ctx, Model};
use crate::numerics::{Graph, Tensor};

/// One constraint as written in a constraint file.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RawConstraint {
    pub src: String,
    pub tgt: String,
}

impl From<&PhrasePair> for RawConstraint {
    fn from(p: &PhrasePair) -> Self {
        RawConstraint {
            src: p.source.join(" "),
            tgt: p.target.join(" "),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConstraintPair {
    pub source_tokens: Vec<TokenId>,
    pub target_tokens: Vec<TokenId>,
    pub raw_source: String,
    pub raw_target: String,
}

impl ConstraintPair {
    pub fn new(source_tokens: Vec<TokenId>, target_tokens: Vec<TokenId>) -> Result<Self> {
        Self::with_raw(source_tokens, target_tokens, String::new(), String::new())
    }

    pub fn with_raw(
        source_tokens: Vec<TokenId>,
        target_tokens: Vec<TokenId>,
        raw_source: String,
        raw_target: String,
    ) -> Result<Self> {
        if source_tokens.is_empty() || target_tokens.is_empty() {
            return Err(Error::Invalid("constraint sides must be non-empty".into()));
        }
        Ok(ConstraintPair {
            source_tokens,
            target_tokens,
            raw_source,
            raw_target,
        })
    }

    /// Segments both sides with `bpe`, failing on unknown characters.
    pub fn from_raw(raw: &RawConstraint, bpe: &BpeModel) -> Result<Self> {
        Self::with_raw(
            bpe.encode_strict(&raw.src)?,
            bpe.encode_strict(&raw.tgt)?,
            raw.src.clone(),
            raw.tgt.clone(),
        )
    }
}

/// Ordered constraint pairs for one sentence.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct ConstraintSet {
    pairs: Vec<ConstraintPair>,
}

impl ConstraintSet {
    pub fn new(pairs: Vec<ConstraintPair>) -> Self {
        ConstraintSet { pairs }
    }

    pub fn empty() -> Self {
        Self::default()
    }

    /// Builds a set from raw id pairs, mainly for tests.
    pub fn from_ids(pairs: &[(&[TokenId], &[TokenId])]) -> Result<Self> {
        pairs
            .iter()
            .map(|(s, t)| ConstraintPair::new(s.to_vec(), t.to_vec()))
            .collect::<Result<_>>()
            .map(Self::new)
    }

    pub fn from_raw(raw: &[RawConstraint], bpe: &BpeModel) -> Result<Self> {
        raw.iter()
            .map(|r| ConstraintPair::from_raw(r, bpe))
            .collect::<Result<_>>()
            .map(Self::new)
    }

    pub fn pairs(&self) -> &[ConstraintPair] {
        &self.pairs
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn total_source_len(&self) -> usize {
        self.pairs.iter().map(|p| p.source_tokens.len()).sum()
    }

    pub fn total_target_len(&self) -> usize {
        self.pairs.iter().map(|p| p.target_tokens.len()).sum()
    }

    /// All target tokens, with repeats, in pair order.
    pub fn target_tokens(&self) -> Vec<TokenId> {
        self.pairs
            .iter()
            .flat_map(|p| p.target_tokens.iter().copied())
            .collect()
    }

    /// Distinct target tokens in increasing order.
    pub fn target_token_set(&self) -> Vec<TokenId> {
        let s: BTreeSet<TokenId> = self.target_tokens().into_iter().collect();
        s.into_iter().collect()
    }

    /// The same set with its pairs reordered by `order`.
    pub fn permuted(&self, order: &[usize]) -> Self {
        ConstraintSet::new(order.iter().map(|&i| self.pairs[i].clone()).collect())
    }
}

/// Constraint keys `K_c` and values `V_c` for one sentence.
#[derive(Clone, Debug, PartialEq)]
pub struct ConstraintKv {
    pub keys: Tensor,
    pub values: Tensor,
    pub boundaries: Vec<Range<usize>>,
}

/// Reads a constraint file without tokenizing it.
pub fn read_constraint_records(path: &Path) -> Result<Vec<Vec<RawConstraint>>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_constraint_records(&text)
}

pub fn parse_constraint_records(text: &str) -> Result<Vec<Vec<RawConstraint>>> {
    text.lines()
        .enumerate()
        .map(|(i, line)| {
            let err = |msg: String| Error::Parse { line: i + 1, msg };
            let record: Vec<RawConstraint> =
                serde_json::from_str(line).map_err(|e| err(e.to_string()))?;
            if let Some(r) = record
                .iter()
                .find(|r| r.src.split_whitespace().next().is_none() || r.tgt.split_whitespace().next().is_none())
            {
                return Err(err(format!("empty side in {r:?}")));
            }
            Ok(record)
        })
        .collect()
}

/// Reads and tokenizes a constraint file, one set per line.
pub fn parse_constraint_file(path: &Path, bpe: &BpeModel) -> Result<Vec<ConstraintSet>> {
    read_constraint_records(path)?
        .iter()
        .map(|r| ConstraintSet::from_raw(r, bpe))
        .collect()
}

pub fn format_constraint_records(records: &[Vec<RawConstraint>]) -> String {
    let mut s = String::new();
    for r in records {
        s.push_str(&serde_json::to_string(r).expect("plain strings serialize"));
        s.push('\n');
    }
    s
}

pub fn write_constraint_file(path: &Path, records: &[Vec<RawConstraint>]) -> Result<()> {
    std::fs::write(path, format_constraint_records(records)).map_err(|e| Error::io(path, e))
}

/// Source and target representations `(S⁽ⁿ⁾, T⁽ⁿ⁾)` of every pair: word
/// embeddings plus positions counted from 0 within each phrase.
pub fn vectorize_constraints(model: &Model, set: &ConstraintSet) -> Result<Vec<(Tensor, Tensor)>> {
    let mut g = Graph::new();
    let mut out = Vec::with_capacity(set.len());
    for p in set.pairs() {
        let s = model.embed_seqs(&mut g, &[&p.source_tokens])?;
        let t = model.embed_seqs(&mut g, &[&p.target_tokens])?;
        out.push((g.value(s).clone(), g.value(t).clone()));
    }
    Ok(out)
}

/// `K_c` and `V_c` for one sentence, evaluated without dropout.
pub fn build_constraint_kv(model: &Model, set: &ConstraintSet) -> Result<ConstraintKv> {
    let mut g = Graph::new();
    let kv = model.constraint_kv(&mut g, &[set], &mut Ctx::eval())?;
    Ok(ConstraintKv {
        keys: g.value(kv.keys).clone(),
        values: g.value(kv.values).clone(),
        boundaries: kv.boundaries.iter().map(|&(s, l)| s..s + l).collect(),
    })
}

/// Marks the positions of `y` whose token occurs in any constraint target.
pub fn classify_target_tokens(y: &[TokenId], set: &ConstraintSet) -> Vec<bool> {
    let t = set.target_token_set();
    y.iter().map(|tok| t.binary_search(tok).is_ok()).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn classify_definition() {
        let set = ConstraintSet::from_ids(&[(&[7], &[4])]).unwrap();
        assert_eq!(classify_target_tokens(&[3, 4, 5], &set), vec![false, true, false]);
        assert_eq!(classify_target_tokens(&[3, 4], &ConstraintSet::empty()), vec![false, false]);
    }

    #[test]
    fn records_roundtrip_and_errors() {
        let text = "[{\"src\":\"Beatles\",\"tgt\":\"Beatles\"},{\"src\":\"band\",\"tgt\":\"乐团\"}]\n[]\n";
        let recs = parse_constraint_records(text).unwrap();
        assert_eq!(recs[0].len(), 2);
        assert!(recs[1].is_empty());
        assert_eq!(format_constraint_records(&recs), text);
        let bad = "[]\n[{\"src\":\"band\"}]\n";
        assert!(matches!(
            parse_constraint_records(bad),
            Err(Error::Parse { line: 2, .. })
        ));
    }

    #[test]
    fn empty_pair_sides_rejected() {
        assert!(ConstraintPair::new(vec![], vec![1]).is_err());
        assert!(parse_constraint_records("[{\"src\":\" \",\"tgt\":\"a\"}]").is_err());
    }
}
