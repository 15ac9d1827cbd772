use serde::{Deserialize, Serialize};

use super::corpus::{AlignmentLinks, SentencePair};

/// A bilingual phrase with inclusive word spans on both sides.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PhrasePair {
    pub source_span: (usize, usize),
    pub target_span: (usize, usize),
    pub source: Vec<String>,
    pub target: Vec<String>,
}

impl PhrasePair {
    pub fn source_len(&self) -> usize {
        self.source_span.1 - self.source_span.0 + 1
    }

    pub fn target_len(&self) -> usize {
        self.target_span.1 - self.target_span.0 + 1
    }

    pub fn overlaps(&self, other: &PhrasePair) -> bool {
        let hit = |a: (usize, usize), b: (usize, usize)| a.0 <= b.1 && b.0 <= a.1;
        hit(self.source_span, other.source_span) || hit(self.target_span, other.target_span)
    }
}

/// True when no link joins a word inside either span to a word outside the
/// other, and at least one link lies inside the box.
pub fn is_consistent(links: &AlignmentLinks, src: (usize, usize), tgt: (usize, usize)) -> bool {
    let in_src = |i: usize| src.0 <= i && i <= src.1;
    let in_tgt = |j: usize| tgt.0 <= j && j <= tgt.1;
    let mut inside = false;
    for (i, j) in links.iter() {
        match (in_src(i), in_tgt(j)) {
            (true, true) => inside = true,
            (false, false) => {}
            _ => return false,
        }
    }
    inside
}

/// Every consistent phrase pair whose spans are at most `max_len` words,
/// ordered by source span and then target span.
pub fn extract_phrase_pairs(
    pair: &SentencePair,
    links: &AlignmentLinks,
    max_len: usize,
) -> Vec<PhrasePair> {
    let mut out = Vec::new();
    if links.is_empty() {
        return out;
    }
    let (ns, nt) = (pair.source.len(), pair.target.len());
    for i1 in 0..ns {
        for i2 in i1..ns.min(i1 + max_len) {
            for j1 in 0..nt {
                for j2 in j1..nt.min(j1 + max_len) {
                    if is_consistent(links, (i1, i2), (j1, j2)) {
                        out.push(PhrasePair {
                            source_span: (i1, i2),
                            target_span: (j1, j2),
                            source: pair.source[i1..=i2].to_vec(),
                            target: pair.target[j1..=j2].to_vec(),
                        });
                    }
                }
            }
        }
    }
    out
}
