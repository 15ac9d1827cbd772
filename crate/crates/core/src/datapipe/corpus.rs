use std::collections::BTreeSet;
use std::path::Path;

use crate::error::{Error, Result};

/// Word-level alignment links `(source index, target index)`.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct AlignmentLinks {
    links: BTreeSet<(usize, usize)>,
}

impl AlignmentLinks {
    /// Fails if any link falls outside a `src_len` × `tgt_len` grid.
    pub fn new<I>(links: I, src_len: usize, tgt_len: usize) -> Result<Self>
    where
        I: IntoIterator<Item = (usize, usize)>,
    {
        let links: BTreeSet<_> = links.into_iter().collect();
        if let Some(&(i, j)) = links.iter().find(|&&(i, j)| i >= src_len || j >= tgt_len) {
            return Err(Error::Invalid(format!(
                "link {i}-{j} outside a {src_len}x{tgt_len} sentence pair"
            )));
        }
        Ok(AlignmentLinks { links })
    }

    pub fn identity(n: usize) -> Self {
        AlignmentLinks {
            links: (0..n).map(|i| (i, i)).collect(),
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.links.iter().copied()
    }

    pub fn len(&self) -> usize {
        self.links.len()
    }

    pub fn is_empty(&self) -> bool {
        self.links.is_empty()
    }

    pub fn contains(&self, i: usize, j: usize) -> bool {
        self.links.contains(&(i, j))
    }

    /// Parses one Pharaoh line such as `0-0 1-2 2-1`.
    pub fn parse_pharaoh(line: &str, src_len: usize, tgt_len: usize) -> Result<Self> {
        let mut links = Vec::new();
        for tok in line.split_whitespace() {
            let parsed = tok
                .split_once('-')
                .and_then(|(a, b)| Some((a.parse().ok()?, b.parse().ok()?)));
            match parsed {
                Some(link) => links.push(link),
                None => return Err(Error::Format(format!("bad alignment token {tok:?}"))),
            }
        }
        Self::new(links, src_len, tgt_len)
    }

    pub fn to_pharaoh(&self) -> String {
        self.links
            .iter()
            .map(|(i, j)| format!("{i}-{j}"))
            .collect::<Vec<_>>()
            .join(" ")
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SentencePair {
    pub source: Vec<String>,
    pub target: Vec<String>,
}

impl SentencePair {
    pub fn from_lines(source: &str, target: &str) -> Self {
        SentencePair {
            source: source.split_whitespace().map(String::from).collect(),
            target: target.split_whitespace().map(String::from).collect(),
        }
    }

    pub fn source_line(&self) -> String {
        self.source.join(" ")
    }

    pub fn target_line(&self) -> String {
        self.target.join(" ")
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct ParallelCorpus {
    pub pairs: Vec<SentencePair>,
    /// One entry per pair when present.
    pub links: Option<Vec<AlignmentLinks>>,
}

fn read_lines(path: &Path) -> Result<Vec<String>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(text.lines().map(String::from).collect())
}

fn write_lines<I: IntoIterator<Item = String>>(path: &Path, lines: I) -> Result<()> {
    let mut s = String::new();
    for l in lines {
        s.push_str(&l);
        s.push('\n');
    }
    std::fs::write(path, s).map_err(|e| Error::io(path, e))
}

impl ParallelCorpus {
    pub fn new(pairs: Vec<SentencePair>) -> Self {
        ParallelCorpus { pairs, links: None }
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn load(src: &Path, tgt: &Path, align: Option<&Path>) -> Result<Self> {
        let s = read_lines(src)?;
        let t = read_lines(tgt)?;
        if s.len() != t.len() {
            return Err(Error::Format(format!(
                "{} has {} lines but {} has {}",
                src.display(),
                s.len(),
                tgt.display(),
                t.len()
            )));
        }
        let pairs: Vec<_> = s
            .iter()
            .zip(&t)
            .map(|(a, b)| SentencePair::from_lines(a, b))
            .collect();
        let links = match align {
            None => None,
            Some(path) => {
                let lines = read_lines(path)?;
                if lines.len() != pairs.len() {
                    return Err(Error::Format(format!(
                        "{} has {} lines for {} sentence pairs",
                        path.display(),
                        lines.len(),
                        pairs.len()
                    )));
                }
                let mut out = Vec::with_capacity(lines.len());
                for (n, (line, p)) in lines.iter().zip(&pairs).enumerate() {
                    let l = AlignmentLinks::parse_pharaoh(line, p.source.len(), p.target.len())
                        .map_err(|e| Error::Parse {
                            line: n + 1,
                            msg: e.to_string(),
                        })?;
                    out.push(l);
                }
                Some(out)
            }
        };
        Ok(ParallelCorpus { pairs, links })
    }

    pub fn save(&self, src: &Path, tgt: &Path, align: Option<&Path>) -> Result<()> {
        write_lines(src, self.pairs.iter().map(SentencePair::source_line))?;
        write_lines(tgt, self.pairs.iter().map(SentencePair::target_line))?;
        if let (Some(path), Some(links)) = (align, &self.links) {
            write_lines(path, links.iter().map(AlignmentLinks::to_pharaoh))?;
        }
        Ok(())
    }

    pub fn source_lines(&self) -> impl Iterator<Item = String> + '_ {
        self.pairs.iter().map(SentencePair::source_line)
    }

    pub fn target_lines(&self) -> impl Iterator<Item = String> + '_ {
        self.pairs.iter().map(SentencePair::target_line)
    }
}
