use std::cmp::Ordering;

use crate::constraints::ConstraintSet;
use crate::datapipe::TokenId;
use crate::error::{Error, Result};
use crate::model::{EncodedSource, Inference};

use super::coverage::{update_coverage_words, CoverageState};

const UNK: TokenId = 0;
const BOS: TokenId = 1;
const EOS: TokenId = 2;

/// Anything that yields next-token distributions for a batch of prefixes.
/// Prefixes start with `<s>`.
pub trait StepScorer {
    fn vocab_size(&self) -> usize;
    fn next_probs(&self, prefixes: &[&[TokenId]]) -> Result<Vec<Vec<f32>>>;

    /// Whether `token` is a subword glued to the next token. Constraint
    /// matches only start at word boundaries.
    fn continues_word(&self, _token: TokenId) -> bool {
        false
    }
}

/// A trained model bound to one encoded sentence.
pub struct ModelScorer<'a> {
    pub inference: &'a Inference<'a>,
    pub source: &'a EncodedSource,
}

impl StepScorer for ModelScorer<'_> {
    fn vocab_size(&self) -> usize {
        self.inference.model().config().vocab_size
    }

    fn next_probs(&self, prefixes: &[&[TokenId]]) -> Result<Vec<Vec<f32>>> {
        self.inference.next_token_probs(self.source, prefixes)
    }

    fn continues_word(&self, token: TokenId) -> bool {
        self.inference.continues_word(token)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Hypothesis {
    /// Emitted tokens without the start marker; ends with `</s>` when
    /// finished.
    pub tokens: Vec<TokenId>,
    pub log_prob: f64,
    pub coverage: CoverageState,
    pub finished: bool,
}

impl Hypothesis {
    /// Log-probability per emitted token.
    pub fn score(&self) -> f64 {
        if self.tokens.is_empty() {
            0.0
        } else {
            self.log_prob / self.tokens.len() as f64
        }
    }

    /// Tokens without the end marker.
    pub fn content(&self) -> &[TokenId] {
        match self.tokens.last() {
            Some(&EOS) => &self.tokens[..self.tokens.len() - 1],
            _ => &self.tokens,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SearchOutput {
    pub best: Hypothesis,
    /// No finished hypothesis, or constraints left unmet.
    pub incomplete: bool,
    /// Constraints dropped because a target token is unknown.
    pub excluded: Vec<usize>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Beam,
    Vdba,
}

/// Better-first order: higher score, then lexicographically smaller
/// tokens, then shorter.
fn final_order(a: &Hypothesis, b: &Hypothesis) -> Ordering {
    b.score()
        .partial_cmp(&a.score())
        .unwrap_or(Ordering::Equal)
        .then_with(|| a.tokens.cmp(&b.tokens))
        .then_with(|| a.tokens.len().cmp(&b.tokens.len()))
}

struct Candidate {
    parent: usize,
    token: TokenId,
    log_prob: f64,
    coverage: CoverageState,
}

fn cand_order(a: &Candidate, b: &Candidate) -> Ordering {
    b.log_prob
        .partial_cmp(&a.log_prob)
        .unwrap_or(Ordering::Equal)
        .then_with(|| a.parent.cmp(&b.parent))
        .then_with(|| a.token.cmp(&b.token))
}

fn ln(p: f32) -> f64 {
    (p.max(f32::MIN_POSITIVE) as f64).ln()
}

/// Indices of the `k` largest entries, larger first, ties to lower index.
fn top_k(probs: &[f32], k: usize, skip: &[TokenId]) -> Vec<TokenId> {
    let mut idx: Vec<TokenId> = (0..probs.len()).filter(|i| !skip.contains(i)).collect();
    let cmp = |a: &usize, b: &usize| {
        probs[*b]
            .partial_cmp(&probs[*a])
            .unwrap_or(Ordering::Equal)
            .then(a.cmp(b))
    };
    if k < idx.len() {
        idx.select_nth_unstable_by(k, cmp);
        idx.truncate(k);
    }
    idx.sort_by(cmp);
    idx
}

/// Splits `beam` slots over banks. Slots are dealt round-robin from the top
/// bank; a bank's unused slots move to the nearest bank with candidates
/// left (upper bank first on ties).
pub fn allocate_banks(beam: usize, counts: &[usize]) -> Vec<usize> {
    let banks = counts.len();
    let mut alloc = vec![0usize; banks];
    for s in 0..beam {
        alloc[banks - 1 - s % banks] += 1;
    }
    let mut surplus = 0;
    for (a, &c) in alloc.iter_mut().zip(counts) {
        if *a > c {
            surplus += *a - c;
            *a = c;
        }
    }
    // Hand surplus out by distance from the banks that could not use it.
    while surplus > 0 {
        let spare: Vec<usize> = (0..banks).filter(|&b| alloc[b] < counts[b]).collect();
        if spare.is_empty() {
            break;
        }
        let full: Vec<usize> = (0..banks).filter(|&b| alloc[b] >= counts[b]).collect();
        let dist = |b: usize| full.iter().map(|&f| f.abs_diff(b)).min().unwrap_or(0);
        let &b = spare
            .iter()
            .min_by(|&&x, &&y| dist(x).cmp(&dist(y)).then(y.cmp(&x)))
            .expect("non-empty");
        alloc[b] += 1;
        surplus -= 1;
    }
    alloc
}

/// Shared beam engine. With no constraints both modes coincide.
pub fn search<S: StepScorer>(
    scorer: &S,
    constraints: &[Vec<TokenId>],
    beam: usize,
    max_len: usize,
    mode: Mode,
) -> Result<(Hypothesis, bool)> {
    if beam == 0 {
        return Err(Error::Config("beam size must be at least 1".into()));
    }
    if max_len == 0 {
        return Err(Error::Config("max_len must be at least 1".into()));
    }
    let vocab = scorer.vocab_size();
    if let Some(&bad) = constraints.iter().flatten().find(|&&t| t >= vocab) {
        return Err(Error::TokenId { id: bad, size: vocab });
    }
    if constraints.iter().any(|c| c.is_empty()) {
        return Err(Error::Invalid("empty constraint target".into()));
    }
    let cons: &[Vec<TokenId>] = match mode {
        Mode::Beam => &[],
        Mode::Vdba => constraints,
    };
    let total: usize = cons.iter().map(Vec::len).sum();
    let skip = [UNK, BOS];

    let mut live = vec![Hypothesis {
        tokens: Vec::new(),
        log_prob: 0.0,
        coverage: CoverageState::new(cons),
        finished: false,
    }];
    let mut finished: Vec<Hypothesis> = Vec::new();
    let mut last_live = live.clone();

    for t in 1..=max_len {
        let prefixes: Vec<Vec<TokenId>> = live
            .iter()
            .map(|h| std::iter::once(BOS).chain(h.tokens.iter().copied()).collect())
            .collect();
        let refs: Vec<&[TokenId]> = prefixes.iter().map(Vec::as_slice).collect();
        let probs = scorer.next_probs(&refs)?;

        let mut cands: Vec<Candidate> = Vec::new();
        for (i, (h, p)) in live.iter().zip(&probs).enumerate() {
            let mut toks = if t == max_len {
                vec![EOS]
            } else {
                top_k(p, beam, &skip)
            };
            if mode == Mode::Vdba && t < max_len {
                toks.extend(h.coverage.forced_tokens(cons));
                if h.coverage.all_met() {
                    toks.push(EOS);
                }
            }
            toks.sort_unstable();
            toks.dedup();
            for tok in toks {
                let can_end = mode == Mode::Beam || h.coverage.all_met();
                if tok == EOS && !can_end {
                    continue;
                }
                let coverage = if tok == EOS {
                    h.coverage.clone()
                } else {
                    update_coverage_words(&h.coverage, cons, tok, |t| scorer.continues_word(t))
                };
                cands.push(Candidate {
                    parent: i,
                    token: tok,
                    log_prob: h.log_prob + ln(p[tok]),
                    coverage,
                });
            }
        }
        cands.sort_by(cand_order);

        let make = |c: &Candidate| {
            let mut tokens = live[c.parent].tokens.clone();
            tokens.push(c.token);
            Hypothesis {
                tokens,
                log_prob: c.log_prob,
                coverage: c.coverage.clone(),
                finished: c.token == EOS,
            }
        };
        let selected: Vec<&Candidate> = if t == max_len {
            cands.iter().collect()
        } else {
            let mut banks: Vec<Vec<&Candidate>> = vec![Vec::new(); total + 1];
            for c in &cands {
                banks[c.coverage.met_token_count].push(c);
            }
            let counts: Vec<usize> = banks.iter().map(Vec::len).collect();
            let alloc = allocate_banks(beam, &counts);
            let mut sel: Vec<&Candidate> = banks
                .iter()
                .zip(&alloc)
                .flat_map(|(b, &a)| b[..a].iter().copied())
                .collect();
            sel.sort_by(|a, b| cand_order(a, b));
            sel
        };

        let mut next = Vec::new();
        for c in selected {
            let h = make(c);
            if h.finished {
                finished.push(h);
            } else {
                next.push(h);
            }
        }
        if !next.is_empty() {
            last_live = next.clone();
        }
        live = next;
        if live.is_empty() {
            break;
        }
        // Scores can only rise towards log_prob / max_len.
        if let Some(best) = finished.iter().map(Hypothesis::score).reduce(f64::max) {
            let bound = live
                .iter()
                .map(|h| h.log_prob / max_len as f64)
                .fold(f64::NEG_INFINITY, f64::max);
            if best >= bound {
                break;
            }
        }
    }

    finished.sort_by(final_order);
    if let Some(best) = finished.into_iter().next() {
        return Ok((best, false));
    }
    let pool = if live.is_empty() { last_live } else { live };
    let top = pool.iter().map(|h| h.coverage.met_token_count).max().unwrap_or(0);
    let mut fallback: Vec<Hypothesis> = pool
        .into_iter()
        .filter(|h| h.coverage.met_token_count == top)
        .collect();
    fallback.sort_by(final_order);
    let best = fallback.into_iter().next().ok_or_else(|| {
        Error::Invalid("search produced no hypothesis".into())
    })?;
    Ok((best, true))
}

/// Constraint targets usable for forcing; those containing the unknown
/// token are reported separately.
pub fn usable_constraints(set: &ConstraintSet) -> (Vec<Vec<TokenId>>, Vec<usize>) {
    let mut keep = Vec::new();
    let mut excluded = Vec::new();
    for (n, p) in set.pairs().iter().enumerate() {
        if p.target_tokens.contains(&UNK) {
            excluded.push(n);
        } else {
            keep.push(p.target_tokens.clone());
        }
    }
    (keep, excluded)
}

pub fn beam_search_with<S: StepScorer>(scorer: &S, beam: usize, max_len: usize) -> Result<SearchOutput> {
    let (best, incomplete) = search(scorer, &[], beam, max_len, Mode::Beam)?;
    if incomplete {
        log::warn!("no hypothesis reached </s> within {max_len} tokens");
    }
    Ok(SearchOutput {
        best,
        incomplete,
        excluded: Vec::new(),
    })
}

pub fn vdba_search_with<S: StepScorer>(
    scorer: &S,
    set: &ConstraintSet,
    beam: usize,
    max_len: usize,
) -> Result<SearchOutput> {
    let (cons, excluded) = usable_constraints(set);
    if !excluded.is_empty() {
        log::warn!("constraints {excluded:?} contain unknown tokens and cannot be forced");
    }
    let (best, incomplete) = search(scorer, &cons, beam, max_len, Mode::Vdba)?;
    let incomplete = incomplete || !best.coverage.all_met();
    if incomplete {
        log::warn!("constrained search did not satisfy every constraint");
    }
    Ok(SearchOutput {
        best,
        incomplete,
        excluded,
    })
}

/// Beam search over the model's distribution, which sees `set` through the
/// constraint-aware layers.
pub fn beam_search(
    inference: &Inference<'_>,
    source: &[TokenId],
    set: &ConstraintSet,
    beam: usize,
    max_len: usize,
) -> Result<SearchOutput> {
    let enc = inference.model().encode_source(source, set)?;
    let scorer = ModelScorer {
        inference,
        source: &enc,
    };
    beam_search_with(&scorer, beam, max_len)
}

/// Bank-allocated constrained beam search.
pub fn vdba_search(
    inference: &Inference<'_>,
    source: &[TokenId],
    set: &ConstraintSet,
    beam: usize,
    max_len: usize,
) -> Result<SearchOutput> {
    let enc = inference.model().encode_source(source, set)?;
    let scorer = ModelScorer {
        inference,
        source: &enc,
    };
    vdba_search_with(&scorer, set, beam, max_len)
}

/// Argmax decoding, one token at a time.
pub fn greedy_with<S: StepScorer>(scorer: &S, max_len: usize) -> Result<Hypothesis> {
    let mut tokens = Vec::new();
    let mut log_prob = 0.0;
    for t in 1..=max_len {
        let prefix: Vec<TokenId> = std::iter::once(BOS).chain(tokens.iter().copied()).collect();
        let p = scorer.next_probs(&[&prefix])?.remove(0);
        let tok = if t == max_len { EOS } else { top_k(&p, 1, &[UNK, BOS])[0] };
        log_prob += ln(p[tok]);
        tokens.push(tok);
        if tok == EOS {
            break;
        }
    }
    Ok(Hypothesis {
        finished: tokens.last() == Some(&EOS),
        tokens,
        log_prob,
        coverage: CoverageState::new(&[]),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bank_allocation() {
        assert_eq!(allocate_banks(4, &[10, 10]), vec![2, 2]);
        assert_eq!(allocate_banks(5, &[10, 10]), vec![2, 3]);
        assert_eq!(allocate_banks(4, &[10, 0]), vec![4, 0]);
        assert_eq!(allocate_banks(2, &[10, 10, 10, 0]), vec![0, 0, 2, 0]);
        assert_eq!(allocate_banks(3, &[1, 1, 1]), vec![1, 1, 1]);
        assert_eq!(allocate_banks(6, &[1, 0, 9]), vec![1, 0, 5]);
    }

    #[test]
    fn single_bank_takes_everything() {
        assert_eq!(allocate_banks(7, &[20]), vec![7]);
    }
}
