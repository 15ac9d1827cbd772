use rand::Rng;

use crate::error::{Error, Result};

use super::corpus::{ParallelCorpus, SentencePair};
use super::phrases::PhrasePair;
use super::sampling::seeded_rng;

#[derive(Clone, Debug, PartialEq)]
pub struct CodeSwitched {
    pub corpus: ParallelCorpus,
    pub constraints: Vec<Vec<PhrasePair>>,
    /// Number of constraints whose target side was replaced.
    pub switched: usize,
    pub total: usize,
}

fn switch_sentence<R: Rng>(
    index: usize,
    pair: &SentencePair,
    constraints: &[PhrasePair],
    prob: f64,
    rng: &mut R,
) -> Result<(SentencePair, Vec<PhrasePair>, usize)> {
    for c in constraints {
        let (j1, j2) = c.target_span;
        if j2 >= pair.target.len() || pair.target[j1..=j2] != c.target[..] {
            return Err(Error::Invalid(format!(
                "sentence {index}: constraint target {:?} not found at span {j1}..={j2}",
                c.target.join(" ")
            )));
        }
    }
    for (a, b) in constraints.iter().enumerate().flat_map(|(i, a)| {
        constraints[i + 1..].iter().map(move |b| (a, b))
    }) {
        let (x, y) = (a.target_span, b.target_span);
        if x.0 <= y.1 && y.0 <= x.1 {
            return Err(Error::Invalid(format!(
                "sentence {index}: overlapping constraint target spans"
            )));
        }
    }
    let flips: Vec<bool> = constraints.iter().map(|_| rng.random_bool(prob)).collect();

    let mut order: Vec<usize> = (0..constraints.len()).collect();
    order.sort_by_key(|&k| constraints[k].target_span.0);
    let mut target = Vec::with_capacity(pair.target.len());
    let mut new_spans = vec![(0, 0); constraints.len()];
    let mut pos = 0;
    for &k in &order {
        let c = &constraints[k];
        target.extend_from_slice(&pair.target[pos..c.target_span.0]);
        let words = if flips[k] { &c.source } else { &c.target };
        new_spans[k] = (target.len(), target.len() + words.len() - 1);
        target.extend_from_slice(words);
        pos = c.target_span.1 + 1;
    }
    target.extend_from_slice(&pair.target[pos..]);

    let out = constraints
        .iter()
        .zip(&flips)
        .zip(new_spans)
        .map(|((c, &f), span)| PhrasePair {
            source_span: c.source_span,
            target_span: span,
            source: c.source.clone(),
            target: if f { c.source.clone() } else { c.target.clone() },
        })
        .collect();
    let n = flips.iter().filter(|&&f| f).count();
    Ok((
        SentencePair {
            source: pair.source.clone(),
            target,
        },
        out,
        n,
    ))
}

/// Replaces each constraint's target side by its source side with
/// probability `prob`, rewriting the matching span of the target sentence.
/// Alignment links are dropped since spans may change length.
pub fn code_switch_corpus(
    corpus: &ParallelCorpus,
    constraints: &[Vec<PhrasePair>],
    seed: u64,
    prob: f64,
) -> Result<CodeSwitched> {
    if constraints.len() != corpus.len() {
        return Err(Error::Invalid(format!(
            "{} constraint sets for {} sentence pairs",
            constraints.len(),
            corpus.len()
        )));
    }
    if !(0.0..=1.0).contains(&prob) {
        return Err(Error::Config(format!("switch probability {prob} not in [0, 1]")));
    }
    let mut pairs = Vec::with_capacity(corpus.len());
    let mut sets = Vec::with_capacity(corpus.len());
    let (mut switched, mut total) = (0, 0);
    for (i, (pair, cs)) in corpus.pairs.iter().zip(constraints).enumerate() {
        let mut rng = seeded_rng(seed, i as u64);
        let (p, c, n) = switch_sentence(i, pair, cs, prob, &mut rng)?;
        switched += n;
        total += cs.len();
        pairs.push(p);
        sets.push(c);
    }
    Ok(CodeSwitched {
        corpus: ParallelCorpus::new(pairs),
        constraints: sets,
        switched,
        total,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datapipe::corpus::AlignmentLinks;
    use crate::datapipe::phrases::extract_phrase_pairs;

    fn fixture() -> (ParallelCorpus, Vec<Vec<PhrasePair>>) {
        let pair = SentencePair::from_lines("the beatles band", "披头士 的 乐团");
        let links = AlignmentLinks::new([(0, 1), (1, 0), (2, 2)], 3, 3).unwrap();
        let phrases = extract_phrase_pairs(&pair, &links, 1);
        let chosen = vec![phrases[1].clone(), phrases[2].clone()];
        (ParallelCorpus::new(vec![pair]), vec![chosen])
    }

    #[test]
    fn always_switch() {
        let (corpus, cons) = fixture();
        let out = code_switch_corpus(&corpus, &cons, 3, 1.0).unwrap();
        assert_eq!(out.corpus.pairs[0].target_line(), "beatles 的 band");
        for c in &out.constraints[0] {
            assert_eq!(c.source, c.target);
            let t = &out.corpus.pairs[0].target;
            assert_eq!(t[c.target_span.0..=c.target_span.1], c.target[..]);
        }
    }

    #[test]
    fn never_switch() {
        let (corpus, cons) = fixture();
        let out = code_switch_corpus(&corpus, &cons, 3, 0.0).unwrap();
        assert_eq!(out.corpus.pairs, corpus.pairs);
        assert_eq!(out.constraints, cons);
    }

    #[test]
    fn missing_span_is_an_error() {
        let (corpus, mut cons) = fixture();
        cons[0][0].target = vec!["乐队".into()];
        let err = code_switch_corpus(&corpus, &cons, 3, 0.5).unwrap_err();
        assert!(err.to_string().contains("sentence 0"));
    }
}
