//! Copying success rate, corpus BLEU and gold-token probability statistics.

use std::collections::HashMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::constraints::{classify_target_tokens, ConstraintSet};
use crate::error::{Error, Result};
use crate::model::{Ctx, Example, Model};
use crate::numerics::Graph;

/// Constraint counts for one sentence.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SentenceRecord {
    pub total: usize,
    pub met: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub bleu: f64,
    pub csr: f64,
    pub sentences: Vec<SentenceRecord>,
    pub avg_prob_all: Option<f64>,
    pub avg_prob_constrained: Option<f64>,
}

impl EvalReport {
    /// `key = value` lines.
    pub fn summary(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "bleu = {:.4}", self.bleu);
        let _ = writeln!(s, "csr = {:.4}", self.csr);
        let total: usize = self.sentences.iter().map(|r| r.total).sum();
        let met: usize = self.sentences.iter().map(|r| r.met).sum();
        let _ = writeln!(s, "constraints_total = {total}");
        let _ = writeln!(s, "constraints_met = {met}");
        for (k, v) in [
            ("avg_prob_all", self.avg_prob_all),
            ("avg_prob_constrained", self.avg_prob_constrained),
        ] {
            if let Some(v) = v {
                let _ = writeln!(s, "{k} = {v:.6}");
            }
        }
        s
    }

    /// `index<TAB>total<TAB>met` per sentence.
    pub fn details(&self) -> String {
        let mut s = String::new();
        for (i, r) in self.sentences.iter().enumerate() {
            let _ = writeln!(s, "{i}\t{}\t{}", r.total, r.met);
        }
        s
    }
}

fn contains_seq(hay: &[String], needle: &[String]) -> bool {
    !needle.is_empty() && hay.windows(needle.len()).any(|w| w == needle)
}

/// Per-sentence constraint counts. Hypotheses and constraints are word
/// sequences with subword markers already removed.
pub fn csr_records(hypotheses: &[Vec<String>], constraints: &[Vec<Vec<String>>]) -> Result<Vec<SentenceRecord>> {
    if hypotheses.len() != constraints.len() {
        return Err(Error::Invalid(format!(
            "{} hypotheses but {} constraint lists",
            hypotheses.len(),
            constraints.len()
        )));
    }
    Ok(hypotheses
        .iter()
        .zip(constraints)
        .map(|(h, cs)| SentenceRecord {
            total: cs.len(),
            met: cs.iter().filter(|c| contains_seq(h, c)).count(),
        })
        .collect())
}

fn csr_from_records(records: &[SentenceRecord]) -> f64 {
    let total: usize = records.iter().map(|r| r.total).sum();
    let met: usize = records.iter().map(|r| r.met).sum();
    if total == 0 {
        log::warn!("no constraints to score; copying success rate reported as 100");
        return 100.0;
    }
    100.0 * met as f64 / total as f64
}

/// Percentage of constraints whose target words occur contiguously in the
/// hypothesis.
pub fn csr(hypotheses: &[Vec<String>], constraints: &[Vec<Vec<String>>]) -> Result<f64> {
    Ok(csr_from_records(&csr_records(hypotheses, constraints)?))
}

fn ngram_counts(words: &[String], n: usize) -> HashMap<&[String], usize> {
    let mut m = HashMap::new();
    if words.len() >= n {
        for w in words.windows(n) {
            *m.entry(w).or_insert(0) += 1;
        }
    }
    m
}

/// Corpus BLEU-4 in percent, with brevity penalty. Zero match counts are
/// smoothed exponentially: the k-th such order gets `1 / (2^k · total)`.
pub fn corpus_bleu(hypotheses: &[Vec<String>], references: &[Vec<String>]) -> Result<f64> {
    if hypotheses.is_empty() {
        return Err(Error::Invalid("BLEU of an empty corpus".into()));
    }
    if hypotheses.len() != references.len() {
        return Err(Error::Invalid(format!(
            "{} hypotheses but {} references",
            hypotheses.len(),
            references.len()
        )));
    }
    let mut matches = [0usize; 4];
    let mut totals = [0usize; 4];
    let (mut hyp_len, mut ref_len) = (0usize, 0usize);
    for (h, r) in hypotheses.iter().zip(references) {
        hyp_len += h.len();
        ref_len += r.len();
        for n in 1..=4 {
            let hc = ngram_counts(h, n);
            let rc = ngram_counts(r, n);
            totals[n - 1] += h.len().saturating_sub(n - 1);
            matches[n - 1] += hc
                .iter()
                .map(|(g, &c)| c.min(rc.get(g).copied().unwrap_or(0)))
                .sum::<usize>();
        }
    }
    if hyp_len == 0 {
        return Ok(0.0);
    }
    let mut log_sum = 0.0f64;
    let mut inv = 1.0f64;
    for n in 0..4 {
        let total = totals[n].max(1) as f64;
        let p = if matches[n] == 0 {
            inv *= 2.0;
            1.0 / (inv * total)
        } else {
            matches[n] as f64 / total
        };
        log_sum += p.ln();
    }
    let bp = if hyp_len < ref_len {
        (1.0 - ref_len as f64 / hyp_len as f64).exp()
    } else {
        1.0
    };
    Ok(100.0 * bp * (log_sum / 4.0).exp())
}

/// Mean gold-token probability under teacher forcing over all positions and
/// over positions whose gold token is a constraint token. The second is
/// `None` when no such position exists.
pub fn prob_stats(model: &Model, examples: &[Example], batch: usize) -> Result<(f64, Option<f64>)> {
    if examples.is_empty() {
        return Err(Error::Invalid("no examples for probability statistics".into()));
    }
    let (mut all, mut n_all) = (0.0f64, 0usize);
    let (mut con, mut n_con) = (0.0f64, 0usize);
    for chunk in examples.chunks(batch.max(1)) {
        let refs: Vec<&Example> = chunk.iter().collect();
        let mut g = Graph::new();
        let tf = model.teacher_forced(&mut g, &refs, &mut Ctx::eval())?;
        let probs = g.value(tf.out.probs);
        let mut row = 0;
        for e in chunk {
            let gold: Vec<usize> = e.target.iter().copied().chain([2]).collect();
            let mask = classify_target_tokens(&gold, &e.constraints);
            for (&y, &c) in gold.iter().zip(&mask) {
                let p = probs.at(row, y) as f64;
                all += p;
                n_all += 1;
                if c {
                    con += p;
                    n_con += 1;
                }
                row += 1;
            }
        }
    }
    Ok((all / n_all as f64, (n_con > 0).then(|| con / n_con as f64)))
}

/// Word sequences of each constraint target, for CSR.
pub fn constraint_words(sets: &[ConstraintSet]) -> Vec<Vec<Vec<String>>> {
    sets.iter()
        .map(|s| {
            s.pairs()
                .iter()
                .map(|p| p.raw_target.split_whitespace().map(String::from).collect())
                .collect()
        })
        .collect()
}

/// BLEU and CSR of word-level hypotheses, and optionally probability
/// statistics of `model` on the references.
pub fn evaluate(
    hypotheses: &[Vec<String>],
    references: &[Vec<String>],
    constraints: &[Vec<Vec<String>>],
    probs: Option<(f64, Option<f64>)>,
) -> Result<EvalReport> {
    let sentences = csr_records(hypotheses, constraints)?;
    Ok(EvalReport {
        bleu: corpus_bleu(hypotheses, references)?,
        csr: csr_from_records(&sentences),
        sentences,
        avg_prob_all: probs.map(|p| p.0),
        avg_prob_constrained: probs.and_then(|p| p.1),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn w(s: &str) -> Vec<String> {
        s.split_whitespace().map(String::from).collect()
    }

    #[test]
    fn csr_half() {
        let got = csr(&[w("x a b y")], &[vec![w("a b"), w("c")]]).unwrap();
        assert_eq!(got, 50.0);
    }

    #[test]
    fn csr_mismatched_lengths() {
        assert!(csr(&[w("a")], &[]).is_err());
    }

    #[test]
    fn bleu_identity() {
        let h = vec![w("a b c d e"), w("f g")];
        assert_eq!(corpus_bleu(&h, &h).unwrap(), 100.0);
    }

    #[test]
    fn bleu_no_overlap_is_small_but_positive() {
        // 30 words: precisions 1/60, 1/116, 1/224, 1/432, so about 0.62.
        let hyp: Vec<String> = (0..30).map(|i| format!("h{i}")).collect();
        let reference: Vec<String> = (0..30).map(|i| format!("r{i}")).collect();
        let b = corpus_bleu(&[hyp], &[reference]).unwrap();
        let expected = 100.0 / (60.0f64 * 116.0 * 224.0 * 432.0).powf(0.25);
        assert!((b - expected).abs() < 1e-9 && b > 0.0 && b < 1.0, "{b}");
    }
}
