//! Plain and constrained beam search over the model's next-token
//! distributions.

mod coverage;
mod search;

use serde::{Deserialize, Serialize};

use crate::constraints::ConstraintSet;
use crate::datapipe::TokenId;
use crate::error::{Error, Result};
use crate::model::Inference;

pub use coverage::{update_coverage, update_coverage_words, CoverageState};
pub use search::{
    allocate_banks, beam_search, beam_search_with, greedy_with, search, usable_constraints,
    vdba_search, vdba_search_with, Hypothesis, Mode, ModelScorer, SearchOutput, StepScorer,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Decoder {
    Beam,
    Vdba,
}

impl std::str::FromStr for Decoder {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "beam" => Ok(Decoder::Beam),
            "vdba" => Ok(Decoder::Vdba),
            _ => Err(Error::Config(format!("unknown decoder {s:?}, expected beam or vdba"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecodeConfig {
    pub decoder: Decoder,
    pub beam: usize,
    /// Output budget `a·|x| + b + Σ|t|`, capped by the model's `max_len`.
    pub max_len_a: f32,
    pub max_len_b: usize,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        DecodeConfig {
            decoder: Decoder::Beam,
            beam: 4,
            max_len_a: 2.0,
            max_len_b: 10,
        }
    }
}

impl DecodeConfig {
    pub fn max_len(&self, source_len: usize, set: &ConstraintSet, cap: usize) -> usize {
        let l = (self.max_len_a * source_len as f32).ceil() as usize
            + self.max_len_b
            + set.total_target_len();
        l.min(cap.saturating_sub(1)).max(1)
    }
}

/// Decodes one sentence; the model always sees `set`, and `vdba` also
/// forces it into the output.
pub fn translate(
    inference: &Inference<'_>,
    source: &[TokenId],
    set: &ConstraintSet,
    config: &DecodeConfig,
) -> Result<SearchOutput> {
    let max_len = config.max_len(source.len(), set, inference.model().config().max_len);
    match config.decoder {
        Decoder::Beam => beam_search(inference, source, set, config.beam, max_len),
        Decoder::Vdba => vdba_search(inference, source, set, config.beam, max_len),
    }
}

/// Decodes sentences one after another over shared read-only parameters.
pub fn translate_all(
    inference: &Inference<'_>,
    sources: &[Vec<TokenId>],
    sets: &[ConstraintSet],
    config: &DecodeConfig,
) -> Result<Vec<SearchOutput>> {
    if sources.len() != sets.len() {
        return Err(Error::Invalid(format!(
            "{} sources but {} constraint sets",
            sources.len(),
            sets.len()
        )));
    }
    sources
        .iter()
        .zip(sets)
        .map(|(s, c)| translate(inference, s, c, config))
        .collect()
}
