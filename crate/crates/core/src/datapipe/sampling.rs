use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::phrases::PhrasePair;

pub const MAX_CONSTRAINTS: usize = 3;
pub const MAX_PHRASE_LEN: usize = 3;

/// Derives a per-item seed so items can be processed independently.
pub fn mix_seed(seed: u64, index: u64) -> u64 {
    let mut z = seed ^ index.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn seeded_rng(seed: u64, index: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(mix_seed(seed, index))
}

/// Picks up to three mutually non-overlapping phrase pairs.
///
/// The count is uniform over `0..=min(3, candidates)`. Each pick first draws
/// a phrase length uniformly from 1 to 3 and takes a random compatible
/// candidate of that source length, or any compatible candidate if none has
/// it. The result is shuffled.
pub fn sample_constraints<R: Rng>(pairs: &[PhrasePair], rng: &mut R) -> Vec<PhrasePair> {
    let usable: Vec<&PhrasePair> = pairs
        .iter()
        .filter(|p| {
            (1..=MAX_PHRASE_LEN).contains(&p.source_len())
                && (1..=MAX_PHRASE_LEN).contains(&p.target_len())
        })
        .collect();
    let n = rng.random_range(0..=MAX_CONSTRAINTS.min(usable.len()));
    let mut chosen: Vec<PhrasePair> = Vec::with_capacity(n);
    while chosen.len() < n {
        let open: Vec<&PhrasePair> = usable
            .iter()
            .copied()
            .filter(|p| chosen.iter().all(|c| !c.overlaps(p)))
            .collect();
        if open.is_empty() {
            break;
        }
        let len = rng.random_range(1..=MAX_PHRASE_LEN);
        let with_len: Vec<&PhrasePair> =
            open.iter().copied().filter(|p| p.source_len() == len).collect();
        let pool = if with_len.is_empty() { &open } else { &with_len };
        chosen.push(pool[rng.random_range(0..pool.len())].clone());
    }
    chosen.shuffle(rng);
    chosen
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datapipe::corpus::{AlignmentLinks, SentencePair};
    use crate::datapipe::phrases::extract_phrase_pairs;

    #[test]
    fn same_seed_same_sample() {
        let p = SentencePair::from_lines("a b c d e f", "u v w x y z");
        let pairs = extract_phrase_pairs(&p, &AlignmentLinks::identity(6), 3);
        let a = sample_constraints(&pairs, &mut seeded_rng(7, 3));
        let b = sample_constraints(&pairs, &mut seeded_rng(7, 3));
        assert_eq!(a, b);
    }

    #[test]
    fn only_overlapping_candidates_give_at_most_one() {
        let p = SentencePair::from_lines("a b", "x y");
        let links = AlignmentLinks::new([(0, 1), (1, 0), (1, 1)], 2, 2).unwrap();
        let pairs = extract_phrase_pairs(&p, &links, 3);
        for s in 0..200 {
            assert!(sample_constraints(&pairs, &mut seeded_rng(s, 0)).len() <= 1);
        }
    }

    #[test]
    fn no_candidates_no_constraints() {
        assert!(sample_constraints(&[], &mut seeded_rng(1, 1)).is_empty());
    }
}
