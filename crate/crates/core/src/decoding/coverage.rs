use crate::datapipe::TokenId;

/// Progress of every constraint target inside one hypothesis.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct CoverageState {
    /// Leading tokens of each constraint matched by the current suffix.
    pub progress: Vec<usize>,
    /// Sticky completion flags.
    pub met: Vec<bool>,
    /// Tokens of met constraints plus in-progress matches of the others.
    pub met_token_count: usize,
    /// The last token continues into the next one, so no match may start
    /// here.
    pub open_word: bool,
}

impl CoverageState {
    pub fn new(constraints: &[Vec<TokenId>]) -> Self {
        CoverageState {
            progress: vec![0; constraints.len()],
            met: vec![false; constraints.len()],
            met_token_count: 0,
            open_word: false,
        }
    }

    pub fn all_met(&self) -> bool {
        self.met.iter().all(|&m| m)
    }

    /// Next token each unmet constraint would need, in constraint order.
    pub fn forced_tokens(&self, constraints: &[Vec<TokenId>]) -> Vec<TokenId> {
        let mut out: Vec<TokenId> = constraints
            .iter()
            .zip(&self.progress)
            .zip(&self.met)
            .filter(|(_, &m)| !m)
            .map(|((c, &p), _)| c[p])
            .collect();
        out.sort_unstable();
        out.dedup();
        out
    }
}

/// Length of the longest prefix of `target` that ends the sequence
/// `target[..matched] ++ [token]` and starts a word. `open` tells whether
/// the token before the current match continues a word.
fn advance<F>(target: &[TokenId], matched: usize, token: TokenId, open: bool, continues: &F) -> usize
where
    F: Fn(TokenId) -> bool,
{
    let mut text: Vec<TokenId> = target[..matched].to_vec();
    text.push(token);
    let n = text.len();
    (1..=n.min(target.len()))
        .rev()
        .find(|&k| {
            let starts_word = if k == n { !open } else { !continues(text[n - k - 1]) };
            starts_word && text[n - k..] == target[..k]
        })
        .unwrap_or(0)
}

/// Coverage after appending `token`, treating every token as a whole word.
/// A constraint whose match breaks falls back to the longest prefix still
/// matching, so `[a,a]` fed `a,b,a,a` is met on the fourth token.
pub fn update_coverage(
    state: &CoverageState,
    constraints: &[Vec<TokenId>],
    token: TokenId,
) -> CoverageState {
    update_coverage_words(state, constraints, token, |_| false)
}

/// Like [`update_coverage`] for subword tokens: `continues(t)` marks tokens
/// glued to their successor, and a match only counts when it begins a word.
pub fn update_coverage_words<F>(
    state: &CoverageState,
    constraints: &[Vec<TokenId>],
    token: TokenId,
    continues: F,
) -> CoverageState
where
    F: Fn(TokenId) -> bool,
{
    let mut next = state.clone();
    let mut count = 0;
    for (n, c) in constraints.iter().enumerate() {
        if !next.met[n] {
            let p = next.progress[n];
            // The match start is preceded by the token before it, known to
            // end a word unless nothing is matched yet.
            let open = p == 0 && state.open_word;
            next.progress[n] = advance(c, p, token, open, &continues);
            if next.progress[n] == c.len() {
                next.met[n] = true;
            }
        }
        count += if next.met[n] { c.len() } else { next.progress[n] };
    }
    next.met_token_count = count;
    next.open_word = continues(token);
    next
}
