use std::collections::HashMap;

pub type TokenId = usize;

pub const UNK: &str = "<unk>";
pub const BOS: &str = "<s>";
pub const EOS: &str = "</s>";

/// Bidirectional token/id map. Ids 0, 1, 2 are the unknown, start and end
/// symbols; every other token follows in insertion order.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, TokenId>,
}

impl Vocab {
    pub fn from_tokens<I: IntoIterator<Item = String>>(tokens: I) -> Self {
        let mut v = Vocab {
            tokens: Vec::new(),
            index: HashMap::new(),
        };
        for t in [UNK, BOS, EOS].into_iter().map(String::from).chain(tokens) {
            if !v.index.contains_key(&t) {
                v.index.insert(t.clone(), v.tokens.len());
                v.tokens.push(t);
            }
        }
        v
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn unk(&self) -> TokenId {
        0
    }

    pub fn bos(&self) -> TokenId {
        1
    }

    pub fn eos(&self) -> TokenId {
        2
    }

    pub fn get(&self, token: &str) -> Option<TokenId> {
        self.index.get(token).copied()
    }

    /// Unknown strings map to the unknown id, with or without a `@@` suffix.
    pub fn id(&self, token: &str) -> TokenId {
        self.get(token).unwrap_or(self.unk())
    }

    pub fn ids<S: AsRef<str>>(&self, tokens: &[S]) -> Vec<TokenId> {
        tokens.iter().map(|t| self.id(t.as_ref())).collect()
    }

    pub fn token(&self, id: TokenId) -> &str {
        &self.tokens[id]
    }

    /// Token strings for `ids`, skipping start and end markers.
    pub fn tokens_for(&self, ids: &[TokenId]) -> Vec<&str> {
        ids.iter()
            .filter(|&&id| id != self.bos() && id != self.eos())
            .map(|&id| self.token(id))
            .collect()
    }
}
