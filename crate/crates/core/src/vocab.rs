use std::collections::{BTreeSet, HashMap};

use serde::{Deserialize, Serialize};

pub const CLS: &str = "[CLS]";
pub const UNK: &str = "[UNK]";
pub const CLS_ID: usize = 0;
pub const UNK_ID: usize = 1;

/// Whitespace-token vocabulary. Ids 0 and 1 are `[CLS]` and `[UNK]`; the
/// remaining tokens follow in sorted order so a vocabulary built from the
/// same corpus is always identical.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(from = "Vec<String>", into = "Vec<String>")]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocab {
    pub fn build<'a, I>(tokens: I) -> Self
    where
        I: IntoIterator<Item = &'a str>,
    {
        let rest: BTreeSet<&str> = tokens.into_iter().filter(|t| *t != CLS && *t != UNK).collect();
        let mut all = vec![CLS.to_string(), UNK.to_string()];
        all.extend(rest.into_iter().map(str::to_string));
        Self::from(all)
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> usize {
        self.index.get(token).copied().unwrap_or(UNK_ID)
    }

    pub fn contains(&self, token: &str) -> bool {
        self.index.contains_key(token)
    }

    /// Maps tokens to ids; unknown tokens become `[UNK]`.
    pub fn encode<S: AsRef<str>>(&self, tokens: &[S]) -> Vec<usize> {
        tokens.iter().map(|t| self.id(t.as_ref())).collect()
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }
}

impl From<Vec<String>> for Vocab {
    fn from(tokens: Vec<String>) -> Self {
        let index = tokens.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
        Self { tokens, index }
    }
}

impl From<Vocab> for Vec<String> {
    fn from(v: Vocab) -> Self {
        v.tokens
    }
}
