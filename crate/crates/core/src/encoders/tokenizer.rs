use std::collections::HashMap;

use serde::{Deserialize, Serialize};

pub const PAD: &str = "[pad]";
pub const UNK: &str = "[unk]";
pub const PAD_ID: usize = 0;
pub const UNK_ID: usize = 1;

/// Lowercases and splits into runs of alphanumeric characters; every other
/// non-whitespace character is its own token.
pub fn split_words(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut word = String::new();
    for c in text.chars().flat_map(char::to_lowercase) {
        if c.is_alphanumeric() {
            word.push(c);
            continue;
        }
        if !word.is_empty() {
            out.push(std::mem::take(&mut word));
        }
        if !c.is_whitespace() {
            out.push(c.to_string());
        }
    }
    if !word.is_empty() {
        out.push(word);
    }
    out
}

/// Word vocabulary. Id 0 is padding and id 1 the unknown token.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<String>", into = "Vec<String>")]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl TryFrom<Vec<String>> for Vocab {
    type Error = String;

    fn try_from(tokens: Vec<String>) -> Result<Self, String> {
        Self::from_tokens(tokens)
    }
}

impl From<Vocab> for Vec<String> {
    fn from(v: Vocab) -> Self {
        v.tokens
    }
}

impl Vocab {
    /// Builds from texts, keeping words seen at least `min_count` times, most
    /// frequent first (ties alphabetical), capped at `max_size` entries total.
    pub fn build<'a>(
        texts: impl IntoIterator<Item = &'a str>,
        min_count: usize,
        max_size: usize,
    ) -> Self {
        let mut counts: HashMap<String, usize> = HashMap::new();
        for t in texts {
            for w in split_words(t) {
                *counts.entry(w).or_default() += 1;
            }
        }
        let mut words: Vec<(String, usize)> = counts
            .into_iter()
            .filter(|(_, c)| *c >= min_count)
            .collect();
        words.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        let mut tokens = vec![PAD.to_string(), UNK.to_string()];
        tokens.extend(
            words
                .into_iter()
                .map(|(w, _)| w)
                .take(max_size.saturating_sub(2)),
        );
        Self::from_tokens(tokens).expect("reserved tokens present")
    }

    /// Restores a vocabulary from its token list (line number = id).
    pub fn from_tokens(tokens: Vec<String>) -> Result<Self, String> {
        if tokens.first().map(String::as_str) != Some(PAD)
            || tokens.get(1).map(String::as_str) != Some(UNK)
        {
            return Err(format!("vocabulary must start with {PAD} and {UNK}"));
        }
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if index.insert(t.clone(), i).is_some() {
                return Err(format!("duplicate vocabulary token '{t}'"));
            }
        }
        Ok(Self { tokens, index })
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, word: &str) -> usize {
        self.index.get(word).copied().unwrap_or(UNK_ID)
    }

    /// Token ids, truncated to `max_len`.
    pub fn tokenize(&self, text: &str, max_len: usize) -> Vec<usize> {
        split_words(text)
            .iter()
            .take(max_len)
            .map(|w| self.id(w))
            .collect()
    }

    /// One token per line.
    pub fn to_text(&self) -> String {
        let mut s = self.tokens.join("\n");
        s.push('\n');
        s
    }

    pub fn from_text(text: &str) -> Result<Self, String> {
        Self::from_tokens(text.lines().map(str::to_string).collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn splitting() {
        assert!(split_words("").is_empty());
        assert_eq!(
            split_words("It has a role as a dye."),
            ["it", "has", "a", "role", "as", "a", "dye", "."]
        );
        assert_eq!(
            split_words("2-methyl (R)"),
            ["2", "-", "methyl", "(", "r", ")"]
        );
    }

    #[test]
    fn ids_in_range_and_unknowns() {
        let v = Vocab::build(["the cat sat", "the dog"], 1, 100);
        assert_eq!(v.id("the"), 2);
        let ids = v.tokenize("The zebra sat.", 256);
        assert_eq!(ids.len(), 4);
        assert_eq!(ids[1], UNK_ID);
        assert!(ids.iter().all(|&i| i < v.len()));
        assert_eq!(v.tokenize("the the the", 2).len(), 2);
        assert!(v.tokenize("", 8).is_empty());
    }

    #[test]
    fn text_round_trip() {
        let v = Vocab::build(["a b c a"], 1, 3);
        assert_eq!(v.len(), 3);
        assert_eq!(Vocab::from_text(&v.to_text()).unwrap(), v);
        assert!(Vocab::from_tokens(vec!["x".into()]).is_err());
    }
}
