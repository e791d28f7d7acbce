use std::collections::HashMap;
use std::path::Path;

use super::CorpusError;

pub const PAD: u32 = 0;
pub const BOS: u32 = 1;
pub const EOS: u32 = 2;
pub const UNK: u32 = 3;

const RESERVED: [&str; 4] = ["<pad>", "<s>", "</s>", "<unk>"];

/// Shared source/target token table. Ids 0..4 are reserved for
/// pad, bos, eos and unk; everything else follows insertion order.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, u32>,
}

impl Default for Vocabulary {
    fn default() -> Self {
        Self::new()
    }
}

impl Vocabulary {
    pub fn new() -> Self {
        let tokens: Vec<String> = RESERVED.iter().map(|s| s.to_string()).collect();
        let index = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i as u32))
            .collect();
        Self { tokens, index }
    }

    pub const fn reserved_count() -> usize {
        RESERVED.len()
    }

    /// Builds a vocabulary from distinct non-reserved tokens.
    pub fn from_tokens<I, S>(tokens: I) -> Result<Self, CorpusError>
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let mut v = Self::new();
        for t in tokens {
            let t = t.into();
            if v.index.contains_key(&t) {
                return Err(CorpusError::DuplicateToken(t));
            }
            v.push(t)?;
        }
        Ok(v)
    }

    fn push(&mut self, token: String) -> Result<u32, CorpusError> {
        if token.is_empty() || token.chars().any(char::is_whitespace) {
            return Err(CorpusError::InvalidToken(token));
        }
        let id = self.tokens.len() as u32;
        self.index.insert(token.clone(), id);
        self.tokens.push(token);
        Ok(id)
    }

    /// Returns the id of `token`, inserting it if absent.
    pub fn add(&mut self, token: &str) -> Result<u32, CorpusError> {
        match self.index.get(token) {
            Some(&id) => Ok(id),
            None => self.push(token.to_string()),
        }
    }

    pub fn id(&self, token: &str) -> Option<u32> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.len() == RESERVED.len()
    }

    /// Non-reserved tokens in id order.
    pub fn entries(&self) -> &[String] {
        &self.tokens[RESERVED.len()..]
    }

    /// One token per line; the token on line `i` (0-based) has id `i + 4`.
    pub fn to_file_string(&self) -> String {
        let mut s = String::new();
        for t in self.entries() {
            s.push_str(t);
            s.push('\n');
        }
        s
    }

    pub fn parse(text: &str) -> Result<Self, CorpusError> {
        Self::from_tokens(text.lines().filter(|l| !l.is_empty()))
    }

    pub fn save(&self, path: &Path) -> Result<(), CorpusError> {
        std::fs::write(path, self.to_file_string()).map_err(|e| CorpusError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self, CorpusError> {
        let text = std::fs::read_to_string(path).map_err(|e| CorpusError::io(path, e))?;
        Self::parse(&text)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn reserved_ids_fixed() {
        let v = Vocabulary::from_tokens(["a", "b"]).unwrap();
        assert_eq!(v.id("<pad>"), Some(PAD));
        assert_eq!(v.id("<s>"), Some(BOS));
        assert_eq!(v.id("</s>"), Some(EOS));
        assert_eq!(v.id("<unk>"), Some(UNK));
        assert_eq!(v.id("a"), Some(4));
        assert_eq!(v.token(5), Some("b"));
    }

    #[test]
    fn duplicates_and_reserved_rejected() {
        assert!(Vocabulary::from_tokens(["a", "a"]).is_err());
        assert!(Vocabulary::from_tokens(["</s>"]).is_err());
        assert!(Vocabulary::from_tokens(["a b"]).is_err());
    }

    proptest! {
        #[test]
        fn file_round_trip(words in prop::collection::btree_set("[a-z]{1,6}", 0..40)) {
            let v = Vocabulary::from_tokens(words.iter().cloned()).unwrap();
            let back = Vocabulary::parse(&v.to_file_string()).unwrap();
            prop_assert_eq!(&back, &v);
            for (i, w) in words.iter().enumerate() {
                prop_assert_eq!(back.id(w), Some(i as u32 + 4));
            }
        }
    }
}
