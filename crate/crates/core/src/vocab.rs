//! Token vocabulary with a reserved padding/unknown entry at index 0.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

pub const PAD_TOKEN: &str = "<pad>";
pub const PAD_INDEX: usize = 0;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocabulary {
    /// Builds a vocabulary from real tokens; the padding token is prepended.
    pub fn new<I, S>(tokens: I) -> Result<Self>
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let mut all = vec![PAD_TOKEN.to_string()];
        all.extend(tokens.into_iter().map(Into::into));
        Self::from_lines(all)
    }

    /// Line `i` of the file is token index `i`; the first line is the padding token.
    fn from_lines(tokens: Vec<String>) -> Result<Self> {
        if tokens.len() < 2 {
            return Err(Error::Vocabulary("need the padding token and at least one word".into()));
        }
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if t.is_empty() || t.chars().any(char::is_whitespace) {
                return Err(Error::Vocabulary(format!("line {}: invalid token {t:?}", i + 1)));
            }
            if index.insert(t.clone(), i).is_some() {
                return Err(Error::Vocabulary(format!("line {}: duplicate token {t:?}", i + 1)));
            }
        }
        Ok(Vocabulary { tokens, index })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_lines(text.lines().map(str::to_string).collect())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut text = self.tokens.join("\n");
        text.push('\n');
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    /// Number of entries including padding.
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Index of `token`, or `None` if unknown.
    pub fn index(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    pub fn token(&self, index: usize) -> Option<&str> {
        self.tokens.get(index).map(String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    /// Space-joined tokens; out-of-range indices render as `<?>`.
    pub fn render(&self, indices: &[usize]) -> String {
        indices
            .iter()
            .map(|&i| self.token(i).unwrap_or("<?>"))
            .collect::<Vec<_>>()
            .join(" ")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lookup_is_bijective() {
        let v = Vocabulary::new(["a", "cat", "sits"]).unwrap();
        assert_eq!(v.len(), 4);
        for i in 1..v.len() {
            assert_eq!(v.index(v.token(i).unwrap()), Some(i));
        }
        assert_eq!(v.index(PAD_TOKEN), Some(PAD_INDEX));
        assert_eq!(v.index("dog"), None);
    }

    #[test]
    fn duplicates_rejected() {
        assert!(Vocabulary::new(["a", "a"]).is_err());
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("vocab.txt");
        let v = Vocabulary::new(["x", "y"]).unwrap();
        v.save(&p).unwrap();
        assert_eq!(Vocabulary::load(&p).unwrap(), v);
        assert_eq!(fs::read_to_string(&p).unwrap(), "<pad>\nx\ny\n");
    }
}
