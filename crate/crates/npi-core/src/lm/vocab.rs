use std::collections::HashMap;
use std::path::Path;

use crate::error::{Error, Result};

pub const PAD_ID: usize = 0;
pub const UNK_ID: usize = 1;

/// Character-level vocabulary with reserved padding and unknown ids.
#[derive(Debug, Clone)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocabulary {
    /// Build from a corpus: one token per distinct character, sorted for
    /// determinism, after the two reserved entries.
    pub fn from_corpus(corpus: &str) -> Self {
        let mut chars: Vec<char> = corpus
            .chars()
            .filter(|c| *c != '\n' && *c != '\r')
            .collect::<std::collections::BTreeSet<_>>()
            .into_iter()
            .collect();
        chars.sort_unstable();
        let mut tokens = vec!["<pad>".to_string(), "<unk>".to_string()];
        tokens.extend(chars.into_iter().map(|c| c.to_string()));
        Self::from_tokens(tokens)
    }

    pub fn from_tokens(tokens: Vec<String>) -> Self {
        let index = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i))
            .collect();
        Vocabulary { tokens, index }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(|s| s.as_str())
    }

    /// Unknown characters map to the unknown token; never fails.
    pub fn tokenize(&self, text: &str) -> Vec<usize> {
        text.chars()
            .map(|c| self.index.get(&c.to_string()).copied().unwrap_or(UNK_ID))
            .collect()
    }

    pub fn detokenize(&self, ids: &[usize]) -> String {
        ids.iter()
            .map(|&id| match id {
                PAD_ID => "",
                UNK_ID => "\u{fffd}",
                _ => self.tokens.get(id).map(|s| s.as_str()).unwrap_or("\u{fffd}"),
            })
            .collect()
    }

    /// One token per line, line index = id. Newlines and backslashes inside
    /// tokens are escaped so the file stays line-oriented.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut out = String::new();
        for t in &self.tokens {
            out.push_str(&t.replace('\\', "\\\\").replace('\n', "\\n"));
            out.push('\n');
        }
        std::fs::write(path, out)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let tokens: Vec<String> = text
            .lines()
            .map(|l| l.replace("\\n", "\n").replace("\\\\", "\\"))
            .collect();
        if tokens.len() < 2 || tokens[PAD_ID] != "<pad>" || tokens[UNK_ID] != "<unk>" {
            return Err(Error::Format(
                "vocabulary file missing reserved tokens".into(),
            ));
        }
        Ok(Self::from_tokens(tokens))
    }
}
