use std::collections::HashMap;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

pub const PAD: u32 = 0;
pub const CLS: u32 = 1;
pub const UNK: u32 = 2;
pub const MASK: u32 = 3;

const RESERVED: [&str; 4] = ["[PAD]", "[CLS]", "[UNK]", "[MASK]"];

/// Whitespace vocabulary. Line index in the vocabulary file is the token id.
#[derive(Debug, Clone, PartialEq)]
pub struct Vocab {
    tokens: Vec<String>,
    ids: HashMap<String, u32>,
}

impl Default for Vocab {
    fn default() -> Self {
        Self::new()
    }
}

impl Vocab {
    /// Vocabulary holding only the reserved tokens.
    pub fn new() -> Self {
        let mut v = Self {
            tokens: Vec::new(),
            ids: HashMap::new(),
        };
        for t in RESERVED {
            v.push(t);
        }
        v
    }

    /// Add a token if missing and return its id.
    pub fn push(&mut self, token: &str) -> u32 {
        if let Some(&id) = self.ids.get(token) {
            return id;
        }
        let id = self.tokens.len() as u32;
        self.tokens.push(token.to_string());
        self.ids.insert(token.to_string(), id);
        id
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> Option<u32> {
        self.ids.get(token).copied()
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    /// `[CLS]` followed by the whitespace tokens of `text`, truncated to
    /// `max_len` ids. Unknown words map to `[UNK]`.
    pub fn encode(&self, text: &str, max_len: usize) -> Vec<u32> {
        std::iter::once(CLS)
            .chain(text.split_whitespace().map(|w| self.id(w).unwrap_or(UNK)))
            .take(max_len.max(1))
            .collect()
    }

    pub fn decode(&self, ids: &[u32]) -> String {
        ids.iter()
            .filter(|&&id| id != CLS && id != PAD)
            .map(|&id| self.token(id).unwrap_or("[UNK]"))
            .collect::<Vec<_>>()
            .join(" ")
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut s = self.tokens.join("\n");
        s.push('\n');
        fs::write(path, s).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut v = Self {
            tokens: Vec::new(),
            ids: HashMap::new(),
        };
        for (i, line) in text.lines().enumerate() {
            let tok = line.trim();
            if tok.is_empty() || tok.contains(char::is_whitespace) {
                return Err(Error::Parse {
                    path: path.to_path_buf(),
                    line: i + 1,
                    msg: format!("invalid token {line:?}"),
                });
            }
            if i < RESERVED.len() && tok != RESERVED[i] {
                return Err(Error::Parse {
                    path: path.to_path_buf(),
                    line: i + 1,
                    msg: format!("expected reserved token {}, found {tok}", RESERVED[i]),
                });
            }
            if v.ids.contains_key(tok) {
                return Err(Error::Parse {
                    path: path.to_path_buf(),
                    line: i + 1,
                    msg: format!("duplicate token {tok}"),
                });
            }
            v.push(tok);
        }
        if v.len() < RESERVED.len() {
            return Err(Error::Parse {
                path: path.to_path_buf(),
                line: v.len() + 1,
                msg: "vocabulary must start with the four reserved tokens".into(),
            });
        }
        Ok(v)
    }
}
