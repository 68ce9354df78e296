//! Tokenisation and the token/id map.
//!
//! Reserved ids are fixed: PAD=0, BOS=1, EOS=2, UNK=3, NUM=4, ENG=5.
//! Runs of ASCII digits become NUM. When the target script is Han, runs of
//! ASCII letters become ENG. Reserved tokens decode to `<pad>`, `<bos>`,
//! `<eos>`, `<unk>`, `<num>`, `<eng>` and those literals encode back to
//! the same ids. In character mode `<` is never a vocabulary entry (it maps
//! to UNK), so no concatenation of ordinary tokens can spell a marker.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use super::{DataError, Result};

pub const PAD: usize = 0;
pub const BOS: usize = 1;
pub const EOS: usize = 2;
pub const UNK: usize = 3;
pub const NUM: usize = 4;
pub const ENG: usize = 5;
pub const RESERVED: [&str; 6] = ["<pad>", "<bos>", "<eos>", "<unk>", "<num>", "<eng>"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum TokenMode {
    #[default]
    Char,
    Word,
}

/// Script the comments are expected to be written in.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Script {
    /// Keep every script as-is.
    #[default]
    Any,
    /// CJK text; Latin words become ENG.
    Han,
}

#[derive(Debug, Clone, PartialEq, Eq)]
enum Piece {
    Reserved(usize),
    Token(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
pub struct Tokenizer {
    pub mode: TokenMode,
    pub script: Script,
}

impl Tokenizer {
    pub fn new(mode: TokenMode, script: Script) -> Self {
        Self { mode, script }
    }

    fn pieces(&self, text: &str) -> Vec<Piece> {
        match self.mode {
            TokenMode::Char => self.char_pieces(text),
            TokenMode::Word => text.split_whitespace().map(|w| self.word_piece(w)).collect(),
        }
    }

    fn word_piece(&self, w: &str) -> Piece {
        if let Some(id) = RESERVED.iter().position(|m| *m == w) {
            Piece::Reserved(id)
        } else if w.chars().all(|c| c.is_ascii_digit()) {
            Piece::Reserved(NUM)
        } else if self.script == Script::Han && w.chars().all(|c| c.is_ascii_alphabetic()) {
            Piece::Reserved(ENG)
        } else {
            Piece::Token(w.to_string())
        }
    }

    fn char_pieces(&self, text: &str) -> Vec<Piece> {
        let chars: Vec<(usize, char)> = text.char_indices().collect();
        let mut out = Vec::new();
        let mut i = 0;
        while i < chars.len() {
            let (at, c) = chars[i];
            if c == '<' {
                if let Some(id) = RESERVED.iter().position(|m| text[at..].starts_with(m)) {
                    out.push(Piece::Reserved(id));
                    i += RESERVED[id].chars().count();
                } else {
                    out.push(Piece::Reserved(UNK));
                    i += 1;
                }
                continue;
            }
            let run = |pred: fn(&char) -> bool| chars[i..].iter().take_while(|(_, c)| pred(c)).count();
            if c.is_ascii_digit() {
                out.push(Piece::Reserved(NUM));
                i += run(char::is_ascii_digit);
            } else if self.script == Script::Han && c.is_ascii_alphabetic() {
                out.push(Piece::Reserved(ENG));
                i += run(char::is_ascii_alphabetic);
            } else {
                out.push(Piece::Token(c.to_string()));
                i += 1;
            }
        }
        out
    }

    /// Token strings of `text`; reserved pieces appear as their markers.
    pub fn tokens(&self, text: &str) -> Vec<String> {
        self.pieces(text)
            .into_iter()
            .map(|p| match p {
                Piece::Reserved(id) => RESERVED[id].to_string(),
                Piece::Token(s) => s,
            })
            .collect()
    }

    /// Number of tokens `text` encodes to.
    pub fn count(&self, text: &str) -> usize {
        self.pieces(text).len()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Vocabulary {
    tokenizer: Tokenizer,
    /// Non-reserved tokens; token `tokens[i]` has id `RESERVED.len() + i`.
    tokens: Vec<String>,
    #[serde(skip)]
    index: HashMap<String, usize>,
}

impl Vocabulary {
    /// Tokens ordered by descending frequency, ties broken lexicographically.
    pub fn build<'a>(texts: impl IntoIterator<Item = &'a str>, tokenizer: Tokenizer) -> Result<Self> {
        let mut counts: HashMap<String, usize> = HashMap::new();
        let mut any = false;
        for t in texts {
            any = true;
            for p in tokenizer.pieces(t) {
                if let Piece::Token(s) = p {
                    *counts.entry(s).or_default() += 1;
                }
            }
        }
        if !any {
            return Err(DataError::EmptyCorpus);
        }
        let mut ranked: Vec<(String, usize)> = counts.into_iter().collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        Ok(Self::from_tokens(ranked.into_iter().map(|(s, _)| s).collect(), tokenizer))
    }

    pub fn from_tokens(tokens: Vec<String>, tokenizer: Tokenizer) -> Self {
        let index = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), RESERVED.len() + i))
            .collect();
        Self {
            tokenizer,
            tokens,
            index,
        }
    }

    pub fn tokenizer(&self) -> Tokenizer {
        self.tokenizer
    }

    pub fn len(&self) -> usize {
        RESERVED.len() + self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn id(&self, token: &str) -> Option<usize> {
        RESERVED
            .iter()
            .position(|m| *m == token)
            .or_else(|| self.index.get(token).copied())
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        if id < RESERVED.len() {
            Some(RESERVED[id])
        } else {
            self.tokens.get(id - RESERVED.len()).map(String::as_str)
        }
    }

    pub fn encode(&self, text: &str) -> Vec<usize> {
        self.tokenizer
            .pieces(text)
            .into_iter()
            .map(|p| match p {
                Piece::Reserved(id) => id,
                Piece::Token(s) => self.index.get(&s).copied().unwrap_or(UNK),
            })
            .collect()
    }

    pub fn decode(&self, ids: &[usize]) -> String {
        let parts = ids.iter().map(|&i| self.token(i).unwrap_or(RESERVED[UNK]));
        match self.tokenizer.mode {
            TokenMode::Char => parts.collect(),
            TokenMode::Word => parts.collect::<Vec<_>>().join(" "),
        }
    }

    /// Human-facing text: stops at EOS and drops PAD/BOS.
    pub fn render(&self, ids: &[usize]) -> String {
        let body: Vec<usize> = ids
            .iter()
            .copied()
            .take_while(|&i| i != EOS)
            .filter(|&i| i != PAD && i != BOS)
            .collect();
        self.decode(&body)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("vocabulary serialises")
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let v: Vocabulary =
            serde_json::from_str(s).map_err(|e| DataError::Invalid(format!("vocabulary: {e}")))?;
        Ok(Self::from_tokens(v.tokens, v.tokenizer))
    }
}
