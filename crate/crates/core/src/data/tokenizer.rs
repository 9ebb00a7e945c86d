use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::vocab::{TokenId, Vocab};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TokenizerMode {
    /// One token per Unicode scalar value.
    #[default]
    Char,
    /// Tokens are maximal runs of non-space characters.
    Whitespace,
}

impl fmt::Display for TokenizerMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            TokenizerMode::Char => "char",
            TokenizerMode::Whitespace => "whitespace",
        })
    }
}

impl FromStr for TokenizerMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "char" => Ok(TokenizerMode::Char),
            "whitespace" => Ok(TokenizerMode::Whitespace),
            other => Err(Error::invalid(format!("unknown tokenizer mode '{other}'"))),
        }
    }
}

/// Closed-vocabulary tokenizer. There is no unknown token: symbols outside
/// the vocabulary are errors.
#[derive(Debug, Clone, PartialEq)]
pub struct Tokenizer {
    vocab: Vocab,
    mode: TokenizerMode,
}

impl TokenizerMode {
    /// Split `text` into symbols without consulting a vocabulary.
    pub fn split(self, text: &str) -> Vec<&str> {
        pieces(text, self)
    }
}

fn pieces(text: &str, mode: TokenizerMode) -> Vec<&str> {
    match mode {
        TokenizerMode::Char => text
            .char_indices()
            .map(|(i, c)| &text[i..i + c.len_utf8()])
            .collect(),
        TokenizerMode::Whitespace => text.split(' ').filter(|w| !w.is_empty()).collect(),
    }
}

impl Tokenizer {
    pub fn new(vocab: Vocab, mode: TokenizerMode) -> Self {
        Self { vocab, mode }
    }

    /// Build a vocabulary (specials first, then symbols in sorted order) from
    /// every symbol seen in `texts`.
    pub fn fit<'a, I>(texts: I, mode: TokenizerMode) -> Result<Self>
    where
        I: IntoIterator<Item = &'a str>,
    {
        let mut symbols = BTreeSet::new();
        for text in texts {
            symbols.extend(pieces(text, mode).into_iter().map(str::to_string));
        }
        Ok(Self::new(Vocab::with_specials(symbols)?, mode))
    }

    pub fn vocab(&self) -> &Vocab {
        &self.vocab
    }

    pub fn mode(&self) -> TokenizerMode {
        self.mode
    }

    /// String placed between tokens when rendering.
    pub fn joiner(&self) -> &'static str {
        match self.mode {
            TokenizerMode::Char => "",
            TokenizerMode::Whitespace => " ",
        }
    }

    pub fn tokenize(&self, text: &str) -> Result<Vec<TokenId>> {
        pieces(text, self.mode)
            .into_iter()
            .map(|p| match self.vocab.id(p) {
                Some(id) if !self.vocab.is_special(id) => Ok(id),
                _ => Err(Error::UnknownSymbol {
                    symbol: p.to_string(),
                    codepoint: p.chars().next().map_or(0, u32::from),
                }),
            })
            .collect()
    }

    pub fn detokenize(&self, tokens: &[TokenId]) -> Result<String> {
        let parts = tokens
            .iter()
            .map(|&t| {
                self.vocab
                    .token(t)
                    .ok_or_else(|| Error::invalid(format!("token id {t} out of vocabulary")))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(parts.join(self.joiner()))
    }
}
