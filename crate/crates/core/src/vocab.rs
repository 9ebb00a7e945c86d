use std::collections::HashMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct TokenId(pub u32);

impl TokenId {
    #[inline]
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

impl From<usize> for TokenId {
    fn from(i: usize) -> Self {
        TokenId(i as u32)
    }
}

impl fmt::Display for TokenId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

pub const PAD: &str = "[PAD]";
pub const MASK: &str = "[MASK]";
pub const SEP: &str = "[SEP]";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "VocabRepr", into = "VocabRepr")]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, TokenId>,
    mask_id: TokenId,
    pad_id: TokenId,
    sep_id: TokenId,
}

#[derive(Serialize, Deserialize)]
struct VocabRepr {
    tokens: Vec<String>,
    mask_id: TokenId,
    pad_id: TokenId,
    sep_id: TokenId,
}

impl TryFrom<VocabRepr> for Vocab {
    type Error = Error;

    fn try_from(r: VocabRepr) -> Result<Self> {
        Vocab::new(r.tokens, r.mask_id, r.pad_id, r.sep_id)
    }
}

impl From<Vocab> for VocabRepr {
    fn from(v: Vocab) -> Self {
        VocabRepr {
            tokens: v.tokens,
            mask_id: v.mask_id,
            pad_id: v.pad_id,
            sep_id: v.sep_id,
        }
    }
}

impl Vocab {
    pub fn new(
        tokens: Vec<String>,
        mask_id: TokenId,
        pad_id: TokenId,
        sep_id: TokenId,
    ) -> Result<Self> {
        let n = tokens.len();
        for (name, id) in [("mask", mask_id), ("pad", pad_id), ("sep", sep_id)] {
            if id.index() >= n {
                return Err(Error::invalid(format!(
                    "{name} id {id} out of range for {n} tokens"
                )));
            }
        }
        if mask_id == pad_id || mask_id == sep_id || pad_id == sep_id {
            return Err(Error::invalid("special token ids must be distinct"));
        }
        let mut index = HashMap::with_capacity(n);
        for (i, tok) in tokens.iter().enumerate() {
            if index.insert(tok.clone(), TokenId::from(i)).is_some() {
                return Err(Error::invalid(format!("duplicate token {tok:?}")));
            }
        }
        Ok(Self {
            tokens,
            index,
            mask_id,
            pad_id,
            sep_id,
        })
    }

    /// Specials first (`[PAD]`, `[MASK]`, `[SEP]`), then `symbols` in order.
    pub fn with_specials<I, S>(symbols: I) -> Result<Self>
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let mut tokens = vec![PAD.to_string(), MASK.to_string(), SEP.to_string()];
        tokens.extend(symbols.into_iter().map(Into::into));
        Self::new(tokens, TokenId(1), TokenId(0), TokenId(2))
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn mask_id(&self) -> TokenId {
        self.mask_id
    }

    pub fn pad_id(&self) -> TokenId {
        self.pad_id
    }

    pub fn sep_id(&self) -> TokenId {
        self.sep_id
    }

    pub fn is_special(&self, id: TokenId) -> bool {
        id == self.mask_id || id == self.pad_id || id == self.sep_id
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn token(&self, id: TokenId) -> Option<&str> {
        self.tokens.get(id.index()).map(String::as_str)
    }

    pub fn id(&self, token: &str) -> Option<TokenId> {
        self.index.get(token).copied()
    }

    /// Ids of ordinary (non-special) tokens, ascending.
    pub fn content_ids(&self) -> impl Iterator<Item = TokenId> + '_ {
        (0..self.len())
            .map(TokenId::from)
            .filter(move |&id| !self.is_special(id))
    }

    /// Restrict to `keep` (which must contain the specials), preserving order.
    /// Returns the new vocabulary and the new-to-old id table.
    pub fn restrict(&self, keep: &[bool]) -> Result<(Vocab, Vec<TokenId>)> {
        if keep.len() != self.len() {
            return Err(Error::LengthMismatch {
                left: keep.len(),
                right: self.len(),
            });
        }
        for id in [self.mask_id, self.pad_id, self.sep_id] {
            if !keep[id.index()] {
                return Err(Error::invalid(format!(
                    "cannot prune special token {}",
                    self.tokens[id.index()]
                )));
            }
        }
        let old_ids: Vec<TokenId> = (0..self.len())
            .filter(|&i| keep[i])
            .map(TokenId::from)
            .collect();
        let remap = |old: TokenId| TokenId::from(old_ids.iter().position(|&o| o == old).unwrap());
        let tokens = old_ids
            .iter()
            .map(|&o| self.tokens[o.index()].clone())
            .collect();
        let v = Vocab::new(
            tokens,
            remap(self.mask_id),
            remap(self.pad_id),
            remap(self.sep_id),
        )?;
        Ok((v, old_ids))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn specials_are_distinct() {
        let v = Vocab::with_specials(["a", "b"]).unwrap();
        assert_eq!(v.len(), 5);
        assert_eq!(v.id("a"), Some(TokenId(3)));
        assert!(v.is_special(v.mask_id()));
        assert_eq!(v.content_ids().count(), 2);
    }

    #[test]
    fn rejects_duplicates_and_clashes() {
        assert!(Vocab::with_specials(["a", "a"]).is_err());
        let toks = vec!["x".to_string(), "y".to_string()];
        assert!(Vocab::new(toks, TokenId(0), TokenId(0), TokenId(1)).is_err());
    }

    #[test]
    fn serde_round_trip() {
        let v = Vocab::with_specials(["a", "b", "c"]).unwrap();
        let s = serde_json::to_string(&v).unwrap();
        let back: Vocab = serde_json::from_str(&s).unwrap();
        assert_eq!(v, back);
    }

    #[test]
    fn restrict_keeps_specials() {
        let v = Vocab::with_specials(["a", "b", "c"]).unwrap();
        let (r, table) = v.restrict(&[true, true, true, false, true, false]).unwrap();
        assert_eq!(r.tokens(), &["[PAD]", "[MASK]", "[SEP]", "b"]);
        assert_eq!(table, vec![TokenId(0), TokenId(1), TokenId(2), TokenId(4)]);
        assert!(v.restrict(&[true, true, false, true, true, true]).is_err());
    }
}
