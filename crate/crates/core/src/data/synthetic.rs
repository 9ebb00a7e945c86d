//! Deterministic toy tasks with exact references.

use std::collections::HashSet;
use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Example, Tokenizer, TokenizerMode};
use crate::error::{Error, Result};
use crate::exec::mix_seed;
use crate::vocab::{TokenId, Vocab};

const SYMBOLS: &str = "0123456789abcdefghijklmnopqrstuvwxyzABCDEFGHIJKLMNOPQRSTUVWXYZ";
const SPECIALS: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SyntheticTask {
    Copy,
    Reverse,
    CipherTranslate,
    SortedDigits,
}

impl fmt::Display for SyntheticTask {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SyntheticTask::Copy => "copy",
            SyntheticTask::Reverse => "reverse",
            SyntheticTask::CipherTranslate => "cipher-translate",
            SyntheticTask::SortedDigits => "sorted-digits",
        })
    }
}

impl FromStr for SyntheticTask {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "copy" => Ok(SyntheticTask::Copy),
            "reverse" => Ok(SyntheticTask::Reverse),
            "cipher-translate" | "cipher" => Ok(SyntheticTask::CipherTranslate),
            "sorted-digits" => Ok(SyntheticTask::SortedDigits),
            other => Err(Error::invalid(format!("unknown synthetic task '{other}'"))),
        }
    }
}

/// `vocab_size` counts every token, the three specials included.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub task: SyntheticTask,
    pub vocab_size: usize,
    pub min_len: usize,
    pub max_len: usize,
    pub seed: u64,
    pub train_size: usize,
    pub test_size: usize,
    pub max_positions: usize,
}

/// A fixed permutation of the payload symbols.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Cipher {
    forward: Vec<usize>,
}

impl Cipher {
    pub fn random(symbols: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut forward: Vec<usize> = (0..symbols).collect();
        for i in (1..symbols).rev() {
            let j = rng.gen_range(0..=i as u32) as usize;
            forward.swap(i, j);
        }
        Self { forward }
    }

    pub fn apply(&self, symbol: usize) -> usize {
        self.forward[symbol]
    }

    pub fn inverse(&self) -> Cipher {
        let mut back = vec![0; self.forward.len()];
        for (i, &j) in self.forward.iter().enumerate() {
            back[j] = i;
        }
        Cipher { forward: back }
    }
}

/// Generated splits plus the tokenizer that spells them.
#[derive(Debug, Clone)]
pub struct SyntheticData {
    pub spec: SyntheticSpec,
    pub tokenizer: Tokenizer,
    pub cipher: Cipher,
    pub train: Vec<Example>,
    pub test: Vec<Example>,
}

impl SyntheticSpec {
    fn symbols(&self) -> usize {
        self.vocab_size.saturating_sub(SPECIALS)
    }

    fn validate(&self) -> Result<()> {
        let s = self.symbols();
        if s < 2 {
            return Err(Error::invalid(
                "synthetic tasks need at least two payload symbols",
            ));
        }
        let limit = if self.task == SyntheticTask::SortedDigits {
            10
        } else {
            SYMBOLS.len()
        };
        if s > limit {
            return Err(Error::invalid(format!(
                "{} supports at most {limit} payload symbols",
                self.task
            )));
        }
        if self.min_len == 0 || self.min_len > self.max_len {
            return Err(Error::invalid(format!(
                "invalid length range {}..={}",
                self.min_len, self.max_len
            )));
        }
        if 2 * self.max_len + 1 > self.max_positions {
            return Err(Error::TooLong {
                len: 2 * self.max_len + 1,
                max: self.max_positions,
            });
        }
        let distinct: f64 = (self.min_len..=self.max_len)
            .map(|l| (s as f64).powi(l as i32))
            .sum();
        let wanted = (self.train_size + self.test_size) as f64;
        if wanted > 0.5 * distinct {
            return Err(Error::invalid(format!(
                "{wanted} examples requested but only {distinct} distinct payloads exist"
            )));
        }
        Ok(())
    }

    pub fn vocab(&self) -> Result<Vocab> {
        Vocab::with_specials(SYMBOLS.chars().take(self.symbols()).map(String::from))
    }

    pub fn cipher(&self) -> Cipher {
        Cipher::random(self.symbols(), mix_seed(self.seed, 0xC1_F3E5))
    }

    fn target(&self, cipher: &Cipher, payload: &[usize]) -> Vec<usize> {
        match self.task {
            SyntheticTask::Copy => payload.to_vec(),
            SyntheticTask::Reverse => payload.iter().rev().copied().collect(),
            SyntheticTask::CipherTranslate => payload.iter().map(|&s| cipher.apply(s)).collect(),
            SyntheticTask::SortedDigits => {
                let mut v = payload.to_vec();
                v.sort_unstable();
                v
            }
        }
    }

    fn draw_payload(&self, rng: &mut ChaCha8Rng) -> Vec<usize> {
        let len = rng.gen_range(self.min_len as u32..=self.max_len as u32) as usize;
        (0..len)
            .map(|_| rng.gen_range(0..self.symbols() as u32) as usize)
            .collect()
    }

    fn example(&self, cipher: &Cipher, payload: &[usize]) -> Example {
        let id = |s: usize| TokenId((s + SPECIALS) as u32);
        let mut prompt: Vec<TokenId> = payload.iter().map(|&s| id(s)).collect();
        prompt.push(TokenId(2));
        let response = self.target(cipher, payload).into_iter().map(id).collect();
        Example { prompt, response }
    }

    /// Draw `count` further examples whose payloads avoid `exclude`, from a
    /// stream independent of the train/test draw.
    pub fn extra_examples(
        &self,
        count: usize,
        salt: u64,
        exclude: &[Example],
    ) -> Result<Vec<Example>> {
        self.validate()?;
        let cipher = self.cipher();
        let mut seen: HashSet<Vec<TokenId>> =
            exclude.iter().map(|e| e.payload().to_vec()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(self.seed, salt));
        let mut out = Vec::with_capacity(count);
        let mut attempts = 0usize;
        while out.len() < count {
            attempts += 1;
            if attempts > 100 * (count + 10) {
                return Err(Error::invalid("could not draw enough distinct payloads"));
            }
            let payload = self.draw_payload(&mut rng);
            let ex = self.example(&cipher, &payload);
            if seen.insert(ex.payload().to_vec()) {
                out.push(ex);
            }
        }
        Ok(out)
    }
}

/// Build disjoint train and test splits. Test payloads are drawn first;
/// every payload appears at most once across both splits.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<SyntheticData> {
    spec.validate()?;
    let vocab = spec.vocab()?;
    let cipher = spec.cipher();
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut seen = HashSet::new();
    let mut all = Vec::with_capacity(spec.train_size + spec.test_size);
    while all.len() < spec.train_size + spec.test_size {
        let payload = spec.draw_payload(&mut rng);
        if seen.insert(payload.clone()) {
            all.push(spec.example(&cipher, &payload));
        }
    }
    let train = all.split_off(spec.test_size);
    Ok(SyntheticData {
        spec: *spec,
        tokenizer: Tokenizer::new(vocab, TokenizerMode::Char),
        cipher,
        train,
        test: all,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::validate_examples;

    fn spec(task: SyntheticTask) -> SyntheticSpec {
        SyntheticSpec {
            task,
            vocab_size: 13,
            min_len: 3,
            max_len: 6,
            seed: 9,
            train_size: 200,
            test_size: 50,
            max_positions: 13,
        }
    }

    #[test]
    fn splits_are_disjoint_valid_and_reproducible() {
        for task in [
            SyntheticTask::Copy,
            SyntheticTask::Reverse,
            SyntheticTask::CipherTranslate,
            SyntheticTask::SortedDigits,
        ] {
            let a = generate_synthetic(&spec(task)).unwrap();
            let b = generate_synthetic(&spec(task)).unwrap();
            assert_eq!(a.train, b.train);
            assert_eq!(a.test, b.test);
            assert_eq!((a.train.len(), a.test.len()), (200, 50));
            let test: HashSet<_> = a.test.iter().map(|e| e.payload().to_vec()).collect();
            assert!(a.train.iter().all(|e| !test.contains(e.payload())));
            validate_examples(&a.train, a.tokenizer.vocab(), 13).unwrap();
            validate_examples(&a.test, a.tokenizer.vocab(), 13).unwrap();
        }
    }

    #[test]
    fn fixed_seed_gives_fixed_first_example() {
        let d = generate_synthetic(&spec(SyntheticTask::Reverse)).unwrap();
        let text = d.tokenizer.detokenize(d.test[0].payload()).unwrap();
        let rev = d.tokenizer.detokenize(&d.test[0].response).unwrap();
        assert_eq!(rev, text.chars().rev().collect::<String>());
        // Pinned so that generator changes are noticed.
        assert_eq!(text, "19368");
    }

    #[test]
    fn reverse_of_palindrome_is_identity() {
        let s = spec(SyntheticTask::Reverse);
        let p = [1, 2, 3, 2, 1];
        assert_eq!(s.target(&s.cipher(), &p), p);
    }

    #[test]
    fn cipher_inverse_is_identity() {
        let c = Cipher::random(10, 4);
        let inv = c.inverse();
        for s in 0..10 {
            assert_eq!(inv.apply(c.apply(s)), s);
        }
    }

    #[test]
    fn capacity_and_range_errors() {
        let mut s = spec(SyntheticTask::Copy);
        s.max_positions = 12;
        assert!(generate_synthetic(&s).is_err());
        let mut s = spec(SyntheticTask::Copy);
        s.min_len = 7;
        assert!(generate_synthetic(&s).is_err());
        let mut s = spec(SyntheticTask::SortedDigits);
        s.vocab_size = 20;
        assert!(generate_synthetic(&s).is_err());
    }

    #[test]
    fn extra_examples_avoid_excluded_payloads() {
        let d = generate_synthetic(&spec(SyntheticTask::CipherTranslate)).unwrap();
        let extra = d.spec.extra_examples(100, 77, &d.test).unwrap();
        let test: HashSet<_> = d.test.iter().map(|e| e.payload().to_vec()).collect();
        assert!(extra.iter().all(|e| !test.contains(e.payload())));
        assert_eq!(extra[0].response.len(), extra[0].payload().len());
    }
}
