use super::{Denoiser, DenoiserOutput};
use crate::diffusion::SequenceState;
use crate::error::{Error, Result};
use crate::vocab::TokenId;

/// Largest support the oracle will enumerate.
pub const MAX_SUPPORT: usize = 1_000_000;

/// Exact `p(x0 | x_t)` for an explicitly enumerated data distribution over
/// fixed-length sequences.
///
/// Conditioning keeps the support entries that agree with every unmasked
/// position of `x_t` (prompt included); each response row is the marginal of
/// that posterior at its position.
#[derive(Debug, Clone)]
pub struct OracleDenoiser {
    support: Vec<(Vec<TokenId>, f64)>,
    seq_len: usize,
    vocab_size: usize,
    mask_id: TokenId,
}

impl OracleDenoiser {
    /// `weights` need not be normalized.
    pub fn new(
        support: Vec<(Vec<TokenId>, f64)>,
        vocab_size: usize,
        mask_id: TokenId,
    ) -> Result<Self> {
        if support.is_empty() {
            return Err(Error::Empty("oracle support"));
        }
        if support.len() > MAX_SUPPORT {
            return Err(Error::invalid(format!(
                "support of {} sequences exceeds the enumeration limit {MAX_SUPPORT}",
                support.len()
            )));
        }
        let seq_len = support[0].0.len();
        let mut total = 0.0;
        for (i, (seq, w)) in support.iter().enumerate() {
            if seq.len() != seq_len {
                return Err(Error::BadExample {
                    index: i,
                    message: format!("length {} differs from {seq_len}", seq.len()),
                });
            }
            if !(w.is_finite() && *w >= 0.0) {
                return Err(Error::BadExample {
                    index: i,
                    message: format!("weight {w} is not a finite nonnegative number"),
                });
            }
            if let Some(p) = seq
                .iter()
                .position(|&t| t == mask_id || t.index() >= vocab_size)
            {
                return Err(Error::BadExample {
                    index: i,
                    message: format!("invalid token at position {p}"),
                });
            }
            total += w;
        }
        if total <= 0.0 {
            return Err(Error::invalid("oracle weights sum to zero"));
        }
        let support = support.into_iter().map(|(s, w)| (s, w / total)).collect();
        Ok(Self {
            support,
            seq_len,
            vocab_size,
            mask_id,
        })
    }

    pub fn support(&self) -> &[(Vec<TokenId>, f64)] {
        &self.support
    }

    pub fn seq_len(&self) -> usize {
        self.seq_len
    }
}

impl Denoiser for OracleDenoiser {
    fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    fn mask_id(&self) -> TokenId {
        self.mask_id
    }

    fn max_positions(&self) -> usize {
        self.seq_len
    }

    fn score(&self, state: &SequenceState) -> Result<DenoiserOutput> {
        if state.tokens.len() != self.seq_len {
            return Err(Error::Denoiser(format!(
                "oracle covers length {}, state has {}",
                self.seq_len,
                state.tokens.len()
            )));
        }
        let n = state.response_len();
        let v = self.vocab_size;
        let mut mass = vec![0.0; n * v];
        let mut total = 0.0;
        for (seq, w) in &self.support {
            let consistent = seq
                .iter()
                .zip(&state.tokens)
                .all(|(&a, &b)| b == self.mask_id || a == b);
            if !consistent {
                continue;
            }
            total += w;
            for (i, &tok) in seq[state.condition_len..].iter().enumerate() {
                mass[i * v + tok.index()] += w;
            }
        }
        if total == 0.0 {
            return Err(Error::Denoiser(
                "state has zero probability under the oracle".into(),
            ));
        }
        let log_probs = mass
            .into_iter()
            .map(|m| {
                if m > 0.0 {
                    (m / total).ln()
                } else {
                    f64::NEG_INFINITY
                }
            })
            .collect();
        DenoiserOutput::new(v, log_probs)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MASK: TokenId = TokenId(1);
    const A: TokenId = TokenId(3);
    const B: TokenId = TokenId(4);

    fn ab_ba() -> OracleDenoiser {
        OracleDenoiser::new(vec![(vec![A, B], 0.5), (vec![B, A], 0.5)], 5, MASK).unwrap()
    }

    #[test]
    fn partially_observed_pair() {
        let o = ab_ba();
        let st = SequenceState {
            tokens: vec![A, MASK],
            condition_len: 0,
            t: 1,
        };
        let out = o.score(&st).unwrap();
        assert_eq!(out.log_prob(1, B), 0.0);
        assert_eq!(out.log_prob(1, A), f64::NEG_INFINITY);
        out.validate(MASK, 1e-12).unwrap();
    }

    #[test]
    fn fully_unmasked_is_point_mass() {
        let o = ab_ba();
        let st = SequenceState {
            tokens: vec![B, A],
            condition_len: 0,
            t: 0,
        };
        let out = o.score(&st).unwrap();
        assert_eq!(out.log_prob(0, B), 0.0);
        assert_eq!(out.log_prob(1, A), 0.0);
    }

    #[test]
    fn fully_masked_gives_marginals() {
        let o = OracleDenoiser::new(vec![(vec![A, B], 0.75), (vec![A, A], 0.25)], 5, MASK).unwrap();
        let st = SequenceState {
            tokens: vec![MASK, MASK],
            condition_len: 0,
            t: 2,
        };
        let out = o.score(&st).unwrap();
        assert!((out.log_prob(0, A)).abs() < 1e-15);
        assert!((out.log_prob(1, B).exp() - 0.75).abs() < 1e-15);
    }

    #[test]
    fn inconsistent_state_and_bad_support_are_errors() {
        let o = ab_ba();
        let st = SequenceState {
            tokens: vec![A, A],
            condition_len: 0,
            t: 0,
        };
        assert!(o.score(&st).is_err());
        assert!(OracleDenoiser::new(vec![(vec![MASK], 1.0)], 5, MASK).is_err());
        assert!(OracleDenoiser::new(vec![], 5, MASK).is_err());
    }
}
