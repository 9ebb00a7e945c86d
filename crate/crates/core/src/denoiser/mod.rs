//! The denoiser abstraction `p(x0 | x_t)`.
//!
//! A denoiser receives only the token pattern; it is never told the timestep.
//! The corruption level is visible to it solely through the `[MASK]` tokens.

mod oracle;
mod transformer;

pub use oracle::OracleDenoiser;
pub use transformer::{Forward, LengthHeadConfig, TransformerConfig, TransformerDenoiser};

use crate::diffusion::SequenceState;
use crate::error::{Error, Result};
use crate::vocab::TokenId;

pub trait Denoiser: Sync {
    fn vocab_size(&self) -> usize;

    fn mask_id(&self) -> TokenId;

    /// Longest total sequence (condition plus response) the denoiser accepts.
    fn max_positions(&self) -> usize;

    /// Log-probabilities over clean tokens for every response position.
    fn score(&self, state: &SequenceState) -> Result<DenoiserOutput>;

    fn score_batch(&self, states: &[SequenceState]) -> Result<Vec<DenoiserOutput>> {
        states.iter().map(|s| self.score(s)).collect()
    }
}

impl<D: Denoiser + ?Sized> Denoiser for &D {
    fn vocab_size(&self) -> usize {
        (**self).vocab_size()
    }

    fn mask_id(&self) -> TokenId {
        (**self).mask_id()
    }

    fn max_positions(&self) -> usize {
        (**self).max_positions()
    }

    fn score(&self, state: &SequenceState) -> Result<DenoiserOutput> {
        (**self).score(state)
    }

    fn score_batch(&self, states: &[SequenceState]) -> Result<Vec<DenoiserOutput>> {
        (**self).score_batch(states)
    }
}

/// Per-response-position rows of log-probabilities over the vocabulary.
#[derive(Debug, Clone, PartialEq)]
pub struct DenoiserOutput {
    width: usize,
    log_probs: Vec<f64>,
}

impl DenoiserOutput {
    pub fn new(width: usize, log_probs: Vec<f64>) -> Result<Self> {
        if width == 0 || !log_probs.len().is_multiple_of(width) {
            return Err(Error::ShapeMismatch {
                op: "denoiser output",
                left: vec![log_probs.len()],
                right: vec![width],
            });
        }
        Ok(Self { width, log_probs })
    }

    pub fn from_rows(rows: Vec<Vec<f64>>) -> Result<Self> {
        let width = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != width) {
            return Err(Error::invalid("ragged denoiser rows"));
        }
        Self::new(width.max(1), rows.concat())
    }

    pub fn rows(&self) -> usize {
        self.log_probs.len() / self.width
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.log_probs[i * self.width..(i + 1) * self.width]
    }

    pub fn log_prob(&self, i: usize, token: TokenId) -> f64 {
        self.row(i)[token.index()]
    }

    /// Most probable token of row `i` and its log-probability. Ties go to the
    /// lower token id.
    pub fn argmax(&self, i: usize) -> (TokenId, f64) {
        let mut best = (0usize, f64::NEG_INFINITY);
        for (j, &v) in self.row(i).iter().enumerate() {
            if v > best.1 {
                best = (j, v);
            }
        }
        (TokenId::from(best.0), best.1)
    }

    /// Checks normalization (log-sum-exp within `tol` of zero) and that the
    /// mask column is `-inf`.
    pub fn validate(&self, mask_id: TokenId, tol: f64) -> Result<()> {
        for i in 0..self.rows() {
            let row = self.row(i);
            if row[mask_id.index()] != f64::NEG_INFINITY {
                return Err(Error::Denoiser(format!(
                    "row {i} gives the mask token finite mass"
                )));
            }
            let lse = log_sum_exp(row);
            if (lse).abs() > tol || lse.is_nan() {
                return Err(Error::Denoiser(format!("row {i} log-sum-exp is {lse}")));
            }
        }
        Ok(())
    }

    /// Restrict row `i` to `ids` and renormalize.
    pub fn restricted_row(&self, i: usize, ids: &[TokenId]) -> Vec<f64> {
        let vals: Vec<f64> = ids.iter().map(|&id| self.log_prob(i, id)).collect();
        let lse = log_sum_exp(&vals);
        vals.into_iter().map(|v| v - lse).collect()
    }
}

pub fn log_sum_exp(xs: &[f64]) -> f64 {
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    max + xs.iter().map(|&x| (x - max).exp()).sum::<f64>().ln()
}

/// Denoiser backed by a closure, for scripted and adversarial tests.
pub struct FnDenoiser<F> {
    pub vocab_size: usize,
    pub mask_id: TokenId,
    pub max_positions: usize,
    pub f: F,
}

impl<F> Denoiser for FnDenoiser<F>
where
    F: Fn(&SequenceState) -> Result<DenoiserOutput> + Sync,
{
    fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    fn mask_id(&self) -> TokenId {
        self.mask_id
    }

    fn max_positions(&self) -> usize {
        self.max_positions
    }

    fn score(&self, state: &SequenceState) -> Result<DenoiserOutput> {
        (self.f)(state)
    }
}
