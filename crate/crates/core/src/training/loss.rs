//! Reference losses on materialized denoiser outputs.

use crate::denoiser::DenoiserOutput;
use crate::error::{Error, Result};
use crate::schedule::NoiseSchedule;
use crate::vocab::TokenId;

/// Label-smoothed negative log-likelihood of `target` in a log-probability
/// row. Smoothing mass is spread uniformly over every column except `mask`.
pub fn smoothed_nll(row: &[f64], target: TokenId, smoothing: f64, mask: TokenId) -> f64 {
    let mut nll = -(1.0 - smoothing) * row[target.index()];
    if smoothing > 0.0 {
        let cols = row.len() - 1;
        let sum: f64 = row
            .iter()
            .enumerate()
            .filter(|&(c, _)| c != mask.index())
            .map(|(_, &lp)| -lp)
            .sum();
        nll += smoothing * sum / cols as f64;
    }
    nll
}

fn check_smoothing(smoothing: f64) -> Result<()> {
    if !(0.0..1.0).contains(&smoothing) {
        return Err(Error::invalid(format!(
            "label smoothing {smoothing} outside [0, 1)"
        )));
    }
    Ok(())
}

/// Positions where `xt` is masked, after checking that every other position
/// agrees with `x0`.
pub fn masked_positions(x0: &[TokenId], xt: &[TokenId], mask: TokenId) -> Result<Vec<usize>> {
    if x0.len() != xt.len() {
        return Err(Error::LengthMismatch {
            left: x0.len(),
            right: xt.len(),
        });
    }
    let mut out = Vec::new();
    for (i, (&a, &b)) in x0.iter().zip(xt).enumerate() {
        if a == mask {
            return Err(Error::MaskInCleanTokens { position: i });
        }
        if b == mask {
            out.push(i);
        } else if a != b {
            return Err(Error::NotAbsorbing { position: i });
        }
    }
    Ok(out)
}

/// Weighted masked cross-entropy for one corrupted response:
/// `loss_weight(t) * sum over masked positions of smoothed -log p(x0_i)`.
/// `output` rows are the response positions.
pub fn rdm_loss(
    output: &DenoiserOutput,
    x0: &[TokenId],
    xt: &[TokenId],
    t: usize,
    schedule: &NoiseSchedule,
    smoothing: f64,
    mask: TokenId,
) -> Result<f64> {
    schedule.check_t(t, 1)?;
    check_smoothing(smoothing)?;
    let masked = masked_positions(x0, xt, mask)?;
    if output.rows() != x0.len() {
        return Err(Error::LengthMismatch {
            left: output.rows(),
            right: x0.len(),
        });
    }
    let sum: f64 = masked
        .iter()
        .map(|&i| smoothed_nll(output.row(i), x0[i], smoothing, mask))
        .sum();
    Ok(schedule.loss_weight(t)? * sum)
}

/// Unweighted masked cross-entropy, the fixed-ratio masked-LM objective.
pub fn mlm_loss(
    output: &DenoiserOutput,
    x0: &[TokenId],
    xt: &[TokenId],
    smoothing: f64,
    mask: TokenId,
) -> Result<f64> {
    check_smoothing(smoothing)?;
    let masked = masked_positions(x0, xt, mask)?;
    if output.rows() != x0.len() {
        return Err(Error::LengthMismatch {
            left: output.rows(),
            right: x0.len(),
        });
    }
    Ok(masked
        .iter()
        .map(|&i| smoothed_nll(output.row(i), x0[i], smoothing, mask))
        .sum())
}
