//! Target-length prediction and length-beam decoding.

use std::sync::Arc;

use crate::denoiser::{log_sum_exp, Denoiser, TransformerDenoiser};
use crate::diffusion::{generate, DecodeMode, Generation};
use crate::error::{Error, Result};
use crate::exec::{stream_rng, Exec};
use crate::nn::{AttnLayout, Float, Graph};
use crate::schedule::NoiseSchedule;
use crate::vocab::TokenId;

/// Log-probabilities over lengths `1..=max_len()`.
#[derive(Debug, Clone, PartialEq)]
pub struct LengthDistribution {
    log_probs: Vec<f64>,
    /// False when the head producing this has never been trained.
    pub head_trained: bool,
}

impl LengthDistribution {
    pub fn new(log_probs: Vec<f64>, head_trained: bool) -> Result<Self> {
        if log_probs.is_empty() {
            return Err(Error::Empty("length classes"));
        }
        let z = log_sum_exp(&log_probs);
        if !z.is_finite() || z.abs() > 1e-6 {
            return Err(Error::invalid(format!(
                "length log-probabilities sum to exp({z})"
            )));
        }
        Ok(Self {
            log_probs,
            head_trained,
        })
    }

    pub fn max_len(&self) -> usize {
        self.log_probs.len()
    }

    pub fn log_probs(&self) -> &[f64] {
        &self.log_probs
    }

    pub fn log_prob(&self, len: usize) -> f64 {
        match len {
            0 => f64::NEG_INFINITY,
            l if l <= self.log_probs.len() => self.log_probs[l - 1],
            _ => f64::NEG_INFINITY,
        }
    }

    /// Restrict to lengths `1..=capacity` and renormalize.
    pub fn truncate(&self, capacity: usize) -> Result<Self> {
        let keep = &self.log_probs[..capacity.min(self.log_probs.len())];
        if keep.is_empty() {
            return Err(Error::invalid("no length fits the remaining capacity"));
        }
        let z = log_sum_exp(keep);
        if !z.is_finite() {
            return Err(Error::invalid(
                "no probability mass on lengths within capacity",
            ));
        }
        Self::new(keep.iter().map(|lp| lp - z).collect(), self.head_trained)
    }

    /// The `k` most probable lengths, most probable first; equal
    /// probabilities favor the shorter length.
    pub fn top_k(&self, k: usize) -> Vec<usize> {
        let mut lens: Vec<usize> = (1..=self.log_probs.len()).collect();
        lens.sort_by(|&a, &b| {
            self.log_prob(b)
                .total_cmp(&self.log_prob(a))
                .then(a.cmp(&b))
        });
        lens.truncate(k);
        lens
    }

    pub fn argmax(&self) -> usize {
        self.top_k(1)[0]
    }
}

/// Score the prompt followed by one `[MASK]` with the model's length head.
/// The distribution is truncated to the lengths that still fit.
pub fn predict_length<F: Float>(
    prompt: &[TokenId],
    model: &TransformerDenoiser<F>,
    head_trained: bool,
) -> Result<LengthDistribution> {
    let mut seq = prompt.to_vec();
    seq.push(model.mask_id());
    let mut g = Graph::new();
    let fwd = model.forward(&mut g, &[&seq])?;
    let layout = Arc::new(AttnLayout::packed(&[seq.len()]));
    let lp = model.length_log_probs(&mut g, fwd.hidden, &layout)?;
    let row: Vec<f64> = g.value(lp).data().iter().map(|x| x.as_f64()).collect();
    let capacity = model.max_positions() - prompt.len();
    LengthDistribution::new(row, head_trained)?.truncate(capacity)
}

#[derive(Debug, Clone, PartialEq)]
pub struct BeamCandidate {
    pub length: usize,
    pub tokens: Vec<TokenId>,
    /// Mean log-probability of the generated tokens at the steps that
    /// committed them.
    pub token_score: f64,
    /// Log-probability of this length under the length head, or 0 when the
    /// lengths were supplied directly.
    pub length_log_prob: f64,
    /// Ranking key: `token_score + length_log_prob`.
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BeamSearch {
    /// Index into `candidates` of the selected beam.
    pub best: usize,
    /// One candidate per decoded length, in the order the lengths were given.
    pub candidates: Vec<BeamCandidate>,
    /// Full decode of the selected beam.
    pub generation: Generation,
}

impl BeamSearch {
    pub fn best(&self) -> &BeamCandidate {
        &self.candidates[self.best]
    }
}

/// Decode one candidate per length and keep the best by score (ties go to
/// the shorter length). With a `prior`, each candidate's mean token
/// log-probability is offset by the log-probability of its length. Beam `L`
/// draws from
/// `stream_rng(seed, L)`, so a candidate does not depend on which other
/// lengths are decoded or in what order. Lengths that do not fit are
/// skipped with a warning.
#[allow(clippy::too_many_arguments)]
pub fn decode_lengths<D: Denoiser + ?Sized>(
    prompt: &[TokenId],
    lengths: &[usize],
    prior: Option<&LengthDistribution>,
    denoiser: &D,
    schedule: &NoiseSchedule,
    mode: DecodeMode,
    seed: u64,
    exec: Exec,
) -> Result<BeamSearch> {
    let capacity = denoiser.max_positions().saturating_sub(prompt.len());
    let mut fitting = Vec::new();
    for &l in lengths {
        if l == 0 || l > capacity {
            log::warn!("dropping length beam {l}: capacity is {capacity}");
        } else if !fitting.contains(&l) {
            fitting.push(l);
        }
    }
    if fitting.is_empty() {
        return Err(Error::invalid(format!(
            "none of the {} requested lengths fits the remaining capacity {capacity}",
            lengths.len()
        )));
    }
    let gens = exec.try_map_range(fitting.len(), |i| {
        let mut rng = stream_rng(seed, fitting[i] as u64);
        generate(prompt, fitting[i], denoiser, schedule, mode, &mut rng)
    })?;
    let candidates: Vec<BeamCandidate> = gens
        .iter()
        .zip(&fitting)
        .map(|(g, &length)| {
            let length_log_prob = prior.map_or(0.0, |p| p.log_prob(length));
            BeamCandidate {
                length,
                tokens: g.tokens.clone(),
                token_score: g.score(),
                length_log_prob,
                score: g.score() + length_log_prob,
            }
        })
        .collect();
    let mut best = 0;
    for (i, c) in candidates.iter().enumerate().skip(1) {
        let b = &candidates[best];
        if c.score > b.score || (c.score == b.score && c.length < b.length) {
            best = i;
        }
    }
    let generation = gens.into_iter().nth(best).expect("best index is in range");
    Ok(BeamSearch {
        best,
        candidates,
        generation,
    })
}

/// Predict lengths with the model's head and decode its `k_beams` most
/// probable lengths.
#[allow(clippy::too_many_arguments)]
pub fn length_beam_generate<F: Float>(
    prompt: &[TokenId],
    model: &TransformerDenoiser<F>,
    schedule: &NoiseSchedule,
    k_beams: usize,
    mode: DecodeMode,
    seed: u64,
    head_trained: bool,
    exec: Exec,
) -> Result<BeamSearch> {
    if k_beams == 0 {
        return Err(Error::invalid("length beams must be at least 1"));
    }
    let dist = predict_length(prompt, model, head_trained)?;
    if !dist.head_trained {
        log::warn!("length head is untrained; predictions are arbitrary");
    }
    decode_lengths(
        prompt,
        &dist.top_k(k_beams),
        Some(&dist),
        model,
        schedule,
        mode,
        seed,
        exec,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::denoiser::{LengthHeadConfig, TransformerConfig};

    fn model() -> TransformerDenoiser<f64> {
        let cfg = TransformerConfig {
            layers: 1,
            heads: 2,
            model_dim: 8,
            ff_dim: 16,
            max_positions: 10,
            vocab_size: 6,
        };
        TransformerDenoiser::new(
            cfg,
            Some(LengthHeadConfig {
                classes: 8,
                ff_dim: 8,
            }),
            TokenId(1),
            TokenId(0),
            5,
        )
        .unwrap()
    }

    #[test]
    fn prediction_is_normalized_and_truncated() {
        let m = model();
        for prompt in [vec![3, 4, 2], vec![5, 5, 5, 5, 3, 2]] {
            let p: Vec<TokenId> = prompt.into_iter().map(TokenId).collect();
            let d = predict_length(&p, &m, false).unwrap();
            assert_eq!(d.max_len(), 8.min(10 - p.len()));
            assert!(log_sum_exp(d.log_probs()).abs() < 1e-9);
            assert!(!d.head_trained);
        }
    }

    #[test]
    fn top_k_orders_by_probability_then_length() {
        let lp = [0.1f64, 0.4, 0.1, 0.4].map(f64::ln).to_vec();
        let d = LengthDistribution::new(lp, true).unwrap();
        assert_eq!(d.top_k(4), vec![2, 4, 1, 3]);
        assert_eq!(d.argmax(), 2);
        assert_eq!(d.top_k(10).len(), 4);
    }

    #[test]
    fn truncate_renormalizes() {
        let lp = [0.5f64, 0.25, 0.25].map(f64::ln).to_vec();
        let d = LengthDistribution::new(lp, true)
            .unwrap()
            .truncate(2)
            .unwrap();
        assert!((d.log_prob(1).exp() - 2.0 / 3.0).abs() < 1e-12);
        assert!(LengthDistribution::new(vec![0.0], true)
            .unwrap()
            .truncate(0)
            .is_err());
    }

    #[test]
    fn single_beam_matches_plain_generation() {
        let m = model();
        let prompt = [TokenId(3), TokenId(2)];
        let s = NoiseSchedule::linear(6).unwrap();
        let beams =
            length_beam_generate(&prompt, &m, &s, 1, DecodeMode::Topk, 3, false, Exec::Serial)
                .unwrap();
        let len = predict_length(&prompt, &m, false).unwrap().argmax();
        let direct = generate(
            &prompt,
            len,
            &m,
            &s,
            DecodeMode::Topk,
            &mut stream_rng(3, len as u64),
        )
        .unwrap();
        assert_eq!(beams.best().tokens, direct.tokens);
        assert_eq!(beams.generation, direct);
    }

    #[test]
    fn over_capacity_lengths_dropped_unless_all() {
        let m = model();
        let prompt = [TokenId(3), TokenId(2)];
        let s = NoiseSchedule::linear(4).unwrap();
        let r = decode_lengths(
            &prompt,
            &[3, 20],
            None,
            &m,
            &s,
            DecodeMode::Topk,
            0,
            Exec::Serial,
        )
        .unwrap();
        assert_eq!(r.candidates.len(), 1);
        assert!(decode_lengths(
            &prompt,
            &[9, 20],
            None,
            &m,
            &s,
            DecodeMode::Topk,
            0,
            Exec::Serial
        )
        .is_err());
    }

    #[test]
    fn selection_and_order_invariance() {
        let m = model();
        let prompt = [TokenId(4), TokenId(2)];
        let s = NoiseSchedule::linear(5).unwrap();
        let a = decode_lengths(
            &prompt,
            &[2, 5, 3],
            None,
            &m,
            &s,
            DecodeMode::Topk,
            1,
            Exec::Serial,
        )
        .unwrap();
        let b = decode_lengths(
            &prompt,
            &[3, 2, 5],
            None,
            &m,
            &s,
            DecodeMode::Topk,
            1,
            Exec::Parallel,
        )
        .unwrap();
        assert_eq!(a.best().tokens, b.best().tokens);
        for c in &a.candidates {
            assert!(a.best().score >= c.score);
            assert!(b.candidates.contains(c));
        }
    }
}
