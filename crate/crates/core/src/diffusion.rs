//! Forward corruption, the absorbing-state posterior, ancestral and top-k
//! reverse steps, generation, and the variational-bound estimator.
//!
//! Only the response region of a [`SequenceState`] is ever corrupted or
//! resampled. Positions `0..condition_len` are the prompt and are copied
//! through every operation untouched.

use std::fmt::Write as _;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::denoiser::Denoiser;
use crate::error::{Error, Result};
use crate::schedule::NoiseSchedule;
use crate::vocab::{TokenId, Vocab};

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct SequenceState {
    pub tokens: Vec<TokenId>,
    pub condition_len: usize,
    pub t: usize,
}

impl SequenceState {
    pub fn condition(&self) -> &[TokenId] {
        &self.tokens[..self.condition_len]
    }

    pub fn response(&self) -> &[TokenId] {
        &self.tokens[self.condition_len..]
    }

    pub fn response_len(&self) -> usize {
        self.tokens.len() - self.condition_len
    }

    pub fn masked_positions(&self, mask: TokenId) -> Vec<usize> {
        positions(self.response(), |tok| tok == mask)
    }

    /// Response positions holding a committed (non-mask) token.
    pub fn committed_positions(&self, mask: TokenId) -> Vec<usize> {
        positions(self.response(), |tok| tok != mask)
    }
}

fn positions(tokens: &[TokenId], pred: impl Fn(TokenId) -> bool) -> Vec<usize> {
    tokens
        .iter()
        .enumerate()
        .filter(|(_, &tok)| pred(tok))
        .map(|(i, _)| i)
        .collect()
}

fn check_clean(x0: &[TokenId], mask: TokenId) -> Result<()> {
    match x0.iter().position(|&tok| tok == mask) {
        Some(position) => Err(Error::MaskInCleanTokens { position }),
        None => Ok(()),
    }
}

/// Sample `x_t ~ q(x_t | x0)`: every response token independently survives
/// with probability `alpha_t` and is masked otherwise.
pub fn corrupt<R: Rng + ?Sized>(
    x0: &[TokenId],
    t: usize,
    schedule: &NoiseSchedule,
    condition_len: usize,
    mask: TokenId,
    rng: &mut R,
) -> Result<SequenceState> {
    schedule.check_t(t, 0)?;
    check_clean(x0, mask)?;
    if condition_len > x0.len() {
        return Err(Error::invalid(format!(
            "condition length {condition_len} exceeds sequence length {}",
            x0.len()
        )));
    }
    let alpha = schedule.alpha(t);
    let mut tokens = x0.to_vec();
    for tok in &mut tokens[condition_len..] {
        if rng.gen::<f64>() >= alpha {
            *tok = mask;
        }
    }
    Ok(SequenceState {
        tokens,
        condition_len,
        t,
    })
}

/// One forward step `q(x_t | x_{t-1})`: unmasked response tokens survive with
/// probability `beta_t`; masked positions stay masked.
pub fn corrupt_step<R: Rng + ?Sized>(
    prev: &SequenceState,
    t: usize,
    schedule: &NoiseSchedule,
    mask: TokenId,
    rng: &mut R,
) -> Result<SequenceState> {
    schedule.check_t(t, 1)?;
    if prev.t + 1 != t {
        return Err(Error::TimestepMismatch {
            expected: t - 1,
            found: prev.t,
        });
    }
    let beta = schedule.beta(t);
    let mut next = prev.clone();
    next.t = t;
    for tok in &mut next.tokens[prev.condition_len..] {
        if *tok != mask && rng.gen::<f64>() >= beta {
            *tok = mask;
        }
    }
    Ok(next)
}

/// A categorical distribution over a handful of token values.
#[derive(Debug, Clone, PartialEq)]
pub struct Categorical {
    pub outcomes: Vec<(TokenId, f64)>,
}

impl Categorical {
    pub fn point(token: TokenId) -> Self {
        Self {
            outcomes: vec![(token, 1.0)],
        }
    }

    pub fn prob(&self, token: TokenId) -> f64 {
        self.outcomes
            .iter()
            .filter(|(tok, _)| *tok == token)
            .map(|(_, p)| p)
            .sum()
    }
}

/// `q(x_{t-1} | x_t, x0)` for one position of the absorbing process.
///
/// An unmasked `x_t` is a fixed point. A masked `x_t` is revealed as `x0`
/// with probability `(alpha_{t-1} - alpha_t) / (1 - alpha_t)` and stays
/// masked otherwise.
pub fn posterior(
    x_t: TokenId,
    x0: TokenId,
    t: usize,
    schedule: &NoiseSchedule,
    mask: TokenId,
) -> Result<Categorical> {
    schedule.check_t(t, 1)?;
    if x0 == mask {
        return Err(Error::MaskInCleanTokens { position: 0 });
    }
    if x_t != mask {
        return Ok(Categorical::point(x_t));
    }
    let reveal = schedule.reveal_prob(t);
    let mut outcomes = vec![(x0, reveal)];
    if reveal < 1.0 {
        outcomes.push((mask, 1.0 - reveal));
    }
    Ok(Categorical { outcomes })
}

fn check_step(state: &SequenceState, schedule: &NoiseSchedule) -> Result<usize> {
    let t = state.t;
    schedule.check_t(t, 1)?;
    Ok(t)
}

/// Draw from a row of log-probabilities by inverse CDF.
pub fn sample_log_row<R: Rng + ?Sized>(row: &[f64], rng: &mut R) -> TokenId {
    let u = rng.gen::<f64>();
    let mut acc = 0.0;
    let mut last = 0;
    for (j, &lp) in row.iter().enumerate() {
        if lp == f64::NEG_INFINITY {
            continue;
        }
        acc += lp.exp();
        last = j;
        if u < acc {
            return TokenId::from(j);
        }
    }
    TokenId::from(last)
}

/// Ancestral step `t -> t-1`: for each masked response position draw
/// `x0_hat ~ p(x0 | x_t)`, then `x_{t-1} ~ q(x_{t-1} | x_t, x0_hat)`.
pub fn reverse_step_ancestral<D, R>(
    state: &SequenceState,
    denoiser: &D,
    schedule: &NoiseSchedule,
    rng: &mut R,
) -> Result<SequenceState>
where
    D: Denoiser + ?Sized,
    R: Rng + ?Sized,
{
    let t = check_step(state, schedule)?;
    let out = denoiser.score(state)?;
    ancestral_apply(state, &out, schedule, denoiser.mask_id(), t, rng)
}

fn ancestral_apply<R: Rng + ?Sized>(
    state: &SequenceState,
    out: &crate::denoiser::DenoiserOutput,
    schedule: &NoiseSchedule,
    mask: TokenId,
    t: usize,
    rng: &mut R,
) -> Result<SequenceState> {
    if out.rows() != state.response_len() {
        return Err(Error::Denoiser(format!(
            "{} output rows for {} response positions",
            out.rows(),
            state.response_len()
        )));
    }
    let reveal = schedule.reveal_prob(t);
    let mut next = state.clone();
    next.t = t - 1;
    for i in 0..state.response_len() {
        let pos = state.condition_len + i;
        if state.tokens[pos] != mask {
            continue;
        }
        let x0_hat = sample_log_row(out.row(i), rng);
        if rng.gen::<f64>() < reveal {
            next.tokens[pos] = x0_hat;
        }
    }
    Ok(next)
}

/// Top-k step `t -> t-1`: every response position is scored by the
/// log-probability of its argmax prediction, and the
/// `unmask_count(N, t-1, T)` best positions keep their argmax token while all
/// others are masked. Committed tokens may therefore be remasked. Ties are
/// broken by lower position.
pub fn mask_predict_step<D>(
    state: &SequenceState,
    denoiser: &D,
    schedule: &NoiseSchedule,
) -> Result<SequenceState>
where
    D: Denoiser + ?Sized,
{
    let t = check_step(state, schedule)?;
    let out = denoiser.score(state)?;
    Ok(mask_predict_apply(state, &out, schedule, denoiser.mask_id(), t)?.0)
}

/// Applies a top-k selection from a precomputed output. Also returns the
/// argmax log-probability of every response position.
pub(crate) fn mask_predict_apply(
    state: &SequenceState,
    out: &crate::denoiser::DenoiserOutput,
    schedule: &NoiseSchedule,
    mask: TokenId,
    t: usize,
) -> Result<(SequenceState, Vec<f64>)> {
    let n = state.response_len();
    if out.rows() != n {
        return Err(Error::Denoiser(format!(
            "{} output rows for {n} response positions",
            out.rows()
        )));
    }
    let k = schedule.unmask_count(n, t - 1)?;
    let best: Vec<(TokenId, f64)> = (0..n).map(|i| out.argmax(i)).collect();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| best[b].1.total_cmp(&best[a].1).then(a.cmp(&b)));
    let mut next = state.clone();
    next.t = t - 1;
    for tok in &mut next.tokens[state.condition_len..] {
        *tok = mask;
    }
    for &i in &order[..k] {
        next.tokens[state.condition_len + i] = best[i].0;
    }
    Ok((next, best.iter().map(|b| b.1).collect()))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum DecodeMode {
    #[default]
    Topk,
    Ancestral,
}

impl std::str::FromStr for DecodeMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "topk" => Ok(DecodeMode::Topk),
            "ancestral" => Ok(DecodeMode::Ancestral),
            other => Err(Error::invalid(format!("unknown decode mode `{other}`"))),
        }
    }
}

impl std::fmt::Display for DecodeMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            DecodeMode::Topk => "topk",
            DecodeMode::Ancestral => "ancestral",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TraceStep {
    pub t: usize,
    pub state: SequenceState,
    /// Response positions that went from mask to a token at this step.
    pub newly_committed: Vec<usize>,
    /// Response positions that went from a token back to mask at this step.
    pub remasked: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GenerationTrace {
    pub steps: Vec<TraceStep>,
}

impl GenerationTrace {
    pub fn final_state(&self) -> &SequenceState {
        &self.steps.last().expect("trace is never empty").state
    }

    /// One line per step: step index, timestep, rendered response (masks as
    /// `_`), comma-separated newly committed positions. Fields are
    /// tab-separated; tabs, newlines and backslashes inside tokens are escaped.
    pub fn render(&self, vocab: &Vocab, joiner: &str) -> String {
        let mut out = String::new();
        for (i, step) in self.steps.iter().enumerate() {
            let text = render_tokens(step.state.response(), vocab, joiner);
            let newly = step
                .newly_committed
                .iter()
                .map(|p| p.to_string())
                .collect::<Vec<_>>()
                .join(",");
            let _ = writeln!(out, "{i}\t{}\t{text}\t{newly}", step.t);
        }
        out
    }
}

pub fn render_tokens(tokens: &[TokenId], vocab: &Vocab, joiner: &str) -> String {
    tokens
        .iter()
        .map(|&tok| {
            if tok == vocab.mask_id() {
                "_".to_string()
            } else {
                crate::data::escape_field(vocab.token(tok).unwrap_or("?"))
            }
        })
        .collect::<Vec<_>>()
        .join(joiner)
}

fn diff_step(
    prev: &SequenceState,
    next: &SequenceState,
    mask: TokenId,
) -> (Vec<usize>, Vec<usize>) {
    let mut newly = Vec::new();
    let mut remasked = Vec::new();
    for (i, (&a, &b)) in prev.response().iter().zip(next.response()).enumerate() {
        if a == mask && b != mask {
            newly.push(i);
        } else if a != mask && b == mask {
            remasked.push(i);
        }
    }
    (newly, remasked)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Generation {
    pub tokens: Vec<TokenId>,
    pub trace: GenerationTrace,
    /// Log-probability of each final token under the denoiser call that
    /// last committed it.
    pub token_log_probs: Vec<f64>,
}

impl Generation {
    /// Mean commit-time log-probability of the response tokens.
    pub fn score(&self) -> f64 {
        if self.token_log_probs.is_empty() {
            return 0.0;
        }
        self.token_log_probs.iter().sum::<f64>() / self.token_log_probs.len() as f64
    }
}

/// Append `target_len` masks to `prompt` and denoise from `t = T` down to 0.
pub fn generate<D, R>(
    prompt: &[TokenId],
    target_len: usize,
    denoiser: &D,
    schedule: &NoiseSchedule,
    mode: DecodeMode,
    rng: &mut R,
) -> Result<Generation>
where
    D: Denoiser + ?Sized,
    R: Rng + ?Sized,
{
    if denoiser.vocab_size() == 0 {
        return Err(Error::Empty("vocabulary"));
    }
    if target_len == 0 {
        return Err(Error::invalid("target length must be at least 1"));
    }
    let mask = denoiser.mask_id();
    check_clean(prompt, mask)?;
    let total = prompt.len() + target_len;
    if total > denoiser.max_positions() {
        return Err(Error::TooLong {
            len: total,
            max: denoiser.max_positions(),
        });
    }
    let steps = schedule.steps();
    let mut tokens = prompt.to_vec();
    tokens.resize(total, mask);
    let mut state = SequenceState {
        tokens,
        condition_len: prompt.len(),
        t: steps,
    };
    let mut trace = vec![TraceStep {
        t: steps,
        state: state.clone(),
        newly_committed: Vec::new(),
        remasked: Vec::new(),
    }];
    let mut commit_lp = vec![0.0; target_len];
    for t in (1..=steps).rev() {
        let out = denoiser.score(&state)?;
        let next = match mode {
            DecodeMode::Topk => {
                let (next, _) = mask_predict_apply(&state, &out, schedule, mask, t)?;
                next
            }
            DecodeMode::Ancestral => ancestral_apply(&state, &out, schedule, mask, t, rng)?,
        };
        for (i, (&before, &after)) in state.response().iter().zip(next.response()).enumerate() {
            if after != mask && after != before {
                commit_lp[i] = out.log_prob(i, after);
            }
        }
        let (newly_committed, remasked) = diff_step(&state, &next, mask);
        state = next;
        trace.push(TraceStep {
            t: state.t,
            state: state.clone(),
            newly_committed,
            remasked,
        });
    }
    if state.response().contains(&mask) {
        return Err(Error::Denoiser(
            "decode finished with masked positions".into(),
        ));
    }
    Ok(Generation {
        tokens: state.response().to_vec(),
        trace: GenerationTrace { steps: trace },
        token_log_probs: commit_lp,
    })
}

/// Monte-Carlo estimate (nats) of the variational bound on `-log p(x0)`.
///
/// For the absorbing process every `L_t` reduces to
/// `E[r_t * sum_{masked i} -log p(x0_i | x_t)]` with
/// `r_t = (alpha_{t-1} - alpha_t) / (1 - alpha_t)`, and the prior term
/// vanishes because `alpha_T = 0`. Each sample draws `t` uniformly from
/// `1..=T` and scales by `T`.
pub fn elbo_estimate<D, R>(
    x0: &[TokenId],
    condition_len: usize,
    denoiser: &D,
    schedule: &NoiseSchedule,
    n_samples: usize,
    rng: &mut R,
) -> Result<f64>
where
    D: Denoiser + ?Sized,
    R: Rng + ?Sized,
{
    if n_samples == 0 {
        return Err(Error::invalid("n_samples must be at least 1"));
    }
    let mask = denoiser.mask_id();
    check_clean(x0, mask)?;
    let steps = schedule.steps();
    let mut total = 0.0;
    for _ in 0..n_samples {
        let t = rng.gen_range(1..=steps as u32) as usize;
        let state = corrupt(x0, t, schedule, condition_len, mask, rng)?;
        let masked = state.masked_positions(mask);
        if masked.is_empty() {
            continue;
        }
        let out = denoiser.score(&state)?;
        let nll: f64 = masked
            .iter()
            .map(|&i| -out.log_prob(i, x0[condition_len + i]))
            .sum();
        total += steps as f64 * schedule.reveal_prob(t) * nll;
    }
    Ok(total / n_samples as f64)
}
