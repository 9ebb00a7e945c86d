//! Objectives, the sharded training loop, checkpoints and vocabulary pruning.
//!
//! A batch is split into fixed-size shards. Each shard builds its own graph
//! and yields a detached gradient buffer; buffers are summed in shard order,
//! so the update does not depend on how many threads evaluated the shards.

mod checkpoint;
mod loss;
mod prune;

pub use checkpoint::{checkpoint_dtype, Checkpoint, CheckpointHeader};
pub use loss::{masked_positions, mlm_loss, rdm_loss, smoothed_nll};
pub use prune::prune_vocab;

use std::path::PathBuf;
use std::sync::Arc;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::Rng;

use crate::data::{validate_examples, Example};
use crate::denoiser::{Denoiser, Forward, TransformerDenoiser};
use crate::diffusion::corrupt;
use crate::error::{Error, Result};
use crate::exec::{mix_seed, stream_rng, Exec};
use crate::nn::{Adam, AdamConfig, AttnLayout, Float, GradBuffer, Graph, NllTerm, Var};
use crate::schedule::{NoiseSchedule, ScheduleSpec};
use crate::vocab::TokenId;

const EPOCH_SALT: u64 = 0xE90C;
const HELDOUT_SEED: u64 = 0x4E1D_0075;

/// What a training run optimizes.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Objective {
    /// Weighted masked cross-entropy with `t` uniform on `1..=T`, masking
    /// response positions only.
    Diffusion,
    /// Fixed-ratio masking over whole sequences with unweighted
    /// cross-entropy.
    MaskedLm { mask_ratio: f64 },
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub enum Init {
    #[default]
    Scratch,
    Checkpoint(PathBuf),
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub steps: usize,
    /// Sequences per optimizer step.
    pub batch_size: usize,
    pub learning_rate: f64,
    pub warmup_steps: usize,
    /// Cosine decay from the peak rate down to `peak * final_lr_ratio`.
    pub final_lr_ratio: f64,
    /// `None` picks 0.1 from scratch and 0.0 from a checkpoint.
    pub label_smoothing: Option<f64>,
    pub init: Init,
    pub seed: u64,
    pub schedule: ScheduleSpec,
    pub clip_norm: f64,
    pub adam: AdamConfig,
    /// Sequences per gradient shard.
    pub shard_size: usize,
    /// Weight of the length-head cross-entropy relative to the main loss.
    pub length_weight: f64,
    /// Held-out evaluation interval in steps (0 disables logging).
    pub log_every: usize,
    /// Corruptions per held-out example.
    pub heldout_draws: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 1000,
            batch_size: 32,
            learning_rate: 1e-3,
            warmup_steps: 100,
            final_lr_ratio: 0.1,
            label_smoothing: None,
            init: Init::Scratch,
            seed: 0,
            schedule: ScheduleSpec::default(),
            clip_norm: 1.0,
            adam: AdamConfig::default(),
            shard_size: 8,
            length_weight: 0.1,
            log_every: 100,
            heldout_draws: 2,
        }
    }
}

impl TrainConfig {
    pub fn smoothing(&self) -> f64 {
        self.label_smoothing.unwrap_or(match self.init {
            Init::Scratch => 0.1,
            Init::Checkpoint(_) => 0.0,
        })
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.shard_size == 0 {
            return Err(Error::invalid("batch_size and shard_size must be positive"));
        }
        let s = self.smoothing();
        if !(0.0..1.0).contains(&s) {
            return Err(Error::invalid(format!(
                "label smoothing {s} outside [0, 1)"
            )));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::invalid("learning rate must be positive"));
        }
        if !(0.0..=1.0).contains(&self.final_lr_ratio) {
            return Err(Error::invalid("final_lr_ratio must lie in [0, 1]"));
        }
        NoiseSchedule::from_spec(self.schedule)?;
        Ok(())
    }

    /// Learning rate used for update number `step` (0-based).
    pub fn lr_at(&self, step: usize) -> f64 {
        let peak = self.learning_rate;
        if step < self.warmup_steps {
            return peak * (step + 1) as f64 / self.warmup_steps as f64;
        }
        let span = self.steps.saturating_sub(self.warmup_steps).max(1);
        let progress = ((step - self.warmup_steps) as f64 / span as f64).min(1.0);
        let floor = peak * self.final_lr_ratio;
        floor + (peak - floor) * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
    }
}

/// One corrupted training sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchItem {
    pub clean: Vec<TokenId>,
    pub corrupted: Vec<TokenId>,
    /// Leading positions that are never corrupted or scored.
    pub condition_len: usize,
    /// Sampled timestep (diffusion objective only).
    pub t: Option<usize>,
    /// Multiplier on this item's masked cross-entropy.
    pub weight: f64,
    /// Gold response length for the length head, if it is trained.
    pub length_target: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Batch {
    pub items: Vec<BatchItem>,
}

impl Batch {
    /// Corrupt `examples`; item `j` draws from `stream_rng(seed, j)`.
    pub fn sample(
        examples: &[&Example],
        objective: Objective,
        schedule: &NoiseSchedule,
        mask: TokenId,
        seed: u64,
        with_lengths: bool,
    ) -> Result<Batch> {
        let items = examples
            .iter()
            .enumerate()
            .map(|(j, ex)| {
                let mut rng = stream_rng(seed, j as u64);
                let clean = ex.concat();
                match objective {
                    Objective::Diffusion => {
                        let t = rng.gen_range(1..=schedule.steps() as u32) as usize;
                        let state = corrupt(&clean, t, schedule, ex.prompt.len(), mask, &mut rng)?;
                        Ok(BatchItem {
                            corrupted: state.tokens,
                            condition_len: ex.prompt.len(),
                            t: Some(t),
                            weight: schedule.loss_weight(t)?,
                            length_target: with_lengths.then_some(ex.response.len()),
                            clean,
                        })
                    }
                    Objective::MaskedLm { mask_ratio } => {
                        let corrupted = clean
                            .iter()
                            .map(|&tok| {
                                if rng.gen::<f64>() < mask_ratio {
                                    mask
                                } else {
                                    tok
                                }
                            })
                            .collect();
                        Ok(BatchItem {
                            clean,
                            corrupted,
                            condition_len: 0,
                            t: None,
                            weight: 1.0,
                            length_target: None,
                        })
                    }
                }
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Batch { items })
    }

    pub fn masked_tokens(&self, mask: TokenId) -> usize {
        self.items
            .iter()
            .map(|it| it.corrupted.iter().filter(|&&t| t == mask).count())
            .sum()
    }
}

/// Build the scalar training loss of `items` on graph `g`, scaling every
/// item's contribution by `scale`. Returns the loss node and the forward
/// handles (the first `items.len()` sequences are the corrupted inputs).
pub fn build_loss<F: Float>(
    g: &mut Graph<F>,
    model: &TransformerDenoiser<F>,
    items: &[BatchItem],
    scale: f64,
    smoothing: f64,
    length_weight: f64,
) -> Result<(Var, Forward)> {
    let mask = model.mask_id();
    let mut seqs: Vec<Vec<TokenId>> = items.iter().map(|it| it.corrupted.clone()).collect();
    let length_items: Vec<&BatchItem> = items
        .iter()
        .filter(|it| it.length_target.is_some())
        .collect();
    for it in &length_items {
        let mut s = it.clean[..it.condition_len].to_vec();
        s.push(mask);
        seqs.push(s);
    }
    let refs: Vec<&[TokenId]> = seqs.iter().map(Vec::as_slice).collect();
    let fwd = model.forward(g, &refs)?;

    let mut terms = Vec::new();
    for (k, it) in items.iter().enumerate() {
        for p in masked_positions(&it.clean, &it.corrupted, mask)? {
            if p < it.condition_len {
                return Err(Error::invalid("masked position inside the condition"));
            }
            terms.push(NllTerm {
                row: fwd.offsets[k] + p,
                target: it.clean[p].index(),
                weight: scale * it.weight,
            });
        }
    }
    let cols: Vec<usize> = (0..model.vocab_size())
        .filter(|&c| c != mask.index())
        .collect();
    let mut loss = g.nll(fwd.log_probs, terms, smoothing, cols)?;

    if !length_items.is_empty() && length_weight > 0.0 {
        let first = items.len();
        let mut rows = Vec::new();
        let mut lengths = Vec::new();
        for (j, it) in length_items.iter().enumerate() {
            let start = fwd.offsets[first + j];
            lengths.push(it.condition_len + 1);
            rows.extend(start..start + it.condition_len + 1);
        }
        let hidden = g.gather_rows(fwd.hidden, &rows)?;
        let layout = Arc::new(AttnLayout::packed(&lengths));
        let logp = model.length_log_probs(g, hidden, &layout)?;
        let classes = g.value(logp).dims2()?.1;
        let mut len_terms = Vec::new();
        for (j, it) in length_items.iter().enumerate() {
            let target = it.length_target.expect("filtered");
            if target == 0 || target > classes {
                return Err(Error::invalid(format!(
                    "response length {target} outside the {classes} length classes"
                )));
            }
            len_terms.push(NllTerm {
                row: j,
                target: target - 1,
                weight: scale * length_weight,
            });
        }
        let len_loss = g.nll(logp, len_terms, 0.0, Vec::new())?;
        loss = g.add(loss, len_loss)?;
    }
    Ok((loss, fwd))
}

/// Mean loss of `batch` and its gradient, evaluated shard by shard.
pub fn batch_gradients<F: Float>(
    model: &TransformerDenoiser<F>,
    batch: &Batch,
    smoothing: f64,
    length_weight: f64,
    shard_size: usize,
    exec: Exec,
) -> Result<(f64, Vec<GradBuffer<F>>)> {
    let n = batch.items.len();
    if n == 0 {
        return Err(Error::Empty("batch"));
    }
    let scale = 1.0 / n as f64;
    let shards: Vec<&[BatchItem]> = batch.items.chunks(shard_size.max(1)).collect();
    let parts = exec.try_map_range(shards.len(), |s| -> Result<(f64, GradBuffer<F>)> {
        let mut g = Graph::new();
        let (loss, _) = build_loss(&mut g, model, shards[s], scale, smoothing, length_weight)?;
        let value = g.value(loss).item().as_f64();
        let grads = g.backward(loss)?;
        Ok((value, model.store().collect(&grads)))
    })?;
    let loss = parts.iter().map(|p| p.0).sum();
    Ok((loss, parts.into_iter().map(|p| p.1).collect()))
}

/// Deterministic held-out metrics.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HeldOut {
    /// Mean per-sequence loss without label smoothing.
    pub loss: f64,
    /// Argmax accuracy over the masked positions that were scored.
    pub accuracy: f64,
}

/// Evaluate `model` on `examples` under corruptions that depend only on the
/// example index, so runs with different seeds or sizes see identical
/// inputs. Diffusion timesteps are stratified over `1..=T`.
pub fn heldout_metrics<F: Float>(
    model: &TransformerDenoiser<F>,
    examples: &[Example],
    objective: Objective,
    schedule: &NoiseSchedule,
    draws: usize,
    exec: Exec,
) -> Result<HeldOut> {
    if examples.is_empty() {
        return Err(Error::Empty("held-out set"));
    }
    let draws = draws.max(1);
    let mask = model.mask_id();
    let steps = schedule.steps();
    let mut items = Vec::with_capacity(examples.len() * draws);
    for (i, ex) in examples.iter().enumerate() {
        for j in 0..draws {
            let k = i * draws + j;
            let mut rng = stream_rng(HELDOUT_SEED, k as u64);
            let clean = ex.concat();
            let item = match objective {
                Objective::Diffusion => {
                    let t = 1 + (k * 37 + j * 11) % steps;
                    let state = corrupt(&clean, t, schedule, ex.prompt.len(), mask, &mut rng)?;
                    (clean, state.tokens, ex.prompt.len(), Some(t))
                }
                Objective::MaskedLm { mask_ratio } => {
                    let xt = clean
                        .iter()
                        .map(|&tok| {
                            if rng.gen::<f64>() < mask_ratio {
                                mask
                            } else {
                                tok
                            }
                        })
                        .collect();
                    (clean, xt, 0, None)
                }
            };
            items.push(item);
        }
    }
    let chunks: Vec<_> = items.chunks(32).collect();
    let parts = exec.try_map_range(chunks.len(), |c| -> Result<(f64, usize, usize)> {
        let states: Vec<_> = chunks[c]
            .iter()
            .map(|(_, xt, cond, t)| crate::diffusion::SequenceState {
                tokens: xt.clone(),
                condition_len: *cond,
                t: t.unwrap_or(1),
            })
            .collect();
        let outs = model.score_batch(&states)?;
        let mut loss = 0.0;
        let mut hits = 0;
        let mut scored = 0;
        for ((clean, xt, cond, t), out) in chunks[c].iter().zip(&outs) {
            let (x0, xr) = (&clean[*cond..], &xt[*cond..]);
            loss += match t {
                Some(t) => rdm_loss(out, x0, xr, *t, schedule, 0.0, mask)?,
                None => mlm_loss(out, x0, xr, 0.0, mask)?,
            };
            for p in masked_positions(x0, xr, mask)? {
                scored += 1;
                hits += usize::from(out.argmax(p).0 == x0[p]);
            }
        }
        Ok((loss, hits, scored))
    })?;
    let loss: f64 = parts.iter().map(|p| p.0).sum();
    let hits: usize = parts.iter().map(|p| p.1).sum();
    let scored: usize = parts.iter().map(|p| p.2).sum();
    Ok(HeldOut {
        loss: loss / items.len() as f64,
        accuracy: if scored == 0 {
            0.0
        } else {
            hits as f64 / scored as f64
        },
    })
}

/// One line of the training metrics log.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LogRecord {
    pub step: usize,
    /// Mean training loss since the previous record.
    pub loss: f64,
    pub heldout: Option<HeldOut>,
    pub tokens_per_sec: f64,
}

impl LogRecord {
    /// `step<TAB>loss<TAB>heldout_loss<TAB>tokens_per_sec`.
    pub fn to_tsv(&self) -> String {
        let held = self
            .heldout
            .map_or_else(|| "nan".to_string(), |h| format!("{:.6}", h.loss));
        format!(
            "{}\t{:.6}\t{}\t{:.1}",
            self.step, self.loss, held, self.tokens_per_sec
        )
    }
}

/// Owns a model, its optimizer state and the example stream.
pub struct Trainer<F: Float> {
    model: TransformerDenoiser<F>,
    adam: Adam,
    config: TrainConfig,
    objective: Objective,
    schedule: NoiseSchedule,
    train: Vec<Example>,
    order: Vec<usize>,
    cursor: usize,
    epoch: u64,
    step: usize,
    exec: Exec,
}

impl<F: Float> Trainer<F> {
    pub fn new(
        model: TransformerDenoiser<F>,
        train: Vec<Example>,
        objective: Objective,
        config: TrainConfig,
        vocab: &crate::vocab::Vocab,
        exec: Exec,
    ) -> Result<Self> {
        config.validate()?;
        if train.is_empty() {
            return Err(Error::Empty("training corpus"));
        }
        if let Objective::MaskedLm { mask_ratio } = objective {
            if !(mask_ratio > 0.0 && mask_ratio < 1.0) {
                return Err(Error::invalid(format!(
                    "mask ratio {mask_ratio} outside (0, 1)"
                )));
            }
        }
        validate_examples(&train, vocab, model.max_positions())?;
        if objective == Objective::Diffusion {
            if let Some(cfg) = model.length_config() {
                for (index, ex) in train.iter().enumerate() {
                    if ex.response.len() > cfg.classes {
                        return Err(Error::BadExample {
                            index,
                            message: format!(
                                "response length {} exceeds {} length classes",
                                ex.response.len(),
                                cfg.classes
                            ),
                        });
                    }
                }
            }
        }
        let schedule = NoiseSchedule::from_spec(config.schedule)?;
        let adam = Adam::new(config.adam, model.store());
        let mut t = Self {
            model,
            adam,
            config,
            objective,
            schedule,
            train,
            order: Vec::new(),
            cursor: 0,
            epoch: 0,
            step: 0,
            exec,
        };
        t.reshuffle();
        Ok(t)
    }

    fn reshuffle(&mut self) {
        self.order = (0..self.train.len()).collect();
        let mut rng = stream_rng(mix_seed(self.config.seed, EPOCH_SALT), self.epoch);
        self.order.shuffle(&mut rng);
        self.cursor = 0;
    }

    fn next_indices(&mut self) -> Vec<usize> {
        let mut out = Vec::with_capacity(self.config.batch_size);
        while out.len() < self.config.batch_size {
            if self.cursor == self.order.len() {
                self.epoch += 1;
                self.reshuffle();
            }
            out.push(self.order[self.cursor]);
            self.cursor += 1;
        }
        out
    }

    pub fn model(&self) -> &TransformerDenoiser<F> {
        &self.model
    }

    pub fn into_model(self) -> TransformerDenoiser<F> {
        self.model
    }

    pub fn steps_done(&self) -> usize {
        self.step
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    /// One optimizer update. Returns the batch loss and the number of
    /// tokens processed.
    pub fn step(&mut self) -> Result<(f64, usize)> {
        let idx = self.next_indices();
        let examples: Vec<&Example> = idx.iter().map(|&i| &self.train[i]).collect();
        let with_lengths =
            self.model.length_config().is_some() && self.objective == Objective::Diffusion;
        let seed = mix_seed(self.config.seed, self.step as u64 + 1);
        let batch = Batch::sample(
            &examples,
            self.objective,
            &self.schedule,
            self.model.mask_id(),
            seed,
            with_lengths,
        )?;
        let tokens = batch.items.iter().map(|it| it.clean.len()).sum();
        let (loss, buffers) = batch_gradients(
            &self.model,
            &batch,
            self.config.smoothing(),
            self.config.length_weight,
            self.config.shard_size,
            self.exec,
        )?;
        let lr = self.config.lr_at(self.step);
        let store = self.model.store_mut();
        store.zero_grad();
        for b in &buffers {
            store.accumulate_buffer(b)?;
        }
        store.check_finite_grads()?;
        if self.config.clip_norm > 0.0 {
            store.clip_grad_norm(self.config.clip_norm);
        }
        self.adam.step(store, lr)?;
        self.step += 1;
        Ok((loss, tokens))
    }

    pub fn heldout(&self, examples: &[Example]) -> Result<HeldOut> {
        heldout_metrics(
            &self.model,
            examples,
            self.objective,
            &self.schedule,
            self.config.heldout_draws,
            self.exec,
        )
    }

    /// Run the remaining configured steps, evaluating on `heldout` every
    /// `log_every` steps and after the last one.
    pub fn run(
        &mut self,
        heldout: &[Example],
        mut on_log: impl FnMut(&LogRecord),
    ) -> Result<Vec<LogRecord>> {
        let mut log = Vec::new();
        let mut acc = 0.0;
        let mut acc_steps = 0usize;
        let mut tokens = 0usize;
        let mut clock = Instant::now();
        while self.step < self.config.steps {
            let (loss, n) = self.step()?;
            acc += loss;
            acc_steps += 1;
            tokens += n;
            let due = self.config.log_every > 0 && self.step.is_multiple_of(self.config.log_every);
            if due || self.step == self.config.steps {
                let secs = clock.elapsed().as_secs_f64().max(1e-9);
                let held = if heldout.is_empty() {
                    None
                } else {
                    Some(self.heldout(heldout)?)
                };
                let rec = LogRecord {
                    step: self.step,
                    loss: acc / acc_steps as f64,
                    heldout: held,
                    tokens_per_sec: tokens as f64 / secs,
                };
                log::info!("{}", rec.to_tsv());
                on_log(&rec);
                log.push(rec);
                acc = 0.0;
                acc_steps = 0;
                tokens = 0;
                clock = Instant::now();
            }
        }
        Ok(log)
    }
}

/// Fixed-ratio masked-LM training on whole sequences.
pub fn mlm_pretrain<F: Float>(
    model: TransformerDenoiser<F>,
    corpus: Vec<Example>,
    heldout: &[Example],
    mask_ratio: f64,
    config: TrainConfig,
    vocab: &crate::vocab::Vocab,
    exec: Exec,
) -> Result<(TransformerDenoiser<F>, Vec<LogRecord>)> {
    let mut trainer = Trainer::new(
        model,
        corpus,
        Objective::MaskedLm { mask_ratio },
        config,
        vocab,
        exec,
    )?;
    let log = trainer.run(heldout, |_| {})?;
    Ok((trainer.into_model(), log))
}

/// Diffusion finetuning on prompt/response pairs; only responses are
/// corrupted and scored.
pub fn diffusive_adapt<F: Float>(
    model: TransformerDenoiser<F>,
    dataset: Vec<Example>,
    heldout: &[Example],
    config: TrainConfig,
    vocab: &crate::vocab::Vocab,
    exec: Exec,
) -> Result<(TransformerDenoiser<F>, Vec<LogRecord>)> {
    let mut trainer = Trainer::new(model, dataset, Objective::Diffusion, config, vocab, exec)?;
    let log = trainer.run(heldout, |_| {})?;
    Ok((trainer.into_model(), log))
}
