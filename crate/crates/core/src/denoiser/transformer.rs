//! A small bidirectional transformer over the prompt-response concatenation.
//!
//! Pre-norm blocks, learned absolute positions, no causal mask and no
//! timestep input. Inputs longer than `max_positions` are rejected. Output
//! rows are log-softmaxed with the `[MASK]` column pinned to `-inf`.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Denoiser, DenoiserOutput};
use crate::diffusion::SequenceState;
use crate::error::{Error, Result};
use crate::nn::{AttnLayout, Float, Graph, ParamId, ParameterStore, Tensor, Var};
use crate::vocab::TokenId;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TransformerConfig {
    pub layers: usize,
    pub heads: usize,
    pub model_dim: usize,
    pub ff_dim: usize,
    pub max_positions: usize,
    pub vocab_size: usize,
}

impl TransformerConfig {
    pub fn validate(&self) -> Result<()> {
        let fields = [
            ("layers", self.layers),
            ("heads", self.heads),
            ("model_dim", self.model_dim),
            ("ff_dim", self.ff_dim),
            ("max_positions", self.max_positions),
            ("vocab_size", self.vocab_size),
        ];
        if let Some((name, _)) = fields.iter().find(|(_, v)| *v == 0) {
            return Err(Error::invalid(format!("{name} must be positive")));
        }
        if !self.model_dim.is_multiple_of(self.heads) {
            return Err(Error::invalid(format!(
                "model_dim {} is not divisible by {} heads",
                self.model_dim, self.heads
            )));
        }
        Ok(())
    }
}

/// Length classifier: one transformer block over the denoiser's final
/// features, mean pooling, then a two-layer MLP over lengths `1..=classes`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LengthHeadConfig {
    pub classes: usize,
    pub ff_dim: usize,
}

#[derive(Debug, Clone)]
struct BlockIds {
    ln1: (ParamId, ParamId),
    q: (ParamId, ParamId),
    k: (ParamId, ParamId),
    v: (ParamId, ParamId),
    o: (ParamId, ParamId),
    ln2: (ParamId, ParamId),
    ff1: (ParamId, ParamId),
    ff2: (ParamId, ParamId),
}

#[derive(Debug, Clone)]
struct LengthIds {
    block: BlockIds,
    fc1: (ParamId, ParamId),
    fc2: (ParamId, ParamId),
}

#[derive(Debug, Clone)]
struct Ids {
    tok_emb: ParamId,
    pos_emb: ParamId,
    blocks: Vec<BlockIds>,
    ln_f: (ParamId, ParamId),
    out_bias: ParamId,
    length: Option<LengthIds>,
}

/// Graph handles produced by one packed forward pass.
pub struct Forward {
    /// Final-layer features, `[rows, model_dim]`.
    pub hidden: Var,
    /// Log-probabilities, `[rows, vocab]`.
    pub log_probs: Var,
    /// First row of each packed sequence.
    pub offsets: Vec<usize>,
    pub layout: Arc<AttnLayout>,
}

#[derive(Debug, Clone)]
pub struct TransformerDenoiser<F: Float> {
    config: TransformerConfig,
    length: Option<LengthHeadConfig>,
    mask_id: TokenId,
    pad_id: TokenId,
    store: ParameterStore<F>,
    ids: Ids,
}

fn uniform<F: Float>(rng: &mut ChaCha8Rng, shape: &[usize], bound: f64) -> Tensor<F> {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| F::of(rng.gen_range(-bound..bound)))
        .collect();
    Tensor::new(shape.to_vec(), data).expect("shape matches")
}

fn xavier<F: Float>(
    rng: &mut ChaCha8Rng,
    fan_in: usize,
    fan_out: usize,
    shape: &[usize],
) -> Tensor<F> {
    uniform(rng, shape, (6.0 / (fan_in + fan_out) as f64).sqrt())
}

fn init_block<F: Float>(
    store: &mut ParameterStore<F>,
    rng: &mut ChaCha8Rng,
    prefix: &str,
    d: usize,
    ff: usize,
) -> Result<()> {
    store.add(format!("{prefix}.ln1.g"), Tensor::full(&[d], F::one()))?;
    store.add(format!("{prefix}.ln1.b"), Tensor::zeros(&[d]))?;
    for name in ["q", "k", "v", "o"] {
        store.add(
            format!("{prefix}.attn.{name}.w"),
            xavier(rng, d, d, &[d, d]),
        )?;
        store.add(format!("{prefix}.attn.{name}.b"), Tensor::zeros(&[d]))?;
    }
    store.add(format!("{prefix}.ln2.g"), Tensor::full(&[d], F::one()))?;
    store.add(format!("{prefix}.ln2.b"), Tensor::zeros(&[d]))?;
    store.add(format!("{prefix}.ff1.w"), xavier(rng, d, ff, &[d, ff]))?;
    store.add(format!("{prefix}.ff1.b"), Tensor::zeros(&[ff]))?;
    store.add(format!("{prefix}.ff2.w"), xavier(rng, ff, d, &[ff, d]))?;
    store.add(format!("{prefix}.ff2.b"), Tensor::zeros(&[d]))?;
    Ok(())
}

fn init_length_head<F: Float>(
    store: &mut ParameterStore<F>,
    rng: &mut ChaCha8Rng,
    d: usize,
    ff: usize,
    cfg: LengthHeadConfig,
) -> Result<()> {
    init_block(store, rng, "length.block", d, ff)?;
    store.add("length.fc1.w", xavier(rng, d, cfg.ff_dim, &[d, cfg.ff_dim]))?;
    store.add("length.fc1.b", Tensor::zeros(&[cfg.ff_dim]))?;
    store.add(
        "length.fc2.w",
        xavier(rng, cfg.ff_dim, cfg.classes, &[cfg.ff_dim, cfg.classes]),
    )?;
    store.add("length.fc2.b", Tensor::zeros(&[cfg.classes]))?;
    Ok(())
}

fn lookup<F: Float>(store: &ParameterStore<F>, name: &str, shape: &[usize]) -> Result<ParamId> {
    let id = store
        .id(name)
        .ok_or_else(|| Error::UnknownParameter(name.to_string()))?;
    if store.value(id).shape() != shape {
        return Err(Error::ShapeMismatch {
            op: "parameter",
            left: store.value(id).shape().to_vec(),
            right: shape.to_vec(),
        });
    }
    Ok(id)
}

fn block_ids<F: Float>(
    store: &ParameterStore<F>,
    prefix: &str,
    d: usize,
    ff: usize,
) -> Result<BlockIds> {
    let pair = |a: &str, ws: &[usize], bs: &[usize]| -> Result<(ParamId, ParamId)> {
        Ok((
            lookup(
                store,
                &format!(
                    "{prefix}.{a}.{}",
                    if a.starts_with("ln") { "g" } else { "w" }
                ),
                ws,
            )?,
            lookup(store, &format!("{prefix}.{a}.b"), bs)?,
        ))
    };
    Ok(BlockIds {
        ln1: pair("ln1", &[d], &[d])?,
        q: pair("attn.q", &[d, d], &[d])?,
        k: pair("attn.k", &[d, d], &[d])?,
        v: pair("attn.v", &[d, d], &[d])?,
        o: pair("attn.o", &[d, d], &[d])?,
        ln2: pair("ln2", &[d], &[d])?,
        ff1: pair("ff1", &[d, ff], &[ff])?,
        ff2: pair("ff2", &[ff, d], &[d])?,
    })
}

impl<F: Float> TransformerDenoiser<F> {
    /// Fresh parameters from a seeded initializer.
    pub fn new(
        config: TransformerConfig,
        length: Option<LengthHeadConfig>,
        mask_id: TokenId,
        pad_id: TokenId,
        seed: u64,
    ) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = config.model_dim;
        let mut store = ParameterStore::new();
        let emb_bound = (3.0 / d as f64).sqrt();
        store.add(
            "tok_emb",
            uniform(&mut rng, &[config.vocab_size, d], emb_bound),
        )?;
        store.add(
            "pos_emb",
            uniform(&mut rng, &[config.max_positions, d], emb_bound),
        )?;
        for l in 0..config.layers {
            init_block(
                &mut store,
                &mut rng,
                &format!("layers.{l}"),
                d,
                config.ff_dim,
            )?;
        }
        store.add("ln_f.g", Tensor::full(&[d], F::one()))?;
        store.add("ln_f.b", Tensor::zeros(&[d]))?;
        store.add("out.b", Tensor::zeros(&[config.vocab_size]))?;
        if let Some(cfg) = length {
            init_length_head(&mut store, &mut rng, d, config.ff_dim, cfg)?;
        }
        Self::from_store(config, length, mask_id, pad_id, store)
    }

    /// Wrap an existing parameter store, checking every expected shape.
    pub fn from_store(
        config: TransformerConfig,
        length: Option<LengthHeadConfig>,
        mask_id: TokenId,
        pad_id: TokenId,
        store: ParameterStore<F>,
    ) -> Result<Self> {
        config.validate()?;
        if mask_id.index() >= config.vocab_size || pad_id.index() >= config.vocab_size {
            return Err(Error::invalid("special token ids outside the vocabulary"));
        }
        let d = config.model_dim;
        let v = config.vocab_size;
        let blocks = (0..config.layers)
            .map(|l| block_ids(&store, &format!("layers.{l}"), d, config.ff_dim))
            .collect::<Result<Vec<_>>>()?;
        let length_ids = match length {
            Some(cfg) => Some(LengthIds {
                block: block_ids(&store, "length.block", d, config.ff_dim)?,
                fc1: (
                    lookup(&store, "length.fc1.w", &[d, cfg.ff_dim])?,
                    lookup(&store, "length.fc1.b", &[cfg.ff_dim])?,
                ),
                fc2: (
                    lookup(&store, "length.fc2.w", &[cfg.ff_dim, cfg.classes])?,
                    lookup(&store, "length.fc2.b", &[cfg.classes])?,
                ),
            }),
            None => None,
        };
        let ids = Ids {
            tok_emb: lookup(&store, "tok_emb", &[v, d])?,
            pos_emb: lookup(&store, "pos_emb", &[config.max_positions, d])?,
            blocks,
            ln_f: (
                lookup(&store, "ln_f.g", &[d])?,
                lookup(&store, "ln_f.b", &[d])?,
            ),
            out_bias: lookup(&store, "out.b", &[v])?,
            length: length_ids,
        };
        let expected = 5 + 16 * config.layers + length.map_or(0, |_| 20);
        if store.len() != expected {
            return Err(Error::Checkpoint(format!(
                "expected {expected} parameters for this configuration, found {}",
                store.len()
            )));
        }
        Ok(Self {
            config,
            length,
            mask_id,
            pad_id,
            store,
            ids,
        })
    }

    /// Attach a freshly initialized length head (no-op if one exists).
    pub fn with_length_head(self, cfg: LengthHeadConfig, seed: u64) -> Result<Self> {
        if self.length.is_some() {
            return Ok(self);
        }
        let mut store = self.store;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        init_length_head(
            &mut store,
            &mut rng,
            self.config.model_dim,
            self.config.ff_dim,
            cfg,
        )?;
        Self::from_store(self.config, Some(cfg), self.mask_id, self.pad_id, store)
    }

    pub fn config(&self) -> &TransformerConfig {
        &self.config
    }

    pub fn length_config(&self) -> Option<LengthHeadConfig> {
        self.length
    }

    pub fn pad_id(&self) -> TokenId {
        self.pad_id
    }

    pub fn store(&self) -> &ParameterStore<F> {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParameterStore<F> {
        &mut self.store
    }

    pub fn into_store(self) -> ParameterStore<F> {
        self.store
    }

    /// Trainable scalars excluding the length head.
    pub fn num_denoiser_params(&self) -> usize {
        self.store
            .iter()
            .filter(|(name, _)| !name.starts_with("length."))
            .map(|(_, t)| t.numel())
            .sum()
    }

    fn check_tokens(&self, seq: &[TokenId]) -> Result<()> {
        if seq.len() > self.config.max_positions {
            return Err(Error::TooLong {
                len: seq.len(),
                max: self.config.max_positions,
            });
        }
        if seq.is_empty() {
            return Err(Error::Empty("input sequence"));
        }
        if let Some(p) = seq.iter().position(|t| t.index() >= self.config.vocab_size) {
            return Err(Error::invalid(format!(
                "token id {} out of vocabulary",
                seq[p]
            )));
        }
        Ok(())
    }

    fn block(
        &self,
        g: &mut Graph<F>,
        ids: &BlockIds,
        x: Var,
        layout: &Arc<AttnLayout>,
    ) -> Result<Var> {
        let s = &self.store;
        let (g1, b1) = (g.param(s, ids.ln1.0), g.param(s, ids.ln1.1));
        let h = g.layer_norm(x, g1, b1)?;
        let proj = |g: &mut Graph<F>, p: (ParamId, ParamId), input: Var| -> Result<Var> {
            let w = g.param(s, p.0);
            let b = g.param(s, p.1);
            g.linear(input, w, b)
        };
        let q = proj(g, ids.q, h)?;
        let k = proj(g, ids.k, h)?;
        let v = proj(g, ids.v, h)?;
        let a = g.attention(q, k, v, self.config.heads, layout.clone())?;
        let o = proj(g, ids.o, a)?;
        let x = g.add(x, o)?;
        let (g2, b2) = (g.param(s, ids.ln2.0), g.param(s, ids.ln2.1));
        let h = g.layer_norm(x, g2, b2)?;
        let f = proj(g, ids.ff1, h)?;
        let f = g.gelu(f);
        let f = proj(g, ids.ff2, f)?;
        g.add(x, f)
    }

    /// Packed forward pass over several sequences at once.
    pub fn forward(&self, g: &mut Graph<F>, seqs: &[&[TokenId]]) -> Result<Forward> {
        let mut flat = Vec::new();
        let mut positions = Vec::new();
        let mut lengths = Vec::with_capacity(seqs.len());
        let mut offsets = Vec::with_capacity(seqs.len());
        for seq in seqs {
            self.check_tokens(seq)?;
            offsets.push(flat.len());
            lengths.push(seq.len());
            flat.extend(seq.iter().map(|t| t.index()));
            positions.extend(0..seq.len());
        }
        let mut layout = AttnLayout::packed(&lengths);
        for (valid, &tok) in layout.key_valid.iter_mut().zip(&flat) {
            *valid = tok != self.pad_id.index();
        }
        let layout = Arc::new(layout);
        let s = &self.store;
        let tok_table = g.param(s, self.ids.tok_emb);
        let pos_table = g.param(s, self.ids.pos_emb);
        let tok = g.embedding(tok_table, &flat)?;
        let pos = g.embedding(pos_table, &positions)?;
        let mut x = g.add(tok, pos)?;
        for ids in &self.ids.blocks {
            x = self.block(g, ids, x, &layout)?;
        }
        let (gf, bf) = (g.param(s, self.ids.ln_f.0), g.param(s, self.ids.ln_f.1));
        let hidden = g.layer_norm(x, gf, bf)?;
        // The output projection shares the token embedding table.
        let bo = g.param(s, self.ids.out_bias);
        let logits = g.matmul_bt(hidden, tok_table)?;
        let logits = g.add_bias(logits, bo)?;
        let log_probs = g.log_softmax(logits, Some(self.mask_id.index()))?;
        Ok(Forward {
            hidden,
            log_probs,
            offsets,
            layout,
        })
    }

    /// Length-class log-probabilities `[sequences, classes]` from final-layer
    /// features of the sequences described by `layout`.
    pub fn length_log_probs(
        &self,
        g: &mut Graph<F>,
        hidden: Var,
        layout: &Arc<AttnLayout>,
    ) -> Result<Var> {
        let ids = self
            .ids
            .length
            .as_ref()
            .ok_or_else(|| Error::invalid("model has no length head"))?;
        let h = self.block(g, &ids.block, hidden, layout)?;
        let pooled = g.mean_pool(h, &layout.segments)?;
        let s = &self.store;
        let (w1, b1) = (g.param(s, ids.fc1.0), g.param(s, ids.fc1.1));
        let z = g.linear(pooled, w1, b1)?;
        let z = g.gelu(z);
        let (w2, b2) = (g.param(s, ids.fc2.0), g.param(s, ids.fc2.1));
        let z = g.linear(z, w2, b2)?;
        g.log_softmax(z, None)
    }

    /// Response rows of one packed sequence. A visible response token is
    /// known to be clean under the absorbing process, so its row is the
    /// point mass on that token; the network's logits there are never
    /// trained and would otherwise let decoding overwrite committed tokens.
    fn response_rows(
        &self,
        g: &Graph<F>,
        fwd: &Forward,
        idx: usize,
        state: &SequenceState,
    ) -> Result<DenoiserOutput> {
        let v = self.config.vocab_size;
        let lp = g.value(fwd.log_probs).data();
        let start = (fwd.offsets[idx] + state.condition_len) * v;
        let end = (fwd.offsets[idx] + state.tokens.len()) * v;
        let mut rows: Vec<f64> = lp[start..end].iter().map(|x| x.as_f64()).collect();
        for (row, &tok) in rows.chunks_mut(v).zip(state.response()) {
            if tok != self.mask_id {
                row.fill(f64::NEG_INFINITY);
                row[tok.index()] = 0.0;
            }
        }
        DenoiserOutput::new(v, rows)
    }
}

impl<F: Float> Denoiser for TransformerDenoiser<F> {
    fn vocab_size(&self) -> usize {
        self.config.vocab_size
    }

    fn mask_id(&self) -> TokenId {
        self.mask_id
    }

    fn max_positions(&self) -> usize {
        self.config.max_positions
    }

    fn score(&self, state: &SequenceState) -> Result<DenoiserOutput> {
        let mut g = Graph::new();
        let fwd = self.forward(&mut g, &[&state.tokens])?;
        self.response_rows(&g, &fwd, 0, state)
    }

    fn score_batch(&self, states: &[SequenceState]) -> Result<Vec<DenoiserOutput>> {
        if states.is_empty() {
            return Ok(Vec::new());
        }
        let mut g = Graph::new();
        let seqs: Vec<&[TokenId]> = states.iter().map(|s| s.tokens.as_slice()).collect();
        let fwd = self.forward(&mut g, &seqs)?;
        states
            .iter()
            .enumerate()
            .map(|(i, s)| self.response_rows(&g, &fwd, i, s))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny(seed: u64) -> TransformerDenoiser<f64> {
        let cfg = TransformerConfig {
            layers: 2,
            heads: 2,
            model_dim: 8,
            ff_dim: 16,
            max_positions: 12,
            vocab_size: 7,
        };
        TransformerDenoiser::new(
            cfg,
            Some(LengthHeadConfig {
                classes: 5,
                ff_dim: 8,
            }),
            TokenId(1),
            TokenId(0),
            seed,
        )
        .unwrap()
    }

    fn state(tokens: &[u32], cond: usize) -> SequenceState {
        SequenceState {
            tokens: tokens.iter().map(|&t| TokenId(t)).collect(),
            condition_len: cond,
            t: 1,
        }
    }

    #[test]
    fn output_shape_and_normalization() {
        let m = tiny(0);
        let out = m.score(&state(&[3, 4, 2, 1, 1, 5], 3)).unwrap();
        assert_eq!((out.rows(), out.width()), (3, 7));
        out.validate(TokenId(1), 1e-6).unwrap();
    }

    #[test]
    fn rejects_overlong_input() {
        let m = tiny(0);
        assert!(matches!(
            m.score(&state(&[3; 13], 3)),
            Err(Error::TooLong { len: 13, max: 12 })
        ));
    }

    #[test]
    fn trailing_pad_positions_are_inert() {
        let m = tiny(1);
        let a = m.score(&state(&[3, 4, 2, 1, 5, 0, 0], 3)).unwrap();
        let b = m.score(&state(&[3, 4, 2, 1, 5], 3)).unwrap();
        for i in 0..2 {
            for (x, y) in a.row(i).iter().zip(b.row(i)) {
                assert!((x - y).abs() < 1e-12 || (x.is_infinite() && y.is_infinite()));
            }
        }
    }

    #[test]
    fn batch_scoring_matches_single() {
        let m = tiny(2);
        let s1 = state(&[3, 4, 2, 1, 5], 3);
        let s2 = state(&[6, 2, 1, 1, 1, 3], 2);
        let batch = m.score_batch(&[s1.clone(), s2.clone()]).unwrap();
        let a = m.score(&s1).unwrap();
        let b = m.score(&s2).unwrap();
        for (x, y) in batch[0]
            .row(1)
            .iter()
            .zip(a.row(1))
            .chain(batch[1].row(3).iter().zip(b.row(3)))
        {
            assert!((x - y).abs() < 1e-12 || x == y);
        }
    }

    #[test]
    fn from_store_round_trip_and_shape_checks() {
        let m = tiny(3);
        let cfg = *m.config();
        let store = m.store().clone();
        let again = TransformerDenoiser::from_store(
            cfg,
            m.length_config(),
            TokenId(1),
            TokenId(0),
            store.clone(),
        )
        .unwrap();
        assert_eq!(again.store(), m.store());
        let mut bad = cfg;
        bad.model_dim = 4;
        bad.heads = 2;
        assert!(TransformerDenoiser::from_store(bad, None, TokenId(1), TokenId(0), store).is_err());
    }
}
