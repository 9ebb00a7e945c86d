use super::Checkpoint;
use crate::data::Example;
use crate::denoiser::{Denoiser, TransformerDenoiser};
use crate::error::{Error, Result};
use crate::nn::{Float, ParameterStore, Tensor};

fn take_rows<F: Float>(t: &Tensor<F>, rows: &[usize]) -> Tensor<F> {
    let width = t.numel() / t.shape()[0];
    let mut data = Vec::with_capacity(rows.len() * width);
    for &r in rows {
        data.extend_from_slice(&t.data()[r * width..(r + 1) * width]);
    }
    let mut shape = t.shape().to_vec();
    shape[0] = rows.len();
    Tensor::new(shape, data).expect("row subset keeps the shape valid")
}

/// Drop embedding and output rows of tokens that never occur in `corpus`.
/// Specials are always kept. The checkpoint records the original id of every
/// retained token; remaps compose across repeated pruning.
pub fn prune_vocab<F: Float>(ckpt: &Checkpoint<F>, corpus: &[Example]) -> Result<Checkpoint<F>> {
    if corpus.is_empty() {
        return Err(Error::Empty("pruning corpus"));
    }
    let vocab = ckpt.vocab();
    let sep = vocab.sep_id();
    if !corpus.iter().any(|ex| ex.prompt.contains(&sep)) {
        return Err(Error::invalid("corpus never uses the separator token"));
    }
    let mut keep = vec![false; vocab.len()];
    for id in [vocab.mask_id(), vocab.pad_id(), sep] {
        keep[id.index()] = true;
    }
    for ex in corpus {
        for tok in ex.prompt.iter().chain(&ex.response) {
            let slot = keep
                .get_mut(tok.index())
                .ok_or_else(|| Error::invalid(format!("token id {tok} outside the vocabulary")))?;
            *slot = true;
        }
    }
    let (new_vocab, old_ids) = vocab.restrict(&keep)?;
    let rows: Vec<usize> = old_ids.iter().map(|t| t.index()).collect();

    let old = ckpt.model.store();
    let mut store = ParameterStore::new();
    for (name, value) in old.iter() {
        let v = match name {
            "tok_emb" | "out.b" => take_rows(value, &rows),
            _ => value.clone(),
        };
        store.add(name, v)?;
    }
    let mut config = *ckpt.model.config();
    config.vocab_size = new_vocab.len();
    let model = TransformerDenoiser::from_store(
        config,
        ckpt.model.length_config(),
        new_vocab.mask_id(),
        new_vocab.pad_id(),
        store,
    )?;
    debug_assert_eq!(model.vocab_size(), new_vocab.len());

    let remap = match &ckpt.header.remap {
        Some(prev) => old_ids.iter().map(|t| prev[t.index()]).collect(),
        None => old_ids,
    };
    let mut header = ckpt.header.clone();
    header.vocab = new_vocab;
    header.model = config;
    header.remap = Some(remap);
    Ok(Checkpoint { header, model })
}
