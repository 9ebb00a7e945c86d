use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{Tokenizer, TokenizerMode};
use crate::denoiser::{LengthHeadConfig, TransformerConfig, TransformerDenoiser};
use crate::error::{Error, Result};
use crate::nn::{io, DType, Float};
use crate::schedule::ScheduleSpec;
use crate::vocab::{TokenId, Vocab};

/// Everything needed to rebuild a model besides its weights. Stored as the
/// JSON text block of the checkpoint file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub vocab: Vocab,
    pub tokenizer: TokenizerMode,
    pub model: TransformerConfig,
    pub length: Option<LengthHeadConfig>,
    pub schedule: ScheduleSpec,
    /// For pruned models: the original id of each retained token.
    pub remap: Option<Vec<TokenId>>,
    /// Optimizer steps taken per training phase.
    pub steps: BTreeMap<String, u64>,
    /// Resolved settings of the runs that produced this checkpoint.
    pub run: BTreeMap<String, String>,
}

#[derive(Debug, Clone)]
pub struct Checkpoint<F: Float> {
    pub header: CheckpointHeader,
    pub model: TransformerDenoiser<F>,
}

impl<F: Float> Checkpoint<F> {
    pub fn new(
        model: TransformerDenoiser<F>,
        vocab: Vocab,
        tokenizer: TokenizerMode,
        schedule: ScheduleSpec,
    ) -> Result<Self> {
        let header = CheckpointHeader {
            vocab,
            tokenizer,
            model: *model.config(),
            length: model.length_config(),
            schedule,
            remap: None,
            steps: BTreeMap::new(),
            run: BTreeMap::new(),
        };
        check_consistent(&header, &model)?;
        Ok(Self { header, model })
    }

    pub fn tokenizer(&self) -> Tokenizer {
        Tokenizer::new(self.header.vocab.clone(), self.header.tokenizer)
    }

    pub fn vocab(&self) -> &Vocab {
        &self.header.vocab
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut header = self.header.clone();
        header.model = *self.model.config();
        header.length = self.model.length_config();
        let text = serde_json::to_string(&header)?;
        Ok(io::encode(&text, self.model.store()))
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let (text, store) = io::decode::<F>(bytes)?;
        let header: CheckpointHeader = serde_json::from_str(&text)
            .map_err(|e| Error::Checkpoint(format!("bad header: {e}")))?;
        let model = TransformerDenoiser::from_store(
            header.model,
            header.length,
            header.vocab.mask_id(),
            header.vocab.pad_id(),
            store,
        )?;
        check_consistent(&header, &model)?;
        Ok(Self { header, model })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path)?;
        Self::from_bytes(&bytes)
    }
}

/// Element type of a checkpoint file without decoding its weights.
pub fn checkpoint_dtype(bytes: &[u8]) -> Result<DType> {
    Ok(io::peek(bytes)?.1)
}

fn check_consistent<F: Float>(
    header: &CheckpointHeader,
    model: &TransformerDenoiser<F>,
) -> Result<()> {
    if header.vocab.len() != model.config().vocab_size {
        return Err(Error::Checkpoint(format!(
            "vocabulary has {} tokens but the model expects {}",
            header.vocab.len(),
            model.config().vocab_size
        )));
    }
    if header.vocab.mask_id() != crate::denoiser::Denoiser::mask_id(model)
        || header.vocab.pad_id() != model.pad_id()
    {
        return Err(Error::Checkpoint(
            "special token ids disagree with the model".into(),
        ));
    }
    Ok(())
}
