//! Checkpoint directory layout: tensor snapshot files, `model.toml` with the
//! architecture record, and `vocab.txt` with one token per line in id order.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use deal_tensor::snapshot::{load_snapshot, save_snapshot};
use deal_tensor::Tensor;

use super::{MiniClip, MiniClipConfig, Param, Tokenizer};
use crate::error::{DealError, Result};

pub const CONFIG_FILE: &str = "model.toml";
pub const VOCAB_FILE: &str = "vocab.txt";

pub fn save_checkpoint(model: &MiniClip, tokenizer: &Tokenizer, dir: &Path) -> Result<()> {
    if tokenizer.len() > model.config().vocab_size {
        return Err(DealError::Checkpoint(format!(
            "vocabulary has {} tokens, model holds {}",
            tokenizer.len(),
            model.config().vocab_size
        )));
    }
    fs::create_dir_all(dir).map_err(DealError::io(dir))?;
    let tensors: Vec<(String, Tensor)> = model
        .params()
        .iter()
        .map(|(name, p)| (name.clone(), Tensor::new(p.data.clone(), &p.shape).expect("param shape")))
        .collect();
    let entries: Vec<(&str, &Tensor)> = tensors.iter().map(|(n, t)| (n.as_str(), t)).collect();
    save_snapshot(dir, &entries)?;
    let config = toml::to_string(model.config()).map_err(|e| DealError::Checkpoint(e.to_string()))?;
    let path = dir.join(CONFIG_FILE);
    fs::write(&path, config).map_err(DealError::io(&path))?;
    let mut vocab = tokenizer.vocab().join("\n");
    vocab.push('\n');
    let path = dir.join(VOCAB_FILE);
    fs::write(&path, vocab).map_err(DealError::io(&path))
}

pub fn load_checkpoint(dir: &Path) -> Result<(MiniClip, Tokenizer)> {
    let path = dir.join(CONFIG_FILE);
    let text = fs::read_to_string(&path).map_err(DealError::io(&path))?;
    let config: MiniClipConfig = toml::from_str(&text).map_err(|e| DealError::Checkpoint(format!("{CONFIG_FILE}: {e}")))?;
    let params: BTreeMap<String, Param> = load_snapshot(dir)?
        .into_iter()
        .map(|(name, t)| {
            (
                name,
                Param {
                    shape: t.shape().to_vec(),
                    data: t.to_vec(),
                },
            )
        })
        .collect();
    let model = MiniClip::from_params(config, params)?;
    let path = dir.join(VOCAB_FILE);
    let vocab = fs::read_to_string(&path).map_err(DealError::io(&path))?;
    let tokenizer = Tokenizer::from_vocab(vocab.lines().map(str::to_string).collect())?;
    if tokenizer.len() > model.config().vocab_size {
        return Err(DealError::Checkpoint(format!(
            "vocabulary has {} tokens, model holds {}",
            tokenizer.len(),
            model.config().vocab_size
        )));
    }
    Ok((model, tokenizer))
}
