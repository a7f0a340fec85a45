//! Minibatch training of the objective with AdamW.

use std::collections::BTreeMap;
use std::io::Write;

use deal_tensor::{backward, Tensor};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::concepts::{caption_variants, ConceptSet};
use crate::error::{DealError, Result};
use crate::model::{MiniClip, Tokenizer};
use crate::objective::{adam_update, total_risk, AdamState, DealConfig, Pair, TrainConfig};
use crate::seed::mix;
use crate::synth::Dataset;

/// One line of the step log.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub epoch: usize,
    pub contr: f64,
    pub disen: f64,
    pub local: f64,
    pub total: f64,
}

impl StepRecord {
    pub fn to_json_line(&self) -> String {
        crate::format::to_json_line(self)
    }
}

pub fn write_step_log(records: &[StepRecord], out: &mut impl Write) -> std::io::Result<()> {
    for r in records {
        writeln!(out, "{}", r.to_json_line())?;
    }
    Ok(())
}

/// Every text the model is trained or evaluated on: captions, category
/// names, and concept strings.
pub fn text_corpus(concepts: &ConceptSet) -> Result<Vec<String>> {
    let mut corpus = Vec::new();
    for c in &concepts.categories {
        let v = caption_variants(&c.name, &c.concepts)?;
        corpus.push(v.full_caption);
        corpus.push(v.category_only);
        corpus.extend(v.per_concept);
    }
    Ok(corpus)
}

/// Stratified split of `dataset` into `(train, validation)`: within each
/// category a seeded shuffle picks `round(fraction · n)` validation samples.
/// Both parts keep the original sample order.
pub fn split_validation(dataset: &Dataset, fraction: f64, seed: u64) -> Result<(Dataset, Dataset)> {
    if !(0.0..1.0).contains(&fraction) {
        return Err(DealError::Config(format!("validation fraction must lie in [0, 1), got {fraction}")));
    }
    let mut held_out = vec![false; dataset.samples.len()];
    for c in 0..dataset.categories.len() {
        let mut members: Vec<usize> = (0..dataset.samples.len())
            .filter(|&i| dataset.samples[i].category_index == c)
            .collect();
        members.shuffle(&mut ChaCha8Rng::seed_from_u64(mix(&[seed, c as u64, 0x5911])));
        let take = (fraction * members.len() as f64).round() as usize;
        for &i in &members[..take] {
            held_out[i] = true;
        }
    }
    let part = |keep: bool| Dataset {
        categories: dataset.categories.clone(),
        samples: dataset
            .samples
            .iter()
            .zip(&held_out)
            .filter(|(_, &h)| h == keep)
            .map(|(s, _)| s.clone())
            .collect(),
    };
    Ok((part(false), part(true)))
}

/// Indices of the batches for one epoch. A trailing batch of a single pair
/// is dropped because it carries no contrastive signal.
pub fn epoch_batches(len: usize, batch_size: usize, seed: u64, epoch: usize) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..len).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(mix(&[seed, epoch as u64])));
    order
        .chunks(batch_size)
        .filter(|c| c.len() >= 2)
        .map(<[usize]>::to_vec)
        .collect()
}

/// Trains `model` in place and returns the step log. `on_step` sees each
/// record as soon as its step is applied.
pub fn train(
    dataset: &Dataset,
    concepts: &ConceptSet,
    model: &mut MiniClip,
    tokenizer: &Tokenizer,
    deal: &DealConfig,
    cfg: &TrainConfig,
    mut on_step: impl FnMut(&StepRecord),
) -> Result<Vec<StepRecord>> {
    deal.validate()?;
    cfg.validate()?;
    if dataset.samples.is_empty() {
        return Err(DealError::Dataset("training set is empty".into()));
    }
    let entries = dataset
        .categories
        .iter()
        .map(|name| concepts.get(name).ok_or_else(|| DealError::UnknownCategory(name.clone())))
        .collect::<Result<Vec<_>>>()?;
    let images: Vec<Tensor> = dataset.samples.iter().map(|s| s.image_tensor()).collect();

    let mut state = AdamState::default();
    let mut log = Vec::new();
    let mut step = 0;
    for epoch in 0..cfg.epochs {
        for batch in epoch_batches(images.len(), cfg.batch_size, cfg.seed, epoch) {
            step += 1;
            let pairs: Vec<Pair> = batch
                .iter()
                .map(|&i| {
                    let s = &dataset.samples[i];
                    Pair {
                        image: images[i].clone(),
                        caption: &s.caption,
                        concepts: entries[s.category_index],
                    }
                })
                .collect();
            let grads = {
                let bound = model.bind(true);
                let (loss, c) = total_risk(&bound, tokenizer, &pairs, deal).map_err(|e| at_step(e, step))?;
                let named: Vec<(&str, &Tensor)> = bound
                    .named()
                    .filter(|(name, _)| !(cfg.freeze_temperature && *name == "log_temperature"))
                    .collect();
                let wrt: Vec<&Tensor> = named.iter().map(|(_, t)| *t).collect();
                let grads = backward(&loss, &wrt, false)?;
                let record = StepRecord {
                    step,
                    epoch,
                    contr: c.contr,
                    disen: c.disen,
                    local: c.local,
                    total: c.total,
                };
                log.push(record);
                named
                    .iter()
                    .zip(grads)
                    .map(|((name, _), g)| (name.to_string(), g.to_vec()))
                    .collect::<BTreeMap<_, _>>()
            };
            adam_update(model.params_mut(), &grads, &mut state, cfg, step).map_err(|e| at_step(e, step))?;
            model.clamp_temperature();
            on_step(log.last().expect("just pushed"));
        }
    }
    Ok(log)
}

fn at_step(e: DealError, step: usize) -> DealError {
    match e {
        DealError::NonFinite { what } => DealError::NonFinite {
            what: format!("{what} at step {step}"),
        },
        other => other,
    }
}
