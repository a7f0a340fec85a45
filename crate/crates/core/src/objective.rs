//! Contrastive loss, explanation regularizers, their weighted total, and
//! the AdamW update.

use std::collections::{BTreeMap, HashMap};

use deal_tensor::Tensor;
use serde::{Deserialize, Serialize};

use crate::concepts::CategoryConcepts;
use crate::error::{DealError, Result};
use crate::explain::{normalize, Backend, Explainer, Normalization};
use crate::model::{stack_rows, Bound, Param, Tokenizer};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum DistMetric {
    #[default]
    L1,
    L2,
}

/// Weights and choices of the explanation-regularized objective.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DealConfig {
    pub lambda: f64,
    pub gamma: f64,
    pub dist_metric: DistMetric,
    pub backend: Backend,
    pub heatmap_normalization: Normalization,
    pub symmetric_contrastive: bool,
}

impl Default for DealConfig {
    fn default() -> Self {
        DealConfig {
            lambda: 0.05,
            gamma: 0.01,
            dist_metric: DistMetric::L1,
            backend: Backend::GradcamToken,
            heatmap_normalization: Normalization::Sum,
            symmetric_contrastive: false,
        }
    }
}

impl DealConfig {
    pub fn baseline() -> Self {
        DealConfig {
            lambda: 0.0,
            gamma: 0.0,
            ..DealConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0 && self.gamma >= 0.0 && self.lambda.is_finite() && self.gamma.is_finite()) {
            return Err(DealError::Config(format!(
                "lambda and gamma must be finite and nonnegative, got {} and {}",
                self.lambda, self.gamma
            )));
        }
        if self.heatmap_normalization == Normalization::MinMax {
            return Err(DealError::Config("training heatmaps support sum or none normalization".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub weight_decay: f64,
    pub freeze_temperature: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 3e-4,
            batch_size: 16,
            epochs: 30,
            seed: 0,
            adam_beta1: 0.9,
            adam_beta2: 0.98,
            adam_eps: 1e-6,
            weight_decay: 0.001,
            freeze_temperature: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(DealError::Config(msg));
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return fail(format!("learning_rate must be positive, got {}", self.learning_rate));
        }
        if self.batch_size < 2 {
            return fail(format!("batch_size must be at least 2, got {}", self.batch_size));
        }
        if self.epochs == 0 {
            return fail("epochs must be at least 1".into());
        }
        for (name, b) in [("adam_beta1", self.adam_beta1), ("adam_beta2", self.adam_beta2)] {
            if !(0.0..1.0).contains(&b) {
                return fail(format!("{name} must lie in [0, 1), got {b}"));
            }
        }
        if !(self.adam_eps > 0.0) || !(self.weight_decay >= 0.0) {
            return fail("adam_eps must be positive and weight_decay nonnegative".into());
        }
        Ok(())
    }
}

/// `−log softmax` of the matched pair per image row, averaged over rows.
/// `temperature` is a scalar tensor so it can be learned.
pub fn infonce(v: &Tensor, t: &Tensor, temperature: &Tensor, symmetric: bool) -> Result<Tensor> {
    if v.rank() != 2 || v.shape() != t.shape() {
        return Err(deal_tensor::TensorError::ShapeMismatch {
            op: "infonce",
            lhs: v.shape().to_vec(),
            rhs: t.shape().to_vec(),
        }
        .into());
    }
    let logits = v.matmul(&t.t()?)?.div(temperature)?;
    let mut loss = row_cross_entropy(&logits)?;
    if symmetric {
        loss = loss.add(&row_cross_entropy(&logits.t()?)?)?.scale(0.5);
    }
    if !loss.all_finite() {
        return Err(DealError::NonFinite {
            what: "contrastive loss".into(),
        });
    }
    Ok(loss)
}

/// Mean over rows of `logsumexp(row) − row[i]`.
fn row_cross_entropy(logits: &Tensor) -> Result<Tensor> {
    let n = logits.dim(0);
    let peak = logits.max_axis(1, true)?.detach();
    let lse = logits.sub(&peak)?.exp()?.sum_axis(1, true)?.log()?.add(&peak)?;
    let diag = logits.mul(&Tensor::eye(n))?.sum_axis(1, true)?;
    Ok(lse.sub(&diag)?.mean_all())
}

pub fn dist(a: &Tensor, b: &Tensor, metric: DistMetric) -> Result<Tensor> {
    let d = a.sub(b)?;
    Ok(match metric {
        DistMetric::L1 => d.abs().sum_all(),
        // The offset keeps the gradient finite where the maps coincide.
        DistMetric::L2 => d.square()?.sum_all().shift(1e-24).sqrt()?,
    })
}

fn check_shapes(maps: &[&Tensor]) -> Result<()> {
    if let Some(first) = maps.first() {
        if let Some(bad) = maps.iter().find(|m| m.shape() != first.shape()) {
            return Err(deal_tensor::TensorError::ShapeMismatch {
                op: "heatmap distance",
                lhs: first.shape().to_vec(),
                rhs: bad.shape().to_vec(),
            }
            .into());
        }
    }
    Ok(())
}

/// `−Σ_k Σ_{j≠k} Dist(h_k, h_j)`.
pub fn r_disen(maps: &[&Tensor], metric: DistMetric) -> Result<Tensor> {
    check_shapes(maps)?;
    let mut total = Tensor::scalar(0.0);
    for k in 0..maps.len() {
        for j in k + 1..maps.len() {
            // Both orders of the pair have the same distance.
            total = total.add(&dist(maps[k], maps[j], metric)?.scale(2.0))?;
        }
    }
    Ok(total.neg())
}

/// `Dist(mean_k h_k, h_category)`.
pub fn r_local(maps: &[&Tensor], category: &Tensor, metric: DistMetric) -> Result<Tensor> {
    let mut all = maps.to_vec();
    all.push(category);
    check_shapes(&all)?;
    if maps.is_empty() {
        return Err(DealError::Config("localization term needs at least one concept map".into()));
    }
    let mut sum = maps[0].clone();
    for m in &maps[1..] {
        sum = sum.add(m)?;
    }
    dist(&sum.scale(1.0 / maps.len() as f64), category, metric)
}

/// One image-caption pair with its category's concepts.
#[derive(Debug, Clone)]
pub struct Pair<'a> {
    pub image: Tensor,
    pub caption: &'a str,
    pub concepts: &'a CategoryConcepts,
}

/// Per-term values of one evaluation of the objective. A term whose weight
/// is zero is not computed and reads as 0.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RiskComponents {
    pub contr: f64,
    pub disen: f64,
    pub local: f64,
    pub total: f64,
}

/// Texts encoded once per evaluation of the objective.
struct TextCache<'b, 'm> {
    bound: &'b Bound<'m>,
    tokenizer: &'b Tokenizer,
    cache: HashMap<String, Tensor>,
}

impl TextCache<'_, '_> {
    fn get(&mut self, text: &str) -> Result<Tensor> {
        if let Some(t) = self.cache.get(text) {
            return Ok(t.clone());
        }
        let t = self.bound.encode_text(&self.tokenizer.tokenize(text))?;
        self.cache.insert(text.to_string(), t.clone());
        Ok(t)
    }
}

/// `L_contr + λ·mean R_disen + γ·mean R_local` over the batch.
pub fn total_risk(bound: &Bound, tokenizer: &Tokenizer, batch: &[Pair], deal: &DealConfig) -> Result<(Tensor, RiskComponents)> {
    if batch.is_empty() {
        return Err(DealError::Config("empty batch".into()));
    }
    let mut texts = TextCache {
        bound,
        tokenizer,
        cache: HashMap::new(),
    };
    let temperature = bound.log_temperature().exp()?;
    if deal.lambda == 0.0 && deal.gamma == 0.0 {
        let images: Vec<Tensor> = batch.iter().map(|p| p.image.clone()).collect();
        let captions: Vec<Vec<usize>> = batch.iter().map(|p| tokenizer.tokenize(p.caption)).collect();
        let (v, t) = bound.forward_batch(&images, &captions)?;
        let contr = infonce(&v, &t, &temperature, deal.symmetric_contrastive)?;
        let value = contr.item()?;
        let components = RiskComponents {
            contr: value,
            disen: 0.0,
            local: 0.0,
            total: value,
        };
        return Ok((contr, components));
    }
    let mut image_rows = Vec::with_capacity(batch.len());
    let mut text_rows = Vec::with_capacity(batch.len());
    let mut disen_terms = Vec::new();
    let mut local_terms = Vec::new();
    for pair in batch {
        let explainer = Explainer::new(bound, &pair.image, deal.backend)?;
        image_rows.push(explainer.embedding().clone());
        text_rows.push(texts.get(pair.caption)?);
        let mut maps = Vec::with_capacity(pair.concepts.concepts.len());
        for concept in &pair.concepts.concepts {
            let h = explainer.heatmap(&texts.get(concept)?, true)?;
            maps.push(normalize(&h, deal.heatmap_normalization)?.grid);
        }
        let refs: Vec<&Tensor> = maps.iter().collect();
        if deal.lambda > 0.0 {
            disen_terms.push(r_disen(&refs, deal.dist_metric)?);
        }
        if deal.gamma > 0.0 {
            let h = explainer.heatmap(&texts.get(&pair.concepts.name)?, true)?;
            let category = normalize(&h, deal.heatmap_normalization)?.grid;
            local_terms.push(r_local(&refs, &category, deal.dist_metric)?);
        }
    }
    let v = stack_rows(&image_rows)?;
    let t = stack_rows(&text_rows)?;
    let contr = infonce(&v, &t, &temperature, deal.symmetric_contrastive)?;
    let mut total = contr.clone();
    let mut components = RiskComponents {
        contr: contr.item()?,
        disen: 0.0,
        local: 0.0,
        total: 0.0,
    };
    if deal.lambda > 0.0 {
        let disen = mean(&disen_terms)?;
        components.disen = disen.item()?;
        total = total.add(&disen.scale(deal.lambda))?;
    }
    if deal.gamma > 0.0 {
        let local = mean(&local_terms)?;
        components.local = local.item()?;
        total = total.add(&local.scale(deal.gamma))?;
    }
    components.total = total.item()?;
    if !components.total.is_finite() {
        return Err(DealError::NonFinite { what: "total loss".into() });
    }
    Ok((total, components))
}

fn mean(terms: &[Tensor]) -> Result<Tensor> {
    let mut sum = terms[0].clone();
    for t in &terms[1..] {
        sum = sum.add(t)?;
    }
    Ok(sum.scale(1.0 / terms.len() as f64))
}

/// First and second moment estimates per parameter.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct AdamState {
    pub m: BTreeMap<String, Vec<f64>>,
    pub v: BTreeMap<String, Vec<f64>>,
}

/// One AdamW step (`step` counts from 1) on every parameter named in
/// `grads`; others are left untouched.
pub fn adam_update(
    params: &mut BTreeMap<String, Param>,
    grads: &BTreeMap<String, Vec<f64>>,
    state: &mut AdamState,
    cfg: &TrainConfig,
    step: usize,
) -> Result<()> {
    if step == 0 {
        return Err(DealError::Config("optimizer steps count from 1".into()));
    }
    for (name, g) in grads {
        if g.iter().any(|x| !x.is_finite()) {
            return Err(DealError::NonFinite {
                what: format!("gradient of {name}"),
            });
        }
        let len = params.get(name).map(|p| p.data.len());
        if len != Some(g.len()) {
            return Err(DealError::Config(format!("gradient for {name} does not match a parameter")));
        }
    }
    let (b1, b2) = (cfg.adam_beta1, cfg.adam_beta2);
    let c1 = 1.0 - b1.powi(step as i32);
    let c2 = 1.0 - b2.powi(step as i32);
    let lr = cfg.learning_rate;
    let decay = 1.0 - lr * cfg.weight_decay;
    for (name, g) in grads {
        let p = params.get_mut(name).expect("checked above");
        let m = state.m.entry(name.clone()).or_insert_with(|| vec![0.0; g.len()]);
        let v = state.v.entry(name.clone()).or_insert_with(|| vec![0.0; g.len()]);
        for i in 0..g.len() {
            m[i] = b1 * m[i] + (1.0 - b1) * g[i];
            v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
            let m_hat = m[i] / c1;
            let v_hat = v[i] / c2;
            p.data[i] = p.data[i] * decay - lr * m_hat / (v_hat.sqrt() + cfg.adam_eps);
        }
    }
    Ok(())
}
