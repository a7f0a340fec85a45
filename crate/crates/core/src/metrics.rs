//! Disentanglability, insertion-curve localizability, concept-ensemble
//! accuracy, and part-mask IoU.

use std::thread;

use deal_tensor::{no_grad, Tensor};
use serde::{Deserialize, Serialize};

use crate::concepts::{CategoryConcepts, ConceptSet};
use crate::error::{DealError, Result};
use crate::explain::{binarize, minmax_values, upsample_nearest, Backend, Explainer};
use crate::model::{similarity, Bound, MiniClip, Tokenizer};
use crate::synth::{Dataset, SyntheticSample};

pub const DEFAULT_THRESHOLD: f64 = 0.5;
const BLUR_RADIUS: usize = 2;
const BLUR_PASSES: usize = 3;

/// Which metrics an evaluation computes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MetricSelection {
    pub disentanglability: bool,
    pub localizability: bool,
    pub accuracy: bool,
    pub miou: bool,
}

impl Default for MetricSelection {
    fn default() -> Self {
        MetricSelection::all()
    }
}

impl MetricSelection {
    pub fn all() -> Self {
        MetricSelection {
            disentanglability: true,
            localizability: true,
            accuracy: true,
            miou: true,
        }
    }

    pub fn none() -> Self {
        MetricSelection {
            disentanglability: false,
            localizability: false,
            accuracy: false,
            miou: false,
        }
    }

    fn needs_heatmaps(&self) -> bool {
        self.disentanglability || self.localizability || self.miou
    }
}

/// Sums and counts for one category; the headline numbers are these
/// aggregated over categories.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CategoryBreakdown {
    pub name: String,
    pub samples: usize,
    /// `(sample, concept)` pairs.
    pub pairs: usize,
    pub disentanglability_sum: Option<f64>,
    pub localizability_sum: Option<f64>,
    pub correct: Option<usize>,
    pub miou_sum: Option<f64>,
    pub disentanglability: Option<f64>,
    pub localizability: Option<f64>,
    pub accuracy: Option<f64>,
    pub miou: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub backend: Backend,
    pub samples: usize,
    pub disentanglability: Option<f64>,
    pub localizability: Option<f64>,
    pub accuracy: Option<f64>,
    pub miou: Option<f64>,
    pub per_category: Vec<CategoryBreakdown>,
}

impl MetricReport {
    pub fn to_json(&self) -> String {
        let mut s = crate::format::to_json_pretty(self);
        s.push('\n');
        s
    }
}

/// Headline means recomputed from a breakdown.
pub fn aggregate(per_category: &[CategoryBreakdown]) -> (Option<f64>, Option<f64>, Option<f64>, Option<f64>) {
    let samples: usize = per_category.iter().map(|c| c.samples).sum();
    let pairs: usize = per_category.iter().map(|c| c.pairs).sum();
    let total = |f: &dyn Fn(&CategoryBreakdown) -> Option<f64>| -> Option<f64> {
        per_category.iter().map(f).sum::<Option<f64>>()
    };
    let ratio = |sum: Option<f64>, n: usize| sum.map(|s| if n == 0 { 0.0 } else { s / n as f64 });
    (
        ratio(total(&|c| c.disentanglability_sum), samples),
        ratio(total(&|c| c.localizability_sum), pairs),
        ratio(total(&|c| c.correct.map(|n| n as f64)), samples),
        ratio(total(&|c| c.miou_sum), pairs),
    )
}

/// Mean over unordered pairs of the per-cell mean absolute difference of
/// min-max normalized maps. Fewer than two maps score 0.
pub fn disentanglability_of_maps(maps: &[Vec<f64>]) -> f64 {
    let normed: Vec<Vec<f64>> = maps.iter().map(|m| minmax_values(m).0).collect();
    let mut sum = 0.0;
    let mut count = 0usize;
    for i in 0..normed.len() {
        for j in i + 1..normed.len() {
            let (a, b) = (&normed[i], &normed[j]);
            sum += a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum::<f64>() / a.len() as f64;
            count += 1;
        }
    }
    if count == 0 {
        0.0
    } else {
        sum / count as f64
    }
}

/// Trapezoidal mean of the min-max normalized insertion curve; a constant
/// curve scores 0.5.
pub fn iauc_from_scores(scores: &[f64]) -> f64 {
    let (normed, degenerate) = minmax_values(scores);
    if degenerate || scores.len() < 2 {
        return 0.5;
    }
    let area: f64 = normed.windows(2).map(|w| (w[0] + w[1]) / 2.0).sum();
    area / (normed.len() - 1) as f64
}

/// Cells in descending order of value, ties by index.
pub fn insertion_order(values: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[b].total_cmp(&values[a]).then(a.cmp(&b)));
    order
}

/// Three passes of a 5×5 box blur per channel, clamping at the edges.
pub fn blurred_canvas(image: &[f64], channels: usize, height: usize, width: usize) -> Vec<f64> {
    let mut cur = image.to_vec();
    let r = BLUR_RADIUS as i64;
    let taps = ((2 * r + 1) * (2 * r + 1)) as f64;
    for _ in 0..BLUR_PASSES {
        let mut next = vec![0.0; cur.len()];
        for c in 0..channels {
            let plane = &cur[c * height * width..(c + 1) * height * width];
            for y in 0..height as i64 {
                for x in 0..width as i64 {
                    let mut acc = 0.0;
                    for dy in -r..=r {
                        let yy = (y + dy).clamp(0, height as i64 - 1) as usize;
                        for dx in -r..=r {
                            let xx = (x + dx).clamp(0, width as i64 - 1) as usize;
                            acc += plane[yy * width + xx];
                        }
                    }
                    next[c * height * width + y as usize * width + x as usize] = acc / taps;
                }
            }
        }
        cur = next;
    }
    cur
}

/// `|A ∩ B| / |A ∪ B|`, with two empty sets scoring 1.
pub fn iou(pred: &[u8], truth: &[u8]) -> f64 {
    let inter = pred.iter().zip(truth).filter(|(p, t)| **p != 0 && **t != 0).count();
    let union = pred.iter().zip(truth).filter(|(p, t)| **p != 0 || **t != 0).count();
    if union == 0 {
        1.0
    } else {
        inter as f64 / union as f64
    }
}

/// Argmax of per-category mean similarities, ties to the lowest index.
pub fn predict_from_similarities(per_category: &[Vec<f64>]) -> Result<(usize, Vec<f64>)> {
    if per_category.is_empty() {
        return Err(DealError::Config("cannot predict with an empty concept set".into()));
    }
    let scores: Vec<f64> = per_category
        .iter()
        .map(|s| s.iter().sum::<f64>() / s.len() as f64)
        .collect();
    let mut best = 0;
    for (i, &s) in scores.iter().enumerate() {
        if s > scores[best] {
            best = i;
        }
    }
    Ok((best, scores))
}

/// Text embeddings of every concept, category by category.
pub struct ConceptBank {
    embeddings: Vec<Vec<Tensor>>,
}

impl ConceptBank {
    pub fn new(bound: &Bound, tokenizer: &Tokenizer, concepts: &ConceptSet) -> Result<ConceptBank> {
        no_grad(|| {
            let embeddings = concepts
                .categories
                .iter()
                .map(|c| {
                    c.concepts
                        .iter()
                        .map(|text| bound.encode_text(&tokenizer.tokenize(text)))
                        .collect::<Result<Vec<_>>>()
                })
                .collect::<Result<Vec<_>>>()?;
            Ok(ConceptBank { embeddings })
        })
    }

    pub fn category(&self, index: usize) -> &[Tensor] {
        &self.embeddings[index]
    }

    /// Predicted category index and the per-category mean similarities.
    pub fn predict(&self, image_embedding: &Tensor) -> Result<(usize, Vec<f64>)> {
        let sims = self
            .embeddings
            .iter()
            .map(|ts| ts.iter().map(|t| Ok(similarity(image_embedding, t)?.item()?)).collect::<Result<Vec<f64>>>())
            .collect::<Result<Vec<_>>>()?;
        predict_from_similarities(&sims)
    }
}

/// Predicted category for one image: the category whose concepts are on
/// average most similar to it.
pub fn concept_predict(model: &MiniClip, tokenizer: &Tokenizer, image: &Tensor, concepts: &ConceptSet) -> Result<(usize, Vec<f64>)> {
    if concepts.is_empty() {
        return Err(DealError::Config("cannot predict with an empty concept set".into()));
    }
    let bound = model.bind(false);
    let bank = ConceptBank::new(&bound, tokenizer, concepts)?;
    let v = no_grad(|| bound.encode_image(image))?.embedding;
    bank.predict(&v)
}

/// Insertion-curve score of one heatmap: patches are restored onto the
/// blurred canvas in descending heatmap order.
pub fn iauc_for_heatmap(bound: &Bound, image: &Tensor, canvas: &[f64], heatmap: &[f64], text: &Tensor) -> Result<f64> {
    let cfg = bound.config();
    let (g, p, size) = (cfg.grid(), cfg.patch_size, cfg.image_size);
    if heatmap.len() != g * g || canvas.len() != image.numel() {
        return Err(DealError::Config("heatmap or canvas does not match the model grid".into()));
    }
    let original = image.data();
    let mut current = canvas.to_vec();
    let mut scores = Vec::with_capacity(g * g + 1);
    no_grad(|| -> Result<()> {
        let score = |pixels: &[f64]| -> Result<f64> {
            let x = Tensor::new(pixels.to_vec(), image.shape())?;
            Ok(similarity(&bound.encode_image(&x)?.embedding, text)?.item()?)
        };
        scores.push(score(&current)?);
        for cell in insertion_order(heatmap) {
            let (gy, gx) = (cell / g, cell % g);
            for c in 0..cfg.channels {
                for y in gy * p..(gy + 1) * p {
                    let row = c * size * size + y * size;
                    current[row + gx * p..row + (gx + 1) * p].copy_from_slice(&original[row + gx * p..row + (gx + 1) * p]);
                }
            }
            scores.push(score(&current)?);
        }
        Ok(())
    })?;
    Ok(iauc_from_scores(&scores))
}

/// Per-sample contributions, before aggregation.
#[derive(Debug, Clone, Default)]
struct SampleScores {
    disentanglability: f64,
    localizability: f64,
    miou: f64,
    correct: bool,
    pairs: usize,
}

struct Evaluator<'a> {
    bound: Bound<'a>,
    bank: ConceptBank,
    backend: Backend,
    selection: MetricSelection,
    threshold: f64,
}

impl Evaluator<'_> {
    fn sample(&self, s: &SyntheticSample, entry: &CategoryConcepts, label: usize) -> Result<SampleScores> {
        let cfg = self.bound.config();
        let (g, size) = (cfg.grid(), cfg.image_size);
        let image = s.image_tensor();
        let texts = self.bank.category(label);
        let explainer = Explainer::new(&self.bound, &image, self.backend)?;
        let mut out = SampleScores {
            pairs: entry.concepts.len(),
            ..SampleScores::default()
        };
        if self.selection.accuracy {
            out.correct = self.bank.predict(&explainer.embedding().detach())?.0 == label;
        }
        if !self.selection.needs_heatmaps() {
            return Ok(out);
        }
        let maps = texts
            .iter()
            .map(|t| Ok(explainer.heatmap(t, false)?.values().to_vec()))
            .collect::<Result<Vec<_>>>()?;
        drop(explainer);
        if self.selection.disentanglability {
            out.disentanglability = disentanglability_of_maps(&maps);
        }
        if self.selection.miou {
            if s.masks.len() != maps.len() || s.masks.iter().any(|m| m.len() != size * size) {
                return Err(DealError::Dataset(format!(
                    "expected {} masks of {size}x{size}, found {}",
                    maps.len(),
                    s.masks.len()
                )));
            }
            for (map, mask) in maps.iter().zip(&s.masks) {
                let (normed, _) = minmax_values(map);
                let pixels = upsample_nearest(&normed, g, size, size)?;
                out.miou += iou(&binarize(&pixels, self.threshold), mask);
            }
        }
        if self.selection.localizability {
            let canvas = blurred_canvas(image.data(), cfg.channels, size, size);
            for (map, t) in maps.iter().zip(texts) {
                out.localizability += iauc_for_heatmap(&self.bound, &image, &canvas, map, t)?;
            }
        }
        Ok(out)
    }
}

/// Worker count from `DEAL_THREADS`, default 1.
pub fn eval_threads() -> usize {
    std::env::var("DEAL_THREADS")
        .ok()
        .and_then(|v| v.trim().parse::<usize>().ok())
        .filter(|&n| n > 0)
        .unwrap_or(1)
}

/// Evaluates the selected metrics over `dataset`, in parallel across
/// `threads` workers. Results do not depend on the worker count.
pub fn evaluate(
    model: &MiniClip,
    tokenizer: &Tokenizer,
    dataset: &Dataset,
    concepts: &ConceptSet,
    backend: Backend,
    selection: MetricSelection,
    threshold: f64,
    threads: usize,
) -> Result<MetricReport> {
    if dataset.samples.is_empty() {
        return Err(DealError::Dataset("evaluation set is empty".into()));
    }
    if !(threshold > 0.0 && threshold < 1.0) {
        return Err(DealError::Config(format!("threshold must lie in (0, 1), got {threshold}")));
    }
    let labels = dataset
        .categories
        .iter()
        .map(|name| concepts.index_of(name).ok_or_else(|| DealError::UnknownCategory(name.clone())))
        .collect::<Result<Vec<_>>>()?;

    let run = |chunk: &[SyntheticSample]| -> Result<Vec<SampleScores>> {
        // Explanations need parameters on the graph; everything else runs
        // without recording.
        let bound = model.bind(true);
        let bank = ConceptBank::new(&bound, tokenizer, concepts)?;
        let ev = Evaluator {
            bound,
            bank,
            backend,
            selection,
            threshold,
        };
        chunk
            .iter()
            .map(|s| {
                let label = labels[s.category_index];
                ev.sample(s, &concepts.categories[label], label)
            })
            .collect()
    };

    let threads = threads.clamp(1, dataset.samples.len());
    let chunk = dataset.samples.len().div_ceil(threads);
    let scores: Vec<SampleScores> = if threads == 1 {
        run(&dataset.samples)?
    } else {
        thread::scope(|scope| {
            let handles: Vec<_> = dataset.samples.chunks(chunk).map(|c| scope.spawn(move || run(c))).collect();
            let mut all = Vec::with_capacity(dataset.samples.len());
            for h in handles {
                all.extend(h.join().expect("evaluation worker panicked")?);
            }
            Ok::<_, DealError>(all)
        })?
    };

    let mut per_category: Vec<CategoryBreakdown> = Vec::new();
    for (ci, name) in dataset.categories.iter().enumerate() {
        let mut b = CategoryBreakdown {
            name: name.clone(),
            samples: 0,
            pairs: 0,
            disentanglability_sum: selection.disentanglability.then_some(0.0),
            localizability_sum: selection.localizability.then_some(0.0),
            correct: selection.accuracy.then_some(0),
            miou_sum: selection.miou.then_some(0.0),
            disentanglability: None,
            localizability: None,
            accuracy: None,
            miou: None,
        };
        for (s, sc) in dataset.samples.iter().zip(&scores) {
            if s.category_index != ci {
                continue;
            }
            b.samples += 1;
            b.pairs += sc.pairs;
            add(&mut b.disentanglability_sum, sc.disentanglability);
            add(&mut b.localizability_sum, sc.localizability);
            add(&mut b.miou_sum, sc.miou);
            if let Some(n) = b.correct.as_mut() {
                *n += usize::from(sc.correct);
            }
        }
        if b.samples == 0 {
            continue;
        }
        let (d, l, a, m) = aggregate(std::slice::from_ref(&b));
        (b.disentanglability, b.localizability, b.accuracy, b.miou) = (d, l, a, m);
        per_category.push(b);
    }
    let (disentanglability, localizability, accuracy, miou) = aggregate(&per_category);
    Ok(MetricReport {
        backend,
        samples: dataset.samples.len(),
        disentanglability,
        localizability,
        accuracy,
        miou,
        per_category,
    })
}

fn add(slot: &mut Option<f64>, v: f64) {
    if let Some(s) = slot.as_mut() {
        *s += v;
    }
}

fn only(
    model: &MiniClip,
    tokenizer: &Tokenizer,
    dataset: &Dataset,
    concepts: &ConceptSet,
    backend: Backend,
    selection: MetricSelection,
    threshold: f64,
) -> Result<MetricReport> {
    evaluate(model, tokenizer, dataset, concepts, backend, selection, threshold, eval_threads())
}

pub fn disentanglability(model: &MiniClip, tokenizer: &Tokenizer, dataset: &Dataset, concepts: &ConceptSet, backend: Backend) -> Result<f64> {
    let sel = MetricSelection {
        disentanglability: true,
        ..MetricSelection::none()
    };
    Ok(only(model, tokenizer, dataset, concepts, backend, sel, DEFAULT_THRESHOLD)?
        .disentanglability
        .expect("selected"))
}

pub fn iauc_localizability(model: &MiniClip, tokenizer: &Tokenizer, dataset: &Dataset, concepts: &ConceptSet, backend: Backend) -> Result<f64> {
    let sel = MetricSelection {
        localizability: true,
        ..MetricSelection::none()
    };
    Ok(only(model, tokenizer, dataset, concepts, backend, sel, DEFAULT_THRESHOLD)?
        .localizability
        .expect("selected"))
}

pub fn accuracy(model: &MiniClip, tokenizer: &Tokenizer, dataset: &Dataset, concepts: &ConceptSet) -> Result<f64> {
    let sel = MetricSelection {
        accuracy: true,
        ..MetricSelection::none()
    };
    Ok(only(model, tokenizer, dataset, concepts, Backend::default(), sel, DEFAULT_THRESHOLD)?
        .accuracy
        .expect("selected"))
}

pub fn miou(
    model: &MiniClip,
    tokenizer: &Tokenizer,
    dataset: &Dataset,
    concepts: &ConceptSet,
    backend: Backend,
    threshold: f64,
) -> Result<f64> {
    let sel = MetricSelection {
        miou: true,
        ..MetricSelection::none()
    };
    Ok(only(model, tokenizer, dataset, concepts, backend, sel, threshold)?.miou.expect("selected"))
}
