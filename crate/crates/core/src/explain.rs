//! Gradient-based concept explanations over the vision token grid.
//!
//! Each backend maps (image, text embedding) to a nonnegative `G×G` map.
//! The maps are built from graph ops, so with `retain = true` they stay
//! differentiable with respect to the model parameters.

use std::fmt;
use std::str::FromStr;

use deal_tensor::{backward, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{DealError, Result};
use crate::model::{similarity, Bound, ImageEncoding, Tokenizer};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum Backend {
    /// Grad-CAM on the final vision block's input tokens.
    #[default]
    GradcamToken,
    /// Gradient-weighted attention rollout.
    AttnGradRollout,
    /// Per-patch |gradient ⊙ input|.
    InputGrad,
}

impl Backend {
    pub const ALL: [Backend; 3] = [Backend::GradcamToken, Backend::AttnGradRollout, Backend::InputGrad];

    pub fn as_str(self) -> &'static str {
        match self {
            Backend::GradcamToken => "gradcam-token",
            Backend::AttnGradRollout => "attn-grad-rollout",
            Backend::InputGrad => "input-grad",
        }
    }
}

impl fmt::Display for Backend {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Backend {
    type Err = DealError;

    fn from_str(s: &str) -> Result<Backend> {
        Backend::ALL
            .into_iter()
            .find(|b| b.as_str() == s)
            .ok_or_else(|| DealError::Config(format!("unsupported explanation backend {s:?}")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum Normalization {
    None,
    #[default]
    Sum,
    MinMax,
}

#[derive(Debug, Clone)]
pub struct Heatmap {
    /// `[G, G]` relevance values.
    pub grid: Tensor,
    pub backend: Backend,
    pub normalization: Normalization,
    /// Set when normalization met a constant (or all-zero) map.
    pub degenerate: bool,
}

impl Heatmap {
    pub fn side(&self) -> usize {
        self.grid.dim(0)
    }

    pub fn values(&self) -> &[f64] {
        self.grid.data()
    }

    pub fn from_values(values: Vec<f64>, side: usize, backend: Backend) -> Result<Heatmap> {
        Ok(Heatmap {
            grid: Tensor::new(values, &[side, side])?,
            backend,
            normalization: Normalization::None,
            degenerate: false,
        })
    }
}

/// One image encoded once and explained against any number of texts.
pub struct Explainer<'a, 'm> {
    bound: &'a Bound<'m>,
    image: Tensor,
    encoding: ImageEncoding,
    backend: Backend,
}

impl<'a, 'm> Explainer<'a, 'm> {
    pub fn new(bound: &'a Bound<'m>, image: &Tensor, backend: Backend) -> Result<Self> {
        let image = match backend {
            Backend::InputGrad => image.detach().with_grad(),
            _ => image.clone(),
        };
        let encoding = bound.encode_image(&image)?;
        Ok(Explainer {
            bound,
            image,
            encoding,
            backend,
        })
    }

    pub fn encoding(&self) -> &ImageEncoding {
        &self.encoding
    }

    pub fn embedding(&self) -> &Tensor {
        &self.encoding.embedding
    }

    /// Unnormalized map for one text embedding. `retain` keeps the map on the
    /// graph for a later backward pass through it.
    pub fn heatmap(&self, text_embedding: &Tensor, retain: bool) -> Result<Heatmap> {
        let cfg = self.bound.config();
        let g = cfg.grid();
        let score = similarity(&self.encoding.embedding, text_embedding)?;
        if !score.requires_grad() {
            return Err(DealError::Config("explanations need a model bound with gradients enabled".into()));
        }
        let grid = match self.backend {
            Backend::GradcamToken => {
                let feats = &self.encoding.features;
                let grad = backward(&score, &[feats], retain)?.remove(0);
                check_finite(&grad)?;
                let weights = grad.narrow(0, 1, g * g)?.mean_axis(0, true)?;
                feats
                    .narrow(0, 1, g * g)?
                    .mul(&weights)?
                    .sum_axis(1, false)?
                    .relu()
                    .reshape(&[g, g])?
            }
            Backend::AttnGradRollout => {
                let maps: Vec<&Tensor> = self.encoding.attention.iter().collect();
                let grads = backward(&score, &maps, retain)?;
                let tokens = g * g + 1;
                let mut relevance = Tensor::eye(tokens);
                let last = maps.len() - 1;
                let mut pooled = None;
                for (l, (a, ga)) in maps.iter().zip(&grads).enumerate() {
                    check_finite(ga)?;
                    let weighted = a.mul(ga)?.relu().mean_axis(0, false)?;
                    if l == last {
                        // Final layer attends from the class token only.
                        pooled = Some(relevance.narrow(0, 0, 1)?.add(&weighted.matmul(&relevance)?)?);
                    } else {
                        relevance = relevance.add(&weighted.matmul(&relevance)?)?;
                    }
                }
                pooled.expect("at least one layer").narrow(1, 1, g * g)?.reshape(&[g, g])?
            }
            Backend::InputGrad => {
                let grad = backward(&score, &[&self.image], retain)?.remove(0);
                check_finite(&grad)?;
                let p = cfg.patch_size;
                grad.mul(&self.image)?
                    .abs()
                    .reshape(&[cfg.channels, g, p, g, p])?
                    .sum_axis(4, false)?
                    .sum_axis(2, false)?
                    .sum_axis(0, false)?
            }
        };
        Ok(Heatmap {
            grid,
            backend: self.backend,
            normalization: Normalization::None,
            degenerate: false,
        })
    }
}

fn check_finite(t: &Tensor) -> Result<()> {
    if t.all_finite() {
        Ok(())
    } else {
        Err(DealError::NonFinite {
            what: "explanation gradient".into(),
        })
    }
}

/// Explains `image` with respect to `text`.
pub fn explain(bound: &Bound, tokenizer: &Tokenizer, image: &Tensor, text: &str, backend: Backend) -> Result<Heatmap> {
    let ids = tokenizer.tokenize(text);
    let t = bound.encode_text(&ids)?;
    Explainer::new(bound, image, backend)?.heatmap(&t, false)
}

const SUM_EPS: f64 = 1e-12;

/// `sum` divides by the total (differentiable); `min-max` rescales to
/// `[0, 1]` on detached values and is meant for evaluation and rendering.
pub fn normalize(h: &Heatmap, mode: Normalization) -> Result<Heatmap> {
    match mode {
        Normalization::None => Ok(h.clone()),
        Normalization::Sum => {
            let total = h.grid.sum_all();
            let degenerate = total.item()? == 0.0;
            Ok(Heatmap {
                grid: h.grid.div(&total.shift(SUM_EPS))?,
                normalization: Normalization::Sum,
                degenerate,
                ..h.clone()
            })
        }
        Normalization::MinMax => {
            let (values, degenerate) = minmax_values(h.values());
            Ok(Heatmap {
                grid: Tensor::new(values, h.grid.shape())?,
                normalization: Normalization::MinMax,
                degenerate,
                ..h.clone()
            })
        }
    }
}

/// `(x − min)/(max − min)`; constant input gives zeros and `true`.
pub fn minmax_values(values: &[f64]) -> (Vec<f64>, bool) {
    let min = values.iter().copied().fold(f64::INFINITY, f64::min);
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !(max > min) {
        return (vec![0.0; values.len()], true);
    }
    (values.iter().map(|v| (v - min) / (max - min)).collect(), false)
}

/// Replicates each of the `side×side` cells into a block of a
/// `height×width` pixel grid.
pub fn upsample_nearest(values: &[f64], side: usize, height: usize, width: usize) -> Result<Vec<f64>> {
    if side == 0 || !height.is_multiple_of(side) || !width.is_multiple_of(side) || values.len() != side * side {
        return Err(DealError::Config(format!(
            "cannot upsample a {side}x{side} grid to {height}x{width}"
        )));
    }
    let (bh, bw) = (height / side, width / side);
    let mut out = Vec::with_capacity(height * width);
    for y in 0..height {
        for x in 0..width {
            out.push(values[(y / bh) * side + x / bw]);
        }
    }
    Ok(out)
}

/// `1` where the value reaches `threshold`.
pub fn binarize(values: &[f64], threshold: f64) -> Vec<u8> {
    values.iter().map(|&v| u8::from(v >= threshold)).collect()
}

/// Plain-text portable graymap of the min-max normalized map.
pub fn to_pgm(h: &Heatmap) -> String {
    let side = h.side();
    let (values, _) = minmax_values(h.values());
    let mut out = format!("P2\n{side} {side}\n255\n");
    for row in values.chunks(side) {
        let line: Vec<String> = row.iter().map(|v| format!("{}", (255.0 * v).round() as u8)).collect();
        out.push_str(&line.join(" "));
        out.push('\n');
    }
    out
}

/// Raw values, one grid row per line, 17 significant digits.
pub fn to_csv(h: &Heatmap) -> String {
    let side = h.side();
    let mut out = String::new();
    for row in h.values().chunks(side) {
        let line: Vec<String> = row.iter().map(|v| crate::format::sig17(*v)).collect();
        out.push_str(&line.join(","));
        out.push('\n');
    }
    out
}
