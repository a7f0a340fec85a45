//! Two-tower model: a small vision transformer over image patches and a
//! small text transformer, both projected into a shared unit-norm space.

mod checkpoint;
mod config;
mod tokenizer;

use std::collections::BTreeMap;

use deal_tensor::{Init, Tensor};

pub use checkpoint::{load_checkpoint, save_checkpoint};
pub use config::{MiniClipConfig, MAX_TEMPERATURE, MIN_TEMPERATURE};
pub use tokenizer::{Tokenizer, BOS, EOS, PAD, UNK};

use crate::error::{DealError, Result};
use crate::seed::mix;

const LN_EPS: f64 = 1e-5;
const NORM_EPS: f64 = 1e-24;

#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MiniClip {
    config: MiniClipConfig,
    params: BTreeMap<String, Param>,
}

struct ParamBuilder {
    seed: u64,
    next: u64,
    params: BTreeMap<String, Param>,
}

impl ParamBuilder {
    fn add(&mut self, name: String, shape: &[usize], init: Init) {
        let seed = mix(&[self.seed, self.next]);
        self.next += 1;
        let t = Tensor::seeded(shape, init, seed);
        self.params.insert(
            name,
            Param {
                shape: shape.to_vec(),
                data: t.to_vec(),
            },
        );
    }

    fn constant(&mut self, name: String, shape: &[usize], value: f64) {
        self.next += 1;
        let n = shape.iter().product();
        self.params.insert(
            name,
            Param {
                shape: shape.to_vec(),
                data: vec![value; n],
            },
        );
    }

    fn linear(&mut self, name: &str, fan_in: usize, fan_out: usize, gain: f64) {
        let std = gain / (fan_in as f64).sqrt();
        self.add(format!("{name}.w"), &[fan_in, fan_out], Init::Normal { std });
        self.constant(format!("{name}.b"), &[fan_out], 0.0);
    }

    fn layer_norm(&mut self, name: &str, dim: usize) {
        self.constant(format!("{name}.g"), &[dim], 1.0);
        self.constant(format!("{name}.b"), &[dim], 0.0);
    }

    fn block(&mut self, name: &str, cfg: &MiniClipConfig, layers: usize) {
        let d = cfg.embed_dim;
        let residual_gain = 1.0 / ((2 * layers) as f64).sqrt();
        self.layer_norm(&format!("{name}.ln1"), d);
        for proj in ["q", "k", "v"] {
            self.linear(&format!("{name}.attn.{proj}"), d, d, 1.0);
        }
        self.linear(&format!("{name}.attn.o"), d, d, residual_gain);
        self.layer_norm(&format!("{name}.ln2"), d);
        self.linear(&format!("{name}.mlp.fc1"), d, d * cfg.mlp_ratio, 2f64.sqrt());
        self.linear(&format!("{name}.mlp.fc2"), d * cfg.mlp_ratio, d, residual_gain);
    }
}

impl MiniClip {
    pub fn new(config: MiniClipConfig) -> Result<MiniClip> {
        config.validate()?;
        let c = &config;
        let d = c.embed_dim;
        let mut b = ParamBuilder {
            seed: c.seed,
            next: 0,
            params: BTreeMap::new(),
        };
        let patch_dim = c.channels * c.patch_size * c.patch_size;
        b.linear("vision.patch", patch_dim, d, 1.0);
        b.add("vision.cls".into(), &[1, d], Init::Normal { std: 0.1 });
        b.add("vision.pos".into(), &[c.num_patches() + 1, d], Init::Normal { std: 0.1 });
        for l in 0..c.num_layers_vision {
            b.block(&format!("vision.block{l}"), c, c.num_layers_vision);
        }
        b.layer_norm("vision.ln_post", d);
        b.add("vision.proj".into(), &[d, c.projection_dim], Init::Normal { std: 1.0 / (d as f64).sqrt() });

        b.add("text.token".into(), &[c.vocab_size, d], Init::Normal { std: 0.1 });
        b.add("text.pos".into(), &[c.max_text_len, d], Init::Normal { std: 0.1 });
        for l in 0..c.num_layers_text {
            b.block(&format!("text.block{l}"), c, c.num_layers_text);
        }
        b.layer_norm("text.ln_final", d);
        b.add("text.proj".into(), &[d, c.projection_dim], Init::Normal { std: 1.0 / (d as f64).sqrt() });

        b.constant("log_temperature".into(), &[], c.init_temperature.ln());
        Ok(MiniClip {
            config,
            params: b.params,
        })
    }

    pub fn from_params(config: MiniClipConfig, params: BTreeMap<String, Param>) -> Result<MiniClip> {
        let reference = MiniClip::new(config.clone())?;
        if reference.params.len() != params.len() {
            return Err(DealError::Checkpoint(format!(
                "expected {} parameters, found {}",
                reference.params.len(),
                params.len()
            )));
        }
        for (name, p) in &reference.params {
            match params.get(name) {
                Some(q) if q.shape == p.shape && q.data.iter().all(|v| v.is_finite()) => {}
                Some(q) => {
                    return Err(DealError::Checkpoint(format!(
                        "parameter {name}: shape {:?} (expected {:?}) or non-finite values",
                        q.shape, p.shape
                    )))
                }
                None => return Err(DealError::Checkpoint(format!("missing parameter {name}"))),
            }
        }
        Ok(MiniClip { config, params })
    }

    pub fn config(&self) -> &MiniClipConfig {
        &self.config
    }

    pub fn params(&self) -> &BTreeMap<String, Param> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut BTreeMap<String, Param> {
        &mut self.params
    }

    pub fn num_parameters(&self) -> usize {
        self.params.values().map(|p| p.data.len()).sum()
    }

    pub fn temperature(&self) -> f64 {
        self.params["log_temperature"].data[0].exp()
    }

    /// Keeps the temperature inside `[MIN_TEMPERATURE, MAX_TEMPERATURE]`.
    pub fn clamp_temperature(&mut self) {
        let p = self.params.get_mut("log_temperature").expect("log_temperature exists");
        p.data[0] = p.data[0].clamp(MIN_TEMPERATURE.ln(), MAX_TEMPERATURE.ln());
    }

    /// Materializes the parameters as graph leaves. With `requires_grad`
    /// false, everything computed from them is a constant.
    pub fn bind(&self, requires_grad: bool) -> Bound<'_> {
        let tensors = self
            .params
            .iter()
            .map(|(name, p)| {
                let t = Tensor::new(p.data.clone(), &p.shape).expect("param shape matches data");
                (name.as_str(), if requires_grad { t.with_grad() } else { t })
            })
            .collect();
        Bound { model: self, tensors }
    }
}

/// Output of the vision tower.
#[derive(Debug, Clone)]
pub struct ImageEncoding {
    /// Unit-norm image embedding, `[projection_dim]`.
    pub embedding: Tensor,
    /// Normalized input tokens of the final vision block, `[1 + G², D]`
    /// (row 0 is the class token). This is the tensor gradient-based
    /// explanations differentiate against.
    pub features: Tensor,
    /// Attention probabilities per layer, `[heads, queries, tokens]`. The
    /// final layer only attends from the class token, so it has one query.
    pub attention: Vec<Tensor>,
}

impl ImageEncoding {
    /// Patch rows of [`ImageEncoding::features`] as a `[G, G, D]` grid.
    pub fn token_features(&self, grid: usize) -> Result<Tensor> {
        let d = self.features.dim(1);
        Ok(self.features.narrow(0, 1, grid * grid)?.reshape(&[grid, grid, d])?)
    }
}

struct BlockOutput {
    out: Tensor,
    normed: Tensor,
    attention: Tensor,
}

/// Parameters bound onto the current differentiation graph.
pub struct Bound<'m> {
    model: &'m MiniClip,
    tensors: BTreeMap<&'m str, Tensor>,
}

impl<'m> Bound<'m> {
    pub fn model(&self) -> &'m MiniClip {
        self.model
    }

    pub fn config(&self) -> &'m MiniClipConfig {
        &self.model.config
    }

    pub fn get(&self, name: &str) -> &Tensor {
        self.tensors.get(name).unwrap_or_else(|| panic!("unknown parameter {name}"))
    }

    /// Name-ordered parameter tensors.
    pub fn named(&self) -> impl Iterator<Item = (&'m str, &Tensor)> {
        self.tensors.iter().map(|(k, v)| (*k, v))
    }

    /// Swaps in `value` for one parameter, e.g. a tensor that is a
    /// function of some other leaf.
    pub fn replace(&mut self, name: &str, value: Tensor) -> Result<()> {
        let slot = self
            .tensors
            .get_mut(name)
            .ok_or_else(|| DealError::Config(format!("unknown parameter {name}")))?;
        if slot.shape() != value.shape() {
            return Err(DealError::Config(format!(
                "parameter {name} has shape {:?}, replacement has {:?}",
                slot.shape(),
                value.shape()
            )));
        }
        *slot = value;
        Ok(())
    }

    pub fn log_temperature(&self) -> &Tensor {
        self.get("log_temperature")
    }

    fn linear(&self, x: &Tensor, name: &str) -> Result<Tensor> {
        Ok(x.matmul(self.get(&format!("{name}.w")))?.add(self.get(&format!("{name}.b")))?)
    }

    fn layer_norm(&self, x: &Tensor, name: &str) -> Result<Tensor> {
        Ok(x
            .layer_norm(LN_EPS)?
            .mul(self.get(&format!("{name}.g")))?
            .add(self.get(&format!("{name}.b")))?)
    }

    fn split_heads(&self, x: &Tensor) -> Result<Tensor> {
        let c = self.config();
        let t = x.dim(0);
        Ok(x.reshape(&[t, c.num_heads, c.head_dim()])?.permute(&[1, 0, 2])?)
    }

    /// Pre-norm transformer block. With `query = Some(i)` only token `i`
    /// is updated (the other outputs would be discarded by the pooling).
    fn block(&self, x: &Tensor, name: &str, query: Option<usize>) -> Result<BlockOutput> {
        let c = self.config();
        let t = x.dim(0);
        let normed = self.layer_norm(x, &format!("{name}.ln1"))?;
        let (q_src, residual) = match query {
            Some(i) => (normed.narrow(0, i, 1)?, x.narrow(0, i, 1)?),
            None => (normed.clone(), x.clone()),
        };
        let tq = q_src.dim(0);
        let q = self.split_heads(&self.linear(&q_src, &format!("{name}.attn.q"))?)?;
        let k = self.split_heads(&self.linear(&normed, &format!("{name}.attn.k"))?)?;
        let v = self.split_heads(&self.linear(&normed, &format!("{name}.attn.v"))?)?;
        let scores = q.matmul(&k.t()?)?.scale(1.0 / (c.head_dim() as f64).sqrt());
        let attention = scores.softmax(2)?;
        let ctx = attention
            .matmul(&v)?
            .permute(&[1, 0, 2])?
            .reshape(&[tq, c.embed_dim])?;
        debug_assert_eq!(attention.shape(), &[c.num_heads, tq, t]);
        let h = residual.add(&self.linear(&ctx, &format!("{name}.attn.o"))?)?;
        let m = self
            .linear(&self.layer_norm(&h, &format!("{name}.ln2"))?, &format!("{name}.mlp.fc1"))?
            .relu();
        let out = h.add(&self.linear(&m, &format!("{name}.mlp.fc2"))?)?;
        Ok(BlockOutput {
            out,
            normed,
            attention,
        })
    }

    fn project(&self, pooled: &Tensor, ln: &str, proj: &str) -> Result<Tensor> {
        let z = self.layer_norm(pooled, ln)?.matmul(self.get(proj))?;
        let z = z.reshape(&[z.numel()])?;
        l2_normalize(&z)
    }

    /// Patch-embedding layer output, `[G², D]` in row-major patch order.
    pub fn patch_tokens(&self, image: &Tensor) -> Result<Tensor> {
        let c = self.config();
        let (g, p) = (c.grid(), c.patch_size);
        let patches = image
            .reshape(&[c.channels, g, p, g, p])?
            .permute(&[1, 3, 0, 2, 4])?
            .reshape(&[g * g, c.channels * p * p])?;
        self.linear(&patches, "vision.patch")
    }

    /// Image `[C, H, W]` with values in `[0, 1]`.
    pub fn encode_image(&self, image: &Tensor) -> Result<ImageEncoding> {
        let c = self.config();
        let expected = [c.channels, c.image_size, c.image_size];
        if image.shape() != expected {
            return Err(deal_tensor::TensorError::ShapeMismatch {
                op: "encode_image",
                lhs: image.shape().to_vec(),
                rhs: expected.to_vec(),
            }
            .into());
        }
        let tokens = self.patch_tokens(image)?;
        let mut x = Tensor::concat(&[self.get("vision.cls"), &tokens], 0)?.add(self.get("vision.pos"))?;
        let mut attention = Vec::with_capacity(c.num_layers_vision);
        let last = c.num_layers_vision - 1;
        let mut features = None;
        for l in 0..c.num_layers_vision {
            let query = (l == last).then_some(0);
            let b = self.block(&x, &format!("vision.block{l}"), query)?;
            attention.push(b.attention);
            if l == last {
                features = Some(b.normed);
            }
            x = b.out;
        }
        let embedding = self.project(&x, "vision.ln_post", "vision.proj")?;
        Ok(ImageEncoding {
            embedding,
            features: features.expect("at least one vision layer"),
            attention,
        })
    }

    /// Token ids, optionally right-padded with `PAD`. The embedding is read
    /// at the last non-pad position; pad positions are excluded from
    /// attention entirely.
    pub fn encode_text(&self, ids: &[usize]) -> Result<Tensor> {
        let c = self.config();
        if ids.len() > c.max_text_len {
            return Err(DealError::Text(format!("{} tokens exceed max_text_len {}", ids.len(), c.max_text_len)));
        }
        if let Some(&bad) = ids.iter().find(|&&i| i >= c.vocab_size) {
            return Err(DealError::Text(format!("token id {bad} outside vocabulary of {}", c.vocab_size)));
        }
        let len = ids.iter().position(|&i| i == PAD).unwrap_or(ids.len());
        if ids[len..].iter().any(|&i| i != PAD) {
            return Err(DealError::Text("padding must be trailing".into()));
        }
        if len == 0 {
            return Err(DealError::Text("empty token sequence".into()));
        }
        let tokens = self.get("text.token").gather_rows(&ids[..len])?;
        let mut x = tokens.add(&self.get("text.pos").narrow(0, 0, len)?)?;
        let last = c.num_layers_text - 1;
        for l in 0..c.num_layers_text {
            let query = (l == last).then_some(len - 1);
            x = self.block(&x, &format!("text.block{l}"), query)?.out;
        }
        self.project(&x, "text.ln_final", "text.proj")
    }

    /// Stacked unit-norm embeddings `V` and `T`, one row per pair.
    pub fn forward_batch(&self, images: &[Tensor], captions: &[Vec<usize>]) -> Result<(Tensor, Tensor)> {
        if images.len() != captions.len() || images.is_empty() {
            return Err(DealError::Config(format!(
                "batch needs equal nonzero counts, got {} images and {} captions",
                images.len(),
                captions.len()
            )));
        }
        let v = images
            .iter()
            .map(|im| self.encode_image(im).map(|e| e.embedding))
            .collect::<Result<Vec<_>>>()?;
        let t = captions.iter().map(|ids| self.encode_text(ids)).collect::<Result<Vec<_>>>()?;
        Ok((stack_rows(&v)?, stack_rows(&t)?))
    }
}

/// `x / ‖x‖₂`; the zero vector maps to zero.
pub fn l2_normalize(x: &Tensor) -> Result<Tensor> {
    let inv = x.square()?.sum_all().shift(NORM_EPS).powf(-0.5)?;
    Ok(x.mul(&inv)?)
}

/// Stacks 1-D tensors of equal length into a `[n, d]` matrix.
pub fn stack_rows(rows: &[Tensor]) -> Result<Tensor> {
    let reshaped = rows
        .iter()
        .map(|r| r.reshape(&[1, r.numel()]))
        .collect::<deal_tensor::Result<Vec<_>>>()?;
    let refs: Vec<&Tensor> = reshaped.iter().collect();
    Ok(Tensor::concat(&refs, 0)?)
}

/// Dot product of two unit vectors.
pub fn similarity(v: &Tensor, t: &Tensor) -> Result<Tensor> {
    Ok(v.dot(t)?)
}
