//! The four trainable networks and the inference operations built on them.
//!
//! - [`StyleNet`]: style embedding, `s = f(y) - f(x)` (or `f(y)` in the
//!   absolute ablation).
//! - [`ContentNet`]: spatially structured content embedding on an `l x l` grid.
//! - [`MaskedStyleTransformer`]: predicts the masked style row.
//! - [`Enhancer`]: renders an image under a style vector.

mod content;
mod enhancer;
mod layers;
mod rollout;
mod style;
mod transformer;

pub use content::{ContentNet, CONTENT_TRUNK_GRID};
pub use enhancer::Enhancer;
pub use rollout::rollout_masked_row;
pub use style::StyleNet;
pub use transformer::{MaskedStyleTransformer, MASK_TOKEN_STD};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{AttentionProbs, Graph, Tensor};
use crate::error::{Error, Result};
use crate::image::Image;

/// How a style embedding is derived from a pair.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StyleMode {
    /// `f(y) - f(x)`
    #[default]
    Residual,
    /// `f(y)`
    Absolute,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NetConfig {
    pub style_dim: usize,
    pub content_dim: usize,
    /// Side `l` of the content grid.
    pub grid: usize,
    pub transformer_layers: usize,
    pub heads: usize,
    pub ff_dim: usize,
    pub enhancer_levels: usize,
    pub base_channels: usize,
    /// Channel width of the style and content encoders.
    pub embed_channels: usize,
    pub embed_input_size: usize,
    pub enhancer_input_size: usize,
    #[serde(default)]
    pub style_mode: StyleMode,
    #[serde(default)]
    pub seed: u64,
}

impl Default for NetConfig {
    fn default() -> Self {
        Self {
            style_dim: 64,
            content_dim: 64,
            grid: 2,
            transformer_layers: 4,
            heads: 4,
            ff_dim: 128,
            enhancer_levels: 3,
            base_channels: 16,
            embed_channels: 16,
            embed_input_size: 64,
            enhancer_input_size: 128,
            style_mode: StyleMode::Residual,
            seed: 0,
        }
    }
}

impl NetConfig {
    pub fn model_dim(&self) -> usize {
        self.style_dim + self.content_dim
    }

    pub fn validate(&self) -> Result<()> {
        let pos = [
            ("style_dim", self.style_dim),
            ("content_dim", self.content_dim),
            ("transformer_layers", self.transformer_layers),
            ("heads", self.heads),
            ("ff_dim", self.ff_dim),
            ("base_channels", self.base_channels),
            ("embed_channels", self.embed_channels),
        ];
        for (name, v) in pos {
            if v == 0 {
                return Err(Error::config(format!("net.{name}"), "must be positive"));
            }
        }
        if ![1, 2, 4, 8].contains(&self.grid) {
            return Err(Error::config("net.grid", format!("l must be one of 1, 2, 4, 8 (got {})", self.grid)));
        }
        if self.content_dim % (self.grid * self.grid) != 0 {
            return Err(Error::config("net.content_dim", format!("must be divisible by l^2 = {}", self.grid * self.grid)));
        }
        if self.model_dim() % self.heads != 0 {
            return Err(Error::config("net.heads", format!("must divide D_c + D_s = {}", self.model_dim())));
        }
        let e = self.embed_input_size;
        if e < CONTENT_TRUNK_GRID || e % CONTENT_TRUNK_GRID != 0 || !(e / CONTENT_TRUNK_GRID).is_power_of_two() {
            return Err(Error::config("net.embed_input_size", "must be 8 times a power of two"));
        }
        if self.enhancer_levels < 2 {
            return Err(Error::config("net.enhancer_levels", "at least two levels are needed for a skip connection"));
        }
        let div = 1usize << (self.enhancer_levels - 1);
        if self.enhancer_input_size < 8 || self.enhancer_input_size % div != 0 {
            return Err(Error::config("net.enhancer_input_size", format!("must be >= 8 and divisible by {div}")));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StyleEmbedding(pub Vec<f64>);

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ContentEmbedding(pub Vec<f64>);

impl StyleEmbedding {
    pub fn norm(&self) -> f64 {
        self.0.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn mean(items: &[StyleEmbedding]) -> Result<StyleEmbedding> {
        let first = items.first().ok_or(Error::EmptyPreferredSet)?;
        let mut acc = vec![0.0; first.0.len()];
        for s in items {
            for (a, v) in acc.iter_mut().zip(&s.0) {
                *a += v;
            }
        }
        let n = items.len() as f64;
        Ok(StyleEmbedding(acc.into_iter().map(|v| v / n).collect()))
    }
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|v| v * v).sum::<f64>().sqrt();
    let nb = b.iter().map(|v| v * v).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

/// `(I+1) x (D_c + D_s)` token matrix. Rows `0..I` are `c_i ⊕ s_i`; the
/// last row is `c_unseen ⊕ s_masked`.
#[derive(Clone, Debug, PartialEq)]
pub struct TransformerInput {
    pub rows: Tensor,
    pub content_dim: usize,
    pub style_dim: usize,
}

impl TransformerInput {
    pub fn num_preferred(&self) -> usize {
        self.rows.shape[0] - 1
    }

    pub fn masked_row_index(&self) -> usize {
        self.num_preferred()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        self.rows.row(i)
    }
}

/// Stacks images into an `[N, 3, side, side]` tensor, resizing as needed.
pub fn images_to_tensor<'a>(images: impl IntoIterator<Item = &'a Image>, side: usize) -> Result<Tensor> {
    let mut data = Vec::new();
    let mut n = 0;
    for img in images {
        let resized;
        let img = if img.dims() == (side, side) {
            img
        } else {
            resized = img.resize_square(side)?;
            &resized
        };
        data.extend(img.to_chw());
        n += 1;
    }
    Ok(Tensor::new(vec![n, 3, side, side], data))
}

/// Splits a `[N, 3, H, W]` tensor back into clamped images.
pub fn tensor_to_images(t: &Tensor) -> Result<Vec<Image>> {
    let (n, h, w) = (t.shape[0], t.shape[2], t.shape[3]);
    let per = 3 * h * w;
    (0..n).map(|i| Image::from_chw(h, w, &t.data[i * per..(i + 1) * per])).collect()
}

/// The full masked style modeling model.
#[derive(Clone, Debug)]
pub struct MsmModel {
    pub cfg: NetConfig,
    pub style: StyleNet,
    pub content: ContentNet,
    pub transformer: MaskedStyleTransformer,
    pub enhancer: Enhancer,
}

impl MsmModel {
    /// Freshly initialized networks; each draws from its own seeded stream.
    pub fn new(cfg: NetConfig) -> Result<Self> {
        cfg.validate()?;
        let rng = |k: u64| ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(k));
        Ok(Self {
            style: StyleNet::new(&cfg, &mut rng(1)),
            content: ContentNet::new(&cfg, &mut rng(2)),
            transformer: MaskedStyleTransformer::new(&cfg, &mut rng(3)),
            enhancer: Enhancer::new(&cfg, &mut rng(4)),
            cfg,
        })
    }

    /// Raw `f_st` features for a batch of images: `[N, D_s]`.
    pub fn style_features(&self, images: &[&Image]) -> Result<Tensor> {
        let mut g = Graph::new();
        let p = self.style.params.bind_frozen(&mut g);
        let x = g.constant(images_to_tensor(images.iter().copied(), self.cfg.embed_input_size)?);
        let out = self.style.forward(&mut g, &p, x);
        Ok(g.value(out).clone())
    }

    /// Style embedding of the pair `(x, y)` according to the configured mode.
    pub fn style_embed(&self, x: &Image, y: &Image) -> Result<StyleEmbedding> {
        x.ensure_same_dims(y)?;
        let fy = self.style_features(&[y])?;
        Ok(match self.cfg.style_mode {
            StyleMode::Residual => {
                let fx = self.style_features(&[x])?;
                StyleEmbedding(fy.data.iter().zip(&fx.data).map(|(a, b)| a - b).collect())
            }
            StyleMode::Absolute => StyleEmbedding(fy.data),
        })
    }

    /// Style embeddings for many pairs at once.
    pub fn style_embed_batch(&self, pairs: &[(&Image, &Image)]) -> Result<Vec<StyleEmbedding>> {
        if pairs.is_empty() {
            return Ok(Vec::new());
        }
        for (x, y) in pairs {
            x.ensure_same_dims(y)?;
        }
        let ys: Vec<&Image> = pairs.iter().map(|p| p.1).collect();
        let fy = self.style_features(&ys)?;
        let d = self.cfg.style_dim;
        let out = match self.cfg.style_mode {
            StyleMode::Residual => {
                let xs: Vec<&Image> = pairs.iter().map(|p| p.0).collect();
                let fx = self.style_features(&xs)?;
                fy.data.chunks(d).zip(fx.data.chunks(d)).map(|(a, b)| StyleEmbedding(a.iter().zip(b).map(|(p, q)| p - q).collect())).collect()
            }
            StyleMode::Absolute => fy.data.chunks(d).map(|c| StyleEmbedding(c.to_vec())).collect(),
        };
        Ok(out)
    }

    pub fn content_embed_batch(&self, images: &[&Image]) -> Result<Vec<ContentEmbedding>> {
        if images.is_empty() {
            return Ok(Vec::new());
        }
        let mut g = Graph::new();
        let p = self.content.params.bind_frozen(&mut g);
        let x = g.constant(images_to_tensor(images.iter().copied(), self.cfg.embed_input_size)?);
        let out = self.content.forward(&mut g, &p, x);
        Ok(g.value(out).data.chunks(self.cfg.content_dim).map(|c| ContentEmbedding(c.to_vec())).collect())
    }

    pub fn content_embed(&self, x: &Image) -> Result<ContentEmbedding> {
        Ok(self.content_embed_batch(&[x])?.remove(0))
    }

    /// Builds the token matrix from preferred `(c_i, s_i)` and the unseen content.
    pub fn build_input(&self, pairs: &[(ContentEmbedding, StyleEmbedding)], unseen: &ContentEmbedding) -> Result<TransformerInput> {
        if pairs.is_empty() {
            return Err(Error::EmptyPreferredSet);
        }
        let (dc, ds) = (self.cfg.content_dim, self.cfg.style_dim);
        let check = |c: &ContentEmbedding| {
            if c.0.len() != dc {
                Err(Error::InvalidInput(format!("content embedding has length {}, expected {dc}", c.0.len())))
            } else {
                Ok(())
            }
        };
        check(unseen)?;
        let mut data = Vec::with_capacity((pairs.len() + 1) * (dc + ds));
        for (c, s) in pairs {
            check(c)?;
            if s.0.len() != ds {
                return Err(Error::InvalidInput(format!("style embedding has length {}, expected {ds}", s.0.len())));
            }
            data.extend_from_slice(&c.0);
            data.extend_from_slice(&s.0);
        }
        data.extend_from_slice(&unseen.0);
        data.extend_from_slice(self.transformer.mask_token());
        Ok(TransformerInput { rows: Tensor::new(vec![pairs.len() + 1, dc + ds], data), content_dim: dc, style_dim: ds })
    }

    /// Predicted style for the masked row plus per-layer attention maps.
    pub fn predict_style_with_attention(&self, a: &TransformerInput) -> Result<(StyleEmbedding, Vec<AttentionProbs>)> {
        if a.rows.shape.len() != 2 || a.rows.shape[1] != self.cfg.model_dim() || a.rows.shape[0] < 2 {
            return Err(Error::InvalidInput(format!("malformed transformer input of shape {:?}", a.rows.shape)));
        }
        let mut g = Graph::new();
        let p = self.transformer.params.bind_frozen(&mut g);
        let tokens = g.constant(a.rows.clone());
        let out = self.transformer.forward(&mut g, &p, tokens, a.rows.shape[0]);
        let style = StyleEmbedding(g.value(out).data.clone());
        Ok((style, g.attention_maps().cloned().collect()))
    }

    pub fn predict_style(&self, a: &TransformerInput) -> Result<StyleEmbedding> {
        Ok(self.predict_style_with_attention(a)?.0)
    }

    /// Attention rollout of the masked row onto the preferred rows (sums to 1).
    pub fn attention_rollout(&self, a: &TransformerInput) -> Result<Vec<f64>> {
        let (_, maps) = self.predict_style_with_attention(a)?;
        Ok(rollout_masked_row(&maps, 0))
    }

    /// Predicts several inputs of equal length in one pass. Returns the
    /// styles and each sequence's attention rollout.
    pub fn predict_styles_batch(&self, inputs: &[TransformerInput]) -> Result<(Vec<StyleEmbedding>, Vec<Vec<f64>>)> {
        let Some(first) = inputs.first() else { return Ok((Vec::new(), Vec::new())) };
        let seq = first.rows.shape[0];
        let d = self.cfg.model_dim();
        let mut data = Vec::with_capacity(inputs.len() * seq * d);
        for a in inputs {
            if a.rows.shape != [seq, d] {
                return Err(Error::InvalidInput(format!("batched inputs must share shape [{seq}, {d}], got {:?}", a.rows.shape)));
            }
            data.extend_from_slice(&a.rows.data);
        }
        let mut g = Graph::new();
        let p = self.transformer.params.bind_frozen(&mut g);
        let tokens = g.constant(Tensor::new(vec![inputs.len() * seq, d], data));
        let out = self.transformer.forward(&mut g, &p, tokens, seq);
        let styles = g.value(out).data.chunks(self.cfg.style_dim).map(|c| StyleEmbedding(c.to_vec())).collect();
        let maps: Vec<AttentionProbs> = g.attention_maps().cloned().collect();
        let rollouts = (0..inputs.len()).map(|b| rollout_masked_row(&maps, b)).collect();
        Ok((styles, rollouts))
    }

    /// Raw enhancer forward without clamping. `style = None` disables injection.
    pub fn enhance_raw(&self, x: &Image, style: Option<&StyleEmbedding>) -> Result<Tensor> {
        let side = self.cfg.enhancer_input_size;
        let mut g = Graph::new();
        let p = self.enhancer.params.bind_frozen(&mut g);
        let xv = g.constant(images_to_tensor([x], side)?);
        let sv = match style {
            Some(s) => {
                if s.0.len() != self.cfg.style_dim {
                    return Err(Error::InvalidInput(format!("style has length {}, expected {}", s.0.len(), self.cfg.style_dim)));
                }
                Some(g.constant(Tensor::new(vec![1, s.0.len()], s.0.clone())))
            }
            None => None,
        };
        let out = self.enhancer.forward(&mut g, &p, xv, sv);
        Ok(g.value(out).clone())
    }

    /// Renders `x` (resized to the enhancer input size) under style `s`;
    /// output clamped to `[0, 1]`.
    pub fn enhance(&self, x: &Image, s: &StyleEmbedding) -> Result<Image> {
        let raw = self.enhance_raw(x, Some(s))?;
        Ok(tensor_to_images(&raw)?.remove(0))
    }

    /// Renders several images, each under its own style.
    pub fn enhance_batch(&self, xs: &[&Image], styles: &[StyleEmbedding]) -> Result<Vec<Image>> {
        if xs.len() != styles.len() {
            return Err(Error::InvalidInput("one style per image is required".into()));
        }
        if xs.is_empty() {
            return Ok(Vec::new());
        }
        let mut g = Graph::new();
        let p = self.enhancer.params.bind_frozen(&mut g);
        let xv = g.constant(images_to_tensor(xs.iter().copied(), self.cfg.enhancer_input_size)?);
        let sdata: Vec<f64> = styles.iter().flat_map(|s| s.0.iter().copied()).collect();
        let sv = g.constant(Tensor::new(vec![styles.len(), self.cfg.style_dim], sdata));
        let out = self.enhancer.forward(&mut g, &p, xv, Some(sv));
        tensor_to_images(g.value(out))
    }
}

#[cfg(test)]
mod tests;
