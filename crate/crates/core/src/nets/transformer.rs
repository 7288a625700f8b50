use rand::Rng;

use super::layers::{Dense, Norm};
use super::NetConfig;
use crate::autodiff::{Bound, Graph, ParamId, ParamStore, Var};

/// Standard deviation of the masked-token initialization.
pub const MASK_TOKEN_STD: f64 = 0.02;

#[derive(Clone, Debug)]
struct Block {
    ln1: Norm,
    wq: Dense,
    wk: Dense,
    wv: Dense,
    wo: Dense,
    ln2: Norm,
    ff1: Dense,
    ff2: Dense,
}

/// Pre-norm Transformer encoder over `(content ⊕ style)` rows. No positional
/// encodings are added, so it is permutation-equivariant over rows.
#[derive(Clone, Debug)]
pub struct MaskedStyleTransformer {
    pub params: ParamStore,
    mask_token: ParamId,
    blocks: Vec<Block>,
    final_norm: Norm,
    head: Dense,
    heads: usize,
    content_dim: usize,
    style_dim: usize,
}

impl MaskedStyleTransformer {
    pub fn new(cfg: &NetConfig, rng: &mut impl Rng) -> Self {
        let mut params = ParamStore::new();
        let d = cfg.model_dim();
        let mask_token = params.add_normal("mask_token", &[1, cfg.style_dim], MASK_TOKEN_STD, rng);
        let depth_scale = (1.0 / (2.0 * cfg.transformer_layers as f64)).sqrt();
        let blocks = (0..cfg.transformer_layers)
            .map(|i| {
                let n = |s: &str| format!("block{i}.{s}");
                Block {
                    ln1: Norm::new(&mut params, &n("ln1"), d),
                    wq: Dense::new(&mut params, &n("wq"), d, d, true, rng),
                    wk: Dense::new(&mut params, &n("wk"), d, d, true, rng),
                    wv: Dense::new(&mut params, &n("wv"), d, d, true, rng),
                    wo: Dense::with_std(&mut params, &n("wo"), d, d, true, depth_scale / (d as f64).sqrt(), rng),
                    ln2: Norm::new(&mut params, &n("ln2"), d),
                    ff1: Dense::new(&mut params, &n("ff1"), d, cfg.ff_dim, true, rng),
                    ff2: Dense::with_std(&mut params, &n("ff2"), cfg.ff_dim, d, true, depth_scale / (cfg.ff_dim as f64).sqrt(), rng),
                }
            })
            .collect();
        let final_norm = Norm::new(&mut params, "final_norm", d);
        let head = Dense::new(&mut params, "head", d, cfg.style_dim, true, rng);
        Self {
            params,
            mask_token,
            blocks,
            final_norm,
            head,
            heads: cfg.heads,
            content_dim: cfg.content_dim,
            style_dim: cfg.style_dim,
        }
    }

    pub fn mask_token(&self) -> &[f64] {
        &self.params.get(self.mask_token).data
    }

    pub fn content_dim(&self) -> usize {
        self.content_dim
    }

    pub fn style_dim(&self) -> usize {
        self.style_dim
    }

    /// Assembles the token matrix for `batch` sequences of `seq` rows.
    /// `contents` is `[batch*seq, D_c]`; `styles` holds the `seq - 1` known
    /// style rows of every sequence, `[batch*(seq-1), D_s]`. The last row of
    /// each sequence receives the masked token.
    pub fn assemble(&self, g: &mut Graph, p: &Bound, contents: Var, styles: Var, batch: usize, seq: usize) -> Var {
        let known = seq - 1;
        let mask = p.var(self.mask_token);
        let mut parts = Vec::with_capacity(2 * batch);
        for b in 0..batch {
            let idx: Vec<usize> = (b * known..(b + 1) * known).collect();
            parts.push(g.select_rows(styles, &idx));
            parts.push(mask);
        }
        let style_col = g.concat_rows(&parts);
        g.concat_cols(contents, style_col)
    }

    /// Runs the encoder over `[batch*seq, D]` and predicts the style of the
    /// last row of every sequence: `[batch, D_s]`.
    pub fn forward(&self, g: &mut Graph, p: &Bound, tokens: Var, seq: usize) -> Var {
        let mut x = tokens;
        for blk in &self.blocks {
            let h = blk.ln1.forward(g, p, x);
            let q = blk.wq.forward(g, p, h);
            let k = blk.wk.forward(g, p, h);
            let v = blk.wv.forward(g, p, h);
            let a = g.attention(q, k, v, seq, self.heads);
            let a = blk.wo.forward(g, p, a);
            x = g.add(x, a);
            let h = blk.ln2.forward(g, p, x);
            let f = blk.ff1.forward(g, p, h);
            let f = g.gelu(f);
            let f = blk.ff2.forward(g, p, f);
            x = g.add(x, f);
        }
        let rows = g.shape(tokens)[0];
        let last: Vec<usize> = (0..rows / seq).map(|b| b * seq + seq - 1).collect();
        let masked = g.select_rows(x, &last);
        let masked = self.final_norm.forward(g, p, masked);
        self.head.forward(g, p, masked)
    }
}
