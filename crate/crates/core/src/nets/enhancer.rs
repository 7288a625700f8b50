use rand::Rng;

use super::layers::{Conv, Dense, LEAKY_SLOPE};
use super::NetConfig;
use crate::autodiff::{Bound, Graph, ParamStore, Var};

const HEAD_STD: f64 = 1e-2;

/// U-net style encoder–decoder. The style vector is linearly projected
/// (no bias) to each skip connection's channel count and added to the skip
/// features before they are merged into the decoder. The network predicts a
/// residual on top of its input.
#[derive(Clone, Debug)]
pub struct Enhancer {
    pub params: ParamStore,
    enc: Vec<Conv>,
    dec: Vec<Conv>,
    refine: Conv,
    style_proj: Vec<Dense>,
    head: Conv,
}

impl Enhancer {
    pub fn new(cfg: &NetConfig, rng: &mut impl Rng) -> Self {
        let mut params = ParamStore::new();
        let levels = cfg.enhancer_levels;
        let ch: Vec<usize> = (0..levels).map(|i| cfg.base_channels << i).collect();
        let mut enc = Vec::new();
        let mut cin = 3;
        for (i, &c) in ch.iter().enumerate() {
            enc.push(Conv::new(&mut params, &format!("enc{i}"), cin, c, 3, 1, true, rng));
            cin = c;
        }
        let mut dec = Vec::new();
        let mut style_proj = Vec::new();
        for i in 0..levels - 1 {
            dec.push(Conv::new(&mut params, &format!("dec{i}"), ch[i + 1] + ch[i], ch[i], 3, 1, true, rng));
            style_proj.push(Dense::new(&mut params, &format!("style{i}"), cfg.style_dim, ch[i], false, rng));
        }
        let refine = Conv::new(&mut params, "refine", ch[0], ch[0], 1, 1, true, rng);
        let head = Conv::with_std(&mut params, "head", ch[0], 3, 1, 1, true, HEAD_STD, rng);
        Self { params, enc, dec, refine, style_proj, head }
    }

    pub fn levels(&self) -> usize {
        self.enc.len()
    }

    /// Raw (unclamped) prediction for `x[N, 3, H, W]` under `style[N, D_s]`.
    /// With `style = None` no injection happens at all.
    pub fn forward(&self, g: &mut Graph, p: &Bound, x: Var, style: Option<Var>) -> Var {
        let levels = self.enc.len();
        let mut feats = Vec::with_capacity(levels);
        let mut h = x;
        for (i, conv) in self.enc.iter().enumerate() {
            if i > 0 {
                h = g.avg_pool(h, 2);
            }
            h = conv.forward(g, p, h);
            h = g.leaky_relu(h, LEAKY_SLOPE);
            feats.push(h);
        }
        let mut d = feats[levels - 1];
        for i in (0..levels - 1).rev() {
            let up = g.upsample(d, 2);
            let mut skip = feats[i];
            if let Some(s) = style {
                let proj = self.style_proj[i].forward(g, p, s);
                skip = g.add_channel_bias(skip, proj);
            }
            let cat = g.concat_channels(up, skip);
            d = self.dec[i].forward(g, p, cat);
            d = g.leaky_relu(d, LEAKY_SLOPE);
        }
        let r = self.refine.forward(g, p, d);
        let r = g.leaky_relu(r, LEAKY_SLOPE);
        let residual = self.head.forward(g, p, r);
        g.add(x, residual)
    }
}
