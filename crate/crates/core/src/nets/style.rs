use rand::Rng;

use super::layers::{Conv, Dense, LEAKY_SLOPE};
use super::NetConfig;
use crate::autodiff::{Bound, Graph, ParamStore, Var};

/// Convolutional encoder ending in global average pooling and an affine
/// projection to the style dimension.
#[derive(Clone, Debug)]
pub struct StyleNet {
    pub params: ParamStore,
    stem: Conv,
    downs: Vec<Conv>,
    head: Dense,
}

pub(crate) const STYLE_DOWNSAMPLES: usize = 2;

impl StyleNet {
    pub fn new(cfg: &NetConfig, rng: &mut impl Rng) -> Self {
        let mut params = ParamStore::new();
        let e = cfg.embed_channels;
        let stem = Conv::new(&mut params, "stem", 3, e, 3, 1, true, rng);
        let mut downs = Vec::new();
        let mut c = e;
        for i in 0..STYLE_DOWNSAMPLES {
            downs.push(Conv::new(&mut params, &format!("down{i}"), c, 2 * c, 3, 2, true, rng));
            c *= 2;
        }
        let head = Dense::new(&mut params, "head", c, cfg.style_dim, true, rng);
        Self { params, stem, downs, head }
    }

    /// `[N, 3, H, W] -> [N, style_dim]`
    pub fn forward(&self, g: &mut Graph, p: &Bound, x: Var) -> Var {
        let mut h = self.stem.forward(g, p, x);
        h = g.leaky_relu(h, LEAKY_SLOPE);
        for d in &self.downs {
            h = d.forward(g, p, h);
            h = g.leaky_relu(h, LEAKY_SLOPE);
        }
        let pooled = g.global_avg_pool(h);
        self.head.forward(g, p, pooled)
    }
}
