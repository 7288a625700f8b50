use rand::Rng;

use super::layers::{Conv, LEAKY_SLOPE};
use super::NetConfig;
use crate::autodiff::{Bound, Graph, ParamStore, Var};

/// Spatial size at which the content trunk stops downsampling.
pub const CONTENT_TRUNK_GRID: usize = 8;

/// Convolutional trunk down to an 8x8 map, average-pooled to `l x l`,
/// reduced to `D_c / l^2` channels and flattened block by block.
#[derive(Clone, Debug)]
pub struct ContentNet {
    pub params: ParamStore,
    stem: Conv,
    downs: Vec<Conv>,
    reduce: Conv,
    pool: usize,
}

impl ContentNet {
    pub fn new(cfg: &NetConfig, rng: &mut impl Rng) -> Self {
        let mut params = ParamStore::new();
        let e = cfg.embed_channels;
        let stem = Conv::new(&mut params, "stem", 3, e, 3, 1, true, rng);
        let mut downs = Vec::new();
        let mut size = cfg.embed_input_size;
        let mut c = e;
        let mut i = 0;
        while size > CONTENT_TRUNK_GRID {
            let out = (c * 2).min(4 * e);
            downs.push(Conv::new(&mut params, &format!("down{i}"), c, out, 3, 2, true, rng));
            c = out;
            size /= 2;
            i += 1;
        }
        let per_block = cfg.content_dim / (cfg.grid * cfg.grid);
        let reduce = Conv::new(&mut params, "reduce", c, per_block, 1, 1, true, rng);
        Self { params, stem, downs, reduce, pool: size / cfg.grid }
    }

    /// `[N, 3, S, S] -> [N, content_dim]`
    pub fn forward(&self, g: &mut Graph, p: &Bound, x: Var) -> Var {
        let mut h = self.stem.forward(g, p, x);
        h = g.leaky_relu(h, LEAKY_SLOPE);
        for d in &self.downs {
            h = d.forward(g, p, h);
            h = g.leaky_relu(h, LEAKY_SLOPE);
        }
        let pooled = g.avg_pool(h, self.pool);
        let reduced = self.reduce.forward(g, p, pooled);
        g.flatten_hwc(reduced)
    }
}
