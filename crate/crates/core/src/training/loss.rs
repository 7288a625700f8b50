use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, ParamId, ParamStore, Tensor, Var};
use crate::error::{Error, Result};
use crate::image::Image;

const EXTRACTOR_SEED: u64 = 0x5EED_F00D;
const EXTRACTOR_CHANNELS: [usize; 2] = [8, 16];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossConfig {
    pub w_color: f64,
    pub w_perceptual: f64,
    pub w_tv: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self { w_color: 1.0, w_perceptual: 0.05, w_tv: 0.1 }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, w) in [("w_color", self.w_color), ("w_perceptual", self.w_perceptual), ("w_tv", self.w_tv)] {
            if !(w >= 0.0) || !w.is_finite() {
                return Err(Error::config(format!("loss.{name}"), "must be a finite value >= 0"));
            }
        }
        Ok(())
    }
}

/// Frozen two-layer random convolutional feature map used as the
/// perceptual-loss backbone. Its weights depend only on a fixed seed.
#[derive(Clone, Debug)]
pub struct PerceptualExtractor {
    params: ParamStore,
    layers: Vec<(ParamId, usize)>,
}

impl Default for PerceptualExtractor {
    fn default() -> Self {
        Self::new()
    }
}

impl PerceptualExtractor {
    pub fn new() -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(EXTRACTOR_SEED);
        let mut params = ParamStore::new();
        let mut layers = Vec::new();
        let mut cin = 3;
        for (i, (&cout, stride)) in EXTRACTOR_CHANNELS.iter().zip([1, 2]).enumerate() {
            let std = (2.0 / (9 * cin) as f64).sqrt();
            layers.push((params.add_normal(format!("feat{i}.w"), &[cout, cin, 3, 3], std, &mut rng), stride));
            cin = cout;
        }
        Self { params, layers }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Var {
        let p = self.params.bind_frozen(g);
        let mut h = x;
        for &(w, stride) in &self.layers {
            h = g.conv2d(h, p.var(w), None, stride, 1);
            h = g.leaky_relu(h, 0.2);
        }
        h
    }
}

/// Builds `w_color·MAE(pred, target) + w_perceptual·MAE(F(pred), F(target)) + w_tv·TV(pred)`
/// on `[N, 3, H, W]` tensors. TV is the mean squared neighbour difference.
pub fn pienet_loss(g: &mut Graph, pred: Var, target: Var, cfg: &LossConfig, extractor: &PerceptualExtractor) -> Var {
    let color = g.mae(pred, target);
    let mut total = g.scale(color, cfg.w_color);
    if cfg.w_perceptual > 0.0 {
        let fp = extractor.forward(g, pred);
        let ft = extractor.forward(g, target);
        let perc = g.mae(fp, ft);
        let perc = g.scale(perc, cfg.w_perceptual);
        total = g.add(total, perc);
    }
    if cfg.w_tv > 0.0 {
        let tv = g.squared_tv(pred);
        let tv = g.scale(tv, cfg.w_tv);
        total = g.add(total, tv);
    }
    total
}

/// Scalar value of [`pienet_loss`] for two images.
pub fn loss_pienet(target: &Image, pred: &Image, cfg: &LossConfig) -> Result<f64> {
    target.ensure_same_dims(pred)?;
    cfg.validate()?;
    let (h, w) = target.dims();
    let tt = Tensor::new(vec![1, 3, h, w], target.to_chw());
    let tp = Tensor::new(vec![1, 3, h, w], pred.to_chw());
    let mut g = Graph::new();
    let t = g.constant(tt);
    let p = g.constant(tp);
    let l = pienet_loss(&mut g, p, t, cfg, &PerceptualExtractor::new());
    Ok(g.value(l).item())
}
