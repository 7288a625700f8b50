use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{random_params, synth_scene};
use crate::autodiff::{Adam, Bound, Graph, ParamId, ParamStore, Var};
use crate::error::{Error, Result};
use crate::image::Image;
use crate::metrics::delta_e_ab;
use crate::nets::{images_to_tensor, tensor_to_images};
use crate::retouch::apply_retouch;

const LEAKY: f64 = 0.2;
const HEAD_STD: f64 = 1e-2;
/// Colour difference floor for a draw to count as an enhanced variant;
/// near-identity retouches are redrawn.
pub const MIN_ENHANCEMENT_DELTA_E: f64 = 8.0;
const MAX_REDRAWS: usize = 50;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DegraderConfig {
    pub channels: usize,
    pub epochs: usize,
    pub batch: usize,
    pub lr: f64,
    pub seed: u64,
    /// Clean scenes used to fit the degrader.
    pub n_originals: usize,
    /// Random retouch draws per clean scene.
    pub draws_per_original: usize,
}

impl Default for DegraderConfig {
    fn default() -> Self {
        Self { channels: 16, epochs: 30, batch: 16, lr: 1e-3, seed: 0, n_originals: 120, draws_per_original: 5 }
    }
}

impl DegraderConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("channels", self.channels),
            ("epochs", self.epochs),
            ("batch", self.batch),
            ("n_originals", self.n_originals),
            ("draws_per_original", self.draws_per_original),
        ] {
            if v == 0 {
                return Err(Error::config(format!("degrader.{name}"), "must be positive"));
            }
        }
        if !(self.lr > 0.0) {
            return Err(Error::config("degrader.lr", "must be positive"));
        }
        Ok(())
    }
}

/// Four 3x3 convolutions with a global context vector added after the
/// second one, predicting a residual. Maps enhanced images back toward
/// their originals.
#[derive(Clone, Debug)]
pub struct DegradeModel {
    pub params: ParamStore,
    pub image_size: usize,
    convs: [(ParamId, ParamId); 4],
    ctx: (ParamId, ParamId),
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DegraderReport {
    /// Mean absolute error of the untrained model.
    pub initial_loss: f64,
    pub epoch_losses: Vec<f64>,
    pub final_loss: f64,
}

impl DegradeModel {
    fn new(channels: usize, image_size: usize, rng: &mut impl Rng) -> Self {
        let mut params = ParamStore::new();
        let c = channels;
        let he = |fan_in: usize| (2.0 / ((1.0 + LEAKY * LEAKY) * fan_in as f64)).sqrt();
        let mut conv = |params: &mut ParamStore, name: &str, cin: usize, cout: usize, std: f64| {
            (params.add_normal(format!("{name}.w"), &[cout, cin, 3, 3], std, rng), params.add_const(format!("{name}.b"), &[cout], 0.0))
        };
        let convs = [
            conv(&mut params, "conv0", 3, c, he(27)),
            conv(&mut params, "conv1", c, c, he(9 * c)),
            conv(&mut params, "conv2", c, c, he(9 * c)),
            conv(&mut params, "conv3", c, 3, HEAD_STD),
        ];
        let ctx = (
            params.add_normal("ctx.w", &[c, c], (1.0 / c as f64).sqrt(), rng),
            params.add_const("ctx.b", &[c], 0.0),
        );
        Self { params, image_size, convs, ctx }
    }

    fn forward(&self, g: &mut Graph, p: &Bound, x: Var) -> Var {
        let conv = |g: &mut Graph, i: usize, h: Var| {
            let (w, b) = self.convs[i];
            g.conv2d(h, p.var(w), Some(p.var(b)), 1, 1)
        };
        let h = conv(g, 0, x);
        let h = g.leaky_relu(h, LEAKY);
        let h = conv(g, 1, h);
        let h = g.leaky_relu(h, LEAKY);
        let pooled = g.global_avg_pool(h);
        let ctx = g.linear(pooled, p.var(self.ctx.0), Some(p.var(self.ctx.1)));
        let h = g.add_channel_bias(h, ctx);
        let h = conv(g, 2, h);
        let h = g.leaky_relu(h, LEAKY);
        let r = conv(g, 3, h);
        g.add(x, r)
    }
}

/// `(enhanced, original)` pairs: random retouches of clean scenes, each at
/// least [`MIN_ENHANCEMENT_DELTA_E`] away from its original.
pub fn degrader_training_pairs(cfg: &DegraderConfig, size: usize, n_classes: usize, seed: u64) -> Result<Vec<(Image, Image)>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(cfg.n_originals * cfg.draws_per_original);
    for i in 0..cfg.n_originals {
        let original = synth_scene(i % n_classes, n_classes, rng.random(), size)?;
        for _ in 0..cfg.draws_per_original {
            let mut enhanced = original.clone();
            for _ in 0..MAX_REDRAWS {
                let ev = rng.random_range(-0.8..0.8);
                enhanced = apply_retouch(&original, &random_params(&mut rng, ev))?;
                if delta_e_ab(&enhanced, &original)? >= MIN_ENHANCEMENT_DELTA_E {
                    break;
                }
            }
            out.push((enhanced, original.clone()));
        }
    }
    Ok(out)
}

/// Fits the degrader by minimizing mean absolute error from enhanced to
/// original. Returns the model and per-epoch mean losses.
pub fn train_degrader(pairs: &[(Image, Image)], cfg: &DegraderConfig) -> Result<(DegradeModel, DegraderReport)> {
    cfg.validate()?;
    let first = pairs.first().ok_or_else(|| Error::NotEnoughData("degrader needs at least one pair".into()))?;
    let (h, w) = first.0.dims();
    if h != w {
        return Err(Error::InvalidInput("degrader expects square images".into()));
    }
    for (e, o) in pairs {
        e.ensure_same_dims(o)?;
        first.0.ensure_same_dims(e)?;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut model = DegradeModel::new(cfg.channels, h, &mut rng);
    let initial_loss = mean_abs_error(&model, pairs)?;
    let mut adam = Adam::new(&model.params, cfg.lr);
    let mut order: Vec<usize> = (0..pairs.len()).collect();
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);
    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for chunk in order.chunks(cfg.batch) {
            let xs = images_to_tensor(chunk.iter().map(|&i| &pairs[i].0), h)?;
            let ys = images_to_tensor(chunk.iter().map(|&i| &pairs[i].1), h)?;
            let mut g = Graph::new();
            let p = model.params.bind(&mut g);
            let x = g.constant(xs);
            let y = g.constant(ys);
            let pred = model.forward(&mut g, &p, x);
            let loss = g.mae(pred, y);
            total += g.value(loss).item() * chunk.len() as f64;
            g.backward(loss);
            let grads = p.grads(&g);
            adam.step(&mut model.params, &grads);
        }
        epoch_losses.push(total / pairs.len() as f64);
    }
    let final_loss = mean_abs_error(&model, pairs)?;
    Ok((model, DegraderReport { initial_loss, epoch_losses, final_loss }))
}

/// Mean absolute pixel error of `degrade(enhanced)` against `original`.
pub fn mean_abs_error(model: &DegradeModel, pairs: &[(Image, Image)]) -> Result<f64> {
    let mut total = 0.0;
    for (e, o) in pairs {
        let d = degrade(model, e)?;
        total += d.data().iter().zip(o.data()).map(|(a, b)| (a - b).abs()).sum::<f64>() / d.data().len() as f64;
    }
    Ok(total / pairs.len().max(1) as f64)
}

/// Pseudo-original of a retouched image, clamped to `[0, 1]`.
pub fn degrade(model: &DegradeModel, retouched: &Image) -> Result<Image> {
    if retouched.dims() != (model.image_size, model.image_size) {
        return Err(Error::DimensionMismatch {
            left: (model.image_size, model.image_size),
            right: retouched.dims(),
        });
    }
    let mut g = Graph::new();
    let p = model.params.bind_frozen(&mut g);
    let x = g.constant(images_to_tensor([retouched], model.image_size)?);
    let out = model.forward(&mut g, &p, x);
    Ok(tensor_to_images(g.value(out))?.remove(0))
}
