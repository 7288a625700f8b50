//! Two-step training: style network and enhancer first, then content
//! network and Transformer on cached style targets.

mod loss;

pub use loss::{loss_pienet, pienet_loss, LossConfig, PerceptualExtractor};

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Adam, Graph, Tensor};
use crate::corpus::Corpus;
use crate::error::{Error, Result};
use crate::nets::{images_to_tensor, MsmModel, StyleEmbedding, StyleMode};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub lr: f64,
    pub epochs_step1: usize,
    pub epochs_step2: usize,
    pub batch_step1: usize,
    pub batch_step2: usize,
    pub i_train: usize,
    /// Step-2 samples drawn per user per epoch; 0 means
    /// `images_per_user / (i_train + 1)` (each pair seen about once).
    pub samples_per_user: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            epochs_step1: 40,
            epochs_step2: 30,
            batch_step1: 64,
            batch_step2: 32,
            i_train: 10,
            samples_per_user: 0,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) || !self.lr.is_finite() {
            return Err(Error::config("train.lr", "must be a positive finite number"));
        }
        for (name, v) in [
            ("batch_step1", self.batch_step1),
            ("batch_step2", self.batch_step2),
            ("i_train", self.i_train),
        ] {
            if v == 0 {
                return Err(Error::config(format!("train.{name}"), "must be positive"));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub step: u8,
    pub epoch: usize,
    pub loss: f64,
    pub seconds: f64,
}

/// Per-epoch metrics of a training run, written as JSON by the CLI.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub step1: Vec<EpochRecord>,
    pub step2: Vec<EpochRecord>,
}

fn step_rng(seed: u64, step: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0x2545_F491_4F6C_DD1D).wrapping_add(step))
}

fn stack(chw: &[Vec<f64>], idx: &[usize], side: usize) -> Tensor {
    let mut data = Vec::with_capacity(idx.len() * 3 * side * side);
    for &i in idx {
        data.extend_from_slice(&chw[i]);
    }
    Tensor::new(vec![idx.len(), 3, side, side], data)
}

fn chw_at(images: &[&crate::image::Image], side: usize) -> Result<Vec<Vec<f64>>> {
    images.iter().map(|img| Ok(images_to_tensor([*img], side)?.data)).collect()
}

/// Step 1: jointly trains the style network and the enhancer on
/// `loss_pienet(y, f_en(x, s))` with `s` computed per pair.
pub fn train_step1(
    corpus: &Corpus,
    model: &mut MsmModel,
    cfg: &TrainConfig,
    loss_cfg: &LossConfig,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<Vec<EpochRecord>> {
    cfg.validate()?;
    loss_cfg.validate()?;
    let pairs: Vec<_> = corpus.pairs().collect();
    if pairs.is_empty() {
        return Err(Error::NotEnoughData("corpus has no pairs".into()));
    }
    let (es, ns) = (model.cfg.embed_input_size, model.cfg.enhancer_input_size);
    let xs: Vec<_> = pairs.iter().map(|p| &p.original).collect();
    let ys: Vec<_> = pairs.iter().map(|p| &p.retouched).collect();
    let (x_emb, y_emb) = (chw_at(&xs, es)?, chw_at(&ys, es)?);
    let (x_en, y_en) = if es == ns { (x_emb.clone(), y_emb.clone()) } else { (chw_at(&xs, ns)?, chw_at(&ys, ns)?) };

    let extractor = PerceptualExtractor::new();
    let mut adam_st = Adam::new(&model.style.params, cfg.lr);
    let mut adam_en = Adam::new(&model.enhancer.params, cfg.lr);
    let mut rng = step_rng(cfg.seed, 1);
    let mut order: Vec<usize> = (0..pairs.len()).collect();
    let mut records = Vec::with_capacity(cfg.epochs_step1);
    for epoch in 0..cfg.epochs_step1 {
        let t0 = Instant::now();
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for idx in order.chunks(cfg.batch_step1) {
            let mut g = Graph::new();
            let ps = model.style.params.bind(&mut g);
            let pe = model.enhancer.params.bind(&mut g);
            let fy_in = g.constant(stack(&y_emb, idx, es));
            let fy = model.style.forward(&mut g, &ps, fy_in);
            let s = match model.cfg.style_mode {
                StyleMode::Residual => {
                    let fx_in = g.constant(stack(&x_emb, idx, es));
                    let fx = model.style.forward(&mut g, &ps, fx_in);
                    g.sub(fy, fx)
                }
                StyleMode::Absolute => fy,
            };
            let x = g.constant(stack(&x_en, idx, ns));
            let y = g.constant(stack(&y_en, idx, ns));
            let pred = model.enhancer.forward(&mut g, &pe, x, Some(s));
            let loss = pienet_loss(&mut g, pred, y, loss_cfg, &extractor);
            total += g.value(loss).item() * idx.len() as f64;
            g.backward(loss);
            let (gs, ge) = (ps.grads(&g), pe.grads(&g));
            adam_st.step(&mut model.style.params, &gs);
            adam_en.step(&mut model.enhancer.params, &ge);
        }
        let rec = EpochRecord { step: 1, epoch, loss: total / pairs.len() as f64, seconds: t0.elapsed().as_secs_f64() };
        on_epoch(&rec);
        records.push(rec);
    }
    Ok(records)
}

/// Style embeddings of every pair under the current (frozen) style network,
/// user by user.
pub fn cached_styles(corpus: &Corpus, model: &MsmModel) -> Result<Vec<Vec<StyleEmbedding>>> {
    corpus
        .users
        .iter()
        .map(|u| {
            let mut out = Vec::with_capacity(u.set.len());
            for chunk in u.set.pairs.chunks(64) {
                let pairs: Vec<_> = chunk.iter().map(|p| (&p.original, &p.retouched)).collect();
                out.extend(model.style_embed_batch(&pairs)?);
            }
            Ok(out)
        })
        .collect()
}

/// Step 2: trains the content network and the Transformer to predict the
/// masked style of the `(i_train+1)`-th pair of a shuffled user sample. The
/// style network is not touched.
pub fn train_step2(
    corpus: &Corpus,
    model: &mut MsmModel,
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<Vec<EpochRecord>> {
    cfg.validate()?;
    let seq = cfg.i_train + 1;
    if let Some(u) = corpus.users.iter().find(|u| u.set.len() < seq) {
        return Err(Error::NotEnoughData(format!(
            "user {} holds {} pairs but i_train + 1 = {seq} are needed",
            u.user.user_id,
            u.set.len()
        )));
    }
    let es = model.cfg.embed_input_size;
    let (dc, ds) = (model.cfg.content_dim, model.cfg.style_dim);
    let styles = cached_styles(corpus, model)?;
    let contents_chw: Vec<Vec<Vec<f64>>> = corpus
        .users
        .iter()
        .map(|u| chw_at(&u.set.pairs.iter().map(|p| &p.original).collect::<Vec<_>>(), es))
        .collect::<Result<_>>()?;

    let mut adam_co = Adam::new(&model.content.params, cfg.lr);
    let mut adam_tr = Adam::new(&model.transformer.params, cfg.lr);
    let mut rng = step_rng(cfg.seed, 2);
    let mut records = Vec::with_capacity(cfg.epochs_step2);
    for epoch in 0..cfg.epochs_step2 {
        let t0 = Instant::now();
        let mut samples = Vec::new();
        for (ui, u) in corpus.users.iter().enumerate() {
            let k = if cfg.samples_per_user > 0 { cfg.samples_per_user } else { (u.set.len() / seq).max(1) };
            for _ in 0..k {
                let mut perm: Vec<usize> = (0..u.set.len()).collect();
                perm.shuffle(&mut rng);
                perm.truncate(seq);
                samples.push((ui, perm));
            }
        }
        samples.shuffle(&mut rng);
        let mut total = 0.0;
        for batch in samples.chunks(cfg.batch_step2) {
            let b = batch.len();
            let mut img = Vec::with_capacity(b * seq * 3 * es * es);
            let mut known = Vec::with_capacity(b * (seq - 1) * ds);
            let mut target = Vec::with_capacity(b * ds);
            for (ui, perm) in batch {
                for (j, &pi) in perm.iter().enumerate() {
                    img.extend_from_slice(&contents_chw[*ui][pi]);
                    if j + 1 < seq {
                        known.extend_from_slice(&styles[*ui][pi].0);
                    } else {
                        target.extend_from_slice(&styles[*ui][pi].0);
                    }
                }
            }
            let mut g = Graph::new();
            let pc = model.content.params.bind(&mut g);
            let pt = model.transformer.params.bind(&mut g);
            let x = g.constant(Tensor::new(vec![b * seq, 3, es, es], img));
            let c = model.content.forward(&mut g, &pc, x);
            debug_assert_eq!(g.shape(c), [b * seq, dc]);
            let s = g.constant(Tensor::new(vec![b * (seq - 1), ds], known));
            let tokens = model.transformer.assemble(&mut g, &pt, c, s, b, seq);
            let pred = model.transformer.forward(&mut g, &pt, tokens, seq);
            let t = g.constant(Tensor::new(vec![b, ds], target));
            let loss = g.mae(pred, t);
            total += g.value(loss).item() * b as f64;
            g.backward(loss);
            let (gc, gt) = (pc.grads(&g), pt.grads(&g));
            adam_co.step(&mut model.content.params, &gc);
            adam_tr.step(&mut model.transformer.params, &gt);
        }
        let rec = EpochRecord { step: 2, epoch, loss: total / samples.len() as f64, seconds: t0.elapsed().as_secs_f64() };
        on_epoch(&rec);
        records.push(rec);
    }
    Ok(records)
}
