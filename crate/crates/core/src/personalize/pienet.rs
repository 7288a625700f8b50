use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Adam, Graph, ParamStore, Tensor};
use crate::corpus::{Corpus, PreferredSet};
use crate::error::{Error, Result};
use crate::image::Image;
use crate::nets::{images_to_tensor, Enhancer, NetConfig, StyleNet};
use crate::training::{pienet_loss, EpochRecord, LossConfig, PerceptualExtractor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PieNetConfig {
    /// Triplet margin.
    pub alpha: f64,
    pub epochs_triplet: usize,
    pub epochs_enhancer: usize,
    pub batch: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for PieNetConfig {
    fn default() -> Self {
        Self { alpha: 0.2, epochs_triplet: 20, epochs_enhancer: 20, batch: 16, lr: 1e-3, seed: 0 }
    }
}

impl PieNetConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0) {
            return Err(Error::config("pienet.alpha", "margin must be > 0"));
        }
        if self.batch == 0 {
            return Err(Error::config("pienet.batch", "must be positive"));
        }
        if !(self.lr > 0.0) {
            return Err(Error::config("pienet.lr", "must be positive"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PreferenceVector(pub Vec<f64>);

/// Baseline with one preference vector per known user. Style embeddings are
/// absolute, `f(y)`.
#[derive(Clone, Debug)]
pub struct PieNetModel {
    pub cfg: NetConfig,
    pub style: StyleNet,
    pub enhancer: Enhancer,
    /// `v^n` of the training users.
    pub vectors: Vec<PreferenceVector>,
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct PieNetReport {
    pub triplet: Vec<EpochRecord>,
    pub enhancer: Vec<EpochRecord>,
}

impl PieNetModel {
    /// `f(y)` for each image.
    pub fn embed(&self, images: &[&Image]) -> Result<Vec<Vec<f64>>> {
        let mut g = Graph::new();
        let p = self.style.params.bind_frozen(&mut g);
        let x = g.constant(images_to_tensor(images.iter().copied(), self.cfg.embed_input_size)?);
        let out = self.style.forward(&mut g, &p, x);
        Ok(g.value(out).data.chunks(self.cfg.style_dim).map(|c| c.to_vec()).collect())
    }

    /// Mean embedding of the retouched images.
    pub fn preference_vector(&self, prefs: &PreferredSet) -> Result<PreferenceVector> {
        if prefs.is_empty() {
            return Err(Error::EmptyPreferredSet);
        }
        let ys: Vec<&Image> = prefs.pairs.iter().map(|p| &p.retouched).collect();
        let embs = self.embed(&ys)?;
        let mut v = vec![0.0; self.cfg.style_dim];
        for e in &embs {
            for (a, b) in v.iter_mut().zip(e) {
                *a += b;
            }
        }
        Ok(PreferenceVector(v.into_iter().map(|a| a / embs.len() as f64).collect()))
    }

    pub fn enhance(&self, x: &Image, v: &PreferenceVector) -> Result<Image> {
        let mut g = Graph::new();
        let p = self.enhancer.params.bind_frozen(&mut g);
        let xv = g.constant(images_to_tensor([x], self.cfg.enhancer_input_size)?);
        let sv = g.constant(Tensor::new(vec![1, v.0.len()], v.0.clone()));
        let out = self.enhancer.forward(&mut g, &p, xv, Some(sv));
        let img = crate::nets::tensor_to_images(g.value(out))?.remove(0);
        if img.dims() == x.dims() {
            Ok(img)
        } else {
            img.resize(x.height(), x.width())
        }
    }

    pub fn personalize(&self, prefs: &PreferredSet, unseen: &Image) -> Result<Image> {
        self.enhance(unseen, &self.preference_vector(prefs)?)
    }
}

/// Mean triplet loss `[|f(y_a) - v_n|² - |f(y_neg) - v_n|² + α]_+` of the
/// current model over fixed `(user, anchor, negative)` triplets.
pub fn triplet_loss(model: &PieNetModel, corpus: &Corpus, triplets: &[(usize, usize, usize, usize)], alpha: f64) -> Result<f64> {
    let mut total = 0.0;
    for &(n, i, n2, i2) in triplets {
        let e = model.embed(&[&corpus.users[n].set.pairs[i].retouched, &corpus.users[n2].set.pairs[i2].retouched])?;
        let v = &model.vectors[n].0;
        let d = |a: &[f64]| a.iter().zip(v).map(|(x, y)| (x - y) * (x - y)).sum::<f64>();
        total += (d(&e[0]) - d(&e[1]) + alpha).max(0.0);
    }
    Ok(total / triplets.len().max(1) as f64)
}

fn sample_triplets(corpus: &Corpus, rng: &mut impl Rng) -> Vec<(usize, usize, usize, usize)> {
    let n_users = corpus.users.len();
    let mut out = Vec::with_capacity(corpus.num_pairs());
    for (n, u) in corpus.users.iter().enumerate() {
        for i in 0..u.set.len() {
            let mut n2 = rng.random_range(0..n_users - 1);
            if n2 >= n {
                n2 += 1;
            }
            let i2 = rng.random_range(0..corpus.users[n2].set.len());
            out.push((n, i, n2, i2));
        }
    }
    out
}

/// Trains the baseline in two phases: style network and preference vectors
/// under the triplet loss (one uniformly drawn negative user per anchor),
/// then the enhancer conditioned on the fixed `v^n`.
pub fn train_pienet_baseline(
    corpus: &Corpus,
    net_cfg: &NetConfig,
    cfg: &PieNetConfig,
    loss_cfg: &LossConfig,
) -> Result<(PieNetModel, PieNetReport)> {
    cfg.validate()?;
    net_cfg.validate()?;
    if corpus.users.len() < 2 {
        return Err(Error::NotEnoughData("the triplet loss needs at least 2 users".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let es = net_cfg.embed_input_size;
    let ns = net_cfg.enhancer_input_size;
    let style = StyleNet::new(net_cfg, &mut rng);
    let enhancer = Enhancer::new(net_cfg, &mut rng);
    let mut vstore = ParamStore::new();
    let vid = vstore.add_normal("vectors", &[corpus.users.len(), net_cfg.style_dim], 0.1, &mut rng);
    let mut model = PieNetModel { cfg: net_cfg.clone(), style, enhancer, vectors: Vec::new() };
    let mut report = PieNetReport::default();

    let ys: Vec<Vec<Vec<f64>>> = corpus
        .users
        .iter()
        .map(|u| u.set.pairs.iter().map(|p| Ok(images_to_tensor([&p.retouched], es)?.data)).collect::<Result<_>>())
        .collect::<Result<_>>()?;

    // phase 1: triplet loss on f(y) and v^n
    let mut adam_st = Adam::new(&model.style.params, cfg.lr);
    let mut adam_v = Adam::new(&vstore, cfg.lr);
    for epoch in 0..cfg.epochs_triplet {
        let t0 = Instant::now();
        let mut triplets = sample_triplets(corpus, &mut rng);
        triplets.shuffle(&mut rng);
        let mut total = 0.0;
        for batch in triplets.chunks(cfg.batch) {
            let b = batch.len();
            let mut img = Vec::with_capacity(2 * b * 3 * es * es);
            for &(n, i, _, _) in batch {
                img.extend_from_slice(&ys[n][i]);
            }
            for &(_, _, n2, i2) in batch {
                img.extend_from_slice(&ys[n2][i2]);
            }
            let mut g = Graph::new();
            let ps = model.style.params.bind(&mut g);
            let pv = vstore.bind(&mut g);
            let x = g.constant(Tensor::new(vec![2 * b, 3, es, es], img));
            let f = model.style.forward(&mut g, &ps, x);
            let fa = g.select_rows(f, &(0..b).collect::<Vec<_>>());
            let fn_ = g.select_rows(f, &(b..2 * b).collect::<Vec<_>>());
            let users: Vec<usize> = batch.iter().map(|t| t.0).collect();
            let v = g.select_rows(pv.var(vid), &users);
            let da = g.sub(fa, v);
            let da = g.mul(da, da);
            let da = g.sum_last(da);
            let dn = g.sub(fn_, v);
            let dn = g.mul(dn, dn);
            let dn = g.sum_last(dn);
            let diff = g.sub(da, dn);
            let margin = g.constant(Tensor::full(&[b], cfg.alpha));
            let hinge = g.add(diff, margin);
            let hinge = g.relu(hinge);
            let loss = g.mean(hinge);
            total += g.value(loss).item() * b as f64;
            g.backward(loss);
            let (gs, gv) = (ps.grads(&g), pv.grads(&g));
            adam_st.step(&mut model.style.params, &gs);
            adam_v.step(&mut vstore, &gv);
        }
        report.triplet.push(EpochRecord { step: 1, epoch, loss: total / triplets.len() as f64, seconds: t0.elapsed().as_secs_f64() });
    }
    let vt = vstore.get(vid);
    model.vectors = (0..corpus.users.len()).map(|n| PreferenceVector(vt.row(n).to_vec())).collect();

    // phase 2: enhancer conditioned on v^n
    let extractor = PerceptualExtractor::new();
    let mut adam_en = Adam::new(&model.enhancer.params, cfg.lr);
    let mut items: Vec<(usize, usize)> =
        corpus.users.iter().enumerate().flat_map(|(n, u)| (0..u.set.len()).map(move |i| (n, i))).collect();
    for epoch in 0..cfg.epochs_enhancer {
        let t0 = Instant::now();
        items.shuffle(&mut rng);
        let mut total = 0.0;
        for batch in items.chunks(cfg.batch) {
            let b = batch.len();
            let pairs: Vec<_> = batch.iter().map(|&(n, i)| &corpus.users[n].set.pairs[i]).collect();
            let xt = images_to_tensor(pairs.iter().map(|p| &p.original), ns)?;
            let yt = images_to_tensor(pairs.iter().map(|p| &p.retouched), ns)?;
            let vdata: Vec<f64> = batch.iter().flat_map(|&(n, _)| model.vectors[n].0.iter().copied()).collect();
            let mut g = Graph::new();
            let pe = model.enhancer.params.bind(&mut g);
            let x = g.constant(xt);
            let y = g.constant(yt);
            let v = g.constant(Tensor::new(vec![b, net_cfg.style_dim], vdata));
            let pred = model.enhancer.forward(&mut g, &pe, x, Some(v));
            let loss = pienet_loss(&mut g, pred, y, loss_cfg, &extractor);
            total += g.value(loss).item() * b as f64;
            g.backward(loss);
            let ge = pe.grads(&g);
            adam_en.step(&mut model.enhancer.params, &ge);
        }
        report.enhancer.push(EpochRecord { step: 2, epoch, loss: total / items.len() as f64, seconds: t0.elapsed().as_secs_f64() });
    }
    Ok((model, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{build_corpus, CorpusConfig};

    #[test]
    fn needs_two_users_and_positive_margin() {
        let corpus = build_corpus(&CorpusConfig { n_users: 2, images_per_user: 4, image_size: 16, ..CorpusConfig::default() }).unwrap();
        let single = Corpus { users: corpus.users[..1].to_vec(), ..corpus.clone() };
        let net = NetConfig { style_dim: 8, content_dim: 8, heads: 2, embed_input_size: 16, enhancer_input_size: 16, base_channels: 4, embed_channels: 4, ..NetConfig::default() };
        assert!(matches!(
            train_pienet_baseline(&single, &net, &PieNetConfig::default(), &LossConfig::default()),
            Err(Error::NotEnoughData(_))
        ));
        assert!(PieNetConfig { alpha: 0.0, ..PieNetConfig::default() }.validate().is_err());
    }

    #[test]
    fn hinge_floor_is_zero() {
        let corpus = build_corpus(&CorpusConfig { n_users: 3, images_per_user: 4, image_size: 16, ..CorpusConfig::default() }).unwrap();
        let net = NetConfig { style_dim: 8, content_dim: 8, heads: 2, embed_input_size: 16, enhancer_input_size: 16, base_channels: 4, embed_channels: 4, ..NetConfig::default() };
        let cfg = PieNetConfig { epochs_triplet: 0, epochs_enhancer: 0, ..PieNetConfig::default() };
        let (model, _) = train_pienet_baseline(&corpus, &net, &cfg, &LossConfig::default()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let triplets = sample_triplets(&corpus, &mut rng);
        assert!(triplets.iter().all(|t| t.0 != t.2));
        assert!(triplet_loss(&model, &corpus, &triplets, 1e-12).unwrap() >= 0.0);
    }
}
