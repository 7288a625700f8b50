use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::autodiff::{gradcheck, ParamStore, Var};

fn tiny_cfg() -> NetConfig {
    NetConfig {
        style_dim: 8,
        content_dim: 16,
        grid: 2,
        transformer_layers: 2,
        heads: 2,
        ff_dim: 16,
        enhancer_levels: 2,
        base_channels: 4,
        embed_channels: 4,
        embed_input_size: 16,
        enhancer_input_size: 16,
        style_mode: StyleMode::Residual,
        seed: 3,
    }
}

fn noise_image(side: usize, seed: u64) -> Image {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Image::from_fn(side, side, |_, _| [rng.random(), rng.random(), rng.random()]).unwrap()
}

fn named(store: &ParamStore) -> HashMap<String, Tensor> {
    store.iter().map(|(n, t)| (n.to_string(), t.clone())).collect()
}

// ---- scalar reference implementations ----

fn ref_conv(x: &[f64], cin: usize, h: usize, w: usize, wt: &Tensor, b: Option<&Tensor>, stride: usize) -> (Vec<f64>, usize, usize) {
    let cout = wt.shape[0];
    let k = wt.shape[2];
    let pad = k / 2;
    let oh = (h + 2 * pad - k) / stride + 1;
    let ow = (w + 2 * pad - k) / stride + 1;
    let mut out = vec![0.0; cout * oh * ow];
    for co in 0..cout {
        for oy in 0..oh {
            for ox in 0..ow {
                let mut acc = b.map_or(0.0, |b| b.data[co]);
                for ci in 0..cin {
                    for ky in 0..k {
                        for kx in 0..k {
                            let iy = (oy * stride + ky) as isize - pad as isize;
                            let ix = (ox * stride + kx) as isize - pad as isize;
                            if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                continue;
                            }
                            acc += wt.data[((co * cin + ci) * k + ky) * k + kx] * x[(ci * h + iy as usize) * w + ix as usize];
                        }
                    }
                }
                out[(co * oh + oy) * ow + ox] = acc;
            }
        }
    }
    (out, oh, ow)
}

fn lrelu(v: &mut [f64]) {
    for x in v {
        if *x < 0.0 {
            *x *= 0.2;
        }
    }
}

fn ref_dense(x: &[f64], w: &Tensor, b: Option<&Tensor>) -> Vec<f64> {
    let (din, dout) = (w.shape[0], w.shape[1]);
    (0..dout).map(|j| b.map_or(0.0, |b| b.data[j]) + (0..din).map(|i| x[i] * w.data[i * dout + j]).sum::<f64>()).collect()
}

fn ref_layer_norm(x: &[f64], gamma: &Tensor, beta: &Tensor) -> Vec<f64> {
    let n = x.len() as f64;
    let mu = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / n;
    let sd = (var + 1e-5).sqrt();
    x.iter().enumerate().map(|(i, v)| (v - mu) / sd * gamma.data[i] + beta.data[i]).collect()
}

fn ref_gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + ((2.0 / std::f64::consts::PI).sqrt() * (x + 0.044715 * x.powi(3))).tanh())
}

fn ref_style_features(net: &StyleNet, img: &Image) -> Vec<f64> {
    let p = named(&net.params);
    let mut h = img.height();
    let mut w = img.width();
    let (mut x, oh, ow) = ref_conv(&img.to_chw(), 3, h, w, &p["stem.w"], Some(&p["stem.b"]), 1);
    lrelu(&mut x);
    (h, w) = (oh, ow);
    let mut c = p["stem.w"].shape[0];
    for i in 0..super::style::STYLE_DOWNSAMPLES {
        let wt = &p[&format!("down{i}.w")];
        let (y, oh, ow) = ref_conv(&x, c, h, w, wt, Some(&p[&format!("down{i}.b")]), 2);
        x = y;
        lrelu(&mut x);
        (h, w, c) = (oh, ow, wt.shape[0]);
    }
    let pooled: Vec<f64> = (0..c).map(|ch| x[ch * h * w..(ch + 1) * h * w].iter().sum::<f64>() / (h * w) as f64).collect();
    ref_dense(&pooled, &p["head.w"], Some(&p["head.b"]))
}

/// Direct per-sequence evaluation of the transformer on a token matrix.
fn ref_transformer(net: &MaskedStyleTransformer, cfg: &NetConfig, rows: &[Vec<f64>]) -> (Vec<f64>, Vec<Vec<Vec<f64>>>) {
    let p = named(&net.params);
    let t = rows.len();
    let d = cfg.model_dim();
    let dh = d / cfg.heads;
    let mut x: Vec<Vec<f64>> = rows.to_vec();
    let mut layer_maps = Vec::new();
    for l in 0..cfg.transformer_layers {
        let g = |s: &str| &p[&format!("block{l}.{s}")];
        let hn: Vec<Vec<f64>> = x.iter().map(|r| ref_layer_norm(r, g("ln1.gamma"), g("ln1.beta"))).collect();
        let q: Vec<Vec<f64>> = hn.iter().map(|r| ref_dense(r, g("wq.w"), Some(g("wq.b")))).collect();
        let k: Vec<Vec<f64>> = hn.iter().map(|r| ref_dense(r, g("wk.w"), Some(g("wk.b")))).collect();
        let v: Vec<Vec<f64>> = hn.iter().map(|r| ref_dense(r, g("wv.w"), Some(g("wv.b")))).collect();
        let mut att = vec![vec![0.0; d]; t];
        let mut head_avg = vec![vec![0.0; t]; t];
        for h in 0..cfg.heads {
            let cols = h * dh..(h + 1) * dh;
            for i in 0..t {
                let scores: Vec<f64> = (0..t)
                    .map(|j| cols.clone().map(|c| q[i][c] * k[j][c]).sum::<f64>() / (dh as f64).sqrt())
                    .collect();
                let m = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let e: Vec<f64> = scores.iter().map(|s| (s - m).exp()).collect();
                let z: f64 = e.iter().sum();
                for j in 0..t {
                    let a = e[j] / z;
                    head_avg[i][j] += a / cfg.heads as f64;
                    for c in cols.clone() {
                        att[i][c] += a * v[j][c];
                    }
                }
            }
        }
        layer_maps.push(head_avg);
        for i in 0..t {
            let o = ref_dense(&att[i], g("wo.w"), Some(g("wo.b")));
            for c in 0..d {
                x[i][c] += o[c];
            }
            let h2 = ref_layer_norm(&x[i], g("ln2.gamma"), g("ln2.beta"));
            let f: Vec<f64> = ref_dense(&h2, g("ff1.w"), Some(g("ff1.b"))).into_iter().map(ref_gelu).collect();
            let f = ref_dense(&f, g("ff2.w"), Some(g("ff2.b")));
            for c in 0..d {
                x[i][c] += f[c];
            }
        }
    }
    let last = ref_layer_norm(&x[t - 1], &p["final_norm.gamma"], &p["final_norm.beta"]);
    (ref_dense(&last, &p["head.w"], Some(&p["head.b"])), layer_maps)
}

fn random_input(model: &MsmModel, n: usize, seed: u64) -> TransformerInput {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cfg = &model.cfg;
    let pairs: Vec<(ContentEmbedding, StyleEmbedding)> = (0..n)
        .map(|_| {
            (
                ContentEmbedding((0..cfg.content_dim).map(|_| rng.random_range(-1.0..1.0)).collect()),
                StyleEmbedding((0..cfg.style_dim).map(|_| rng.random_range(-1.0..1.0)).collect()),
            )
        })
        .collect();
    let unseen = ContentEmbedding((0..cfg.content_dim).map(|_| rng.random_range(-1.0..1.0)).collect());
    model.build_input(&pairs, &unseen).unwrap()
}

// ---- tests ----

#[test]
fn config_validation() {
    assert!(tiny_cfg().validate().is_ok());
    assert!(NetConfig::default().validate().is_ok());
    for bad in [
        NetConfig { grid: 3, ..tiny_cfg() },
        NetConfig { heads: 5, ..tiny_cfg() },
        NetConfig { content_dim: 18, ..tiny_cfg() },
        NetConfig { embed_input_size: 12, ..tiny_cfg() },
        NetConfig { style_dim: 0, ..tiny_cfg() },
        NetConfig { enhancer_levels: 1, ..tiny_cfg() },
    ] {
        assert!(matches!(bad.validate(), Err(Error::Config { .. })), "{bad:?}");
    }
}

#[test]
fn style_of_identity_pair_is_zero_only_in_residual_mode() {
    let x = noise_image(16, 1);
    let m = MsmModel::new(tiny_cfg()).unwrap();
    assert!(m.style_embed(&x, &x).unwrap().0.iter().all(|&v| v == 0.0));
    let abs = MsmModel::new(NetConfig { style_mode: StyleMode::Absolute, ..tiny_cfg() }).unwrap();
    assert!(abs.style_embed(&x, &x).unwrap().norm() > 1e-6);
}

#[test]
fn residual_style_is_antisymmetric() {
    let m = MsmModel::new(tiny_cfg()).unwrap();
    let (x, y) = (noise_image(16, 1), noise_image(16, 2));
    let a = m.style_embed(&x, &y).unwrap();
    let b = m.style_embed(&y, &x).unwrap();
    for (p, q) in a.0.iter().zip(&b.0) {
        assert!((p + q).abs() < 1e-12);
    }
}

#[test]
fn batched_embeddings_match_single() {
    let m = MsmModel::new(tiny_cfg()).unwrap();
    let imgs: Vec<Image> = (0..3).map(|i| noise_image(16, 10 + i)).collect();
    let pairs: Vec<(&Image, &Image)> = vec![(&imgs[0], &imgs[1]), (&imgs[1], &imgs[2])];
    let batch = m.style_embed_batch(&pairs).unwrap();
    for (b, (x, y)) in batch.iter().zip(&pairs) {
        let s = m.style_embed(x, y).unwrap();
        for (p, q) in b.0.iter().zip(&s.0) {
            assert!((p - q).abs() < 1e-10);
        }
    }
    let cb = m.content_embed_batch(&[&imgs[0], &imgs[2]]).unwrap();
    assert_eq!(cb[1], m.content_embed(&imgs[2]).unwrap());
}

#[test]
fn style_net_matches_scalar_reference() {
    let m = MsmModel::new(tiny_cfg()).unwrap();
    let img = noise_image(16, 5);
    let got = m.style_features(&[&img]).unwrap();
    let want = ref_style_features(&m.style, &img);
    assert_eq!(got.data.len(), want.len());
    for (a, b) in got.data.iter().zip(&want) {
        assert!((a - b).abs() < 1e-5, "{a} vs {b}");
    }
}

#[test]
fn content_length_is_content_dim_for_every_grid() {
    for grid in [1, 2, 4, 8] {
        let cfg = NetConfig { grid, content_dim: 64, style_dim: 64, heads: 4, embed_input_size: 32, ..tiny_cfg() };
        let m = MsmModel::new(cfg).unwrap();
        let c = m.content_embed(&noise_image(24, grid as u64)).unwrap();
        assert_eq!(c.0.len(), 64, "l = {grid}");
    }
}

#[test]
fn transformer_matches_scalar_reference() {
    let m = MsmModel::new(tiny_cfg()).unwrap();
    let a = random_input(&m, 5, 7);
    let rows: Vec<Vec<f64>> = (0..6).map(|i| a.row(i).to_vec()).collect();
    let (want, want_maps) = ref_transformer(&m.transformer, &m.cfg, &rows);
    let (got, maps) = m.predict_style_with_attention(&a).unwrap();
    for (x, y) in got.0.iter().zip(&want) {
        assert!((x - y).abs() < 1e-4, "{x} vs {y}");
    }
    assert_eq!(maps.len(), m.cfg.transformer_layers);
    for (layer, want) in maps.iter().zip(&want_maps) {
        for i in 0..6 {
            for j in 0..6 {
                let avg = (0..layer.heads).map(|h| layer.get(0, h, i, j)).sum::<f64>() / layer.heads as f64;
                assert!((avg - want[i][j]).abs() < 1e-4);
            }
        }
    }
}

#[test]
fn prediction_is_invariant_to_preferred_order() {
    let m = MsmModel::new(tiny_cfg()).unwrap();
    let a = random_input(&m, 6, 9);
    let base = m.predict_style(&a).unwrap();
    let n = a.num_preferred();
    let d = a.rows.shape[1];
    let perm = [3, 0, 5, 1, 4, 2];
    let mut data = Vec::new();
    for &i in &perm {
        data.extend_from_slice(a.row(i));
    }
    data.extend_from_slice(a.row(n));
    let b = TransformerInput { rows: Tensor::new(vec![n + 1, d], data), ..a.clone() };
    let permuted = m.predict_style(&b).unwrap();
    for (x, y) in base.0.iter().zip(&permuted.0) {
        assert!((x - y).abs() <= 1e-4);
    }
}

#[test]
fn build_input_layout_and_errors() {
    let m = MsmModel::new(tiny_cfg()).unwrap();
    let a = random_input(&m, 3, 1);
    assert_eq!(a.rows.shape, vec![4, 24]);
    assert_eq!(&a.row(3)[16..], m.transformer.mask_token());
    let unseen = ContentEmbedding(vec![0.0; 16]);
    assert!(matches!(m.build_input(&[], &unseen), Err(Error::EmptyPreferredSet)));
    let bad = ContentEmbedding(vec![0.0; 3]);
    assert!(m.build_input(&[(bad, StyleEmbedding(vec![0.0; 8]))], &unseen).is_err());
}

#[test]
fn rollout_is_a_distribution() {
    let m = MsmModel::new(tiny_cfg()).unwrap();
    let a = random_input(&m, 7, 2);
    let r = m.attention_rollout(&a).unwrap();
    assert_eq!(r.len(), 7);
    assert!((r.iter().sum::<f64>() - 1.0).abs() < 1e-9);
    assert!(r.iter().all(|&v| v >= 0.0));
}

#[test]
fn zero_style_equals_disabled_injection() {
    let m = MsmModel::new(tiny_cfg()).unwrap();
    let x = noise_image(16, 4);
    let zero = StyleEmbedding(vec![0.0; 8]);
    assert_eq!(m.enhance_raw(&x, Some(&zero)).unwrap(), m.enhance_raw(&x, None).unwrap());
    let out = m.enhance(&x, &StyleEmbedding(vec![3.0; 8])).unwrap();
    assert_eq!(out.dims(), (16, 16));
    assert!(out.data().iter().all(|v| (0.0..=1.0).contains(v)));
}

#[test]
fn enhance_batch_matches_single() {
    let m = MsmModel::new(tiny_cfg()).unwrap();
    let xs = [noise_image(16, 1), noise_image(16, 2)];
    let ss = [StyleEmbedding(vec![0.5; 8]), StyleEmbedding(vec![-0.5; 8])];
    let batch = m.enhance_batch(&[&xs[0], &xs[1]], &ss).unwrap();
    for i in 0..2 {
        let single = m.enhance(&xs[i], &ss[i]).unwrap();
        for (a, b) in batch[i].data().iter().zip(single.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}

fn squared_mean(g: &mut Graph, v: Var) -> Var {
    let sq = g.mul(v, v);
    g.mean(sq)
}

fn check_tol(report: gradcheck::GradCheckReport) {
    assert!(report.checked > 0);
    assert!(report.max_rel_err < 1e-3, "{report:?}");
}

#[test]
fn gradients_style_and_content() {
    let cfg = NetConfig { embed_input_size: 8, ..tiny_cfg() };
    let m = MsmModel::new(cfg).unwrap();
    let x = images_to_tensor([&noise_image(8, 1), &noise_image(8, 2)], 8).unwrap();
    let mut store = m.style.params.clone();
    check_tol(gradcheck::check(&mut store, 1e-6, 6, |g, p| {
        let xv = g.constant(x.clone());
        let out = m.style.forward(g, p, xv);
        squared_mean(g, out)
    }));
    let mut store = m.content.params.clone();
    check_tol(gradcheck::check(&mut store, 1e-6, 6, |g, p| {
        let xv = g.constant(x.clone());
        let out = m.content.forward(g, p, xv);
        squared_mean(g, out)
    }));
}

#[test]
fn gradients_transformer() {
    let m = MsmModel::new(tiny_cfg()).unwrap();
    let seq = 4;
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let contents = Tensor::new(vec![2 * seq, 16], (0..2 * seq * 16).map(|_| rng.random_range(-1.0..1.0)).collect());
    let styles = Tensor::new(vec![2 * (seq - 1), 8], (0..2 * (seq - 1) * 8).map(|_| rng.random_range(-1.0..1.0)).collect());
    let target = Tensor::new(vec![2, 8], (0..16).map(|_| rng.random_range(-1.0..1.0)).collect());
    let mut store = m.transformer.params.clone();
    check_tol(gradcheck::check(&mut store, 1e-6, 6, |g, p| {
        let c = g.constant(contents.clone());
        let s = g.constant(styles.clone());
        let tokens = m.transformer.assemble(g, p, c, s, 2, seq);
        let out = m.transformer.forward(g, p, tokens, seq);
        let t = g.constant(target.clone());
        let diff = g.sub(out, t);
        squared_mean(g, diff)
    }));
}

#[test]
fn gradients_enhancer() {
    let cfg = NetConfig { enhancer_input_size: 8, ..tiny_cfg() };
    let m = MsmModel::new(cfg).unwrap();
    let x = images_to_tensor([&noise_image(8, 3)], 8).unwrap();
    let s = Tensor::new(vec![1, 8], vec![0.3, -0.2, 0.1, 0.5, -0.4, 0.2, 0.0, 0.7]);
    let mut store = m.enhancer.params.clone();
    check_tol(gradcheck::check(&mut store, 1e-6, 6, |g, p| {
        let xv = g.constant(x.clone());
        let sv = g.constant(s.clone());
        let out = m.enhancer.forward(g, p, xv, Some(sv));
        squared_mean(g, out)
    }));
}

#[test]
fn batched_prediction_matches_single() {
    let m = MsmModel::new(tiny_cfg()).unwrap();
    let inputs: Vec<TransformerInput> = (0..3).map(|i| random_input(&m, 4, 20 + i)).collect();
    let (styles, rollouts) = m.predict_styles_batch(&inputs).unwrap();
    for (i, a) in inputs.iter().enumerate() {
        let s = m.predict_style(a).unwrap();
        let r = m.attention_rollout(a).unwrap();
        for (x, y) in styles[i].0.iter().zip(&s.0) {
            assert!((x - y).abs() < 1e-10);
        }
        for (x, y) in rollouts[i].iter().zip(&r) {
            assert!((x - y).abs() < 1e-10);
        }
    }
    assert!(m.predict_styles_batch(&[random_input(&m, 4, 1), random_input(&m, 5, 1)]).is_err());
}
