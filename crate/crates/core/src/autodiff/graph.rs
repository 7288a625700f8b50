//! Tape-based reverse-mode differentiation.
//!
//! A [`Graph`] records every operation together with its output value.
//! [`Graph::backward`] walks the tape in reverse and accumulates gradients
//! for every node that (transitively) depends on a trainable leaf.
//!
//! Layout conventions: images are `[N, C, H, W]`, token matrices `[M, D]`.

use super::tensor::{gemm, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

enum Op {
    Leaf,
    Conv2d { x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize, cols: Vec<f64> },
    LeakyRelu { x: Var, slope: f64 },
    Gelu { x: Var },
    AvgPool { x: Var, k: usize },
    Upsample { x: Var, k: usize },
    ConcatChannels { a: Var, b: Var },
    GlobalAvgPool { x: Var },
    AddChannelBias { x: Var, bias: Var },
    Add { a: Var, b: Var },
    Sub { a: Var, b: Var },
    Mul { a: Var, b: Var },
    Scale { x: Var, s: f64 },
    Linear { x: Var, w: Var, b: Option<Var> },
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<f64>, rstd: Vec<f64> },
    Attention { q: Var, k: Var, v: Var, seq: usize, heads: usize },
    ConcatCols { a: Var, b: Var },
    ConcatRows { parts: Vec<Var> },
    SelectRows { x: Var, idx: Vec<usize> },
    Reshape { x: Var },
    FlattenHwc { x: Var },
    Mae { a: Var, b: Var },
    SquaredTv { x: Var },
    Mean { x: Var },
    SumLast { x: Var },
    Relu { x: Var },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Attention probabilities recorded by [`Graph::attention`]: `[B, heads, T, T]`.
#[derive(Clone, Debug)]
pub struct AttentionProbs {
    pub batch: usize,
    pub heads: usize,
    pub seq: usize,
    pub probs: Vec<f64>,
}

impl AttentionProbs {
    pub fn get(&self, b: usize, h: usize, i: usize, j: usize) -> f64 {
        self.probs[((b * self.heads + h) * self.seq + i) * self.seq + j]
    }
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Option<Tensor>>,
    attention: Vec<(Var, AttentionProbs)>,
}

const LN_EPS: f64 = 1e-5;

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].value.shape
    }

    /// Trainable leaf.
    pub fn param(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Non-trainable leaf.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Attention maps recorded so far, in forward order.
    pub fn attention_maps(&self) -> impl Iterator<Item = &AttentionProbs> {
        self.attention.iter().map(|(_, p)| p)
    }

    // ----- convolution & spatial ops -------------------------------------

    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Var {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        assert_eq!(xs.len(), 4, "conv2d input must be NCHW");
        let (n, c, h, wd) = (xs[0], xs[1], xs[2], xs[3]);
        let (o, k) = (ws[0], ws[2]);
        assert_eq!(ws[1], c, "conv2d channel mismatch");
        let ho = (h + 2 * pad - k) / stride + 1;
        let wo = (wd + 2 * pad - k) / stride + 1;
        let ckk = c * k * k;
        let cols_n = n * ho * wo;
        let cols = im2col(&self.value(x).data, n, c, h, wd, k, stride, pad, ho, wo);
        let mut out_mat = vec![0.0; o * cols_n];
        gemm(o, ckk, cols_n, &self.value(w).data, false, &cols, false, 0.0, &mut out_mat);
        let hw = ho * wo;
        let mut out = vec![0.0; n * o * hw];
        let bias = b.map(|b| self.value(b).data.clone());
        for ni in 0..n {
            for oi in 0..o {
                let src = &out_mat[oi * cols_n + ni * hw..oi * cols_n + (ni + 1) * hw];
                let dst = &mut out[(ni * o + oi) * hw..(ni * o + oi + 1) * hw];
                let bv = bias.as_ref().map_or(0.0, |bb| bb[oi]);
                for (d, s) in dst.iter_mut().zip(src) {
                    *d = s + bv;
                }
            }
        }
        let mut deps = vec![x, w];
        deps.extend(b);
        let rg = self.rg(&deps);
        self.push(Tensor::new(vec![n, o, ho, wo], out), Op::Conv2d { x, w, b, stride, pad, cols }, rg)
    }

    pub fn leaky_relu(&mut self, x: Var, slope: f64) -> Var {
        let t = self.value(x);
        let data = t.data.iter().map(|&v| if v > 0.0 { v } else { slope * v }).collect();
        let out = Tensor::new(t.shape.clone(), data);
        let rg = self.rg(&[x]);
        self.push(out, Op::LeakyRelu { x, slope }, rg)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let out = Tensor::new(t.shape.clone(), t.data.iter().map(|&v| v.max(0.0)).collect());
        let rg = self.rg(&[x]);
        self.push(out, Op::Relu { x }, rg)
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let out = Tensor::new(t.shape.clone(), t.data.iter().map(|&v| gelu(v)).collect());
        let rg = self.rg(&[x]);
        self.push(out, Op::Gelu { x }, rg)
    }

    /// Non-overlapping `k x k` average pooling.
    pub fn avg_pool(&mut self, x: Var, k: usize) -> Var {
        if k == 1 {
            return x;
        }
        let s = self.shape(x).to_vec();
        let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
        assert!(h % k == 0 && w % k == 0, "avg_pool needs divisible spatial dims");
        let (ho, wo) = (h / k, w / k);
        let src = &self.value(x).data;
        let mut out = vec![0.0; n * c * ho * wo];
        let norm = 1.0 / (k * k) as f64;
        for p in 0..n * c {
            for r in 0..h {
                for col in 0..w {
                    out[p * ho * wo + (r / k) * wo + col / k] += src[p * h * w + r * w + col] * norm;
                }
            }
        }
        let rg = self.rg(&[x]);
        self.push(Tensor::new(vec![n, c, ho, wo], out), Op::AvgPool { x, k }, rg)
    }

    /// Nearest-neighbour upsampling by `k`.
    pub fn upsample(&mut self, x: Var, k: usize) -> Var {
        let s = self.shape(x).to_vec();
        let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
        let (ho, wo) = (h * k, w * k);
        let src = &self.value(x).data;
        let mut out = vec![0.0; n * c * ho * wo];
        for p in 0..n * c {
            for r in 0..ho {
                for col in 0..wo {
                    out[p * ho * wo + r * wo + col] = src[p * h * w + (r / k) * w + col / k];
                }
            }
        }
        let rg = self.rg(&[x]);
        self.push(Tensor::new(vec![n, c, ho, wo], out), Op::Upsample { x, k }, rg)
    }

    pub fn concat_channels(&mut self, a: Var, b: Var) -> Var {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        assert!(sa[0] == sb[0] && sa[2] == sb[2] && sa[3] == sb[3], "concat_channels shape mismatch");
        let (n, ca, cb, hw) = (sa[0], sa[1], sb[1], sa[2] * sa[3]);
        let (da, db) = (&self.value(a).data, &self.value(b).data);
        let mut out = Vec::with_capacity(n * (ca + cb) * hw);
        for ni in 0..n {
            out.extend_from_slice(&da[ni * ca * hw..(ni + 1) * ca * hw]);
            out.extend_from_slice(&db[ni * cb * hw..(ni + 1) * cb * hw]);
        }
        let rg = self.rg(&[a, b]);
        self.push(Tensor::new(vec![n, ca + cb, sa[2], sa[3]], out), Op::ConcatChannels { a, b }, rg)
    }

    /// `[N, C, H, W] -> [N, C]`
    pub fn global_avg_pool(&mut self, x: Var) -> Var {
        let s = self.shape(x).to_vec();
        let (n, c, hw) = (s[0], s[1], s[2] * s[3]);
        let src = &self.value(x).data;
        let out = (0..n * c).map(|p| src[p * hw..(p + 1) * hw].iter().sum::<f64>() / hw as f64).collect();
        let rg = self.rg(&[x]);
        self.push(Tensor::new(vec![n, c], out), Op::GlobalAvgPool { x }, rg)
    }

    /// Adds `bias[N, C]` to every spatial position of `x[N, C, H, W]`.
    pub fn add_channel_bias(&mut self, x: Var, bias: Var) -> Var {
        let s = self.shape(x).to_vec();
        let (n, c, hw) = (s[0], s[1], s[2] * s[3]);
        assert_eq!(self.shape(bias), &[n, c], "channel bias must be [N, C]");
        let bv = &self.value(bias).data;
        let mut out = self.value(x).data.clone();
        for p in 0..n * c {
            for v in &mut out[p * hw..(p + 1) * hw] {
                *v += bv[p];
            }
        }
        let rg = self.rg(&[x, bias]);
        self.push(Tensor::new(s, out), Op::AddChannelBias { x, bias }, rg)
    }

    /// `[N, C, H, W] -> [N, H*W*C]`, channel-fastest (row-major HWC).
    pub fn flatten_hwc(&mut self, x: Var) -> Var {
        let s = self.shape(x).to_vec();
        let (n, c, hw) = (s[0], s[1], s[2] * s[3]);
        let src = &self.value(x).data;
        let mut out = vec![0.0; n * c * hw];
        for ni in 0..n {
            for ci in 0..c {
                for p in 0..hw {
                    out[ni * c * hw + p * c + ci] = src[(ni * c + ci) * hw + p];
                }
            }
        }
        let rg = self.rg(&[x]);
        self.push(Tensor::new(vec![n, c * hw], out), Op::FlattenHwc { x }, rg)
    }

    // ----- elementwise -----------------------------------------------------

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let out = zip_map(self.value(a), self.value(b), |x, y| x + y);
        let rg = self.rg(&[a, b]);
        self.push(out, Op::Add { a, b }, rg)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let out = zip_map(self.value(a), self.value(b), |x, y| x - y);
        let rg = self.rg(&[a, b]);
        self.push(out, Op::Sub { a, b }, rg)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let out = zip_map(self.value(a), self.value(b), |x, y| x * y);
        let rg = self.rg(&[a, b]);
        self.push(out, Op::Mul { a, b }, rg)
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        let t = self.value(x);
        let out = Tensor::new(t.shape.clone(), t.data.iter().map(|v| v * s).collect());
        let rg = self.rg(&[x]);
        self.push(out, Op::Scale { x, s }, rg)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Var {
        let out = self.value(x).clone().reshaped(shape);
        let rg = self.rg(&[x]);
        self.push(out, Op::Reshape { x }, rg)
    }

    // ----- token-matrix ops --------------------------------------------------

    /// `x[M, K] @ w[K, E] + b[E]`
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Var {
        let (xs, ws) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        assert_eq!(xs.len(), 2, "linear input must be [M, K]");
        assert_eq!(xs[1], ws[0], "linear inner dimension mismatch");
        let (m, k, e) = (xs[0], xs[1], ws[1]);
        let mut out = vec![0.0; m * e];
        if let Some(b) = b {
            let bv = &self.value(b).data;
            for r in 0..m {
                out[r * e..(r + 1) * e].copy_from_slice(bv);
            }
        }
        gemm(m, k, e, &self.value(x).data, false, &self.value(w).data, false, 1.0, &mut out);
        let mut deps = vec![x, w];
        deps.extend(b);
        let rg = self.rg(&deps);
        self.push(Tensor::new(vec![m, e], out), Op::Linear { x, w, b }, rg)
    }

    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Var {
        let xs = self.shape(x).to_vec();
        let d = *xs.last().unwrap();
        let m = self.value(x).len() / d;
        let (g, bt) = (&self.value(gamma).data, &self.value(beta).data);
        let src = &self.value(x).data;
        let mut xhat = vec![0.0; m * d];
        let mut rstd = vec![0.0; m];
        let mut out = vec![0.0; m * d];
        for r in 0..m {
            let row = &src[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let rs = 1.0 / (var + LN_EPS).sqrt();
            rstd[r] = rs;
            for j in 0..d {
                let xh = (row[j] - mean) * rs;
                xhat[r * d + j] = xh;
                out[r * d + j] = g[j] * xh + bt[j];
            }
        }
        let rg = self.rg(&[x, gamma, beta]);
        self.push(Tensor::new(xs, out), Op::LayerNorm { x, gamma, beta, xhat, rstd }, rg)
    }

    /// Multi-head scaled dot-product attention over independent segments of
    /// `seq` consecutive rows. `q`, `k`, `v` are `[B*seq, D]`.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, seq: usize, heads: usize) -> Var {
        let s = self.shape(q).to_vec();
        let (m, d) = (s[0], s[1]);
        assert!(m % seq == 0 && d % heads == 0, "attention shape mismatch");
        let (batch, dh) = (m / seq, d / heads);
        let scale = 1.0 / (dh as f64).sqrt();
        let (qd, kd, vd) = (&self.value(q).data, &self.value(k).data, &self.value(v).data);
        let mut probs = vec![0.0; batch * heads * seq * seq];
        let mut out = vec![0.0; m * d];
        let mut logits = vec![0.0; seq];
        for b in 0..batch {
            for h in 0..heads {
                let off = h * dh;
                for i in 0..seq {
                    let qi = &qd[(b * seq + i) * d + off..(b * seq + i) * d + off + dh];
                    let mut mx = f64::NEG_INFINITY;
                    for j in 0..seq {
                        let kj = &kd[(b * seq + j) * d + off..(b * seq + j) * d + off + dh];
                        let dot: f64 = qi.iter().zip(kj).map(|(x, y)| x * y).sum();
                        logits[j] = dot * scale;
                        mx = mx.max(logits[j]);
                    }
                    let mut z = 0.0;
                    for l in logits.iter_mut() {
                        *l = (*l - mx).exp();
                        z += *l;
                    }
                    let prow = &mut probs[((b * heads + h) * seq + i) * seq..((b * heads + h) * seq + i + 1) * seq];
                    for j in 0..seq {
                        prow[j] = logits[j] / z;
                    }
                    let orow = &mut out[(b * seq + i) * d + off..(b * seq + i) * d + off + dh];
                    for j in 0..seq {
                        let p = prow[j];
                        let vj = &vd[(b * seq + j) * d + off..(b * seq + j) * d + off + dh];
                        for (o, vv) in orow.iter_mut().zip(vj) {
                            *o += p * vv;
                        }
                    }
                }
            }
        }
        let rg = self.rg(&[q, k, v]);
        let var = self.push(Tensor::new(vec![m, d], out), Op::Attention { q, k, v, seq, heads }, rg);
        self.attention.push((var, AttentionProbs { batch, heads, seq, probs }));
        var
    }

    pub fn concat_cols(&mut self, a: Var, b: Var) -> Var {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        assert_eq!(sa[0], sb[0], "concat_cols row mismatch");
        let (m, p, q) = (sa[0], sa[1], sb[1]);
        let (da, db) = (&self.value(a).data, &self.value(b).data);
        let mut out = Vec::with_capacity(m * (p + q));
        for r in 0..m {
            out.extend_from_slice(&da[r * p..(r + 1) * p]);
            out.extend_from_slice(&db[r * q..(r + 1) * q]);
        }
        let rg = self.rg(&[a, b]);
        self.push(Tensor::new(vec![m, p + q], out), Op::ConcatCols { a, b }, rg)
    }

    /// Stacks 2-D tensors (or 1-D rows) along the first axis.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let cols = *self.shape(parts[0]).last().unwrap();
        let mut out = Vec::new();
        for &p in parts {
            assert_eq!(*self.shape(p).last().unwrap(), cols, "concat_rows width mismatch");
            out.extend_from_slice(&self.value(p).data);
        }
        let rows = out.len() / cols;
        let rg = self.rg(parts);
        self.push(Tensor::new(vec![rows, cols], out), Op::ConcatRows { parts: parts.to_vec() }, rg)
    }

    pub fn select_rows(&mut self, x: Var, idx: &[usize]) -> Var {
        let cols = *self.shape(x).last().unwrap();
        let src = &self.value(x).data;
        let mut out = Vec::with_capacity(idx.len() * cols);
        for &r in idx {
            out.extend_from_slice(&src[r * cols..(r + 1) * cols]);
        }
        let rg = self.rg(&[x]);
        self.push(Tensor::new(vec![idx.len(), cols], out), Op::SelectRows { x, idx: idx.to_vec() }, rg)
    }

    pub fn sum_last(&mut self, x: Var) -> Var {
        let s = self.shape(x).to_vec();
        let d = *s.last().unwrap();
        let out: Vec<f64> = self.value(x).data.chunks(d).map(|c| c.iter().sum()).collect();
        let rg = self.rg(&[x]);
        let shape = s[..s.len() - 1].to_vec();
        self.push(Tensor::new(shape, out), Op::SumLast { x }, rg)
    }

    // ----- reductions / losses ---------------------------------------------

    pub fn mae(&mut self, a: Var, b: Var) -> Var {
        let (ta, tb) = (self.value(a), self.value(b));
        assert_eq!(ta.len(), tb.len(), "mae length mismatch");
        let v = ta.data.iter().zip(&tb.data).map(|(x, y)| (x - y).abs()).sum::<f64>() / ta.len() as f64;
        let rg = self.rg(&[a, b]);
        self.push(Tensor::scalar(v), Op::Mae { a, b }, rg)
    }

    /// Mean squared vertical plus mean squared horizontal neighbour difference.
    pub fn squared_tv(&mut self, x: Var) -> Var {
        let s = self.shape(x).to_vec();
        let (p, h, w) = (s[0] * s[1], s[2], s[3]);
        let d = &self.value(x).data;
        let (mut dv, mut dh) = (0.0, 0.0);
        for pi in 0..p {
            let base = pi * h * w;
            for r in 0..h {
                for c in 0..w {
                    let v = d[base + r * w + c];
                    if r + 1 < h {
                        let e = d[base + (r + 1) * w + c] - v;
                        dv += e * e;
                    }
                    if c + 1 < w {
                        let e = d[base + r * w + c + 1] - v;
                        dh += e * e;
                    }
                }
            }
        }
        let val = dv / (p * (h - 1) * w) as f64 + dh / (p * h * (w - 1)) as f64;
        let rg = self.rg(&[x]);
        self.push(Tensor::scalar(val), Op::SquaredTv { x }, rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let v = t.data.iter().sum::<f64>() / t.len() as f64;
        let rg = self.rg(&[x]);
        self.push(Tensor::scalar(v), Op::Mean { x }, rg)
    }

    // ----- backward ----------------------------------------------------------

    /// Back-propagates from the scalar `loss` (seed gradient 1).
    pub fn backward(&mut self, loss: Var) {
        assert_eq!(self.value(loss).len(), 1, "backward needs a scalar loss");
        self.grads = (0..self.nodes.len()).map(|_| None).collect();
        self.grads[loss.0] = Some(Tensor::full(&self.value(loss).shape, 1.0));
        let nodes = &self.nodes;
        let grads = &mut self.grads;
        let attention = &self.attention;
        for i in (0..=loss.0).rev() {
            let Some(gout) = grads[i].take() else { continue };
            let node = &nodes[i];
            if !node.requires_grad {
                grads[i] = Some(gout);
                continue;
            }
            let mut acc = Acc { nodes, grads };
            match &node.op {
                Op::Leaf => {}
                Op::Conv2d { x, w, b, stride, pad, cols } => {
                    let (xs, ws) = (&nodes[x.0].value.shape, &nodes[w.0].value.shape);
                    let (n, c, h, wd) = (xs[0], xs[1], xs[2], xs[3]);
                    let (o, k) = (ws[0], ws[2]);
                    let (ho, wo) = (node.value.shape[2], node.value.shape[3]);
                    let hw = ho * wo;
                    let cols_n = n * hw;
                    let ckk = c * k * k;
                    let mut gmat = vec![0.0; o * cols_n];
                    for ni in 0..n {
                        for oi in 0..o {
                            gmat[oi * cols_n + ni * hw..oi * cols_n + (ni + 1) * hw]
                                .copy_from_slice(&gout.data[(ni * o + oi) * hw..(ni * o + oi + 1) * hw]);
                        }
                    }
                    if acc.wants(*w) {
                        let mut gw = vec![0.0; o * ckk];
                        gemm(o, cols_n, ckk, &gmat, false, cols, true, 0.0, &mut gw);
                        acc.add(*w, &gw);
                    }
                    if let Some(b) = b {
                        if acc.wants(*b) {
                            let gb: Vec<f64> = (0..o).map(|oi| gmat[oi * cols_n..(oi + 1) * cols_n].iter().sum()).collect();
                            acc.add(*b, &gb);
                        }
                    }
                    if acc.wants(*x) {
                        let mut gcols = vec![0.0; ckk * cols_n];
                        gemm(ckk, o, cols_n, &nodes[w.0].value.data, true, &gmat, false, 0.0, &mut gcols);
                        let gx = col2im(&gcols, n, c, h, wd, k, *stride, *pad, ho, wo);
                        acc.add(*x, &gx);
                    }
                }
                Op::LeakyRelu { x, slope } => {
                    let xv = &nodes[x.0].value.data;
                    let g: Vec<f64> = gout.data.iter().zip(xv).map(|(g, &v)| if v > 0.0 { *g } else { g * slope }).collect();
                    acc.add(*x, &g);
                }
                Op::Relu { x } => {
                    let xv = &nodes[x.0].value.data;
                    let g: Vec<f64> = gout.data.iter().zip(xv).map(|(g, &v)| if v > 0.0 { *g } else { 0.0 }).collect();
                    acc.add(*x, &g);
                }
                Op::Gelu { x } => {
                    let xv = &nodes[x.0].value.data;
                    let g: Vec<f64> = gout.data.iter().zip(xv).map(|(g, &v)| g * gelu_grad(v)).collect();
                    acc.add(*x, &g);
                }
                Op::AvgPool { x, k } => {
                    let s = &nodes[x.0].value.shape;
                    let (nc, h, w) = (s[0] * s[1], s[2], s[3]);
                    let (ho, wo) = (h / k, w / k);
                    let norm = 1.0 / (k * k) as f64;
                    let mut g = vec![0.0; nc * h * w];
                    for p in 0..nc {
                        for r in 0..h {
                            for c in 0..w {
                                g[p * h * w + r * w + c] = gout.data[p * ho * wo + (r / k) * wo + c / k] * norm;
                            }
                        }
                    }
                    acc.add(*x, &g);
                }
                Op::Upsample { x, k } => {
                    let s = &nodes[x.0].value.shape;
                    let (nc, h, w) = (s[0] * s[1], s[2], s[3]);
                    let (ho, wo) = (h * k, w * k);
                    let mut g = vec![0.0; nc * h * w];
                    for p in 0..nc {
                        for r in 0..ho {
                            for c in 0..wo {
                                g[p * h * w + (r / k) * w + c / k] += gout.data[p * ho * wo + r * wo + c];
                            }
                        }
                    }
                    acc.add(*x, &g);
                }
                Op::ConcatChannels { a, b } => {
                    let (sa, sb) = (&nodes[a.0].value.shape, &nodes[b.0].value.shape);
                    let (n, ca, cb, hw) = (sa[0], sa[1], sb[1], sa[2] * sa[3]);
                    let mut ga = Vec::with_capacity(n * ca * hw);
                    let mut gb = Vec::with_capacity(n * cb * hw);
                    for ni in 0..n {
                        let base = ni * (ca + cb) * hw;
                        ga.extend_from_slice(&gout.data[base..base + ca * hw]);
                        gb.extend_from_slice(&gout.data[base + ca * hw..base + (ca + cb) * hw]);
                    }
                    acc.add(*a, &ga);
                    acc.add(*b, &gb);
                }
                Op::GlobalAvgPool { x } => {
                    let s = &nodes[x.0].value.shape;
                    let (nc, hw) = (s[0] * s[1], s[2] * s[3]);
                    let mut g = vec![0.0; nc * hw];
                    for p in 0..nc {
                        let v = gout.data[p] / hw as f64;
                        g[p * hw..(p + 1) * hw].iter_mut().for_each(|e| *e = v);
                    }
                    acc.add(*x, &g);
                }
                Op::AddChannelBias { x, bias } => {
                    acc.add(*x, &gout.data);
                    if acc.wants(*bias) {
                        let s = &nodes[x.0].value.shape;
                        let (nc, hw) = (s[0] * s[1], s[2] * s[3]);
                        let gb: Vec<f64> = (0..nc).map(|p| gout.data[p * hw..(p + 1) * hw].iter().sum()).collect();
                        acc.add(*bias, &gb);
                    }
                }
                Op::FlattenHwc { x } => {
                    let s = &nodes[x.0].value.shape;
                    let (n, c, hw) = (s[0], s[1], s[2] * s[3]);
                    let mut g = vec![0.0; n * c * hw];
                    for ni in 0..n {
                        for ci in 0..c {
                            for p in 0..hw {
                                g[(ni * c + ci) * hw + p] = gout.data[ni * c * hw + p * c + ci];
                            }
                        }
                    }
                    acc.add(*x, &g);
                }
                Op::Add { a, b } => {
                    acc.add(*a, &gout.data);
                    acc.add(*b, &gout.data);
                }
                Op::Sub { a, b } => {
                    acc.add(*a, &gout.data);
                    if acc.wants(*b) {
                        let g: Vec<f64> = gout.data.iter().map(|v| -v).collect();
                        acc.add(*b, &g);
                    }
                }
                Op::Mul { a, b } => {
                    if acc.wants(*a) {
                        let g: Vec<f64> = gout.data.iter().zip(&nodes[b.0].value.data).map(|(g, v)| g * v).collect();
                        acc.add(*a, &g);
                    }
                    if acc.wants(*b) {
                        let g: Vec<f64> = gout.data.iter().zip(&nodes[a.0].value.data).map(|(g, v)| g * v).collect();
                        acc.add(*b, &g);
                    }
                }
                Op::Scale { x, s } => {
                    let g: Vec<f64> = gout.data.iter().map(|v| v * s).collect();
                    acc.add(*x, &g);
                }
                Op::Reshape { x } => acc.add(*x, &gout.data),
                Op::Linear { x, w, b } => {
                    let (m, k) = (nodes[x.0].value.shape[0], nodes[x.0].value.shape[1]);
                    let e = nodes[w.0].value.shape[1];
                    if acc.wants(*x) {
                        let mut gx = vec![0.0; m * k];
                        gemm(m, e, k, &gout.data, false, &nodes[w.0].value.data, true, 0.0, &mut gx);
                        acc.add(*x, &gx);
                    }
                    if acc.wants(*w) {
                        let mut gw = vec![0.0; k * e];
                        gemm(k, m, e, &nodes[x.0].value.data, true, &gout.data, false, 0.0, &mut gw);
                        acc.add(*w, &gw);
                    }
                    if let Some(b) = b {
                        if acc.wants(*b) {
                            let mut gb = vec![0.0; e];
                            for r in 0..m {
                                for j in 0..e {
                                    gb[j] += gout.data[r * e + j];
                                }
                            }
                            acc.add(*b, &gb);
                        }
                    }
                }
                Op::LayerNorm { x, gamma, beta, xhat, rstd } => {
                    let d = nodes[gamma.0].value.len();
                    let m = xhat.len() / d;
                    let gv = &nodes[gamma.0].value.data;
                    if acc.wants(*gamma) || acc.wants(*beta) {
                        let mut gg = vec![0.0; d];
                        let mut gb = vec![0.0; d];
                        for r in 0..m {
                            for j in 0..d {
                                gg[j] += gout.data[r * d + j] * xhat[r * d + j];
                                gb[j] += gout.data[r * d + j];
                            }
                        }
                        acc.add(*gamma, &gg);
                        acc.add(*beta, &gb);
                    }
                    if acc.wants(*x) {
                        let mut gx = vec![0.0; m * d];
                        for r in 0..m {
                            let mut mean_g = 0.0;
                            let mut mean_gx = 0.0;
                            for j in 0..d {
                                let gh = gout.data[r * d + j] * gv[j];
                                mean_g += gh;
                                mean_gx += gh * xhat[r * d + j];
                            }
                            mean_g /= d as f64;
                            mean_gx /= d as f64;
                            for j in 0..d {
                                let gh = gout.data[r * d + j] * gv[j];
                                gx[r * d + j] = rstd[r] * (gh - mean_g - xhat[r * d + j] * mean_gx);
                            }
                        }
                        acc.add(*x, &gx);
                    }
                }
                Op::Attention { q, k, v, seq, heads } => {
                    let probs = &attention.iter().find(|(var, _)| var.0 == i).expect("attention probs recorded").1.probs;
                    let (m, d) = (nodes[q.0].value.shape[0], nodes[q.0].value.shape[1]);
                    let (seq, heads) = (*seq, *heads);
                    let (batch, dh) = (m / seq, d / heads);
                    let scale = 1.0 / (dh as f64).sqrt();
                    let (qd, kd, vd) = (&nodes[q.0].value.data, &nodes[k.0].value.data, &nodes[v.0].value.data);
                    let mut gq = vec![0.0; m * d];
                    let mut gk = vec![0.0; m * d];
                    let mut gv = vec![0.0; m * d];
                    let mut dp = vec![0.0; seq];
                    for b in 0..batch {
                        for h in 0..heads {
                            let off = h * dh;
                            for i2 in 0..seq {
                                let prow = &probs[((b * heads + h) * seq + i2) * seq..((b * heads + h) * seq + i2 + 1) * seq];
                                let go = &gout.data[(b * seq + i2) * d + off..(b * seq + i2) * d + off + dh];
                                // dV += p_ij * dO_i ; dP_ij = dO_i . V_j
                                for j in 0..seq {
                                    let vj = &vd[(b * seq + j) * d + off..(b * seq + j) * d + off + dh];
                                    dp[j] = go.iter().zip(vj).map(|(x, y)| x * y).sum();
                                    let gvj = &mut gv[(b * seq + j) * d + off..(b * seq + j) * d + off + dh];
                                    for (gvv, gg) in gvj.iter_mut().zip(go) {
                                        *gvv += prow[j] * gg;
                                    }
                                }
                                let dot: f64 = prow.iter().zip(&dp).map(|(p, g)| p * g).sum();
                                let qi_off = (b * seq + i2) * d + off;
                                for j in 0..seq {
                                    let ds = prow[j] * (dp[j] - dot) * scale;
                                    if ds == 0.0 {
                                        continue;
                                    }
                                    let kj_off = (b * seq + j) * d + off;
                                    for t in 0..dh {
                                        gq[qi_off + t] += ds * kd[kj_off + t];
                                        gk[kj_off + t] += ds * qd[qi_off + t];
                                    }
                                }
                            }
                        }
                    }
                    acc.add(*q, &gq);
                    acc.add(*k, &gk);
                    acc.add(*v, &gv);
                }
                Op::ConcatCols { a, b } => {
                    let (p, q) = (nodes[a.0].value.shape[1], nodes[b.0].value.shape[1]);
                    let m = nodes[a.0].value.shape[0];
                    let mut ga = Vec::with_capacity(m * p);
                    let mut gb = Vec::with_capacity(m * q);
                    for r in 0..m {
                        ga.extend_from_slice(&gout.data[r * (p + q)..r * (p + q) + p]);
                        gb.extend_from_slice(&gout.data[r * (p + q) + p..(r + 1) * (p + q)]);
                    }
                    acc.add(*a, &ga);
                    acc.add(*b, &gb);
                }
                Op::ConcatRows { parts } => {
                    let mut off = 0;
                    for p in parts {
                        let len = nodes[p.0].value.len();
                        acc.add(*p, &gout.data[off..off + len]);
                        off += len;
                    }
                }
                Op::SelectRows { x, idx } => {
                    if acc.wants(*x) {
                        let cols = *nodes[x.0].value.shape.last().unwrap();
                        let mut g = vec![0.0; nodes[x.0].value.len()];
                        for (o, &r) in idx.iter().enumerate() {
                            for j in 0..cols {
                                g[r * cols + j] += gout.data[o * cols + j];
                            }
                        }
                        acc.add(*x, &g);
                    }
                }
                Op::SumLast { x } => {
                    let d = *nodes[x.0].value.shape.last().unwrap();
                    let g: Vec<f64> = (0..nodes[x.0].value.len()).map(|t| gout.data[t / d]).collect();
                    acc.add(*x, &g);
                }
                Op::Mae { a, b } => {
                    let (ta, tb) = (&nodes[a.0].value.data, &nodes[b.0].value.data);
                    let s = gout.data[0] / ta.len() as f64;
                    let g: Vec<f64> = ta.iter().zip(tb).map(|(x, y)| s * sign(x - y)).collect();
                    acc.add(*a, &g);
                    if acc.wants(*b) {
                        let gb: Vec<f64> = g.iter().map(|v| -v).collect();
                        acc.add(*b, &gb);
                    }
                }
                Op::SquaredTv { x } => {
                    let s = &nodes[x.0].value.shape;
                    let (p, h, w) = (s[0] * s[1], s[2], s[3]);
                    let d = &nodes[x.0].value.data;
                    let cv = 2.0 * gout.data[0] / (p * (h - 1) * w) as f64;
                    let ch = 2.0 * gout.data[0] / (p * h * (w - 1)) as f64;
                    let mut g = vec![0.0; d.len()];
                    for pi in 0..p {
                        let base = pi * h * w;
                        for r in 0..h {
                            for c in 0..w {
                                let idx = base + r * w + c;
                                if r + 1 < h {
                                    let e = d[idx + w] - d[idx];
                                    g[idx + w] += cv * e;
                                    g[idx] -= cv * e;
                                }
                                if c + 1 < w {
                                    let e = d[idx + 1] - d[idx];
                                    g[idx + 1] += ch * e;
                                    g[idx] -= ch * e;
                                }
                            }
                        }
                    }
                    acc.add(*x, &g);
                }
                Op::Mean { x } => {
                    let n = nodes[x.0].value.len();
                    let g = vec![gout.data[0] / n as f64; n];
                    acc.add(*x, &g);
                }
            }
            grads[i] = Some(gout);
        }
    }
}

struct Acc<'a> {
    nodes: &'a [Node],
    grads: &'a mut [Option<Tensor>],
}

impl Acc<'_> {
    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn add(&mut self, v: Var, g: &[f64]) {
        if !self.wants(v) {
            return;
        }
        match &mut self.grads[v.0] {
            Some(t) => {
                for (a, b) in t.data.iter_mut().zip(g) {
                    *a += b;
                }
            }
            slot @ None => *slot = Some(Tensor::new(self.nodes[v.0].value.shape.clone(), g.to_vec())),
        }
    }
}

fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

fn zip_map(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    assert_eq!(a.shape, b.shape, "elementwise shape mismatch");
    Tensor::new(a.shape.clone(), a.data.iter().zip(&b.data).map(|(x, y)| f(*x, *y)).collect())
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
}

/// Column matrix `[C*k*k, N*Ho*Wo]`.
#[allow(clippy::too_many_arguments)]
fn im2col(x: &[f64], n: usize, c: usize, h: usize, w: usize, k: usize, stride: usize, pad: usize, ho: usize, wo: usize) -> Vec<f64> {
    let cols_n = n * ho * wo;
    let mut cols = vec![0.0; c * k * k * cols_n];
    for ci in 0..c {
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let dst_row = &mut cols[row * cols_n..(row + 1) * cols_n];
                for ni in 0..n {
                    let plane = &x[(ni * c + ci) * h * w..(ni * c + ci + 1) * h * w];
                    for oy in 0..ho {
                        let iy = (oy * stride + ky) as isize - pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let iy = iy as usize;
                        let dst = &mut dst_row[ni * ho * wo + oy * wo..ni * ho * wo + (oy + 1) * wo];
                        for (ox, d) in dst.iter_mut().enumerate() {
                            let ix = (ox * stride + kx) as isize - pad as isize;
                            if ix >= 0 && (ix as usize) < w {
                                *d = plane[iy * w + ix as usize];
                            }
                        }
                    }
                }
            }
        }
    }
    cols
}

#[allow(clippy::too_many_arguments)]
fn col2im(cols: &[f64], n: usize, c: usize, h: usize, w: usize, k: usize, stride: usize, pad: usize, ho: usize, wo: usize) -> Vec<f64> {
    let cols_n = n * ho * wo;
    let mut x = vec![0.0; n * c * h * w];
    for ci in 0..c {
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let src_row = &cols[row * cols_n..(row + 1) * cols_n];
                for ni in 0..n {
                    let plane = &mut x[(ni * c + ci) * h * w..(ni * c + ci + 1) * h * w];
                    for oy in 0..ho {
                        let iy = (oy * stride + ky) as isize - pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let iy = iy as usize;
                        let src = &src_row[ni * ho * wo + oy * wo..ni * ho * wo + (oy + 1) * wo];
                        for (ox, s) in src.iter().enumerate() {
                            let ix = (ox * stride + kx) as isize - pad as isize;
                            if ix >= 0 && (ix as usize) < w {
                                plane[iy * w + ix as usize] += s;
                            }
                        }
                    }
                }
            }
        }
    }
    x
}
