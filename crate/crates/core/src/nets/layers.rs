use rand::Rng;

use crate::autodiff::{Bound, Graph, ParamId, ParamStore, Var};

pub const LEAKY_SLOPE: f64 = 0.2;

#[derive(Clone, Debug)]
pub struct Conv {
    w: ParamId,
    b: Option<ParamId>,
    stride: usize,
    pad: usize,
}

impl Conv {
    #[allow(clippy::too_many_arguments)]
    pub fn new(store: &mut ParamStore, name: &str, cin: usize, cout: usize, k: usize, stride: usize, bias: bool, rng: &mut impl Rng) -> Self {
        let fan_in = (cin * k * k) as f64;
        let std = (2.0 / ((1.0 + LEAKY_SLOPE * LEAKY_SLOPE) * fan_in)).sqrt();
        Self::with_std(store, name, cin, cout, k, stride, bias, std, rng)
    }

    #[allow(clippy::too_many_arguments)]
    pub fn with_std(store: &mut ParamStore, name: &str, cin: usize, cout: usize, k: usize, stride: usize, bias: bool, std: f64, rng: &mut impl Rng) -> Self {
        let w = store.add_normal(format!("{name}.w"), &[cout, cin, k, k], std, rng);
        let b = bias.then(|| store.add_const(format!("{name}.b"), &[cout], 0.0));
        Self { w, b, stride, pad: k / 2 }
    }

    pub fn forward(&self, g: &mut Graph, p: &Bound, x: Var) -> Var {
        g.conv2d(x, p.var(self.w), self.b.map(|b| p.var(b)), self.stride, self.pad)
    }
}

#[derive(Clone, Debug)]
pub struct Dense {
    w: ParamId,
    b: Option<ParamId>,
}

impl Dense {
    pub fn new(store: &mut ParamStore, name: &str, din: usize, dout: usize, bias: bool, rng: &mut impl Rng) -> Self {
        Self::with_std(store, name, din, dout, bias, (1.0 / din as f64).sqrt(), rng)
    }

    pub fn with_std(store: &mut ParamStore, name: &str, din: usize, dout: usize, bias: bool, std: f64, rng: &mut impl Rng) -> Self {
        let w = store.add_normal(format!("{name}.w"), &[din, dout], std, rng);
        let b = bias.then(|| store.add_const(format!("{name}.b"), &[dout], 0.0));
        Self { w, b }
    }

    pub fn forward(&self, g: &mut Graph, p: &Bound, x: Var) -> Var {
        g.linear(x, p.var(self.w), self.b.map(|b| p.var(b)))
    }
}

#[derive(Clone, Debug)]
pub struct Norm {
    gamma: ParamId,
    beta: ParamId,
}

impl Norm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Self {
        Self {
            gamma: store.add_const(format!("{name}.gamma"), &[dim], 1.0),
            beta: store.add_const(format!("{name}.beta"), &[dim], 0.0),
        }
    }

    pub fn forward(&self, g: &mut Graph, p: &Bound, x: Var) -> Var {
        g.layer_norm(x, p.var(self.gamma), p.var(self.beta))
    }
}
