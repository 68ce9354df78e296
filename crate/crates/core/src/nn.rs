//! Small layers shared by the models. Each layer owns only [`ParamId`]s;
//! the values live in the model's [`ParamStore`].

use rand::Rng;

use crate::tensor::{Graph, ParamId, ParamStore, Tensor, Var};

/// `x W + b` for row-major `x` of shape `n × fan_in`.
#[derive(Debug, Clone, Copy)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
}

impl Linear {
    pub fn new<R: Rng>(store: &mut ParamStore, name: &str, fan_in: usize, fan_out: usize, rng: &mut R) -> Self {
        let w = store.add_glorot(&format!("{name}.w"), &[fan_in, fan_out], fan_in, fan_out, rng);
        let b = store.add_zeros(&format!("{name}.b"), &[1, fan_out]);
        Self { w, b }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Var {
        let w = g.param(store, self.w);
        let b = g.param(store, self.b);
        let y = g.matmul(x, w);
        g.add_row(y, b)
    }
}

/// Single-layer LSTM; gates packed as `[input, forget, cell, output]`.
#[derive(Debug, Clone, Copy)]
pub struct Lstm {
    pub wx: ParamId,
    pub wh: ParamId,
    pub b: ParamId,
    pub hidden: usize,
}

impl Lstm {
    pub fn new<R: Rng>(store: &mut ParamStore, name: &str, input: usize, hidden: usize, rng: &mut R) -> Self {
        let wx = store.add_glorot(&format!("{name}.wx"), &[input, 4 * hidden], input, 4 * hidden, rng);
        let wh = store.add_glorot(&format!("{name}.wh"), &[hidden, 4 * hidden], hidden, 4 * hidden, rng);
        let mut bias = vec![0.0; 4 * hidden];
        bias[hidden..2 * hidden].fill(1.0);
        let b = store.add(&format!("{name}.b"), Tensor::new(&[1, 4 * hidden], bias).expect("shape"));
        Self { wx, wh, b, hidden }
    }

    /// Runs over the rows of `xs` (`T × input`) from zero state; returns `h_T` (`1 × hidden`).
    pub fn last_hidden(&self, g: &mut Graph, store: &ParamStore, xs: Var) -> Var {
        let d = self.hidden;
        let steps = g.shape(xs)[0];
        let wx = g.param(store, self.wx);
        let wh = g.param(store, self.wh);
        let b = g.param(store, self.b);
        let proj = g.matmul(xs, wx);
        let proj = g.add_row(proj, b);
        let mut h = g.constant(&Tensor::zeros(&[1, d]));
        let mut c = g.constant(&Tensor::zeros(&[1, d]));
        for t in 0..steps {
            let xt = g.slice_rows(proj, t, 1);
            let hh = g.matmul(h, wh);
            let z = g.add(xt, hh);
            let zi = g.slice_cols(z, 0, d);
            let zf = g.slice_cols(z, d, d);
            let zg = g.slice_cols(z, 2 * d, d);
            let zo = g.slice_cols(z, 3 * d, d);
            let i = g.sigmoid(zi);
            let f = g.sigmoid(zf);
            let cand = g.tanh(zg);
            let o = g.sigmoid(zo);
            let keep = g.mul(f, c);
            let write = g.mul(i, cand);
            c = g.add(keep, write);
            let tc = g.tanh(c);
            h = g.mul(o, tc);
        }
        h
    }
}

/// `-log softmax(logits)[target]` for a `1 × n` row.
pub fn cross_entropy(g: &mut Graph, logits: Var, target: usize) -> Var {
    let lp = g.log_softmax_rows(logits);
    let pick = g.gather(lp, &[target]);
    g.scale(pick, -1.0)
}
