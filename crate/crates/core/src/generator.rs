//! Relational-memory text generator conditioned on an audio feature.
//!
//! Memory is `S × W` with `W = heads · head_dim`. One step attends from the
//! slots over `[M; x]`, adds the attended value back to the memory, runs a
//! residual two-layer perceptron, and gates the result into the next memory
//! with input and forget gates computed from `tanh(M)` and the attended
//! value. Logits are a linear read-out of the flattened next memory.

use rand::distributions::{Distribution, WeightedIndex};
use rand::Rng;
use rand_distr::{Gumbel, StandardNormal};
use thiserror::Error;

use crate::data::{TokenSequence, BOS, EOS};
use crate::nn::{cross_entropy, Linear};
use crate::tensor::{Graph, ParamId, ParamStore, Parameterized, Tensor, Var};

#[derive(Debug, Error, PartialEq)]
pub enum GeneratorError {
    #[error("inverse temperature must be positive, got {0}")]
    Beta(f64),
    #[error("EOS scale must be positive, got {0}")]
    Lambda(f64),
    #[error("target length must be positive, got {0}")]
    Target(f64),
    #[error("empty token sequence")]
    Empty,
}

pub type Result<T> = std::result::Result<T, GeneratorError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GeneratorConfig {
    pub vocab: usize,
    pub embed_dim: usize,
    pub heads: usize,
    pub head_dim: usize,
    pub slots: usize,
    /// Width of the audio feature `e`.
    pub feature_dim: usize,
    pub noise_dim: usize,
    pub max_len: usize,
}

impl GeneratorConfig {
    pub fn new(vocab: usize) -> Self {
        Self {
            vocab,
            embed_dim: 128,
            heads: 2,
            head_dim: 128,
            slots: 1,
            feature_dim: 128,
            noise_dim: 128,
            max_len: 50,
        }
    }

    pub fn width(&self) -> usize {
        self.heads * self.head_dim
    }
}

/// Output of one memory update.
#[derive(Debug, Clone)]
pub struct Step {
    pub memory: Var,
    pub logits: Var,
    /// One `S × (S + 1)` weight matrix per head.
    pub attention: Vec<Var>,
}

/// Decoding rule for [`Generator::generate`].
pub enum Decode<'a, R: Rng> {
    /// Argmax at every step with the noise held at its mean (zero).
    Greedy,
    /// Ancestral sampling with fresh noise per sentence.
    Sample(&'a mut R),
}

/// A sentence drawn through the relaxed sampler.
#[derive(Debug, Clone)]
pub struct Relaxed {
    /// One `1 × vocab` simplex row per emitted token, EOS included.
    pub rows: Vec<Var>,
    pub tokens: Vec<usize>,
}

#[derive(Debug, Clone)]
pub struct Generator {
    cfg: GeneratorConfig,
    store: ParamStore,
    embedding: ParamId,
    input: Linear,
    wq: ParamId,
    wk: ParamId,
    wv: ParamId,
    mlp1: Linear,
    mlp2: Linear,
    gate_m: ParamId,
    gate_a: ParamId,
    gate_b: ParamId,
    out: Linear,
    init: Linear,
}

impl Generator {
    pub fn new<R: Rng>(cfg: GeneratorConfig, rng: &mut R) -> Self {
        let w = cfg.width();
        let mut s = ParamStore::new();
        let embedding = s.add_normal("generator.embedding", &[cfg.vocab, cfg.embed_dim], 0.1, rng);
        let input = Linear::new(&mut s, "generator.input", cfg.embed_dim, w, rng);
        let wq = s.add_glorot("generator.attn.wq", &[w, w], w, w, rng);
        let wk = s.add_glorot("generator.attn.wk", &[w, w], w, w, rng);
        let wv = s.add_glorot("generator.attn.wv", &[w, w], w, w, rng);
        let mlp1 = Linear::new(&mut s, "generator.mlp1", w, w, rng);
        let mlp2 = Linear::new(&mut s, "generator.mlp2", w, w, rng);
        let gate_m = s.add_glorot("generator.gate.memory", &[w, 2 * w], w, 2 * w, rng);
        let gate_a = s.add_glorot("generator.gate.attended", &[w, 2 * w], w, 2 * w, rng);
        let mut gb = vec![0.0; 2 * w];
        gb[w..].fill(1.0);
        let gate_b = s.add("generator.gate.bias", Tensor::new(&[1, 2 * w], gb).expect("shape"));
        let out = Linear::new(&mut s, "generator.out", cfg.slots * w, cfg.vocab, rng);
        let init = Linear::new(
            &mut s,
            "generator.init",
            cfg.feature_dim + cfg.noise_dim,
            cfg.slots * w,
            rng,
        );
        Self {
            cfg,
            store: s,
            embedding,
            input,
            wq,
            wk,
            wv,
            mlp1,
            mlp2,
            gate_m,
            gate_a,
            gate_b,
            out,
            init,
        }
    }

    pub fn config(&self) -> &GeneratorConfig {
        &self.cfg
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    pub fn embedding_id(&self) -> ParamId {
        self.embedding
    }

    /// `M_0 = reshape([e; noise] W + b)`; `e` is `1 × feature_dim`.
    pub fn init_state(&self, g: &mut Graph, e: Var, noise: &[f64]) -> Var {
        assert_eq!(noise.len(), self.cfg.noise_dim, "noise width");
        let n = g.constant(&Tensor::row(noise));
        let x = g.concat_cols(&[e, n]);
        let m = self.init.forward(g, &self.store, x);
        g.reshape(m, &[self.cfg.slots, self.cfg.width()])
    }

    pub fn sample_noise<R: Rng>(&self, rng: &mut R) -> Vec<f64> {
        (0..self.cfg.noise_dim).map(|_| rng.sample(StandardNormal)).collect()
    }

    /// Embedding of token ids, `n × embed_dim`.
    pub fn embed(&self, g: &mut Graph, ids: &[usize]) -> Var {
        let table = g.param(&self.store, self.embedding);
        g.embedding_lookup(table, ids)
    }

    /// One memory update from `memory` (`S × W`) and a word embedding
    /// `v` (`1 × embed_dim`).
    pub fn memory_step(&self, g: &mut Graph, memory: Var, v: Var) -> Step {
        let (w, dh) = (self.cfg.width(), self.cfg.head_dim);
        let st = &self.store;
        let x = self.input.forward(g, st, v);
        let mx = g.concat_rows(&[memory, x]);
        let wq = g.param(st, self.wq);
        let wk = g.param(st, self.wk);
        let wv = g.param(st, self.wv);
        let q = g.matmul(memory, wq);
        let k = g.matmul(mx, wk);
        let vals = g.matmul(mx, wv);
        let scale = 1.0 / (dh as f64).sqrt();
        let mut heads = Vec::with_capacity(self.cfg.heads);
        let mut attention = Vec::with_capacity(self.cfg.heads);
        for h in 0..self.cfg.heads {
            let qh = g.slice_cols(q, h * dh, dh);
            let kh = g.slice_cols(k, h * dh, dh);
            let vh = g.slice_cols(vals, h * dh, dh);
            let kt = g.transpose(kh);
            let scores = g.matmul(qh, kt);
            let scores = g.scale(scores, scale);
            let a = g.softmax_rows(scores);
            heads.push(g.matmul(a, vh));
            attention.push(a);
        }
        let attended_value = if heads.len() == 1 { heads[0] } else { g.concat_cols(&heads) };
        let attended = g.add(memory, attended_value);
        let hidden = self.mlp1.forward(g, st, attended);
        let hidden = g.relu(hidden);
        let hidden = self.mlp2.forward(g, st, hidden);
        let cand = g.add(attended, hidden);

        let gm = g.param(st, self.gate_m);
        let ga = g.param(st, self.gate_a);
        let gb = g.param(st, self.gate_b);
        let tm = g.tanh(memory);
        let from_m = g.matmul(tm, gm);
        let from_a = g.matmul(attended_value, ga);
        let gates = g.add(from_m, from_a);
        let gates = g.add_row(gates, gb);
        let gi = g.slice_cols(gates, 0, w);
        let gf = g.slice_cols(gates, w, w);
        let gi = g.sigmoid(gi);
        let gf = g.sigmoid(gf);
        let tc = g.tanh(cand);
        let write = g.mul(gi, tc);
        let keep = g.mul(gf, memory);
        let next = g.add(write, keep);

        let flat = g.reshape(next, &[1, self.cfg.slots * w]);
        let logits = self.out.forward(g, st, flat);
        Step {
            memory: next,
            logits,
            attention,
        }
    }

    /// Teacher-forced logits, one `1 × vocab` row per target token.
    pub fn teacher_forced(&self, g: &mut Graph, e: Var, noise: &[f64], target: &TokenSequence) -> Vec<Var> {
        let mut inputs = vec![BOS];
        inputs.extend_from_slice(&target.ids()[..target.len() - 1]);
        let emb = self.embed(g, &inputs);
        let mut m = self.init_state(g, e, noise);
        let mut out = Vec::with_capacity(inputs.len());
        for t in 0..inputs.len() {
            let v = g.slice_rows(emb, t, 1);
            let step = self.memory_step(g, m, v);
            m = step.memory;
            out.push(step.logits);
        }
        out
    }

    /// `-Σ_t log P(s_t | s_<t, e)` under teacher forcing.
    pub fn mle_loss(&self, g: &mut Graph, e: Var, noise: &[f64], target: &TokenSequence) -> Var {
        let logits = self.teacher_forced(g, e, noise, target);
        let terms: Vec<Var> = logits
            .iter()
            .zip(target.ids())
            .map(|(&l, &t)| cross_entropy(g, l, t))
            .collect();
        let all = g.concat_rows(&terms);
        g.sum(all)
    }

    /// Autoregressive decoding from BOS; stops after EOS or `max_len` tokens.
    pub fn generate<R: Rng>(&self, e: &[f64], mut mode: Decode<'_, R>, max_len: usize, lambda_eos: f64) -> Result<TokenSequence> {
        if lambda_eos <= 0.0 {
            return Err(GeneratorError::Lambda(lambda_eos));
        }
        let mut g = Graph::new();
        g.freeze(&self.store);
        let ev = g.constant(&Tensor::row(e));
        let noise = match &mut mode {
            Decode::Greedy => vec![0.0; self.cfg.noise_dim],
            Decode::Sample(rng) => self.sample_noise(*rng),
        };
        let mut m = self.init_state(&mut g, ev, &noise);
        let mut token = BOS;
        let mut ids = Vec::new();
        while ids.len() < max_len {
            let v = self.embed(&mut g, &[token]);
            let step = self.memory_step(&mut g, m, v);
            m = step.memory;
            let mut probs = g.value(step.logits).to_vec();
            crate::tensor::softmax_in_place(&mut probs);
            let probs = adjust_eos(&probs, lambda_eos)?;
            token = match &mut mode {
                Decode::Greedy => argmax(&probs),
                Decode::Sample(rng) => WeightedIndex::new(&probs).expect("valid distribution").sample(*rng),
            };
            ids.push(token);
            if token == EOS {
                break;
            }
        }
        Ok(TokenSequence::from_ids(ids).expect("EOS only at the end"))
    }

    /// Relaxed sampling for adversarial training. Each step draws Gumbel
    /// noise `g`, emits `softmax(β (g + log π))` where `π` is the
    /// EOS-adjusted next-token distribution, and feeds back the embedding
    /// of `argmax(g + log π)`.
    #[allow(clippy::too_many_arguments)]
    pub fn relaxed_rollout<R: Rng>(
        &self,
        g: &mut Graph,
        e: Var,
        noise: &[f64],
        beta: f64,
        lambda_eos: f64,
        max_len: usize,
        rng: &mut R,
    ) -> Result<Relaxed> {
        if beta <= 0.0 {
            return Err(GeneratorError::Beta(beta));
        }
        if lambda_eos <= 0.0 {
            return Err(GeneratorError::Lambda(lambda_eos));
        }
        let vocab = self.cfg.vocab;
        let mut eos_shift = vec![0.0; vocab];
        eos_shift[EOS] = lambda_eos.ln();
        let eos_shift = g.constant(&Tensor::row(&eos_shift));
        let mut m = self.init_state(g, e, noise);
        let mut token = BOS;
        let mut rows = Vec::new();
        let mut tokens = Vec::new();
        while tokens.len() < max_len {
            let v = self.embed(g, &[token]);
            let step = self.memory_step(g, m, v);
            m = step.memory;
            let adjusted = g.add(step.logits, eos_shift);
            let log_pi = g.log_softmax_rows(adjusted);
            let draws: Vec<f64> = (0..vocab).map(|_| sample_gumbel(rng)).collect();
            let perturbed: Vec<f64> = g.value(log_pi).iter().zip(&draws).map(|(l, d)| l + d).collect();
            token = argmax(&perturbed);
            let gv = g.constant(&Tensor::row(&draws));
            let z = g.add(log_pi, gv);
            let z = g.scale(z, beta);
            rows.push(g.softmax_rows(z));
            tokens.push(token);
            if token == EOS {
                break;
            }
        }
        Ok(Relaxed { rows, tokens })
    }
}

impl Parameterized for Generator {
    fn stores(&self) -> Vec<&ParamStore> {
        vec![&self.store]
    }

    fn stores_mut(&mut self) -> Vec<&mut ParamStore> {
        vec![&mut self.store]
    }
}

fn sample_gumbel<R: Rng>(rng: &mut R) -> f64 {
    Gumbel::new(0.0, 1.0).expect("unit Gumbel").sample(rng)
}

pub(crate) fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

/// Relaxed one-hot sample `u = softmax(β (g + log π))`, `π = softmax(logits)`.
/// Returns `u` together with `argmax(g + log π)`.
pub fn gumbel_softmax_sample<R: Rng>(logits: &[f64], beta: f64, rng: &mut R) -> Result<(Vec<f64>, usize)> {
    if beta <= 0.0 {
        return Err(GeneratorError::Beta(beta));
    }
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = logits.iter().map(|l| (l - max).exp()).sum::<f64>().ln() + max;
    let z: Vec<f64> = logits.iter().map(|l| l - lse + sample_gumbel(rng)).collect();
    let hard = argmax(&z);
    let mut u: Vec<f64> = z.iter().map(|v| beta * v).collect();
    crate::tensor::softmax_in_place(&mut u);
    Ok((u, hard))
}

/// Multiplies the EOS probability by `lambda` and renormalises.
pub fn adjust_eos(probs: &[f64], lambda: f64) -> Result<Vec<f64>> {
    if lambda <= 0.0 || !lambda.is_finite() {
        return Err(GeneratorError::Lambda(lambda));
    }
    let mut out = probs.to_vec();
    out[EOS] *= lambda;
    let z: f64 = out.iter().sum();
    out.iter_mut().for_each(|p| *p /= z);
    Ok(out)
}

pub const LAMBDA_MIN: f64 = 0.1;
pub const LAMBDA_MAX: f64 = 10.0;

/// `clip(λ · exp(η (mean - target) / target), 0.1, 10)`.
pub fn update_lambda(lambda: f64, mean_len: f64, target_len: f64, eta: f64) -> Result<f64> {
    if target_len <= 0.0 {
        return Err(GeneratorError::Target(target_len));
    }
    if lambda <= 0.0 {
        return Err(GeneratorError::Lambda(lambda));
    }
    Ok((lambda * (eta * (mean_len - target_len) / target_len).exp()).clamp(LAMBDA_MIN, LAMBDA_MAX))
}
