//! Finite-difference gradient suite shared by the integration tests and the
//! acceptance runner. Toy shapes keep every module cheap enough for 100 seeds.
#![allow(dead_code)]

use mcg::data::{TokenSequence, EOS};
use mcg::discriminator::{d_loss, d_loss_smoothed, g_loss_adv, Discriminator};
use mcg::encoder::{Encoder, EncoderConfig};
use mcg::evaluator::{g_loss_topic, v_loss, v_loss_smoothed, Evaluator, EvaluatorConfig, Interaction};
use mcg::generator::{Generator, GeneratorConfig};
use mcg::rng::seeded;
use mcg::tensor::{grad_check, grad_check_model, grad_check_model_steps, grad_check_steps, Graph, Parameterized, Tensor, Var};
use mcg::textcnn::{bce, Origin, Sentence, TextCnnConfig};
use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};

/// Central-difference step for smooth modules.
pub const STEP: f64 = 1e-5;
/// Modules with ReLU and max-over-time pooling: a kink can sit within
/// `STEP` of a random probe point, so each coordinate also gets a finer step.
pub const KINK_STEPS: [f64; 2] = [1e-5, 1e-6];
pub const TOLERANCE: f64 = 1e-4;
const VOCAB: usize = 9;
const MAX_LEN: usize = 6;

fn rand_vec(rng: &mut impl Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
}

/// Moves every parameter off its initial value. Zero biases over zero PAD
/// embeddings put ReLU inputs exactly on the kink, where central
/// differences see half a slope.
fn jitter<M: Parameterized>(m: &mut M, rng: &mut impl Rng) {
    for store in m.stores_mut() {
        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            for v in store.tensor_mut(id).data_mut() {
                *v += rng.gen_range(-0.1..0.1);
            }
        }
    }
}

fn rand_ids(rng: &mut impl Rng, len: usize) -> TokenSequence {
    let body: Vec<usize> = (0..len).map(|_| rng.gen_range(6..VOCAB)).collect();
    TokenSequence::from_body(&body, MAX_LEN)
}

pub fn toy_encoder_config() -> EncoderConfig {
    EncoderConfig {
        channels: 2,
        layers: 3,
        kernel: 3,
        feature_dim: 4,
        pool_window: 4,
        songs: 3,
    }
}

pub fn toy_generator_config() -> GeneratorConfig {
    GeneratorConfig {
        vocab: VOCAB,
        embed_dim: 3,
        heads: 2,
        head_dim: 2,
        slots: 2,
        feature_dim: 3,
        noise_dim: 2,
        max_len: MAX_LEN,
    }
}

pub fn toy_cnn_config() -> TextCnnConfig {
    TextCnnConfig {
        vocab: VOCAB,
        embed_dim: 3,
        reps: 2,
        widths: vec![2, 3],
        filters: 3,
        max_len: MAX_LEN,
    }
}

pub fn toy_evaluator_config(interaction: Interaction) -> EvaluatorConfig {
    EvaluatorConfig {
        cnn: toy_cnn_config(),
        feature_dim: 3,
        hidden: 4,
        interaction,
    }
}

/// Soft rows `softmax(logits)` for a generated sentence of `len` tokens.
fn soft_rows(g: &mut Graph, logits: Var, len: usize) -> Vec<Var> {
    (0..len)
        .map(|t| {
            let r = g.slice_rows(logits, t, 1);
            g.softmax_rows(r)
        })
        .collect()
}

pub fn encoder_stack(seed: u64) -> f64 {
    let mut rng = seeded(seed);
    let mut enc = Encoder::new(toy_encoder_config(), &mut rng);
    jitter(&mut enc, &mut rng);
    let x = rand_vec(&mut rng, 13);
    let label = rng.gen_range(0..3);
    let w = Tensor::row(&rand_vec(&mut rng, 4));
    let params = grad_check_model(&mut enc, STEP, |m, g| m.loss(g, &x, label).unwrap()).unwrap();
    // Features alone, with an arbitrary linear read-out.
    let feats = grad_check_model(&mut enc, STEP, |m, g| {
        let e = m.features(g, &x).unwrap();
        let wv = g.constant(&w);
        let p = g.mul(e, wv);
        g.sum(p)
    })
    .unwrap();
    params.max(feats)
}

pub fn memory_step(seed: u64) -> f64 {
    let mut rng = seeded(seed);
    let cfg = toy_generator_config();
    let mut gen = Generator::new(cfg, &mut rng);
    jitter(&mut gen, &mut rng);
    let m0 = Tensor::new(&[cfg.slots, cfg.width()], rand_vec(&mut rng, cfg.slots * cfg.width())).unwrap();
    let v0 = Tensor::row(&rand_vec(&mut rng, cfg.embed_dim));
    let wl = Tensor::row(&rand_vec(&mut rng, VOCAB));
    let wm = Tensor::new(&[cfg.slots, cfg.width()], rand_vec(&mut rng, cfg.slots * cfg.width())).unwrap();
    let objective = |gen: &Generator, g: &mut Graph, m: Var, v: Var| {
        let s1 = gen.memory_step(g, m, v);
        let s2 = gen.memory_step(g, s1.memory, v);
        let a = g.constant(&wl);
        let b = g.constant(&wm);
        let la = g.mul(s2.logits, a);
        let lb = g.mul(s2.memory, b);
        let la = g.sum(la);
        let lb = g.sum(lb);
        g.add(la, lb)
    };
    let params = grad_check_model(&mut gen, STEP, |gen, g| {
        let m = g.constant(&m0);
        let v = g.constant(&v0);
        objective(gen, g, m, v)
    })
    .unwrap();
    let wrt_memory = grad_check(
        |g, m| {
            let v = g.constant(&v0);
            objective(&gen, g, m, v)
        },
        &m0,
        STEP,
    )
    .unwrap();
    let wrt_input = grad_check(
        |g, v| {
            let m = g.constant(&m0);
            objective(&gen, g, m, v)
        },
        &v0,
        STEP,
    )
    .unwrap();
    params.max(wrt_memory).max(wrt_input)
}

pub fn mle_loss(seed: u64) -> f64 {
    let mut rng = seeded(seed);
    let cfg = toy_generator_config();
    let mut gen = Generator::new(cfg, &mut rng);
    jitter(&mut gen, &mut rng);
    let e0 = Tensor::row(&rand_vec(&mut rng, cfg.feature_dim));
    let noise = rand_vec(&mut rng, cfg.noise_dim);
    let len = rng.gen_range(1..MAX_LEN);
    let target = rand_ids(&mut rng, len);
    let params = grad_check_model(&mut gen, STEP, |gen, g| {
        let e = g.constant(&e0);
        gen.mle_loss(g, e, &noise, &target)
    })
    .unwrap();
    let wrt_e = grad_check(|g, e| gen.mle_loss(g, e, &noise, &target), &e0, STEP).unwrap();
    params.max(wrt_e)
}

/// Generator loss through the relaxed sampler into both critics.
pub fn generator_loss(seed: u64) -> f64 {
    let mut rng = seeded(seed);
    let cfg = toy_generator_config();
    let mut gen = Generator::new(cfg, &mut rng);
    jitter(&mut gen, &mut rng);
    let mut d = Discriminator::new(toy_cnn_config(), &mut rng);
    let mut v = Evaluator::new(toy_evaluator_config(Interaction::Product), &mut rng);
    jitter(&mut d, &mut rng);
    jitter(&mut v, &mut rng);
    let e0 = Tensor::row(&rand_vec(&mut rng, cfg.feature_dim));
    let noise = rand_vec(&mut rng, cfg.noise_dim);
    let beta = rng.gen_range(1.0..3.0);
    let draw_seed: u64 = rng.gen();
    grad_check_model(&mut gen, STEP, |gen, g| {
        g.freeze(d.store());
        g.freeze(v.store());
        let mut draws = StdRng::seed_from_u64(draw_seed);
        let e = g.constant(&e0);
        let roll = gen.relaxed_rollout(g, e, &noise, beta, 1.3, MAX_LEN, &mut draws).unwrap();
        let s = Sentence::generated(g, &roll.rows, VOCAB, MAX_LEN).unwrap();
        let ds = d.discriminate(g, &s).unwrap();
        let vs = v.evaluate_match(g, &s, e).unwrap();
        let a = g_loss_adv(g, &[ds]);
        let b = g_loss_topic(g, &[vs]);
        g.add(a, b)
    })
    .unwrap()
}

pub fn discriminator(seed: u64) -> f64 {
    let mut rng = seeded(seed);
    let mut d = Discriminator::new(toy_cnn_config(), &mut rng);
    jitter(&mut d, &mut rng);
    let real: Vec<TokenSequence> = (0..2).map(|_| {
        let n = rng.gen_range(1..MAX_LEN);
        rand_ids(&mut rng, n)
    }).collect();
    let fake_len = rng.gen_range(1..=MAX_LEN);
    let fake_logits = Tensor::new(&[fake_len, VOCAB], (0..fake_len * VOCAB).map(|_| rng.gen_range(-2.0..2.0)).collect()).unwrap();
    let rt: Vec<f64> = (0..2).map(|_| rng.gen_range(0.9..1.0)).collect();
    let ft = vec![rng.gen_range(0.0..0.1)];
    let scores = |d: &Discriminator, g: &mut Graph, logits: Var| {
        let r: Vec<Var> = real
            .iter()
            .map(|s| {
                let s = Sentence::real(g, s, VOCAB, MAX_LEN).unwrap();
                d.discriminate(g, &s).unwrap()
            })
            .collect();
        let rows = soft_rows(g, logits, fake_len);
        let s = Sentence::generated(g, &rows, VOCAB, MAX_LEN).unwrap();
        (r, vec![d.discriminate(g, &s).unwrap()])
    };
    let plain = grad_check_model_steps(&mut d, &KINK_STEPS, |d, g| {
        let l = g.constant(&fake_logits);
        let (r, f) = scores(d, g, l);
        d_loss(g, &r, &f)
    })
    .unwrap();
    let smoothed = grad_check_model_steps(&mut d, &KINK_STEPS, |d, g| {
        let l = g.constant(&fake_logits);
        let (r, f) = scores(d, g, l);
        d_loss_smoothed(g, &r, &rt, &f, &ft).unwrap()
    })
    .unwrap();
    let wrt_rows = grad_check_steps(
        |g, l| {
            g.freeze(d.store());
            let (_, f) = scores(&d, g, l);
            g_loss_adv(g, &f)
        },
        &fake_logits,
        &KINK_STEPS,
    )
    .unwrap();
    plain.max(smoothed).max(wrt_rows)
}

pub fn evaluator(seed: u64) -> f64 {
    let mut rng = seeded(seed);
    let interaction = if seed.is_multiple_of(2) { Interaction::Product } else { Interaction::Concat };
    let mut v = Evaluator::new(toy_evaluator_config(interaction), &mut rng);
    jitter(&mut v, &mut rng);
    let real: Vec<TokenSequence> = (0..2).map(|_| {
        let n = rng.gen_range(1..MAX_LEN);
        rand_ids(&mut rng, n)
    }).collect();
    let pos: Vec<Tensor> = (0..2).map(|_| Tensor::row(&rand_vec(&mut rng, 3))).collect();
    let neg: Vec<Tensor> = (0..2).map(|_| Tensor::row(&rand_vec(&mut rng, 3))).collect();
    let pt: Vec<f64> = (0..2).map(|_| rng.gen_range(0.9..1.0)).collect();
    let nt: Vec<f64> = (0..2).map(|_| rng.gen_range(0.0..0.1)).collect();
    let inputs = |g: &mut Graph| {
        let s: Vec<Sentence> = real.iter().map(|s| Sentence::real(g, s, VOCAB, MAX_LEN).unwrap()).collect();
        let p: Vec<Var> = pos.iter().map(|t| g.constant(t)).collect();
        let n: Vec<Var> = neg.iter().map(|t| g.constant(t)).collect();
        (s, p, n)
    };
    let plain = grad_check_model_steps(&mut v, &KINK_STEPS, |v, g| {
        let (s, p, n) = inputs(g);
        v_loss(g, v, &s, &p, &n).unwrap()
    })
    .unwrap();
    let smoothed = grad_check_model_steps(&mut v, &KINK_STEPS, |v, g| {
        let (s, p, n) = inputs(g);
        v_loss_smoothed(g, v, &s, &p, &n, &pt, &nt).unwrap()
    })
    .unwrap();
    // Topic loss with respect to the audio features and a soft sentence.
    let fake_logits = Tensor::new(&[3, VOCAB], rand_vec(&mut rng, 3 * VOCAB)).unwrap();
    let wrt_rows = grad_check_steps(
        |g, l| {
            g.freeze(v.store());
            let rows = soft_rows(g, l, 3);
            let s = Sentence::generated(g, &rows, VOCAB, MAX_LEN).unwrap();
            let e = g.constant(&pos[0]);
            let score = v.evaluate_match(g, &s, e).unwrap();
            g_loss_topic(g, &[score])
        },
        &fake_logits,
        &KINK_STEPS,
    )
    .unwrap();
    let wrt_e = grad_check_steps(
        |g, e| {
            g.freeze(v.store());
            let s = Sentence::from_ids(g, real[0].ids(), VOCAB, MAX_LEN, Origin::Real).unwrap();
            let score = v.evaluate_match(g, &s, e).unwrap();
            g_loss_topic(g, &[score])
        },
        &pos[0],
        &KINK_STEPS,
    )
    .unwrap();
    plain.max(smoothed).max(wrt_rows).max(wrt_e)
}

/// Binary cross-entropy and softmax cross-entropy with respect to scores.
pub fn scalar_losses(seed: u64) -> f64 {
    let mut rng = seeded(seed);
    let n = rng.gen_range(1..5);
    let logits = Tensor::row(&(0..n).map(|_| rng.gen_range(-3.0..3.0)).collect::<Vec<_>>());
    let targets: Vec<f64> = (0..n).map(|_| rng.gen_range(0.0..1.0)).collect();
    let b = grad_check(
        |g, x| {
            let s = g.sigmoid(x);
            let scores: Vec<Var> = (0..n).map(|i| g.slice_cols(s, i, 1)).collect();
            bce(g, &scores, &targets).unwrap()
        },
        &logits,
        STEP,
    )
    .unwrap();
    let row = Tensor::row(&rand_vec(&mut rng, VOCAB));
    let target = rng.gen_range(0..VOCAB);
    let ce = grad_check(|g, x| mcg::nn::cross_entropy(g, x, target), &row, STEP).unwrap();
    let target = if target == EOS { EOS } else { target };
    let ce_eos = grad_check(
        |g, x| {
            let shift = g.constant(&Tensor::row(&{
                let mut s = vec![0.0; VOCAB];
                s[EOS] = 0.7f64.ln();
                s
            }));
            let y = g.add(x, shift);
            mcg::nn::cross_entropy(g, y, target)
        },
        &row,
        STEP,
    )
    .unwrap();
    b.max(ce).max(ce_eos)
}

pub type Check = (&'static str, fn(u64) -> f64);

pub const CHECKS: [Check; 7] = [
    ("encoder stack", encoder_stack),
    ("memory step", memory_step),
    ("likelihood loss", mle_loss),
    ("generator adversarial loss", generator_loss),
    ("discriminator", discriminator),
    ("evaluator", evaluator),
    ("scalar losses", scalar_losses),
];

/// Worst relative error per check over `seeds`.
pub fn run_suite(seeds: std::ops::Range<u64>) -> Vec<(&'static str, f64, u64)> {
    CHECKS
        .iter()
        .map(|(name, f)| {
            let mut worst = (0.0, seeds.start);
            for s in seeds.clone() {
                let e = f(s);
                if e > worst.0 || e.is_nan() {
                    worst = (e, s);
                }
            }
            (*name, worst.0, worst.1)
        })
        .collect()
}
