//! Three-stage training: encoder pretraining, joint maximum likelihood,
//! and adversarial fine-tuning with a discriminator and a topic evaluator.

mod config;
mod dataset;

pub use config::TrainingConfig;
pub use dataset::{load_clips, load_prepared, prepare, Dataset};

use std::collections::HashMap;

use rand::seq::index::sample as sample_indices;
use rand::Rng;
use serde::Serialize;
use thiserror::Error;

use crate::checkpoint::{Checkpoint, CheckpointError};
use crate::data::{split_clips, DataError, PairedSample, TokenSequence, Vocabulary, Waveform};
use crate::discriminator::{d_loss, d_loss_smoothed, g_loss_adv, Discriminator};
use crate::encoder::{Encoder, EncoderConfig, EncoderError};
use crate::evaluator::{
    g_loss_topic, v_loss, v_loss_smoothed, Evaluator, EvaluatorConfig, NegativeError, NegativeSampler,
};
use crate::generator::{update_lambda, Generator, GeneratorConfig, GeneratorError};
use crate::rng::{decode_state, encode_state, substream, SeededRng};
use crate::tensor::{Adam, AdamConfig, Graph, ParamStore, Tensor, TensorError, Var};
use crate::textcnn::{Sentence, SentenceError, TextCnnConfig};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("config: {0}")]
    Config(String),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Encoder(#[from] EncoderError),
    #[error(transparent)]
    Generator(#[from] GeneratorError),
    #[error(transparent)]
    Sentence(#[from] SentenceError),
    #[error(transparent)]
    Negative(#[from] NegativeError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("{0}")]
    Stage(String),
}

pub type Result<T> = std::result::Result<T, TrainError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    PretrainEncoder,
    Mle,
    Gan,
}

impl Stage {
    pub fn tag(self) -> &'static str {
        match self {
            Stage::PretrainEncoder => "pretrain_encoder",
            Stage::Mle => "mle",
            Stage::Gan => "gan",
        }
    }

    pub fn from_tag(s: &str) -> Option<Self> {
        match s {
            "pretrain_encoder" => Some(Stage::PretrainEncoder),
            "mle" => Some(Stage::Mle),
            "gan" => Some(Stage::Gan),
            _ => None,
        }
    }
}

/// `β_n = β_max^(n / N)`.
pub fn beta_schedule(n: u64, total: u64, beta_max: f64) -> Result<f64> {
    if beta_max <= 0.0 {
        return Err(TrainError::Config(format!("beta_max must be positive, got {beta_max}")));
    }
    if n > total {
        return Err(TrainError::Config(format!("iteration {n} beyond total {total}")));
    }
    if total == 0 {
        return Ok(beta_max);
    }
    Ok(beta_max.powf(n as f64 / total as f64))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LabelKind {
    Real,
    Fake,
}

/// Smoothed target: real in `U[0.9, 1]`, fake in `U[0, 0.1]`.
pub fn smooth_label<R: Rng>(kind: LabelKind, rng: &mut R) -> f64 {
    match kind {
        LabelKind::Real => rng.gen_range(0.9..=1.0),
        LabelKind::Fake => rng.gen_range(0.0..=0.1),
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct PretrainLog {
    pub stage: Stage,
    pub step: u64,
    pub loss: f64,
    pub accuracy: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct MleLog {
    pub stage: Stage,
    pub step: u64,
    /// Mean negative log-likelihood per target token.
    pub loss: f64,
    pub tokens: usize,
}

#[derive(Debug, Clone, Serialize)]
pub struct GanLog {
    pub stage: Stage,
    pub step: u64,
    pub beta: f64,
    pub lambda_eos: f64,
    pub d_loss: f64,
    pub v_loss: Option<f64>,
    /// Absent during critic warm-up, when the generator is not updated.
    pub g_loss: Option<f64>,
    pub g_loss_adv: Option<f64>,
    pub g_loss_topic: Option<f64>,
    /// Mean generated body length of the batch that drove the update.
    pub mean_len: f64,
    pub d_real: f64,
    pub d_fake: f64,
}

/// The four networks plus everything needed to resume training exactly.
#[derive(Debug, Clone)]
pub struct Session {
    pub cfg: TrainingConfig,
    pub vocab: Vocabulary,
    pub songs: usize,
    pub encoder: Encoder,
    pub generator: Generator,
    pub discriminator: Discriminator,
    pub evaluator: Evaluator,
    pub stage: Option<Stage>,
    pub completed: Vec<Stage>,
    /// Steps taken in the current stage.
    pub step: u64,
    pub lambda_eos: f64,
    rng: SeededRng,
    opts: HashMap<&'static str, Adam>,
    features: Option<HashMap<String, Vec<f64>>>,
}

const TRAIN_STREAM: u64 = 1000;

pub fn encoder_config(cfg: &TrainingConfig, songs: usize) -> EncoderConfig {
    EncoderConfig {
        channels: cfg.enc_channels,
        layers: cfg.enc_layers,
        kernel: cfg.enc_kernel,
        feature_dim: cfg.feature_dim,
        pool_window: crate::encoder::POOL_WINDOW,
        songs,
    }
}

pub fn generator_config(cfg: &TrainingConfig, vocab: usize) -> GeneratorConfig {
    GeneratorConfig {
        vocab,
        embed_dim: cfg.embed_dim,
        heads: cfg.heads,
        head_dim: cfg.head_dim,
        slots: cfg.slots,
        feature_dim: cfg.feature_dim,
        noise_dim: cfg.noise_dim,
        max_len: cfg.max_len,
    }
}

pub fn text_cnn_config(cfg: &TrainingConfig, vocab: usize) -> TextCnnConfig {
    TextCnnConfig {
        vocab,
        embed_dim: cfg.cnn_embed_dim,
        reps: cfg.reps,
        widths: cfg.cnn_widths.clone(),
        filters: cfg.cnn_filters,
        max_len: cfg.max_len,
    }
}

pub fn evaluator_config(cfg: &TrainingConfig, vocab: usize) -> EvaluatorConfig {
    EvaluatorConfig {
        cnn: text_cnn_config(cfg, vocab),
        feature_dim: cfg.feature_dim,
        hidden: cfg.eval_hidden,
        interaction: cfg.interaction,
    }
}

fn adam_cfg(cfg: &TrainingConfig, lr: f64) -> AdamConfig {
    AdamConfig {
        lr,
        beta1: cfg.adam_beta1,
        beta2: cfg.adam_beta2,
        eps: cfg.adam_eps,
    }
}

/// Mean negative log-likelihood per token plus the token count.
fn backward_into(g: &Graph, loss: Var, stores: &mut [&mut ParamStore]) -> Result<()> {
    let grads = g.backward(loss)?;
    for s in stores.iter_mut() {
        grads.accumulate(s);
    }
    Ok(())
}

fn step_opt(opt: &mut Adam, store: &mut ParamStore) {
    opt.step(store);
    store.zero_grad();
}

fn batch<'a, R: Rng>(set: &'a [PairedSample], n: usize, rng: &mut R) -> Vec<&'a PairedSample> {
    let n = n.min(set.len());
    sample_indices(rng, set.len(), n).into_iter().map(|i| &set[i]).collect()
}

impl Session {
    /// Fresh networks; each is initialised from its own stream of `cfg.seed`.
    pub fn new(cfg: TrainingConfig, vocab: Vocabulary, songs: usize) -> Result<Self> {
        cfg.validate()?;
        if songs < 2 {
            return Err(TrainError::Stage(format!("need at least two songs, found {songs}")));
        }
        let v = vocab.len();
        let encoder = Encoder::new(encoder_config(&cfg, songs), &mut substream(cfg.seed, 1));
        let generator = Generator::new(generator_config(&cfg, v), &mut substream(cfg.seed, 2));
        let discriminator = Discriminator::new(text_cnn_config(&cfg, v), &mut substream(cfg.seed, 3));
        let evaluator = Evaluator::new(evaluator_config(&cfg, v), &mut substream(cfg.seed, 4));
        let rng = substream(cfg.seed, TRAIN_STREAM);
        let lambda_eos = cfg.lambda_init;
        Ok(Self {
            cfg,
            vocab,
            songs,
            encoder,
            generator,
            discriminator,
            evaluator,
            stage: None,
            completed: Vec::new(),
            step: 0,
            lambda_eos,
            rng,
            opts: HashMap::new(),
            features: None,
        })
    }

    pub fn rng_mut(&mut self) -> &mut SeededRng {
        &mut self.rng
    }

    fn check_vocab(&self, data: &Dataset) -> Result<()> {
        if data.vocab != self.vocab {
            return Err(TrainError::Stage(
                "corpus vocabulary differs from the checkpoint vocabulary".into(),
            ));
        }
        if data.songs > self.songs {
            return Err(TrainError::Stage(format!(
                "corpus has {} songs, model was built for {}",
                data.songs, self.songs
            )));
        }
        Ok(())
    }

    /// Enters `stage` with fresh optimizers unless already in it.
    pub fn begin(&mut self, stage: Stage) -> Result<()> {
        if self.stage == Some(stage) {
            return Ok(());
        }
        if stage == Stage::Gan && !self.completed.contains(&Stage::Mle) && self.stage != Some(Stage::Mle) {
            return Err(TrainError::Stage(
                "adversarial fine-tuning needs a checkpoint that went through maximum-likelihood training".into(),
            ));
        }
        if let Some(prev) = self.stage {
            if !self.completed.contains(&prev) {
                self.completed.push(prev);
            }
        }
        self.stage = Some(stage);
        self.step = 0;
        self.opts.clear();
        self.features = None;
        let c = &self.cfg;
        match stage {
            Stage::PretrainEncoder => {
                self.opts.insert("encoder", Adam::new(adam_cfg(c, c.pretrain_lr), self.encoder.store()));
            }
            Stage::Mle => {
                self.opts.insert("encoder", Adam::new(adam_cfg(c, c.mle_lr), self.encoder.store()));
                self.opts.insert("generator", Adam::new(adam_cfg(c, c.mle_lr), self.generator.store()));
            }
            Stage::Gan => {
                self.lambda_eos = c.lambda_init;
                self.opts.insert("generator", Adam::new(adam_cfg(c, c.gan_lr), self.generator.store()));
                self.opts
                    .insert("discriminator", Adam::new(adam_cfg(c, c.gan_critic_lr), self.discriminator.store()));
                self.opts.insert("evaluator", Adam::new(adam_cfg(c, c.gan_critic_lr), self.evaluator.store()));
                if c.train_encoder_in_gan {
                    self.opts.insert("encoder", Adam::new(adam_cfg(c, c.gan_lr), self.encoder.store()));
                }
            }
        }
        Ok(())
    }

    fn require(&self, stage: Stage) -> Result<()> {
        if self.stage != Some(stage) {
            return Err(TrainError::Stage(format!("not in stage {}", stage.tag())));
        }
        Ok(())
    }

    /// One encoder-classification step on a random training batch.
    pub fn pretrain_step(&mut self, data: &Dataset) -> Result<PretrainLog> {
        self.require(Stage::PretrainEncoder)?;
        if data.songs < 2 {
            return Err(TrainError::Stage("encoder pretraining needs at least two songs".into()));
        }
        let picked = batch(&data.splits.train, self.cfg.pretrain_batch, &mut self.rng);
        let mut total = 0.0;
        let mut correct = 0;
        let scale = 1.0 / picked.len() as f64;
        for s in &picked {
            let mut g = Graph::new();
            let e = self.encoder.features(&mut g, s.clip.samples())?;
            let logits = self.encoder.logits(&mut g, e);
            if crate::generator::argmax(g.value(logits)) == s.song_label {
                correct += 1;
            }
            let ce = crate::nn::cross_entropy(&mut g, logits, s.song_label);
            total += g.scalar(ce);
            let loss = g.scale(ce, scale);
            backward_into(&g, loss, &mut [self.encoder.store_mut()])?;
        }
        step_opt(self.opts.get_mut("encoder").expect("encoder optimizer"), self.encoder.store_mut());
        self.step += 1;
        Ok(PretrainLog {
            stage: Stage::PretrainEncoder,
            step: self.step,
            loss: total * scale,
            accuracy: correct as f64 * scale,
        })
    }

    /// Song-classification accuracy over `set` with the current encoder.
    pub fn encoder_accuracy(&self, set: &[PairedSample]) -> Result<f64> {
        let mut correct = 0;
        for s in set {
            let e = self.encoder.extract_features(&s.clip)?;
            if crate::generator::argmax(&self.encoder.classify_song(&e)) == s.song_label {
                correct += 1;
            }
        }
        Ok(correct as f64 / set.len().max(1) as f64)
    }

    /// One joint encoder + generator likelihood step.
    pub fn mle_step(&mut self, data: &Dataset) -> Result<MleLog> {
        self.require(Stage::Mle)?;
        self.check_vocab(data)?;
        let picked = batch(&data.splits.train, self.cfg.mle_batch, &mut self.rng);
        let tokens: usize = picked.iter().map(|s| s.comment.len()).sum();
        let scale = 1.0 / tokens as f64;
        let mut total = 0.0;
        for s in &picked {
            let noise = self.generator.sample_noise(&mut self.rng);
            let mut g = Graph::new();
            let e = self.encoder.features(&mut g, s.clip.samples())?;
            let nll = self.generator.mle_loss(&mut g, e, &noise, &s.comment);
            total += g.scalar(nll);
            let loss = g.scale(nll, scale);
            let grads = g.backward(loss)?;
            grads.accumulate(self.encoder.store_mut());
            grads.accumulate(self.generator.store_mut());
        }
        step_opt(self.opts.get_mut("encoder").expect("encoder optimizer"), self.encoder.store_mut());
        step_opt(self.opts.get_mut("generator").expect("generator optimizer"), self.generator.store_mut());
        self.step += 1;
        Ok(MleLog {
            stage: Stage::Mle,
            step: self.step,
            loss: total * scale,
            tokens,
        })
    }

    /// Mean per-token likelihood loss over `set` (zero noise).
    pub fn mle_eval(&self, set: &[PairedSample]) -> Result<f64> {
        let mut total = 0.0;
        let mut tokens = 0;
        for s in set {
            let mut g = Graph::new();
            g.freeze(self.encoder.store());
            g.freeze(self.generator.store());
            let e = self.encoder.features(&mut g, s.clip.samples())?;
            let nll = self.generator.mle_loss(&mut g, e, &vec![0.0; self.cfg.noise_dim], &s.comment);
            total += g.scalar(nll);
            tokens += s.comment.len();
        }
        Ok(total / tokens.max(1) as f64)
    }

    /// Audio features of every sample in `data`, keyed by sample id.
    pub fn feature_cache(&self, data: &Dataset) -> Result<HashMap<String, Vec<f64>>> {
        let mut out = HashMap::new();
        for s in data.splits.train.iter().chain(&data.splits.valid).chain(&data.splits.test) {
            out.insert(s.id.clone(), self.encoder.extract_features(&s.clip)?);
        }
        Ok(out)
    }

    fn ensure_features(&mut self, data: &Dataset) -> Result<()> {
        if self.features.is_none() || self.cfg.train_encoder_in_gan {
            self.features = Some(self.feature_cache(data)?);
        }
        Ok(())
    }

    fn negative_sampler(&self, data: &Dataset) -> Result<NegativeSampler> {
        let feats = self.features.as_ref().expect("features cached");
        let mut pools = vec![Vec::new(); self.songs];
        for s in &data.splits.train {
            pools[s.song_label].push(feats[&s.id].clone());
        }
        Ok(NegativeSampler::new(pools)?)
    }

    /// Target length for the EOS controller.
    pub fn target_len(&self, data: &Dataset) -> f64 {
        if self.cfg.target_len > 0.0 {
            self.cfg.target_len
        } else {
            data.mean_train_len
        }
    }

    /// One adversarial iteration: discriminator step, evaluator step (unless
    /// disabled), generator step, then an EOS-scale update. The first
    /// `gan_critic_warmup` iterations skip the generator and the EOS update;
    /// the temperature schedule starts after them.
    pub fn gan_step(&mut self, data: &Dataset) -> Result<GanLog> {
        self.require(Stage::Gan)?;
        self.check_vocab(data)?;
        self.ensure_features(data)?;
        let c = self.cfg.clone();
        let warm = self.step < c.gan_critic_warmup;
        let n = self.step.saturating_sub(c.gan_critic_warmup).min(c.gan_steps);
        let beta = beta_schedule(n, c.gan_steps, c.beta_max)?;
        let vocab = self.vocab.len();
        let feats = self.features.take().expect("features cached");

        // Discriminator.
        let real = batch(&data.splits.train, c.gan_batch, &mut self.rng);
        let cond = batch(&data.splits.train, c.gan_batch, &mut self.rng);
        let (d_value, d_real, d_fake, d_len) = {
            let mut g = Graph::new();
            g.freeze(self.generator.store());
            let mut rs = Vec::new();
            for s in &real {
                let sent = Sentence::real(&mut g, &s.comment, vocab, c.max_len)?;
                rs.push(self.discriminator.discriminate(&mut g, &sent)?);
            }
            let mut fs = Vec::new();
            let mut lens = 0usize;
            for s in &cond {
                let e = g.constant(&Tensor::row(&feats[&s.id]));
                let noise = self.generator.sample_noise(&mut self.rng);
                let roll = self.generator.relaxed_rollout(&mut g, e, &noise, beta, self.lambda_eos, c.max_len, &mut self.rng)?;
                lens += roll.tokens.iter().filter(|&&t| t != crate::data::EOS).count();
                let sent = Sentence::generated(&mut g, &roll.rows, vocab, c.max_len)?;
                fs.push(self.discriminator.discriminate(&mut g, &sent)?);
            }
            let loss = if c.label_smoothing {
                let rt: Vec<f64> = rs.iter().map(|_| smooth_label(LabelKind::Real, &mut self.rng)).collect();
                let ft: Vec<f64> = fs.iter().map(|_| smooth_label(LabelKind::Fake, &mut self.rng)).collect();
                d_loss_smoothed(&mut g, &rs, &rt, &fs, &ft)?
            } else {
                d_loss(&mut g, &rs, &fs)
            };
            let mean = |g: &Graph, xs: &[Var]| xs.iter().map(|v| g.scalar(*v)).sum::<f64>() / xs.len() as f64;
            let out = (g.scalar(loss), mean(&g, &rs), mean(&g, &fs), lens as f64 / cond.len() as f64);
            backward_into(&g, loss, &mut [self.discriminator.store_mut()])?;
            out
        };
        step_opt(self.opts.get_mut("discriminator").expect("optimizer"), self.discriminator.store_mut());

        // Evaluator, on real pairs with mismatched negatives.
        let v_value = if c.use_evaluator {
            self.features = Some(feats);
            let sampler = self.negative_sampler(data)?;
            let feats = self.features.as_ref().expect("features cached");
            let picked = batch(&data.splits.train, c.gan_batch, &mut self.rng);
            let mut g = Graph::new();
            let mut sents = Vec::new();
            let mut pos = Vec::new();
            let mut neg = Vec::new();
            for s in &picked {
                sents.push(Sentence::real(&mut g, &s.comment, vocab, c.max_len)?);
                pos.push(g.constant(&Tensor::row(&feats[&s.id])));
                let (_, en) = sampler.sample(s.song_label, &mut self.rng);
                neg.push(g.constant(&Tensor::row(en)));
            }
            let loss = if c.label_smoothing {
                let pt: Vec<f64> = picked.iter().map(|_| smooth_label(LabelKind::Real, &mut self.rng)).collect();
                let nt: Vec<f64> = picked.iter().map(|_| smooth_label(LabelKind::Fake, &mut self.rng)).collect();
                v_loss_smoothed(&mut g, &self.evaluator, &sents, &pos, &neg, &pt, &nt)?
            } else {
                v_loss(&mut g, &self.evaluator, &sents, &pos, &neg)?
            };
            let value = g.scalar(loss);
            backward_into(&g, loss, &mut [self.evaluator.store_mut()])?;
            step_opt(self.opts.get_mut("evaluator").expect("optimizer"), self.evaluator.store_mut());
            Some(value)
        } else {
            self.features = Some(feats);
            None
        };
        if warm {
            self.step += 1;
            return Ok(GanLog {
                stage: Stage::Gan,
                step: self.step,
                beta,
                lambda_eos: self.lambda_eos,
                d_loss: d_value,
                v_loss: v_value,
                g_loss: None,
                g_loss_adv: None,
                g_loss_topic: None,
                mean_len: d_len,
                d_real,
                d_fake,
            });
        }
        let feats = self.features.take().expect("features cached");

        // Generator through the relaxed sampler.
        let cond = batch(&data.splits.train, c.gan_batch, &mut self.rng);
        let (g_total, g_adv, g_topic, mean_len) = {
            let mut g = Graph::new();
            g.freeze(self.discriminator.store());
            g.freeze(self.evaluator.store());
            let mut ds = Vec::new();
            let mut vs = Vec::new();
            let mut lens = 0usize;
            for s in &cond {
                let e = g.constant(&Tensor::row(&feats[&s.id]));
                let noise = self.generator.sample_noise(&mut self.rng);
                let roll = self.generator.relaxed_rollout(&mut g, e, &noise, beta, self.lambda_eos, c.max_len, &mut self.rng)?;
                lens += roll.tokens.iter().filter(|&&t| t != crate::data::EOS).count();
                let sent = Sentence::generated(&mut g, &roll.rows, vocab, c.max_len)?;
                ds.push(self.discriminator.discriminate(&mut g, &sent)?);
                if c.use_evaluator {
                    vs.push(self.evaluator.evaluate_match(&mut g, &sent, e)?);
                }
            }
            let adv = g_loss_adv(&mut g, &ds);
            let (total, topic) = if c.use_evaluator {
                let t = g_loss_topic(&mut g, &vs);
                (g.add(adv, t), Some(g.scalar(t)))
            } else {
                (adv, None)
            };
            let out = (g.scalar(total), g.scalar(adv), topic, lens as f64 / cond.len() as f64);
            backward_into(&g, total, &mut [self.generator.store_mut()])?;
            out
        };
        step_opt(self.opts.get_mut("generator").expect("optimizer"), self.generator.store_mut());
        self.features = Some(feats);

        let target = self.target_len(data);
        self.lambda_eos = update_lambda(self.lambda_eos, mean_len, target, c.lambda_eta)?;
        self.step += 1;
        Ok(GanLog {
            stage: Stage::Gan,
            step: self.step,
            beta,
            lambda_eos: self.lambda_eos,
            d_loss: d_value,
            v_loss: v_value,
            g_loss: Some(g_total),
            g_loss_adv: Some(g_adv),
            g_loss_topic: g_topic,
            mean_len,
            d_real,
            d_fake,
        })
    }

    /// Serialises networks, optimizer moments, rng position and counters.
    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut ck = Checkpoint::new();
        ck.set_meta("config", self.cfg.to_text());
        ck.set_meta("vocab", self.vocab.to_json());
        ck.set_meta("songs", self.songs.to_string());
        ck.set_meta("stage", self.stage.map_or("none", Stage::tag));
        let done: Vec<&str> = self.completed.iter().map(|s| s.tag()).collect();
        ck.set_meta("completed", done.join(","));
        ck.set_meta("step", self.step.to_string());
        ck.set_meta("lambda_eos", format!("{:016x}", self.lambda_eos.to_bits()));
        ck.set_meta("rng", encode_state(&self.rng));
        ck.put_store("params", self.encoder.store());
        ck.put_store("params", self.generator.store());
        ck.put_store("params", self.discriminator.store());
        ck.put_store("params", self.evaluator.store());
        for (name, opt) in &self.opts {
            let store = match *name {
                "encoder" => self.encoder.store(),
                "generator" => self.generator.store(),
                "discriminator" => self.discriminator.store(),
                _ => self.evaluator.store(),
            };
            ck.put_adam(&format!("adam.{name}"), opt, store);
        }
        ck
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let cfg = TrainingConfig::parse(ck.meta("config")?)?;
        let vocab = Vocabulary::from_json(ck.meta("vocab")?)?;
        let songs: usize = ck
            .meta("songs")?
            .parse()
            .map_err(|_| CheckpointError::Corrupt("songs".into()))?;
        let mut s = Self::new(cfg, vocab, songs)?;
        ck.load_store("params", s.encoder.store_mut())?;
        ck.load_store("params", s.generator.store_mut())?;
        ck.load_store("params", s.discriminator.store_mut())?;
        ck.load_store("params", s.evaluator.store_mut())?;
        s.completed = ck
            .meta("completed")?
            .split(',')
            .filter(|t| !t.is_empty())
            .map(|t| Stage::from_tag(t).ok_or_else(|| CheckpointError::Corrupt(format!("stage {t}"))))
            .collect::<std::result::Result<_, _>>()?;
        let stage = ck.meta("stage")?;
        s.stage = if stage == "none" {
            None
        } else {
            Some(Stage::from_tag(stage).ok_or_else(|| CheckpointError::Corrupt(format!("stage {stage}")))?)
        };
        s.step = ck.meta("step")?.parse().map_err(|_| CheckpointError::Corrupt("step".into()))?;
        s.lambda_eos = f64::from_bits(
            u64::from_str_radix(ck.meta("lambda_eos")?, 16).map_err(|_| CheckpointError::Corrupt("lambda_eos".into()))?,
        );
        s.rng = decode_state(ck.meta("rng")?).ok_or_else(|| CheckpointError::Corrupt("rng state".into()))?;
        let c = s.cfg.clone();
        let lr = match s.stage {
            Some(Stage::PretrainEncoder) => c.pretrain_lr,
            Some(Stage::Mle) => c.mle_lr,
            Some(Stage::Gan) => c.gan_lr,
            None => c.pretrain_lr,
        };
        for name in ["encoder", "generator", "discriminator", "evaluator"] {
            let section = format!("adam.{name}");
            if !ck.has_section(&section) {
                continue;
            }
            let store = match name {
                "encoder" => s.encoder.store(),
                "generator" => s.generator.store(),
                "discriminator" => s.discriminator.store(),
                _ => s.evaluator.store(),
            };
            let lr = match (s.stage, name) {
                (Some(Stage::Gan), "discriminator" | "evaluator") => c.gan_critic_lr,
                _ => lr,
            };
            let opt = ck.load_adam(&section, adam_cfg(&c, lr), store)?;
            s.opts.insert(name, opt);
        }
        Ok(s)
    }

    /// Generated comment for a feature vector, rendered as text.
    pub fn generate_text<R: Rng>(&self, e: &[f64], rng: Option<&mut R>) -> Result<String> {
        let lambda = if self.cfg.lambda_at_inference { self.lambda_eos } else { 1.0 };
        let mode = match rng {
            Some(r) => crate::generator::Decode::Sample(r),
            None => crate::generator::Decode::Greedy,
        };
        let seq = self.generator.generate(e, mode, self.cfg.max_len, lambda)?;
        Ok(self.vocab.render(seq.ids()))
    }
}

/// Trains a standalone evaluator on real pairs with negative sampling,
/// using fixed audio features. Returns the evaluator and per-step losses.
pub fn train_metric_evaluator(
    cfg: &TrainingConfig,
    vocab: &Vocabulary,
    songs: usize,
    train: &[PairedSample],
    features: &HashMap<String, Vec<f64>>,
    seed: u64,
) -> Result<(Evaluator, Vec<f64>)> {
    let mut init = substream(seed, 5);
    let mut ev = Evaluator::new(evaluator_config(cfg, vocab.len()), &mut init);
    let mut rng = substream(seed, 6);
    let mut pools = vec![Vec::new(); songs];
    for s in train {
        pools[s.song_label].push(features[&s.id].clone());
    }
    let sampler = NegativeSampler::new(pools)?;
    let mut opt = Adam::new(adam_cfg(cfg, cfg.metric_eval_lr), ev.store());
    let mut losses = Vec::new();
    for _ in 0..cfg.metric_eval_steps {
        let picked = batch(train, cfg.metric_eval_batch, &mut rng);
        let mut g = Graph::new();
        let mut sents = Vec::new();
        let mut pos = Vec::new();
        let mut neg = Vec::new();
        for s in &picked {
            sents.push(Sentence::real(&mut g, &s.comment, vocab.len(), cfg.max_len)?);
            pos.push(g.constant(&Tensor::row(&features[&s.id])));
            let (_, en) = sampler.sample(s.song_label, &mut rng);
            neg.push(g.constant(&Tensor::row(en)));
        }
        let loss = if cfg.label_smoothing {
            let pt: Vec<f64> = picked.iter().map(|_| smooth_label(LabelKind::Real, &mut rng)).collect();
            let nt: Vec<f64> = picked.iter().map(|_| smooth_label(LabelKind::Fake, &mut rng)).collect();
            v_loss_smoothed(&mut g, &ev, &sents, &pos, &neg, &pt, &nt)?
        } else {
            v_loss(&mut g, &ev, &sents, &pos, &neg)?
        };
        losses.push(g.scalar(loss));
        backward_into(&g, loss, &mut [ev.store_mut()])?;
        step_opt(&mut opt, ev.store_mut());
    }
    Ok((ev, losses))
}

/// Standalone scorer: a metric evaluator together with the encoder whose
/// features it was trained on, so raw audio can be scored.
#[derive(Debug, Clone)]
pub struct ScoringModel {
    pub cfg: TrainingConfig,
    pub vocab: Vocabulary,
    pub songs: usize,
    pub encoder: Encoder,
    pub evaluator: Evaluator,
}

impl ScoringModel {
    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut ck = Checkpoint::new();
        ck.set_meta("kind", "metric_evaluator");
        ck.set_meta("config", self.cfg.to_text());
        ck.set_meta("vocab", self.vocab.to_json());
        ck.set_meta("songs", self.songs.to_string());
        ck.put_store("encoder", self.encoder.store());
        ck.put_store("evaluator", self.evaluator.store());
        ck
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        if ck.meta("kind").ok() != Some("metric_evaluator") {
            return Err(TrainError::Stage("not a scoring-evaluator checkpoint".into()));
        }
        let cfg = TrainingConfig::parse(ck.meta("config")?)?;
        let vocab = Vocabulary::from_json(ck.meta("vocab")?)?;
        let songs: usize = ck.meta("songs")?.parse().map_err(|_| CheckpointError::Corrupt("songs".into()))?;
        let mut encoder = Encoder::new(encoder_config(&cfg, songs), &mut substream(0, 0));
        ck.load_store("encoder", encoder.store_mut())?;
        let mut evaluator = Evaluator::new(evaluator_config(&cfg, vocab.len()), &mut substream(0, 0));
        ck.load_store("evaluator", evaluator.store_mut())?;
        Ok(Self {
            cfg,
            vocab,
            songs,
            encoder,
            evaluator,
        })
    }

    /// V(s, e) for a comment and the audio it should describe.
    pub fn score(&self, text: &str, audio: &Waveform) -> Result<f64> {
        let e = clip_features(&self.encoder, audio, self.cfg.clip_seconds)?;
        self.score_features(text, &e)
    }

    pub fn score_features(&self, text: &str, e: &[f64]) -> Result<f64> {
        let ids = TokenSequence::from_body(&self.vocab.encode(text), self.cfg.max_len);
        Ok(self.evaluator.score_ids(ids.ids(), e)?)
    }
}

/// Features of the first full clip of `audio`, or of the whole recording
/// when it is shorter than one clip.
pub fn clip_features(encoder: &Encoder, audio: &Waveform, clip_seconds: f64) -> Result<Vec<f64>> {
    let clips = if audio.duration_secs() >= clip_seconds {
        split_clips(audio, clip_seconds)
    } else {
        Vec::new()
    };
    Ok(encoder.extract_features(clips.first().unwrap_or(audio))?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;

    #[test]
    fn beta_examples() {
        assert_eq!(beta_schedule(0, 100, 100.0).unwrap(), 1.0);
        assert_eq!(beta_schedule(100, 100, 100.0).unwrap(), 100.0);
        assert!((beta_schedule(50, 100, 100.0).unwrap() - 10.0).abs() < 1e-12);
        assert!(beta_schedule(101, 100, 100.0).is_err());
        assert!(beta_schedule(1, 100, 0.0).is_err());
    }

    #[test]
    fn smoothed_labels() {
        let mut r = seeded(0);
        let real: Vec<f64> = (0..10_000).map(|_| smooth_label(LabelKind::Real, &mut r)).collect();
        assert!(real.iter().all(|v| (0.9..=1.0).contains(v)));
        let mean = real.iter().sum::<f64>() / real.len() as f64;
        assert!((mean - 0.95).abs() < 0.005);
        assert!((0..10_000).all(|_| (0.0..=0.1).contains(&smooth_label(LabelKind::Fake, &mut r))));
    }

    #[test]
    fn stage_tags_round_trip() {
        for s in [Stage::PretrainEncoder, Stage::Mle, Stage::Gan] {
            assert_eq!(Stage::from_tag(s.tag()), Some(s));
        }
    }
}
