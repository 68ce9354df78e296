//! Flat `key = value` configuration.

use std::fmt::Write as _;
use std::path::Path;

use crate::data::{Script, SplitMode, TokenMode};
use crate::evaluator::Interaction;

use super::TrainError;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainingConfig {
    pub seed: u64,

    pub clip_seconds: f64,
    pub min_len: usize,
    pub max_len: usize,
    pub vote_threshold: u64,
    pub dup_factor: usize,
    pub token_mode: TokenMode,
    pub script: Script,
    pub split: SplitMode,

    pub enc_channels: usize,
    pub enc_layers: usize,
    pub enc_kernel: usize,
    pub feature_dim: usize,

    pub embed_dim: usize,
    pub heads: usize,
    pub head_dim: usize,
    pub slots: usize,
    pub noise_dim: usize,

    pub cnn_embed_dim: usize,
    pub cnn_filters: usize,
    pub cnn_widths: Vec<usize>,
    pub reps: usize,
    pub eval_hidden: usize,
    pub interaction: Interaction,

    pub pretrain_batch: usize,
    pub pretrain_lr: f64,
    pub pretrain_steps: u64,
    pub mle_batch: usize,
    pub mle_lr: f64,
    pub mle_steps: u64,
    pub gan_batch: usize,
    pub gan_lr: f64,
    /// Learning rate of the discriminator and evaluator during fine-tuning.
    pub gan_critic_lr: f64,
    /// Discriminator and evaluator updates before the first generator update.
    pub gan_critic_warmup: u64,
    pub gan_steps: u64,
    pub beta_max: f64,

    pub lambda_init: f64,
    pub lambda_eta: f64,
    /// Target generated length; `0` means the training-set mean.
    pub target_len: f64,
    pub label_smoothing: bool,
    pub use_evaluator: bool,
    pub train_encoder_in_gan: bool,
    pub lambda_at_inference: bool,

    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,

    /// Standalone evaluator used for scoring.
    pub metric_eval_steps: u64,
    pub metric_eval_batch: usize,
    pub metric_eval_lr: f64,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl TrainingConfig {
    /// Full-size model and 20 s clips.
    pub fn full() -> Self {
        Self {
            clip_seconds: 20.0,
            enc_channels: 32,
            enc_layers: 6,
            feature_dim: 128,
            embed_dim: 128,
            head_dim: 128,
            noise_dim: 128,
            cnn_embed_dim: 128,
            cnn_filters: 64,
            eval_hidden: 128,
            pretrain_batch: 16,
            pretrain_lr: 1e-3,
            pretrain_steps: 10_000,
            mle_steps: 10_000,
            gan_steps: 5_000,
            mle_batch: 512,
            gan_batch: 64,
            gan_critic_lr: 1e-4,
            gan_critic_warmup: 0,
            metric_eval_steps: 2_000,
            metric_eval_batch: 64,
            ..Self::desk()
        }
    }

    /// Small model and 1 s clips for single-CPU runs on the synthetic corpus.
    pub fn desk() -> Self {
        Self {
            seed: 0,
            clip_seconds: 1.0,
            min_len: 10,
            max_len: 50,
            vote_threshold: 10,
            dup_factor: 10,
            token_mode: TokenMode::Char,
            script: Script::Any,
            split: SplitMode::Global,
            enc_channels: 4,
            enc_layers: 3,
            enc_kernel: 3,
            feature_dim: 128,
            embed_dim: 32,
            heads: 2,
            head_dim: 32,
            slots: 1,
            noise_dim: 16,
            cnn_embed_dim: 16,
            cnn_filters: 16,
            cnn_widths: vec![2, 3, 4],
            reps: 3,
            eval_hidden: 32,
            interaction: Interaction::Product,
            pretrain_batch: 8,
            pretrain_lr: 1e-2,
            pretrain_steps: 200,
            mle_batch: 16,
            mle_lr: 1e-2,
            mle_steps: 300,
            gan_batch: 16,
            gan_lr: 1e-4,
            gan_critic_lr: 1e-3,
            gan_critic_warmup: 200,
            gan_steps: 100,
            beta_max: 100.0,
            lambda_init: 1.0,
            lambda_eta: 0.1,
            target_len: 0.0,
            label_smoothing: true,
            use_evaluator: true,
            train_encoder_in_gan: false,
            lambda_at_inference: false,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            metric_eval_steps: 300,
            metric_eval_batch: 16,
            metric_eval_lr: 1e-3,
        }
    }

    pub fn from_file(path: impl AsRef<Path>) -> Result<Self, TrainError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|e| TrainError::Config(format!("{}: {e}", path.display())))?;
        Self::parse(&text)
    }

    /// Starts from the preset named by a `preset` key (`desk` by default),
    /// then applies the remaining keys in order.
    pub fn parse(text: &str) -> Result<Self, TrainError> {
        let pairs = Self::pairs(text)?;
        let mut cfg = match pairs.iter().find(|(k, _)| k == "preset").map(|(_, v)| v.as_str()) {
            None | Some("desk") => Self::desk(),
            Some("full") => Self::full(),
            Some(other) => return Err(TrainError::Config(format!("unknown preset `{other}`"))),
        };
        for (k, v) in pairs.iter().filter(|(k, _)| k != "preset") {
            cfg.set(k, v)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Applies `key = value` lines on top of `self`; a `preset` key is an error.
    pub fn apply(&mut self, text: &str) -> Result<(), TrainError> {
        for (k, v) in Self::pairs(text)? {
            if k == "preset" {
                return Err(TrainError::Config("`preset` cannot be applied on top of an existing config".into()));
            }
            self.set(&k, &v)?;
        }
        self.validate()
    }

    fn pairs(text: &str) -> Result<Vec<(String, String)>, TrainError> {
        let mut pairs = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| TrainError::Config(format!("line {}: expected key = value", i + 1)))?;
            pairs.push((k.trim().to_string(), v.trim().to_string()));
        }
        Ok(pairs)
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<(), TrainError> {
        fn p<T: std::str::FromStr>(key: &str, v: &str) -> Result<T, TrainError> {
            v.parse()
                .map_err(|_| TrainError::Config(format!("bad value `{v}` for `{key}`")))
        }
        let v = value;
        match key {
            "seed" => self.seed = p(key, v)?,
            "clip_seconds" => self.clip_seconds = p(key, v)?,
            "min_len" => self.min_len = p(key, v)?,
            "max_len" => self.max_len = p(key, v)?,
            "vote_threshold" => self.vote_threshold = p(key, v)?,
            "dup_factor" => self.dup_factor = p(key, v)?,
            "token_mode" => {
                self.token_mode = match v {
                    "char" => TokenMode::Char,
                    "word" => TokenMode::Word,
                    _ => return Err(TrainError::Config(format!("bad token_mode `{v}`"))),
                }
            }
            "script" => {
                self.script = match v {
                    "any" => Script::Any,
                    "han" => Script::Han,
                    _ => return Err(TrainError::Config(format!("bad script `{v}`"))),
                }
            }
            "split" => {
                self.split = match v {
                    "global" => SplitMode::Global,
                    "per_song" => SplitMode::PerSong,
                    _ => return Err(TrainError::Config(format!("bad split `{v}`"))),
                }
            }
            "enc_channels" => self.enc_channels = p(key, v)?,
            "enc_layers" => self.enc_layers = p(key, v)?,
            "enc_kernel" => self.enc_kernel = p(key, v)?,
            "feature_dim" => self.feature_dim = p(key, v)?,
            "embed_dim" => self.embed_dim = p(key, v)?,
            "heads" => self.heads = p(key, v)?,
            "head_dim" => self.head_dim = p(key, v)?,
            "slots" => self.slots = p(key, v)?,
            "noise_dim" => self.noise_dim = p(key, v)?,
            "cnn_embed_dim" => self.cnn_embed_dim = p(key, v)?,
            "cnn_filters" => self.cnn_filters = p(key, v)?,
            "cnn_widths" => {
                self.cnn_widths = v
                    .split(',')
                    .map(|w| p(key, w.trim()))
                    .collect::<Result<_, _>>()?
            }
            "reps" => self.reps = p(key, v)?,
            "eval_hidden" => self.eval_hidden = p(key, v)?,
            "interaction" => {
                self.interaction = match v {
                    "product" => Interaction::Product,
                    "concat" => Interaction::Concat,
                    _ => return Err(TrainError::Config(format!("bad interaction `{v}`"))),
                }
            }
            "pretrain_batch" => self.pretrain_batch = p(key, v)?,
            "pretrain_lr" => self.pretrain_lr = p(key, v)?,
            "pretrain_steps" => self.pretrain_steps = p(key, v)?,
            "mle_batch" => self.mle_batch = p(key, v)?,
            "mle_lr" => self.mle_lr = p(key, v)?,
            "mle_steps" => self.mle_steps = p(key, v)?,
            "gan_batch" => self.gan_batch = p(key, v)?,
            "gan_lr" => self.gan_lr = p(key, v)?,
            "gan_critic_lr" => self.gan_critic_lr = p(key, v)?,
            "gan_critic_warmup" => self.gan_critic_warmup = p(key, v)?,
            "gan_steps" => self.gan_steps = p(key, v)?,
            "beta_max" => self.beta_max = p(key, v)?,
            "lambda_init" => self.lambda_init = p(key, v)?,
            "lambda_eta" => self.lambda_eta = p(key, v)?,
            "target_len" => self.target_len = p(key, v)?,
            "label_smoothing" => self.label_smoothing = p(key, v)?,
            "use_evaluator" => self.use_evaluator = p(key, v)?,
            "train_encoder_in_gan" => self.train_encoder_in_gan = p(key, v)?,
            "lambda_at_inference" => self.lambda_at_inference = p(key, v)?,
            "adam_beta1" => self.adam_beta1 = p(key, v)?,
            "adam_beta2" => self.adam_beta2 = p(key, v)?,
            "adam_eps" => self.adam_eps = p(key, v)?,
            "metric_eval_steps" => self.metric_eval_steps = p(key, v)?,
            "metric_eval_batch" => self.metric_eval_batch = p(key, v)?,
            "metric_eval_lr" => self.metric_eval_lr = p(key, v)?,
            _ => return Err(TrainError::Config(format!("unknown key `{key}`"))),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: &str| Err(TrainError::Config(m.to_string()));
        if self.pretrain_batch == 0 || self.mle_batch == 0 || self.gan_batch == 0 || self.metric_eval_batch == 0 {
            return bad("batch sizes must be positive");
        }
        if [self.pretrain_lr, self.mle_lr, self.gan_lr, self.gan_critic_lr, self.metric_eval_lr]
            .iter()
            .any(|lr| *lr <= 0.0 || !lr.is_finite())
        {
            return bad("learning rates must be positive");
        }
        if self.beta_max <= 0.0 {
            return bad("beta_max must be positive");
        }
        if self.enc_layers == 0 || self.heads == 0 || self.slots == 0 || self.reps == 0 {
            return bad("layer, head, slot and representation counts must be positive");
        }
        if self.cnn_widths.is_empty() || self.cnn_widths.iter().any(|w| *w == 0 || *w > self.max_len) {
            return bad("convolution widths must lie in [1, max_len]");
        }
        if self.clip_seconds <= 0.0 {
            return bad("clip_seconds must be positive");
        }
        if self.lambda_init <= 0.0 {
            return bad("lambda_init must be positive");
        }
        Ok(())
    }

    /// Text form accepted by [`TrainingConfig::parse`].
    pub fn to_text(&self) -> String {
        let mode = |m: TokenMode| match m {
            TokenMode::Char => "char",
            TokenMode::Word => "word",
        };
        let script = match self.script {
            Script::Any => "any",
            Script::Han => "han",
        };
        let split = match self.split {
            SplitMode::Global => "global",
            SplitMode::PerSong => "per_song",
        };
        let interaction = match self.interaction {
            Interaction::Product => "product",
            Interaction::Concat => "concat",
        };
        let widths: Vec<String> = self.cnn_widths.iter().map(usize::to_string).collect();
        let mut s = String::new();
        let mut kv = |comment: &str, k: &str, v: String| {
            if !comment.is_empty() {
                let _ = writeln!(s, "# {comment}");
            }
            let _ = writeln!(s, "{k} = {v}");
        };
        kv("", "seed", self.seed.to_string());
        kv("clip length in seconds", "clip_seconds", self.clip_seconds.to_string());
        kv("comment length bounds in tokens", "min_len", self.min_len.to_string());
        kv("", "max_len", self.max_len.to_string());
        kv("comments with more votes than this are duplicated", "vote_threshold", self.vote_threshold.to_string());
        kv("", "dup_factor", self.dup_factor.to_string());
        kv("", "token_mode", mode(self.token_mode).into());
        kv("", "script", script.into());
        kv("", "split", split.into());
        kv("encoder channel width and dilated layer count", "enc_channels", self.enc_channels.to_string());
        kv("", "enc_layers", self.enc_layers.to_string());
        kv("", "enc_kernel", self.enc_kernel.to_string());
        kv("audio feature width (LSTM hidden size)", "feature_dim", self.feature_dim.to_string());
        kv("word embedding width", "embed_dim", self.embed_dim.to_string());
        kv("attention heads in the memory cell", "heads", self.heads.to_string());
        kv("per-head width", "head_dim", self.head_dim.to_string());
        kv("memory slots", "slots", self.slots.to_string());
        kv("", "noise_dim", self.noise_dim.to_string());
        kv("sentence CNN", "cnn_embed_dim", self.cnn_embed_dim.to_string());
        kv("", "cnn_filters", self.cnn_filters.to_string());
        kv("", "cnn_widths", widths.join(","));
        kv("embedded representations per sentence", "reps", self.reps.to_string());
        kv("", "eval_hidden", self.eval_hidden.to_string());
        kv("", "interaction", interaction.into());
        kv("batch size and learning rate, encoder pretraining", "pretrain_batch", self.pretrain_batch.to_string());
        kv("", "pretrain_lr", self.pretrain_lr.to_string());
        kv("", "pretrain_steps", self.pretrain_steps.to_string());
        kv("batch size and learning rate, maximum likelihood", "mle_batch", self.mle_batch.to_string());
        kv("", "mle_lr", self.mle_lr.to_string());
        kv("", "mle_steps", self.mle_steps.to_string());
        kv("batch size and learning rate, adversarial fine-tuning", "gan_batch", self.gan_batch.to_string());
        kv("", "gan_lr", self.gan_lr.to_string());
        kv("", "gan_critic_lr", self.gan_critic_lr.to_string());
        kv("critic-only iterations before the generator moves", "gan_critic_warmup", self.gan_critic_warmup.to_string());
        kv("total adversarial iterations N", "gan_steps", self.gan_steps.to_string());
        kv("maximum inverse temperature beta_max", "beta_max", self.beta_max.to_string());
        kv("EOS scale: initial value and controller rate", "lambda_init", self.lambda_init.to_string());
        kv("", "lambda_eta", self.lambda_eta.to_string());
        kv("0 = training-set mean length", "target_len", self.target_len.to_string());
        kv("", "label_smoothing", self.label_smoothing.to_string());
        kv("", "use_evaluator", self.use_evaluator.to_string());
        kv("", "train_encoder_in_gan", self.train_encoder_in_gan.to_string());
        kv("", "lambda_at_inference", self.lambda_at_inference.to_string());
        kv("adaptive-moment optimizer", "adam_beta1", self.adam_beta1.to_string());
        kv("", "adam_beta2", self.adam_beta2.to_string());
        kv("", "adam_eps", self.adam_eps.to_string());
        kv("standalone scoring evaluator", "metric_eval_steps", self.metric_eval_steps.to_string());
        kv("", "metric_eval_batch", self.metric_eval_batch.to_string());
        kv("", "metric_eval_lr", self.metric_eval_lr.to_string());
        s
    }
}
