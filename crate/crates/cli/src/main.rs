use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use mcg::checkpoint::Checkpoint;
use mcg::data::{load_waveform, synth_corpus, SynthConfig, Tokenizer};
use mcg::metrics::{h_score, pearson, read_human_scores, score_report, v_score_per_audio, Smoothing};
use mcg::rng::seeded;
use mcg::trainer::{
    clip_features, encoder_config, evaluator_config, generator_config, load_prepared, prepare, text_cnn_config,
    train_metric_evaluator, ScoringModel, Session, Stage, TrainingConfig,
};

#[derive(Parser)]
#[command(name = "mcg", version, about = "Music-to-comment generation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct ConfigArgs {
    /// Flat `key = value` file; a `preset` key picks `desk` or `full`.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override one config key; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    set: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic paired corpus (audio/*.wav, comments.jsonl).
    SynthCorpus {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 4)]
        songs: usize,
        #[arg(long, default_value_t = 20)]
        clips_per_song: usize,
        #[arg(long, default_value_t = 12)]
        comments_per_song: usize,
        #[arg(long, default_value_t = 1.0)]
        clip_seconds: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Filter comments, build the vocabulary, pair and split.
    PrepareData {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Stage 1: song classification on clips.
    PretrainEncoder {
        #[arg(long)]
        prepared: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Resume from a checkpoint instead of a fresh model.
        #[arg(long)]
        ckpt: Option<PathBuf>,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Stage 2: joint encoder and generator maximum likelihood.
    TrainMle {
        #[arg(long)]
        prepared: PathBuf,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Train the standalone evaluator used for scoring.
    TrainEvaluator {
        #[arg(long)]
        prepared: PathBuf,
        /// Session checkpoint whose encoder supplies the audio features.
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Stage 3: adversarial fine-tuning with discriminator and evaluator.
    FinetuneGan {
        #[arg(long)]
        prepared: PathBuf,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Ablation: drop the evaluator term.
        #[arg(long)]
        no_evaluator: bool,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Print `audio_id<TAB>comment` lines for one recording.
    Generate {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        audio: PathBuf,
        #[arg(short = 'n', long, default_value_t = 1)]
        n: usize,
        /// Greedy decoding instead of sampling.
        #[arg(long)]
        greedy: bool,
        #[arg(long)]
        seed: Option<u64>,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// BLEU-3/4/5, and with an evaluator V- and H-score, as JSON.
    Evaluate {
        /// `audio_id<TAB>comment` lines.
        #[arg(long)]
        generated: PathBuf,
        /// `audio_id<TAB>comment` lines; all lines of an audio id form its reference set.
        #[arg(long)]
        references: PathBuf,
        #[arg(long)]
        evaluator: Option<PathBuf>,
        /// Directory holding `<audio_id>.wav`; required with `--evaluator`.
        #[arg(long)]
        audio_dir: Option<PathBuf>,
        /// No smoothing of zero n-gram counts.
        #[arg(long)]
        exact_bleu: bool,
        /// Average V per audio first, then across audios.
        #[arg(long)]
        per_audio: bool,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Pearson correlation of per-sample human and metric scores.
    Correlate {
        /// CSV with sample_id, rater_id, fluency, coherence, meaning, consistency.
        #[arg(long)]
        human: PathBuf,
        /// `sample_id<TAB>score` lines.
        #[arg(long)]
        metric: PathBuf,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
}

impl ConfigArgs {
    /// Config file (or the desk preset) with `--set` overrides.
    fn fresh(&self) -> Result<TrainingConfig> {
        let mut cfg = match &self.config {
            Some(p) => TrainingConfig::parse(&read(p)?).with_context(|| format!("config {}", p.display()))?,
            None => TrainingConfig::desk(),
        };
        self.apply_sets(&mut cfg)?;
        Ok(cfg)
    }

    /// Overrides for a config restored from a checkpoint; architecture keys
    /// must not change.
    fn over(&self, base: &TrainingConfig, vocab: usize, songs: usize) -> Result<TrainingConfig> {
        let mut cfg = base.clone();
        if let Some(p) = &self.config {
            let text = read(p)?;
            let text: String = text
                .lines()
                .filter(|l| l.split('#').next().unwrap_or("").split('=').next().unwrap_or("").trim() != "preset")
                .collect::<Vec<_>>()
                .join("\n");
            cfg.apply(&text).with_context(|| format!("config {}", p.display()))?;
        }
        self.apply_sets(&mut cfg)?;
        let arch = |c: &TrainingConfig| {
            format!(
                "{:?}{:?}{:?}{:?}{}",
                encoder_config(c, songs),
                generator_config(c, vocab),
                text_cnn_config(c, vocab),
                evaluator_config(c, vocab),
                c.max_len
            )
        };
        if arch(&cfg) != arch(base) {
            bail!("config changes the model architecture stored in the checkpoint");
        }
        Ok(cfg)
    }

    fn apply_sets(&self, cfg: &mut TrainingConfig) -> Result<()> {
        for kv in &self.set {
            let (k, v) = kv.split_once('=').with_context(|| format!("--set {kv}: expected KEY=VALUE"))?;
            cfg.set(k.trim(), v.trim())?;
        }
        cfg.validate()?;
        Ok(())
    }
}

fn read(p: &Path) -> Result<String> {
    std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))
}

fn load_session(path: &Path, args: &ConfigArgs) -> Result<Session> {
    let ck = Checkpoint::load(path).with_context(|| format!("checkpoint {}", path.display()))?;
    let mut s = Session::from_checkpoint(&ck)?;
    s.cfg = args.over(&s.cfg, s.vocab.len(), s.songs)?;
    Ok(s)
}

fn save(ck: &Checkpoint, path: &Path) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    ck.save(path).with_context(|| format!("writing {}", path.display()))
}

/// One JSON object per line on standard output.
fn log_line<T: Serialize>(out: &mut impl Write, record: &T) -> Result<()> {
    writeln!(out, "{}", serde_json::to_string(record)?)?;
    Ok(())
}

/// `audio_id<TAB>text` lines; blank lines skipped.
fn read_pairs(path: &Path) -> Result<Vec<(String, String)>> {
    read(path)?
        .lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            let (id, text) = l
                .split_once('\t')
                .with_context(|| format!("{}:{}: expected `id<TAB>text`", path.display(), i + 1))?;
            Ok((id.trim().to_string(), text.trim().to_string()))
        })
        .collect()
}

fn run(cli: Cli) -> Result<()> {
    let stdout = std::io::stdout();
    let mut out = stdout.lock();
    match cli.command {
        Command::SynthCorpus {
            out: dir,
            songs,
            clips_per_song,
            comments_per_song,
            clip_seconds,
            seed,
            cfg,
        } => {
            cfg.fresh()?;
            let corpus = synth_corpus(&SynthConfig {
                songs,
                clips_per_song,
                clip_seconds,
                comments_per_song,
                seed,
                ..Default::default()
            });
            corpus.write_to(&dir)?;
            log_line(
                &mut out,
                &serde_json::json!({"songs": corpus.songs.len(), "clips": corpus.clips.len(), "comments": corpus.comments.len()}),
            )?;
        }
        Command::PrepareData { data, out: dir, cfg } => {
            let cfg = cfg.fresh()?;
            let ds = prepare(&data, &dir, &cfg)?;
            log_line(
                &mut out,
                &serde_json::json!({
                    "vocab": ds.vocab.len(),
                    "songs": ds.songs,
                    "train": ds.splits.train.len(),
                    "valid": ds.splits.valid.len(),
                    "test": ds.splits.test.len(),
                    "mean_train_len": ds.mean_train_len,
                }),
            )?;
        }
        Command::PretrainEncoder {
            prepared,
            out: path,
            ckpt,
            cfg,
        } => {
            let ds = load_prepared(&prepared)?;
            let mut s = match ckpt {
                Some(p) => load_session(&p, &cfg)?,
                None => Session::new(cfg.fresh()?, ds.vocab.clone(), ds.songs)?,
            };
            s.begin(Stage::PretrainEncoder)?;
            while s.step < s.cfg.pretrain_steps {
                log_line(&mut out, &s.pretrain_step(&ds)?)?;
            }
            save(&s.to_checkpoint(), &path)?;
        }
        Command::TrainMle {
            prepared,
            ckpt,
            out: path,
            cfg,
        } => {
            let ds = load_prepared(&prepared)?;
            let mut s = load_session(&ckpt, &cfg)?;
            s.begin(Stage::Mle)?;
            while s.step < s.cfg.mle_steps {
                log_line(&mut out, &s.mle_step(&ds)?)?;
            }
            save(&s.to_checkpoint(), &path)?;
        }
        Command::TrainEvaluator {
            prepared,
            ckpt,
            out: path,
            cfg,
        } => {
            let ds = load_prepared(&prepared)?;
            let s = load_session(&ckpt, &cfg)?;
            if ds.vocab != s.vocab {
                bail!("corpus vocabulary differs from the checkpoint vocabulary");
            }
            let feats = s.feature_cache(&ds)?;
            let (evaluator, losses) =
                train_metric_evaluator(&s.cfg, &s.vocab, s.songs, &ds.splits.train, &feats, s.cfg.seed)?;
            for (i, loss) in losses.iter().enumerate() {
                log_line(&mut out, &serde_json::json!({"stage": "metric_evaluator", "step": i + 1, "loss": loss}))?;
            }
            let model = ScoringModel {
                cfg: s.cfg.clone(),
                vocab: s.vocab.clone(),
                songs: s.songs,
                encoder: s.encoder.clone(),
                evaluator,
            };
            save(&model.to_checkpoint(), &path)?;
        }
        Command::FinetuneGan {
            prepared,
            ckpt,
            out: path,
            no_evaluator,
            cfg,
        } => {
            let ds = load_prepared(&prepared)?;
            let mut s = load_session(&ckpt, &cfg)?;
            if no_evaluator {
                s.cfg.use_evaluator = false;
            }
            s.begin(Stage::Gan)?;
            while s.step < s.cfg.gan_critic_warmup + s.cfg.gan_steps {
                log_line(&mut out, &s.gan_step(&ds)?)?;
            }
            save(&s.to_checkpoint(), &path)?;
        }
        Command::Generate {
            ckpt,
            audio,
            n,
            greedy,
            seed,
            cfg,
        } => {
            let s = load_session(&ckpt, &cfg)?;
            let w = load_waveform(&audio)?;
            let e = clip_features(&s.encoder, &w, s.cfg.clip_seconds)?;
            let id = audio.file_stem().and_then(|x| x.to_str()).unwrap_or("audio");
            let mut rng = seeded(seed.unwrap_or(s.cfg.seed));
            for _ in 0..n {
                let text = if greedy {
                    s.generate_text::<mcg::rng::SeededRng>(&e, None)?
                } else {
                    s.generate_text(&e, Some(&mut rng))?
                };
                writeln!(out, "{id}\t{text}")?;
            }
        }
        Command::Evaluate {
            generated,
            references,
            evaluator,
            audio_dir,
            exact_bleu,
            per_audio,
            cfg,
        } => {
            let scorer = evaluator
                .map(|p| -> Result<ScoringModel> {
                    let ck = Checkpoint::load(&p).with_context(|| format!("checkpoint {}", p.display()))?;
                    Ok(ScoringModel::from_checkpoint(&ck)?)
                })
                .transpose()?;
            let tok_cfg = match &scorer {
                Some(m) => cfg.over(&m.cfg, m.vocab.len(), m.songs)?,
                None => cfg.fresh()?,
            };
            let tokenizer = Tokenizer::new(tok_cfg.token_mode, tok_cfg.script);
            let gen = read_pairs(&generated)?;
            let mut refs: BTreeMap<String, Vec<Vec<String>>> = BTreeMap::new();
            for (id, text) in read_pairs(&references)? {
                refs.entry(id).or_default().push(tokenizer.tokens(&text));
            }
            let mut cands = Vec::new();
            let mut ref_sets = Vec::new();
            for (id, text) in &gen {
                let r = refs.get(id).with_context(|| format!("no references for audio `{id}`"))?;
                cands.push(tokenizer.tokens(text));
                ref_sets.push(r.clone());
            }
            let mut groups: BTreeMap<&str, Vec<f64>> = BTreeMap::new();
            if let Some(m) = &scorer {
                let dir = audio_dir.as_ref().context("--evaluator needs --audio-dir")?;
                let mut feats: BTreeMap<&str, Vec<f64>> = BTreeMap::new();
                for (id, text) in &gen {
                    if !feats.contains_key(id.as_str()) {
                        let w = load_waveform(dir.join(format!("{id}.wav")))?;
                        feats.insert(id, clip_features(&m.encoder, &w, m.cfg.clip_seconds)?);
                    }
                    groups.entry(id).or_default().push(m.score_features(text, &feats[id.as_str()])?);
                }
            }
            let pooled: Vec<f64> = groups.values().flatten().copied().collect();
            let smoothing = if exact_bleu { Smoothing::Exact } else { Smoothing::Epsilon };
            let mut report = score_report(&cands, &ref_sets, scorer.as_ref().map(|_| pooled.as_slice()), smoothing)?;
            if per_audio && scorer.is_some() {
                let v = v_score_per_audio(&groups.into_values().collect::<Vec<_>>())?;
                let h = h_score(report.bleu, v);
                report.v_score = Some(v);
                report.h_score = Some(h.score);
                report.h_score_clamped = h.clamped;
            }
            writeln!(out, "{}", serde_json::to_string_pretty(&report)?)?;
        }
        Command::Correlate { human, metric, cfg } => {
            cfg.fresh()?;
            let h = read_human_scores(&human)?;
            let mut xs = Vec::new();
            let mut ys = Vec::new();
            for (id, v) in read_pairs(&metric)? {
                let y: f64 = v.parse().with_context(|| format!("metric score for {id}"))?;
                let x = h.get(&id).with_context(|| format!("no human scores for `{id}`"))?;
                xs.push(*x);
                ys.push(y);
            }
            let r = pearson(&xs, &ys)?;
            log_line(&mut out, &serde_json::json!({"pearson": r, "samples": xs.len()}))?;
        }
    }
    Ok(())
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    if let Err(e) = run(Cli::parse()) {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}
