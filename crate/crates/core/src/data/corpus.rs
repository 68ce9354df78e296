use std::collections::BTreeMap;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;

use super::{Comment, DataError, PairedSample, Result, TokenSequence, Tokenizer, Vocabulary, Waveform};
use crate::rng::seeded;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PrepareConfig {
    pub min_len: usize,
    pub max_len: usize,
    /// Comments with strictly more votes than this are duplicated.
    pub vote_threshold: u64,
    pub dup_factor: usize,
}

impl Default for PrepareConfig {
    fn default() -> Self {
        Self {
            min_len: 10,
            max_len: 50,
            vote_threshold: 10,
            dup_factor: 10,
        }
    }
}

/// Drops comments whose token count falls outside `[min_len, max_len]` and
/// repeats each high-vote comment `dup_factor` times.
pub fn prepare_comments(comments: &[Comment], tokenizer: &Tokenizer, cfg: &PrepareConfig) -> Vec<Comment> {
    let mut out = Vec::with_capacity(comments.len());
    for c in comments {
        let n = tokenizer.count(&c.text);
        if n < cfg.min_len || n > cfg.max_len {
            continue;
        }
        let copies = if c.votes > cfg.vote_threshold { cfg.dup_factor } else { 1 };
        out.extend(std::iter::repeat_n(c.clone(), copies));
    }
    out
}

/// A fixed-length window of one song.
#[derive(Debug, Clone, PartialEq)]
pub struct Clip {
    pub audio_id: String,
    pub index: usize,
    pub waveform: Waveform,
}

impl Clip {
    pub fn id(&self) -> String {
        format!("{}#{:04}", self.audio_id, self.index)
    }
}

/// Dense song labels in sorted audio-id order.
pub fn song_labels<'a>(audio_ids: impl IntoIterator<Item = &'a str>) -> BTreeMap<String, usize> {
    let mut ids: Vec<&str> = audio_ids.into_iter().collect();
    ids.sort_unstable();
    ids.dedup();
    ids.into_iter().enumerate().map(|(i, s)| (s.to_string(), i)).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum SplitMode {
    /// One shuffle over all samples.
    #[default]
    Global,
    /// 80/10/10 inside every song.
    PerSong,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SplitConfig {
    pub seed: u64,
    pub mode: SplitMode,
    /// Token cap for comment sequences, EOS included.
    pub max_len: usize,
}

impl Default for SplitConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            mode: SplitMode::Global,
            max_len: 50,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Splits {
    pub train: Vec<PairedSample>,
    pub valid: Vec<PairedSample>,
    pub test: Vec<PairedSample>,
}

impl Splits {
    pub fn len(&self) -> usize {
        self.train.len() + self.valid.len() + self.test.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// `(round(0.8 n), round(0.1 n), remainder)` with halves rounded up.
pub(crate) fn split_sizes(n: usize) -> (usize, usize, usize) {
    let train = (n * 8 + 5) / 10;
    let valid = ((n + 5) / 10).min(n - train);
    (train, valid, n - train - valid)
}

/// Pairs every clip with a uniformly drawn comment of its song (after
/// duplication, so high-vote comments are drawn more often), then splits
/// 80/10/10. Deterministic for a given seed.
pub fn pair_and_split(
    clips: &[Clip],
    comments: &[Comment],
    vocab: &Vocabulary,
    cfg: &SplitConfig,
) -> Result<Splits> {
    let mut by_song: BTreeMap<&str, Vec<&Comment>> = BTreeMap::new();
    for c in comments {
        by_song.entry(c.audio_id.as_str()).or_default().push(c);
    }
    let labels = song_labels(clips.iter().map(|c| c.audio_id.as_str()));
    let mut order: Vec<&Clip> = clips.iter().collect();
    order.sort_by_key(|c| (c.audio_id.clone(), c.index));
    let mut rng = seeded(cfg.seed);
    let mut samples = Vec::with_capacity(order.len());
    for clip in order {
        let pool = by_song
            .get(clip.audio_id.as_str())
            .filter(|p| !p.is_empty())
            .ok_or_else(|| DataError::NoComments {
                audio_id: clip.audio_id.clone(),
                clip: clip.id(),
            })?;
        let pick = pool[rng.gen_range(0..pool.len())];
        let body = vocab.encode(&pick.text);
        samples.push(PairedSample {
            id: clip.id(),
            audio_id: clip.audio_id.clone(),
            clip: clip.waveform.clone(),
            text: pick.text.clone(),
            comment: TokenSequence::from_body(&body, cfg.max_len),
            song_label: labels[&clip.audio_id],
        });
    }
    let groups: Vec<Vec<PairedSample>> = match cfg.mode {
        SplitMode::Global => vec![samples],
        SplitMode::PerSong => {
            let mut g: BTreeMap<usize, Vec<PairedSample>> = BTreeMap::new();
            for s in samples {
                g.entry(s.song_label).or_default().push(s);
            }
            g.into_values().collect()
        }
    };
    let mut splits = Splits::default();
    for mut group in groups {
        group.shuffle(&mut rng);
        let (n_train, n_valid, _) = split_sizes(group.len());
        let test = group.split_off(n_train + n_valid);
        let valid = group.split_off(n_train);
        splits.train.extend(group);
        splits.valid.extend(valid);
        splits.test.extend(test);
    }
    Ok(splits)
}

pub fn read_comments(path: impl AsRef<Path>) -> Result<Vec<Comment>> {
    let f = std::fs::File::open(path)?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let c: Comment = serde_json::from_str(&line).map_err(|e| DataError::Parse {
            line: i + 1,
            reason: e.to_string(),
        })?;
        out.push(c);
    }
    Ok(out)
}

pub fn write_comments(path: impl AsRef<Path>, comments: &[Comment]) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    for c in comments {
        writeln!(f, "{}", serde_json::to_string(c).expect("comment serialises"))?;
    }
    f.flush()?;
    Ok(())
}

pub fn write_manifest(path: impl AsRef<Path>, ids: impl IntoIterator<Item = impl AsRef<str>>) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    for id in ids {
        writeln!(f, "{}", id.as_ref())?;
    }
    f.flush()?;
    Ok(())
}

pub fn read_manifest(path: impl AsRef<Path>) -> Result<Vec<String>> {
    Ok(std::fs::read_to_string(path)?
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .map(String::from)
        .collect())
}
