//! Paired corpus in memory and its on-disk prepared form.

use std::collections::BTreeMap;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{
    load_waveform, pair_and_split, prepare_comments, read_comments, read_manifest, split_clips, write_manifest, Clip,
    Comment, DataError, PairedSample, PrepareConfig, SplitConfig, Splits, TokenSequence, Tokenizer, Vocabulary,
};

use super::{TrainError, TrainingConfig};

#[derive(Debug, Clone)]
pub struct Dataset {
    pub vocab: Vocabulary,
    pub splits: Splits,
    pub songs: usize,
    /// Mean comment length (tokens, EOS excluded) over the training split.
    pub mean_train_len: f64,
}

impl Dataset {
    pub fn from_parts(clips: &[Clip], comments: &[Comment], cfg: &TrainingConfig) -> Result<Self, TrainError> {
        let tokenizer = Tokenizer::new(cfg.token_mode, cfg.script);
        let kept = prepare_comments(
            comments,
            &tokenizer,
            &PrepareConfig {
                min_len: cfg.min_len,
                max_len: cfg.max_len,
                vote_threshold: cfg.vote_threshold,
                dup_factor: cfg.dup_factor,
            },
        );
        let vocab = Vocabulary::build(kept.iter().map(|c| c.text.as_str()), tokenizer)?;
        let splits = pair_and_split(
            clips,
            &kept,
            &vocab,
            &SplitConfig {
                seed: cfg.seed,
                mode: cfg.split,
                max_len: cfg.max_len,
            },
        )?;
        Self::from_splits(vocab, splits)
    }

    pub fn from_splits(vocab: Vocabulary, splits: Splits) -> Result<Self, TrainError> {
        if splits.train.is_empty() {
            return Err(TrainError::Data(DataError::Invalid("empty training split".into())));
        }
        let songs = splits
            .train
            .iter()
            .chain(&splits.valid)
            .chain(&splits.test)
            .map(|s| s.song_label + 1)
            .max()
            .unwrap_or(0);
        let mean_train_len =
            splits.train.iter().map(|s| s.comment.body().len() as f64).sum::<f64>() / splits.train.len() as f64;
        Ok(Self {
            vocab,
            splits,
            songs,
            mean_train_len,
        })
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct PairRecord {
    id: String,
    audio_id: String,
    clip: usize,
    text: String,
    song_label: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct PreparedInfo {
    data_dir: PathBuf,
    clip_seconds: f64,
    max_len: usize,
}

/// Clips of every `audio/*.wav` under `data_dir`, in sorted file order.
pub fn load_clips(data_dir: &Path, clip_seconds: f64) -> Result<Vec<Clip>, TrainError> {
    let mut wavs: Vec<PathBuf> = std::fs::read_dir(data_dir.join("audio"))
        .map_err(DataError::from)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "wav"))
        .collect();
    wavs.sort();
    let mut clips = Vec::new();
    for p in wavs {
        let audio_id = p.file_stem().and_then(|s| s.to_str()).unwrap_or_default().to_string();
        let w = load_waveform(&p)?;
        for (index, waveform) in split_clips(&w, clip_seconds).into_iter().enumerate() {
            clips.push(Clip {
                audio_id: audio_id.clone(),
                index,
                waveform,
            });
        }
    }
    Ok(clips)
}

/// Reads `data_dir/{audio/*.wav, comments.jsonl}`, pairs and splits, and
/// writes `vocab.json`, `pairs.jsonl`, `{train,valid,test}.txt` and
/// `prepared.json` to `out_dir`.
pub fn prepare(data_dir: &Path, out_dir: &Path, cfg: &TrainingConfig) -> Result<Dataset, TrainError> {
    let clips = load_clips(data_dir, cfg.clip_seconds)?;
    let comments = read_comments(data_dir.join("comments.jsonl"))?;
    let ds = Dataset::from_parts(&clips, &comments, cfg)?;
    std::fs::create_dir_all(out_dir).map_err(DataError::from)?;
    std::fs::write(out_dir.join("vocab.json"), ds.vocab.to_json()).map_err(DataError::from)?;
    let mut f = std::io::BufWriter::new(std::fs::File::create(out_dir.join("pairs.jsonl")).map_err(DataError::from)?);
    let index: BTreeMap<String, usize> = clips.iter().map(|c| (c.id(), c.index)).collect();
    for (name, set) in [("train", &ds.splits.train), ("valid", &ds.splits.valid), ("test", &ds.splits.test)] {
        for s in set.iter() {
            let rec = PairRecord {
                id: s.id.clone(),
                audio_id: s.audio_id.clone(),
                clip: index[&s.id],
                text: s.text.clone(),
                song_label: s.song_label,
            };
            writeln!(f, "{}", serde_json::to_string(&rec).expect("record serialises")).map_err(DataError::from)?;
        }
        write_manifest(out_dir.join(format!("{name}.txt")), set.iter().map(|s| s.id.as_str()))?;
    }
    f.flush().map_err(DataError::from)?;
    let data_dir = std::fs::canonicalize(data_dir).map_err(DataError::from)?;
    let info = PreparedInfo {
        data_dir,
        clip_seconds: cfg.clip_seconds,
        max_len: cfg.max_len,
    };
    std::fs::write(out_dir.join("prepared.json"), serde_json::to_string_pretty(&info).expect("info serialises"))
        .map_err(DataError::from)?;
    Ok(ds)
}

/// Inverse of [`prepare`]; audio is re-read from the original data directory.
pub fn load_prepared(dir: &Path) -> Result<Dataset, TrainError> {
    let info: PreparedInfo = serde_json::from_str(
        &std::fs::read_to_string(dir.join("prepared.json")).map_err(DataError::from)?,
    )
    .map_err(|e| TrainError::Data(DataError::Invalid(format!("prepared.json: {e}"))))?;
    let vocab = Vocabulary::from_json(&std::fs::read_to_string(dir.join("vocab.json")).map_err(DataError::from)?)?;
    let clips: BTreeMap<String, Clip> = load_clips(&info.data_dir, info.clip_seconds)?
        .into_iter()
        .map(|c| (c.id(), c))
        .collect();
    let mut records: BTreeMap<String, PairRecord> = BTreeMap::new();
    let f = std::fs::File::open(dir.join("pairs.jsonl")).map_err(DataError::from)?;
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line.map_err(DataError::from)?;
        let rec: PairRecord = serde_json::from_str(&line).map_err(|e| DataError::Parse {
            line: i + 1,
            reason: e.to_string(),
        })?;
        records.insert(rec.id.clone(), rec);
    }
    let build = |name: &str| -> Result<Vec<PairedSample>, TrainError> {
        read_manifest(dir.join(format!("{name}.txt")))?
            .into_iter()
            .map(|id| {
                let rec = records
                    .get(&id)
                    .ok_or_else(|| DataError::Invalid(format!("manifest id {id} has no pair record")))?;
                let clip = clips
                    .get(&id)
                    .ok_or_else(|| DataError::Invalid(format!("clip {id} missing from audio")))?;
                debug_assert_eq!(clip.index, rec.clip);
                Ok(PairedSample {
                    id: id.clone(),
                    audio_id: rec.audio_id.clone(),
                    clip: clip.waveform.clone(),
                    text: rec.text.clone(),
                    comment: TokenSequence::from_body(&vocab.encode(&rec.text), info.max_len),
                    song_label: rec.song_label,
                })
            })
            .collect()
    };
    let splits = Splits {
        train: build("train")?,
        valid: build("valid")?,
        test: build("test")?,
    };
    Dataset::from_splits(vocab, splits)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{synth_corpus, SynthConfig};

    #[test]
    fn prepared_round_trip() {
        let corpus = synth_corpus(&SynthConfig {
            songs: 3,
            clips_per_song: 4,
            sample_rate: 8000,
            ..Default::default()
        });
        let dir = tempfile::tempdir().unwrap();
        let data = dir.path().join("data");
        corpus.write_to(&data).unwrap();
        let cfg = TrainingConfig::desk();
        let a = prepare(&data, &dir.path().join("prep"), &cfg).unwrap();
        let b = load_prepared(&dir.path().join("prep")).unwrap();
        assert_eq!(a.vocab, b.vocab);
        assert_eq!(a.songs, 3);
        assert_eq!(a.splits.train.len(), 10);
        let ids = |d: &Dataset| d.splits.train.iter().map(|s| (s.id.clone(), s.comment.clone())).collect::<Vec<_>>();
        assert_eq!(ids(&a), ids(&b));
        // WAV quantisation: clips agree to 16-bit precision.
        let diff = a.splits.train[0]
            .clip
            .samples()
            .iter()
            .zip(b.splits.train[0].clip.samples())
            .map(|(x, y)| (x - y).abs())
            .fold(0.0, f64::max);
        assert!(diff < 1e-4);
        assert!(a.mean_train_len >= 9.0 && a.mean_train_len <= 40.0);
    }
}
