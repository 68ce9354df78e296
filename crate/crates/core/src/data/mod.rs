//! Corpus ingestion: audio, comments, vocabulary, pairing and splits.

mod corpus;
mod synth;
mod vocab;
mod wav;

pub use corpus::{
    pair_and_split, prepare_comments, read_comments, read_manifest, song_labels, write_comments,
    write_manifest, Clip, PrepareConfig, SplitConfig, SplitMode, Splits,
};
pub use synth::{synth_corpus, SynthConfig, SynthCorpus};
pub use vocab::{Script, TokenMode, Tokenizer, Vocabulary, BOS, ENG, EOS, NUM, PAD, RESERVED, UNK};
pub use wav::{load_waveform, split_clips, write_waveform};

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("{path}: {reason}")]
    Wav { path: String, reason: String },
    #[error("sample {index} = {value} outside [-1, 1]")]
    SampleRange { index: usize, value: f64 },
    #[error("sample rate must be positive")]
    SampleRate,
    #[error("vocabulary needs a nonempty corpus")]
    EmptyCorpus,
    #[error("clip {clip} of `{audio_id}` has no comments")]
    NoComments { audio_id: String, clip: String },
    #[error("line {line}: {reason}")]
    Parse { line: usize, reason: String },
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("{0}")]
    Invalid(String),
}

pub type Result<T> = std::result::Result<T, DataError>;

/// Mono audio with samples in [-1, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct Waveform {
    samples: Vec<f64>,
    sample_rate: u32,
}

impl Waveform {
    pub fn new(samples: Vec<f64>, sample_rate: u32) -> Result<Self> {
        if sample_rate == 0 {
            return Err(DataError::SampleRate);
        }
        if let Some((index, &value)) = samples
            .iter()
            .enumerate()
            .find(|(_, v)| !(-1.0..=1.0).contains(*v))
        {
            return Err(DataError::SampleRange { index, value });
        }
        Ok(Self { samples, sample_rate })
    }

    pub fn samples(&self) -> &[f64] {
        &self.samples
    }

    pub fn sample_rate(&self) -> u32 {
        self.sample_rate
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration_secs(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }
}

/// A user comment attached to a song.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Comment {
    pub audio_id: String,
    pub text: String,
    pub votes: u64,
}

/// Token ids of one sentence, ending in EOS unless cut at the length cap.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct TokenSequence(Vec<usize>);

impl TokenSequence {
    /// Appends EOS to `body`, keeping at most `max_len` ids in total; a body
    /// that fills the cap is truncated and carries no EOS.
    pub fn from_body(body: &[usize], max_len: usize) -> Self {
        assert!(max_len >= 1);
        debug_assert!(!body.contains(&EOS), "EOS inside body");
        if body.len() < max_len {
            let mut ids = body.to_vec();
            ids.push(EOS);
            Self(ids)
        } else {
            Self(body[..max_len].to_vec())
        }
    }

    /// Wraps ids as produced by a decoder. Checks the EOS placement.
    pub fn from_ids(ids: Vec<usize>) -> Result<Self> {
        if ids.is_empty() {
            return Err(DataError::Invalid("empty token sequence".into()));
        }
        if let Some(p) = ids.iter().position(|&t| t == EOS) {
            if p + 1 != ids.len() {
                return Err(DataError::Invalid("EOS before the end of a sequence".into()));
            }
        }
        Ok(Self(ids))
    }

    pub fn ids(&self) -> &[usize] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn ends_with_eos(&self) -> bool {
        self.0.last() == Some(&EOS)
    }

    /// Ids without the trailing EOS.
    pub fn body(&self) -> &[usize] {
        if self.ends_with_eos() {
            &self.0[..self.0.len() - 1]
        } else {
            &self.0
        }
    }
}

/// One training example: a clip, a comment of the same song, and the song index.
#[derive(Debug, Clone, PartialEq)]
pub struct PairedSample {
    pub id: String,
    pub audio_id: String,
    pub clip: Waveform,
    pub text: String,
    pub comment: TokenSequence,
    pub song_label: usize,
}
