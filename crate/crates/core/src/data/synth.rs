//! Deterministic toy corpus: tonal songs and filler comments that carry a
//! song-specific marker character.

use std::f64::consts::TAU;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;

use super::{split_clips, write_comments, write_waveform, Clip, Comment, Result, Waveform};
use crate::rng::seeded;

const FILLER: &[&str] = &[
    "nice", "song", "love", "this", "tune", "so", "good", "play", "again", "wow", "calm", "best", "ever",
    "feel", "great", "beat", "sound", "deep", "warm", "soft",
];

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SynthConfig {
    pub songs: usize,
    pub clips_per_song: usize,
    pub clip_seconds: f64,
    pub sample_rate: u32,
    pub comments_per_song: usize,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            songs: 4,
            clips_per_song: 10,
            clip_seconds: 1.0,
            sample_rate: 16000,
            comments_per_song: 12,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthCorpus {
    /// `(audio_id, full waveform)` per song.
    pub songs: Vec<(String, Waveform)>,
    pub clips: Vec<Clip>,
    pub comments: Vec<Comment>,
}

impl SynthCorpus {
    /// Writes `audio/<id>.wav` and `comments.jsonl` under `dir`.
    pub fn write_to(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir.join("audio"))?;
        for (id, w) in &self.songs {
            write_waveform(dir.join("audio").join(format!("{id}.wav")), w)?;
        }
        write_comments(dir.join("comments.jsonl"), &self.comments)
    }
}

/// Marker character unique to song `i`.
pub fn song_marker(i: usize) -> char {
    if i < 26 {
        (b'A' + i as u8) as char
    } else {
        char::from_u32(0x3B1 + (i as u32 - 26) % 25).unwrap_or('?')
    }
}

fn song_wave(i: usize, n: usize, rate: u32, rng: &mut impl Rng) -> Vec<f64> {
    let f0 = 400.0 * 1.35f64.powi(i as i32 % 10) * if i >= 10 { 1.07 } else { 1.0 };
    let nyquist = rate as f64 / 2.0;
    let harmonics: Vec<(f64, f64)> = (1..=3)
        .map(|h| (f0 * h as f64, 1.0 / h as f64))
        .filter(|(f, _)| *f < nyquist)
        .collect();
    let total: f64 = harmonics.iter().map(|(_, a)| a).sum();
    let trem = 2.0 + i as f64 * 0.5;
    let phase = rng.gen::<f64>() * TAU;
    (0..n)
        .map(|t| {
            let time = t as f64 / rate as f64;
            let tone: f64 = harmonics
                .iter()
                .map(|(f, a)| a * (TAU * f * time + phase).sin())
                .sum::<f64>()
                / total;
            let env = 0.6 + 0.3 * (TAU * trem * time).sin();
            (0.9 * env * tone).clamp(-0.9, 0.9)
        })
        .collect()
}

fn comment_text(marker: char, rng: &mut impl Rng) -> String {
    let target = rng.gen_range(10..=40);
    let mut s = String::new();
    while s.chars().count() < target {
        if !s.is_empty() {
            s.push(' ');
        }
        if rng.gen_bool(0.35) {
            s.push(marker);
        } else {
            s.push_str(FILLER.choose(rng).expect("filler nonempty"));
        }
    }
    if !s.contains(marker) {
        s.push(' ');
        s.push(marker);
    }
    s.chars().take(40).collect::<String>().trim_end().to_string()
}

pub fn synth_corpus(cfg: &SynthConfig) -> SynthCorpus {
    let mut rng = seeded(cfg.seed);
    let n = (cfg.clip_seconds * cfg.sample_rate as f64).round() as usize * cfg.clips_per_song;
    let mut songs = Vec::with_capacity(cfg.songs);
    let mut clips = Vec::new();
    let mut comments = Vec::new();
    for i in 0..cfg.songs {
        let id = format!("song{i:03}");
        let w = Waveform::new(song_wave(i, n, cfg.sample_rate, &mut rng), cfg.sample_rate)
            .expect("synthetic samples stay in range");
        for (k, c) in split_clips(&w, cfg.clip_seconds).into_iter().enumerate() {
            clips.push(Clip {
                audio_id: id.clone(),
                index: k,
                waveform: c,
            });
        }
        let marker = song_marker(i);
        for _ in 0..cfg.comments_per_song {
            comments.push(Comment {
                audio_id: id.clone(),
                text: comment_text(marker, &mut rng),
                votes: rng.gen_range(0..=30),
            });
        }
        songs.push((id, w));
    }
    SynthCorpus { songs, clips, comments }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{load_waveform, read_comments};

    #[test]
    fn shape_and_determinism() {
        let cfg = SynthConfig {
            sample_rate: 8000,
            ..Default::default()
        };
        let a = synth_corpus(&cfg);
        assert_eq!(a.clips.len(), 40);
        assert_eq!(a.comments.len(), 48);
        assert_eq!(a, synth_corpus(&cfg));
        for c in &a.comments {
            let n = c.text.chars().count();
            assert!((10..=40).contains(&n), "{n}: {}", c.text);
            let song: usize = c.audio_id[4..].parse().unwrap();
            assert!(c.text.contains(song_marker(song)));
        }
        assert!(a.clips.iter().all(|c| c.waveform.samples().iter().all(|s| s.abs() <= 0.9)));
    }

    #[test]
    fn written_corpus_reads_back() {
        let cfg = SynthConfig {
            songs: 2,
            clips_per_song: 2,
            sample_rate: 4000,
            ..Default::default()
        };
        let c = synth_corpus(&cfg);
        let dir = tempfile::tempdir().unwrap();
        c.write_to(dir.path()).unwrap();
        assert_eq!(read_comments(dir.path().join("comments.jsonl")).unwrap(), c.comments);
        let w = load_waveform(dir.path().join("audio/song001.wav")).unwrap();
        assert_eq!(w.len(), 8000);
        let err = w
            .samples()
            .iter()
            .zip(c.songs[1].1.samples())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        assert!(err < 1e-4);
    }

    /// Energy of `x` at `f` Hz by direct correlation.
    fn power_at(x: &[f64], f: f64, rate: f64) -> f64 {
        let (mut re, mut im) = (0.0, 0.0);
        for (t, v) in x.iter().enumerate() {
            let w = TAU * f * t as f64 / rate;
            re += v * w.cos();
            im += v * w.sin();
        }
        (re * re + im * im) / (x.len() as f64).powi(2)
    }

    #[test]
    fn each_song_peaks_at_its_own_fundamental() {
        let cfg = SynthConfig {
            songs: 12,
            clips_per_song: 1,
            ..Default::default()
        };
        let c = synth_corpus(&cfg);
        let f0 = |i: usize| 400.0 * 1.35f64.powi(i as i32 % 10) * if i >= 10 { 1.07 } else { 1.0 };
        for (i, (_, w)) in c.songs.iter().enumerate() {
            let own = power_at(w.samples(), f0(i), 16000.0);
            for j in (0..12).filter(|&j| j != i) {
                let other = power_at(w.samples(), f0(j), 16000.0);
                // Harmonic collisions aside, a foreign fundamental carries
                // far less energy.
                if (1..=3).any(|h| (f0(j) - h as f64 * f0(i)).abs() < 2.0) {
                    continue;
                }
                assert!(own > 20.0 * other, "song {i} vs fundamental of {j}: {own:e} vs {other:e}");
            }
        }
    }
}
