use std::path::Path;

use hound::{SampleFormat, WavReader, WavSpec, WavWriter};

use super::{DataError, Result, Waveform};

fn wav_err(path: &Path, reason: impl ToString) -> DataError {
    DataError::Wav {
        path: path.display().to_string(),
        reason: reason.to_string(),
    }
}

/// Reads a mono PCM WAV file, scaling integer samples by `2^(bits-1)`.
pub fn load_waveform(path: impl AsRef<Path>) -> Result<Waveform> {
    let path = path.as_ref();
    let mut reader = WavReader::open(path).map_err(|e| wav_err(path, e))?;
    let spec = reader.spec();
    if spec.channels != 1 {
        return Err(wav_err(path, format!("expected mono, found {} channels", spec.channels)));
    }
    let expected = reader.len() as usize;
    let samples: Vec<f64> = match spec.sample_format {
        SampleFormat::Int => {
            let scale = (1u64 << (spec.bits_per_sample - 1)) as f64;
            reader
                .samples::<i32>()
                .map(|s| s.map(|v| v as f64 / scale))
                .collect::<std::result::Result<_, _>>()
        }
        SampleFormat::Float => reader
            .samples::<f32>()
            .map(|s| s.map(f64::from))
            .collect::<std::result::Result<_, _>>(),
    }
    .map_err(|e| wav_err(path, format!("truncated or unreadable sample data: {e}")))?;
    if samples.len() != expected {
        return Err(wav_err(
            path,
            format!("truncated: header promises {expected} samples, found {}", samples.len()),
        ));
    }
    Waveform::new(samples, spec.sample_rate).map_err(|e| wav_err(path, e))
}

/// Writes 16-bit mono PCM.
pub fn write_waveform(path: impl AsRef<Path>, w: &Waveform) -> Result<()> {
    let path = path.as_ref();
    let spec = WavSpec {
        channels: 1,
        sample_rate: w.sample_rate(),
        bits_per_sample: 16,
        sample_format: SampleFormat::Int,
    };
    let mut out = WavWriter::create(path, spec).map_err(|e| wav_err(path, e))?;
    for &s in w.samples() {
        out.write_sample((s * 32767.0).round() as i16)
            .map_err(|e| wav_err(path, e))?;
    }
    out.finalize().map_err(|e| wav_err(path, e))
}

/// Consecutive non-overlapping clips of `clip_seconds`; a shorter
/// remainder is dropped.
pub fn split_clips(w: &Waveform, clip_seconds: f64) -> Vec<Waveform> {
    let clip_len = (clip_seconds * w.sample_rate() as f64).round() as usize;
    if clip_len == 0 || w.len() < clip_len {
        log::warn!(
            "audio of {:.2}s is shorter than one {clip_seconds}s clip; no clips produced",
            w.duration_secs()
        );
        return Vec::new();
    }
    w.samples()
        .chunks_exact(clip_len)
        .map(|c| Waveform::new(c.to_vec(), w.sample_rate()).expect("range already checked"))
        .collect()
}
