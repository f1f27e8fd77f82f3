//! 16-bit mono 16 kHz PCM WAV files.

use std::path::Path;

use crate::error::{Result, SkdError};

pub const SAMPLE_RATE: u32 = 16_000;

/// Samples scaled to [-1, 1).
pub fn read_wav(path: &Path) -> Result<Vec<f32>> {
    let wav_err = |source| SkdError::Wav {
        path: path.to_path_buf(),
        source,
    };
    let mut reader = hound::WavReader::open(path).map_err(wav_err)?;
    let spec = reader.spec();
    if spec.sample_rate != SAMPLE_RATE
        || spec.channels != 1
        || spec.bits_per_sample != 16
        || spec.sample_format != hound::SampleFormat::Int
    {
        return Err(SkdError::Usage(format!(
            "{}: found {} Hz, {} channel(s), {}-bit {:?}; expected 16000 Hz mono 16-bit PCM",
            path.display(),
            spec.sample_rate,
            spec.channels,
            spec.bits_per_sample,
            spec.sample_format
        )));
    }
    reader
        .samples::<i16>()
        .map(|s| s.map(|v| v as f32 / 32768.0).map_err(wav_err))
        .collect()
}

/// Writes samples in [-1, 1] as 16-bit mono 16 kHz PCM.
pub fn write_wav(path: &Path, samples: &[f32]) -> Result<()> {
    let wav_err = |source| SkdError::Wav {
        path: path.to_path_buf(),
        source,
    };
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: SAMPLE_RATE,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let mut w = hound::WavWriter::create(path, spec).map_err(wav_err)?;
    for &s in samples {
        let v = (s * 32768.0).round().clamp(-32768.0, 32767.0) as i16;
        w.write_sample(v).map_err(wav_err)?;
    }
    w.finalize().map_err(wav_err)
}
