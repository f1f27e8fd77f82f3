//! Magnitude STFT: 20 ms periodic Hann windows with a 10 ms hop at 16 kHz.

use std::f64::consts::PI;

use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use skd_core::features::FeatureSequence;

use crate::error::{Result, SkdError};

pub const WINDOW: usize = 320;
pub const HOP: usize = 160;
pub const BINS: usize = WINDOW / 2 + 1;

/// `floor((n − 320) / 160) + 1`, or `None` below one window.
pub fn frame_count(samples: usize) -> Option<usize> {
    (samples >= WINDOW).then(|| (samples - WINDOW) / HOP + 1)
}

fn hann() -> Vec<f64> {
    (0..WINDOW)
        .map(|n| 0.5 - 0.5 * (2.0 * PI * n as f64 / WINDOW as f64).cos())
        .collect()
}

/// Unnormalized magnitude spectrogram, `S × 161` row-major.
pub fn magnitude_spectrogram(samples: &[f32]) -> Result<(usize, Vec<f64>)> {
    let frames = frame_count(samples.len()).ok_or_else(|| {
        SkdError::Usage(format!(
            "{} samples is shorter than one {WINDOW}-sample window",
            samples.len()
        ))
    })?;
    let window = hann();
    let fft = FftPlanner::<f64>::new().plan_fft_forward(WINDOW);
    let mut buf = vec![Complex::new(0.0, 0.0); WINDOW];
    let mut out = Vec::with_capacity(frames * BINS);
    for f in 0..frames {
        let start = f * HOP;
        for (i, b) in buf.iter_mut().enumerate() {
            *b = Complex::new(samples[start + i] as f64 * window[i], 0.0);
        }
        fft.process(&mut buf);
        out.extend(buf[..BINS].iter().map(|c| c.norm()));
    }
    Ok((frames, out))
}

/// Per-bin mean and variance normalization over the frames of one
/// utterance. Bins with zero variance are only centered.
pub fn normalize(frames: usize, values: &mut [f64]) {
    for b in 0..BINS {
        let col = |f: usize| f * BINS + b;
        let mean = (0..frames).map(|f| values[col(f)]).sum::<f64>() / frames as f64;
        let var = (0..frames)
            .map(|f| (values[col(f)] - mean).powi(2))
            .sum::<f64>()
            / frames as f64;
        let sd = var.sqrt();
        let scale = if sd > 1e-10 { 1.0 / sd } else { 1.0 };
        for f in 0..frames {
            values[col(f)] = (values[col(f)] - mean) * scale;
        }
    }
}

/// Normalized 161-bin features for one utterance.
pub fn stft_features(id: &str, samples: &[f32]) -> Result<FeatureSequence> {
    let (frames, mut values) = magnitude_spectrogram(samples)?;
    normalize(frames, &mut values);
    let data = values.into_iter().map(|v| v as f32).collect();
    Ok(FeatureSequence::new(id, frames, BINS, data)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sine(freq: f64, n: usize) -> Vec<f32> {
        (0..n)
            .map(|i| (2.0 * PI * freq * i as f64 / 16_000.0).sin() as f32)
            .collect()
    }

    fn peak_bin(frames: usize, spec: &[f64]) -> Vec<usize> {
        (0..frames)
            .map(|f| {
                let row = &spec[f * BINS..(f + 1) * BINS];
                (0..BINS).fold(0, |best, i| if row[i] > row[best] { i } else { best })
            })
            .collect()
    }

    #[test]
    fn frame_count_formula() {
        assert_eq!(frame_count(320), Some(1));
        assert_eq!(frame_count(480), Some(2));
        assert_eq!(frame_count(16_000), Some(99));
        assert_eq!(frame_count(319), None);
    }

    #[test]
    fn bin_centres_peak_at_their_bin() {
        for k in 1..=20 {
            let (frames, spec) = magnitude_spectrogram(&sine(50.0 * k as f64, 1600)).unwrap();
            assert!(peak_bin(frames, &spec).iter().all(|&b| b == k), "k = {k}");
        }
    }

    #[test]
    fn silence_is_zero() {
        let (frames, spec) = magnitude_spectrogram(&[0.0; 800]).unwrap();
        assert_eq!(frames, 4);
        assert!(spec.iter().all(|&v| v == 0.0));
        let f = stft_features("z", &[0.0; 800]).unwrap();
        assert!(f.frames().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn normalized_bins_have_zero_mean_unit_variance() {
        let samples: Vec<f32> = (0..4000).map(|i| ((i * 7919) % 1000) as f32 / 1000.0 - 0.5).collect();
        let f = stft_features("n", &samples).unwrap();
        let s = f.num_frames();
        for b in [3, 80, 160] {
            let col: Vec<f64> = (0..s).map(|t| f.frame(t)[b] as f64).collect();
            let mean = col.iter().sum::<f64>() / s as f64;
            let var = col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / s as f64;
            assert!(mean.abs() < 1e-5 && (var - 1.0).abs() < 1e-4);
        }
    }

    #[test]
    fn too_short_input_is_rejected() {
        assert!(magnitude_spectrogram(&[0.0; 100]).is_err());
    }
}
