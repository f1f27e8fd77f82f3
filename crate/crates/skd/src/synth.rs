//! Synthetic recognition task.
//!
//! Each of the 27 symbols (a–z and space) owns a random pattern vector.
//! An utterance renders every character of its transcript as 2–4 copies of
//! that character's pattern plus Gaussian noise. Transcripts never start or
//! end with a space and never repeat a symbol back to back, so the frame
//! sequence determines the transcript up to noise.
//!
//! Patterns come from ChaCha8 stream 0 of the seed and utterance `i` from
//! stream `i + 1`; the train/dev/test shuffle uses the last stream.

use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use skd_core::features::FeatureSequence;

use crate::error::{Result, SkdError};
use crate::feature_file;
use crate::manifest::{write_manifest, ManifestRecord};

const SYMBOLS: &[u8; 27] = b"abcdefghijklmnopqrstuvwxyz ";
const SPACE: usize = 26;

#[derive(Debug, Clone, PartialEq)]
pub struct SynthConfig {
    pub utterances: usize,
    /// Transcript length bounds in characters.
    pub min_len: usize,
    pub max_len: usize,
    pub noise_std: f64,
    pub dim: usize,
    pub seed: u64,
    /// Explicit train/dev/test sizes; 80/10/10 when `None`.
    pub split: Option<[usize; 3]>,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            utterances: 100,
            min_len: 4,
            max_len: 10,
            noise_std: 0.3,
            dim: 16,
            seed: 0,
            split: None,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.utterances == 0 {
            return Err(SkdError::Usage("refusing to generate an empty corpus".into()));
        }
        if self.min_len == 0 || self.min_len > self.max_len {
            return Err(SkdError::Usage(format!(
                "need 1 <= min_len <= max_len, got {}..{}",
                self.min_len, self.max_len
            )));
        }
        if self.dim == 0 || !(self.noise_std >= 0.0 && self.noise_std.is_finite()) {
            return Err(SkdError::Usage("dim must be positive and noise_std finite, non-negative".into()));
        }
        if let Some(s) = self.split {
            if s.iter().sum::<usize>() != self.utterances {
                return Err(SkdError::Usage(format!(
                    "split {s:?} does not add up to {} utterances",
                    self.utterances
                )));
            }
        }
        Ok(())
    }

    pub fn split_sizes(&self) -> [usize; 3] {
        self.split.unwrap_or_else(|| {
            let train = self.utterances * 8 / 10;
            let dev = self.utterances / 10;
            [train, dev, self.utterances - train - dev]
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthUtterance {
    pub text: String,
    pub features: FeatureSequence,
}

fn rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(stream);
    r
}

pub fn patterns(dim: usize, seed: u64) -> Vec<Vec<f32>> {
    let mut r = rng(seed, 0);
    (0..SYMBOLS.len())
        .map(|_| {
            (0..dim)
                .map(|_| StandardNormal.sample(&mut r))
                .map(|v: f64| v as f32)
                .collect()
        })
        .collect()
}

pub fn utterance_id(i: usize) -> String {
    format!("utt{i:05}")
}

fn transcript(r: &mut ChaCha8Rng, len: usize) -> Vec<usize> {
    let mut out: Vec<usize> = Vec::with_capacity(len);
    for pos in 0..len {
        let edge = pos == 0 || pos + 1 == len;
        let prev = out.last().copied();
        let allowed: Vec<usize> = (0..SYMBOLS.len())
            .filter(|&s| !(s == SPACE && edge) && Some(s) != prev)
            .collect();
        out.push(allowed[r.random_range(0..allowed.len())]);
    }
    out
}

pub fn generate_utterance(cfg: &SynthConfig, patterns: &[Vec<f32>], i: usize) -> SynthUtterance {
    let mut r = rng(cfg.seed, i as u64 + 1);
    let len = r.random_range(cfg.min_len..=cfg.max_len);
    let symbols = transcript(&mut r, len);
    let noise = Normal::new(0.0, cfg.noise_std).expect("validated noise_std");
    let mut frames = Vec::new();
    for &s in &symbols {
        let repeat = r.random_range(2..=4);
        for _ in 0..repeat {
            frames.extend(patterns[s].iter().map(|&p| p + noise.sample(&mut r) as f32));
        }
    }
    let text = symbols.iter().map(|&s| SYMBOLS[s] as char).collect();
    let n = frames.len() / cfg.dim;
    SynthUtterance {
        text,
        features: FeatureSequence::new(utterance_id(i), n, cfg.dim, frames).expect("finite frames"),
    }
}

pub fn generate(cfg: &SynthConfig) -> Result<Vec<SynthUtterance>> {
    cfg.validate()?;
    let p = patterns(cfg.dim, cfg.seed);
    Ok((0..cfg.utterances).map(|i| generate_utterance(cfg, &p, i)).collect())
}

/// Utterance indices of the train, dev and test parts, each ascending.
pub fn split_indices(cfg: &SynthConfig) -> [Vec<usize>; 3] {
    let mut order: Vec<usize> = (0..cfg.utterances).collect();
    let mut r = rng(cfg.seed, u64::MAX);
    for i in (1..order.len()).rev() {
        let j = r.random_range(0..=i);
        order.swap(i, j);
    }
    let [a, b, _] = cfg.split_sizes();
    let mut parts = [order[..a].to_vec(), order[a..a + b].to_vec(), order[a + b..].to_vec()];
    for p in &mut parts {
        p.sort_unstable();
    }
    parts
}

pub const SPLIT_NAMES: [&str; 3] = ["train", "dev", "test"];

/// Writes `features/*.skdf` and `{train,dev,test}.jsonl` under `dir`;
/// returns the written paths.
pub fn write_corpus(dir: &Path, cfg: &SynthConfig) -> Result<Vec<PathBuf>> {
    let utts = generate(cfg)?;
    let feat_dir = dir.join("features");
    fs::create_dir_all(&feat_dir).map_err(SkdError::io(&feat_dir))?;
    let mut written = Vec::new();
    for u in &utts {
        let p = feat_dir.join(format!("{}.skdf", u.features.id));
        feature_file::write(&p, &u.features)?;
        written.push(p);
    }
    for (name, idx) in SPLIT_NAMES.iter().zip(split_indices(cfg)) {
        let records: Vec<ManifestRecord> = idx
            .iter()
            .map(|&i| ManifestRecord {
                id: utts[i].features.id.clone(),
                features: Some(format!("features/{}.skdf", utts[i].features.id)),
                audio: None,
                text: utts[i].text.clone(),
            })
            .collect();
        let p = dir.join(format!("{name}.jsonl"));
        write_manifest(&p, &records)?;
        written.push(p);
    }
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_split_is_80_10_10() {
        let cfg = SynthConfig::default();
        let parts = split_indices(&cfg);
        assert_eq!(parts.each_ref().map(Vec::len), [80, 10, 10]);
        let mut all: Vec<usize> = parts.concat();
        all.sort_unstable();
        assert_eq!(all, (0..100).collect::<Vec<_>>());
    }

    #[test]
    fn transcripts_are_well_formed() {
        let cfg = SynthConfig { utterances: 300, min_len: 1, max_len: 12, ..SynthConfig::default() };
        for u in generate(&cfg).unwrap() {
            let t = &u.text;
            assert!((1..=12).contains(&t.len()));
            assert!(!t.starts_with(' ') && !t.ends_with(' '));
            assert!(t.as_bytes().windows(2).all(|w| w[0] != w[1]));
            let n = u.features.num_frames();
            assert!(n >= 2 * t.len() && n <= 4 * t.len());
        }
    }

    #[test]
    fn noiseless_frames_repeat_patterns() {
        let cfg = SynthConfig { noise_std: 0.0, utterances: 5, ..SynthConfig::default() };
        let p = patterns(cfg.dim, cfg.seed);
        let u = generate_utterance(&cfg, &p, 3);
        let first = SYMBOLS.iter().position(|&c| c == u.text.as_bytes()[0]).unwrap();
        assert_eq!(u.features.frame(0), p[first].as_slice());
        assert_eq!(u.features.frame(1), p[first].as_slice());
    }

    #[test]
    fn generation_is_a_function_of_the_seed() {
        let cfg = SynthConfig::default();
        assert_eq!(generate(&cfg).unwrap(), generate(&cfg).unwrap());
        let other = SynthConfig { seed: 1, ..cfg.clone() };
        assert_ne!(generate(&cfg).unwrap()[0], generate(&other).unwrap()[0]);
    }

    #[test]
    fn bad_configs_are_refused() {
        assert!(SynthConfig { utterances: 0, ..SynthConfig::default() }.validate().is_err());
        assert!(SynthConfig { min_len: 5, max_len: 4, ..SynthConfig::default() }.validate().is_err());
        assert!(SynthConfig { split: Some([1, 2, 3]), ..SynthConfig::default() }.validate().is_err());
    }
}
