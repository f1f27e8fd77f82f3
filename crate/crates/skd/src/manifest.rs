//! JSONL manifests: one `{id, features | audio, text}` record per line.
//! Relative paths resolve against the manifest's directory.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use skd_core::distill::Utterance;
use skd_core::exec::Executor;
use skd_core::vocab::Vocabulary;

use crate::binio::{read, write_atomic};
use crate::error::{Result, SkdError};
use crate::{feature_file, stft, wav};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestRecord {
    pub id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub features: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub audio: Option<String>,
    pub text: String,
}

pub fn read_manifest(path: &Path) -> Result<Vec<ManifestRecord>> {
    let text = String::from_utf8(read(path)?).map_err(|e| SkdError::Record {
        path: path.to_path_buf(),
        line: 0,
        message: e.to_string(),
    })?;
    let mut seen = BTreeSet::new();
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let err = |message: String| SkdError::Record {
            path: path.to_path_buf(),
            line: i + 1,
            message,
        };
        let rec: ManifestRecord = serde_json::from_str(line).map_err(|e| err(e.to_string()))?;
        if rec.features.is_some() == rec.audio.is_some() {
            return Err(err("exactly one of `features` and `audio` is required".into()));
        }
        if !seen.insert(rec.id.clone()) {
            return Err(err(format!("duplicate id {}", rec.id)));
        }
        out.push(rec);
    }
    Ok(out)
}

pub fn write_manifest(path: &Path, records: &[ManifestRecord]) -> Result<()> {
    let mut out = String::new();
    for r in records {
        out.push_str(&serde_json::to_string(r).expect("serializable record"));
        out.push('\n');
    }
    write_atomic(path, out.as_bytes())
}

fn resolve(manifest: &Path, rel: &str) -> PathBuf {
    let p = Path::new(rel);
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        manifest.parent().unwrap_or(Path::new(".")).join(p)
    }
}

/// Loads features and tokenized transcripts for every record.
pub fn load_dataset<E: Executor>(path: &Path, exec: &E) -> Result<Vec<Utterance>> {
    let records = read_manifest(path)?;
    let vocab = Vocabulary;
    let loaded = exec.map(&records, |i, rec| -> Result<Utterance> {
        let target = vocab.tokenize(&rec.text).map_err(|e| SkdError::Record {
            path: path.to_path_buf(),
            line: i + 1,
            message: format!("{}: {e}", rec.id),
        })?;
        let features = match (&rec.features, &rec.audio) {
            (Some(f), _) => feature_file::read_features(&resolve(path, f), &rec.id)?,
            (None, Some(a)) => stft::stft_features(&rec.id, &wav::read_wav(&resolve(path, a))?)?,
            (None, None) => unreachable!("checked when reading"),
        };
        Ok(Utterance {
            features: Arc::new(features),
            target,
        })
    });
    loaded.into_iter().collect()
}
