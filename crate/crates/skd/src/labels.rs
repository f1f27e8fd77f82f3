//! Pseudo-label files: one JSON line per utterance,
//! `{id, hypotheses: [{tokens, log_prob}], provenance}`.
//!
//! Tokens are rendered as vocabulary characters without the final eos.

use std::path::Path;

use serde::{Deserialize, Serialize};
use skd_core::decoding::Hypothesis;
use skd_core::distill::{Provenance, PseudoLabelEntry, PseudoLabelSet};
use skd_core::vocab::{Vocabulary, EOS};

use crate::binio::{read, write_atomic};
use crate::error::{Result, SkdError};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct ProvenanceRecord {
    teacher: String,
    beam_size: usize,
    top_k: usize,
    max_len: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct HypothesisRecord {
    tokens: String,
    log_prob: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Line {
    id: String,
    hypotheses: Vec<HypothesisRecord>,
    provenance: ProvenanceRecord,
}

fn render(tokens: &[usize]) -> String {
    let vocab = Vocabulary;
    tokens
        .iter()
        .take_while(|&&t| t != EOS)
        .filter_map(|&t| vocab.char_of(t))
        .collect()
}

pub fn encode(set: &PseudoLabelSet) -> String {
    let p = &set.provenance;
    let provenance = ProvenanceRecord {
        teacher: p.teacher.clone(),
        beam_size: p.beam_size,
        top_k: p.top_k,
        max_len: p.max_len,
    };
    let mut out = String::new();
    for e in &set.entries {
        let line = Line {
            id: e.id.clone(),
            hypotheses: e
                .hypotheses
                .iter()
                .map(|h| HypothesisRecord {
                    tokens: render(&h.tokens),
                    log_prob: h.log_prob,
                })
                .collect(),
            provenance: provenance.clone(),
        };
        out.push_str(&serde_json::to_string(&line).expect("serializable labels"));
        out.push('\n');
    }
    out
}

pub fn decode(path: &Path, text: &str) -> Result<PseudoLabelSet> {
    let vocab = Vocabulary;
    let mut entries = Vec::new();
    let mut provenance: Option<ProvenanceRecord> = None;
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let err = |message: String| SkdError::Record {
            path: path.to_path_buf(),
            line: i + 1,
            message,
        };
        let rec: Line = serde_json::from_str(line).map_err(|e| err(e.to_string()))?;
        match &provenance {
            None => provenance = Some(rec.provenance.clone()),
            Some(p) if *p != rec.provenance => {
                return Err(err("provenance differs from earlier lines".into()))
            }
            _ => {}
        }
        let hypotheses = rec
            .hypotheses
            .iter()
            .map(|h| {
                Ok(Hypothesis {
                    tokens: vocab.parse_rendered(&h.tokens).map_err(|e| err(e.to_string()))?,
                    log_prob: h.log_prob,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        entries.push(PseudoLabelEntry { id: rec.id, hypotheses });
    }
    let p = provenance.ok_or_else(|| SkdError::Record {
        path: path.to_path_buf(),
        line: 0,
        message: "no pseudo-label records".into(),
    })?;
    Ok(PseudoLabelSet {
        entries,
        provenance: Provenance {
            teacher: p.teacher,
            beam_size: p.beam_size,
            top_k: p.top_k,
            max_len: p.max_len,
        },
    })
}

pub fn write(path: &Path, set: &PseudoLabelSet) -> Result<()> {
    write_atomic(path, encode(set).as_bytes())
}

pub fn read_labels(path: &Path) -> Result<PseudoLabelSet> {
    let bytes = read(path)?;
    let text = String::from_utf8(bytes).map_err(|e| SkdError::Record {
        path: path.to_path_buf(),
        line: 0,
        message: e.to_string(),
    })?;
    decode(path, &text)
}

#[cfg(test)]
mod tests {
    use super::*;
    use skd_core::vocab::SOS;

    #[test]
    fn round_trip_keeps_tokens_and_scores() {
        let set = PseudoLabelSet {
            entries: vec![
                PseudoLabelEntry {
                    id: "a".into(),
                    hypotheses: vec![
                        Hypothesis { tokens: vec![7, 2, 8, EOS], log_prob: -0.123456789012345 },
                        Hypothesis { tokens: vec![SOS, 3, EOS], log_prob: -7.5 },
                    ],
                },
                PseudoLabelEntry { id: "b".into(), hypotheses: vec![] },
            ],
            provenance: Provenance { teacher: "d1".into(), beam_size: 5, top_k: 2, max_len: None },
        };
        let text = encode(&set);
        assert!(text.lines().next().unwrap().contains("\"tokens\":\"c d\""));
        assert_eq!(decode(Path::new("l"), &text).unwrap(), set);
    }
}
