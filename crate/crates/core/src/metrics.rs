//! Levenshtein alignment, CER and WER.

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use core::ops::AddAssign;

use crate::error::{Error, Result};

/// Edit counts from one optimal alignment of a reference and a hypothesis.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct EditCounts {
    pub substitutions: usize,
    pub deletions: usize,
    pub insertions: usize,
    /// Length of the reference.
    pub reference: usize,
}

impl EditCounts {
    pub fn distance(&self) -> usize {
        self.substitutions + self.deletions + self.insertions
    }

    /// Errors per reference symbol in percent; `None` for an empty reference.
    pub fn rate(&self) -> Option<f64> {
        (self.reference > 0).then(|| 100.0 * self.distance() as f64 / self.reference as f64)
    }
}

impl AddAssign for EditCounts {
    fn add_assign(&mut self, o: Self) {
        self.substitutions += o.substitutions;
        self.deletions += o.deletions;
        self.insertions += o.insertions;
        self.reference += o.reference;
    }
}

/// Unit-cost edit distance turning `reference` into `hypothesis`.
///
/// The traceback prefers substitution (or match), then deletion, then
/// insertion, which fixes the reported counts when several alignments are
/// optimal.
pub fn edit_distance<S: PartialEq>(reference: &[S], hypothesis: &[S]) -> EditCounts {
    let (n, m) = (reference.len(), hypothesis.len());
    let w = m + 1;
    let mut d = vec![0usize; (n + 1) * w];
    for i in 0..=n {
        d[i * w] = i;
    }
    for (j, cell) in d[..w].iter_mut().enumerate() {
        *cell = j;
    }
    for i in 1..=n {
        for j in 1..=m {
            let cost = usize::from(reference[i - 1] != hypothesis[j - 1]);
            d[i * w + j] = (d[(i - 1) * w + j - 1] + cost)
                .min(d[(i - 1) * w + j] + 1)
                .min(d[i * w + j - 1] + 1);
        }
    }
    let mut counts = EditCounts {
        reference: n,
        ..EditCounts::default()
    };
    let (mut i, mut j) = (n, m);
    while i > 0 || j > 0 {
        let here = d[i * w + j];
        if i > 0 && j > 0 {
            let cost = usize::from(reference[i - 1] != hypothesis[j - 1]);
            if d[(i - 1) * w + j - 1] + cost == here {
                counts.substitutions += cost;
                i -= 1;
                j -= 1;
                continue;
            }
        }
        if i > 0 && d[(i - 1) * w + j] + 1 == here {
            counts.deletions += 1;
            i -= 1;
        } else {
            counts.insertions += 1;
            j -= 1;
        }
    }
    counts
}

fn words(s: &str) -> Vec<&str> {
    s.split(' ').filter(|w| !w.is_empty()).collect()
}

pub fn char_counts(reference: &str, hypothesis: &str) -> EditCounts {
    let r: Vec<char> = reference.chars().collect();
    let h: Vec<char> = hypothesis.chars().collect();
    edit_distance(&r, &h)
}

pub fn word_counts(reference: &str, hypothesis: &str) -> EditCounts {
    edit_distance(&words(reference), &words(hypothesis))
}

fn percent(c: EditCounts) -> f64 {
    c.rate()
        .unwrap_or(if c.distance() == 0 { 0.0 } else { 100.0 })
}

/// Character error rate in percent, spaces included. An empty reference
/// scores 0 against an empty hypothesis and 100 otherwise.
pub fn cer(reference: &str, hypothesis: &str) -> f64 {
    percent(char_counts(reference, hypothesis))
}

/// Word error rate in percent over space-separated words.
pub fn wer(reference: &str, hypothesis: &str) -> f64 {
    percent(word_counts(reference, hypothesis))
}

#[derive(Debug, Clone, PartialEq)]
pub struct UtteranceScore {
    pub id: String,
    pub reference: String,
    pub hypothesis: String,
    pub chars: EditCounts,
    pub words: EditCounts,
}

impl UtteranceScore {
    pub fn new(id: impl Into<String>, reference: impl Into<String>, hypothesis: impl Into<String>) -> Self {
        let (reference, hypothesis) = (reference.into(), hypothesis.into());
        Self {
            id: id.into(),
            chars: char_counts(&reference, &hypothesis),
            words: word_counts(&reference, &hypothesis),
            reference,
            hypothesis,
        }
    }

    pub fn cer(&self) -> f64 {
        percent(self.chars)
    }

    pub fn wer(&self) -> f64 {
        percent(self.words)
    }
}

/// Per-utterance scores and pooled corpus rates.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub utterances: Vec<UtteranceScore>,
    pub chars: EditCounts,
    pub words: EditCounts,
}

impl EvalReport {
    pub fn new(utterances: Vec<UtteranceScore>) -> Result<Self> {
        let mut chars = EditCounts::default();
        let mut words = EditCounts::default();
        for u in &utterances {
            chars += u.chars;
            words += u.words;
        }
        if chars.reference == 0 {
            return Err(Error::EmptyCorpus);
        }
        Ok(Self {
            utterances,
            chars,
            words,
        })
    }

    /// Total character edits over total reference characters, in percent.
    pub fn cer(&self) -> f64 {
        percent(self.chars)
    }

    pub fn wer(&self) -> f64 {
        percent(self.words)
    }

    /// `CER=x.x% WER=y.y%`
    pub fn summary(&self) -> String {
        alloc::format!("CER={:.1}% WER={:.1}%", self.cer(), self.wer())
    }
}
