use serde::Serialize;
use skd_core::metrics::EvalReport;

#[derive(Serialize)]
struct Line<'a> {
    id: &'a str,
    reference: &'a str,
    hypothesis: &'a str,
    cer: f64,
    wer: f64,
}

/// One JSON line per utterance followed by the `CER=… WER=…` summary.
pub fn render(report: &EvalReport) -> String {
    let mut out = String::new();
    for u in &report.utterances {
        let line = Line {
            id: &u.id,
            reference: &u.reference,
            hypothesis: &u.hypothesis,
            cer: u.cer(),
            wer: u.wer(),
        };
        out.push_str(&serde_json::to_string(&line).expect("serializable score"));
        out.push('\n');
    }
    out.push_str(&report.summary());
    out.push('\n');
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use skd_core::metrics::UtteranceScore;

    #[test]
    fn summary_is_the_last_line() {
        let r = EvalReport::new(vec![
            UtteranceScore::new("a", "the cat", "the bat"),
            UtteranceScore::new("b", "sat", "sat"),
        ])
        .unwrap();
        let text = render(&r);
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), 3);
        assert!(lines[0].starts_with("{\"id\":\"a\""));
        assert_eq!(lines[2], "CER=10.0% WER=33.3%");
    }
}
