//! Attribution renderers: ANSI background ramps for terminals and inline
//! HTML spans.

use at2_core::{Example, Span};
use serde::{Deserialize, Serialize};

/// Number of non-zero intensity buckets in the ANSI ramp.
pub const ANSI_STEPS: usize = 8;

/// xterm-256 backgrounds from pale to saturated yellow-orange.
const ANSI_RAMP: [u8; ANSI_STEPS] = [230, 229, 228, 227, 221, 220, 214, 208];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Format {
    Ansi,
    Html,
}

/// Scores plus enough of the example to display them; written by `attribute`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScoresFile {
    pub example_id: String,
    pub target: usize,
    pub method: String,
    pub scores: Vec<f64>,
    pub x: Vec<u32>,
    pub sources: Vec<Span>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub text: Option<at2_core::ExampleText>,
}

impl ScoresFile {
    pub fn new(example: &Example, target: usize, method: &str, scores: Vec<f64>) -> Self {
        ScoresFile {
            example_id: example.id.clone(),
            target,
            method: method.to_string(),
            scores,
            x: example.x.0.clone(),
            sources: example.sources.0.clone(),
            text: example.text.clone(),
        }
    }
}

/// A piece of displayed input: plain text, or the text of source `i`.
#[derive(Debug, Clone, PartialEq)]
pub enum Segment {
    Plain(String),
    Source(usize, String),
}

fn token_text(tokens: &[u32]) -> String {
    tokens
        .iter()
        .map(|t| format!("\u{27e8}{t}\u{27e9}"))
        .collect::<Vec<_>>()
        .join(" ")
}

fn text_fits(text: &at2_core::ExampleText, n_sources: usize) -> bool {
    let mut at = 0;
    text.source_offsets.len() == n_sources
        && text.source_offsets.iter().all(|s| {
            let ok = at <= s.start
                && s.start < s.end
                && s.end <= text.context.len()
                && text.context.is_char_boundary(s.start)
                && text.context.is_char_boundary(s.end);
            at = s.end;
            ok
        })
}

/// Splits the input into plain and source segments, using the attached
/// text when present and `⟨id⟩` tokens otherwise.
pub fn segments(file: &ScoresFile) -> Vec<Segment> {
    let mut out = Vec::new();
    match &file.text {
        Some(text) if text_fits(text, file.sources.len()) => {
            let ctx = &text.context;
            let mut at = 0;
            for (i, span) in text.source_offsets.iter().enumerate() {
                if span.start > at {
                    out.push(Segment::Plain(ctx[at..span.start].to_string()));
                }
                out.push(Segment::Source(i, ctx[span.range()].to_string()));
                at = span.end;
            }
            if at < ctx.len() {
                out.push(Segment::Plain(ctx[at..].to_string()));
            }
        }
        _ => {
            let mut groups: Vec<(Option<usize>, &[u32])> = Vec::new();
            let mut at = 0;
            for (i, span) in file.sources.iter().enumerate() {
                if span.start > at {
                    groups.push((None, &file.x[at..span.start]));
                }
                groups.push((Some(i), &file.x[span.range()]));
                at = span.end;
            }
            if at < file.x.len() {
                groups.push((None, &file.x[at..]));
            }
            for (j, (source, tokens)) in groups.into_iter().enumerate() {
                if j > 0 {
                    out.push(Segment::Plain(" ".into()));
                }
                out.push(match source {
                    Some(i) => Segment::Source(i, token_text(tokens)),
                    None => Segment::Plain(token_text(tokens)),
                });
            }
        }
    }
    out
}

/// Signed intensities in `[-1, 1]`: scores divided by the largest positive
/// score. If no score is positive every intensity is zero.
pub fn normalize(scores: &[f64]) -> Vec<f64> {
    let max = scores.iter().cloned().fold(0.0f64, f64::max);
    if max <= 0.0 {
        return vec![0.0; scores.len()];
    }
    scores.iter().map(|s| (s / max).clamp(-1.0, 1.0)).collect()
}

/// Ramp bucket for a non-negative intensity: 0 means no highlight.
pub fn bucket(intensity: f64) -> usize {
    if intensity <= 0.0 {
        0
    } else {
        ((intensity * ANSI_STEPS as f64).ceil() as usize).clamp(1, ANSI_STEPS)
    }
}

fn html_escape(s: &str) -> String {
    let mut out = String::with_capacity(s.len());
    for c in s.chars() {
        match c {
            '&' => out.push_str("&amp;"),
            '<' => out.push_str("&lt;"),
            '>' => out.push_str("&gt;"),
            '"' => out.push_str("&quot;"),
            _ => out.push(c),
        }
    }
    out
}

pub fn render(file: &ScoresFile, format: Format) -> String {
    let intensity = normalize(&file.scores);
    let segs = segments(file);
    match format {
        Format::Ansi => {
            let mut out = String::new();
            for seg in &segs {
                match seg {
                    Segment::Plain(t) => out.push_str(t),
                    Segment::Source(i, t) => match bucket(intensity[*i]) {
                        0 => out.push_str(t),
                        b => out.push_str(&format!(
                            "\x1b[48;5;{}m\x1b[38;5;16m{t}\x1b[0m",
                            ANSI_RAMP[b - 1]
                        )),
                    },
                }
            }
            out.push('\n');
            out
        }
        Format::Html => {
            let mut out = format!(
                "<div class=\"attribution\" data-example=\"{}\" data-target=\"{}\">",
                html_escape(&file.example_id),
                file.target
            );
            for seg in &segs {
                match seg {
                    Segment::Plain(t) => out.push_str(&html_escape(t)),
                    Segment::Source(i, t) => {
                        let a = intensity[*i];
                        let (rgb, alpha) = if a >= 0.0 {
                            ("255, 170, 0", a)
                        } else {
                            ("60, 130, 255", -a)
                        };
                        out.push_str(&format!(
                            "<span class=\"source\" data-index=\"{i}\" data-score=\"{}\" \
                             style=\"background-color: rgba({rgb}, {alpha:.3})\">{}</span>",
                            file.scores[*i],
                            html_escape(t)
                        ));
                    }
                }
            }
            out.push_str("</div>\n");
            out
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn file(scores: Vec<f64>) -> ScoresFile {
        ScoresFile {
            example_id: "e".into(),
            target: 0,
            method: "at2".into(),
            scores,
            x: vec![5, 6, 7, 8, 9],
            sources: vec![Span::new(0, 2), Span::new(3, 4)],
            text: None,
        }
    }

    #[test]
    fn zero_scores_render_plain() {
        let f = file(vec![0.0, 0.0]);
        let s = render(&f, Format::Ansi);
        assert!(!s.contains('\x1b'));
        assert_eq!(s, "\u{27e8}5\u{27e9} \u{27e8}6\u{27e9} \u{27e8}7\u{27e9} \u{27e8}8\u{27e9} \u{27e8}9\u{27e9}\n");
    }

    #[test]
    fn max_score_gets_top_bucket() {
        assert_eq!(normalize(&[2.0, 1.0, -4.0]), vec![1.0, 0.5, -1.0]);
        assert_eq!(normalize(&[-1.0, 0.0]), vec![0.0, 0.0]);
        assert_eq!(bucket(1.0), ANSI_STEPS);
        assert_eq!(bucket(1e-9), 1);
        assert_eq!(bucket(0.5), 4);
        let s = render(&file(vec![3.0, 1.0]), Format::Ansi);
        assert!(s.contains(&format!("48;5;{}m", ANSI_RAMP[ANSI_STEPS - 1])));
    }

    #[test]
    fn text_mode_uses_offsets() {
        let mut f = file(vec![1.0, 0.0]);
        f.text = Some(at2_core::ExampleText {
            context: "Alpha beta. Gamma <delta>.".into(),
            source_offsets: vec![Span::new(0, 11), Span::new(12, 26)],
        });
        let segs = segments(&f);
        assert_eq!(
            segs,
            vec![
                Segment::Source(0, "Alpha beta.".into()),
                Segment::Plain(" ".into()),
                Segment::Source(1, "Gamma <delta>.".into()),
            ]
        );
        let html = render(&f, Format::Html);
        assert!(html.contains("Gamma &lt;delta&gt;."));
    }
}
