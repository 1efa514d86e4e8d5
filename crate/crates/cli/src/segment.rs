//! Heuristic sentence segmentation for text-mode sources.
//!
//! Lines are split first, then each line after `.`, `?` or `!` followed by
//! whitespace. Segments are trimmed and empty ones dropped. No abbreviation
//! handling: "e.g. this" splits after "e.g.".

use at2_core::Span;

/// Byte ranges of the sentences in `text`.
pub fn segment_sentences(text: &str) -> Vec<Span> {
    let mut out = Vec::new();
    let mut line_start = 0;
    for line in text.split_inclusive('\n') {
        let bytes = line.as_bytes();
        let mut start = 0;
        for i in 0..bytes.len() {
            let end_mark = matches!(bytes[i], b'.' | b'?' | b'!');
            if end_mark && bytes.get(i + 1).is_some_and(|c| c.is_ascii_whitespace()) {
                push_trimmed(&mut out, text, line_start + start, line_start + i + 1);
                start = i + 1;
            }
        }
        push_trimmed(&mut out, text, line_start + start, line_start + bytes.len());
        line_start += bytes.len();
    }
    out
}

fn push_trimmed(out: &mut Vec<Span>, text: &str, start: usize, end: usize) {
    let piece = &text[start..end];
    let lead = piece.len() - piece.trim_start().len();
    let trimmed = piece.trim();
    if !trimmed.is_empty() {
        out.push(Span::new(start + lead, start + lead + trimmed.len()));
    }
}
