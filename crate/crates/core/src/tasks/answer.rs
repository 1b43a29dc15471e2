use crate::metrics::normalize_answer;

const MARKERS: [&str; 2] = ["answer is", "answer:"];

/// Pulls the final answer out of a free-form generation.
///
/// The last (ASCII case-insensitive) occurrence of `answer is` or `answer:`
/// wins; the text after it up to the first sentence terminator is taken. A
/// terminator is a newline, or `.`, `!`, `?` followed by whitespace or the end
/// of the text, so `3.14` and `D.C.` survive. Without a marker the last
/// non-empty line is used. The result is normalized.
pub fn extract_answer(output: &str) -> String {
    let bytes = output.as_bytes();
    let marker_end = MARKERS
        .iter()
        .filter_map(|m| last_match(bytes, m.as_bytes()).map(|start| (start, start + m.len())))
        .max_by_key(|(start, _)| *start)
        .map(|(_, end)| end);
    let raw = match marker_end {
        Some(end) => until_terminator(&output[end..]),
        None => output
            .lines()
            .rev()
            .find(|l| !l.trim().is_empty())
            .unwrap_or(""),
    };
    normalize_answer(raw).into_string()
}

fn last_match(haystack: &[u8], needle: &[u8]) -> Option<usize> {
    if needle.len() > haystack.len() {
        return None;
    }
    (0..=haystack.len() - needle.len())
        .rev()
        .find(|&i| haystack[i..i + needle.len()].eq_ignore_ascii_case(needle))
}

fn until_terminator(text: &str) -> &str {
    let mut chars = text.char_indices().peekable();
    while let Some((i, c)) = chars.next() {
        match c {
            '\n' => return &text[..i],
            '.' | '!' | '?' => {
                let next_is_break = chars.peek().is_none_or(|(_, n)| n.is_whitespace());
                if next_is_break {
                    return &text[..i];
                }
            }
            _ => {}
        }
    }
    text
}
