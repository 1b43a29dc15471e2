//! Template expansion and the critic verdict protocol.

use super::types::Verdict;

/// Placeholder names understood by [`expand`].
pub const PLACEHOLDERS: [&str; 4] = ["input", "output", "feedback", "examples"];

/// Single-pass `{name}` expansion. Braces that do not enclose a name known to
/// `lookup` are copied through unchanged.
pub fn expand<'a>(template: &str, lookup: impl Fn(&str) -> Option<&'a str>) -> String {
    let mut out = String::with_capacity(template.len());
    let mut rest = template;
    while let Some(open) = rest.find('{') {
        out.push_str(&rest[..open]);
        let after = &rest[open + 1..];
        match after.find('}') {
            Some(close) => {
                let name = &after[..close];
                match lookup(name) {
                    Some(value) => {
                        out.push_str(value);
                        rest = &after[close + 1..];
                    }
                    None => {
                        out.push('{');
                        rest = after;
                    }
                }
            }
            None => {
                out.push('{');
                rest = after;
            }
        }
    }
    out.push_str(rest);
    out
}

/// Known placeholders that occur in `template`.
pub fn placeholders_in(template: &str) -> Vec<&'static str> {
    PLACEHOLDERS
        .iter()
        .copied()
        .filter(|p| template.contains(&format!("{{{p}}}")))
        .collect()
}

/// Reads the first line of the form `VERDICT: OK` / `VERDICT: ISSUES`
/// (case-insensitive, markdown emphasis tolerated).
pub fn parse_verdict(response: &str) -> Verdict {
    for line in response.lines() {
        let line = line.trim().trim_matches(|c| c == '*' || c == '#' || c == '_');
        let line = line.trim();
        let Some(head) = line.get(..7) else { continue };
        if !head.eq_ignore_ascii_case("verdict") {
            continue;
        }
        let rest = line[7..].trim_start();
        let Some(rest) = rest.strip_prefix(':') else {
            continue;
        };
        let word: String = rest
            .trim_start()
            .trim_start_matches('*')
            .chars()
            .take_while(|c| c.is_ascii_alphabetic())
            .collect();
        if word.eq_ignore_ascii_case("ok") {
            return Verdict::Ok;
        }
        if word.eq_ignore_ascii_case("issues") || word.eq_ignore_ascii_case("issue") {
            return Verdict::Issues;
        }
    }
    Verdict::Unparseable
}
