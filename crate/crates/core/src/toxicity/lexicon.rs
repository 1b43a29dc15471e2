use std::collections::BTreeMap;
use std::path::Path;

use async_trait::async_trait;

use super::{ScoreProvider, ScorerError, ToxicityScore, ToxicityScorer};
use crate::error::ConfigError;
use crate::text::is_unicode_punctuation;

const DEFAULT_LEXICON: &str = include_str!("../../assets/lexicon.tsv");

/// Weighted token list for the offline scorer.
#[derive(Debug, Clone, PartialEq)]
pub struct ToxicLexicon {
    entries: BTreeMap<String, f64>,
    version_tag: String,
}

impl ToxicLexicon {
    pub fn new(version_tag: impl Into<String>) -> Self {
        Self {
            entries: BTreeMap::new(),
            version_tag: version_tag.into(),
        }
    }

    pub fn insert(&mut self, token: &str, weight: f64) -> Result<(), ConfigError> {
        if !(weight > 0.0 && weight <= 1.0) {
            return Err(ConfigError::invalid(format!(
                "lexicon weight {weight} for `{token}` outside (0, 1]"
            )));
        }
        if token.is_empty() || token.chars().any(char::is_whitespace) {
            return Err(ConfigError::invalid(format!("bad lexicon token `{token}`")));
        }
        self.entries.insert(token.to_lowercase(), weight);
        Ok(())
    }

    pub fn with(mut self, token: &str, weight: f64) -> Self {
        self.insert(token, weight).expect("valid lexicon entry");
        self
    }

    /// Parses `token<TAB>weight` lines; `#` starts a comment. A comment of
    /// the form `# version: <tag>` sets the version tag.
    pub fn parse(text: &str, default_tag: &str) -> Result<Self, ConfigError> {
        let mut lex = Self::new(default_tag);
        for (n, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if let Some(comment) = line.strip_prefix('#') {
                if let Some(tag) = comment.trim().strip_prefix("version:") {
                    lex.version_tag = tag.trim().to_owned();
                }
                continue;
            }
            if line.is_empty() {
                continue;
            }
            let (token, weight) = line.split_once('\t').ok_or_else(|| {
                ConfigError::invalid(format!("lexicon line {}: expected token<TAB>weight", n + 1))
            })?;
            let weight: f64 = weight.trim().parse().map_err(|_| {
                ConfigError::invalid(format!("lexicon line {}: bad weight `{weight}`", n + 1))
            })?;
            lex.insert(token.trim(), weight)
                .map_err(|e| ConfigError::invalid(format!("lexicon line {}: {e}", n + 1)))?;
        }
        Ok(lex)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| ConfigError::invalid(format!("reading {}: {e}", path.display())))?;
        let tag = path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| "lexicon".into());
        Self::parse(&text, &tag)
    }

    /// The bundled English lexicon.
    pub fn builtin() -> Self {
        Self::parse(DEFAULT_LEXICON, "builtin").expect("bundled lexicon parses")
    }

    pub fn weight(&self, token: &str) -> Option<f64> {
        self.entries.get(token).copied()
    }

    pub fn version_tag(&self) -> &str {
        &self.version_tag
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn tokens(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }
}

/// Whitespace split, lowercase, trim Unicode punctuation at both ends; empty
/// tokens are dropped.
pub fn lexicon_tokens(text: &str) -> Vec<String> {
    text.split_whitespace()
        .map(|t| t.to_lowercase().trim_matches(is_unicode_punctuation).to_owned())
        .filter(|t| !t.is_empty())
        .collect()
}

/// min(1, Σ matched weights / max(1, token count)).
pub fn score_lexicon(text: &str, lexicon: &ToxicLexicon) -> ToxicityScore {
    let tokens = lexicon_tokens(text);
    // fold from +0.0: an empty f64 sum is -0.0, which would leak into traces
    let hits = tokens.iter().filter_map(|t| lexicon.weight(t)).fold(0.0, |a, w| a + w);
    let value = (hits / tokens.len().max(1) as f64).min(1.0);
    ToxicityScore {
        value,
        provider: ScoreProvider::Lexicon,
    }
}

#[derive(Debug, Clone)]
pub struct LexiconScorer {
    lexicon: ToxicLexicon,
}

impl LexiconScorer {
    pub fn new(lexicon: ToxicLexicon) -> Self {
        Self { lexicon }
    }

    pub fn lexicon(&self) -> &ToxicLexicon {
        &self.lexicon
    }
}

#[async_trait]
impl ToxicityScorer for LexiconScorer {
    fn provider(&self) -> ScoreProvider {
        ScoreProvider::Lexicon
    }

    async fn score(&self, text: &str) -> Result<ToxicityScore, ScorerError> {
        Ok(score_lexicon(text, &self.lexicon))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn lex() -> ToxicLexicon {
        ToxicLexicon::new("t").with("awful", 1.0).with("trash", 1.0)
    }

    #[test]
    fn worked_examples() {
        assert_eq!(score_lexicon("you are awful trash", &lex()).value, 0.5);
        assert_eq!(score_lexicon("a perfectly nice day", &lex()).value, 0.0);
        assert_eq!(score_lexicon("awful", &lex()).value, 1.0);
        assert_eq!(score_lexicon("", &lex()).value, 0.0);
        assert_eq!(score_lexicon("   ", &lex()).value, 0.0);
    }

    #[test]
    fn case_and_punctuation() {
        assert_eq!(score_lexicon("AWFUL!", &lex()).value, 1.0);
        assert_eq!(score_lexicon("«trash», really", &lex()).value, 0.5);
        // inner punctuation is kept, so this is not a match
        assert_eq!(score_lexicon("aw-ful", &lex()).value, 0.0);
        // a bare dash is not a token
        assert_eq!(score_lexicon("awful \u{2014} trash", &lex()).value, 1.0);
    }

    #[test]
    fn weights_clamp() {
        let l = ToxicLexicon::new("t").with("x", 1.0);
        assert_eq!(score_lexicon("x x x", &l).value, 1.0);
        let half = ToxicLexicon::new("t").with("x", 0.5);
        assert_eq!(score_lexicon("x y", &half).value, 0.25);
    }

    #[test]
    fn parse_file_format() {
        let l = ToxicLexicon::parse("# version: v2\n# comment\nAwful\t0.8\n\ntrash\t1\n", "d").unwrap();
        assert_eq!(l.version_tag(), "v2");
        assert_eq!(l.weight("awful"), Some(0.8));
        assert_eq!(l.len(), 2);
        assert!(ToxicLexicon::parse("bad line", "d").is_err());
        assert!(ToxicLexicon::parse("x\t0", "d").is_err());
        assert!(ToxicLexicon::parse("x\t1.5", "d").is_err());
    }

    #[test]
    fn builtin_loads() {
        let l = ToxicLexicon::builtin();
        assert!(l.len() >= 20);
        assert!(l.weight("idiot").is_some());
    }

    proptest! {
        #[test]
        fn range_and_determinism(words in proptest::collection::vec("[a-z!.,]{0,8}|awful|trash", 0..20)) {
            let text = words.join(" ");
            let a = score_lexicon(&text, &lex()).value;
            prop_assert!((0.0..=1.0).contains(&a));
            prop_assert_eq!(a, score_lexicon(&text, &lex()).value);
        }

        #[test]
        fn deleting_a_match_never_increases(words in proptest::collection::vec("[a-z]{1,6}|awful|trash", 1..20), pick in any::<proptest::sample::Index>()) {
            let matched: Vec<usize> = words.iter().enumerate()
                .filter(|(_, w)| lex().weight(w).is_some()).map(|(i, _)| i).collect();
            prop_assume!(!matched.is_empty());
            let before = score_lexicon(&words.join(" "), &lex()).value;
            let mut fewer = words.clone();
            fewer.remove(matched[pick.index(matched.len())]);
            let after = score_lexicon(&fewer.join(" "), &lex()).value;
            prop_assert!(after <= before + 1e-15, "{} > {}", after, before);
        }

        #[test]
        fn appending_a_clean_token_never_increases(words in proptest::collection::vec("[a-z]{1,6}|awful|trash", 0..20), extra in "[b-z]{1,6}") {
            prop_assume!(lex().weight(&extra).is_none());
            let before = score_lexicon(&words.join(" "), &lex()).value;
            let mut more = words.clone();
            more.push(extra);
            let after = score_lexicon(&more.join(" "), &lex()).value;
            prop_assert!(after <= before + 1e-15);
        }
    }
}
