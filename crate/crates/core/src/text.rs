//! Tokenization and case/punctuation-insensitive matching shared by
//! extraction, gender mapping and keyword probes.
//!
//! A token is a maximal run of alphanumeric characters and apostrophes,
//! lowercased, with typographic apostrophes folded to `'` and leading or
//! trailing apostrophes removed. Internal apostrophes are kept, so
//! `"Yup’ik"` and `"yup'ik"` compare equal while `"her"` and `"here"` do not.

/// One word token of a source text.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Token<'a> {
    /// Verbatim slice of the source text.
    pub raw: &'a str,
    /// Lowercased, apostrophe-normalized form.
    pub norm: String,
    /// Byte offset of `raw` in the source.
    pub start: usize,
}

fn is_apostrophe(c: char) -> bool {
    matches!(c, '\'' | '\u{2019}' | '\u{2018}' | '\u{02BC}')
}

fn is_word_char(c: char) -> bool {
    c.is_alphanumeric() || is_apostrophe(c)
}

fn normalize_word(raw: &str) -> String {
    let folded: String =
        raw.chars().map(|c| if is_apostrophe(c) { '\'' } else { c }).flat_map(char::to_lowercase).collect();
    folded.trim_matches('\'').to_string()
}

/// Splits `text` into word tokens. Tokens that normalize to nothing (a
/// lone apostrophe) are skipped.
pub fn tokenize(text: &str) -> Vec<Token<'_>> {
    let mut out = Vec::new();
    let mut start: Option<usize> = None;
    for (i, c) in text.char_indices() {
        match (is_word_char(c), start) {
            (true, None) => start = Some(i),
            (false, Some(s)) => {
                push_token(&mut out, text, s, i);
                start = None;
            }
            _ => {}
        }
    }
    if let Some(s) = start {
        push_token(&mut out, text, s, text.len());
    }
    out
}

fn push_token<'a>(out: &mut Vec<Token<'a>>, text: &'a str, start: usize, end: usize) {
    let raw = &text[start..end];
    let norm = normalize_word(raw);
    if !norm.is_empty() {
        out.push(Token { raw, norm, start });
    }
}

/// Normalized token sequence of a phrase.
pub fn normalize_phrase(phrase: &str) -> Vec<String> {
    tokenize(phrase).into_iter().map(|t| t.norm).collect()
}

/// Normalizes a single reference such as `"her,"` to `"her"`. Returns an
/// empty string when nothing word-like remains.
pub fn normalize_reference(reference: &str) -> String {
    normalize_phrase(reference).join(" ")
}

fn token_matches(story: &str, candidate: &str, last: bool) -> bool {
    story == candidate
        || (last
            && story.len() > candidate.len()
            && story.starts_with(candidate)
            && story.as_bytes()[candidate.len()] == b'\'')
}

/// True when `phrase` occurs as a contiguous run of whole tokens in the
/// normalized token stream. The final token may carry a possessive or
/// contraction suffix (`"maria"` matches `"maria's"`).
pub fn contains_phrase(story: &[String], phrase: &[String]) -> bool {
    if phrase.is_empty() || phrase.len() > story.len() {
        return false;
    }
    let last = phrase.len() - 1;
    story
        .windows(phrase.len())
        .any(|w| w.iter().zip(phrase).enumerate().all(|(i, (s, p))| token_matches(s, p, i == last)))
}

/// Pre-tokenized story for repeated occurrence checks.
#[derive(Debug, Clone)]
pub struct StoryTokens {
    norms: Vec<String>,
}

impl StoryTokens {
    pub fn new(story: &str) -> Self {
        Self { norms: normalize_phrase(story) }
    }

    pub fn tokens(&self) -> &[String] {
        &self.norms
    }

    /// Occurrence check used for hallucination filtering.
    pub fn contains(&self, candidate: &str) -> bool {
        contains_phrase(&self.norms, &normalize_phrase(candidate))
    }

    /// Whole-word containment without the possessive extension.
    pub fn contains_exact(&self, phrase: &[String]) -> bool {
        !phrase.is_empty() && phrase.len() <= self.norms.len() && self.norms.windows(phrase.len()).any(|w| w == phrase)
    }
}

/// Convenience wrapper for a one-off occurrence check.
pub fn occurs_in(story: &str, candidate: &str) -> bool {
    StoryTokens::new(story).contains(candidate)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tokens_fold_case_and_apostrophes() {
        let toks: Vec<String> = tokenize("She said: “Yup’ik, y'know?” 'Quoted'").into_iter().map(|t| t.norm).collect();
        assert_eq!(toks, vec!["she", "said", "yup'ik", "y'know", "quoted"]);
    }

    #[test]
    fn token_offsets_point_at_raw_text() {
        let text = "Hi, Maria’s friend";
        for t in tokenize(text) {
            assert_eq!(&text[t.start..t.start + t.raw.len()], t.raw);
        }
    }

    #[test]
    fn occurrence_is_token_bounded() {
        let story = "Maria’s tutor helped her. John was here.";
        assert!(occurs_in(story, "Maria"));
        assert!(occurs_in(story, "maria's"));
        assert!(occurs_in(story, "her,"));
        assert!(occurs_in(story, "JOHN"));
        assert!(!occurs_in(story, "he"));
        assert!(!occurs_in(story, "Mar"));
        assert!(!occurs_in(story, "Bob"));
        assert!(!occurs_in(story, "..."));
    }

    #[test]
    fn multi_token_phrases() {
        let story = StoryTokens::new("A Native American elder; Mary-Jane smiled.");
        assert!(story.contains("native american"));
        assert!(story.contains("Mary Jane"));
        assert!(story.contains("Mary-Jane"));
        assert!(!story.contains("American Native"));
    }

    #[test]
    fn exact_containment_rejects_prefixes() {
        let story = StoryTokens::new("Gayle smiled at the gay couple.");
        assert!(story.contains_exact(&normalize_phrase("gay")));
        assert!(!StoryTokens::new("Gayle smiled.").contains_exact(&normalize_phrase("gay")));
    }

    #[test]
    fn normalize_reference_strips_punctuation() {
        assert_eq!(normalize_reference("her,"), "her");
        assert_eq!(normalize_reference("\"Mr.\""), "mr");
        assert_eq!(normalize_reference("!!"), "");
    }
}
