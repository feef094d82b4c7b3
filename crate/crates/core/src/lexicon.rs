//! Tokenization and the fixed cue vocabularies shared by the speaker
//! simulator, the rule decoder and the language statistics.

pub const POSITIVE_CUES: &[&str] = &["good", "yes", "correct", "okay", "great", "perfect"];

pub const NEGATIVE_CUES: &[&str] = &["no", "not", "wrong", "undo", "don't"];

/// Verbs that ask the listener to take back a selection.
pub const CORRECTIVE_VERBS: &[&str] = &["deselect", "unselect", "remove", "undo"];

/// Pointing words that tie a corrective verb to the action just taken.
pub const DEICTIC_WORDS: &[&str] = &["that", "those", "this", "it", "them"];

/// Whether a corrective verb is directly followed by a pointing word, as in
/// "undo that" or "remove those".
pub fn takes_back_last(tokens: &[String]) -> bool {
    tokens.windows(2).any(|w| {
        CORRECTIVE_VERBS.contains(&w[0].as_str()) && DEICTIC_WORDS.contains(&w[1].as_str())
    })
}

pub const RESET_PHRASES: &[&str] = &[
    "reset",
    "restart",
    "from scratch",
    "all over",
    "start over",
    "deselect everything",
    "deselect all",
    "remove everything",
    "remove all",
    "clear everything",
    "clear all",
    "unselect everything",
    "unselect all",
    "drop everything",
    "drop all",
];

pub const TRY_AGAIN_PHRASES: &[&str] = &["try again", "try one more time", "the other one"];

/// Function words of the speaker templates; never attribute tokens.
pub const TEMPLATE_WORDS: &[&str] = &[
    "the", "one", "and", "select", "pick", "now", "find", "that", "this", "those", "it", "is",
    "again", "back", "bring", "next", "also", "with", "what", "you", "selected", "please", "too",
    "keep", "was", "right", "try", "more", "time", "other", "all", "everything", "over",
    "start", "from", "scratch", "clear", "drop", "an", "a", "i", "to", "of",
];

/// Lowercase word tokens; punctuation becomes whitespace, inner apostrophes
/// are kept so `don't` stays one token.
pub fn tokenize(text: &str) -> Vec<String> {
    let cleaned: String = text
        .chars()
        .map(|c| {
            if c.is_alphanumeric() || c == '\'' || c == '\u{2019}' {
                c.to_lowercase().next().unwrap_or(c)
            } else {
                ' '
            }
        })
        .collect();
    cleaned
        .split_whitespace()
        .map(|t| t.replace('\u{2019}', "'").trim_matches('\'').to_string())
        .filter(|t| !t.is_empty())
        .collect()
}

/// Number of positions where `phrase` occurs as a contiguous token run.
pub fn count_phrase(tokens: &[String], phrase: &str) -> usize {
    let words: Vec<&str> = phrase.split_whitespace().collect();
    if words.is_empty() || tokens.len() < words.len() {
        return 0;
    }
    tokens
        .windows(words.len())
        .filter(|w| w.iter().zip(&words).all(|(a, b)| a == b))
        .count()
}

pub fn count_any(tokens: &[String], phrases: &[&str]) -> usize {
    phrases.iter().map(|p| count_phrase(tokens, p)).sum()
}

pub fn contains_any(tokens: &[String], phrases: &[&str]) -> bool {
    phrases.iter().any(|p| count_phrase(tokens, p) > 0)
}

/// Every word a speaker template, cue or action string may contain.
pub fn reserved_tokens() -> Vec<&'static str> {
    let letters = ["a", "b", "c", "d", "e", "f", "g", "h", "i", "j"];
    let mut out: Vec<&'static str> = Vec::new();
    out.extend_from_slice(POSITIVE_CUES);
    out.extend_from_slice(NEGATIVE_CUES);
    out.extend_from_slice(CORRECTIVE_VERBS);
    out.extend_from_slice(TEMPLATE_WORDS);
    out.extend_from_slice(&letters);
    for p in RESET_PHRASES.iter().chain(TRY_AGAIN_PHRASES) {
        out.extend(p.split_whitespace());
    }
    out.sort_unstable();
    out.dedup();
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toks(s: &str) -> Vec<String> {
        tokenize(s)
    }

    #[test]
    fn tokenizer_strips_punctuation() {
        assert_eq!(toks("No, that is a bird -- try again!"), [
            "no", "that", "is", "a", "bird", "try", "again"
        ]);
        assert_eq!(toks("Don't"), ["don't"]);
        assert_eq!(toks("'quoted'"), ["quoted"]);
        assert!(toks("  ...  ").is_empty());
    }

    #[test]
    fn phrase_counts() {
        let t = toks("please start over and deselect everything");
        assert_eq!(count_any(&t, RESET_PHRASES), 2);
        assert_eq!(count_any(&toks("try again"), TRY_AGAIN_PHRASES), 1);
        assert_eq!(count_any(&toks("try try again again"), TRY_AGAIN_PHRASES), 1);
        assert_eq!(count_phrase(&toks("all over all over"), "all over"), 2);
        assert_eq!(count_phrase(&[], "reset"), 0);
    }
}
