//! Text normalization shared by equality, ROUGE tokenization and the lexical
//! mock scorers.

use std::collections::BTreeSet;

/// Lowercases, collapses whitespace runs to one space and strips trailing
/// punctuation.
pub fn normalize(text: &str) -> String {
    let collapsed = text
        .split_whitespace()
        .collect::<Vec<_>>()
        .join(" ")
        .to_lowercase();
    collapsed
        .trim_end_matches(|c: char| c.is_ascii_punctuation() || matches!(c, '…' | '。' | '！' | '？'))
        .trim_end()
        .to_owned()
}

/// Lowercased tokens split on every non-alphanumeric character.
pub fn tokens(text: &str) -> Vec<String> {
    normalize(text)
        .split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(str::to_owned)
        .collect()
}

pub fn token_set(text: &str) -> BTreeSet<String> {
    tokens(text).into_iter().collect()
}

/// Jaccard index of two sets; two empty sets count as identical.
pub fn jaccard<T: Ord>(a: &BTreeSet<T>, b: &BTreeSet<T>) -> f64 {
    if a.is_empty() && b.is_empty() {
        return 1.0;
    }
    let inter = a.intersection(b).count();
    let union = a.len() + b.len() - inter;
    inter as f64 / union as f64
}

/// Unigram Jaccard similarity of two texts.
pub fn unigram_jaccard(a: &str, b: &str) -> f64 {
    jaccard(&token_set(a), &token_set(b))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn normalization() {
        assert_eq!(normalize("  Paris. "), "paris");
        assert_eq!(normalize("The   Big\tApple?!"), "the big apple");
        assert_eq!(normalize("U.S."), "u.s");
        assert_eq!(normalize(""), "");
        assert_eq!(normalize("..."), "");
    }

    #[test]
    fn tokenization() {
        assert_eq!(tokens("It's 9:30, Dr. Who!"), ["it", "s", "9", "30", "dr", "who"]);
        assert!(tokens("  ?? ").is_empty());
    }

    #[test]
    fn jaccard_values() {
        assert_eq!(unigram_jaccard("a b c", "a b c"), 1.0);
        assert_eq!(unigram_jaccard("a b", "c d"), 0.0);
        assert_eq!(unigram_jaccard("a b", "b c"), 1.0 / 3.0);
        assert_eq!(unigram_jaccard("", ""), 1.0);
        assert_eq!(unigram_jaccard("", "x"), 0.0);
    }
}
