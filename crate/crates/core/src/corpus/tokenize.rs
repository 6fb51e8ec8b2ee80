/// Lowercase `text` and split it on whitespace and punctuation boundaries.
///
/// Runs of alphanumeric characters form one token; every other
/// non-whitespace character is emitted as a token of its own, so `"!"`,
/// `"."` and `"/"` survive as standalone units.
pub fn tokenize(text: &str) -> Vec<String> {
    let mut tokens = Vec::new();
    let mut word = String::new();
    for ch in text.chars() {
        if ch.is_alphanumeric() {
            word.extend(ch.to_lowercase());
            continue;
        }
        if !word.is_empty() {
            tokens.push(std::mem::take(&mut word));
        }
        if !ch.is_whitespace() {
            tokens.push(ch.to_lowercase().collect());
        }
    }
    if !word.is_empty() {
        tokens.push(word);
    }
    tokens
}

// Closed-class words that never head a noun phrase.
const CLOSED_CLASS: &[&str] = &[
    "a", "an", "the", "this", "that", "these", "those", "my", "your", "his", "her", "its", "our",
    "their", "some", "any", "no", "every", "each", "all", "both", "either", "neither", "i", "me",
    "you", "he", "him", "she", "it", "we", "us", "they", "them", "who", "whom", "whose", "which",
    "what", "myself", "yourself", "himself", "herself", "itself", "ourselves", "themselves",
    "and", "or", "but", "nor", "so", "yet", "if", "then", "than", "because", "while", "although",
    "though", "when", "where", "whether", "of", "in", "on", "at", "by", "for", "with", "about",
    "against", "between", "into", "through", "during", "before", "after", "above", "below",
    "to", "from", "up", "down", "out", "off", "over", "under", "again", "further", "once",
    "is", "am", "are", "was", "were", "be", "been", "being", "have", "has", "had", "having",
    "do", "does", "did", "doing", "will", "would", "shall", "should", "can", "could", "may",
    "might", "must", "not", "very", "too", "just", "also", "only", "really", "quite", "even",
    "still", "here", "there", "how", "why", "get", "got", "make", "made", "see", "saw", "seen",
    "go", "went", "gone", "say", "said", "think", "thought", "know", "knew", "like", "liked",
    "felt", "feel", "seems", "seemed", "look", "looked", "much", "many", "more", "most", "less",
    "few", "other", "such", "own", "same", "s", "t", "don", "ever", "never", "always", "yo",
];

/// Heuristic noun-likeness: an alphabetic token of length ≥ 3 that is not a
/// closed-class word and does not look like an adverb.
pub fn is_noun_like(token: &str) -> bool {
    token.chars().count() >= 3
        && token.chars().all(char::is_alphabetic)
        && !token.ends_with("ly")
        && !CLOSED_CLASS.contains(&token)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn toks(s: &str) -> Vec<String> {
        tokenize(s)
    }

    #[test]
    fn punctuation_is_isolated() {
        assert_eq!(toks("Yo! just die."), vec!["yo", "!", "just", "die", "."]);
    }

    #[test]
    fn empty_input() {
        assert!(toks("").is_empty());
        assert!(toks("   \t\n").is_empty());
    }

    #[test]
    fn ratings_split_on_slash() {
        assert_eq!(toks("Rating 8/10."), vec!["rating", "8", "/", "10", "."]);
    }

    #[test]
    fn reserved_markers_never_survive() {
        assert_eq!(toks("[MASK] [SEP]"), vec!["[", "mask", "]", "[", "sep", "]"]);
    }

    #[test]
    fn noun_heuristic() {
        assert!(is_noun_like("movie"));
        assert!(!is_noun_like("the"));
        assert!(!is_noun_like("really"));
        assert!(!is_noun_like("!"));
        assert!(!is_noun_like("10"));
    }

    proptest! {
        #[test]
        fn tokenize_is_pure_and_whitespace_free(s in ".{0,64}") {
            let a = tokenize(&s);
            prop_assert_eq!(&a, &tokenize(&s));
            for t in &a {
                prop_assert!(!t.is_empty());
                prop_assert!(!t.chars().any(char::is_whitespace));
            }
        }
    }
}
