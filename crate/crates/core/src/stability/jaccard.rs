use std::collections::HashSet;

/// Lowercased words with punctuation removed.
pub fn word_set(text: &str) -> HashSet<String> {
    text.split_whitespace()
        .map(|w| w.chars().filter(|c| c.is_alphanumeric()).collect::<String>().to_lowercase())
        .filter(|w| !w.is_empty())
        .collect()
}

/// Jaccard similarity of the two answers' word sets.
pub fn jaccard(a: &str, b: &str) -> f64 {
    let (a, b) = (word_set(a), word_set(b));
    let union = a.union(&b).count();
    if union == 0 {
        return 1.0;
    }
    a.intersection(&b).count() as f64 / union as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn examples() {
        assert_eq!(jaccard("the same text", "the same text"), 1.0);
        assert_eq!(jaccard("alpha beta gamma", "delta epsilon"), 0.0);
        assert_eq!(jaccard("a b c", "b c d"), 0.5);
        assert_eq!(jaccard("July, August.", "august july"), 1.0);
    }

    proptest! {
        #[test]
        fn symmetric_and_bounded(a in "[a-d ,.]{1,30}", b in "[a-d ,.]{1,30}") {
            let j = jaccard(&a, &b);
            prop_assert_eq!(j, jaccard(&b, &a));
            prop_assert!((0.0..=1.0).contains(&j));
            prop_assert_eq!(jaccard(&a, &a), 1.0);
        }
    }
}
