/// Lowercases, drops punctuation and splits on whitespace.
pub fn tokenize(text: &str) -> Vec<String> {
    text.to_lowercase()
        .split_whitespace()
        .map(|w| w.chars().filter(|c| c.is_alphanumeric()).collect::<String>())
        .filter(|w| !w.is_empty())
        .collect()
}

/// Text-side form of a single OCR word. Always yields exactly one token so
/// that `w^ocr` stays aligned with the OCR regions.
pub fn ocr_token(word: &str) -> String {
    let joined: String = tokenize(word).concat();
    if joined.is_empty() {
        word.trim().to_lowercase()
    } else {
        joined
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn examples() {
        assert!(tokenize("").is_empty());
        assert_eq!(tokenize("Who must survive?"), ["who", "must", "survive"]);
        assert_eq!(tokenize("  Coca-Cola,  ZERO!! "), ["cocacola", "zero"]);
        assert!(tokenize("?? !! ...").is_empty());
    }

    #[test]
    fn ocr_token_is_single() {
        assert_eq!(ocr_token("EXIT"), "exit");
        assert_eq!(ocr_token("new york"), "newyork");
        assert_eq!(ocr_token("$$"), "$$");
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(1000))]
        #[test]
        fn tokenize_is_idempotent(s in "\\PC{0,40}") {
            let once = tokenize(&s);
            prop_assert_eq!(tokenize(&once.join(" ")), once);
        }
    }
}
