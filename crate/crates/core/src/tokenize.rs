//! Default word-level tokenizer.
//!
//! Text is split on Unicode whitespace; leading and trailing punctuation of
//! every whitespace-delimited word is detached into one token per character.
//! CJK ideographs, kana and hangul become one token per character since
//! those scripts do not delimit words with spaces.
//!
//! Tokens are reported as byte spans into the input so that callers can
//! slice the original text losslessly.

use std::ops::Range;

use unicode_normalization::UnicodeNormalization;

/// Identifier of the only tokenizer currently shipped.
pub const DEFAULT_TOKENIZER_ID: &str = "default";

/// Applies NFC normalization.
pub fn nfc(text: &str) -> String {
    text.nfc().collect()
}

/// Returns true for characters treated as punctuation by the tokenizer.
pub fn is_punctuation(c: char) -> bool {
    if c.is_ascii_punctuation() {
        return true;
    }
    matches!(c as u32,
        0x00A1..=0x00BF        // Latin-1 punctuation and symbols
        | 0x2010..=0x2027      // dashes, quotes, bullets, ellipsis
        | 0x2030..=0x205E
        | 0x3001..=0x3003      // 、。〃
        | 0x3008..=0x3011      // CJK brackets
        | 0x3014..=0x301F
        | 0xFF01..=0xFF0F      // fullwidth ! through /
        | 0xFF1A..=0xFF20
        | 0xFF3B..=0xFF40
        | 0xFF5B..=0xFF65)
}

/// Returns true for characters that are tokenized one per character.
pub fn is_cjk(c: char) -> bool {
    matches!(c as u32,
        0x3040..=0x30FF        // hiragana, katakana
        | 0x3400..=0x4DBF      // CJK extension A
        | 0x4E00..=0x9FFF      // CJK unified ideographs
        | 0xAC00..=0xD7AF      // hangul syllables
        | 0xF900..=0xFAFF      // compatibility ideographs
        | 0x20000..=0x2FA1F)
}

/// Byte spans of every token in `text`.
pub fn token_spans(text: &str) -> Vec<Range<usize>> {
    let mut spans = Vec::new();
    let mut word_start: Option<usize> = None;
    for (i, c) in text.char_indices() {
        if c.is_whitespace() {
            if let Some(s) = word_start.take() {
                split_word(text, s, i, &mut spans);
            }
        } else if word_start.is_none() {
            word_start = Some(i);
        }
    }
    if let Some(s) = word_start {
        split_word(text, s, text.len(), &mut spans);
    }
    spans
}

fn split_word(text: &str, start: usize, end: usize, out: &mut Vec<Range<usize>>) {
    let word = &text[start..end];
    let chars: Vec<(usize, char)> = word.char_indices().collect();
    let mut lo = 0;
    let mut hi = chars.len();
    while lo < hi && is_punctuation(chars[lo].1) {
        lo += 1;
    }
    while hi > lo && is_punctuation(chars[hi - 1].1) {
        hi -= 1;
    }
    let char_end = |idx: usize| -> usize {
        if idx + 1 < chars.len() {
            start + chars[idx + 1].0
        } else {
            end
        }
    };
    for idx in 0..lo {
        out.push(start + chars[idx].0..char_end(idx));
    }
    // core: split around CJK characters
    let mut run_start: Option<usize> = None;
    for idx in lo..hi {
        let c = chars[idx].1;
        if is_cjk(c) {
            if let Some(rs) = run_start.take() {
                out.push(start + chars[rs].0..start + chars[idx].0);
            }
            out.push(start + chars[idx].0..char_end(idx));
        } else if run_start.is_none() {
            run_start = Some(idx);
        }
    }
    if let Some(rs) = run_start {
        out.push(start + chars[rs].0..char_end(hi - 1));
    }
    for idx in hi..chars.len() {
        out.push(start + chars[idx].0..char_end(idx));
    }
}

/// Tokenizes `text` with the default rules.
pub fn default_tokenizer(text: &str) -> Vec<String> {
    token_spans(text)
        .into_iter()
        .map(|r| text[r].to_string())
        .collect()
}

/// Joins tokens with single spaces; re-tokenizing the result yields the
/// same tokens.
pub fn detokenize<S: AsRef<str>>(tokens: &[S]) -> String {
    let mut out = String::new();
    for (i, t) in tokens.iter().enumerate() {
        if i > 0 {
            out.push(' ');
        }
        out.push_str(t.as_ref());
    }
    out
}

/// Number of tokens in `text`.
pub fn count_tokens(text: &str) -> usize {
    token_spans(text).len()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn splits_trailing_comma() {
        assert_eq!(default_tokenizer("Hello, world"), vec!["Hello", ",", "world"]);
    }

    #[test]
    fn empty_input() {
        assert!(default_tokenizer("").is_empty());
        assert!(default_tokenizer(" \t\n ").is_empty());
    }

    #[test]
    fn keeps_inner_punctuation() {
        assert_eq!(
            default_tokenizer("(don't) stop..."),
            vec!["(", "don't", ")", "stop", ".", ".", "."]
        );
    }

    #[test]
    fn cjk_per_character() {
        assert_eq!(default_tokenizer("拍卖法，第51条"), vec!["拍", "卖", "法", "，", "第", "51", "条"]);
    }

    #[test]
    fn nfc_composes() {
        assert_eq!(nfc("e\u{301}"), "\u{e9}");
    }

    proptest! {
        #[test]
        fn retokenize_is_idempotent(s in "[ -~\\t\\n]{0,80}") {
            let toks = default_tokenizer(&s);
            let again = default_tokenizer(&detokenize(&toks));
            prop_assert_eq!(toks, again);
        }

        #[test]
        fn spans_are_ordered_and_nonempty(s in "\\PC{0,60}") {
            let spans = token_spans(&s);
            let mut last = 0;
            for r in spans {
                prop_assert!(r.start >= last && r.end > r.start);
                last = r.end;
            }
        }
    }
}
