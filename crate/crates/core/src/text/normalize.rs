use crate::error::Result;

/// Punctuation that has no full-width ASCII counterpart but is mapped anyway.
const EXTRA: &[(char, &str)] = &[
    ('\u{3000}', " "),
    ('\u{3001}', ","),
    ('\u{3002}', "."),
    ('\u{300C}', "\""),
    ('\u{300D}', "\""),
    ('\u{300A}', "\""),
    ('\u{300B}', "\""),
    ('\u{201C}', "\""),
    ('\u{201D}', "\""),
    ('\u{201E}', "\""),
    ('\u{2018}', "'"),
    ('\u{2019}', "'"),
    ('\u{2013}', "-"),
    ('\u{2014}', "-"),
    ('\u{2026}', "..."),
    ('\u{00A0}', " "),
];

fn map_char(c: char, out: &mut String) {
    let code = c as u32;
    // Full-width forms U+FF01..U+FF5E sit exactly 0xFEE0 above ASCII.
    if (0xFF01..=0xFF5E).contains(&code) {
        out.push(char::from_u32(code - 0xFEE0).unwrap());
        return;
    }
    if let Some((_, rep)) = EXTRA.iter().find(|(k, _)| *k == c) {
        out.push_str(rep);
        return;
    }
    out.push(c);
}

/// Maps wide punctuation to ASCII and collapses whitespace runs to one space.
pub fn normalize_punct(line: &str) -> String {
    let mut mapped = String::with_capacity(line.len());
    for c in line.chars() {
        map_char(c, &mut mapped);
    }
    mapped.split_whitespace().collect::<Vec<_>>().join(" ")
}

pub fn normalize_punct_bytes(line: &[u8]) -> Result<String> {
    Ok(normalize_punct(std::str::from_utf8(line)?))
}

fn is_cjk(c: char) -> bool {
    matches!(c as u32,
        0x4E00..=0x9FFF | 0x3400..=0x4DBF | 0x20000..=0x2A6DF | 0xF900..=0xFAFF | 0x3040..=0x30FF)
}

/// Whitespace tokenisation that also splits ASCII punctuation off words and
/// segments CJK text one character per token.
pub fn tokenize(line: &str) -> Vec<String> {
    let mut tokens = Vec::new();
    for word in line.split_whitespace() {
        let mut current = String::new();
        for c in word.chars() {
            if is_cjk(c) || (c.is_ascii_punctuation() && c != '\'' && c != '@') {
                if !current.is_empty() {
                    tokens.push(std::mem::take(&mut current));
                }
                tokens.push(c.to_string());
            } else {
                current.push(c);
            }
        }
        if !current.is_empty() {
            tokens.push(current);
        }
    }
    tokens
}

/// Joins tokens, attaching closing punctuation to the preceding word.
pub fn detokenize(tokens: &[String]) -> String {
    let mut out = String::new();
    for (i, t) in tokens.iter().enumerate() {
        let attach = matches!(t.as_str(), "," | "." | "!" | "?" | ":" | ";" | ")" | "]" | "}" | "%");
        if i > 0 && !attach && !out.ends_with(['(', '[', '{']) {
            out.push(' ');
        }
        out.push_str(t);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn full_width_comma_and_spaces() {
        assert_eq!(normalize_punct("，"), ",");
        assert_eq!(normalize_punct("a  b"), "a b");
        assert_eq!(normalize_punct("（你好）！"), "(你好)!");
        assert_eq!(normalize_punct("  x\t\ty  "), "x y");
    }

    #[test]
    fn invalid_utf8_is_an_error() {
        assert!(matches!(
            normalize_punct_bytes(&[0x66, 0xff, 0xfe]),
            Err(crate::Error::Encoding(_))
        ));
    }

    #[test]
    fn tokenize_splits_punctuation_and_cjk() {
        assert_eq!(tokenize("Hello, world!"), ["Hello", ",", "world", "!"]);
        assert_eq!(tokenize("我爱 NLP"), ["我", "爱", "NLP"]);
        assert_eq!(detokenize(&tokenize("Hello, world!")), "Hello, world!");
    }

    proptest! {
        #[test]
        fn normalization_is_idempotent(s in "[ a-z，。！？（）\u{3000}\u{ff01}-\u{ff5e}\t]{0,40}") {
            let once = normalize_punct(&s);
            prop_assert_eq!(normalize_punct(&once), once);
        }
    }
}
