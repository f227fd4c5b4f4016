use std::sync::LazyLock;

use regex::Regex;

/// Rewrite rules of the v13a evaluation tokenizer, applied top to bottom.
const RULES: [(&str, &str); 4] = [
    // ASCII symbols other than letters, digits, '.', ',', '-' and '\''
    (r"([\{-~\[-` -&\(-\+:-@/])", " $1 "),
    (r"([^0-9])([\.,])", "$1 $2 "),
    (r"([\.,])([^0-9])", " $1 $2"),
    (r"([0-9])(-)", "$1 $2 "),
];

static COMPILED: LazyLock<Vec<(Regex, &'static str)>> = LazyLock::new(|| {
    RULES
        .iter()
        .map(|(pat, rep)| (Regex::new(pat).expect("static pattern"), *rep))
        .collect()
});

/// Case-preserving v13a-style tokenisation of one detokenised line.
pub fn tokenize_v13a(line: &str) -> Vec<String> {
    let mut s = line
        .replace("<skipped>", "")
        .replace("-\n", "")
        .replace('\n', " ")
        .replace("&quot;", "\"")
        .replace("&amp;", "&")
        .replace("&lt;", "<")
        .replace("&gt;", ">");
    s = format!(" {s} ");
    for (re, rep) in COMPILED.iter() {
        s = re.replace_all(&s, *rep).into_owned();
    }
    s.split_whitespace().map(String::from).collect()
}
