//! Tokenization and sentence splitting shared by corpus statistics and the
//! local hashing embedder.

/// Lowercases `text` and splits it on every maximal run of non-alphanumeric
/// characters. Empty tokens are discarded.
pub fn tokenize(text: &str) -> Vec<String> {
    text.to_lowercase()
        .split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(str::to_owned)
        .collect()
}

/// Splits `text` into sentences at `.`, `!` or `?` when followed by
/// whitespace or the end of the text. Segments that are blank are dropped.
pub fn split_sentences(text: &str) -> Vec<&str> {
    let mut out = Vec::new();
    let mut start = 0;
    let mut chars = text.char_indices().peekable();
    while let Some((i, c)) = chars.next() {
        if !matches!(c, '.' | '!' | '?') {
            continue;
        }
        let boundary = match chars.peek() {
            None => true,
            Some(&(_, next)) => next.is_whitespace(),
        };
        if boundary {
            let end = i + c.len_utf8();
            push_segment(&mut out, &text[start..end]);
            start = end;
        }
    }
    push_segment(&mut out, &text[start..]);
    out
}

fn push_segment<'a>(out: &mut Vec<&'a str>, seg: &'a str) {
    let seg = seg.trim();
    if !seg.is_empty() {
        out.push(seg);
    }
}

/// Collapses whitespace runs to a single space and trims both ends.
pub fn normalize_whitespace(text: &str) -> String {
    text.split_whitespace().collect::<Vec<_>>().join(" ")
}
