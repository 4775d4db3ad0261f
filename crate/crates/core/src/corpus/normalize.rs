use std::ops::Range;

/// Stands in for a maximal run of Latin letters.
pub const LATIN_PLACEHOLDER: char = '\u{E000}';
/// Stands in for a maximal run of digits.
pub const DIGIT_PLACEHOLDER: char = '\u{E001}';

#[derive(Clone, Copy, PartialEq, Eq)]
enum Run {
    Latin,
    Digit,
}

/// Maps full-width ASCII variants (U+FF01..U+FF5E) and the ideographic
/// space to their half-width forms.
pub fn to_half_width(c: char) -> char {
    match c {
        '\u{FF01}'..='\u{FF5E}' => char::from_u32(c as u32 - 0xFEE0).unwrap_or(c),
        '\u{3000}' => ' ',
        _ => c,
    }
}

fn run_of(c: char) -> Option<Run> {
    if c.is_ascii_alphabetic() {
        Some(Run::Latin)
    } else if c.is_ascii_digit() {
        Some(Run::Digit)
    } else {
        None
    }
}

/// Normalizes text: full-width → half-width, then every maximal run of
/// Latin letters becomes [`LATIN_PLACEHOLDER`] and every maximal run of
/// digits becomes [`DIGIT_PLACEHOLDER`].
pub fn normalize_text(line: &str) -> String {
    normalize_with_spans(line).into_iter().map(|(c, _)| c).collect()
}

/// Like [`normalize_text`], but pairs every output character with the byte
/// range of the input it replaces.
pub fn normalize_with_spans(line: &str) -> Vec<(char, Range<usize>)> {
    let mut out: Vec<(char, Range<usize>)> = Vec::with_capacity(line.len());
    let mut current: Option<Run> = None;
    for (pos, raw) in line.char_indices() {
        let c = to_half_width(raw);
        let span = pos..pos + raw.len_utf8();
        match run_of(c) {
            Some(run) if current == Some(run) => {
                if let Some(last) = out.last_mut() {
                    last.1.end = span.end;
                }
            }
            Some(run) => {
                let placeholder = match run {
                    Run::Latin => LATIN_PLACEHOLDER,
                    Run::Digit => DIGIT_PLACEHOLDER,
                };
                out.push((placeholder, span));
                current = Some(run);
            }
            None => {
                out.push((c, span));
                current = None;
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn examples() {
        assert_eq!(normalize_text("你好"), "你好");
        assert_eq!(normalize_text("２０２０年"), format!("{DIGIT_PLACEHOLDER}年"));
        assert_eq!(
            normalize_text("iPhone１１真好"),
            format!("{LATIN_PLACEHOLDER}{DIGIT_PLACEHOLDER}真好")
        );
        assert_eq!(
            normalize_text("ａ，b"),
            format!("{LATIN_PLACEHOLDER},{LATIN_PLACEHOLDER}")
        );
        assert_eq!(normalize_text(""), "");
    }

    #[test]
    fn spans_cover_the_original_runs() {
        let line = "iPhone１１真";
        let spans = normalize_with_spans(line);
        let pieces: Vec<&str> = spans.iter().map(|(_, r)| &line[r.clone()]).collect();
        assert_eq!(pieces, ["iPhone", "１１", "真"]);
    }

    proptest! {
        #[test]
        fn idempotent(s in "[a-zA-Z0-9０-９Ａ-Ｚ 　，。你好世界\u{E000}\u{E001}]{0,24}") {
            let once = normalize_text(&s);
            prop_assert_eq!(normalize_text(&once), once);
        }
    }
}
