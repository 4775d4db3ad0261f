use serde::{Deserialize, Serialize};

use super::{DomainId, Sentence, TaggedSentence};
use crate::error::{Error, Result};

pub const NUM_LABELS: usize = 4;

/// Character position within a word. The discriminant order fixes
/// tie-breaking during decoding.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[repr(u8)]
pub enum Label {
    B = 0,
    M = 1,
    E = 2,
    S = 3,
}

impl Label {
    pub const ALL: [Label; NUM_LABELS] = [Label::B, Label::M, Label::E, Label::S];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Label> {
        Label::ALL.get(i).copied()
    }

    pub fn as_char(self) -> char {
        match self {
            Label::B => 'B',
            Label::M => 'M',
            Label::E => 'E',
            Label::S => 'S',
        }
    }

    /// Whether `next` may follow `self` in a well-formed sequence.
    pub fn may_precede(self, next: Label) -> bool {
        match self {
            Label::B | Label::M => matches!(next, Label::M | Label::E),
            Label::E | Label::S => matches!(next, Label::B | Label::S),
        }
    }
}

/// Tags for one word of `len` characters.
pub fn word_labels(len: usize) -> impl Iterator<Item = Label> {
    (0..len).map(move |i| match (len, i) {
        (1, _) => Label::S,
        (_, 0) => Label::B,
        (_, i) if i + 1 == len => Label::E,
        _ => Label::M,
    })
}

/// Tags a segmented sentence. An empty word list gives an empty sentence.
pub fn encode_tags<W: AsRef<str>>(words: &[W], domain: DomainId) -> Result<TaggedSentence> {
    let mut chars = Vec::new();
    let mut tags = Vec::new();
    for w in words {
        let w = w.as_ref();
        if w.is_empty() {
            return Err(Error::invalid("empty word in segmentation"));
        }
        let n = w.chars().count();
        chars.extend(w.chars());
        tags.extend(word_labels(n));
    }
    Ok(TaggedSentence {
        sentence: Sentence { chars, domain },
        tags,
    })
}

/// True when the sequence obeys the B/M/E/S grammar, including its start and end.
pub fn is_well_formed(tags: &[Label]) -> bool {
    let starts_ok = tags.first().is_none_or(|t| matches!(t, Label::B | Label::S));
    let ends_ok = tags.last().is_none_or(|t| matches!(t, Label::E | Label::S));
    starts_ok && ends_ok && tags.windows(2).all(|w| w[0].may_precede(w[1]))
}

/// Word spans `[start, end)` read off a tag sequence.
///
/// Malformed input is repaired: a tag that cannot continue the open word
/// closes it and starts a new one; a dangling `M`/`E` opens a word.
pub fn tag_spans(tags: &[Label]) -> Vec<(usize, usize)> {
    let mut spans = Vec::new();
    let mut open: Option<usize> = None;
    for (i, &t) in tags.iter().enumerate() {
        match t {
            Label::B => {
                if let Some(s) = open.take() {
                    spans.push((s, i));
                }
                open = Some(i);
            }
            Label::M => {
                if open.is_none() {
                    open = Some(i);
                }
            }
            Label::E => {
                let s = open.take().unwrap_or(i);
                spans.push((s, i + 1));
            }
            Label::S => {
                if let Some(s) = open.take() {
                    spans.push((s, i));
                }
                spans.push((i, i + 1));
            }
        }
    }
    if let Some(s) = open {
        spans.push((s, tags.len()));
    }
    spans
}

/// Inverse of [`encode_tags`], with the repair rule of [`tag_spans`].
pub fn decode_tags(chars: &[char], tags: &[Label]) -> Result<Vec<String>> {
    if chars.len() != tags.len() {
        return Err(Error::shape("decode_tags", &[chars.len()], &[tags.len()]));
    }
    Ok(tag_spans(tags)
        .into_iter()
        .map(|(s, e)| chars[s..e].iter().collect())
        .collect())
}
