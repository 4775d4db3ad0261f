use std::collections::{BTreeSet, HashMap};
use std::fs;
use std::path::Path;

use super::normalize::{DIGIT_PLACEHOLDER, LATIN_PLACEHOLDER};
use crate::error::{Error, Result};

pub const PAD_ID: u32 = 0;
pub const UNK_ID: u32 = 1;
pub const LATIN_ID: u32 = 2;
pub const DIGIT_ID: u32 = 3;

const PAD_TOKEN: &str = "<pad>";
const UNK_TOKEN: &str = "<unk>";

/// Character → id table. Ids are dense from 0; the first four are reserved.
#[derive(Debug, Clone, PartialEq)]
pub struct Vocabulary {
    chars: Vec<char>,
    index: HashMap<char, u32>,
}

impl Default for Vocabulary {
    fn default() -> Self {
        Vocabulary::from_chars(std::iter::empty())
    }
}

impl Vocabulary {
    /// Builds a vocabulary over the given characters (deduplicated, sorted).
    pub fn from_chars(chars: impl IntoIterator<Item = char>) -> Self {
        let set: BTreeSet<char> = chars
            .into_iter()
            .filter(|&c| c != LATIN_PLACEHOLDER && c != DIGIT_PLACEHOLDER)
            .collect();
        let mut v = Vocabulary {
            chars: Vec::with_capacity(set.len()),
            index: HashMap::with_capacity(set.len() + 2),
        };
        v.index.insert(LATIN_PLACEHOLDER, LATIN_ID);
        v.index.insert(DIGIT_PLACEHOLDER, DIGIT_ID);
        for c in set {
            v.index.insert(c, (v.chars.len() + 4) as u32);
            v.chars.push(c);
        }
        v
    }

    pub fn len(&self) -> usize {
        self.chars.len() + 4
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// Id of a normalized character; unknown characters map to [`UNK_ID`].
    pub fn id(&self, c: char) -> u32 {
        self.index.get(&c).copied().unwrap_or(UNK_ID)
    }

    pub fn encode(&self, chars: &[char]) -> Vec<u32> {
        chars.iter().map(|&c| self.id(c)).collect()
    }

    pub fn contains(&self, c: char) -> bool {
        self.index.contains_key(&c)
    }

    fn lines(&self) -> Vec<String> {
        let mut lines = vec![
            PAD_TOKEN.to_string(),
            UNK_TOKEN.to_string(),
            LATIN_PLACEHOLDER.to_string(),
            DIGIT_PLACEHOLDER.to_string(),
        ];
        lines.extend(self.chars.iter().map(|c| c.to_string()));
        lines
    }

    /// One entry per line; the line number is the id.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut text = self.lines().join("\n");
        text.push('\n');
        fs::write(path, text)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        let parse_err = |line: usize, message: String| Error::Parse {
            path: path.to_path_buf(),
            line,
            message,
        };
        let lines: Vec<&str> = text.lines().collect();
        let reserved = [
            PAD_TOKEN.to_string(),
            UNK_TOKEN.to_string(),
            LATIN_PLACEHOLDER.to_string(),
            DIGIT_PLACEHOLDER.to_string(),
        ];
        for (i, r) in reserved.iter().enumerate() {
            if lines.get(i) != Some(&r.as_str()) {
                return Err(parse_err(i + 1, format!("expected reserved entry {r:?}")));
            }
        }
        let mut chars = Vec::with_capacity(lines.len().saturating_sub(4));
        for (i, l) in lines.iter().enumerate().skip(4) {
            let mut it = l.chars();
            match (it.next(), it.next()) {
                (Some(c), None) => chars.push(c),
                _ => return Err(parse_err(i + 1, format!("expected one character, got {l:?}"))),
            }
        }
        let mut v = Vocabulary::default();
        for c in chars {
            if v.index.contains_key(&c) {
                return Err(parse_err(v.len() + 1, format!("duplicate entry {c:?}")));
            }
            v.index.insert(c, v.len() as u32);
            v.chars.push(c);
        }
        Ok(v)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reserved_ids_and_fallback() {
        let v = Vocabulary::from_chars("世界世".chars());
        assert_eq!(v.len(), 6);
        assert_eq!(v.id(LATIN_PLACEHOLDER), LATIN_ID);
        assert_eq!(v.id(DIGIT_PLACEHOLDER), DIGIT_ID);
        assert_eq!(v.id('龘'), UNK_ID);
        assert!(v.id('世') >= 4 && v.id('界') >= 4);
    }

    #[test]
    fn save_load_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("vocab.txt");
        let v = Vocabulary::from_chars("刘国梁赢得".chars());
        v.save(&path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert_eq!(text.lines().count(), v.len());
        assert_eq!(text.lines().nth(v.id('国') as usize), Some("国"));
        assert_eq!(Vocabulary::load(&path).unwrap(), v);
    }

    #[test]
    fn load_rejects_bad_lines() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("vocab.txt");
        std::fs::write(&path, "<pad>\n<unk>\n\u{E000}\n\u{E001}\nab\n").unwrap();
        assert!(matches!(Vocabulary::load(&path), Err(Error::Parse { line: 5, .. })));
    }
}
