//! Corpus ingestion: text normalization, BMES tagging, vocabularies,
//! development splits and single-domain batching.
//!
//! Corpus files are UTF-8, one sentence per line, words separated by
//! spaces. Files for a domain are named `<domain>.train.txt` and
//! `<domain>.test.txt`.

mod batch;
mod normalize;
mod tags;
mod vocab;

use std::collections::BTreeSet;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub use batch::{make_batches, Batch};
pub use normalize::{normalize_text, normalize_with_spans, to_half_width, DIGIT_PLACEHOLDER, LATIN_PLACEHOLDER};
pub use tags::{decode_tags, encode_tags, is_well_formed, tag_spans, word_labels, Label, NUM_LABELS};
pub use vocab::{Vocabulary, DIGIT_ID, LATIN_ID, PAD_ID, UNK_ID};

use crate::error::{Error, Result};

/// Longest sequence the encoder accepts.
pub const MAX_SEQ_LEN: usize = 128;

/// Name reserved for the shared projection.
pub const SHARED_DOMAIN: &str = "shared";

/// A corpus identity: name plus dense index.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct DomainId {
    name: Arc<str>,
    index: usize,
}

impl DomainId {
    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn index(&self) -> usize {
        self.index
    }
}

impl fmt::Display for DomainId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.name)
    }
}

/// Hands out [`DomainId`]s with unique names and consecutive indices.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct DomainRegistry {
    domains: Vec<DomainId>,
}

impl DomainRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_names<S: AsRef<str>>(names: &[S]) -> Result<Self> {
        let mut reg = Self::new();
        for n in names {
            reg.register(n.as_ref())?;
        }
        Ok(reg)
    }

    pub fn register(&mut self, name: &str) -> Result<DomainId> {
        if name.is_empty() || name == SHARED_DOMAIN || name.contains(|c: char| c.is_whitespace() || c == '.') {
            return Err(Error::invalid(format!("invalid domain name {name:?}")));
        }
        if self.get(name).is_some() {
            return Err(Error::invalid(format!("domain {name:?} registered twice")));
        }
        let id = DomainId {
            name: Arc::from(name),
            index: self.domains.len(),
        };
        self.domains.push(id.clone());
        Ok(id)
    }

    pub fn get(&self, name: &str) -> Option<&DomainId> {
        self.domains.iter().find(|d| d.name() == name)
    }

    pub fn lookup(&self, name: &str) -> Result<&DomainId> {
        self.get(name).ok_or_else(|| Error::UnknownDomain {
            name: name.to_string(),
            known: self.names(),
        })
    }

    pub fn names(&self) -> Vec<String> {
        self.domains.iter().map(|d| d.name().to_string()).collect()
    }

    pub fn domains(&self) -> &[DomainId] {
        &self.domains
    }

    pub fn len(&self) -> usize {
        self.domains.len()
    }

    pub fn is_empty(&self) -> bool {
        self.domains.is_empty()
    }
}

/// Normalized characters of one sentence.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Sentence {
    pub chars: Vec<char>,
    pub domain: DomainId,
}

impl Sentence {
    /// Normalizes a raw, unsegmented line. Whitespace is dropped.
    pub fn from_raw(line: &str, domain: DomainId) -> Self {
        let chars = normalize_text(line).chars().filter(|c| !c.is_whitespace()).collect();
        Sentence { chars, domain }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TaggedSentence {
    pub sentence: Sentence,
    pub tags: Vec<Label>,
}

impl TaggedSentence {
    pub fn len(&self) -> usize {
        self.tags.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tags.is_empty()
    }

    pub fn chars(&self) -> &[char] {
        &self.sentence.chars
    }

    pub fn words(&self) -> Vec<String> {
        decode_tags(&self.sentence.chars, &self.tags).expect("tags match chars")
    }

    /// Keeps at most `max_len` characters, tags cut in lockstep.
    pub fn truncated(&self, max_len: usize) -> TaggedSentence {
        let n = self.len().min(max_len);
        TaggedSentence {
            sentence: Sentence {
                chars: self.sentence.chars[..n].to_vec(),
                domain: self.sentence.domain.clone(),
            },
            tags: self.tags[..n].to_vec(),
        }
    }
}

/// All tagged sentences of one domain.
#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    pub domain: DomainId,
    pub sentences: Vec<TaggedSentence>,
}

impl Corpus {
    /// Builds a corpus from raw segmentations; each word is normalized on its own.
    pub fn from_words<W: AsRef<str>>(domain: DomainId, sentences: &[Vec<W>]) -> Result<Self> {
        let sentences = sentences
            .iter()
            .map(|words| {
                let normalized: Vec<String> = words
                    .iter()
                    .map(|w| normalize_text(w.as_ref()))
                    .filter(|w| !w.is_empty())
                    .collect();
                encode_tags(&normalized, domain.clone())
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Corpus { domain, sentences })
    }

    /// Reads a whitespace-segmented file. Blank lines are skipped.
    pub fn read(path: &Path, domain: DomainId) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: 0,
            message: e.to_string(),
        })?;
        let lines: Vec<Vec<&str>> = text
            .lines()
            .map(|l| l.split_whitespace().collect::<Vec<_>>())
            .filter(|w| !w.is_empty())
            .collect();
        Corpus::from_words(domain, &lines)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut text = String::new();
        for s in &self.sentences {
            text.push_str(&s.words().join(" "));
            text.push('\n');
        }
        fs::write(path, text)?;
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.sentences.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sentences.is_empty()
    }

    pub fn words(&self) -> Vec<Vec<String>> {
        self.sentences.iter().map(TaggedSentence::words).collect()
    }

    pub fn word_set(&self) -> BTreeSet<String> {
        self.sentences.iter().flat_map(|s| s.words()).collect()
    }

    pub fn chars(&self) -> impl Iterator<Item = char> + '_ {
        self.sentences.iter().flat_map(|s| s.sentence.chars.iter().copied())
    }

    pub fn positions(&self) -> usize {
        self.sentences.iter().map(TaggedSentence::len).sum()
    }
}

/// Path of a domain's split file inside a data directory.
pub fn corpus_path(dir: &Path, domain: &str, split: &str) -> PathBuf {
    dir.join(format!("{domain}.{split}.txt"))
}

/// Seeded shuffle, then a prefix cut: `round(ratio · n)` items (clamped to
/// `1..n`) go to the dev side. Both sides keep the original order.
pub fn split_dev<T: Clone>(items: &[T], ratio: f64, seed: u64) -> Result<(Vec<T>, Vec<T>)> {
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(Error::invalid(format!("dev ratio {ratio} not in (0, 1)")));
    }
    let n = items.len();
    if n < 2 {
        return Err(Error::invalid(format!("cannot split {n} sentences")));
    }
    let dev_n = ((ratio * n as f64).round() as usize).clamp(1, n - 1);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut is_dev = vec![false; n];
    for &i in &order[..dev_n] {
        is_dev[i] = true;
    }
    let mut train = Vec::with_capacity(n - dev_n);
    let mut dev = Vec::with_capacity(dev_n);
    for (item, d) in items.iter().zip(is_dev) {
        if d {
            dev.push(item.clone());
        } else {
            train.push(item.clone());
        }
    }
    Ok((train, dev))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn registry_rules() {
        let mut reg = DomainRegistry::new();
        let a = reg.register("pku").unwrap();
        let b = reg.register("ctb").unwrap();
        assert_eq!((a.index(), b.index()), (0, 1));
        assert!(reg.register("pku").is_err());
        assert!(reg.register("shared").is_err());
        let err = reg.lookup("msr").unwrap_err().to_string();
        assert!(err.contains("pku, ctb"), "{err}");
    }

    #[test]
    fn split_sizes() {
        let items: Vec<usize> = (0..100).collect();
        let (train, dev) = split_dev(&items, 0.1, 3).unwrap();
        assert_eq!((train.len(), dev.len()), (90, 10));
        assert_eq!(split_dev(&items, 0.1, 3).unwrap(), (train, dev));
        assert!(split_dev(&items[..1], 0.1, 3).is_err());
        assert!(split_dev(&items, 1.0, 3).is_err());
    }

    #[test]
    fn different_seeds_differ() {
        let items: Vec<usize> = (0..1000).collect();
        let (_, a) = split_dev(&items, 0.1, 1).unwrap();
        let (_, b) = split_dev(&items, 0.1, 2).unwrap();
        assert_ne!(a, b);
    }

    #[test]
    fn read_write_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let mut reg = DomainRegistry::new();
        let d = reg.register("pku").unwrap();
        let path = corpus_path(dir.path(), "pku", "train");
        fs::write(&path, "刘 国梁 赢得 世界 冠军\n\n我 用 iPhone１１\n").unwrap();
        let c = Corpus::read(&path, d).unwrap();
        assert_eq!(c.len(), 2);
        assert_eq!(
            c.sentences[1].words(),
            ["我", "用", &format!("{LATIN_PLACEHOLDER}{DIGIT_PLACEHOLDER}")]
        );
        let out = dir.path().join("out.txt");
        c.write(&out).unwrap();
        let again = Corpus::read(&out, c.domain.clone()).unwrap();
        assert_eq!(again, c);
    }

    proptest! {
        #[test]
        fn split_partitions(n in 2usize..300, ratio in 0.01f64..0.99, seed in any::<u64>()) {
            let items: Vec<usize> = (0..n).collect();
            let (train, dev) = split_dev(&items, ratio, seed).unwrap();
            let mut all: Vec<usize> = train.iter().chain(&dev).copied().collect();
            all.sort();
            prop_assert_eq!(all, items);
            let expected = ((ratio * n as f64).round() as usize).clamp(1, n - 1);
            prop_assert_eq!(dev.len(), expected);
        }
    }
}
