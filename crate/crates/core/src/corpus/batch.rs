use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::vocab::{Vocabulary, PAD_ID};
use super::{Corpus, DomainId, Label};
use crate::error::{Error, Result};

/// Sentences of one domain, padded to a common width.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub domain: DomainId,
    /// Row-major `[len(), width]` character ids, padded with [`PAD_ID`].
    pub ids: Vec<u32>,
    /// Row-major `[len(), width]` gold tags; padding cells hold `S` and are never read.
    pub tags: Vec<Label>,
    pub lengths: Vec<usize>,
    pub width: usize,
    /// Index of each row's sentence within its corpus.
    pub sentence_indices: Vec<usize>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.lengths.len()
    }

    pub fn is_empty(&self) -> bool {
        self.lengths.is_empty()
    }

    /// Unpadded ids of row `i`.
    pub fn row_ids(&self, i: usize) -> &[u32] {
        &self.ids[i * self.width..i * self.width + self.lengths[i]]
    }

    pub fn row_tags(&self, i: usize) -> &[Label] {
        &self.tags[i * self.width..i * self.width + self.lengths[i]]
    }

    pub fn positions(&self) -> usize {
        self.lengths.iter().sum()
    }
}

fn build_batch(corpus: &Corpus, indices: &[usize], vocab: &Vocabulary, max_len: usize) -> Batch {
    let lengths: Vec<usize> = indices
        .iter()
        .map(|&i| corpus.sentences[i].len().min(max_len))
        .collect();
    let width = lengths.iter().copied().max().unwrap_or(0);
    let mut ids = vec![PAD_ID; indices.len() * width];
    let mut tags = vec![Label::S; indices.len() * width];
    for (row, (&i, &len)) in indices.iter().zip(&lengths).enumerate() {
        let s = &corpus.sentences[i];
        for j in 0..len {
            ids[row * width + j] = vocab.id(s.sentence.chars[j]);
            tags[row * width + j] = s.tags[j];
        }
    }
    Batch {
        domain: corpus.domain.clone(),
        ids,
        tags,
        lengths,
        width,
        sentence_indices: indices.to_vec(),
    }
}

/// One epoch of single-domain batches.
///
/// Each corpus is shuffled and chunked; batches are then drawn from the
/// domains with probability proportional to the number of sentences each
/// still has queued, so domains stay interleaved in proportion to corpus
/// size. Sentences longer than `max_len` are truncated with their tags.
/// Empty sentences are skipped.
pub fn make_batches(
    corpora: &[Corpus],
    vocab: &Vocabulary,
    batch_size: usize,
    max_len: usize,
    seed: u64,
) -> Result<Vec<Batch>> {
    if batch_size < 1 {
        return Err(Error::invalid("batch size must be at least 1"));
    }
    if corpora.is_empty() {
        return Err(Error::invalid("make_batches needs at least one corpus"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut queues: Vec<Vec<Vec<usize>>> = corpora
        .iter()
        .map(|c| {
            let mut idx: Vec<usize> = (0..c.sentences.len()).filter(|&i| !c.sentences[i].is_empty()).collect();
            idx.shuffle(&mut rng);
            let mut chunks: Vec<Vec<usize>> = idx.chunks(batch_size).map(|c| c.to_vec()).collect();
            chunks.reverse();
            chunks
        })
        .collect();
    let mut out = Vec::new();
    loop {
        let weights: Vec<usize> = queues.iter().map(|q| q.iter().map(Vec::len).sum()).collect();
        let total: usize = weights.iter().sum();
        if total == 0 {
            break;
        }
        let mut pick = rng.gen_range(0..total);
        let mut domain = 0;
        for (d, &w) in weights.iter().enumerate() {
            if pick < w {
                domain = d;
                break;
            }
            pick -= w;
        }
        let chunk = queues[domain].pop().expect("non-empty queue");
        out.push(build_batch(&corpora[domain], &chunk, vocab, max_len));
    }
    Ok(out)
}
