//! A complete segmenter: vocabulary, encoder, projections and CRF, with
//! batched inference and checkpoint persistence.

use std::collections::BTreeMap;
use std::ops::Range;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::{decode_tags, normalize_with_spans, tag_spans, DomainRegistry, Label, Vocabulary, SHARED_DOMAIN};
use crate::crf::{emission_scores_graph, score_rows, viterbi, CrfParams};
use crate::encoder::{
    embed_graph, encode_graph, pack_segments, AttentionRecord, Dropout, EncoderConfig, EncoderParams,
};
use crate::error::{Error, Result};
use crate::numerics::checkpoint::{read_checkpoint, write_checkpoint};
use crate::numerics::{derive_seed, xavier_uniform_init, Graph, Tensor, Var};
use crate::projection::{project_graph, project_shared_only_graph, ProjectionParams};

pub const VOCAB_FILE: &str = "vocab.txt";
pub const LAYER_LOGITS: &str = "probe.layer_logits";

/// Labels per sentence and, when captured, attention of its first window.
type TaggedWithAttention = (Vec<Vec<Label>>, Vec<Option<AttentionRecord>>);

/// Every trainable tensor of a segmenter.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams<T> {
    pub encoder: EncoderParams<T>,
    pub projection: ProjectionParams<T>,
    pub crf: CrfParams<T>,
    /// Logits of a softmax mix over layer outputs; when present the mix
    /// replaces the top layer as the projection input.
    pub layer_logits: Option<T>,
}

impl<T> ModelParams<T> {
    pub fn map<'a, U>(&'a self, domains: &DomainRegistry, f: &mut impl FnMut(&str, &'a T) -> U) -> ModelParams<U> {
        ModelParams {
            encoder: self.encoder.map(f),
            projection: self.projection.map(domains, f),
            crf: self.crf.map(f),
            layer_logits: self.layer_logits.as_ref().map(|t| f(LAYER_LOGITS, t)),
        }
    }

    pub fn for_each_mut<'a>(&'a mut self, domains: &DomainRegistry, f: &mut impl FnMut(&str, &'a mut T)) {
        self.encoder.for_each_mut(f);
        self.projection.for_each_mut(domains, f);
        self.crf.for_each_mut(f);
        if let Some(t) = self.layer_logits.as_mut() {
            f(LAYER_LOGITS, t);
        }
    }
}

/// Which projection feeds the emission head.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Criterion {
    Domain(usize),
    /// Shared projection in both slots.
    Shared,
}

/// Segmentation of one input line.
#[derive(Debug, Clone, PartialEq)]
pub struct SegmentationResult {
    /// Words as substrings of the input, whitespace removed.
    pub words: Vec<String>,
    /// Byte range of each word in the input.
    pub spans: Vec<Range<usize>>,
    pub tags: Vec<Label>,
    pub attention: Option<AttentionRecord>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Metadata {
    config: EncoderConfig,
    domains: Vec<String>,
    shared: bool,
    layer_mix: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub config: EncoderConfig,
    pub vocab: Vocabulary,
    pub domains: DomainRegistry,
    pub params: ModelParams<Tensor>,
}

/// Emission scores `[rows, 4]` for packed sentences, built on `g`.
#[allow(clippy::too_many_arguments)]
pub fn emissions_graph<'g>(
    g: &'g Graph,
    config: &EncoderConfig,
    domains: &DomainRegistry,
    p: &ModelParams<Var<'g>>,
    ids: &[u32],
    lengths: &[usize],
    criterion: Criterion,
    mut dropout: Option<&mut Dropout<'_>>,
    capture: bool,
) -> Result<(Var<'g>, Option<Vec<AttentionRecord>>)> {
    let segments = pack_segments(lengths);
    let x = embed_graph(g, &p.encoder, ids, &segments, dropout.as_deref_mut())?;
    let out = encode_graph(g, &p.encoder, x, &segments, config.num_heads, dropout, capture)?;
    let features = match p.layer_logits {
        Some(logits) => {
            if out.layers.is_empty() {
                return Err(Error::invalid("layer mix needs at least one layer"));
            }
            let w = g.softmax_rows(logits);
            g.mix(&out.layers, w)?
        }
        None => out.hidden,
    };
    let (hd, hs) = match criterion {
        Criterion::Domain(d) => project_graph(g, &p.projection, domains, features, d)?,
        Criterion::Shared => project_shared_only_graph(g, &p.projection, features)?,
    };
    Ok((emission_scores_graph(g, hd, hs, &p.crf)?, out.attention))
}

impl Model {
    /// Randomly initialized model. Without `shared`, the private projection
    /// fills both emission slots.
    pub fn new(
        config: EncoderConfig,
        vocab: Vocabulary,
        domains: DomainRegistry,
        shared: bool,
        seed: u64,
    ) -> Result<Self> {
        if config.vocab_size != vocab.len() {
            return Err(Error::invalid(format!(
                "config vocab size {} but vocabulary has {} entries",
                config.vocab_size,
                vocab.len()
            )));
        }
        if domains.is_empty() {
            return Err(Error::invalid("a model needs at least one domain"));
        }
        let encoder = EncoderParams::init(&config, derive_seed(seed, 1))?;
        let projection = ProjectionParams::init(config.d_h, domains.len(), shared, derive_seed(seed, 2))?;
        let crf = CrfParams {
            w_s: xavier_uniform_init(&[2 * config.d_h, 4], derive_seed(seed, 3))?,
            b_s: Tensor::zeros([4]),
            trans: Tensor::zeros([4, 4]),
        };
        Ok(Model {
            config,
            vocab,
            domains,
            params: ModelParams {
                encoder,
                projection,
                crf,
                layer_logits: None,
            },
        })
    }

    pub fn has_shared(&self) -> bool {
        self.params.projection.shared.is_some()
    }

    /// Resolves a domain name, or `shared` for the shared projection.
    pub fn criterion(&self, name: &str) -> Result<Criterion> {
        if name == SHARED_DOMAIN {
            if !self.has_shared() {
                return Err(Error::invalid("model has no shared projection"));
            }
            return Ok(Criterion::Shared);
        }
        Ok(Criterion::Domain(self.domains.lookup(name)?.index()))
    }

    pub fn num_layers(&self) -> usize {
        self.params.encoder.num_layers()
    }

    pub fn named_params(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        self.params.map(&self.domains, &mut |n, t| out.push((n.to_string(), t)));
        out
    }

    pub fn param_count(&self) -> usize {
        self.named_params().iter().map(|(_, t)| t.len()).sum()
    }

    /// Binds every parameter as a graph constant.
    pub fn bind_constants<'g>(&self, g: &'g Graph) -> ModelParams<Var<'g>> {
        self.params.map(&self.domains, &mut |_, t| g.constant(t.clone()))
    }

    /// Inference emissions for packed sentences.
    pub fn emissions(
        &self,
        ids: &[u32],
        lengths: &[usize],
        criterion: Criterion,
        capture: bool,
    ) -> Result<(Tensor, Option<Vec<AttentionRecord>>)> {
        let g = Graph::inference();
        let bound = self.bind_constants(&g);
        let (e, att) = emissions_graph(
            &g,
            &self.config,
            &self.domains,
            &bound,
            ids,
            lengths,
            criterion,
            None,
            capture,
        )?;
        Ok(((*e.value()).clone(), att))
    }

    /// Copy whose attention and feed-forward kernels run in binary16.
    pub fn to_half(&self) -> Model {
        let mut m = self.clone();
        m.params.encoder = self.params.encoder.quantize_kernels();
        m
    }

    /// Viterbi labels for normalized character sequences.
    ///
    /// Sentences longer than the position table are decoded in consecutive
    /// windows. Empty sentences yield no labels.
    pub fn tag(&self, sentences: &[Vec<char>], criterion: Criterion, batch_size: usize) -> Result<Vec<Vec<Label>>> {
        let (tags, _) = self.tag_inner(sentences, criterion, batch_size, false)?;
        Ok(tags)
    }

    fn tag_inner(
        &self,
        sentences: &[Vec<char>],
        criterion: Criterion,
        batch_size: usize,
        capture: bool,
    ) -> Result<TaggedWithAttention> {
        if batch_size == 0 {
            return Err(Error::invalid("batch size must be at least 1"));
        }
        let max = self.config.max_seq_len;
        // (sentence, window start, window chars)
        let mut pieces: Vec<(usize, &[char])> = Vec::new();
        for (i, s) in sentences.iter().enumerate() {
            for chunk in s.chunks(max) {
                pieces.push((i, chunk));
            }
        }
        let trans = self.params.crf.transitions()?;
        let mut tags: Vec<Vec<Label>> = sentences.iter().map(|s| Vec::with_capacity(s.len())).collect();
        let mut records: Vec<Option<AttentionRecord>> = vec![None; sentences.len()];
        for batch in pieces.chunks(batch_size) {
            let lengths: Vec<usize> = batch.iter().map(|(_, c)| c.len()).collect();
            let ids: Vec<u32> = batch.iter().flat_map(|(_, c)| self.vocab.encode(c)).collect();
            let (e, att) = self.emissions(&ids, &lengths, criterion, capture)?;
            let rows = score_rows(&e)?;
            let mut start = 0;
            for (k, ((i, _), len)) in batch.iter().zip(&lengths).enumerate() {
                let (path, _) = viterbi(&rows[start..start + len], &trans)?;
                tags[*i].extend(path);
                if let Some(att) = &att {
                    if records[*i].is_none() {
                        records[*i] = Some(att[k].clone());
                    }
                }
                start += len;
            }
        }
        Ok((tags, records))
    }

    /// Words over normalized characters.
    pub fn segment_chars(
        &self,
        sentences: &[Vec<char>],
        criterion: Criterion,
        batch_size: usize,
    ) -> Result<Vec<Vec<String>>> {
        let tags = self.tag(sentences, criterion, batch_size)?;
        sentences.iter().zip(&tags).map(|(s, t)| decode_tags(s, t)).collect()
    }

    /// Segments raw lines; words are reported as substrings of the input.
    /// Attention of the first window is kept when `capture` is set.
    pub fn segment_text<S: AsRef<str>>(
        &self,
        lines: &[S],
        criterion: Criterion,
        batch_size: usize,
        capture: bool,
    ) -> Result<Vec<SegmentationResult>> {
        let spans: Vec<Vec<(char, Range<usize>)>> = lines
            .iter()
            .map(|l| {
                normalize_with_spans(l.as_ref())
                    .into_iter()
                    .filter(|(c, _)| !c.is_whitespace())
                    .collect()
            })
            .collect();
        let chars: Vec<Vec<char>> = spans.iter().map(|s| s.iter().map(|(c, _)| *c).collect()).collect();
        let (tags, records) = self.tag_inner(&chars, criterion, batch_size, capture)?;
        let mut out = Vec::with_capacity(lines.len());
        for (((line, sp), t), rec) in lines.iter().zip(&spans).zip(tags).zip(records) {
            let line = line.as_ref();
            let mut words = Vec::new();
            let mut ranges = Vec::new();
            for (a, b) in tag_spans(&t) {
                let word: String = sp[a..b].iter().map(|(_, r)| &line[r.clone()]).collect();
                words.push(word);
                ranges.push(sp[a].1.start..sp[b - 1].1.end);
            }
            out.push(SegmentationResult {
                words,
                spans: ranges,
                tags: t,
                attention: rec,
            });
        }
        Ok(out)
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        let meta = Metadata {
            config: self.config,
            domains: self.domains.names(),
            shared: self.has_shared(),
            layer_mix: self.params.layer_logits.is_some(),
        };
        write_checkpoint(dir, serde_json::to_value(meta)?, self.named_params())?;
        self.vocab.save(&dir.join(VOCAB_FILE))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let err = |message: String| Error::Checkpoint {
            path: dir.to_path_buf(),
            message,
        };
        let (meta, mut tensors) = read_checkpoint(dir)?;
        let meta: Metadata = serde_json::from_value(meta).map_err(|e| err(e.to_string()))?;
        let vocab = Vocabulary::load(&dir.join(VOCAB_FILE)).map_err(|e| err(e.to_string()))?;
        let domains = DomainRegistry::from_names(&meta.domains).map_err(|e| err(e.to_string()))?;
        meta.config.validate().map_err(|e| err(e.to_string()))?;
        let mut params = ModelParams {
            encoder: EncoderParams::zeros(&meta.config),
            projection: ProjectionParams::init(meta.config.d_h, domains.len(), meta.shared, 0)?,
            crf: CrfParams {
                w_s: Tensor::zeros([2 * meta.config.d_h, 4]),
                b_s: Tensor::zeros([4]),
                trans: Tensor::zeros([4, 4]),
            },
            layer_logits: meta.layer_mix.then(|| Tensor::zeros([meta.config.num_layers])),
        };
        let mut problem: Option<String> = None;
        params.for_each_mut(&domains, &mut |name, slot| match tensors.remove(name) {
            Some(t) if t.shape() == slot.shape() => *slot = t,
            Some(t) => {
                problem.get_or_insert(format!(
                    "`{name}` has shape {:?}, expected {:?}",
                    t.shape(),
                    slot.shape()
                ));
            }
            None => {
                problem.get_or_insert(format!("missing parameter `{name}`"));
            }
        });
        if let Some(p) = problem {
            return Err(err(p));
        }
        if let Some(extra) = tensors.keys().next() {
            return Err(err(format!("unexpected parameter `{extra}`")));
        }
        if meta.config.vocab_size != vocab.len() {
            return Err(err("vocabulary size disagrees with the configuration".into()));
        }
        Ok(Model {
            config: meta.config,
            vocab,
            domains,
            params,
        })
    }

    /// Parameter values keyed by name.
    pub fn snapshot(&self) -> BTreeMap<String, Tensor> {
        self.named_params().into_iter().map(|(n, t)| (n, t.clone())).collect()
    }
}
