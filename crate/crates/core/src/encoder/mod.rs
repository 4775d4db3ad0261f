//! Character encoder: token and position embeddings followed by a stack of
//! post-norm transformer blocks.
//!
//! Sentences are packed as consecutive rows of one matrix. Each sentence is a
//! [`Segment`]; attention never crosses segment boundaries.

mod params;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use params::{is_half_kernel, EncoderConfig, EncoderParams, LayerNormParams, LayerParams, Linear};

use crate::error::{Error, Result};
use crate::numerics::{Graph, Segment, Tensor, Var};

pub const LAYER_NORM_EPS: f64 = 1e-12;

/// Dropout settings for a training forward pass.
pub struct Dropout<'a> {
    pub p: f64,
    pub rng: &'a mut ChaCha8Rng,
}

/// Softmaxed attention of one sentence, indexed `[layer][head]`, each `[len, len]`.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionRecord {
    pub layers: Vec<Vec<Tensor>>,
}

impl AttentionRecord {
    pub fn len(&self) -> usize {
        self.layers.first().and_then(|h| h.first()).map_or(0, Tensor::rows)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Result of [`encode_graph`].
pub struct EncoderOutput<'g> {
    /// Output of the top block, `[rows, d_h]`.
    pub hidden: Var<'g>,
    /// Output of every block, bottom first.
    pub layers: Vec<Var<'g>>,
    /// One record per segment when capture was requested.
    pub attention: Option<Vec<AttentionRecord>>,
}

/// Segments covering `lengths` packed back to back.
pub fn pack_segments(lengths: &[usize]) -> Vec<Segment> {
    let mut start = 0;
    lengths
        .iter()
        .map(|&len| {
            let s = Segment::new(start, len);
            start += len;
            s
        })
        .collect()
}

/// Token plus position embedding, layer norm and dropout.
///
/// `ids` holds the packed rows; positions restart at 0 in every segment.
pub fn embed_graph<'g>(
    g: &'g Graph,
    p: &EncoderParams<Var<'g>>,
    ids: &[u32],
    segments: &[Segment],
    dropout: Option<&mut Dropout<'_>>,
) -> Result<Var<'g>> {
    let rows: usize = segments.iter().map(|s| s.len).sum();
    if rows != ids.len() {
        return Err(Error::invalid(format!(
            "{} ids for segments covering {rows} rows",
            ids.len()
        )));
    }
    let max_pos = p.pos_emb.shape()[0];
    let mut positions = Vec::with_capacity(rows);
    for s in segments {
        if s.len > max_pos {
            return Err(Error::invalid(format!(
                "sequence of {} characters exceeds the {max_pos}-position limit",
                s.len
            )));
        }
        positions.extend(0..s.len);
    }
    let tok_ids: Vec<usize> = ids.iter().map(|&i| i as usize).collect();
    let tok = g.gather_rows(p.tok_emb, &tok_ids)?;
    let pos = g.gather_rows(p.pos_emb, &positions)?;
    let x = g.add(tok, pos)?;
    let x = g.layer_norm(x, p.emb_norm.gamma, p.emb_norm.beta, LAYER_NORM_EPS)?;
    match dropout {
        Some(d) => g.dropout(x, d.p, d.rng),
        None => Ok(x),
    }
}

fn block<'g>(
    g: &'g Graph,
    l: &LayerParams<Var<'g>>,
    x: Var<'g>,
    segments: &[Segment],
    heads: usize,
    dropout: &mut Option<&mut Dropout<'_>>,
    capture: bool,
) -> Result<(Var<'g>, Option<Vec<Vec<Tensor>>>)> {
    let q = g.linear(x, l.q.w, l.q.b)?;
    let k = g.linear(x, l.k.w, l.k.b)?;
    let v = g.linear(x, l.v.w, l.v.b)?;
    let (ctx, probs) = g.attention(q, k, v, segments, heads, capture)?;
    let mut a = g.linear(ctx, l.o.w, l.o.b)?;
    if let Some(d) = dropout.as_deref_mut() {
        a = g.dropout(a, d.p, d.rng)?;
    }
    let x1 = g.layer_norm(g.add(x, a)?, l.attn_norm.gamma, l.attn_norm.beta, LAYER_NORM_EPS)?;
    let f = g.gelu(g.linear(x1, l.ffn_in.w, l.ffn_in.b)?);
    let mut f = g.linear(f, l.ffn_out.w, l.ffn_out.b)?;
    if let Some(d) = dropout.as_deref_mut() {
        f = g.dropout(f, d.p, d.rng)?;
    }
    let x2 = g.layer_norm(g.add(x1, f)?, l.ffn_norm.gamma, l.ffn_norm.beta, LAYER_NORM_EPS)?;
    Ok((x2, probs))
}

/// Runs the block stack over embedded rows.
pub fn encode_graph<'g>(
    g: &'g Graph,
    p: &EncoderParams<Var<'g>>,
    x: Var<'g>,
    segments: &[Segment],
    heads: usize,
    mut dropout: Option<&mut Dropout<'_>>,
    capture: bool,
) -> Result<EncoderOutput<'g>> {
    let mut h = x;
    let mut layers = Vec::with_capacity(p.layers.len());
    let mut records: Vec<AttentionRecord> = if capture {
        segments
            .iter()
            .map(|_| AttentionRecord { layers: Vec::new() })
            .collect()
    } else {
        Vec::new()
    };
    for l in &p.layers {
        let (next, probs) = block(g, l, h, segments, heads, &mut dropout, capture)?;
        if let Some(probs) = probs {
            for (rec, heads) in records.iter_mut().zip(probs) {
                rec.layers.push(heads);
            }
        }
        layers.push(next);
        h = next;
    }
    Ok(EncoderOutput {
        hidden: h,
        layers,
        attention: capture.then_some(records),
    })
}

/// Binds every tensor of `p` as a graph constant.
pub fn bind_constants<'g>(g: &'g Graph, p: &EncoderParams<Tensor>) -> EncoderParams<Var<'g>> {
    p.map(&mut |_, t| g.constant(t.clone()))
}

/// Inference-only encoding of packed sentences. Returns the top hidden rows
/// and, if requested, per-sentence attention.
pub fn encode(
    cfg: &EncoderConfig,
    p: &EncoderParams<Tensor>,
    ids: &[u32],
    lengths: &[usize],
    capture: bool,
) -> Result<(Tensor, Option<Vec<AttentionRecord>>)> {
    let g = Graph::inference();
    let bound = bind_constants(&g, p);
    let segments = pack_segments(lengths);
    let x = embed_graph(&g, &bound, ids, &segments, None)?;
    let out = encode_graph(&g, &bound, x, &segments, cfg.num_heads, None, capture)?;
    Ok(((*out.hidden.value()).clone(), out.attention))
}

/// Average over records, layers and heads of the attention row of
/// `query`. Rows of shorter sentences are zero-padded to the longest one.
pub fn mean_attention_by_offset(records: &[AttentionRecord], query: usize) -> Result<Vec<f64>> {
    if records.is_empty() {
        return Err(Error::invalid("no attention records to average"));
    }
    let width = records.iter().map(AttentionRecord::len).max().unwrap_or(0);
    let mut acc = vec![0.0; width];
    let mut count = 0usize;
    for (i, r) in records.iter().enumerate() {
        if query >= r.len() {
            return Err(Error::invalid(format!(
                "query position {query} outside sentence {i} of length {}",
                r.len()
            )));
        }
        for heads in &r.layers {
            for m in heads {
                for (a, x) in acc.iter_mut().zip(m.row(query)) {
                    *a += x;
                }
                count += 1;
            }
        }
    }
    if count == 0 {
        return Err(Error::invalid("attention records hold no layers"));
    }
    acc.iter_mut().for_each(|a| *a /= count as f64);
    Ok(acc)
}

/// Serialized attention for one sentence.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct AttentionExport {
    pub sentence: String,
    /// `[layer][head]`, each a row-major `len × len` matrix.
    pub layers: Vec<Vec<Vec<f64>>>,
    pub offset_average: Vec<f64>,
}

impl AttentionExport {
    pub fn new(sentence: String, record: &AttentionRecord, query: usize) -> Result<Self> {
        let offset_average = mean_attention_by_offset(std::slice::from_ref(record), query)?;
        Ok(AttentionExport {
            sentence,
            layers: record
                .layers
                .iter()
                .map(|heads| heads.iter().map(|m| m.data().to_vec()).collect())
                .collect(),
            offset_average,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::gelu;
    use proptest::prelude::*;

    fn tiny(layers: usize) -> EncoderConfig {
        EncoderConfig {
            num_layers: layers,
            num_heads: 2,
            d_h: 4,
            d_ff: 6,
            max_seq_len: 16,
            dropout_p: 0.0,
            vocab_size: 9,
        }
    }

    fn layer_norm_row(x: &[f64], gamma: &[f64], beta: &[f64]) -> Vec<f64> {
        let n = x.len() as f64;
        let mean = x.iter().sum::<f64>() / n;
        let var = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        x.iter()
            .zip(gamma.iter().zip(beta))
            .map(|(v, (g, b))| (v - mean) / (var + LAYER_NORM_EPS).sqrt() * g + b)
            .collect()
    }

    fn affine(x: &[Vec<f64>], l: &Linear<Tensor>) -> Vec<Vec<f64>> {
        let (fin, fout) = (l.w.rows(), l.w.cols());
        x.iter()
            .map(|row| {
                (0..fout)
                    .map(|j| l.b.data()[j] + (0..fin).map(|i| row[i] * l.w.get(i, j)).sum::<f64>())
                    .collect()
            })
            .collect()
    }

    /// Scalar-loop reference of the whole encoder for a single sentence.
    fn reference(cfg: &EncoderConfig, p: &EncoderParams<Tensor>, ids: &[u32]) -> Vec<Vec<f64>> {
        let n = ids.len();
        let d = cfg.d_h;
        let dk = d / cfg.num_heads;
        let mut x: Vec<Vec<f64>> = ids
            .iter()
            .enumerate()
            .map(|(t, &id)| {
                let row: Vec<f64> = (0..d)
                    .map(|c| p.tok_emb.get(id as usize, c) + p.pos_emb.get(t, c))
                    .collect();
                layer_norm_row(&row, p.emb_norm.gamma.data(), p.emb_norm.beta.data())
            })
            .collect();
        for l in &p.layers {
            let (q, k, v) = (affine(&x, &l.q), affine(&x, &l.k), affine(&x, &l.v));
            let mut ctx = vec![vec![0.0; d]; n];
            for h in 0..cfg.num_heads {
                for i in 0..n {
                    let scores: Vec<f64> = (0..n)
                        .map(|j| (0..dk).map(|c| q[i][h * dk + c] * k[j][h * dk + c]).sum::<f64>() / (dk as f64).sqrt())
                        .collect();
                    let m = scores.iter().cloned().fold(f64::MIN, f64::max);
                    let z: f64 = scores.iter().map(|s| (s - m).exp()).sum();
                    for j in 0..n {
                        let w = (scores[j] - m).exp() / z;
                        for c in 0..dk {
                            ctx[i][h * dk + c] += w * v[j][h * dk + c];
                        }
                    }
                }
            }
            let a = affine(&ctx, &l.o);
            let x1: Vec<Vec<f64>> = x
                .iter()
                .zip(&a)
                .map(|(r, ar)| {
                    let s: Vec<f64> = r.iter().zip(ar).map(|(u, w)| u + w).collect();
                    layer_norm_row(&s, l.attn_norm.gamma.data(), l.attn_norm.beta.data())
                })
                .collect();
            let f: Vec<Vec<f64>> = affine(&x1, &l.ffn_in)
                .into_iter()
                .map(|r| r.into_iter().map(gelu).collect())
                .collect();
            let f = affine(&f, &l.ffn_out);
            x = x1
                .iter()
                .zip(&f)
                .map(|(r, fr)| {
                    let s: Vec<f64> = r.iter().zip(fr).map(|(u, w)| u + w).collect();
                    layer_norm_row(&s, l.ffn_norm.gamma.data(), l.ffn_norm.beta.data())
                })
                .collect();
        }
        x
    }

    #[test]
    fn matches_scalar_reference() {
        let cfg = tiny(2);
        let p = EncoderParams::init(&cfg, 5).unwrap();
        let ids = [2u32, 7, 1, 4, 4];
        let (h, _) = encode(&cfg, &p, &ids, &[5], false).unwrap();
        let want = reference(&cfg, &p, &ids);
        for (r, row) in want.iter().enumerate() {
            for (c, w) in row.iter().enumerate() {
                assert!((h.get(r, c) - w).abs() < 1e-9, "({r},{c}) {} vs {w}", h.get(r, c));
            }
        }
    }

    #[test]
    fn packing_does_not_leak_across_sentences() {
        let cfg = tiny(2);
        let p = EncoderParams::init(&cfg, 11).unwrap();
        let (alone, _) = encode(&cfg, &p, &[3, 4, 5], &[3], false).unwrap();
        let (packed, _) = encode(&cfg, &p, &[1, 2, 3, 4, 5, 6, 7], &[2, 3, 2], false).unwrap();
        for r in 0..3 {
            for c in 0..cfg.d_h {
                assert!((alone.get(r, c) - packed.get(r + 2, c)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn attention_rows_are_distributions() {
        let cfg = tiny(3);
        let p = EncoderParams::init(&cfg, 2).unwrap();
        let (_, att) = encode(&cfg, &p, &[1, 2, 3, 4, 5], &[2, 3], true).unwrap();
        let att = att.unwrap();
        assert_eq!(att.len(), 2);
        assert_eq!(att[1].layers.len(), 3);
        assert_eq!(att[1].layers[0].len(), 2);
        for rec in &att {
            for heads in &rec.layers {
                for m in heads {
                    for r in 0..m.rows() {
                        assert!((m.row(r).iter().sum::<f64>() - 1.0).abs() < 1e-12);
                    }
                }
            }
        }
    }

    #[test]
    fn over_length_is_rejected() {
        let cfg = tiny(1);
        let p = EncoderParams::init(&cfg, 2).unwrap();
        let ids = vec![1u32; 17];
        assert!(encode(&cfg, &p, &ids, &[17], false).is_err());
        assert!(encode(&cfg, &p, &[1, 2], &[3], false).is_err());
    }

    #[test]
    fn truncate_keeps_bottom_layers() {
        let cfg = tiny(4);
        let p = EncoderParams::init(&cfg, 9).unwrap();
        let s = p.truncate(2).unwrap();
        assert_eq!(s.layers, p.layers[..2]);
        assert_eq!(s.tok_emb, p.tok_emb);
        assert!(p.truncate(5).is_err());
        assert_eq!(p.truncate(0).unwrap().num_layers(), 0);
    }

    #[test]
    fn parameter_names_are_unique() {
        let p = EncoderParams::init(&tiny(2), 1).unwrap();
        let mut names = Vec::new();
        p.map(&mut |n, _| names.push(n.to_string()));
        let total = names.len();
        names.sort();
        names.dedup();
        assert_eq!(names.len(), total);
        assert_eq!(total, 4 + 2 * 16);
        assert!(names.contains(&"enc.layer.1.ffn.out.W".to_string()));
    }

    #[test]
    fn only_block_kernels_are_quantized() {
        let p = EncoderParams::init(&tiny(1), 1).unwrap();
        let q = p.quantize_kernels();
        assert_eq!(q.tok_emb, p.tok_emb);
        assert_ne!(q.layers[0].q.w, p.layers[0].q.w);
        assert_eq!(q.layers[0].q.b, p.layers[0].q.b);
        assert!(is_half_kernel("enc.layer.0.ffn.in.W"));
        assert!(!is_half_kernel("enc.layer.0.ffn_norm.gamma"));
    }

    #[test]
    fn offset_average() {
        let m = |rows: Vec<Vec<f64>>| Tensor::from_rows(&rows).unwrap();
        let a = AttentionRecord {
            layers: vec![vec![m(vec![vec![0.5, 0.5], vec![0.25, 0.75]])]],
        };
        let b = AttentionRecord {
            layers: vec![vec![m(vec![
                vec![1.0, 0.0, 0.0],
                vec![0.0, 0.0, 1.0],
                vec![0.0, 1.0, 0.0],
            ])]],
        };
        let avg = mean_attention_by_offset(&[a.clone(), b], 1).unwrap();
        assert_eq!(avg, vec![0.125, 0.375, 0.5]);
        assert!(mean_attention_by_offset(&[], 0).is_err());
        assert!(mean_attention_by_offset(&[a], 2).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]
        /// Permuting the packed sentences permutes the output rows.
        #[test]
        fn packing_order_invariant(lens in prop::collection::vec(1usize..6, 1..4), seed in 0u64..50) {
            let cfg = tiny(1);
            let p = EncoderParams::init(&cfg, seed).unwrap();
            let total: usize = lens.iter().sum();
            let ids: Vec<u32> = (0..total).map(|i| ((i * 7 + seed as usize) % 9) as u32).collect();
            let (fwd, _) = encode(&cfg, &p, &ids, &lens, false).unwrap();
            let mut starts = vec![0];
            for l in &lens { starts.push(starts.last().unwrap() + l); }
            let mut rev_ids = Vec::new();
            for i in (0..lens.len()).rev() { rev_ids.extend_from_slice(&ids[starts[i]..starts[i + 1]]); }
            let rev_lens: Vec<usize> = lens.iter().rev().copied().collect();
            let (rev, _) = encode(&cfg, &p, &rev_ids, &rev_lens, false).unwrap();
            let mut r = 0;
            for i in (0..lens.len()).rev() {
                for t in 0..lens[i] {
                    for c in 0..cfg.d_h {
                        prop_assert!((rev.get(r, c) - fwd.get(starts[i] + t, c)).abs() < 1e-10);
                    }
                    r += 1;
                }
            }
        }
    }
}
