//! Word-level scoring, OOV statistics and decode-speed measurement.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Criterion, Model};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    /// Recall over gold words missing from the training vocabulary; `None`
    /// when no vocabulary was supplied.
    pub oov_recall: Option<f64>,
    pub gold_words: usize,
    pub sys_words: usize,
    pub correct: usize,
}

impl MetricsReport {
    pub fn to_tsv(&self) -> String {
        let oov = self.oov_recall.map_or("-".to_string(), |r| format!("{r:.6}"));
        format!(
            "precision\trecall\tf1\toov_recall\tgold_words\tsys_words\tcorrect\n{:.6}\t{:.6}\t{:.6}\t{oov}\t{}\t{}\t{}\n",
            self.precision, self.recall, self.f1, self.gold_words, self.sys_words, self.correct
        )
    }
}

/// Character-offset spans of a segmentation.
fn spans<W: AsRef<str>>(words: &[W]) -> Vec<(usize, usize, &str)> {
    let mut out = Vec::with_capacity(words.len());
    let mut pos = 0;
    for w in words {
        let w = w.as_ref();
        let n = w.chars().count();
        out.push((pos, pos + n, w));
        pos += n;
    }
    out
}

fn check_same_text<W: AsRef<str>>(index: usize, gold: &[W], sys: &[W]) -> Result<()> {
    let g: String = gold.iter().map(AsRef::as_ref).collect();
    let s: String = sys.iter().map(AsRef::as_ref).collect();
    if g != s {
        return Err(Error::Mismatch {
            index,
            message: format!("gold text {g:?} differs from system text {s:?}"),
        });
    }
    Ok(())
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

/// Micro-averaged precision, recall and F1 with words matched as character
/// spans. With `train_words`, also reports OOV recall.
pub fn evaluate<W: AsRef<str>>(
    gold: &[Vec<W>],
    sys: &[Vec<W>],
    train_words: Option<&BTreeSet<String>>,
) -> Result<MetricsReport> {
    if gold.len() != sys.len() {
        return Err(Error::Mismatch {
            index: gold.len().min(sys.len()),
            message: format!("{} gold sentences but {} system sentences", gold.len(), sys.len()),
        });
    }
    let (mut n_gold, mut n_sys, mut correct) = (0, 0, 0);
    let (mut oov_total, mut oov_hit) = (0, 0);
    for (i, (g, s)) in gold.iter().zip(sys).enumerate() {
        check_same_text(i, g, s)?;
        let gs = spans(g);
        let ss: BTreeSet<(usize, usize)> = spans(s).into_iter().map(|(a, b, _)| (a, b)).collect();
        n_gold += gs.len();
        n_sys += ss.len();
        for (a, b, w) in gs {
            let hit = ss.contains(&(a, b));
            correct += usize::from(hit);
            if let Some(vocab) = train_words {
                if !vocab.contains(w) {
                    oov_total += 1;
                    oov_hit += usize::from(hit);
                }
            }
        }
    }
    let precision = ratio(correct, n_sys);
    let recall = ratio(correct, n_gold);
    let f1 = if precision + recall > 0.0 {
        2.0 * precision * recall / (precision + recall)
    } else {
        0.0
    };
    let oov_recall = train_words.map(|_| if oov_total == 0 { 1.0 } else { ratio(oov_hit, oov_total) });
    Ok(MetricsReport {
        precision,
        recall,
        f1,
        oov_recall,
        gold_words: n_gold,
        sys_words: n_sys,
        correct,
    })
}

pub fn prf<W: AsRef<str>>(gold: &[Vec<W>], sys: &[Vec<W>]) -> Result<MetricsReport> {
    evaluate(gold, sys, None)
}

/// Recall over gold words absent from `train_words`; 1.0 when there are none.
pub fn oov_recall<W: AsRef<str>>(gold: &[Vec<W>], sys: &[Vec<W>], train_words: &BTreeSet<String>) -> Result<f64> {
    Ok(evaluate(gold, sys, Some(train_words))?.oov_recall.unwrap_or(1.0))
}

/// Share of each domain's OOV test words found in other domains' training
/// words.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OverlapMatrix {
    pub domains: Vec<String>,
    /// `rates[a][b]`; `None` when domain `a` has no OOV words.
    pub rates: Vec<Vec<Option<f64>>>,
    /// Coverage by the union of all other domains' training words.
    pub all_others: Vec<Option<f64>>,
    pub oov_counts: Vec<usize>,
}

impl OverlapMatrix {
    pub fn to_tsv(&self) -> String {
        let cell = |x: Option<f64>| x.map_or("-".to_string(), |v| format!("{v:.6}"));
        let mut out = String::from("domain");
        for d in &self.domains {
            let _ = write!(out, "\t{d}");
        }
        out.push_str("\tall_others\toov_words\n");
        for (i, d) in self.domains.iter().enumerate() {
            out.push_str(d);
            for x in &self.rates[i] {
                let _ = write!(out, "\t{}", cell(*x));
            }
            let _ = writeln!(out, "\t{}\t{}", cell(self.all_others[i]), self.oov_counts[i]);
        }
        out
    }
}

/// `rates[a][b] = |OOV_a ∩ train_b| / |OOV_a|` where `OOV_a` are test words
/// of `a` missing from `a`'s training words. The diagonal is 0.
pub fn oov_overlap(names: &[String], train: &[BTreeSet<String>], test: &[BTreeSet<String>]) -> Result<OverlapMatrix> {
    let n = names.len();
    if n < 2 || train.len() != n || test.len() != n {
        return Err(Error::invalid(format!(
            "need matching train/test word sets for at least 2 domains (got {n} names, {} train, {} test)",
            train.len(),
            test.len()
        )));
    }
    let mut rates = vec![vec![None; n]; n];
    let mut all_others = vec![None; n];
    let mut oov_counts = vec![0; n];
    for a in 0..n {
        let oov: Vec<&String> = test[a].iter().filter(|w| !train[a].contains(*w)).collect();
        oov_counts[a] = oov.len();
        if oov.is_empty() {
            continue;
        }
        let rate = |hit: usize| hit as f64 / oov.len() as f64;
        for b in 0..n {
            rates[a][b] = Some(if a == b {
                0.0
            } else {
                rate(oov.iter().filter(|w| train[b].contains(**w)).count())
            });
        }
        let union_hits = oov
            .iter()
            .filter(|w| (0..n).any(|b| b != a && train[b].contains(**w)))
            .count();
        all_others[a] = Some(rate(union_hits));
    }
    Ok(OverlapMatrix {
        domains: names.to_vec(),
        rates,
        all_others,
        oov_counts,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpeedRow {
    pub batch_size: usize,
    pub chars: usize,
    pub median_secs: f64,
    pub chars_per_sec: f64,
    pub runs: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpeedReport {
    /// Evaluation threads; decoding is single-threaded.
    pub threads: usize,
    pub warmup: usize,
    pub rows: Vec<SpeedRow>,
    /// Whether throughput never decreased as the batch size grew. Reported,
    /// not enforced.
    pub monotonic: bool,
}

impl SpeedReport {
    pub fn to_tsv(&self) -> String {
        let mut out = String::from("batch_size\tchars\tmedian_secs\tchars_per_sec\truns\n");
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{}\t{}\t{:.6}\t{:.1}\t{}",
                r.batch_size, r.chars, r.median_secs, r.chars_per_sec, r.runs
            );
        }
        out
    }
}

fn median(mut xs: Vec<f64>) -> f64 {
    xs.sort_by(f64::total_cmp);
    let n = xs.len();
    if n % 2 == 1 {
        xs[n / 2]
    } else {
        (xs[n / 2 - 1] + xs[n / 2]) / 2.0
    }
}

/// Times the full segmentation pipeline (encode, project, Viterbi, decode)
/// per batch size. `warmup` untimed runs precede `repeats` timed ones.
pub fn speed_bench(
    model: &Model,
    sentences: &[Vec<char>],
    criterion: Criterion,
    batch_sizes: &[usize],
    warmup: usize,
    repeats: usize,
) -> Result<SpeedReport> {
    if sentences.is_empty() {
        return Err(Error::invalid("speed benchmark needs at least one sentence"));
    }
    if repeats < 5 {
        return Err(Error::invalid("speed benchmark needs at least 5 timed repeats"));
    }
    let chars: usize = sentences.iter().map(Vec::len).sum();
    let mut rows = Vec::with_capacity(batch_sizes.len());
    for &bs in batch_sizes {
        for _ in 0..warmup {
            model.segment_chars(sentences, criterion, bs)?;
        }
        let mut times = Vec::with_capacity(repeats);
        for _ in 0..repeats {
            let t0 = Instant::now();
            let out = model.segment_chars(sentences, criterion, bs)?;
            times.push(t0.elapsed().as_secs_f64());
            std::hint::black_box(out);
        }
        let med = median(times);
        rows.push(SpeedRow {
            batch_size: bs,
            chars,
            median_secs: med,
            chars_per_sec: if med > 0.0 { chars as f64 / med } else { f64::INFINITY },
            runs: repeats,
        });
    }
    let monotonic = rows.windows(2).all(|w| w[1].chars_per_sec >= w[0].chars_per_sec);
    Ok(SpeedReport {
        threads: 1,
        warmup,
        rows,
        monotonic,
    })
}
