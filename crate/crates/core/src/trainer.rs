//! Training loops: joint multi-criteria training, student distillation,
//! single-criteria ablation and the layer-mix probe.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{make_batches, split_dev, Corpus, DomainRegistry, TaggedSentence, Vocabulary, MAX_SEQ_LEN};
use crate::crf::nll_graph;
use crate::distill::{combined_loss_graph, distill_loss_graph};
use crate::encoder::{Dropout, EncoderConfig};
use crate::error::{Error, Result};
use crate::eval::prf;
use crate::model::{emissions_graph, Criterion, Model, LAYER_LOGITS};
use crate::numerics::{derive_seed, AdamConfig, AdamState, Graph, Tensor, Var};

/// Learning rate for fine-tuning a provided checkpoint.
pub const FINE_TUNE_LR: f64 = 2e-5;
/// Learning rate for models trained from random initialization.
pub const FROM_SCRATCH_LR: f64 = 1e-3;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub dropout: f64,
    /// Weight of the distillation term.
    pub alpha: f64,
    pub seed: u64,
    /// Epochs without a macro dev F1 improvement before stopping.
    pub patience: usize,
    pub dev_ratio: f64,
    pub max_seq_len: usize,
    pub layers: usize,
    pub heads: usize,
    pub d_h: usize,
    pub d_ff: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 30,
            batch_size: 32,
            lr: FROM_SCRATCH_LR,
            weight_decay: 0.01,
            dropout: 0.1,
            alpha: 0.15,
            seed: 42,
            patience: 5,
            dev_ratio: 0.1,
            max_seq_len: MAX_SEQ_LEN,
            layers: 12,
            heads: 4,
            d_h: 64,
            d_ff: 256,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::invalid("epochs and batch size must be positive"));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) || self.weight_decay < 0.0 || self.alpha < 0.0 {
            return Err(Error::invalid(
                "lr must be positive; weight decay and alpha non-negative",
            ));
        }
        if self.max_seq_len == 0 {
            return Err(Error::invalid("max sequence length must be positive"));
        }
        Ok(())
    }

    pub fn encoder_config(&self, vocab_size: usize) -> EncoderConfig {
        EncoderConfig {
            num_layers: self.layers,
            num_heads: self.heads,
            d_h: self.d_h,
            d_ff: self.d_ff,
            max_seq_len: self.max_seq_len,
            dropout_p: self.dropout,
            vocab_size,
        }
    }

    /// Applies one `key=value` setting.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
            v.parse()
                .map_err(|_| Error::invalid(format!("bad value {v:?} for `{key}`")))
        }
        match key {
            "epochs" => self.epochs = num(key, value)?,
            "batch_size" => self.batch_size = num(key, value)?,
            "lr" => self.lr = num(key, value)?,
            "weight_decay" => self.weight_decay = num(key, value)?,
            "dropout" => self.dropout = num(key, value)?,
            "alpha" => self.alpha = num(key, value)?,
            "seed" => self.seed = num(key, value)?,
            "patience" => self.patience = num(key, value)?,
            "dev_ratio" => self.dev_ratio = num(key, value)?,
            "max_seq_len" => self.max_seq_len = num(key, value)?,
            "layers" => self.layers = num(key, value)?,
            "heads" => self.heads = num(key, value)?,
            "d_h" => self.d_h = num(key, value)?,
            "d_ff" => self.d_ff = num(key, value)?,
            _ => return Err(Error::invalid(format!("unknown setting `{key}`"))),
        }
        Ok(())
    }

    /// Parses `key = value` lines; blank lines and `#` comments are ignored.
    pub fn parse(text: &str, path: &Path) -> Result<Self> {
        let mut cfg = TrainConfig::default();
        for (i, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| Error::Parse {
                path: path.to_path_buf(),
                line: i + 1,
                message: "expected key=value".into(),
            })?;
            cfg.set(k.trim(), v.trim()).map_err(|e| Error::Parse {
                path: path.to_path_buf(),
                line: i + 1,
                message: e.to_string(),
            })?;
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        Self::parse(&text, path)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    /// Training objective per real position, before any update.
    pub initial_loss: f64,
    /// Mean training objective per real position, one entry per epoch.
    pub epoch_losses: Vec<f64>,
    /// Dev F1 history per domain.
    pub dev_f1: BTreeMap<String, Vec<f64>>,
    pub dev_macro_f1: Vec<f64>,
    /// 1-based epoch whose parameters were kept.
    pub best_epoch: usize,
    pub best_dev_macro_f1: Option<f64>,
    pub best_checkpoint: Option<PathBuf>,
    pub stopped_early: bool,
    /// Learned layer distribution of a probe run.
    pub layer_weights: Option<Vec<f64>>,
}

/// Teacher used for distillation, and the weight of its term.
pub struct Distillation<'a> {
    pub teacher: &'a Model,
    pub alpha: f64,
}

/// Everything one training run needs.
pub struct FitRun<'a> {
    pub train: &'a [Corpus],
    pub dev: &'a [Corpus],
    pub config: &'a TrainConfig,
    pub trainable: &'a dyn Fn(&str) -> bool,
    pub distill: Option<Distillation<'a>>,
    /// Directory that receives the best model whenever dev F1 improves.
    pub checkpoint_dir: Option<&'a Path>,
}

fn criterion_of(model: &Model, corpus_domain: &str) -> Result<Criterion> {
    Ok(Criterion::Domain(model.domains.lookup(corpus_domain)?.index()))
}

/// Packed ids, lengths and tags of a batch.
fn pack(batch: &crate::corpus::Batch) -> (Vec<u32>, Vec<usize>, Vec<crate::corpus::Label>) {
    let mut ids = Vec::with_capacity(batch.positions());
    let mut tags = Vec::with_capacity(batch.positions());
    for i in 0..batch.len() {
        ids.extend_from_slice(batch.row_ids(i));
        tags.extend_from_slice(batch.row_tags(i));
    }
    (ids, batch.lengths.clone(), tags)
}

fn spans(lengths: &[usize]) -> Vec<(usize, usize)> {
    let mut start = 0;
    lengths
        .iter()
        .map(|&l| {
            let s = (start, l);
            start += l;
            s
        })
        .collect()
}

/// Objective of one batch on `g`: summed CRF NLL plus the weighted
/// distillation term.
fn batch_objective<'g>(
    g: &'g Graph,
    model: &Model,
    bound: &crate::model::ModelParams<Var<'g>>,
    batch: &crate::corpus::Batch,
    distill: Option<&Distillation<'_>>,
    dropout: Option<&mut Dropout<'_>>,
) -> Result<Var<'g>> {
    let (ids, lengths, tags) = pack(batch);
    let criterion = criterion_of(model, batch.domain.name())?;
    let (emissions, _) = emissions_graph(
        g,
        &model.config,
        &model.domains,
        bound,
        &ids,
        &lengths,
        criterion,
        dropout,
        false,
    )?;
    let seg = nll_graph(g, emissions, bound.crf.trans, &spans(&lengths), &tags)?;
    match distill {
        Some(d) if d.alpha > 0.0 => {
            let tc = criterion_of(d.teacher, batch.domain.name())?;
            let (t_emit, _) = d.teacher.emissions(&ids, &lengths, tc, false)?;
            let dis = distill_loss_graph(g, emissions, &t_emit)?;
            combined_loss_graph(g, seg, dis, d.alpha)
        }
        _ => Ok(seg),
    }
}

fn dev_scores(model: &Model, dev: &[Corpus]) -> Result<BTreeMap<String, f64>> {
    let mut out = BTreeMap::new();
    for c in dev {
        let criterion = criterion_of(model, c.domain.name())?;
        let chars: Vec<Vec<char>> = c.sentences.iter().map(|s| s.chars().to_vec()).collect();
        let sys = model.segment_chars(&chars, criterion, 64)?;
        out.insert(c.domain.name().to_string(), prf(&c.words(), &sys)?.f1);
    }
    Ok(out)
}

/// One optimizer step on a single batch. Returns the objective.
pub fn train_step(
    model: &mut Model,
    adam: &mut AdamState,
    batch: &crate::corpus::Batch,
    trainable: &dyn Fn(&str) -> bool,
    distill: Option<&Distillation<'_>>,
    dropout: Option<(f64, u64)>,
) -> Result<f64> {
    let g = Graph::new();
    let bound = model.params.map(&model.domains, &mut |name, t| {
        if trainable(name) {
            g.param(t.clone())
        } else {
            g.constant(t.clone())
        }
    });
    let mut rng = ChaCha8Rng::seed_from_u64(dropout.map_or(0, |(_, s)| s));
    let mut drop = dropout
        .filter(|(p, _)| *p > 0.0)
        .map(|(p, _)| Dropout { p, rng: &mut rng });
    let loss = batch_objective(&g, model, &bound, batch, distill, drop.as_mut())?;
    let value = loss.value().item();
    if !value.is_finite() {
        return Err(Error::NonFinite(format!("batch objective {value}")));
    }
    let grads = g.backward(loss)?;
    let mut named = BTreeMap::new();
    bound.map(&model.domains, &mut |name, v| {
        if let Some(gr) = grads.get(*v) {
            named.insert(name.to_string(), gr.clone());
        }
    });
    let domains = model.domains.clone();
    let mut slots: Vec<(String, &mut Tensor)> = Vec::new();
    model
        .params
        .for_each_mut(&domains, &mut |name, t| slots.push((name.to_string(), t)));
    adam.step(slots.iter_mut().map(|(n, t)| (n.as_str(), &mut **t)), &named)?;
    Ok(value)
}

fn mean_objective(
    model: &Model,
    train: &[Corpus],
    config: &TrainConfig,
    distill: Option<&Distillation<'_>>,
) -> Result<f64> {
    let batches = make_batches(train, &model.vocab, config.batch_size, config.max_seq_len, config.seed)?;
    let (mut total, mut positions) = (0.0, 0usize);
    for b in &batches {
        let g = Graph::inference();
        let bound = model.bind_constants(&g);
        total += batch_objective(&g, model, &bound, b, distill, None)?.value().item();
        positions += b.positions();
    }
    Ok(total / positions.max(1) as f64)
}

/// Runs the training loop in place. On return `model` holds the parameters of
/// the best dev epoch (or the last epoch when there is no dev data).
pub fn fit(model: &mut Model, run: &FitRun<'_>) -> Result<TrainReport> {
    let cfg = run.config;
    cfg.validate()?;
    if run.train.is_empty() {
        return Err(Error::invalid("training needs at least one corpus"));
    }
    let mut adam = AdamState::new(AdamConfig {
        lr: cfg.lr,
        weight_decay: cfg.weight_decay,
        ..AdamConfig::default()
    });
    let initial_loss = mean_objective(model, run.train, cfg, run.distill.as_ref())?;
    let mut report = TrainReport {
        initial_loss,
        epoch_losses: Vec::new(),
        dev_f1: run
            .dev
            .iter()
            .map(|c| (c.domain.name().to_string(), Vec::new()))
            .collect(),
        dev_macro_f1: Vec::new(),
        best_epoch: 0,
        best_dev_macro_f1: None,
        best_checkpoint: None,
        stopped_early: false,
        layer_weights: None,
    };
    let mut best_params = model.params.clone();
    let mut since_best = 0;
    for epoch in 1..=cfg.epochs {
        let batches = make_batches(
            run.train,
            &model.vocab,
            cfg.batch_size,
            cfg.max_seq_len,
            derive_seed(cfg.seed, epoch as u64),
        )?;
        let (mut total, mut positions) = (0.0, 0usize);
        for (i, batch) in batches.iter().enumerate() {
            let seed = derive_seed(cfg.seed, ((epoch as u64) << 32) | i as u64);
            let value = train_step(
                model,
                &mut adam,
                batch,
                run.trainable,
                run.distill.as_ref(),
                Some((cfg.dropout, seed)),
            )
            .map_err(|e| Error::Diverged {
                epoch,
                reason: e.to_string(),
            })?;
            total += value;
            positions += batch.positions();
        }
        report.epoch_losses.push(total / positions.max(1) as f64);
        if run.dev.is_empty() {
            best_params = model.params.clone();
            report.best_epoch = epoch;
            continue;
        }
        let scores = dev_scores(model, run.dev)?;
        let macro_f1 = scores.values().sum::<f64>() / scores.len() as f64;
        for (name, f1) in &scores {
            report.dev_f1.get_mut(name).expect("dev domain").push(*f1);
        }
        report.dev_macro_f1.push(macro_f1);
        if report.best_dev_macro_f1.is_none_or(|b| macro_f1 > b) {
            report.best_dev_macro_f1 = Some(macro_f1);
            report.best_epoch = epoch;
            best_params = model.params.clone();
            since_best = 0;
            if let Some(dir) = run.checkpoint_dir {
                model.save(dir)?;
                report.best_checkpoint = Some(dir.to_path_buf());
            }
        } else {
            since_best += 1;
            if since_best >= cfg.patience {
                report.stopped_early = true;
                break;
            }
        }
    }
    model.params = best_params;
    if run.dev.is_empty() {
        if let Some(dir) = run.checkpoint_dir {
            model.save(dir)?;
            report.best_checkpoint = Some(dir.to_path_buf());
        }
    }
    Ok(report)
}

fn rebind(corpora: &[Corpus], registry: &DomainRegistry) -> Result<Vec<Corpus>> {
    corpora
        .iter()
        .map(|c| {
            let d = registry.lookup(c.domain.name())?.clone();
            Ok(Corpus {
                domain: d.clone(),
                sentences: c
                    .sentences
                    .iter()
                    .map(|s| {
                        let mut s: TaggedSentence = s.clone();
                        s.sentence.domain = d.clone();
                        s
                    })
                    .collect(),
            })
        })
        .collect()
}

/// Character vocabulary over all training corpora.
pub fn build_vocab(corpora: &[Corpus]) -> Vocabulary {
    Vocabulary::from_chars(corpora.iter().flat_map(|c| c.chars()))
}

/// Splits each corpus into train and dev parts.
pub fn split_corpora(corpora: &[Corpus], ratio: f64, seed: u64) -> Result<(Vec<Corpus>, Vec<Corpus>)> {
    let mut train = Vec::new();
    let mut dev = Vec::new();
    for (i, c) in corpora.iter().enumerate() {
        let (a, b) = split_dev(&c.sentences, ratio, derive_seed(seed, i as u64))?;
        train.push(Corpus {
            domain: c.domain.clone(),
            sentences: a,
        });
        dev.push(Corpus {
            domain: c.domain.clone(),
            sentences: b,
        });
    }
    Ok((train, dev))
}

fn fresh_model(corpora: &[Corpus], cfg: &TrainConfig, shared: bool) -> Result<(Model, Vec<Corpus>)> {
    let names: Vec<&str> = corpora.iter().map(|c| c.domain.name()).collect();
    let registry = DomainRegistry::from_names(&names)?;
    let corpora = rebind(corpora, &registry)?;
    let vocab = build_vocab(&corpora);
    let enc = cfg.encoder_config(vocab.len());
    let model = Model::new(enc, vocab, registry, shared, derive_seed(cfg.seed, 7))?;
    Ok((model, corpora))
}

fn everything(_: &str) -> bool {
    true
}

/// Joint multi-criteria training of a fresh model with private and shared
/// projections. A dev split is carved from each corpus.
pub fn train_teacher(
    corpora: &[Corpus],
    config: &TrainConfig,
    checkpoint_dir: Option<&Path>,
) -> Result<(Model, TrainReport)> {
    if corpora.is_empty() {
        return Err(Error::invalid("training needs at least one corpus"));
    }
    let (mut model, corpora) = fresh_model(corpora, config, true)?;
    let (train, dev) = split_corpora(&corpora, config.dev_ratio, config.seed)?;
    let report = fit(
        &mut model,
        &FitRun {
            train: &train,
            dev: &dev,
            config,
            trainable: &everything,
            distill: None,
            checkpoint_dir,
        },
    )?;
    Ok((model, report))
}

/// Continues training an existing model on its own domains.
pub fn fine_tune(
    mut model: Model,
    corpora: &[Corpus],
    config: &TrainConfig,
    checkpoint_dir: Option<&Path>,
) -> Result<(Model, TrainReport)> {
    let corpora = rebind(corpora, &model.domains)?;
    let (train, dev) = split_corpora(&corpora, config.dev_ratio, config.seed)?;
    let report = fit(
        &mut model,
        &FitRun {
            train: &train,
            dev: &dev,
            config,
            trainable: &everything,
            distill: None,
            checkpoint_dir,
        },
    )?;
    Ok((model, report))
}

/// A student holding the teacher's embeddings, its bottom `k` blocks, and
/// copies of its projections and CRF.
pub fn truncated_student(teacher: &Model, k: usize) -> Result<Model> {
    let mut student = teacher.clone();
    student.params.encoder = teacher.params.encoder.truncate(k)?;
    student.params.layer_logits = None;
    student.config.num_layers = k;
    Ok(student)
}

/// Trains a `k`-layer student on the segmentation objective plus
/// `config.alpha` times the distillation loss against the frozen teacher.
pub fn train_student(
    teacher: &Model,
    k: usize,
    corpora: &[Corpus],
    config: &TrainConfig,
    checkpoint_dir: Option<&Path>,
) -> Result<(Model, TrainReport)> {
    let mut student = truncated_student(teacher, k)?;
    let corpora = rebind(corpora, &teacher.domains)?;
    let (train, dev) = split_corpora(&corpora, config.dev_ratio, config.seed)?;
    let report = fit(
        &mut student,
        &FitRun {
            train: &train,
            dev: &dev,
            config,
            trainable: &everything,
            distill: Some(Distillation {
                teacher,
                alpha: config.alpha,
            }),
            checkpoint_dir,
        },
    )?;
    Ok((student, report))
}

/// Single-criteria ablation: one corpus, no shared projection; the private
/// representation fills both emission slots.
pub fn train_single_criteria(
    corpora: &[Corpus],
    config: &TrainConfig,
    checkpoint_dir: Option<&Path>,
) -> Result<(Model, TrainReport)> {
    if corpora.len() != 1 {
        return Err(Error::invalid(format!(
            "single-criteria training takes exactly one corpus, got {}",
            corpora.len()
        )));
    }
    let (mut model, corpora) = fresh_model(corpora, config, false)?;
    let (train, dev) = split_corpora(&corpora, config.dev_ratio, config.seed)?;
    let report = fit(
        &mut model,
        &FitRun {
            train: &train,
            dev: &dev,
            config,
            trainable: &everything,
            distill: None,
            checkpoint_dir,
        },
    )?;
    Ok((model, report))
}

fn probe_trainable(name: &str) -> bool {
    name == LAYER_LOGITS || name.starts_with("proj.") || name.starts_with("crf.")
}

/// Freezes the encoder and learns a softmax mix over its layer outputs
/// (starting uniform) together with the projections and CRF. Returns the
/// learned layer distribution, bottom layer first.
pub fn layer_attention_probe(
    model: &Model,
    corpora: &[Corpus],
    config: &TrainConfig,
) -> Result<(Vec<f64>, Model, TrainReport)> {
    let layers = model.num_layers();
    if layers < 2 {
        return Err(Error::invalid(format!(
            "layer probe needs at least 2 layers, model has {layers}"
        )));
    }
    let mut probe = model.clone();
    probe.params.layer_logits = Some(Tensor::zeros([layers]));
    let corpora = rebind(corpora, &model.domains)?;
    let (train, dev) = split_corpora(&corpora, config.dev_ratio, config.seed)?;
    let mut report = fit(
        &mut probe,
        &FitRun {
            train: &train,
            dev: &dev,
            config,
            trainable: &probe_trainable,
            distill: None,
            checkpoint_dir: None,
        },
    )?;
    let weights = layer_weights(&probe)?;
    report.layer_weights = Some(weights.clone());
    Ok((weights, probe, report))
}

/// Softmax of the layer-mix logits.
pub fn layer_weights(model: &Model) -> Result<Vec<f64>> {
    let logits = model
        .params
        .layer_logits
        .as_ref()
        .ok_or_else(|| Error::invalid("model has no layer mix"))?;
    let mut w = logits.data().to_vec();
    crate::numerics::softmax_in_place(&mut w);
    Ok(w)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy() -> Vec<Corpus> {
        let mut reg = DomainRegistry::new();
        let a = reg.register("pku").unwrap();
        let b = reg.register("ctb").unwrap();
        let fine: Vec<Vec<&str>> = (0..12)
            .map(|i| {
                if i % 2 == 0 {
                    vec!["刘", "国梁", "赢得"]
                } else {
                    vec!["世界", "冠军", "刘", "国梁"]
                }
            })
            .collect();
        let coarse: Vec<Vec<&str>> = (0..12)
            .map(|i| {
                if i % 2 == 0 {
                    vec!["刘国梁", "赢得"]
                } else {
                    vec!["世界冠军", "刘国梁"]
                }
            })
            .collect();
        vec![
            Corpus::from_words(a, &fine).unwrap(),
            Corpus::from_words(b, &coarse).unwrap(),
        ]
    }

    fn small() -> TrainConfig {
        TrainConfig {
            epochs: 2,
            batch_size: 4,
            layers: 1,
            heads: 2,
            d_h: 8,
            d_ff: 16,
            seed: 3,
            dev_ratio: 0.25,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn config_file_parsing() {
        let cfg = TrainConfig::parse("# comment\nepochs = 7\nlr=0.5 # trailing\n\nalpha=0\n", Path::new("x")).unwrap();
        assert_eq!((cfg.epochs, cfg.lr, cfg.alpha), (7, 0.5, 0.0));
        assert_eq!(cfg.batch_size, 32);
        let err = TrainConfig::parse("epochs=7\nbogus=1\n", Path::new("x")).unwrap_err();
        assert!(matches!(err, Error::Parse { line: 2, .. }), "{err}");
        assert!(TrainConfig::parse("epochs\n", Path::new("x")).is_err());
    }

    #[test]
    fn teacher_loss_descends_and_is_deterministic() {
        let (m1, r1) = train_teacher(&toy(), &small(), None).unwrap();
        let (m2, r2) = train_teacher(&toy(), &small(), None).unwrap();
        assert!(r1.epoch_losses[0] < r1.initial_loss, "{r1:?}");
        assert_eq!(r1, r2);
        assert_eq!(m1, m2);
        assert_eq!(r1.dev_macro_f1.len(), r1.epoch_losses.len());
        let best = r1.best_dev_macro_f1.unwrap();
        assert!(r1.dev_macro_f1.iter().all(|&f| f <= best));
    }

    #[test]
    fn student_leaves_teacher_untouched() {
        let (teacher, _) = train_teacher(
            &toy(),
            &TrainConfig {
                layers: 2,
                epochs: 1,
                ..small()
            },
            None,
        )
        .unwrap();
        let before = teacher.snapshot();
        let (student, _) = train_student(&teacher, 1, &toy(), &small(), None).unwrap();
        assert_eq!(teacher.snapshot(), before);
        assert_eq!(student.num_layers(), 1);
        assert!(train_student(&teacher, 3, &toy(), &small(), None).is_err());
    }

    #[test]
    fn single_criteria_has_no_shared_params() {
        let corpora = toy();
        assert!(train_single_criteria(&corpora, &small(), None).is_err());
        let (m, _) = train_single_criteria(&corpora[..1], &small(), None).unwrap();
        assert!(m.named_params().iter().all(|(n, _)| !n.starts_with("proj.shared")));
    }

    #[test]
    fn gradient_isolation_across_domains() {
        let (model, corpora) = fresh_model(&toy(), &small(), true).unwrap();
        let batches = make_batches(&corpora[1..], &model.vocab, 4, 128, 0).unwrap();
        let mut m = model.clone();
        let mut adam = AdamState::new(AdamConfig {
            lr: 1e-2,
            ..AdamConfig::default()
        });
        train_step(&mut m, &mut adam, &batches[0], &everything, None, Some((0.1, 5))).unwrap();
        let (before, after) = (model.snapshot(), m.snapshot());
        for (name, t) in &before {
            let changed = &after[name] != t;
            if name.starts_with("proj.pku.") {
                assert!(!changed, "{name} changed");
            } else if name.starts_with("proj.ctb.") || name.starts_with("proj.shared.") || name == "crf.W_s" {
                assert!(changed, "{name} unchanged");
            }
        }
    }

    #[test]
    fn probe_starts_uniform_and_rejects_single_layer() {
        let (model, _) = fresh_model(&toy(), &TrainConfig { layers: 3, ..small() }, true).unwrap();
        let mut probe = model.clone();
        probe.params.layer_logits = Some(Tensor::zeros([3]));
        let w = layer_weights(&probe).unwrap();
        assert!(w.iter().all(|x| (x - 1.0 / 3.0).abs() < 1e-15));
        let (one, _) = fresh_model(&toy(), &small(), true).unwrap();
        assert!(layer_attention_probe(&one, &toy(), &small()).is_err());
        let (w, probe, report) = layer_attention_probe(&model, &toy(), &small()).unwrap();
        assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert_eq!(report.layer_weights.as_ref(), Some(&w));
        assert_eq!(probe.params.encoder, model.params.encoder);
    }

    #[test]
    fn nan_parameters_abort_with_divergence() {
        let (mut model, corpora) = fresh_model(&toy(), &small(), true).unwrap();
        model.params.crf.trans = Tensor::full([4, 4], f64::NAN);
        let err = fit(
            &mut model,
            &FitRun {
                train: &corpora,
                dev: &[],
                config: &small(),
                trainable: &everything,
                distill: None,
                checkpoint_dir: None,
            },
        )
        .unwrap_err();
        assert!(matches!(err, Error::Diverged { epoch: 1, .. }), "{err}");
    }
}
