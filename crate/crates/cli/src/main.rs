use std::collections::BTreeSet;
use std::fs;
use std::io::{self, BufRead, Read, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::{json, Value};

use mcseg::corpus::{corpus_path, Corpus, DomainRegistry};
use mcseg::encoder::AttentionExport;
use mcseg::eval::{evaluate, oov_overlap, speed_bench};
use mcseg::model::{Criterion, Model};
use mcseg::numerics::checkpoint::FORMAT_VERSION;
use mcseg::synthetic::{generate, SyntheticConfig};
use mcseg::trainer::{
    build_vocab, fine_tune, layer_attention_probe, train_single_criteria, train_student, train_teacher, TrainConfig,
    FINE_TUNE_LR,
};
use mcseg::Error;

const EXIT_FAILURE: u8 = 1;
const EXIT_UNKNOWN_DOMAIN: u8 = 2;
const EXIT_BAD_CHECKPOINT: u8 = 3;

#[derive(Parser)]
#[command(name = "mcseg", version, about = "Multi-criteria Chinese word segmentation")]
struct Cli {
    /// Directory receiving JSON/TSV artifacts.
    #[arg(long, global = true, env = "MCSEG_OUT_DIR", default_value = "mcseg-out")]
    out_dir: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Normalize segmented corpora, or generate the synthetic two-criteria corpora.
    Preprocess(PreprocessArgs),
    /// Train a multi-criteria model (or a single-criteria ablation).
    Train(TrainArgs),
    /// Distill a trained model into a shallower student.
    Distill(DistillArgs),
    /// Segment raw text, one sentence per line.
    Segment(SegmentArgs),
    /// Score a segmentation against a gold file, or compute the OOV overlap matrix.
    Eval(EvalArgs),
    /// Measure decoding throughput per batch size.
    Bench(BenchArgs),
    /// Export attention matrices of one sentence, or run the layer-mix probe.
    AttentionExport(AttentionArgs),
}

#[derive(Args)]
struct PreprocessArgs {
    /// Directory holding `<domain>.<split>.txt` files.
    #[arg(long, required_unless_present = "synthetic")]
    data_dir: Option<PathBuf>,
    /// Comma-separated domain names.
    #[arg(long, value_delimiter = ',', required_unless_present = "synthetic")]
    domains: Vec<String>,
    /// Generate this many synthetic sentences as domains `fine` and `coarse` instead.
    #[arg(long, conflicts_with_all = ["data_dir", "domains"])]
    synthetic: Option<usize>,
    /// Seed of the synthetic generator.
    #[arg(long, default_value_t = 2020)]
    seed: u64,
    /// Fraction of synthetic sentences held out as test data.
    #[arg(long, default_value_t = 0.1)]
    test_fraction: f64,
}

#[derive(Args, Clone)]
struct Overrides {
    /// key=value config file; flags override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Training epochs [default: 30, desk-scale choice].
    #[arg(long)]
    epochs: Option<usize>,
    /// Sentences per batch [default: 32, desk-scale choice].
    #[arg(long)]
    batch_size: Option<usize>,
    /// AdamW learning rate [default: 1e-3 from scratch (desk-scale override), 2e-5 with --init (published)].
    #[arg(long)]
    lr: Option<f64>,
    /// Decoupled weight decay [default: 0.01, published].
    #[arg(long)]
    weight_decay: Option<f64>,
    /// Dropout probability [default: 0.1, published].
    #[arg(long)]
    dropout: Option<f64>,
    /// Distillation weight [default: 0.15, published].
    #[arg(long)]
    alpha: Option<f64>,
    /// Seed for initialization, batching and dropout [default: 42].
    #[arg(long)]
    seed: Option<u64>,
    /// Early-stopping patience in epochs [default: 5, desk-scale choice].
    #[arg(long)]
    patience: Option<usize>,
    /// Fraction of training data held out as dev [default: 0.1, published].
    #[arg(long)]
    dev_ratio: Option<f64>,
    /// Maximum sequence length [default: 128, published].
    #[arg(long)]
    max_seq_len: Option<usize>,
    /// Encoder layers [default: 12, published].
    #[arg(long)]
    layers: Option<usize>,
    /// Attention heads [default: 4, desk-scale override].
    #[arg(long)]
    heads: Option<usize>,
    /// Hidden size [default: 64, desk-scale override].
    #[arg(long)]
    d_h: Option<usize>,
    /// Feed-forward size [default: 256, desk-scale override].
    #[arg(long)]
    d_ff: Option<usize>,
}

impl Overrides {
    fn resolve(&self, fine_tuning: bool) -> mcseg::Result<TrainConfig> {
        let mut cfg = match &self.config {
            Some(p) => TrainConfig::load(p)?,
            None => TrainConfig::default(),
        };
        let lr_in_file = self
            .config
            .as_ref()
            .and_then(|p| fs::read_to_string(p).ok())
            .is_some_and(|t| {
                t.lines()
                    .any(|l| l.split('#').next().unwrap_or("").trim_start().starts_with("lr"))
            });
        if fine_tuning && !lr_in_file {
            cfg.lr = FINE_TUNE_LR;
        }
        macro_rules! apply {
            ($($f:ident),*) => { $( if let Some(v) = self.$f { cfg.$f = v; } )* };
        }
        apply!(
            epochs,
            batch_size,
            lr,
            weight_decay,
            dropout,
            alpha,
            seed,
            patience,
            dev_ratio,
            max_seq_len,
            layers,
            heads,
            d_h,
            d_ff
        );
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Args)]
struct DataArgs {
    /// Directory holding `<domain>.train.txt` files.
    #[arg(long)]
    data_dir: PathBuf,
    /// Comma-separated domain names.
    #[arg(long, value_delimiter = ',', required = true)]
    domains: Vec<String>,
}

impl DataArgs {
    fn load(&self, split: &str) -> mcseg::Result<Vec<Corpus>> {
        let reg = DomainRegistry::from_names(&self.domains)?;
        reg.domains()
            .iter()
            .map(|d| Corpus::read(&corpus_path(&self.data_dir, d.name(), split), d.clone()))
            .collect()
    }
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    overrides: Overrides,
    /// Continue from an existing checkpoint instead of a random initialization.
    #[arg(long)]
    init: Option<PathBuf>,
    /// Train without a shared projection; exactly one domain.
    #[arg(long, conflicts_with = "init")]
    single: bool,
}

#[derive(Args)]
struct DistillArgs {
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    overrides: Overrides,
    /// Teacher checkpoint directory.
    #[arg(long)]
    teacher: PathBuf,
    /// Student depth: the teacher's bottom layers kept.
    #[arg(long)]
    student_layers: usize,
}

#[derive(Clone, Copy, ValueEnum)]
enum Precision {
    Full,
    Half,
}

#[derive(Args)]
struct SegmentArgs {
    /// Checkpoint directory.
    #[arg(long)]
    model: PathBuf,
    /// Domain criterion, or `shared` for the standard criterion.
    #[arg(long)]
    domain: String,
    #[arg(long, value_enum, default_value_t = Precision::Full)]
    precision: Precision,
    /// Input file; standard input when absent.
    #[arg(long)]
    input: Option<PathBuf>,
    /// Output file; standard output when absent.
    #[arg(long)]
    output: Option<PathBuf>,
    #[arg(long, default_value_t = 32)]
    batch_size: usize,
}

#[derive(Args)]
struct EvalArgs {
    /// Gold segmentation.
    #[arg(long, required_unless_present = "overlap_dir", requires = "sys")]
    gold: Option<PathBuf>,
    /// System segmentation of the same sentences.
    #[arg(long)]
    sys: Option<PathBuf>,
    /// Training corpus whose words define OOV.
    #[arg(long)]
    train: Option<PathBuf>,
    /// Directory of `<domain>.train.txt`/`<domain>.test.txt` files for the OOV overlap matrix.
    #[arg(long, conflicts_with = "gold", requires = "domains")]
    overlap_dir: Option<PathBuf>,
    /// Comma-separated domains for the overlap matrix.
    #[arg(long, value_delimiter = ',')]
    domains: Vec<String>,
}

#[derive(Args)]
struct BenchArgs {
    #[arg(long)]
    model: PathBuf,
    /// Raw sentences, one per line.
    #[arg(long)]
    input: PathBuf,
    /// Domain criterion, or `shared`.
    #[arg(long)]
    domain: String,
    #[arg(long, value_delimiter = ',', default_value = "1,8,32,64")]
    batch_sizes: Vec<usize>,
    #[arg(long, default_value_t = 1)]
    warmup: usize,
    #[arg(long, default_value_t = 5)]
    repeats: usize,
    #[arg(long, value_enum, default_value_t = Precision::Full)]
    precision: Precision,
}

#[derive(Args)]
struct AttentionArgs {
    #[arg(long)]
    model: PathBuf,
    /// Domain criterion, or `shared`.
    #[arg(long)]
    domain: String,
    /// Raw sentence to export.
    #[arg(long, required_unless_present = "probe_data_dir")]
    sentence: Option<String>,
    /// Query character index for the offset average.
    #[arg(long, default_value_t = 0)]
    query: usize,
    /// Run the layer-mix probe on these corpora instead.
    #[arg(long, conflicts_with = "sentence", requires = "probe_domains")]
    probe_data_dir: Option<PathBuf>,
    #[arg(long, value_delimiter = ',')]
    probe_domains: Vec<String>,
    #[command(flatten)]
    overrides: Overrides,
}

/// A failure with the exit code it maps to.
struct Failure {
    code: u8,
    message: String,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match e {
            Error::UnknownDomain { .. } => EXIT_UNKNOWN_DOMAIN,
            Error::Checkpoint { .. } => EXIT_BAD_CHECKPOINT,
            _ => EXIT_FAILURE,
        };
        Failure {
            code,
            message: e.to_string(),
        }
    }
}

impl From<io::Error> for Failure {
    fn from(e: io::Error) -> Self {
        Error::from(e).into()
    }
}

type CmdResult = Result<(), Failure>;

fn context<T>(what: &str, r: mcseg::Result<T>) -> Result<T, Failure> {
    r.map_err(|e| {
        let mut f = Failure::from(e);
        f.message = format!("{what}: {}", f.message);
        f
    })
}

fn load_model(dir: &Path) -> Result<Model, Failure> {
    Model::load(dir).map_err(|e| Failure {
        code: EXIT_BAD_CHECKPOINT,
        message: format!("cannot read checkpoint {}: {e}", dir.display()),
    })
}

fn with_precision(model: Model, p: Precision) -> Model {
    match p {
        Precision::Full => model,
        Precision::Half => model.to_half(),
    }
}

/// Writes `value` as pretty JSON tagged with the checkpoint format version.
fn write_json(dir: &Path, name: &str, mut v: Value) -> CmdResult {
    if let Value::Object(m) = &mut v {
        m.insert("format_version".into(), json!(FORMAT_VERSION));
    }
    fs::create_dir_all(dir)?;
    let text = serde_json::to_string_pretty(&v).map_err(Error::from)?;
    fs::write(dir.join(name), text + "\n")?;
    Ok(())
}

fn preprocess(out: &Path, a: PreprocessArgs) -> CmdResult {
    fs::create_dir_all(out)?;
    let corpora: Vec<(Corpus, &str)> = if let Some(n) = a.synthetic {
        let synth = context(
            "synthetic corpus",
            generate(&SyntheticConfig {
                sentences: n,
                seed: a.seed,
                ..Default::default()
            }),
        )?;
        let ((ftr, fte), (ctr, cte)) = context("synthetic split", synth.split(a.test_fraction))?;
        let reg = DomainRegistry::from_names(&["fine", "coarse"])?;
        let fine = reg.lookup("fine")?.clone();
        let coarse = reg.lookup("coarse")?.clone();
        vec![
            (Corpus::from_words(fine.clone(), &ftr)?, "train"),
            (Corpus::from_words(fine, &fte)?, "test"),
            (Corpus::from_words(coarse.clone(), &ctr)?, "train"),
            (Corpus::from_words(coarse, &cte)?, "test"),
        ]
    } else {
        let dir = a.data_dir.expect("required by clap");
        let reg = DomainRegistry::from_names(&a.domains)?;
        let mut out = Vec::new();
        for d in reg.domains() {
            for split in ["train", "test"] {
                let path = corpus_path(&dir, d.name(), split);
                if split == "test" && !path.exists() {
                    continue;
                }
                out.push((
                    context(&format!("reading {}", path.display()), Corpus::read(&path, d.clone()))?,
                    split,
                ));
            }
        }
        out
    };
    let mut stats = Vec::new();
    for (c, split) in &corpora {
        c.write(&corpus_path(out, c.domain.name(), split))?;
        stats.push(json!({
            "domain": c.domain.name(),
            "split": split,
            "sentences": c.len(),
            "chars": c.positions(),
            "words": c.sentences.iter().map(|s| s.words().len()).sum::<usize>(),
        }));
    }
    let train: Vec<Corpus> = corpora
        .iter()
        .filter(|(_, s)| *s == "train")
        .map(|(c, _)| c.clone())
        .collect();
    let vocab = build_vocab(&train);
    vocab.save(&out.join("vocab.txt"))?;
    write_json(
        out,
        "preprocess.json",
        json!({ "corpora": stats, "vocab_size": vocab.len() }),
    )
}

fn train(out: &Path, a: TrainArgs) -> CmdResult {
    let cfg = context("config", a.overrides.resolve(a.init.is_some()))?;
    let corpora = context("reading corpora", a.data.load("train"))?;
    let ckpt = out.join("model");
    let (_, report) = match &a.init {
        Some(init) => {
            let model = load_model(init)?;
            context("training", fine_tune(model, &corpora, &cfg, Some(&ckpt)))?
        }
        None if a.single => context("training", train_single_criteria(&corpora, &cfg, Some(&ckpt)))?,
        None => context("training", train_teacher(&corpora, &cfg, Some(&ckpt)))?,
    };
    write_json(out, "train_report.json", json!({ "config": cfg, "report": report }))?;
    eprintln!("checkpoint written to {}", ckpt.display());
    Ok(())
}

fn distill(out: &Path, a: DistillArgs) -> CmdResult {
    let cfg = context("config", a.overrides.resolve(true))?;
    let teacher = load_model(&a.teacher)?;
    let corpora = context("reading corpora", a.data.load("train"))?;
    let ckpt = out.join("student");
    let (_, report) = context(
        "distillation",
        train_student(&teacher, a.student_layers, &corpora, &cfg, Some(&ckpt)),
    )?;
    write_json(out, "distill_report.json", json!({ "config": cfg, "report": report }))?;
    eprintln!("student checkpoint written to {}", ckpt.display());
    Ok(())
}

fn read_input(path: Option<&Path>) -> io::Result<String> {
    match path {
        Some(p) => fs::read_to_string(p),
        None => {
            let mut s = String::new();
            io::stdin().lock().read_to_string(&mut s)?;
            Ok(s)
        }
    }
}

fn segment(a: SegmentArgs) -> CmdResult {
    let model = with_precision(load_model(&a.model)?, a.precision);
    let criterion = model.criterion(&a.domain)?;
    let text = read_input(a.input.as_deref())?;
    let lines: Vec<&str> = text.lines().collect();
    let results = context("segmenting", model.segment_text(&lines, criterion, a.batch_size, false))?;
    let mut buf = String::new();
    for r in results {
        buf.push_str(&r.words.join(" "));
        buf.push('\n');
    }
    match &a.output {
        Some(p) => fs::write(p, buf)?,
        None => {
            let mut stdout = io::stdout().lock();
            stdout.write_all(buf.as_bytes())?;
            stdout.flush()?;
        }
    }
    Ok(())
}

fn read_segmented(path: &Path) -> io::Result<Vec<Vec<String>>> {
    let file = fs::File::open(path)?;
    io::BufReader::new(file)
        .lines()
        .map(|l| l.map(|l| l.split_whitespace().map(str::to_string).collect()))
        .collect::<io::Result<Vec<Vec<String>>>>()
        .map(|v| v.into_iter().filter(|w| !w.is_empty()).collect())
}

fn eval(out: &Path, a: EvalArgs) -> CmdResult {
    if let Some(dir) = &a.overlap_dir {
        let mut train_sets = Vec::new();
        let mut test_sets = Vec::new();
        for d in &a.domains {
            let words = |split: &str| -> io::Result<BTreeSet<String>> {
                Ok(read_segmented(&corpus_path(dir, d, split))?
                    .into_iter()
                    .flatten()
                    .collect())
            };
            train_sets.push(words("train")?);
            test_sets.push(words("test")?);
        }
        let matrix = context("overlap", oov_overlap(&a.domains, &train_sets, &test_sets))?;
        fs::create_dir_all(out)?;
        fs::write(out.join("overlap.tsv"), matrix.to_tsv())?;
        write_json(out, "overlap.json", json!(matrix))?;
        print!("{}", matrix.to_tsv());
        return Ok(());
    }
    let gold = read_segmented(a.gold.as_deref().expect("required by clap"))?;
    let sys = read_segmented(a.sys.as_deref().expect("required by clap"))?;
    let train_words: Option<BTreeSet<String>> = match &a.train {
        Some(p) => Some(read_segmented(p)?.into_iter().flatten().collect()),
        None => None,
    };
    let report = context("scoring", evaluate(&gold, &sys, train_words.as_ref()))?;
    fs::create_dir_all(out)?;
    fs::write(out.join("metrics.tsv"), report.to_tsv())?;
    write_json(out, "metrics.json", json!(report))?;
    println!("{}", serde_json::to_string(&report).map_err(Error::from)?);
    Ok(())
}

fn bench(out: &Path, a: BenchArgs) -> CmdResult {
    let model = with_precision(load_model(&a.model)?, a.precision);
    let criterion = model.criterion(&a.domain)?;
    let text = fs::read_to_string(&a.input)?;
    let reg = DomainRegistry::from_names(&["bench"])?;
    let d = reg.lookup("bench")?;
    let sentences: Vec<Vec<char>> = text
        .lines()
        .map(|l| mcseg::corpus::Sentence::from_raw(l, d.clone()).chars)
        .filter(|c| !c.is_empty())
        .collect();
    let report = context(
        "benchmark",
        speed_bench(&model, &sentences, criterion, &a.batch_sizes, a.warmup, a.repeats),
    )?;
    fs::create_dir_all(out)?;
    fs::write(out.join("bench.tsv"), report.to_tsv())?;
    write_json(out, "bench.json", json!(report))?;
    print!("{}", report.to_tsv());
    Ok(())
}

fn attention_export(out: &Path, a: AttentionArgs) -> CmdResult {
    let model = load_model(&a.model)?;
    let criterion: Criterion = model.criterion(&a.domain)?;
    if let Some(dir) = &a.probe_data_dir {
        let cfg = context("config", a.overrides.resolve(true))?;
        let data = DataArgs {
            data_dir: dir.clone(),
            domains: a.probe_domains.clone(),
        };
        let corpora = context("reading corpora", data.load("train"))?;
        let (weights, _, report) = context("layer probe", layer_attention_probe(&model, &corpora, &cfg))?;
        write_json(
            out,
            "layer_probe.json",
            json!({ "layer_weights": weights, "report": report }),
        )?;
        println!("{}", serde_json::to_string(&weights).map_err(Error::from)?);
        return Ok(());
    }
    let sentence = a.sentence.expect("required by clap");
    let mut results = context(
        "segmenting",
        model.segment_text(&[sentence.as_str()], criterion, 1, true),
    )?;
    let record = results
        .pop()
        .and_then(|r| r.attention)
        .ok_or_else(|| Failure::from(Error::InvalidArgument("sentence is empty after normalization".into())))?;
    let export = context("attention export", AttentionExport::new(sentence, &record, a.query))?;
    write_json(out, "attention.json", json!(export))?;
    eprintln!("attention written to {}", out.join("attention.json").display());
    Ok(())
}

fn run(cli: Cli) -> CmdResult {
    let out = cli.out_dir;
    match cli.command {
        Command::Preprocess(a) => preprocess(&out, a),
        Command::Train(a) => train(&out, a),
        Command::Distill(a) => distill(&out, a),
        Command::Segment(a) => segment(a),
        Command::Eval(a) => eval(&out, a),
        Command::Bench(a) => bench(&out, a),
        Command::AttentionExport(a) => attention_export(&out, a),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}
