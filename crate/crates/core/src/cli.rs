//! Command-line entry point.

use std::ffi::OsString;
use std::fs::File;
use std::io::{self, BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{anyhow, Context};
use clap::{Args, Parser, Subcommand};

use crate::convert::{graphs_to_texts, texts_to_graphs, DEFAULT_BEAM};
use crate::corpus::{
    gen_toy_corpus, load_corpus, parse_prediction, read_records, record_to_json, save_corpus, split_nonparallel,
    CorpusKind, Graph, ToySpec,
};
use crate::graphseq::{ParseMode, ViolationKind};
use crate::metrics::EvalReport;
use crate::rml::{distance_distribution, expected_distance, PayoffConfig};
use crate::seqmodel::{load_checkpoint, save_checkpoint, Seq2SeqModel};
use crate::trainer::{
    graph_target, text_target, train_supervised, train_unsupervised, write_reports_csv, RmlMode, TrainConfig,
    TrainError,
};
use crate::vocab::{build_vocab, Vocabulary};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_DATA: i32 = 2;

/// Conversion batch size for streaming commands.
const CHUNK: usize = 32;

#[derive(Debug, Parser)]
#[command(name = "graphtext", version, about = "Graph-to-text and text-to-graph conversion with one shared model")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a model on graph and text corpora
    Train(TrainArgs),
    /// Convert graphs to texts
    G2t(ConvertArgs),
    /// Convert texts to graphs
    T2g(T2gArgs),
    /// Score predictions against gold pairs
    Eval(EvalArgs),
    /// Generate a synthetic paired corpus
    Toygen(ToygenArgs),
    /// Print payoff distance distributions
    RmlInspect(RmlInspectArgs),
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Graph corpus (JSONL with `triples`)
    #[arg(long)]
    pub graphs: Option<PathBuf>,
    /// Text corpus (JSONL with `text`); may come from a different source
    #[arg(long)]
    pub texts: Option<PathBuf>,
    /// Paired corpus; pairing is only used with a supervised config
    #[arg(long)]
    pub pairs: Option<PathBuf>,
    /// Training config JSON
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Output checkpoint path
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, value_enum)]
    pub rml: Option<RmlMode>,
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Write the per-step loss log as CSV
    #[arg(long)]
    pub metrics: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ConvertArgs {
    #[arg(long)]
    pub model: PathBuf,
    /// Input JSONL; standard input when omitted
    #[arg(long)]
    pub input: Option<PathBuf>,
    /// Output JSONL; standard output when omitted
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long, default_value_t = DEFAULT_BEAM)]
    pub beam: usize,
}

#[derive(Debug, Args)]
pub struct T2gArgs {
    #[command(flatten)]
    pub convert: ConvertArgs,
    /// Salvage well-formed triples instead of rejecting malformed output
    #[arg(long)]
    pub repair: bool,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Gold paired corpus
    #[arg(long)]
    pub pairs: PathBuf,
    /// Checkpoint used to produce predictions for the gold pairs
    #[arg(long, conflicts_with_all = ["texts", "graphs"])]
    pub model: Option<PathBuf>,
    /// Predicted texts (JSONL with `text`), aligned with the gold pairs
    #[arg(long, requires = "graphs")]
    pub texts: Option<PathBuf>,
    /// Predicted graphs (JSONL with `triples`), aligned with the gold pairs
    #[arg(long, requires = "texts")]
    pub graphs: Option<PathBuf>,
    #[arg(long, default_value_t = DEFAULT_BEAM)]
    pub beam: usize,
    /// Write the JSON report here as well
    #[arg(long)]
    pub metrics: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ToygenArgs {
    #[arg(long, default_value_t = 7)]
    pub seed: u64,
    #[arg(long, default_value_t = 500)]
    pub size: usize,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = ToySpec::default().entities)]
    pub entities: usize,
    #[arg(long, default_value_t = ToySpec::default().relations)]
    pub relations: usize,
    #[arg(long, default_value_t = ToySpec::default().max_triples)]
    pub max_triples: usize,
}

#[derive(Debug, Args)]
pub struct RmlInspectArgs {
    /// Editable sequence length
    #[arg(long)]
    pub length: usize,
    /// Substitution alphabet size
    #[arg(long)]
    pub vocab: u32,
    #[arg(long, default_value_t = PayoffConfig::default().temperature)]
    pub temperature: f64,
    /// Distance cap; defaults to min(5, ceil(length / 4))
    #[arg(long)]
    pub max_distance: Option<usize>,
}

/// Failure classes mapped to exit codes.
#[derive(Debug)]
pub enum Failure {
    Usage(anyhow::Error),
    Data(anyhow::Error),
}

impl Failure {
    pub fn code(&self) -> i32 {
        match self {
            Failure::Usage(_) => EXIT_USAGE,
            Failure::Data(_) => EXIT_DATA,
        }
    }
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        Failure::Data(e)
    }
}

macro_rules! data_errors {
    ($($t:ty),*) => {$(
        impl From<$t> for Failure {
            fn from(e: $t) -> Self {
                Failure::Data(e.into())
            }
        }
    )*};
}

data_errors!(
    io::Error,
    crate::corpus::CorpusError,
    crate::seqmodel::ModelError,
    crate::metrics::MetricError,
    serde_json::Error
);

fn usage(msg: impl Into<String>) -> Failure {
    Failure::Usage(anyhow!(msg.into()))
}

/// Parses `argv` (program name first), runs the command and returns the
/// process exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    match execute(cli.command) {
        Ok(()) => EXIT_OK,
        Err(f) => {
            let (Failure::Usage(e) | Failure::Data(e)) = &f;
            eprintln!("error: {e:#}");
            f.code()
        }
    }
}

pub fn execute(command: Command) -> Result<(), Failure> {
    match command {
        Command::Train(a) => train(a),
        Command::G2t(a) => g2t(a),
        Command::T2g(a) => t2g(a),
        Command::Eval(a) => eval(a),
        Command::Toygen(a) => toygen(a),
        Command::RmlInspect(a) => rml_inspect(a),
    }
}

fn read_config(path: Option<&Path>) -> Result<TrainConfig, Failure> {
    let Some(path) = path else {
        return Ok(TrainConfig::default());
    };
    let raw = std::fs::read_to_string(path)
        .with_context(|| format!("reading config {}", path.display()))
        .map_err(Failure::Data)?;
    serde_json::from_str(&raw)
        .with_context(|| format!("invalid config {}", path.display()))
        .map_err(Failure::Usage)
}

fn train_error(e: TrainError) -> Failure {
    match e {
        TrainError::Config(_) => Failure::Usage(e.into()),
        other => Failure::Data(other.into()),
    }
}

fn train(a: TrainArgs) -> Result<(), Failure> {
    let mut config = read_config(a.config.as_deref())?;
    if let Some(seed) = a.seed {
        config.seed = seed;
    }
    if let Some(rml) = a.rml {
        config.rml_mode = rml;
    }
    if let Some(epochs) = a.epochs {
        config.epochs = epochs;
    }
    config.validate().map_err(train_error)?;

    let (graphs, texts, paired): (Vec<Graph>, Vec<Vec<String>>, bool) = match (&a.graphs, &a.texts, &a.pairs) {
        (Some(g), Some(t), None) => {
            let graphs = load_corpus(g, CorpusKind::Graphs)?.graphs().cloned().collect();
            let texts = load_corpus(t, CorpusKind::Texts)?.texts().cloned().collect();
            (graphs, texts, false)
        }
        (None, None, Some(p)) => {
            let corpus = load_corpus(p, CorpusKind::Pairs)?;
            if config.supervised {
                let graphs = corpus.graphs().cloned().collect();
                let texts = corpus.texts().cloned().collect();
                (graphs, texts, true)
            } else {
                let np = split_nonparallel(&corpus, config.seed)?;
                (np.graphs, np.texts, false)
            }
        }
        _ => return Err(usage("train needs either --graphs and --texts, or --pairs")),
    };
    if config.supervised && !paired {
        return Err(usage("a supervised config needs --pairs"));
    }

    let vocab = build_vocab(&graphs, &texts, 1).map_err(|e| Failure::Data(e.into()))?;
    let g: Vec<_> = graphs.iter().map(|x| graph_target(x, &vocab)).collect();
    let t: Vec<_> = texts.iter().map(|x| text_target(x, &vocab)).collect();
    let mut model = Seq2SeqModel::<f32>::new(config.model, vocab.len(), config.seed)
        .map_err(|e| Failure::Usage(e.into()))?;
    eprintln!(
        "training on {} graphs and {} texts, vocabulary {}, {} parameters",
        g.len(),
        t.len(),
        vocab.len(),
        model.params().num_scalars()
    );

    let every = config.checkpoint_every;
    let ckpt = config.checkpoint_path.clone();
    let mut hook = |epoch: usize, m: &Seq2SeqModel<f32>| {
        if every > 0 && epoch % every == 0 {
            if let Some(path) = &ckpt {
                save_checkpoint(path, m, &vocab).map_err(|e| TrainError::Checkpoint(e.to_string()))?;
            }
        }
        eprintln!("epoch {epoch} done");
        Ok(())
    };
    let outcome = if config.supervised {
        train_supervised(&mut model, &g, &t, &config, &mut hook)
    } else {
        train_unsupervised(&mut model, &g, &t, &config, &mut hook)
    }
    .map_err(train_error)?;

    if let Some(last) = outcome.epoch_losses().last() {
        eprintln!("final epoch loss {last:.4}");
    }
    save_checkpoint(&a.out, &model, &vocab)
        .with_context(|| format!("writing checkpoint {}", a.out.display()))?;
    if let Some(path) = &a.metrics {
        let f = File::create(path).with_context(|| format!("creating {}", path.display()))?;
        write_reports_csv(BufWriter::new(f), &outcome.reports)?;
    }
    Ok(())
}

fn open_input(path: Option<&Path>) -> Result<Box<dyn BufRead>, Failure> {
    Ok(match path {
        Some(p) => Box::new(BufReader::new(
            File::open(p).with_context(|| format!("opening {}", p.display()))?,
        )),
        None => Box::new(BufReader::new(io::stdin())),
    })
}

fn open_output(path: Option<&Path>) -> Result<Box<dyn Write>, Failure> {
    Ok(match path {
        Some(p) => Box::new(BufWriter::new(
            File::create(p).with_context(|| format!("creating {}", p.display()))?,
        )),
        None => Box::new(BufWriter::new(io::stdout())),
    })
}

fn load_model(path: &Path) -> Result<(Seq2SeqModel<f32>, Vocabulary), Failure> {
    load_checkpoint(path)
        .with_context(|| format!("loading checkpoint {}", path.display()))
        .map_err(Failure::Data)
}

fn check_beam(beam: usize) -> Result<(), Failure> {
    if beam == 0 {
        return Err(usage("--beam must be at least 1"));
    }
    Ok(())
}

/// Streams records of `kind` in chunks of [`CHUNK`].
fn for_chunks<T>(
    input: Box<dyn BufRead>,
    kind: CorpusKind,
    pick: impl Fn(crate::corpus::Record) -> T,
    mut f: impl FnMut(Vec<T>) -> Result<(), Failure>,
) -> Result<(), Failure> {
    let mut chunk = Vec::with_capacity(CHUNK);
    for rec in read_records(input, kind) {
        chunk.push(pick(rec.map_err(|e| Failure::Data(e.into()))?));
        if chunk.len() == CHUNK {
            f(std::mem::take(&mut chunk))?;
        }
    }
    if !chunk.is_empty() {
        f(chunk)?;
    }
    Ok(())
}

fn g2t(a: ConvertArgs) -> Result<(), Failure> {
    check_beam(a.beam)?;
    let (model, vocab) = load_model(&a.model)?;
    let input = open_input(a.input.as_deref())?;
    let mut out = open_output(a.out.as_deref())?;
    for_chunks(
        input,
        CorpusKind::Graphs,
        |r| r.graph.expect("graph records carry a graph"),
        |graphs| {
            for text in graphs_to_texts(&model, &vocab, &graphs, a.beam)? {
                writeln!(out, "{}", record_to_json(Some(&text), None))?;
            }
            Ok(())
        },
    )?;
    out.flush()?;
    Ok(())
}

fn t2g(a: T2gArgs) -> Result<(), Failure> {
    let c = a.convert;
    check_beam(c.beam)?;
    let (model, vocab) = load_model(&c.model)?;
    let mode = if a.repair { ParseMode::Repair } else { ParseMode::Strict };
    let input = open_input(c.input.as_deref())?;
    let mut out = open_output(c.out.as_deref())?;
    let mut kinds: std::collections::BTreeMap<ViolationKind, usize> = Default::default();
    let (mut records, mut rejected) = (0usize, 0usize);
    for_chunks(
        input,
        CorpusKind::Texts,
        |r| r.text.expect("text records carry a text"),
        |texts| {
            for e in texts_to_graphs(&model, &vocab, &texts, c.beam, mode)? {
                records += 1;
                rejected += usize::from(!e.parsed);
                for v in &e.violations {
                    *kinds.entry(v.kind).or_default() += 1;
                }
                writeln!(out, "{}", record_to_json(None, Some(&e.graph)))?;
            }
            Ok(())
        },
    )?;
    out.flush()?;
    let total: usize = kinds.values().sum();
    eprintln!("records={records} rejected={rejected} violations={total}");
    for (kind, n) in kinds {
        let name = serde_json::to_value(kind)?;
        eprintln!("  {}: {n}", name.as_str().unwrap_or("?"));
    }
    Ok(())
}

fn read_predictions(path: &Path, kind: CorpusKind) -> Result<Vec<crate::corpus::Record>, Failure> {
    let file = File::open(path).with_context(|| format!("opening {}", path.display()))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.with_context(|| format!("reading {}", path.display()))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(parse_prediction(&line, i + 1, kind).with_context(|| format!("in {}", path.display()))?);
    }
    Ok(out)
}

fn eval(a: EvalArgs) -> Result<(), Failure> {
    check_beam(a.beam)?;
    let gold = load_corpus(&a.pairs, CorpusKind::Pairs)?;
    let gold_graphs: Vec<Graph> = gold.graphs().cloned().collect();
    let gold_texts: Vec<Vec<String>> = gold.texts().cloned().collect();
    let (hyps, predicted): (Vec<Vec<String>>, Vec<Graph>) = match (&a.model, &a.texts, &a.graphs) {
        (Some(m), None, None) => {
            let (model, vocab) = load_model(m)?;
            let hyps = graphs_to_texts(&model, &vocab, &gold_graphs, a.beam)?;
            let predicted = texts_to_graphs(&model, &vocab, &gold_texts, a.beam, ParseMode::Repair)
                ?
                .into_iter()
                .map(|e| e.graph)
                .collect();
            (hyps, predicted)
        }
        (None, Some(t), Some(g)) => {
            let hyps = read_predictions(t, CorpusKind::Texts)?
                .into_iter()
                .map(|r| r.text.unwrap_or_default())
                .collect();
            let predicted = read_predictions(g, CorpusKind::Graphs)?
                .into_iter()
                .map(|r| r.graph.unwrap_or_else(Graph::empty))
                .collect();
            (hyps, predicted)
        }
        _ => return Err(usage("eval needs --model, or both --texts and --graphs")),
    };
    let report = EvalReport::compute(&hyps, &gold_texts, &predicted, &gold_graphs)
        .context("predictions do not line up with the gold pairs")?;
    let json = serde_json::to_string_pretty(&report)?;
    if let Some(path) = &a.metrics {
        std::fs::write(path, format!("{json}\n")).with_context(|| format!("writing {}", path.display()))?;
    }
    println!("{json}");
    eprintln!("{}", report.summary());
    Ok(())
}

fn toygen(a: ToygenArgs) -> Result<(), Failure> {
    let spec = ToySpec {
        entities: a.entities,
        relations: a.relations,
        max_triples: a.max_triples,
        seed: a.seed,
        ..ToySpec::default()
    };
    let corpus = gen_toy_corpus(&spec, a.size).map_err(|e| Failure::Usage(e.into()))?;
    save_corpus(&corpus, &a.out)?;
    eprintln!("wrote {} records to {}", corpus.len(), a.out.display());
    Ok(())
}

fn rml_inspect(a: RmlInspectArgs) -> Result<(), Failure> {
    let config = PayoffConfig {
        temperature: a.temperature,
        max_distance: a.max_distance,
        alphabet: 0..a.vocab,
        protected: Vec::new(),
    };
    let dist = distance_distribution(a.length, &config).map_err(|e| Failure::Usage(e.into()))?;
    println!("# L={} v={} tau={} D={}", a.length, a.vocab, a.temperature, dist.len() - 1);
    println!("distance,probability");
    for (d, p) in dist.iter().enumerate() {
        println!("{d},{p:.12}");
    }
    println!("# expected distance {:.6}", expected_distance(&dist));
    Ok(())
}
