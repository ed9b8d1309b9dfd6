//! Graph and text corpora: JSONL loading, normalization, the non-parallel
//! split used by unsupervised training, and a deterministic toy generator.

use std::collections::HashSet;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("line {line}: {message}")]
    Schema { line: usize, message: String },
    #[error("{0} contains no records")]
    Empty(PathBuf),
    #[error("record {index} is missing its {side}")]
    Unpaired { index: usize, side: &'static str },
    #[error("invalid toy spec: {0}")]
    ToySpec(String),
    #[error("invalid triple: {0}")]
    Triple(String),
}

/// One (head, relation, tail) fact. Every element is a non-empty list of
/// normalized tokens.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Triple {
    pub head: Vec<String>,
    pub relation: Vec<String>,
    pub tail: Vec<String>,
}

impl Triple {
    pub fn new(
        head: Vec<String>,
        relation: Vec<String>,
        tail: Vec<String>,
    ) -> Result<Self, CorpusError> {
        for (name, part) in [("head", &head), ("relation", &relation), ("tail", &tail)] {
            if part.is_empty() {
                return Err(CorpusError::Triple(format!("empty {name}")));
            }
            if part.iter().any(|t| t.trim().is_empty()) {
                return Err(CorpusError::Triple(format!("blank token in {name}")));
            }
        }
        Ok(Self { head, relation, tail })
    }

    /// Builds a triple from raw dataset strings (`Arlington_Texas`,
    /// `elevationAboveTheSeaLevel`, ...) applying the load-time normalization.
    pub fn from_raw(head: &str, relation: &str, tail: &str) -> Result<Self, CorpusError> {
        Self::new(
            normalize_entity(head),
            normalize_relation(relation),
            normalize_entity(tail),
        )
    }
}

/// An ordered list of triples. Loaded graphs always hold at least one
/// triple; graphs recovered by the repairing parser may be empty.
#[derive(Debug, Clone, Default, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Graph {
    pub triples: Vec<Triple>,
}

impl Graph {
    pub fn new(triples: Vec<Triple>) -> Result<Self, CorpusError> {
        if triples.is_empty() {
            return Err(CorpusError::Triple("graph has no triples".into()));
        }
        Ok(Self { triples })
    }

    pub fn empty() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.triples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.triples.is_empty()
    }

    /// Distinct entities (heads and tails) in first-seen order.
    pub fn entities(&self) -> Vec<&[String]> {
        let mut seen = HashSet::new();
        let mut out = Vec::new();
        for t in &self.triples {
            for e in [&t.head, &t.tail] {
                if seen.insert(e) {
                    out.push(e.as_slice());
                }
            }
        }
        out
    }

    /// Distinct relations in first-seen order.
    pub fn relations(&self) -> Vec<&[String]> {
        let mut seen = HashSet::new();
        self.triples
            .iter()
            .filter(|t| seen.insert(&t.relation))
            .map(|t| t.relation.as_slice())
            .collect()
    }

    /// All element tokens with structure stripped, in linearization order.
    pub fn bare_tokens(&self) -> Vec<String> {
        self.triples
            .iter()
            .flat_map(|t| t.head.iter().chain(&t.relation).chain(&t.tail))
            .cloned()
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CorpusKind {
    Graphs,
    Texts,
    Pairs,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Record {
    pub text: Option<Vec<String>>,
    pub graph: Option<Graph>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    pub path: Option<PathBuf>,
    pub format: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Corpus {
    pub records: Vec<Record>,
    pub provenance: Provenance,
}

impl Corpus {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Splits off the records at `at..` into a second corpus.
    pub fn split_at(mut self, at: usize) -> (Corpus, Corpus) {
        let tail = self.records.split_off(at.min(self.records.len()));
        let provenance = self.provenance.clone();
        (
            self,
            Corpus {
                records: tail,
                provenance,
            },
        )
    }

    pub fn graphs(&self) -> impl Iterator<Item = &Graph> {
        self.records.iter().filter_map(|r| r.graph.as_ref())
    }

    pub fn texts(&self) -> impl Iterator<Item = &Vec<String>> {
        self.records.iter().filter_map(|r| r.text.as_ref())
    }
}

// ---------------------------------------------------------------------------
// Normalization

fn is_detached_punct(c: char) -> bool {
    !c.is_alphanumeric() && !c.is_whitespace()
}

/// Lowercases, splits on whitespace and detaches punctuation. A `.` or `,`
/// between two digits stays inside the token so `184.0` survives.
pub fn normalize_text(s: &str) -> Vec<String> {
    let lower = s.to_lowercase();
    let chars: Vec<char> = lower.chars().collect();
    let mut tokens = Vec::new();
    let mut cur = String::new();
    for (i, &c) in chars.iter().enumerate() {
        if c.is_whitespace() {
            if !cur.is_empty() {
                tokens.push(std::mem::take(&mut cur));
            }
        } else if is_detached_punct(c) {
            let numeric_sep = (c == '.' || c == ',')
                && i > 0
                && chars[i - 1].is_ascii_digit()
                && chars.get(i + 1).is_some_and(|n| n.is_ascii_digit());
            if numeric_sep {
                cur.push(c);
            } else {
                if !cur.is_empty() {
                    tokens.push(std::mem::take(&mut cur));
                }
                tokens.push(c.to_string());
            }
        } else {
            cur.push(c);
        }
    }
    if !cur.is_empty() {
        tokens.push(cur);
    }
    tokens
}

/// Entity names use underscores for spaces (`Aston_Martin_V8`).
pub fn normalize_entity(s: &str) -> Vec<String> {
    normalize_text(&s.replace('_', " "))
}

/// Splits camelCase at lower→upper boundaries, then normalizes as text:
/// `elevationAboveTheSeaLevel` → `elevation above the sea level`.
pub fn split_camel_case(s: &str) -> String {
    let mut out = String::with_capacity(s.len() + 8);
    let mut prev: Option<char> = None;
    for c in s.chars() {
        if c.is_uppercase() && prev.is_some_and(|p| p.is_lowercase() || p.is_ascii_digit()) {
            out.push(' ');
        }
        out.push(c);
        prev = Some(c);
    }
    out
}

pub fn normalize_relation(s: &str) -> Vec<String> {
    normalize_text(&split_camel_case(&s.replace('_', " ")))
}

// ---------------------------------------------------------------------------
// JSONL

#[derive(Deserialize)]
struct GraphLine {
    triples: Option<Vec<Vec<String>>>,
}

#[derive(Deserialize)]
struct TextLine {
    text: Option<String>,
}

#[derive(Deserialize)]
struct PairLine {
    text: Option<String>,
    triples: Option<Vec<Vec<String>>>,
}

#[derive(Serialize)]
struct OutLine {
    #[serde(skip_serializing_if = "Option::is_none")]
    text: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    triples: Option<Vec<[String; 3]>>,
}

fn schema(line: usize, message: impl Into<String>) -> CorpusError {
    CorpusError::Schema {
        line,
        message: message.into(),
    }
}

fn graph_from_json(line: usize, triples: Vec<Vec<String>>, allow_empty: bool) -> Result<Graph, CorpusError> {
    if triples.is_empty() && !allow_empty {
        return Err(schema(line, "empty triple list"));
    }
    let mut out = Vec::with_capacity(triples.len());
    for (i, t) in triples.iter().enumerate() {
        if t.len() != 3 {
            return Err(schema(
                line,
                format!("triple {i} has {} elements, expected 3", t.len()),
            ));
        }
        let triple = Triple::from_raw(&t[0], &t[1], &t[2])
            .map_err(|e| schema(line, format!("triple {i}: {e}")))?;
        out.push(triple);
    }
    Ok(Graph { triples: out })
}

fn text_from_json(line: usize, text: String, allow_empty: bool) -> Result<Vec<String>, CorpusError> {
    let tokens = normalize_text(&text);
    if tokens.is_empty() && !allow_empty {
        return Err(schema(line, "empty text"));
    }
    Ok(tokens)
}

/// Parses one JSONL line for the given corpus kind. Only the fields the kind
/// needs are interpreted; a `graphs` read never looks at `text` and vice versa.
pub fn parse_record(raw: &str, line: usize, kind: CorpusKind) -> Result<Record, CorpusError> {
    parse_line(raw, line, kind, false)
}

/// Like [`parse_record`] but accepts empty texts and triple lists, as
/// produced by a model that generated nothing usable.
pub fn parse_prediction(raw: &str, line: usize, kind: CorpusKind) -> Result<Record, CorpusError> {
    parse_line(raw, line, kind, true)
}

fn parse_line(raw: &str, line: usize, kind: CorpusKind, allow_empty: bool) -> Result<Record, CorpusError> {
    let bad_json = |e: serde_json::Error| schema(line, format!("malformed record: {e}"));
    match kind {
        CorpusKind::Graphs => {
            let l: GraphLine = serde_json::from_str(raw).map_err(bad_json)?;
            let triples = l.triples.ok_or_else(|| schema(line, "missing `triples`"))?;
            Ok(Record {
                text: None,
                graph: Some(graph_from_json(line, triples, allow_empty)?),
            })
        }
        CorpusKind::Texts => {
            let l: TextLine = serde_json::from_str(raw).map_err(bad_json)?;
            let text = l.text.ok_or_else(|| schema(line, "missing `text`"))?;
            Ok(Record {
                text: Some(text_from_json(line, text, allow_empty)?),
                graph: None,
            })
        }
        CorpusKind::Pairs => {
            let l: PairLine = serde_json::from_str(raw).map_err(bad_json)?;
            let text = l.text.ok_or_else(|| schema(line, "missing `text`"))?;
            let triples = l.triples.ok_or_else(|| schema(line, "missing `triples`"))?;
            Ok(Record {
                text: Some(text_from_json(line, text, allow_empty)?),
                graph: Some(graph_from_json(line, triples, allow_empty)?),
            })
        }
    }
}

/// Streams records from a JSONL reader. Blank lines are skipped; line numbers
/// in errors are 1-based.
pub fn read_records<R: BufRead>(
    reader: R,
    kind: CorpusKind,
) -> impl Iterator<Item = Result<Record, CorpusError>> {
    reader
        .lines()
        .enumerate()
        .filter_map(move |(i, line)| match line {
            Err(e) => Some(Err(CorpusError::Io {
                path: PathBuf::from("<stream>"),
                source: e,
            })),
            Ok(l) if l.trim().is_empty() => None,
            Ok(l) => Some(parse_record(&l, i + 1, kind)),
        })
}

pub fn load_corpus(path: impl AsRef<Path>, kind: CorpusKind) -> Result<Corpus, CorpusError> {
    let path = path.as_ref();
    let io = |source| CorpusError::Io {
        path: path.to_path_buf(),
        source,
    };
    let file = File::open(path).map_err(io)?;
    let mut records = Vec::new();
    for rec in read_records(BufReader::new(file), kind) {
        records.push(rec.map_err(|e| match e {
            CorpusError::Io { source, .. } => io(source),
            other => other,
        })?);
    }
    if records.is_empty() {
        return Err(CorpusError::Empty(path.to_path_buf()));
    }
    Ok(Corpus {
        records,
        provenance: Provenance {
            path: Some(path.to_path_buf()),
            format: format!("jsonl:{}", kind_name(kind)),
        },
    })
}

fn kind_name(kind: CorpusKind) -> &'static str {
    match kind {
        CorpusKind::Graphs => "graphs",
        CorpusKind::Texts => "texts",
        CorpusKind::Pairs => "pairs",
    }
}

/// Serializes one record as a JSONL line (without the newline). Tokens are
/// joined with single spaces, which the loader normalizes back unchanged.
pub fn record_to_json(text: Option<&[String]>, graph: Option<&Graph>) -> String {
    let line = OutLine {
        text: text.map(|t| t.join(" ")),
        triples: graph.map(|g| {
            g.triples
                .iter()
                .map(|t| [t.head.join(" "), t.relation.join(" "), t.tail.join(" ")])
                .collect()
        }),
    };
    serde_json::to_string(&line).expect("record serialization cannot fail")
}

pub fn write_records<W: Write>(mut w: W, records: &[Record]) -> std::io::Result<()> {
    for r in records {
        writeln!(w, "{}", record_to_json(r.text.as_deref(), r.graph.as_ref()))?;
    }
    w.flush()
}

pub fn save_corpus(corpus: &Corpus, path: impl AsRef<Path>) -> Result<(), CorpusError> {
    let path = path.as_ref();
    let io = |source| CorpusError::Io {
        path: path.to_path_buf(),
        source,
    };
    let file = File::create(path).map_err(io)?;
    write_records(BufWriter::new(file), &corpus.records).map_err(io)
}

// ---------------------------------------------------------------------------
// Non-parallel split

/// Graph and text sets with no record alignment. This is the only input the
/// unsupervised trainer accepts.
#[derive(Debug, Clone, PartialEq)]
pub struct NonParallel {
    pub graphs: Vec<Graph>,
    pub texts: Vec<Vec<String>>,
}

impl NonParallel {
    /// Builds from independently sourced sets (cross-learning). Each side is
    /// shuffled with its own stream so input order carries no signal.
    pub fn from_unpaired(mut graphs: Vec<Graph>, mut texts: Vec<Vec<String>>, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        graphs.shuffle(&mut rng);
        texts.shuffle(&mut rng);
        Self { graphs, texts }
    }
}

/// Permutation pair used by [`split_nonparallel`]: graphs are emitted in
/// `graph_order`, texts in `text_order`. For n ≥ 2 the two never agree at any
/// position (the text order is the graph order composed with a random n-cycle).
pub fn nonparallel_orders(n: usize, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut graph_order: Vec<usize> = (0..n).collect();
    graph_order.shuffle(&mut rng);
    // Sattolo's algorithm: uniformly random cyclic permutation.
    let mut cycle: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        let j = rng.gen_range(0..i);
        cycle.swap(i, j);
    }
    let text_order = cycle.iter().map(|&c| graph_order[c]).collect();
    (graph_order, text_order)
}

pub fn split_nonparallel(corpus: &Corpus, seed: u64) -> Result<NonParallel, CorpusError> {
    for (index, r) in corpus.records.iter().enumerate() {
        if r.graph.is_none() {
            return Err(CorpusError::Unpaired { index, side: "graph" });
        }
        if r.text.is_none() {
            return Err(CorpusError::Unpaired { index, side: "text" });
        }
    }
    let (go, to) = nonparallel_orders(corpus.len(), seed);
    Ok(NonParallel {
        graphs: go
            .iter()
            .map(|&i| corpus.records[i].graph.clone().unwrap())
            .collect(),
        texts: to
            .iter()
            .map(|&i| corpus.records[i].text.clone().unwrap())
            .collect(),
    })
}

// ---------------------------------------------------------------------------
// Toy corpus

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ToySpec {
    pub entities: usize,
    pub relations: usize,
    pub max_triples: usize,
    pub templates: usize,
    pub seed: u64,
}

impl Default for ToySpec {
    fn default() -> Self {
        Self {
            entities: 40,
            relations: 12,
            max_triples: 3,
            templates: 6,
            seed: 7,
        }
    }
}

const ENTITY_POOL: &[&str] = &[
    "Arlington", "Brevik", "Corvallis", "Dunmore", "Elston", "Farrow", "Galloway", "Halden",
    "Ivanhoe", "Jarrow", "Kestrel", "Lindon", "Morwen", "Norbury", "Oakhurst", "Pembrook",
    "Aston_Martin", "Blue_Harbor", "Cedar_Falls", "Delta_Works", "Eagle_Rock", "Fox_Hollow",
    "Grand_Forks", "Hazel_Grove", "Iron_Bridge", "Jade_Valley", "King_Street", "Lake_Monroe",
    "Maple_Ridge", "North_Point", "Olive_Branch", "Pine_Bluff", "Red_Cliff", "Silver_Bay",
    "Tower_Hill", "Union_Square", "Vista_Mar", "West_End", "Zion_Park", "Stone_Gate",
    "Quinlan_Rosslyn_Abbey", "Sutton_Thornby_Hall", "Ulverston", "Valmont", "Wexford", "Yarrow",
    "Amber_Court", "Birch_Lane",
];

const RELATION_POOL: &[&str] = &[
    "birthPlace", "capital", "leaderName", "foundedBy", "operator", "headquarters",
    "partnerTown", "elevationAboveSeaLevel", "areaTotal", "manufacturer", "successor",
    "owningCompany", "architect", "populationDensity", "mascot", "nativeLanguage",
];

/// Sentence templates; `{h}`, `{r}`, `{t}` are replaced by the element tokens.
const TEMPLATES: &[&str] = &[
    "the {r} of {h} is {t}",
    "{h} has {r} {t}",
    "according to {h} , {r} is {t}",
    "{h} is noted for {r} {t}",
    "{h} , whose {r} is {t}",
    "{h} {r} {t}",
];

/// Renders a graph into text: one template sentence per triple (template
/// chosen by relation), joined by `and`, closed with `.`.
fn render(graph: &Graph, template_of: &dyn Fn(&[String]) -> usize) -> Vec<String> {
    let mut out = Vec::new();
    for (i, t) in graph.triples.iter().enumerate() {
        if i > 0 {
            out.push("and".to_string());
        }
        for word in TEMPLATES[template_of(&t.relation)].split_whitespace() {
            match word {
                "{h}" => out.extend(t.head.iter().cloned()),
                "{r}" => out.extend(t.relation.iter().cloned()),
                "{t}" => out.extend(t.tail.iter().cloned()),
                w => out.push(w.to_string()),
            }
        }
    }
    out.push(".".to_string());
    out
}

/// Number of distinct ordered graphs with 1..=max_triples distinct triples,
/// saturating at `u128::MAX`.
fn distinct_graph_count(spec: &ToySpec) -> u128 {
    let triples = (spec.entities as u128)
        .saturating_mul(spec.relations as u128)
        .saturating_mul(spec.entities as u128);
    let mut total: u128 = 0;
    let mut perm: u128 = 1;
    for k in 0..spec.max_triples as u128 {
        if k >= triples {
            break;
        }
        perm = perm.saturating_mul(triples - k);
        total = total.saturating_add(perm);
    }
    total
}

pub fn gen_toy_corpus(spec: &ToySpec, size: usize) -> Result<Corpus, CorpusError> {
    let bad = |m: String| Err(CorpusError::ToySpec(m));
    if size == 0 {
        return bad("size must be at least 1".into());
    }
    if spec.entities == 0 || spec.relations == 0 || spec.max_triples == 0 || spec.templates == 0 {
        return bad("all counts must be at least 1".into());
    }
    if spec.entities > ENTITY_POOL.len() {
        return bad(format!("at most {} entities available", ENTITY_POOL.len()));
    }
    if spec.relations > RELATION_POOL.len() {
        return bad(format!("at most {} relations available", RELATION_POOL.len()));
    }
    if spec.templates > TEMPLATES.len() {
        return bad(format!("at most {} templates available", TEMPLATES.len()));
    }
    if distinct_graph_count(spec) < size as u128 {
        return bad(format!("inventories too small for {size} distinct graphs"));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut entities: Vec<&str> = ENTITY_POOL.to_vec();
    entities.shuffle(&mut rng);
    entities.truncate(spec.entities);
    let mut relations: Vec<&str> = RELATION_POOL.to_vec();
    relations.shuffle(&mut rng);
    relations.truncate(spec.relations);

    let entities: Vec<Vec<String>> = entities.iter().map(|e| normalize_entity(e)).collect();
    let relations: Vec<Vec<String>> = relations.iter().map(|r| normalize_relation(r)).collect();
    let templates = spec.templates;
    let rel_index = relations.clone();
    let template_of = move |rel: &[String]| {
        rel_index.iter().position(|r| r == rel).unwrap_or(0) % templates
    };

    let mut seen = HashSet::with_capacity(size);
    let mut records = Vec::with_capacity(size);
    let max_attempts = size.saturating_mul(64).max(10_000);
    let mut attempts = 0;
    while records.len() < size {
        attempts += 1;
        if attempts > max_attempts {
            return bad(format!("inventories too small for {size} distinct graphs"));
        }
        let n = rng
            .gen_range(1..=spec.max_triples)
            .min(entities.len() * entities.len() * relations.len());
        let mut triples: Vec<Triple> = Vec::with_capacity(n);
        while triples.len() < n {
            let t = Triple {
                head: entities[rng.gen_range(0..entities.len())].clone(),
                relation: relations[rng.gen_range(0..relations.len())].clone(),
                tail: entities[rng.gen_range(0..entities.len())].clone(),
            };
            if !triples.contains(&t) {
                triples.push(t);
            }
        }
        let graph = Graph { triples };
        if !seen.insert(graph.clone()) {
            continue;
        }
        let text = render(&graph, &template_of);
        records.push(Record {
            text: Some(text),
            graph: Some(graph),
        });
    }
    Ok(Corpus {
        records,
        provenance: Provenance {
            path: None,
            format: format!("toy:seed={}", spec.seed),
        },
    })
}
