//! Back-translation cycles, reward-augmented targets and the training loops.
//!
//! Graph cycle: a graph is converted to a synthetic text whose soft
//! distributions are encoded again and must reproduce the graph (or a
//! payoff-perturbed copy of it). The text cycle mirrors this. Both cycles
//! train the same parameter set.

use std::io::Write;
use std::path::PathBuf;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::Graph;
use crate::graphseq::linearize;
use crate::rml::{PayoffConfig, PayoffSampler, RmlError};
use crate::seqmodel::params::{Adam, AdamConfig, ParamSet};
use crate::seqmodel::tape::{Tape, Var};
use crate::seqmodel::{DecodeMask, Float, ModelConfig, ModelError, Seq2SeqModel, SynthesisInput};
use crate::vocab::{encode, Prefix, TokenSequence, Vocabulary, GRAPH_PREFIX, TEXT_PREFIX};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Rml(#[from] RmlError),
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("{0} set is empty")]
    EmptyData(&'static str),
    #[error("record {index} is missing its {side}")]
    Unpaired { index: usize, side: &'static str },
    #[error("non-finite {what} loss at epoch {epoch}, step {step}")]
    NonFinite { what: &'static str, epoch: usize, step: usize },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
}

/// Which side trains against payoff-sampled targets.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum RmlMode {
    None,
    #[default]
    Graph,
    Text,
    Both,
}

impl RmlMode {
    pub fn graph(self) -> bool {
        matches!(self, RmlMode::Graph | RmlMode::Both)
    }

    pub fn text(self) -> bool {
        matches!(self, RmlMode::Text | RmlMode::Both)
    }
}

/// Payoff parameters for one side; the alphabet comes from the vocabulary.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PayoffSettings {
    pub temperature: f64,
    pub max_distance: Option<usize>,
}

impl Default for PayoffSettings {
    fn default() -> Self {
        let d = PayoffConfig::default();
        Self {
            temperature: d.temperature,
            max_distance: d.max_distance,
        }
    }
}

impl PayoffSettings {
    pub fn payoff_config(&self, vocab_size: usize) -> PayoffConfig {
        PayoffConfig {
            temperature: self.temperature,
            max_distance: self.max_distance,
            alphabet: crate::vocab::NUM_RESERVED..vocab_size as u32,
            protected: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
    pub rml_mode: RmlMode,
    pub graph_payoff: PayoffSettings,
    pub text_payoff: PayoffSettings,
    /// Beam width for training-time synthesis; 1 is greedy.
    pub synthesis_beam: usize,
    pub synthesis_input: SynthesisInput,
    /// Copy-task epochs run before back-translation.
    pub warmup: bool,
    pub warmup_epochs: usize,
    /// Save a checkpoint every this many epochs (0 disables).
    pub checkpoint_every: usize,
    pub checkpoint_path: Option<PathBuf>,
    pub supervised: bool,
    /// Global gradient norm clip.
    pub grad_clip: Option<f64>,
    pub model: ModelConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            batch_size: 16,
            learning_rate: AdamConfig::default().learning_rate,
            seed: 0,
            rml_mode: RmlMode::Graph,
            graph_payoff: PayoffSettings::default(),
            text_payoff: PayoffSettings::default(),
            synthesis_beam: 1,
            synthesis_input: SynthesisInput::Soft,
            warmup: false,
            warmup_epochs: 2,
            checkpoint_every: 0,
            checkpoint_path: None,
            supervised: false,
            grad_clip: None,
            model: ModelConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: &str| Err(TrainError::Config(m.into()));
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1");
        }
        if !(self.learning_rate > 0.0) {
            return bad("learning_rate must be positive");
        }
        if self.synthesis_beam == 0 {
            return bad("synthesis_beam must be at least 1");
        }
        if self.grad_clip.is_some_and(|c| !(c > 0.0)) {
            return bad("grad_clip must be positive");
        }
        if self.checkpoint_every > 0 && self.checkpoint_path.is_none() {
            return bad("checkpoint_every needs checkpoint_path");
        }
        self.model.validate()?;
        Ok(())
    }

    fn adam(&self) -> AdamConfig {
        AdamConfig {
            learning_rate: self.learning_rate,
            ..AdamConfig::default()
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepReport {
    pub epoch: usize,
    pub step: usize,
    pub graph_loss: f64,
    pub text_loss: f64,
    pub total: f64,
}

pub const REPORT_HEADER: &str = "epoch,step,graph_loss,text_loss,total";

pub fn write_reports_csv<W: Write>(mut w: W, reports: &[StepReport]) -> std::io::Result<()> {
    writeln!(w, "{REPORT_HEADER}")?;
    for r in reports {
        writeln!(w, "{},{},{},{},{}", r.epoch, r.step, r.graph_loss, r.text_loss, r.total)?;
    }
    Ok(())
}

/// Decoder target for a graph: its linearization followed by EOS.
pub fn graph_target(g: &Graph, vocab: &Vocabulary) -> TokenSequence {
    encode(linearize(g).tokens(), vocab, Prefix::None)
}

pub fn text_target(text: &[String], vocab: &Vocabulary) -> TokenSequence {
    encode(text, vocab, Prefix::None)
}

/// Encoder input: the modality prefix followed by the sequence.
pub fn with_prefix(seq: &TokenSequence, prefix: Prefix) -> TokenSequence {
    let mut ids = Vec::with_capacity(seq.len() + 1);
    ids.extend(prefix.id());
    ids.extend_from_slice(seq.ids());
    TokenSequence::from_ids_unchecked(ids)
}

/// Source modality of a cycle.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Cycle {
    /// graph → text → graph
    Graph,
    /// text → graph → text
    Text,
}

impl Cycle {
    pub fn source_prefix(self) -> Prefix {
        match self {
            Cycle::Graph => Prefix::Graph,
            Cycle::Text => Prefix::Text,
        }
    }

    /// Prefix marking the synthetic sequence when it is fed back.
    pub fn synthetic_prefix(self) -> u32 {
        match self {
            Cycle::Graph => TEXT_PREFIX,
            Cycle::Text => GRAPH_PREFIX,
        }
    }

    pub fn synthesis_mask(self, vocab_size: usize) -> DecodeMask {
        match self {
            Cycle::Graph => DecodeMask::for_text(vocab_size),
            Cycle::Text => DecodeMask::for_graph(vocab_size),
        }
    }

    fn name(self) -> &'static str {
        match self {
            Cycle::Graph => "graph",
            Cycle::Text => "text",
        }
    }
}

/// Mean token NLL of `targets` after a full cycle from `sources`, recorded
/// on `tape`. `sources[i]` is the unprefixed original sequence.
pub fn cycle_loss_on_tape<F: Float>(
    model: &Seq2SeqModel<F>,
    tape: &mut Tape<'_, F>,
    cycle: Cycle,
    sources: &[&TokenSequence],
    targets: &[&TokenSequence],
    beam: usize,
    input: SynthesisInput,
) -> Result<Var, TrainError> {
    if sources.is_empty() {
        return Err(TrainError::EmptyData(cycle.name()));
    }
    let prefixed: Vec<TokenSequence> = sources.iter().map(|s| with_prefix(s, cycle.source_prefix())).collect();
    let ids: Vec<&[u32]> = prefixed.iter().map(|s| s.ids()).collect();
    let (memory, packing) = model.encode_ids(tape, &ids)?;
    let mask = cycle.synthesis_mask(model.vocab_size());
    let max_len = model.config().max_len - 1;
    let synth = model.synthesize(tape, memory, &packing, &mask, max_len, beam, input, cycle.synthetic_prefix())?;
    let memory = model.encode_soft(tape, synth.source, &synth.packing)?;
    let tgt: Vec<&[u32]> = targets.iter().map(|t| t.ids()).collect();
    let (nll, count) = model.target_nll(tape, memory, &synth.packing, &tgt)?;
    Ok(tape.scale(nll, F::one() / F::from_usize(count.max(1)).unwrap()))
}

/// Targets for one batch: payoff samples when a sampler is given.
fn cycle_targets<R: Rng + ?Sized>(
    batch: &[&TokenSequence],
    sampler: Option<&mut PayoffSampler>,
    rng: &mut R,
) -> Result<Vec<TokenSequence>, TrainError> {
    match sampler {
        None => Ok(batch.iter().map(|s| (*s).clone()).collect()),
        Some(sampler) => batch
            .iter()
            .map(|s| match sampler.sample(s, rng) {
                Ok(sample) => Ok(sample.hypothesis),
                Err(RmlError::NoEditable) => Ok((*s).clone()),
                Err(e) => Err(e.into()),
            })
            .collect(),
    }
}

fn cycle_loss<F: Float, R: Rng + ?Sized>(
    model: &Seq2SeqModel<F>,
    cycle: Cycle,
    batch: &[TokenSequence],
    sampler: Option<&mut PayoffSampler>,
    beam: usize,
    rng: &mut R,
) -> Result<F, TrainError> {
    let sources: Vec<&TokenSequence> = batch.iter().collect();
    let targets = cycle_targets(&sources, sampler, rng)?;
    let targets: Vec<&TokenSequence> = targets.iter().collect();
    let mut tape = model.tape();
    let loss = cycle_loss_on_tape(model, &mut tape, cycle, &sources, &targets, beam, SynthesisInput::Soft)?;
    Ok(tape.scalar(loss))
}

/// Graph-cycle loss of a batch of graph targets (see [`graph_target`]).
/// With `payoff` set, each graph is replaced by one sampled hypothesis.
pub fn graph_cycle_loss<F: Float, R: Rng + ?Sized>(
    model: &Seq2SeqModel<F>,
    graphs: &[TokenSequence],
    payoff: Option<&mut PayoffSampler>,
    beam: usize,
    rng: &mut R,
) -> Result<F, TrainError> {
    cycle_loss(model, Cycle::Graph, graphs, payoff, beam, rng)
}

pub fn text_cycle_loss<F: Float, R: Rng + ?Sized>(
    model: &Seq2SeqModel<F>,
    texts: &[TokenSequence],
    payoff: Option<&mut PayoffSampler>,
    beam: usize,
    rng: &mut R,
) -> Result<F, TrainError> {
    cycle_loss(model, Cycle::Text, texts, payoff, beam, rng)
}

/// Mean NLL of `targets` given `sources` (both unprefixed), source prefix
/// `prefix`, recorded on `tape`.
pub fn direct_loss_on_tape<F: Float>(
    model: &Seq2SeqModel<F>,
    tape: &mut Tape<'_, F>,
    prefix: Prefix,
    sources: &[&TokenSequence],
    targets: &[&TokenSequence],
) -> Result<Var, TrainError> {
    let prefixed: Vec<TokenSequence> = sources.iter().map(|s| with_prefix(s, prefix)).collect();
    let ids: Vec<&[u32]> = prefixed.iter().map(|s| s.ids()).collect();
    let (memory, packing) = model.encode_ids(tape, &ids)?;
    let tgt: Vec<&[u32]> = targets.iter().map(|t| t.ids()).collect();
    let (nll, count) = model.target_nll(tape, memory, &packing, &tgt)?;
    Ok(tape.scale(nll, F::one() / F::from_usize(count.max(1)).unwrap()))
}

/// Supervised loss of aligned pairs: `-log P(t|g) - log P(g|t)`, each term
/// a per-token mean.
pub fn supervised_loss<F: Float>(
    model: &Seq2SeqModel<F>,
    graphs: &[TokenSequence],
    texts: &[TokenSequence],
) -> Result<F, TrainError> {
    let g: Vec<&TokenSequence> = graphs.iter().collect();
    let t: Vec<&TokenSequence> = texts.iter().collect();
    let mut tape = model.tape();
    let a = direct_loss_on_tape(model, &mut tape, Prefix::Graph, &g, &t)?;
    let b = direct_loss_on_tape(model, &mut tape, Prefix::Text, &t, &g)?;
    let total = tape.add(a, b);
    Ok(tape.scalar(total))
}

/// Optimizer state for one model.
struct Optimizer<F: Float> {
    adam: Adam<F>,
    grads: ParamSet<F>,
    clip: Option<f64>,
}

impl<F: Float> Optimizer<F> {
    fn new(config: &TrainConfig, model: &Seq2SeqModel<F>) -> Self {
        Self {
            adam: Adam::new(config.adam(), model.params()),
            grads: model.params().zeros_like(),
            clip: config.grad_clip,
        }
    }

    /// Backpropagates `loss` built by `f` and applies one update. Returns
    /// the loss value, or `None` when it is not finite (no update).
    fn step<G>(&mut self, model: &mut Seq2SeqModel<F>, f: G) -> Result<Option<f64>, TrainError>
    where
        G: FnOnce(&Seq2SeqModel<F>, &mut Tape<'_, F>) -> Result<Var, TrainError>,
    {
        self.grads.fill_zero();
        let value = {
            let mut tape = model.tape();
            let loss = f(model, &mut tape)?;
            let value = tape.scalar(loss).to_f64().unwrap();
            if !value.is_finite() {
                return Ok(None);
            }
            tape.backward(loss, &mut self.grads);
            value
        };
        if let Some(clip) = self.clip {
            let norm = self.grads.global_norm();
            if norm > clip {
                self.grads.scale(F::from_f64(clip / norm).unwrap());
            }
        }
        self.adam.update(model.params_mut(), &self.grads);
        Ok(Some(value))
    }
}

fn batches<R: Rng + ?Sized>(n: usize, size: usize, rng: &mut R) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    order.chunks(size).map(<[usize]>::to_vec).collect()
}

fn pick<'a>(data: &'a [TokenSequence], idx: &[usize]) -> Vec<&'a TokenSequence> {
    idx.iter().map(|&i| &data[i]).collect()
}

fn check_lengths(data: &[TokenSequence], max: usize, what: &'static str) -> Result<(), TrainError> {
    if data.is_empty() {
        return Err(TrainError::EmptyData(what));
    }
    match data.iter().find(|s| s.len() + 1 > max) {
        Some(s) => Err(ModelError::LengthOverflow { len: s.len() + 1, max }.into()),
        None => Ok(()),
    }
}

/// Called after every epoch with the 1-based epoch number.
pub type EpochHook<'a, F> = dyn FnMut(usize, &Seq2SeqModel<F>) -> Result<(), TrainError> + 'a;

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainOutcome {
    pub reports: Vec<StepReport>,
    /// Mean copy-task loss per warm-up epoch.
    pub warmup_losses: Vec<f64>,
}

impl TrainOutcome {
    /// Mean total loss per epoch.
    pub fn epoch_losses(&self) -> Vec<f64> {
        let epochs = self.reports.iter().map(|r| r.epoch).max().unwrap_or(0);
        (1..=epochs)
            .map(|e| {
                let rs: Vec<f64> = self.reports.iter().filter(|r| r.epoch == e).map(|r| r.total).collect();
                rs.iter().sum::<f64>() / rs.len().max(1) as f64
            })
            .collect()
    }
}

/// Copy-task warm-up built only from graphs: the encoder sees a
/// linearized graph and the decoder emits its bare words, and the reverse.
fn warmup_epoch<F: Float, R: Rng + ?Sized>(
    model: &mut Seq2SeqModel<F>,
    opt: &mut Optimizer<F>,
    graphs: &[TokenSequence],
    bare: &[TokenSequence],
    batch_size: usize,
    rng: &mut R,
) -> Result<f64, TrainError> {
    let mut total = 0.0;
    let mut n = 0;
    for idx in batches(graphs.len(), batch_size, rng) {
        let g = pick(graphs, &idx);
        let b = pick(bare, &idx);
        let loss = opt.step(model, |m, tape| {
            let a = direct_loss_on_tape(m, tape, Prefix::Graph, &g, &b)?;
            let c = direct_loss_on_tape(m, tape, Prefix::Text, &b, &g)?;
            Ok(tape.add(a, c))
        })?;
        let loss = loss.ok_or(TrainError::NonFinite {
            what: "warm-up",
            epoch: 0,
            step: n,
        })?;
        total += loss;
        n += 1;
    }
    Ok(total / n.max(1) as f64)
}

/// Bare-word copy of each graph target: the linearization without
/// structural tokens.
fn bare_targets(graphs: &[TokenSequence]) -> Vec<TokenSequence> {
    graphs
        .iter()
        .map(|g| {
            TokenSequence::from_ids_unchecked(
                g.ids()
                    .iter()
                    .copied()
                    .filter(|id| !crate::vocab::STRUCTURAL.contains(id))
                    .collect(),
            )
        })
        .collect()
}

/// Unsupervised training on unaligned graph and text sets. Each step pair
/// runs one graph-cycle batch and one text-cycle batch, each followed by
/// an optimizer update.
pub fn train_unsupervised<F: Float>(
    model: &mut Seq2SeqModel<F>,
    graphs: &[TokenSequence],
    texts: &[TokenSequence],
    config: &TrainConfig,
    on_epoch: &mut EpochHook<'_, F>,
) -> Result<TrainOutcome, TrainError> {
    config.validate()?;
    let max = model.config().max_len;
    check_lengths(graphs, max, "graph")?;
    check_lengths(texts, max, "text")?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut opt = Optimizer::new(config, model);
    let mut outcome = TrainOutcome::default();
    let vocab_size = model.vocab_size();

    // Distance distributions are precomputed for every editable length.
    let mut graph_sampler = None;
    if config.rml_mode.graph() {
        let mut s = PayoffSampler::new(config.graph_payoff.payoff_config(vocab_size))?;
        let lens: Vec<usize> = graphs.iter().map(|g| s.config().editable_positions(g.ids()).len()).collect();
        s.precompute(lens.into_iter().filter(|&l| l > 0))?;
        graph_sampler = Some(s);
    }
    let mut text_sampler = None;
    if config.rml_mode.text() {
        let mut s = PayoffSampler::new(config.text_payoff.payoff_config(vocab_size))?;
        let lens: Vec<usize> = texts.iter().map(|t| s.config().editable_positions(t.ids()).len()).collect();
        s.precompute(lens.into_iter().filter(|&l| l > 0))?;
        text_sampler = Some(s);
    }

    if config.warmup {
        let bare = bare_targets(graphs);
        for _ in 0..config.warmup_epochs {
            let loss = warmup_epoch(model, &mut opt, graphs, &bare, config.batch_size, &mut rng)?;
            outcome.warmup_losses.push(loss);
        }
    }

    let beam = config.synthesis_beam;
    let input = config.synthesis_input;
    for epoch in 1..=config.epochs {
        let gb = batches(graphs.len(), config.batch_size, &mut rng);
        let tb = batches(texts.len(), config.batch_size, &mut rng);
        for step in 0..gb.len().max(tb.len()) {
            let mut graph_loss = 0.0;
            let mut text_loss = 0.0;
            if let Some(idx) = gb.get(step) {
                let src = pick(graphs, idx);
                let tgt = cycle_targets(&src, graph_sampler.as_mut(), &mut rng)?;
                let tgt: Vec<&TokenSequence> = tgt.iter().collect();
                graph_loss = opt
                    .step(model, |m, tape| cycle_loss_on_tape(m, tape, Cycle::Graph, &src, &tgt, beam, input))?
                    .ok_or(TrainError::NonFinite {
                        what: "graph-cycle",
                        epoch,
                        step,
                    })?;
            }
            if let Some(idx) = tb.get(step) {
                let src = pick(texts, idx);
                let tgt = cycle_targets(&src, text_sampler.as_mut(), &mut rng)?;
                let tgt: Vec<&TokenSequence> = tgt.iter().collect();
                text_loss = opt
                    .step(model, |m, tape| cycle_loss_on_tape(m, tape, Cycle::Text, &src, &tgt, beam, input))?
                    .ok_or(TrainError::NonFinite {
                        what: "text-cycle",
                        epoch,
                        step,
                    })?;
            }
            outcome.reports.push(StepReport {
                epoch,
                step,
                graph_loss,
                text_loss,
                total: graph_loss + text_loss,
            });
        }
        on_epoch(epoch, model)?;
    }
    Ok(outcome)
}

/// Supervised training on aligned pairs; `graphs[i]` belongs with
/// `texts[i]`.
pub fn train_supervised<F: Float>(
    model: &mut Seq2SeqModel<F>,
    graphs: &[TokenSequence],
    texts: &[TokenSequence],
    config: &TrainConfig,
    on_epoch: &mut EpochHook<'_, F>,
) -> Result<TrainOutcome, TrainError> {
    config.validate()?;
    if graphs.len() != texts.len() {
        let index = graphs.len().min(texts.len());
        let side = if graphs.len() < texts.len() { "graph" } else { "text" };
        return Err(TrainError::Unpaired { index, side });
    }
    let max = model.config().max_len;
    check_lengths(graphs, max, "graph")?;
    check_lengths(texts, max, "text")?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut opt = Optimizer::new(config, model);
    let mut outcome = TrainOutcome::default();
    for epoch in 1..=config.epochs {
        for (step, idx) in batches(graphs.len(), config.batch_size, &mut rng).into_iter().enumerate() {
            let g = pick(graphs, &idx);
            let t = pick(texts, &idx);
            let mut parts = (0.0, 0.0);
            let total = opt
                .step(model, |m, tape| {
                    let g2t = direct_loss_on_tape(m, tape, Prefix::Graph, &g, &t)?;
                    let t2g = direct_loss_on_tape(m, tape, Prefix::Text, &t, &g)?;
                    parts = (tape.scalar(t2g).to_f64().unwrap(), tape.scalar(g2t).to_f64().unwrap());
                    Ok(tape.add(g2t, t2g))
                })?
                .ok_or(TrainError::NonFinite {
                    what: "supervised",
                    epoch,
                    step,
                })?;
            outcome.reports.push(StepReport {
                epoch,
                step,
                graph_loss: parts.0,
                text_loss: parts.1,
                total,
            });
        }
        on_epoch(epoch, model)?;
    }
    Ok(outcome)
}
