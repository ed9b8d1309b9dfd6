//! The shared encoder-decoder used for both conversion directions.

mod checkpoint;
mod decode;
mod model;
pub mod params;
pub mod tape;

use std::fmt::Debug;
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

use ndarray::{s, Array2, Array3, ArrayView2};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use checkpoint::{load_checkpoint, save_checkpoint, CheckpointError};
pub use model::{shift_right, Packing};
use model::{init_params, positional_table, Layout, Net};
use params::ParamSet;
use tape::{Tape, Var};

use crate::vocab::{TokenSequence, BOS, END, EOS, GRAPH_PREFIX, HEAD, PAD, REL, TAIL, TEXT_PREFIX};

/// Scalar type of model parameters.
pub trait Float:
    num_traits::Float
    + num_traits::FromPrimitive
    + ndarray::LinalgScalar
    + ndarray::ScalarOperand
    + Debug
    + Sum
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + Send
    + Sync
    + 'static
{
}

impl Float for f32 {}
impl Float for f64 {}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub d_model: usize,
    pub heads: usize,
    pub encoder_layers: usize,
    pub decoder_layers: usize,
    pub d_ff: usize,
    pub max_len: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d_model: 128,
            heads: 4,
            encoder_layers: 2,
            decoder_layers: 2,
            d_ff: 512,
            max_len: 64,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |m: &str| Err(ModelError::Config(m.to_string()));
        if self.d_model == 0 || self.heads == 0 || self.d_model % self.heads != 0 {
            return bad("d_model must be a positive multiple of heads");
        }
        if self.d_ff == 0 {
            return bad("d_ff must be positive");
        }
        if self.max_len < 2 {
            return bad("max_len must be at least 2");
        }
        Ok(())
    }
}

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    Config(String),
    #[error("sequence of length {len} exceeds max length {max}")]
    LengthOverflow { len: usize, max: usize },
    #[error("batch is empty")]
    EmptyBatch,
    #[error("source batch has {src} sequences but target batch has {tgt}")]
    BatchMismatch { src: usize, tgt: usize },
    #[error("empty sequence")]
    EmptySequence,
    #[error("token id {id} outside vocabulary of size {size}")]
    TokenOutOfRange { id: u32, size: usize },
    #[error("invalid soft sequence: {0}")]
    InvalidSoft(String),
    #[error("invalid decode mask: {0}")]
    InvalidMask(String),
    #[error("beam size must be at least 1")]
    ZeroBeam,
}

/// Vocabulary ids that may not be emitted during decoding.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DecodeMask {
    forbidden: Vec<bool>,
}

impl DecodeMask {
    const ALWAYS: [u32; 4] = [PAD, BOS, GRAPH_PREFIX, TEXT_PREFIX];

    /// Mask forbidding `ids` in addition to padding, BOS and the task
    /// prefixes. EOS may never be forbidden.
    pub fn new(vocab_size: usize, ids: impl IntoIterator<Item = u32>) -> Result<Self, ModelError> {
        let mut forbidden = vec![false; vocab_size];
        for id in Self::ALWAYS.into_iter().chain(ids) {
            if id == EOS {
                return Err(ModelError::InvalidMask("EOS cannot be forbidden".into()));
            }
            let slot = forbidden
                .get_mut(id as usize)
                .ok_or(ModelError::TokenOutOfRange { id, size: vocab_size })?;
            *slot = true;
        }
        Ok(Self { forbidden })
    }

    /// Only the always-forbidden control ids.
    pub fn base(vocab_size: usize) -> Self {
        Self::new(vocab_size, []).expect("base mask is valid")
    }

    /// Mask for text output: structural graph tokens are illegal.
    pub fn for_text(vocab_size: usize) -> Self {
        Self::new(vocab_size, [HEAD, REL, TAIL, END]).expect("text mask is valid")
    }

    /// Mask for graph output.
    pub fn for_graph(vocab_size: usize) -> Self {
        Self::base(vocab_size)
    }

    pub fn is_forbidden(&self, id: u32) -> bool {
        self.forbidden.get(id as usize).copied().unwrap_or(true)
    }

    pub fn as_slice(&self) -> &[bool] {
        &self.forbidden
    }

    pub fn vocab_size(&self) -> usize {
        self.forbidden.len()
    }
}

/// Per-position probability vectors over the vocabulary.
#[derive(Debug, Clone, PartialEq)]
pub struct SoftSequence<F> {
    probs: Array2<F>,
}

impl<F: Float> SoftSequence<F> {
    pub const TOLERANCE: f64 = 1e-6;

    pub fn new(probs: Array2<F>) -> Result<Self, ModelError> {
        if probs.nrows() == 0 {
            return Err(ModelError::EmptySequence);
        }
        for (i, row) in probs.rows().into_iter().enumerate() {
            if row.iter().any(|&p| !(p >= F::zero())) {
                return Err(ModelError::InvalidSoft(format!("negative or NaN entry at position {i}")));
            }
            let sum = row.sum().to_f64().unwrap();
            if (sum - 1.0).abs() > Self::TOLERANCE {
                return Err(ModelError::InvalidSoft(format!("position {i} sums to {sum}")));
            }
        }
        Ok(Self { probs })
    }

    pub fn one_hot(ids: &[u32], vocab_size: usize) -> Result<Self, ModelError> {
        let mut probs = Array2::zeros((ids.len(), vocab_size));
        for (i, &id) in ids.iter().enumerate() {
            if id as usize >= vocab_size {
                return Err(ModelError::TokenOutOfRange { id, size: vocab_size });
            }
            probs[[i, id as usize]] = F::one();
        }
        Self::new(probs)
    }

    /// Prepends a one-hot row for `id`, typically a task prefix.
    pub fn with_prefix(&self, id: u32) -> Self {
        let mut probs = Array2::zeros((self.len() + 1, self.vocab_size()));
        probs[[0, id as usize]] = F::one();
        probs.slice_mut(s![1.., ..]).assign(&self.probs);
        Self { probs }
    }

    pub fn probs(&self) -> ArrayView2<'_, F> {
        self.probs.view()
    }

    pub fn len(&self) -> usize {
        self.probs.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.probs.nrows() == 0
    }

    pub fn vocab_size(&self) -> usize {
        self.probs.ncols()
    }

    /// Most likely id at each position.
    pub fn argmax(&self) -> Vec<u32> {
        self.probs
            .rows()
            .into_iter()
            .map(|row| {
                let mut best = 0;
                for (j, &p) in row.iter().enumerate() {
                    if p > row[best] {
                        best = j;
                    }
                }
                best as u32
            })
            .collect()
    }
}

/// Encoder input: discrete ids or a soft sequence.
#[derive(Debug, Clone, Copy)]
pub enum Source<'a, F> {
    Tokens(&'a TokenSequence),
    Soft(&'a SoftSequence<F>),
}

/// How synthetic distributions enter the second pass.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SynthesisInput {
    /// Full distributions, differentiable through the first pass.
    #[default]
    Soft,
    /// Full distributions treated as constants.
    Detached,
    /// One-hot argmax rows in the forward pass with the gradient of the
    /// distributions in the backward pass.
    StraightThrough,
}

/// Synthetic sequences produced on a tape, ready to feed the encoder.
pub struct Synthesis {
    /// Soft encoder input for the second pass, prefix row included.
    pub source: Var,
    pub packing: Packing,
    /// Decoded ids behind each synthetic sequence.
    pub tokens: Vec<Vec<u32>>,
}

/// A single parameter set serving both conversion directions.
#[derive(Debug, Clone)]
pub struct Seq2SeqModel<F: Float> {
    config: ModelConfig,
    vocab_size: usize,
    params: ParamSet<F>,
    layout: Layout,
    pe: Array2<F>,
}

impl<F: Float> Seq2SeqModel<F> {
    pub fn new(config: ModelConfig, vocab_size: usize, seed: u64) -> Result<Self, ModelError> {
        config.validate()?;
        if vocab_size <= TEXT_PREFIX as usize {
            return Err(ModelError::Config(format!("vocabulary of size {vocab_size} is too small")));
        }
        let (params, layout) = init_params(&config, vocab_size, seed);
        Ok(Self {
            pe: positional_table(config.max_len, config.d_model),
            config,
            vocab_size,
            params,
            layout,
        })
    }

    /// Replaces all parameters; shapes must match the layout.
    pub fn with_params(mut self, params: ParamSet<F>) -> Result<Self, ModelError> {
        if params.len() != self.params.len()
            || params
                .tensors()
                .iter()
                .zip(self.params.tensors())
                .any(|(a, b)| a.shape() != b.shape())
        {
            return Err(ModelError::Config("parameter shapes do not match the model".into()));
        }
        self.params = params;
        Ok(self)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    pub fn params(&self) -> &ParamSet<F> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet<F> {
        &mut self.params
    }

    pub fn fingerprint(&self) -> u64 {
        self.params.fingerprint()
    }

    pub fn cast<G: Float>(&self) -> Seq2SeqModel<G> {
        Seq2SeqModel {
            config: self.config,
            vocab_size: self.vocab_size,
            params: self.params.cast(),
            layout: self.layout.clone(),
            pe: self.pe.mapv(|v| G::from_f64(v.to_f64().unwrap()).unwrap()),
        }
    }

    pub fn tape(&self) -> Tape<'_, F> {
        Tape::new(&self.params)
    }

    fn net(&self) -> Net<'_, F> {
        Net {
            config: &self.config,
            layout: &self.layout,
            pe: &self.pe,
        }
    }

    fn check_ids(&self, ids: &[u32]) -> Result<(), ModelError> {
        if ids.is_empty() {
            return Err(ModelError::EmptySequence);
        }
        if ids.len() > self.config.max_len {
            return Err(ModelError::LengthOverflow {
                len: ids.len(),
                max: self.config.max_len,
            });
        }
        match ids.iter().find(|&&id| id as usize >= self.vocab_size) {
            Some(&id) => Err(ModelError::TokenOutOfRange {
                id,
                size: self.vocab_size,
            }),
            None => Ok(()),
        }
    }

    fn check_soft(&self, soft: &SoftSequence<F>) -> Result<(), ModelError> {
        if soft.vocab_size() != self.vocab_size {
            return Err(ModelError::InvalidSoft(format!(
                "width {} does not match vocabulary size {}",
                soft.vocab_size(),
                self.vocab_size
            )));
        }
        if soft.len() > self.config.max_len {
            return Err(ModelError::LengthOverflow {
                len: soft.len(),
                max: self.config.max_len,
            });
        }
        Ok(())
    }

    /// Encoder memory for a packed batch of id sequences.
    pub fn encode_ids(&self, tape: &mut Tape<'_, F>, seqs: &[&[u32]]) -> Result<(Var, Packing), ModelError> {
        if seqs.is_empty() {
            return Err(ModelError::EmptyBatch);
        }
        for s in seqs {
            self.check_ids(s)?;
        }
        let net = self.net();
        let (x, packing) = net.embed_ids(tape, seqs);
        Ok((net.encode(tape, x, &packing), packing))
    }

    /// Encoder memory for packed probability rows; each row is embedded as
    /// the probability-weighted average of embedding rows.
    pub fn encode_soft(&self, tape: &mut Tape<'_, F>, probs: Var, packing: &Packing) -> Result<Var, ModelError> {
        if packing.is_empty() {
            return Err(ModelError::EmptyBatch);
        }
        if let Some(&len) = packing.lens.iter().find(|&&l| l > self.config.max_len) {
            return Err(ModelError::LengthOverflow {
                len,
                max: self.config.max_len,
            });
        }
        let net = self.net();
        let x = net.embed_soft(tape, probs, packing);
        Ok(net.encode(tape, x, packing))
    }

    fn encode_source(&self, tape: &mut Tape<'_, F>, src: Source<'_, F>) -> Result<(Var, Packing), ModelError> {
        match src {
            Source::Tokens(seq) => self.encode_ids(tape, &[seq.ids()]),
            Source::Soft(soft) => {
                self.check_soft(soft)?;
                let probs = tape.constant(soft.probs().to_owned());
                let packing = Packing::from_lens(vec![soft.len()]);
                let memory = self.encode_soft(tape, probs, &packing)?;
                Ok((memory, packing))
            }
        }
    }

    /// Final encoder states for one source.
    pub fn encoder_states(&self, src: Source<'_, F>) -> Result<Array2<F>, ModelError> {
        let mut tape = self.tape();
        let (memory, _) = self.encode_source(&mut tape, src)?;
        Ok(tape.value(memory).to_owned())
    }

    /// Decoder logits for teacher-forced targets given encoder memory.
    pub fn decode_logits(
        &self,
        tape: &mut Tape<'_, F>,
        memory: Var,
        mem_packing: &Packing,
        targets: &[&[u32]],
    ) -> Result<(Var, Packing), ModelError> {
        if targets.len() != mem_packing.len() {
            return Err(ModelError::BatchMismatch {
                src: mem_packing.len(),
                tgt: targets.len(),
            });
        }
        for t in targets {
            self.check_ids(t)?;
        }
        let inputs: Vec<Vec<u32>> = targets.iter().map(|t| shift_right(t)).collect();
        let refs: Vec<&[u32]> = inputs.iter().map(Vec::as_slice).collect();
        Ok(self.net().decode(tape, memory, mem_packing, &refs))
    }

    /// Summed token NLL of `targets` (PAD positions skipped) and the number
    /// of scored tokens.
    pub fn target_nll(
        &self,
        tape: &mut Tape<'_, F>,
        memory: Var,
        mem_packing: &Packing,
        targets: &[&[u32]],
    ) -> Result<(Var, usize), ModelError> {
        let (logits, _) = self.decode_logits(tape, memory, mem_packing, targets)?;
        let labels: Vec<Option<u32>> = targets
            .iter()
            .flat_map(|t| t.iter().map(|&id| (id != PAD).then_some(id)))
            .collect();
        let count = labels.iter().filter(|l| l.is_some()).count();
        Ok((tape.cross_entropy(logits, labels), count))
    }

    /// Mean token NLL of `tgt` given `src` and the logits, zero-padded to
    /// the longest target.
    pub fn forward_teacher_forced(
        &self,
        src: &[TokenSequence],
        tgt: &[TokenSequence],
    ) -> Result<(F, Array3<F>), ModelError> {
        if src.len() != tgt.len() {
            return Err(ModelError::BatchMismatch {
                src: src.len(),
                tgt: tgt.len(),
            });
        }
        let mut tape = self.tape();
        let srcs: Vec<&[u32]> = src.iter().map(|s| s.ids()).collect();
        let tgts: Vec<&[u32]> = tgt.iter().map(|s| s.ids()).collect();
        let (memory, mem_packing) = self.encode_ids(&mut tape, &srcs)?;
        let (logits, packing) = self.decode_logits(&mut tape, memory, &mem_packing, &tgts)?;
        let labels: Vec<Option<u32>> = tgts
            .iter()
            .flat_map(|t| t.iter().map(|&id| (id != PAD).then_some(id)))
            .collect();
        let count = labels.iter().filter(|l| l.is_some()).count().max(1);
        let nll = tape.cross_entropy(logits, labels);
        let loss = tape.scalar(nll) / F::from_usize(count).unwrap();

        let longest = packing.lens.iter().copied().max().unwrap_or(0);
        let flat = tape.value(logits);
        let mut out = Array3::zeros((tgt.len(), longest, self.vocab_size));
        for i in 0..packing.len() {
            out.slice_mut(s![i, ..packing.lens[i], ..])
                .assign(&flat.slice(s![packing.range(i), ..]));
        }
        Ok((loss, out))
    }

    /// Decodes one source with beam search (`beam == 1` is greedy).
    pub fn generate(
        &self,
        src: &TokenSequence,
        mask: &DecodeMask,
        beam: usize,
        max_len: usize,
    ) -> Result<TokenSequence, ModelError> {
        Ok(self.generate_batch(std::slice::from_ref(src), mask, beam, max_len)?.remove(0))
    }

    pub fn generate_batch(
        &self,
        srcs: &[TokenSequence],
        mask: &DecodeMask,
        beam: usize,
        max_len: usize,
    ) -> Result<Vec<TokenSequence>, ModelError> {
        if beam == 0 {
            return Err(ModelError::ZeroBeam);
        }
        if srcs.is_empty() {
            return Ok(Vec::new());
        }
        self.check_mask(mask)?;
        let mut tape = self.tape();
        let ids: Vec<&[u32]> = srcs.iter().map(|s| s.ids()).collect();
        let (memory, packing) = self.encode_ids(&mut tape, &ids)?;
        let memory = tape.value(memory).to_owned();
        let max_len = max_len.min(self.config.max_len);
        let out = if beam == 1 {
            self.greedy_from_memory(memory.view(), &packing, mask, max_len)
        } else {
            let cross = self.cross_memory(memory.view(), &packing);
            (0..srcs.len())
                .map(|i| self.beam_search(&cross, i, mask, beam, max_len))
                .collect()
        };
        Ok(out.into_iter().map(TokenSequence::from_ids_unchecked).collect())
    }

    fn check_mask(&self, mask: &DecodeMask) -> Result<(), ModelError> {
        if mask.vocab_size() != self.vocab_size {
            return Err(ModelError::InvalidMask(format!(
                "mask covers {} ids but the vocabulary has {}",
                mask.vocab_size(),
                self.vocab_size
            )));
        }
        Ok(())
    }

    /// Synthesis on the tape. Ids are decoded without gradient (greedy when
    /// `beam == 1`); a teacher-forced pass over them then yields the masked
    /// distributions, which are prefixed with a one-hot `prefix` row so the
    /// result can be fed straight back into [`Self::encode_soft`].
    pub fn synthesize(
        &self,
        tape: &mut Tape<'_, F>,
        memory: Var,
        mem_packing: &Packing,
        mask: &DecodeMask,
        max_len: usize,
        beam: usize,
        input: SynthesisInput,
        prefix: u32,
    ) -> Result<Synthesis, ModelError> {
        self.check_mask(mask)?;
        if beam == 0 {
            return Err(ModelError::ZeroBeam);
        }
        let max_len = max_len.min(self.config.max_len - 1);
        let tokens = {
            let value = tape.value(memory).to_owned();
            if beam == 1 {
                self.greedy_from_memory(value.view(), mem_packing, mask, max_len)
            } else {
                let cross = self.cross_memory(value.view(), mem_packing);
                (0..mem_packing.len())
                    .map(|i| self.beam_search(&cross, i, mask, beam, max_len))
                    .collect()
            }
        };
        let refs: Vec<&[u32]> = tokens.iter().map(Vec::as_slice).collect();
        let (logits, packing) = self.decode_logits(tape, memory, mem_packing, &refs)?;
        let probs = tape.masked_softmax(logits, mask.as_slice());
        let probs = match input {
            SynthesisInput::Soft => probs,
            SynthesisInput::Detached => tape.constant(tape.value(probs).to_owned()),
            SynthesisInput::StraightThrough => {
                let mut hard = Array2::zeros((packing.total(), self.vocab_size));
                let flat: Vec<u32> = tokens.iter().flatten().copied().collect();
                for (r, &id) in flat.iter().enumerate() {
                    hard[[r, id as usize]] = F::one();
                }
                let held = tape.constant(tape.value(probs).to_owned());
                let held = tape.scale(held, -F::one());
                let delta = tape.add(probs, held);
                let hard = tape.constant(hard);
                tape.add(hard, delta)
            }
        };

        let b = packing.len();
        let mut prefixes = Array2::zeros((b, self.vocab_size));
        prefixes.column_mut(prefix as usize).fill(F::one());
        let prefixes = tape.constant(prefixes);
        let stacked = tape.concat_rows(prefixes, probs);
        let mut idx = Vec::with_capacity(b + packing.total());
        for i in 0..b {
            idx.push(i);
            idx.extend(packing.range(i).map(|r| b + r));
        }
        let source = tape.gather_rows(stacked, idx);
        let packing = Packing::from_lens(packing.lens.iter().map(|l| l + 1).collect());
        Ok(Synthesis {
            source,
            packing,
            tokens,
        })
    }

    /// Per-position output distributions of greedy decoding, with forbidden
    /// ids at exactly zero probability.
    pub fn soft_forward(
        &self,
        src: Source<'_, F>,
        mask: &DecodeMask,
        max_len: usize,
    ) -> Result<SoftSequence<F>, ModelError> {
        self.check_mask(mask)?;
        let mut tape = self.tape();
        let (memory, packing) = self.encode_source(&mut tape, src)?;
        let value = tape.value(memory).to_owned();
        let max_len = max_len.min(self.config.max_len);
        let tokens = self.greedy_from_memory(value.view(), &packing, mask, max_len);
        let (logits, _) = self.decode_logits(&mut tape, memory, &packing, &[&tokens[0]])?;
        let probs = tape.masked_softmax(logits, mask.as_slice());
        SoftSequence::new(tape.value(probs).to_owned())
    }
}
