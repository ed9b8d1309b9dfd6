//! Exponentiated Hamming payoff: distance distributions, exact sampling
//! of perturbed targets and closed-form hypothesis probabilities.
//!
//! A hypothesis at Hamming distance `d` from the source has probability
//! `exp(-d/τ) / Z`, where `Z = Σ_d C(L,d) (v-1)^d exp(-d/τ)` over the
//! allowed distances, `L` is the number of editable positions and `v` the
//! substitution alphabet size.

use std::collections::HashMap;
use std::ops::Range;

use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::vocab::{TokenSequence, NUM_RESERVED};

#[derive(Debug, Error, PartialEq)]
pub enum RmlError {
    #[error("temperature must be positive, got {0}")]
    Temperature(f64),
    #[error("substitution alphabet needs at least 2 ids, got {0}")]
    AlphabetTooSmall(usize),
    #[error("editable length must be at least 1")]
    EmptyLength,
    #[error("sequence has no editable positions")]
    NoEditable,
    #[error("source has {source_len} ids but hypothesis has {hypothesis_len}")]
    LengthMismatch { source_len: usize, hypothesis_len: usize },
    #[error("hypothesis changes non-editable position {0}")]
    Protected(usize),
    #[error("hypothesis id {id} at position {position} is outside the substitution alphabet")]
    OutsideAlphabet { id: u32, position: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PayoffConfig {
    pub temperature: f64,
    /// Largest Hamming distance sampled; `None` means `min(5, ⌈L/4⌉)`.
    /// Always capped at the editable length.
    pub max_distance: Option<usize>,
    /// Ids that may replace one another. Positions holding ids outside this
    /// range are never edited.
    pub alphabet: Range<u32>,
    /// Positions that are never edited.
    pub protected: Vec<usize>,
}

impl Default for PayoffConfig {
    fn default() -> Self {
        Self {
            temperature: 0.9,
            max_distance: None,
            alphabet: NUM_RESERVED..NUM_RESERVED,
            protected: Vec::new(),
        }
    }
}

impl PayoffConfig {
    /// Defaults with the given substitution alphabet, usually
    /// [`crate::vocab::Vocabulary::word_ids`].
    pub fn with_alphabet(alphabet: Range<u32>) -> Self {
        Self {
            alphabet,
            ..Self::default()
        }
    }

    pub fn alphabet_size(&self) -> usize {
        self.alphabet.len()
    }

    pub fn validate(&self) -> Result<(), RmlError> {
        if !(self.temperature > 0.0) || !self.temperature.is_finite() {
            return Err(RmlError::Temperature(self.temperature));
        }
        if self.alphabet_size() < 2 {
            return Err(RmlError::AlphabetTooSmall(self.alphabet_size()));
        }
        Ok(())
    }

    /// Distance cap used for an editable length `len`.
    pub fn cap(&self, len: usize) -> usize {
        self.max_distance.unwrap_or_else(|| 5.min(len.div_ceil(4))).min(len)
    }

    /// Positions of `ids` that may be perturbed.
    pub fn editable_positions(&self, ids: &[u32]) -> Vec<usize> {
        ids.iter()
            .enumerate()
            .filter(|(i, id)| self.alphabet.contains(id) && !self.protected.contains(i))
            .map(|(i, _)| i)
            .collect()
    }
}

/// `ln C(n, k)` for every `k` in `0..=kmax`.
fn log_binomials(n: usize, kmax: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(kmax + 1);
    let mut acc = 0.0;
    out.push(acc);
    for k in 1..=kmax {
        acc += ((n - k + 1) as f64).ln() - (k as f64).ln();
        out.push(acc);
    }
    out
}

fn log_sum_exp(xs: &[f64]) -> f64 {
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    max + xs.iter().map(|x| (x - max).exp()).sum::<f64>().ln()
}

/// Unnormalized log weights `ln C(L,d) + d ln(v-1) - d/τ` for `d = 0..=cap`.
fn log_weights(len: usize, v: usize, tau: f64, cap: usize) -> Vec<f64> {
    let lv = ((v - 1) as f64).ln();
    log_binomials(len, cap)
        .into_iter()
        .enumerate()
        .map(|(d, lc)| lc + d as f64 * lv - d as f64 / tau)
        .collect()
}

/// Probability of each Hamming distance `0..=D` for an editable length.
pub fn distance_distribution(len: usize, config: &PayoffConfig) -> Result<Vec<f64>, RmlError> {
    config.validate()?;
    if len == 0 {
        return Err(RmlError::EmptyLength);
    }
    let w = log_weights(len, config.alphabet_size(), config.temperature, config.cap(len));
    let z = log_sum_exp(&w);
    Ok(w.into_iter().map(|x| (x - z).exp()).collect())
}

/// Mean of a distribution over `0..n`.
pub fn expected_distance(dist: &[f64]) -> f64 {
    dist.iter().enumerate().map(|(d, p)| d as f64 * p).sum()
}

/// A perturbed copy of a target sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct PayoffSample {
    pub hypothesis: TokenSequence,
    pub distance: usize,
    /// Log probability of this exact hypothesis.
    pub log_q: f64,
    /// Log probability of drawing its distance.
    pub log_p_distance: f64,
    /// Importance weight; sampling is exact so this is 1.
    pub weight: f64,
}

/// Distance distributions cached per editable length.
#[derive(Debug, Clone)]
pub struct PayoffSampler {
    config: PayoffConfig,
    tables: HashMap<usize, Vec<f64>>,
}

impl PayoffSampler {
    pub fn new(config: PayoffConfig) -> Result<Self, RmlError> {
        config.validate()?;
        Ok(Self {
            config,
            tables: HashMap::new(),
        })
    }

    pub fn config(&self) -> &PayoffConfig {
        &self.config
    }

    /// Fills the cache for every given editable length.
    pub fn precompute(&mut self, lengths: impl IntoIterator<Item = usize>) -> Result<(), RmlError> {
        for len in lengths {
            self.table(len)?;
        }
        Ok(())
    }

    pub fn cached_lengths(&self) -> usize {
        self.tables.len()
    }

    fn table(&mut self, len: usize) -> Result<&[f64], RmlError> {
        if !self.tables.contains_key(&len) {
            let dist = distance_distribution(len, &self.config)?;
            self.tables.insert(len, dist);
        }
        Ok(&self.tables[&len])
    }

    pub fn sample<R: Rng + ?Sized>(&mut self, seq: &TokenSequence, rng: &mut R) -> Result<PayoffSample, RmlError> {
        let editable = self.config.editable_positions(seq.ids());
        if editable.is_empty() {
            return Err(RmlError::NoEditable);
        }
        let len = editable.len();
        let v = self.config.alphabet_size();
        let start = self.config.alphabet.start;
        let dist = self.table(len)?;

        let u: f64 = rng.gen();
        let mut distance = dist.len() - 1;
        let mut acc = 0.0;
        for (d, p) in dist.iter().enumerate() {
            acc += p;
            if u < acc {
                distance = d;
                break;
            }
        }
        let log_p_distance = dist[distance].ln();

        let mut ids = seq.ids().to_vec();
        for k in index::sample(rng, len, distance) {
            let pos = editable[k];
            let original = (ids[pos] - start) as usize;
            let mut r = rng.gen_range(0..v - 1);
            if r >= original {
                r += 1;
            }
            ids[pos] = start + r as u32;
        }
        let log_count = log_binomials(len, distance)[distance] + distance as f64 * ((v - 1) as f64).ln();
        Ok(PayoffSample {
            hypothesis: TokenSequence::from_ids_unchecked(ids),
            distance,
            log_q: log_p_distance - log_count,
            log_p_distance,
            weight: 1.0,
        })
    }
}

/// Draws one hypothesis without caching.
pub fn sample_hypothesis<R: Rng + ?Sized>(
    seq: &TokenSequence,
    config: &PayoffConfig,
    rng: &mut R,
) -> Result<PayoffSample, RmlError> {
    PayoffSampler::new(config.clone())?.sample(seq, rng)
}

/// Hamming distance over editable positions, after checking that the
/// hypothesis leaves every other position untouched.
pub fn hamming(source: &[u32], hypothesis: &[u32], config: &PayoffConfig) -> Result<usize, RmlError> {
    if source.len() != hypothesis.len() {
        return Err(RmlError::LengthMismatch {
            source_len: source.len(),
            hypothesis_len: hypothesis.len(),
        });
    }
    let editable = config.editable_positions(source);
    let mut d = 0;
    for (i, (&a, &b)) in source.iter().zip(hypothesis).enumerate() {
        if a == b {
            continue;
        }
        if editable.binary_search(&i).is_err() {
            return Err(RmlError::Protected(i));
        }
        if !config.alphabet.contains(&b) {
            return Err(RmlError::OutsideAlphabet { id: b, position: i });
        }
        d += 1;
    }
    Ok(d)
}

/// Probability of `hypothesis` under the payoff distribution around
/// `source`; zero beyond the distance cap.
pub fn exact_q(source: &[u32], hypothesis: &[u32], config: &PayoffConfig) -> Result<f64, RmlError> {
    config.validate()?;
    let d = hamming(source, hypothesis, config)?;
    let len = config.editable_positions(source).len();
    if len == 0 {
        return Err(RmlError::NoEditable);
    }
    let cap = config.cap(len);
    if d > cap {
        return Ok(0.0);
    }
    let z = log_sum_exp(&log_weights(len, config.alphabet_size(), config.temperature, cap));
    Ok((-(d as f64) / config.temperature - z).exp())
}
