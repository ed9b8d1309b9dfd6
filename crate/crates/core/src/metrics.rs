//! Corpus BLEU-4, CIDEr-D and micro-averaged entity/triple F1.

use std::collections::{HashMap, HashSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{split_camel_case, Graph};

#[derive(Debug, Error, PartialEq, Eq)]
pub enum MetricError {
    #[error("{hyps} hypotheses but {refs} references")]
    LengthMismatch { hyps: usize, refs: usize },
    #[error("no hypotheses to score")]
    Empty,
}

fn check_lengths(hyps: usize, refs: usize) -> Result<(), MetricError> {
    if hyps != refs {
        return Err(MetricError::LengthMismatch { hyps, refs });
    }
    if hyps == 0 {
        return Err(MetricError::Empty);
    }
    Ok(())
}

type Ngram<'a> = &'a [String];

fn ngram_counts(tokens: &[String], n: usize) -> HashMap<Ngram<'_>, usize> {
    let mut counts = HashMap::new();
    for g in tokens.windows(n) {
        *counts.entry(g).or_default() += 1;
    }
    counts
}

pub const MAX_ORDER: usize = 4;

/// Pooled n-gram statistics behind corpus BLEU.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct BleuStats {
    /// Clipped matches for orders 1..=4.
    pub matches: [usize; MAX_ORDER],
    /// Hypothesis n-gram totals for orders 1..=4.
    pub totals: [usize; MAX_ORDER],
    pub hyp_len: usize,
    pub ref_len: usize,
}

impl BleuStats {
    /// Clipped precision of order `n` (1-based), unsmoothed.
    pub fn precision(&self, n: usize) -> f64 {
        let t = self.totals[n - 1];
        if t == 0 {
            0.0
        } else {
            self.matches[n - 1] as f64 / t as f64
        }
    }

    pub fn brevity_penalty(&self) -> f64 {
        if self.hyp_len == 0 {
            0.0
        } else if self.hyp_len >= self.ref_len {
            1.0
        } else {
            (1.0 - self.ref_len as f64 / self.hyp_len as f64).exp()
        }
    }

    /// BLEU-4; orders above one with no matches use `1 / (total + 1)`.
    pub fn score(&self) -> f64 {
        if self.hyp_len == 0 || self.matches[0] == 0 {
            return 0.0;
        }
        let mut log_sum = 0.0;
        for n in 0..MAX_ORDER {
            let p = if n > 0 && self.matches[n] == 0 {
                1.0 / (self.totals[n] + 1) as f64
            } else {
                self.matches[n] as f64 / self.totals[n] as f64
            };
            log_sum += p.ln();
        }
        self.brevity_penalty() * (log_sum / MAX_ORDER as f64).exp()
    }
}

pub fn bleu_stats(hyps: &[Vec<String>], refs: &[Vec<String>]) -> Result<BleuStats, MetricError> {
    check_lengths(hyps.len(), refs.len())?;
    let mut s = BleuStats::default();
    for (h, r) in hyps.iter().zip(refs) {
        s.hyp_len += h.len();
        s.ref_len += r.len();
        for n in 1..=MAX_ORDER {
            let rc = ngram_counts(r, n);
            for (g, c) in ngram_counts(h, n) {
                s.matches[n - 1] += c.min(rc.get(g).copied().unwrap_or(0));
                s.totals[n - 1] += c;
            }
        }
    }
    Ok(s)
}

/// Corpus-level BLEU-4 against one reference per hypothesis.
pub fn bleu(hyps: &[Vec<String>], refs: &[Vec<String>]) -> Result<f64, MetricError> {
    Ok(bleu_stats(hyps, refs)?.score())
}

const CIDER_SIGMA: f64 = 6.0;

struct TfIdf {
    vecs: Vec<HashMap<Vec<String>, f64>>,
    norms: Vec<f64>,
    length: usize,
}

fn tf_idf(tokens: &[String], df: &HashMap<Vec<String>, usize>, log_n: f64) -> TfIdf {
    let mut vecs = Vec::with_capacity(MAX_ORDER);
    let mut norms = Vec::with_capacity(MAX_ORDER);
    for n in 1..=MAX_ORDER {
        let v: HashMap<Vec<String>, f64> = ngram_counts(tokens, n)
            .into_iter()
            .map(|(g, tf)| {
                let d = df.get(g).copied().unwrap_or(0).max(1) as f64;
                (g.to_vec(), tf as f64 * (log_n - d.ln()))
            })
            .collect();
        norms.push(v.values().map(|x| x * x).sum::<f64>().sqrt());
        vecs.push(v);
    }
    TfIdf {
        vecs,
        norms,
        length: tokens.len().saturating_sub(1),
    }
}

/// CIDEr-D with document frequencies taken over the references.
///
/// Sentence length is measured in bigrams, hypothesis weights are clipped
/// at the reference weight, and a Gaussian penalty on the length gap is
/// applied per order. Scores are averaged over orders and records and
/// scaled by 10.
pub fn cider(hyps: &[Vec<String>], refs: &[Vec<String>]) -> Result<f64, MetricError> {
    check_lengths(hyps.len(), refs.len())?;
    let mut df: HashMap<Vec<String>, usize> = HashMap::new();
    for r in refs {
        let mut seen = HashSet::new();
        for n in 1..=MAX_ORDER {
            for g in r.windows(n) {
                if seen.insert(g) {
                    *df.entry(g.to_vec()).or_default() += 1;
                }
            }
        }
    }
    let log_n = (refs.len() as f64).ln();
    let mut total = 0.0;
    for (h, r) in hyps.iter().zip(refs) {
        let vh = tf_idf(h, &df, log_n);
        let vr = tf_idf(r, &df, log_n);
        let delta = vh.length as f64 - vr.length as f64;
        let penalty = (-(delta * delta) / (2.0 * CIDER_SIGMA * CIDER_SIGMA)).exp();
        let mut sum = 0.0;
        for n in 0..MAX_ORDER {
            let mut val: f64 = vh.vecs[n]
                .iter()
                .map(|(g, &x)| {
                    let y = vr.vecs[n].get(g).copied().unwrap_or(0.0);
                    x.min(y) * y
                })
                .sum();
            if vh.norms[n] != 0.0 && vr.norms[n] != 0.0 {
                val /= vh.norms[n] * vr.norms[n];
            }
            sum += val * penalty;
        }
        total += sum / MAX_ORDER as f64 * 10.0;
    }
    Ok(total / hyps.len() as f64)
}

/// Pooled counts for micro precision, recall and F1.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Counts {
    pub true_positives: usize,
    pub predicted: usize,
    pub gold: usize,
}

impl Counts {
    pub fn precision(&self) -> f64 {
        ratio(self.true_positives, self.predicted)
    }

    pub fn recall(&self) -> f64 {
        ratio(self.true_positives, self.gold)
    }

    /// Harmonic mean of precision and recall, computed from the counts as
    /// `2tp / (predicted + gold)` to avoid compounding rounding.
    pub fn f1(&self) -> f64 {
        ratio(2 * self.true_positives, self.predicted + self.gold)
    }

    fn add<T: Eq + std::hash::Hash>(&mut self, predicted: &HashSet<T>, gold: &HashSet<T>) {
        self.true_positives += predicted.intersection(gold).count();
        self.predicted += predicted.len();
        self.gold += gold.len();
    }
}

fn ratio(a: usize, b: usize) -> f64 {
    if b == 0 {
        0.0
    } else {
        a as f64 / b as f64
    }
}

/// Canonical form used for exact matching: camelCase split, lowercase,
/// single spaces.
pub fn normalize_element(tokens: &[String]) -> String {
    split_camel_case(&tokens.join(" "))
        .to_lowercase()
        .split_whitespace()
        .collect::<Vec<_>>()
        .join(" ")
}

type NormTriple = (String, String, String);

fn triple_set(g: &Graph) -> HashSet<NormTriple> {
    g.triples
        .iter()
        .map(|t| {
            (
                normalize_element(&t.head),
                normalize_element(&t.relation),
                normalize_element(&t.tail),
            )
        })
        .collect()
}

fn entity_set(g: &Graph) -> HashSet<String> {
    g.triples
        .iter()
        .flat_map(|t| [normalize_element(&t.head), normalize_element(&t.tail)])
        .collect()
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct GraphCounts {
    pub entity: Counts,
    pub triple: Counts,
}

pub fn graph_counts(predicted: &[Graph], gold: &[Graph]) -> Result<GraphCounts, MetricError> {
    if predicted.len() != gold.len() {
        return Err(MetricError::LengthMismatch {
            hyps: predicted.len(),
            refs: gold.len(),
        });
    }
    let mut c = GraphCounts::default();
    for (p, g) in predicted.iter().zip(gold) {
        c.entity.add(&entity_set(p), &entity_set(g));
        c.triple.add(&triple_set(p), &triple_set(g));
    }
    Ok(c)
}

/// Micro-averaged `(entity F1, triple F1)`.
pub fn f1_graphs(predicted: &[Graph], gold: &[Graph]) -> Result<(f64, f64), MetricError> {
    let c = graph_counts(predicted, gold)?;
    Ok((c.entity.f1(), c.triple.f1()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub bleu: f64,
    pub cider: f64,
    pub f1_entity: f64,
    pub f1_triple: f64,
    pub entity_counts: Counts,
    pub triple_counts: Counts,
    pub records: usize,
}

impl EvalReport {
    pub fn compute(
        hyp_texts: &[Vec<String>],
        ref_texts: &[Vec<String>],
        predicted: &[Graph],
        gold: &[Graph],
    ) -> Result<Self, MetricError> {
        let counts = graph_counts(predicted, gold)?;
        Ok(Self {
            bleu: bleu(hyp_texts, ref_texts)?,
            cider: cider(hyp_texts, ref_texts)?,
            f1_entity: counts.entity.f1(),
            f1_triple: counts.triple.f1(),
            entity_counts: counts.entity,
            triple_counts: counts.triple,
            records: hyp_texts.len(),
        })
    }

    pub fn summary(&self) -> String {
        format!(
            "records={} bleu={:.4} cider={:.4} f1_entity={:.4} f1_triple={:.4}",
            self.records, self.bleu, self.cider, self.f1_entity, self.f1_triple
        )
    }
}
