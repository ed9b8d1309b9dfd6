//! Batch conversion in both directions with a trained model.

use crate::corpus::Graph;
use crate::graphseq::{parse, ParseMode, Violation};
use crate::metrics::{EvalReport, MetricError};
use crate::seqmodel::{DecodeMask, Float, ModelError, Seq2SeqModel};
use crate::trainer::{graph_target, text_target, with_prefix};
use crate::vocab::{decode, Prefix, Vocabulary};

/// Beam width used for inference.
pub const DEFAULT_BEAM: usize = 4;

#[derive(Debug, Clone, PartialEq)]
pub struct Extraction {
    pub graph: Graph,
    pub violations: Vec<Violation>,
    /// False when strict parsing rejected the output.
    pub parsed: bool,
}

pub fn graphs_to_texts<F: Float>(
    model: &Seq2SeqModel<F>,
    vocab: &Vocabulary,
    graphs: &[Graph],
    beam: usize,
) -> Result<Vec<Vec<String>>, ModelError> {
    let srcs: Vec<_> = graphs
        .iter()
        .map(|g| with_prefix(&graph_target(g, vocab), Prefix::Graph))
        .collect();
    let mask = DecodeMask::for_text(model.vocab_size());
    let max_len = model.config().max_len;
    model
        .generate_batch(&srcs, &mask, beam, max_len)?
        .iter()
        .map(|s| Ok(decode(s, vocab).expect("generated ids are in range")))
        .collect()
}

pub fn texts_to_graphs<F: Float>(
    model: &Seq2SeqModel<F>,
    vocab: &Vocabulary,
    texts: &[Vec<String>],
    beam: usize,
    mode: ParseMode,
) -> Result<Vec<Extraction>, ModelError> {
    let srcs: Vec<_> = texts
        .iter()
        .map(|t| with_prefix(&text_target(t, vocab), Prefix::Text))
        .collect();
    let mask = DecodeMask::for_graph(model.vocab_size());
    let max_len = model.config().max_len;
    Ok(model
        .generate_batch(&srcs, &mask, beam, max_len)?
        .iter()
        .map(|s| {
            let tokens = decode(s, vocab).expect("generated ids are in range");
            match parse(&tokens, mode) {
                Ok((graph, violations)) => Extraction {
                    graph,
                    violations,
                    parsed: true,
                },
                Err(e) => Extraction {
                    graph: Graph::empty(),
                    violations: e.violations,
                    parsed: false,
                },
            }
        })
        .collect())
}

#[derive(Debug, thiserror::Error)]
pub enum EvalError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Metric(#[from] MetricError),
}

/// Converts held-out pairs both ways and scores them: text metrics for
/// graph-to-text, F1 for text-to-graph (repair-mode parsing).
pub fn evaluate_pairs<F: Float>(
    model: &Seq2SeqModel<F>,
    vocab: &Vocabulary,
    graphs: &[Graph],
    texts: &[Vec<String>],
    beam: usize,
) -> Result<EvalReport, EvalError> {
    let hyps = graphs_to_texts(model, vocab, graphs, beam)?;
    let predicted: Vec<Graph> = texts_to_graphs(model, vocab, texts, beam, ParseMode::Repair)?
        .into_iter()
        .map(|e| e.graph)
        .collect();
    Ok(EvalReport::compute(&hyps, texts, &predicted, graphs)?)
}
