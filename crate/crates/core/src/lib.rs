//! Unsupervised conversion between knowledge graphs and text with one
//! shared sequence-to-sequence model trained by back-translation.

pub mod corpus;
pub mod graphseq;
pub mod seqmodel;
pub mod vocab;
pub mod metrics;
pub mod rml;
pub mod trainer;
pub mod convert;
pub mod cli;
