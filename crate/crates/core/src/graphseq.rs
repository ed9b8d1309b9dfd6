//! Linearization of graphs into the `[H] e+ [R] r+ [T] e+ ... [E]` grammar
//! and the parser that reads generated sequences back into triples.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{Graph, Triple};

pub const H: &str = "[H]";
pub const R: &str = "[R]";
pub const T: &str = "[T]";
pub const E: &str = "[E]";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ViolationKind {
    MissingHead,
    MissingRelation,
    MissingTail,
    EmptySpan,
    MissingEnd,
    StrayToken,
}

/// A grammar defect found at `position`. For `MissingEnd` the position is
/// the sequence length, i.e. where `[E]` was expected.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Violation {
    pub kind: ViolationKind,
    pub position: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParseMode {
    Strict,
    Repair,
}

#[derive(Debug, Error, PartialEq, Eq)]
#[error("graph sequence violates the grammar: {violations:?}")]
pub struct GrammarError {
    pub violations: Vec<Violation>,
}

/// A token list known to satisfy the grammar.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GraphSequence {
    tokens: Vec<String>,
}

impl GraphSequence {
    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn into_tokens(self) -> Vec<String> {
        self.tokens
    }
}

/// Emits triples in stored order as `[H] head [R] relation [T] tail`, then a
/// single `[E]`. Duplicates are kept.
pub fn linearize(g: &Graph) -> GraphSequence {
    let mut tokens = Vec::with_capacity(g.triples.len() * 9 + 1);
    for t in &g.triples {
        tokens.push(H.to_string());
        tokens.extend(t.head.iter().cloned());
        tokens.push(R.to_string());
        tokens.extend(t.relation.iter().cloned());
        tokens.push(T.to_string());
        tokens.extend(t.tail.iter().cloned());
    }
    tokens.push(E.to_string());
    GraphSequence { tokens }
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum Sym {
    H,
    R,
    T,
    E,
    Word,
}

fn classify(tok: &str) -> Sym {
    match tok {
        H => Sym::H,
        R => Sym::R,
        T => Sym::T,
        E => Sym::E,
        _ => Sym::Word,
    }
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum State {
    /// Expecting `[H]`.
    Start,
    Head,
    Rel,
    Tail,
    /// Discarding a headless fragment until the next `[H]` or `[E]`.
    Skip,
    Done,
}

struct Fragment<'a> {
    head: Vec<&'a str>,
    rel: Vec<&'a str>,
    tail: Vec<&'a str>,
    /// Set once a defect condemns the fragment.
    doomed: bool,
}

impl<'a> Fragment<'a> {
    fn new() -> Self {
        Self {
            head: Vec::new(),
            rel: Vec::new(),
            tail: Vec::new(),
            doomed: false,
        }
    }

    fn into_triple(self) -> Option<Triple> {
        if self.doomed || self.head.is_empty() || self.rel.is_empty() || self.tail.is_empty() {
            return None;
        }
        let own = |v: Vec<&str>| v.into_iter().map(String::from).collect();
        Some(Triple {
            head: own(self.head),
            relation: own(self.rel),
            tail: own(self.tail),
        })
    }
}

struct Parser<'a> {
    state: State,
    frag: Fragment<'a>,
    triples: Vec<Triple>,
    violations: Vec<Violation>,
}

impl<'a> Parser<'a> {
    fn log(&mut self, kind: ViolationKind, position: usize) {
        self.violations.push(Violation { kind, position });
    }

    /// Closes the fragment in the tail state. An empty tail drops it (R3).
    fn close_tail(&mut self, pos: usize) {
        let frag = std::mem::replace(&mut self.frag, Fragment::new());
        if frag.tail.is_empty() && !frag.doomed {
            self.log(ViolationKind::EmptySpan, pos);
        }
        if let Some(t) = frag.into_triple() {
            self.triples.push(t);
        }
    }

    fn open(&mut self) {
        self.frag = Fragment::new();
        self.state = State::Head;
    }

    fn step(&mut self, pos: usize, tok: &'a str) {
        use State::*;
        use ViolationKind::*;
        let sym = classify(tok);
        match (self.state, sym) {
            (Done, _) => self.log(StrayToken, pos),

            (Start, Sym::H) => self.open(),
            (Start, Sym::Word) => self.log(StrayToken, pos),
            (Start, Sym::R | Sym::T) => {
                self.log(MissingHead, pos);
                self.state = Skip;
            }
            (Start, Sym::E) => {
                if self.triples.is_empty() {
                    self.log(MissingHead, pos);
                }
                self.state = Done;
            }

            (Head, Sym::Word) => self.frag.head.push(tok),
            (Head, Sym::H) => {
                // R1: a second [H] restarts the triple.
                self.log(MissingRelation, pos);
                self.open();
            }
            (Head, Sym::R) => {
                if self.frag.head.is_empty() {
                    self.log(EmptySpan, pos);
                    self.frag.doomed = true;
                }
                self.state = Rel;
            }
            (Head, Sym::T) => {
                self.log(MissingRelation, pos);
                self.frag = Fragment::new();
                self.state = Skip;
            }
            (Head, Sym::E) => {
                self.log(MissingRelation, pos);
                self.state = Done;
            }

            (Rel, Sym::Word) => self.frag.rel.push(tok),
            (Rel, Sym::T) => {
                if self.frag.rel.is_empty() && !self.frag.doomed {
                    self.log(EmptySpan, pos);
                    self.frag.doomed = true;
                }
                self.state = Tail;
            }
            (Rel, Sym::H) => {
                // R2: no [T] before the next triple.
                self.log(MissingTail, pos);
                self.open();
            }
            (Rel, Sym::E) => {
                self.log(MissingTail, pos);
                self.state = Done;
            }
            (Rel, Sym::R) => {
                self.log(StrayToken, pos);
                self.frag = Fragment::new();
                self.state = Skip;
            }

            (Tail, Sym::Word) => self.frag.tail.push(tok),
            (Tail, Sym::H) => {
                self.close_tail(pos);
                self.open();
            }
            (Tail, Sym::E) => {
                self.close_tail(pos);
                self.state = Done;
            }
            (Tail, Sym::R | Sym::T) => {
                self.close_tail(pos);
                self.log(MissingHead, pos);
                self.state = Skip;
            }

            (Skip, Sym::H) => self.open(),
            (Skip, Sym::E) => self.state = Done,
            (Skip, _) => {}
        }
    }

    fn finish(&mut self, len: usize) {
        use ViolationKind::*;
        match self.state {
            State::Done => return,
            State::Tail => {
                // R4: a complete trailing triple survives a missing [E].
                let pos = len.saturating_sub(1);
                self.close_tail(pos);
            }
            State::Head => self.log(MissingRelation, len.saturating_sub(1)),
            State::Rel => self.log(MissingTail, len.saturating_sub(1)),
            State::Start if len == 0 => self.log(MissingHead, 0),
            State::Start | State::Skip => {}
        }
        self.log(MissingEnd, len);
    }
}

fn run(tokens: &[String]) -> (Vec<Triple>, Vec<Violation>) {
    let mut p = Parser {
        state: State::Start,
        frag: Fragment::new(),
        triples: Vec::new(),
        violations: Vec::new(),
    };
    for (pos, tok) in tokens.iter().enumerate() {
        p.step(pos, tok);
    }
    p.finish(tokens.len());
    (p.triples, p.violations)
}

/// Reads a token list back into a graph. Strict mode fails on any violation;
/// repair mode salvages every complete, well-delimited triple and logs the
/// rest.
pub fn parse(tokens: &[String], mode: ParseMode) -> Result<(Graph, Vec<Violation>), GrammarError> {
    let (triples, violations) = run(tokens);
    if mode == ParseMode::Strict && !violations.is_empty() {
        return Err(GrammarError { violations });
    }
    Ok((Graph { triples }, violations))
}

/// The violations `parse` would log, without building triples.
pub fn validate(tokens: &[String]) -> Vec<Violation> {
    run(tokens).1
}

impl TryFrom<Vec<String>> for GraphSequence {
    type Error = GrammarError;

    fn try_from(tokens: Vec<String>) -> Result<Self, Self::Error> {
        let violations = validate(&tokens);
        if violations.is_empty() {
            Ok(Self { tokens })
        } else {
            Err(GrammarError { violations })
        }
    }
}
