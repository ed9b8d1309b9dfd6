//! Incremental decoding with cached keys and values.

use std::cmp::Ordering;

use ndarray::{s, Array1, Array2, ArrayView1, ArrayView2};

use super::model::{AttnParams, NormParams, Packing};
use super::tape::{gelu, layer_norm_rows};
use super::{DecodeMask, Float, Seq2SeqModel};
use crate::vocab::{BOS, EOS};

/// Cross-attention keys and values per decoder layer, packed like the
/// encoder memory.
pub(crate) struct CrossMemory<F> {
    k: Vec<Array2<F>>,
    v: Vec<Array2<F>>,
    packing: Packing,
}

/// Self-attention keys and values of one hypothesis.
#[derive(Clone)]
pub(crate) struct SelfCache<F> {
    k: Vec<Array2<F>>,
    v: Vec<Array2<F>>,
    len: usize,
}

struct Hypothesis<F> {
    tokens: Vec<u32>,
    score: f64,
    cache: SelfCache<F>,
}

impl<F: Float> Seq2SeqModel<F> {
    fn project(&self, x: ArrayView2<F>, w: usize, b: usize) -> Array2<F> {
        let mut y = x.dot(self.params.get(w));
        y += &self.params.get(b).row(0);
        y
    }

    fn normalize(&self, x: ArrayView2<F>, p: &NormParams) -> Array2<F> {
        let (mut y, _) = layer_norm_rows(x);
        y *= &self.params.get(p.gain).row(0);
        y += &self.params.get(p.bias).row(0);
        y
    }

    pub(crate) fn cross_memory(&self, memory: ArrayView2<F>, packing: &Packing) -> CrossMemory<F> {
        let (k, v) = self
            .layout
            .decoder
            .iter()
            .map(|l| {
                let a = &l.cross_attn;
                (self.project(memory, a.wk, a.bk), self.project(memory, a.wv, a.bv))
            })
            .unzip();
        CrossMemory {
            k,
            v,
            packing: packing.clone(),
        }
    }

    fn empty_cache(&self, capacity: usize) -> SelfCache<F> {
        let d = self.config.d_model;
        let layers = self.layout.decoder.len();
        SelfCache {
            k: vec![Array2::zeros((capacity, d)); layers],
            v: vec![Array2::zeros((capacity, d)); layers],
            len: 0,
        }
    }

    fn attend(&self, q: ArrayView1<F>, k: ArrayView2<F>, v: ArrayView2<F>, out: &mut [F]) {
        let heads = self.config.heads;
        let dh = self.config.d_model / heads;
        let scale = F::one() / F::from_usize(dh).unwrap().sqrt();
        for h in 0..heads {
            let cols = h * dh..(h + 1) * dh;
            let qh = q.slice(s![cols.clone()]);
            let mut scores: Array1<F> = k.slice(s![.., cols.clone()]).dot(&qh);
            let max = scores.fold(F::neg_infinity(), |m, &x| m.max(x * scale));
            scores.mapv_inplace(|x| (x * scale - max).exp());
            let sum = scores.sum();
            scores.mapv_inplace(|x| x / sum);
            let o = v.slice(s![.., cols.clone()]).t().dot(&scores);
            out[cols].iter_mut().zip(o.iter()).for_each(|(a, &b)| *a = b);
        }
    }

    fn output(&self, x: Array2<F>, p: &AttnParams) -> Array2<F> {
        self.project(x.view(), p.wo, p.bo)
    }

    /// Advances each row by one token. `sources[r]` names the memory
    /// segment row `r` attends to. Returns next-token logits.
    fn step(
        &self,
        tokens: &[u32],
        sources: &[usize],
        caches: &mut [&mut SelfCache<F>],
        cross: &CrossMemory<F>,
    ) -> Array2<F> {
        let d = self.config.d_model;
        let rows = tokens.len();
        let sqrt_d = F::from_f64((d as f64).sqrt()).unwrap();
        let table = self.params.get(self.layout.embed);
        let mut x = Array2::zeros((rows, d));
        for (r, (&t, cache)) in tokens.iter().zip(caches.iter()).enumerate() {
            let mut row = x.row_mut(r);
            row.assign(&table.row(t as usize));
            row *= sqrt_d;
            row += &self.pe.row(cache.len);
        }
        for (l, layer) in self.layout.decoder.iter().enumerate() {
            let h = self.normalize(x.view(), &layer.norm1);
            let a = &layer.self_attn;
            let q = self.project(h.view(), a.wq, a.bq);
            let k = self.project(h.view(), a.wk, a.bk);
            let v = self.project(h.view(), a.wv, a.bv);
            let mut o = Array2::zeros((rows, d));
            for r in 0..rows {
                let c = &mut *caches[r];
                c.k[l].row_mut(c.len).assign(&k.row(r));
                c.v[l].row_mut(c.len).assign(&v.row(r));
                let n = c.len + 1;
                self.attend(
                    q.row(r),
                    c.k[l].slice(s![..n, ..]),
                    c.v[l].slice(s![..n, ..]),
                    o.row_mut(r).as_slice_mut().unwrap(),
                );
            }
            x += &self.output(o, a);

            let h = self.normalize(x.view(), &layer.norm2);
            let a = &layer.cross_attn;
            let q = self.project(h.view(), a.wq, a.bq);
            let mut o = Array2::zeros((rows, d));
            for r in 0..rows {
                let range = cross.packing.range(sources[r]);
                self.attend(
                    q.row(r),
                    cross.k[l].slice(s![range.clone(), ..]),
                    cross.v[l].slice(s![range, ..]),
                    o.row_mut(r).as_slice_mut().unwrap(),
                );
            }
            x += &self.output(o, a);

            let h = self.normalize(x.view(), &layer.norm3);
            let f = &layer.ffn;
            let mut hidden = self.project(h.view(), f.w1, f.b1);
            hidden.mapv_inplace(gelu);
            x += &self.project(hidden.view(), f.w2, f.b2);
        }
        for c in caches.iter_mut() {
            c.len += 1;
        }
        let h = self.normalize(x.view(), &self.layout.dec_norm);
        let mut logits = h.dot(&table.t());
        logits += &self.params.get(self.layout.out_bias).row(0);
        logits
    }

    /// Greedy decoding of every memory segment; ties go to the lowest id.
    pub(crate) fn greedy_from_memory(
        &self,
        memory: ArrayView2<F>,
        packing: &Packing,
        mask: &DecodeMask,
        max_len: usize,
    ) -> Vec<Vec<u32>> {
        let max_len = max_len.clamp(1, self.config.max_len);
        let cross = self.cross_memory(memory, packing);
        let n = packing.len();
        let mut out: Vec<Vec<u32>> = vec![Vec::new(); n];
        let mut active: Vec<usize> = (0..n).collect();
        let mut caches: Vec<SelfCache<F>> = (0..n).map(|_| self.empty_cache(max_len)).collect();
        let mut last = vec![BOS; n];
        while !active.is_empty() {
            let logits = {
                let mut refs: Vec<&mut SelfCache<F>> = caches.iter_mut().collect();
                self.step(&last, &active, &mut refs, &cross)
            };
            let mut keep = Vec::with_capacity(active.len());
            for (r, &src) in active.iter().enumerate() {
                let next = masked_argmax(logits.row(r), mask);
                out[src].push(next);
                last[r] = next;
                keep.push(next != EOS && out[src].len() < max_len);
            }
            let mut kept = 0;
            for (r, &k) in keep.iter().enumerate() {
                if k {
                    active.swap(kept, r);
                    caches.swap(kept, r);
                    last.swap(kept, r);
                    kept += 1;
                }
            }
            active.truncate(kept);
            caches.truncate(kept);
            last.truncate(kept);
        }
        out
    }

    /// Beam search over memory segment `src`. Hypotheses accumulate summed
    /// log-probabilities; the returned one has the best mean log-probability
    /// among finished hypotheses.
    pub(crate) fn beam_search(
        &self,
        cross: &CrossMemory<F>,
        src: usize,
        mask: &DecodeMask,
        beam: usize,
        max_len: usize,
    ) -> Vec<u32> {
        let max_len = max_len.clamp(1, self.config.max_len);
        let mut alive = vec![Hypothesis {
            tokens: Vec::new(),
            score: 0.0,
            cache: self.empty_cache(max_len),
        }];
        let mut finished: Vec<(Vec<u32>, f64)> = Vec::new();
        while !alive.is_empty() && finished.len() < beam {
            let last: Vec<u32> = alive.iter().map(|h| h.tokens.last().copied().unwrap_or(BOS)).collect();
            let sources = vec![src; alive.len()];
            let logits = {
                let mut refs: Vec<&mut SelfCache<F>> = alive.iter_mut().map(|h| &mut h.cache).collect();
                self.step(&last, &sources, &mut refs, cross)
            };
            let mut candidates: Vec<(f64, usize, u32)> = Vec::new();
            for (i, hyp) in alive.iter().enumerate() {
                for (t, lp) in masked_log_softmax(logits.row(i), mask) {
                    candidates.push((hyp.score + lp, i, t));
                }
            }
            candidates.sort_by(|a, b| {
                b.0.partial_cmp(&a.0)
                    .unwrap_or(Ordering::Equal)
                    .then(a.1.cmp(&b.1))
                    .then(a.2.cmp(&b.2))
            });
            candidates.truncate(beam);
            let mut next = Vec::with_capacity(beam);
            for (score, i, t) in candidates {
                let mut tokens = alive[i].tokens.clone();
                tokens.push(t);
                if t == EOS || tokens.len() >= max_len {
                    finished.push((tokens, score));
                } else {
                    next.push(Hypothesis {
                        tokens,
                        score,
                        cache: alive[i].cache.clone(),
                    });
                }
            }
            alive = next;
        }
        let mut best: Option<(Vec<u32>, f64)> = None;
        for (tokens, score) in finished {
            let mean = score / tokens.len() as f64;
            if best.as_ref().is_none_or(|(_, m)| mean > *m) {
                best = Some((tokens, mean));
            }
        }
        best.map(|(t, _)| t).unwrap_or_default()
    }
}

fn masked_argmax<F: Float>(row: ArrayView1<F>, mask: &DecodeMask) -> u32 {
    let mut best: Option<(usize, F)> = None;
    for (j, &v) in row.iter().enumerate() {
        if mask.as_slice()[j] {
            continue;
        }
        if best.is_none_or(|(_, b)| v > b) {
            best = Some((j, v));
        }
    }
    best.map(|(j, _)| j as u32).unwrap_or(EOS)
}

fn masked_log_softmax<F: Float>(row: ArrayView1<F>, mask: &DecodeMask) -> Vec<(u32, f64)> {
    let allowed: Vec<(u32, f64)> = row
        .iter()
        .enumerate()
        .filter(|(j, _)| !mask.as_slice()[*j])
        .map(|(j, v)| (j as u32, v.to_f64().unwrap()))
        .collect();
    let max = allowed.iter().fold(f64::NEG_INFINITY, |m, &(_, v)| m.max(v));
    let lse = max + allowed.iter().map(|&(_, v)| (v - max).exp()).sum::<f64>().ln();
    allowed.into_iter().map(|(j, v)| (j, v - lse)).collect()
}
