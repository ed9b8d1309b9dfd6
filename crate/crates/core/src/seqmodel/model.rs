//! Encoder-decoder transformer built on the tape. A batch is packed row-wise:
//! sequences are stacked without padding and attention runs per segment.

use std::rc::Rc;

use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::params::ParamSet;
use super::tape::{AttnPlan, Segment, Tape, Var};
use super::{Float, ModelConfig};
use crate::vocab::BOS;

#[derive(Debug, Clone)]
pub(crate) struct AttnParams {
    pub wq: usize,
    pub bq: usize,
    pub wk: usize,
    pub bk: usize,
    pub wv: usize,
    pub bv: usize,
    pub wo: usize,
    pub bo: usize,
}

#[derive(Debug, Clone)]
pub(crate) struct NormParams {
    pub gain: usize,
    pub bias: usize,
}

#[derive(Debug, Clone)]
pub(crate) struct FfnParams {
    pub w1: usize,
    pub b1: usize,
    pub w2: usize,
    pub b2: usize,
}

#[derive(Debug, Clone)]
pub(crate) struct EncoderLayer {
    pub norm1: NormParams,
    pub attn: AttnParams,
    pub norm2: NormParams,
    pub ffn: FfnParams,
}

#[derive(Debug, Clone)]
pub(crate) struct DecoderLayer {
    pub norm1: NormParams,
    pub self_attn: AttnParams,
    pub norm2: NormParams,
    pub cross_attn: AttnParams,
    pub norm3: NormParams,
    pub ffn: FfnParams,
}

/// Indices of every tensor inside the [`ParamSet`].
#[derive(Debug, Clone)]
pub(crate) struct Layout {
    pub embed: usize,
    pub out_bias: usize,
    pub encoder: Vec<EncoderLayer>,
    pub enc_norm: NormParams,
    pub decoder: Vec<DecoderLayer>,
    pub dec_norm: NormParams,
}

struct Init<'a, F> {
    params: &'a mut ParamSet<F>,
    rng: ChaCha8Rng,
}

impl<F: Float> Init<'_, F> {
    fn normal(&mut self, name: String, rows: usize, cols: usize, std: f64) -> usize {
        let dist = Normal::new(0.0, std).expect("valid std");
        let t = Array2::from_shape_fn((rows, cols), |_| F::from_f64(dist.sample(&mut self.rng)).unwrap());
        self.params.push(name, t)
    }

    fn zeros(&mut self, name: String, cols: usize) -> usize {
        self.params.push(name, Array2::zeros((1, cols)))
    }

    fn ones(&mut self, name: String, cols: usize) -> usize {
        self.params.push(name, Array2::ones((1, cols)))
    }

    fn linear(&mut self, name: &str, fan_in: usize, fan_out: usize) -> (usize, usize) {
        let std = (2.0 / (fan_in + fan_out) as f64).sqrt();
        let w = self.normal(format!("{name}.weight"), fan_in, fan_out, std);
        let b = self.zeros(format!("{name}.bias"), fan_out);
        (w, b)
    }

    fn attn(&mut self, name: &str, d: usize) -> AttnParams {
        let (wq, bq) = self.linear(&format!("{name}.q"), d, d);
        let (wk, bk) = self.linear(&format!("{name}.k"), d, d);
        let (wv, bv) = self.linear(&format!("{name}.v"), d, d);
        let (wo, bo) = self.linear(&format!("{name}.o"), d, d);
        AttnParams {
            wq,
            bq,
            wk,
            bk,
            wv,
            bv,
            wo,
            bo,
        }
    }

    fn norm(&mut self, name: &str, d: usize) -> NormParams {
        NormParams {
            gain: self.ones(format!("{name}.gain"), d),
            bias: self.zeros(format!("{name}.bias"), d),
        }
    }

    fn ffn(&mut self, name: &str, d: usize, ff: usize) -> FfnParams {
        let (w1, b1) = self.linear(&format!("{name}.in"), d, ff);
        let (w2, b2) = self.linear(&format!("{name}.out"), ff, d);
        FfnParams { w1, b1, w2, b2 }
    }
}

/// Standard deviation of the tied embedding table at init. Small enough
/// that the output distribution starts near uniform.
pub(crate) fn embed_init_std(d_model: usize) -> f64 {
    0.3 / (d_model as f64).sqrt()
}

pub(crate) fn init_params<F: Float>(
    config: &ModelConfig,
    vocab_size: usize,
    seed: u64,
) -> (ParamSet<F>, Layout) {
    let mut params = ParamSet::new();
    let mut init = Init {
        params: &mut params,
        rng: ChaCha8Rng::seed_from_u64(seed),
    };
    let d = config.d_model;
    let embed = init.normal("embed".into(), vocab_size, d, embed_init_std(d));
    let out_bias = init.zeros("out.bias".into(), vocab_size);
    let encoder = (0..config.encoder_layers)
        .map(|l| EncoderLayer {
            norm1: init.norm(&format!("enc{l}.norm1"), d),
            attn: init.attn(&format!("enc{l}.attn"), d),
            norm2: init.norm(&format!("enc{l}.norm2"), d),
            ffn: init.ffn(&format!("enc{l}.ffn"), d, config.d_ff),
        })
        .collect();
    let enc_norm = init.norm("enc.norm", d);
    let decoder = (0..config.decoder_layers)
        .map(|l| DecoderLayer {
            norm1: init.norm(&format!("dec{l}.norm1"), d),
            self_attn: init.attn(&format!("dec{l}.self"), d),
            norm2: init.norm(&format!("dec{l}.norm2"), d),
            cross_attn: init.attn(&format!("dec{l}.cross"), d),
            norm3: init.norm(&format!("dec{l}.norm3"), d),
            ffn: init.ffn(&format!("dec{l}.ffn"), d, config.d_ff),
        })
        .collect();
    let dec_norm = init.norm("dec.norm", d);
    let layout = Layout {
        embed,
        out_bias,
        encoder,
        enc_norm,
        decoder,
        dec_norm,
    };
    (params, layout)
}

/// Sinusoidal position table with `rows` positions.
pub(crate) fn positional_table<F: Float>(rows: usize, d: usize) -> Array2<F> {
    Array2::from_shape_fn((rows, d), |(pos, i)| {
        let pair = (i / 2) as f64;
        let angle = pos as f64 / 10000f64.powf(2.0 * pair / d as f64);
        F::from_f64(if i % 2 == 0 { angle.sin() } else { angle.cos() }).unwrap()
    })
}

/// Row layout of a packed batch.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Packing {
    pub offsets: Vec<usize>,
    pub lens: Vec<usize>,
}

impl Packing {
    pub fn from_lens(lens: Vec<usize>) -> Self {
        let mut offsets = Vec::with_capacity(lens.len());
        let mut acc = 0;
        for &l in &lens {
            offsets.push(acc);
            acc += l;
        }
        Self { offsets, lens }
    }

    pub fn total(&self) -> usize {
        self.lens.iter().sum()
    }

    pub fn len(&self) -> usize {
        self.lens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.lens.is_empty()
    }

    pub fn range(&self, i: usize) -> std::ops::Range<usize> {
        self.offsets[i]..self.offsets[i] + self.lens[i]
    }

    pub(crate) fn self_plan(&self, heads: usize, causal: bool) -> Rc<AttnPlan> {
        Rc::new(AttnPlan {
            heads,
            causal,
            segments: self
                .offsets
                .iter()
                .zip(&self.lens)
                .map(|(&o, &n)| Segment {
                    q0: o,
                    qn: n,
                    k0: o,
                    kn: n,
                })
                .collect(),
        })
    }

    pub(crate) fn cross_plan(&self, memory: &Packing, heads: usize) -> Rc<AttnPlan> {
        Rc::new(AttnPlan {
            heads,
            causal: false,
            segments: (0..self.len())
                .map(|i| Segment {
                    q0: self.offsets[i],
                    qn: self.lens[i],
                    k0: memory.offsets[i],
                    kn: memory.lens[i],
                })
                .collect(),
        })
    }

    /// Position of every packed row within its own sequence.
    pub fn positions(&self) -> Vec<usize> {
        self.lens.iter().flat_map(|&n| 0..n).collect()
    }
}

/// Decoder inputs for teacher forcing: BOS followed by the target minus its
/// last id.
pub fn shift_right(target: &[u32]) -> Vec<u32> {
    let mut v = Vec::with_capacity(target.len());
    v.push(BOS);
    v.extend_from_slice(&target[..target.len().saturating_sub(1)]);
    v
}

/// Differentiable forward pieces shared by training and inference.
pub(crate) struct Net<'m, F: Float> {
    pub config: &'m ModelConfig,
    pub layout: &'m Layout,
    pub pe: &'m Array2<F>,
}

impl<F: Float> Net<'_, F> {
    fn add_positions(&self, tape: &mut Tape<'_, F>, x: Var, packing: &Packing) -> Var {
        let scale = F::from_f64((self.config.d_model as f64).sqrt()).unwrap();
        let x = tape.scale(x, scale);
        let pe = self.pe.select(ndarray::Axis(0), &packing.positions());
        let pe = tape.constant(pe);
        tape.add(x, pe)
    }

    pub fn embed_ids(&self, tape: &mut Tape<'_, F>, seqs: &[&[u32]]) -> (Var, Packing) {
        let packing = Packing::from_lens(seqs.iter().map(|s| s.len()).collect());
        let ids: Vec<usize> = seqs.iter().flat_map(|s| s.iter().map(|&i| i as usize)).collect();
        let table = tape.param(self.layout.embed);
        let x = tape.gather_rows(table, ids);
        (self.add_positions(tape, x, &packing), packing)
    }

    /// Expected embedding of per-row distributions over the vocabulary.
    pub fn embed_soft(&self, tape: &mut Tape<'_, F>, probs: Var, packing: &Packing) -> Var {
        let table = tape.param(self.layout.embed);
        let x = tape.matmul(probs, table);
        self.add_positions(tape, x, packing)
    }

    fn linear(&self, tape: &mut Tape<'_, F>, x: Var, w: usize, b: usize) -> Var {
        let w = tape.param(w);
        let b = tape.param(b);
        let y = tape.matmul(x, w);
        tape.add_row(y, b)
    }

    fn norm(&self, tape: &mut Tape<'_, F>, x: Var, p: &NormParams) -> Var {
        let g = tape.param(p.gain);
        let b = tape.param(p.bias);
        tape.layer_norm(x, g, b)
    }

    fn attention(
        &self,
        tape: &mut Tape<'_, F>,
        query: Var,
        keys: Var,
        p: &AttnParams,
        plan: Rc<AttnPlan>,
    ) -> Var {
        let q = self.linear(tape, query, p.wq, p.bq);
        let k = self.linear(tape, keys, p.wk, p.bk);
        let v = self.linear(tape, keys, p.wv, p.bv);
        let o = tape.attention(q, k, v, plan);
        self.linear(tape, o, p.wo, p.bo)
    }

    fn ffn(&self, tape: &mut Tape<'_, F>, x: Var, p: &FfnParams) -> Var {
        let h = self.linear(tape, x, p.w1, p.b1);
        let h = tape.gelu(h);
        self.linear(tape, h, p.w2, p.b2)
    }

    pub fn encode(&self, tape: &mut Tape<'_, F>, x: Var, packing: &Packing) -> Var {
        let plan = packing.self_plan(self.config.heads, false);
        let mut x = x;
        for layer in &self.layout.encoder {
            let h = self.norm(tape, x, &layer.norm1);
            let a = self.attention(tape, h, h, &layer.attn, plan.clone());
            x = tape.add(x, a);
            let h = self.norm(tape, x, &layer.norm2);
            let f = self.ffn(tape, h, &layer.ffn);
            x = tape.add(x, f);
        }
        self.norm(tape, x, &self.layout.enc_norm)
    }

    /// Teacher-forced decoder pass; returns logits over the vocabulary for
    /// every packed input row.
    pub fn decode(
        &self,
        tape: &mut Tape<'_, F>,
        memory: Var,
        mem_packing: &Packing,
        inputs: &[&[u32]],
    ) -> (Var, Packing) {
        let (mut x, packing) = self.embed_ids(tape, inputs);
        let self_plan = packing.self_plan(self.config.heads, true);
        let cross_plan = packing.cross_plan(mem_packing, self.config.heads);
        for layer in &self.layout.decoder {
            let h = self.norm(tape, x, &layer.norm1);
            let a = self.attention(tape, h, h, &layer.self_attn, self_plan.clone());
            x = tape.add(x, a);
            let h = self.norm(tape, x, &layer.norm2);
            let c = self.attention(tape, h, memory, &layer.cross_attn, cross_plan.clone());
            x = tape.add(x, c);
            let h = self.norm(tape, x, &layer.norm3);
            let f = self.ffn(tape, h, &layer.ffn);
            x = tape.add(x, f);
        }
        let h = self.norm(tape, x, &self.layout.dec_norm);
        let table = tape.param(self.layout.embed);
        let logits = tape.matmul_t(h, table);
        let bias = tape.param(self.layout.out_bias);
        (tape.add_row(logits, bias), packing)
    }
}
