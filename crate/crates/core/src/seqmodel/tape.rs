//! Reverse-mode differentiation over 2-D tensors.
//!
//! Every node holds a dense row-major matrix. Parameters live outside the
//! tape in a [`ParamSet`] and are referenced by index, so building a graph
//! never copies weights.

use std::rc::Rc;

use ndarray::linalg::general_mat_mul;
use ndarray::{s, Array2, ArrayView2, Axis, Zip};

use super::params::ParamSet;
use super::Float;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

/// One attention block: queries `q0..q0+qn` attend to keys `k0..k0+kn`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Segment {
    pub q0: usize,
    pub qn: usize,
    pub k0: usize,
    pub kn: usize,
}

#[derive(Debug, Clone)]
pub struct AttnPlan {
    pub heads: usize,
    pub causal: bool,
    pub segments: Vec<Segment>,
}

enum Op<F> {
    Const,
    Param(usize),
    MatMul(Var, Var),
    MatMulT(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Scale(Var, F),
    Gelu(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Array2<F>,
        inv_std: Vec<F>,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        plan: Rc<AttnPlan>,
        probs: Vec<Array2<F>>,
    },
    GatherRows {
        src: Var,
        idx: Vec<usize>,
    },
    ConcatRows(Var, Var),
    Softmax(Var),
    CrossEntropy {
        logits: Var,
        targets: Vec<Option<u32>>,
        probs: Array2<F>,
    },
}

struct Node<F> {
    op: Op<F>,
    value: Option<Array2<F>>,
    needs_grad: bool,
}

pub struct Tape<'p, F: Float> {
    params: &'p ParamSet<F>,
    nodes: Vec<Node<F>>,
}

pub const LN_EPS: f64 = 1e-5;

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

pub fn gelu<F: Float>(x: F) -> F {
    let c = F::from_f64(GELU_C).unwrap();
    let a = F::from_f64(GELU_A).unwrap();
    let half = F::from_f64(0.5).unwrap();
    half * x * (F::one() + (c * (x + a * x * x * x)).tanh())
}

fn gelu_grad<F: Float>(x: F) -> F {
    let c = F::from_f64(GELU_C).unwrap();
    let a = F::from_f64(GELU_A).unwrap();
    let half = F::from_f64(0.5).unwrap();
    let three = F::from_f64(3.0).unwrap();
    let t = (c * (x + a * x * x * x)).tanh();
    half * (F::one() + t) + half * x * (F::one() - t * t) * c * (F::one() + three * a * x * x)
}

/// Row-wise layer normalization; returns the normalized rows and 1/std.
pub fn layer_norm_rows<F: Float>(x: ArrayView2<F>) -> (Array2<F>, Vec<F>) {
    let cols = F::from_usize(x.ncols()).unwrap();
    let eps = F::from_f64(LN_EPS).unwrap();
    let mut out = x.to_owned();
    let mut inv = Vec::with_capacity(x.nrows());
    for mut row in out.rows_mut() {
        let mean = row.sum() / cols;
        row.mapv_inplace(|v| v - mean);
        let var = row.iter().fold(F::zero(), |a, &v| a + v * v) / cols;
        let is = F::one() / (var + eps).sqrt();
        row.mapv_inplace(|v| v * is);
        inv.push(is);
    }
    (out, inv)
}

/// Row-wise softmax in place; entries equal to -inf become exact zeros.
pub fn softmax_rows_inplace<F: Float>(x: &mut Array2<F>) {
    for mut row in x.rows_mut() {
        let max = row.iter().fold(F::neg_infinity(), |m, &v| m.max(v));
        let mut sum = F::zero();
        row.mapv_inplace(|v| {
            let e = if v == F::neg_infinity() { F::zero() } else { (v - max).exp() };
            sum += e;
            e
        });
        row.mapv_inplace(|v| v / sum);
    }
}

/// Multi-head scaled dot-product attention for every segment of `plan`.
/// Returns the output and the per-(segment, head) probability matrices.
pub fn attention_forward<F: Float>(
    q: ArrayView2<F>,
    k: ArrayView2<F>,
    v: ArrayView2<F>,
    plan: &AttnPlan,
) -> (Array2<F>, Vec<Array2<F>>) {
    let d = q.ncols();
    let dh = d / plan.heads;
    let scale = F::one() / F::from_usize(dh).unwrap().sqrt();
    let mut out = Array2::zeros((q.nrows(), d));
    let mut probs = Vec::with_capacity(plan.segments.len() * plan.heads);
    for seg in &plan.segments {
        for h in 0..plan.heads {
            let cols = h * dh..(h + 1) * dh;
            let qh = q.slice(s![seg.q0..seg.q0 + seg.qn, cols.clone()]);
            let kh = k.slice(s![seg.k0..seg.k0 + seg.kn, cols.clone()]);
            let vh = v.slice(s![seg.k0..seg.k0 + seg.kn, cols.clone()]);
            let mut p = qh.dot(&kh.t());
            p.mapv_inplace(|x| x * scale);
            if plan.causal {
                for i in 0..seg.qn {
                    for j in i + 1..seg.kn {
                        p[[i, j]] = F::neg_infinity();
                    }
                }
            }
            softmax_rows_inplace(&mut p);
            let mut o = out.slice_mut(s![seg.q0..seg.q0 + seg.qn, cols]);
            general_mat_mul(F::one(), &p, &vh, F::zero(), &mut o);
            probs.push(p);
        }
    }
    (out, probs)
}

fn accumulate<F: Float>(slot: &mut Option<Array2<F>>, g: Array2<F>) {
    match slot {
        Some(acc) => *acc += &g,
        None => *slot = Some(g),
    }
}

impl<'p, F: Float> Tape<'p, F> {
    pub fn new(params: &'p ParamSet<F>) -> Self {
        Self {
            params,
            nodes: Vec::with_capacity(512),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, op: Op<F>, value: Array2<F>, parents: &[Var]) -> Var {
        let needs_grad = parents.iter().any(|p| self.nodes[p.0].needs_grad);
        self.nodes.push(Node {
            op,
            value: Some(value),
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> ArrayView2<'_, F> {
        match &self.nodes[v.0].op {
            Op::Param(i) => self.params.get(*i).view(),
            _ => self.nodes[v.0].value.as_ref().expect("value").view(),
        }
    }

    pub fn scalar(&self, v: Var) -> F {
        self.value(v)[[0, 0]]
    }

    pub fn constant(&mut self, value: Array2<F>) -> Var {
        self.nodes.push(Node {
            op: Op::Const,
            value: Some(value),
            needs_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn param(&mut self, index: usize) -> Var {
        self.nodes.push(Node {
            op: Op::Param(index),
            value: None,
            needs_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).dot(&self.value(b));
        self.push(Op::MatMul(a, b), out, &[a, b])
    }

    /// `a · bᵀ`
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).dot(&self.value(b).t());
        self.push(Op::MatMulT(a, b), out, &[a, b])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let out = &self.value(a) + &self.value(b);
        self.push(Op::Add(a, b), out, &[a, b])
    }

    /// Adds a 1×m row to every row of `x`.
    pub fn add_row(&mut self, x: Var, row: Var) -> Var {
        let out = &self.value(x) + &self.value(row);
        self.push(Op::AddRow(x, row), out, &[x, row])
    }

    pub fn scale(&mut self, x: Var, c: F) -> Var {
        let out = self.value(x).mapv(|v| v * c);
        self.push(Op::Scale(x, c), out, &[x])
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let out = self.value(x).mapv(gelu);
        self.push(Op::Gelu(x), out, &[x])
    }

    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Var {
        let (xhat, inv_std) = layer_norm_rows(self.value(x));
        let out = &xhat * &self.value(gain) + &self.value(bias);
        self.push(
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
            out,
            &[x, gain, bias],
        )
    }

    pub fn attention(&mut self, q: Var, k: Var, v: Var, plan: Rc<AttnPlan>) -> Var {
        let (out, probs) = attention_forward(self.value(q), self.value(k), self.value(v), &plan);
        self.push(Op::Attention { q, k, v, plan, probs }, out, &[q, k, v])
    }

    pub fn gather_rows(&mut self, src: Var, idx: Vec<usize>) -> Var {
        let out = self.value(src).select(Axis(0), &idx);
        self.push(Op::GatherRows { src, idx }, out, &[src])
    }

    pub fn concat_rows(&mut self, a: Var, b: Var) -> Var {
        let out = ndarray::concatenate(Axis(0), &[self.value(a), self.value(b)]).expect("column mismatch");
        self.push(Op::ConcatRows(a, b), out, &[a, b])
    }

    /// Row softmax. Columns flagged in `forbidden` get probability exactly 0.
    pub fn masked_softmax(&mut self, x: Var, forbidden: &[bool]) -> Var {
        let mut out = self.value(x).to_owned();
        for mut row in out.rows_mut() {
            for (v, &f) in row.iter_mut().zip(forbidden) {
                if f {
                    *v = F::neg_infinity();
                }
            }
        }
        softmax_rows_inplace(&mut out);
        self.push(Op::Softmax(x), out, &[x])
    }

    /// Summed negative log-likelihood of `targets` under row-softmax of
    /// `logits`; `None` targets are skipped. Produces a 1×1 node.
    pub fn cross_entropy(&mut self, logits: Var, targets: Vec<Option<u32>>) -> Var {
        let mut probs = self.value(logits).to_owned();
        let mut total = F::zero();
        for (mut row, t) in probs.rows_mut().into_iter().zip(&targets) {
            let max = row.iter().fold(F::neg_infinity(), |m, &v| m.max(v));
            let target_logit = t.map(|t| row[t as usize]);
            let mut sum = F::zero();
            row.mapv_inplace(|v| {
                let e = (v - max).exp();
                sum += e;
                e
            });
            if let Some(logit) = target_logit {
                total += max + sum.ln() - logit;
            }
            row.mapv_inplace(|v| v / sum);
        }
        let out = Array2::from_elem((1, 1), total);
        self.push(
            Op::CrossEntropy {
                logits,
                targets,
                probs,
            },
            out,
            &[logits],
        )
    }

    /// Backpropagates from the 1×1 node `root`, adding parameter gradients
    /// into `grads`.
    pub fn backward(&mut self, root: Var, grads: &mut ParamSet<F>) {
        let n = self.nodes.len();
        let mut g: Vec<Option<Array2<F>>> = (0..n).map(|_| None).collect();
        g[root.0] = Some(Array2::from_elem((1, 1), F::one()));
        for i in (0..=root.0).rev() {
            let Some(gi) = g[i].take() else { continue };
            if !self.nodes[i].needs_grad {
                continue;
            }
            let want = |v: &Var, nodes: &Vec<Node<F>>| nodes[v.0].needs_grad;
            match &self.nodes[i].op {
                Op::Const => {}
                Op::Param(p) => *grads.get_mut(*p) += &gi,
                Op::MatMul(a, b) => {
                    let (a, b) = (*a, *b);
                    if want(&a, &self.nodes) {
                        let ga = gi.dot(&self.value(b).t());
                        accumulate(&mut g[a.0], ga);
                    }
                    if want(&b, &self.nodes) {
                        let gb = self.value(a).t().dot(&gi);
                        accumulate(&mut g[b.0], gb);
                    }
                }
                Op::MatMulT(a, b) => {
                    let (a, b) = (*a, *b);
                    if want(&a, &self.nodes) {
                        let ga = gi.dot(&self.value(b));
                        accumulate(&mut g[a.0], ga);
                    }
                    if want(&b, &self.nodes) {
                        let gb = gi.t().dot(&self.value(a));
                        accumulate(&mut g[b.0], gb);
                    }
                }
                Op::Add(a, b) => {
                    let (a, b) = (*a, *b);
                    if want(&b, &self.nodes) {
                        accumulate(&mut g[b.0], gi.clone());
                    }
                    if want(&a, &self.nodes) {
                        accumulate(&mut g[a.0], gi);
                    }
                }
                Op::AddRow(x, row) => {
                    let (x, row) = (*x, *row);
                    if want(&row, &self.nodes) {
                        let gr = gi.sum_axis(Axis(0)).insert_axis(Axis(0));
                        accumulate(&mut g[row.0], gr);
                    }
                    if want(&x, &self.nodes) {
                        accumulate(&mut g[x.0], gi);
                    }
                }
                Op::Scale(x, c) => {
                    let c = *c;
                    let x = *x;
                    accumulate(&mut g[x.0], gi.mapv(|v| v * c));
                }
                Op::Gelu(x) => {
                    let x = *x;
                    let mut gx = gi;
                    Zip::from(&mut gx)
                        .and(&self.value(x))
                        .for_each(|gv, &xv| *gv *= gelu_grad(xv));
                    accumulate(&mut g[x.0], gx);
                }
                Op::LayerNorm {
                    x,
                    gain,
                    bias,
                    xhat,
                    inv_std,
                } => {
                    let (x, gain, bias) = (*x, *gain, *bias);
                    if want(&bias, &self.nodes) {
                        let gb = gi.sum_axis(Axis(0)).insert_axis(Axis(0));
                        accumulate(&mut g[bias.0], gb);
                    }
                    if want(&gain, &self.nodes) {
                        let gg = (&gi * xhat).sum_axis(Axis(0)).insert_axis(Axis(0));
                        accumulate(&mut g[gain.0], gg);
                    }
                    if want(&x, &self.nodes) {
                        let cols = F::from_usize(gi.ncols()).unwrap();
                        let mut dxhat = &gi * &self.value(gain);
                        for ((mut row, xh), &is) in
                            dxhat.rows_mut().into_iter().zip(xhat.rows()).zip(inv_std)
                        {
                            let mean_d = row.sum() / cols;
                            let mean_dx = row.iter().zip(xh).fold(F::zero(), |a, (&d, &h)| a + d * h) / cols;
                            Zip::from(&mut row)
                                .and(&xh)
                                .for_each(|d, &h| *d = is * (*d - mean_d - h * mean_dx));
                        }
                        accumulate(&mut g[x.0], dxhat);
                    }
                }
                Op::Attention { q, k, v, plan, probs } => {
                    let (q, k, v) = (*q, *k, *v);
                    let qv = self.value(q);
                    let kv = self.value(k);
                    let vv = self.value(v);
                    let d = qv.ncols();
                    let dh = d / plan.heads;
                    let scale = F::one() / F::from_usize(dh).unwrap().sqrt();
                    let mut gq = Array2::zeros(qv.raw_dim());
                    let mut gk = Array2::zeros(kv.raw_dim());
                    let mut gv = Array2::zeros(vv.raw_dim());
                    let mut pi = 0;
                    for seg in &plan.segments {
                        for h in 0..plan.heads {
                            let p = &probs[pi];
                            pi += 1;
                            let cols = h * dh..(h + 1) * dh;
                            let qr = seg.q0..seg.q0 + seg.qn;
                            let kr = seg.k0..seg.k0 + seg.kn;
                            let go = gi.slice(s![qr.clone(), cols.clone()]);
                            let qh = qv.slice(s![qr.clone(), cols.clone()]);
                            let kh = kv.slice(s![kr.clone(), cols.clone()]);
                            let vh = vv.slice(s![kr.clone(), cols.clone()]);
                            let mut dp = go.dot(&vh.t());
                            general_mat_mul(
                                F::one(),
                                &p.t(),
                                &go,
                                F::one(),
                                &mut gv.slice_mut(s![kr.clone(), cols.clone()]),
                            );
                            for (mut drow, prow) in dp.rows_mut().into_iter().zip(p.rows()) {
                                let dot = drow.iter().zip(prow).fold(F::zero(), |a, (&x, &y)| a + x * y);
                                Zip::from(&mut drow).and(&prow).for_each(|dv, &pv| *dv = pv * (*dv - dot));
                            }
                            general_mat_mul(
                                scale,
                                &dp,
                                &kh,
                                F::one(),
                                &mut gq.slice_mut(s![qr, cols.clone()]),
                            );
                            general_mat_mul(
                                scale,
                                &dp.t(),
                                &qh,
                                F::one(),
                                &mut gk.slice_mut(s![kr, cols]),
                            );
                        }
                    }
                    if want(&q, &self.nodes) {
                        accumulate(&mut g[q.0], gq);
                    }
                    if want(&k, &self.nodes) {
                        accumulate(&mut g[k.0], gk);
                    }
                    if want(&v, &self.nodes) {
                        accumulate(&mut g[v.0], gv);
                    }
                }
                Op::GatherRows { src, idx } => {
                    let src = *src;
                    let shape = self.value(src).raw_dim();
                    let mut gs = Array2::zeros(shape);
                    for (row, &j) in gi.rows().into_iter().zip(idx) {
                        let mut dst = gs.row_mut(j);
                        dst += &row;
                    }
                    accumulate(&mut g[src.0], gs);
                }
                Op::ConcatRows(a, b) => {
                    let (a, b) = (*a, *b);
                    let na = self.value(a).nrows();
                    if want(&a, &self.nodes) {
                        accumulate(&mut g[a.0], gi.slice(s![..na, ..]).to_owned());
                    }
                    if want(&b, &self.nodes) {
                        accumulate(&mut g[b.0], gi.slice(s![na.., ..]).to_owned());
                    }
                }
                Op::Softmax(x) => {
                    let x = *x;
                    let p = self.nodes[i].value.as_ref().expect("softmax value");
                    let mut gx = gi;
                    for (mut grow, prow) in gx.rows_mut().into_iter().zip(p.rows()) {
                        let dot = grow.iter().zip(prow).fold(F::zero(), |a, (&x, &y)| a + x * y);
                        Zip::from(&mut grow).and(&prow).for_each(|gv, &pv| *gv = pv * (*gv - dot));
                    }
                    accumulate(&mut g[x.0], gx);
                }
                Op::CrossEntropy {
                    logits,
                    targets,
                    probs,
                } => {
                    let logits = *logits;
                    let scale = gi[[0, 0]];
                    let mut gl = probs.clone();
                    for (mut row, t) in gl.rows_mut().into_iter().zip(targets) {
                        match t {
                            Some(t) => row[*t as usize] -= F::one(),
                            None => row.fill(F::zero()),
                        }
                    }
                    gl.mapv_inplace(|v| v * scale);
                    accumulate(&mut g[logits.0], gl);
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn fd_check(build: impl Fn(&mut Tape<f64>) -> Var, params: &mut ParamSet<f64>) {
        let mut grads = params.zeros_like();
        {
            let mut tape = Tape::new(params);
            let root = build(&mut tape);
            tape.backward(root, &mut grads);
        }
        let eps = 1e-6;
        for p in 0..params.len() {
            for idx in 0..params.get(p).len() {
                let (r, c) = (idx / params.get(p).ncols(), idx % params.get(p).ncols());
                let orig = params.get(p)[[r, c]];
                params.get_mut(p)[[r, c]] = orig + eps;
                let up = {
                    let mut t = Tape::new(params);
                    let root = build(&mut t);
                    t.scalar(root)
                };
                params.get_mut(p)[[r, c]] = orig - eps;
                let down = {
                    let mut t = Tape::new(params);
                    let root = build(&mut t);
                    t.scalar(root)
                };
                params.get_mut(p)[[r, c]] = orig;
                let fd = (up - down) / (2.0 * eps);
                let an = grads.get(p)[[r, c]];
                let denom = fd.abs().max(an.abs()).max(1e-7);
                assert!(
                    (fd - an).abs() / denom < 1e-5,
                    "param {p} [{r},{c}]: fd {fd} vs analytic {an}"
                );
            }
        }
    }

    #[test]
    fn elementary_ops_match_finite_differences() {
        let mut params = ParamSet::from_tensors(vec![
            array![[0.3, -0.2, 0.5], [0.1, 0.4, -0.7]],
            array![[0.2, -0.1], [0.5, 0.3], [-0.4, 0.6]],
            array![[0.05, -0.3]],
            array![[1.1, 0.9]],
        ]);
        fd_check(
            |t| {
                let a = t.param(0);
                let b = t.param(1);
                let bias = t.param(2);
                let gain = t.param(3);
                let x = t.matmul(a, b);
                let x = t.add_row(x, bias);
                let x = t.gelu(x);
                let y = t.layer_norm(x, gain, bias);
                let y = t.scale(y, 0.7);
                let z = t.matmul_t(y, b);
                let both = t.concat_rows(z, a);
                let picked = t.gather_rows(both, vec![3, 0, 0, 2]);
                let sm = t.masked_softmax(picked, &[false, true, false]);
                let logits = t.add(sm, picked);
                t.cross_entropy(logits, vec![Some(0), None, Some(2), Some(1)])
            },
            &mut params,
        );
    }

    #[test]
    fn attention_matches_finite_differences() {
        let mut params = ParamSet::from_tensors(vec![
            array![
                [0.3, -0.2, 0.5, 0.1],
                [0.1, 0.4, -0.7, 0.2],
                [0.6, -0.1, 0.2, -0.3],
                [-0.5, 0.25, 0.1, 0.4],
                [0.2, 0.2, -0.2, 0.3]
            ],
            array![[0.3, -0.6, 0.1, 0.2], [0.5, 0.1, -0.2, 0.4], [0.1, 0.2, 0.3, -0.1]],
        ]);
        for causal in [false, true] {
            let plan = Rc::new(AttnPlan {
                heads: 2,
                causal,
                segments: vec![
                    Segment { q0: 0, qn: 3, k0: 0, kn: 3 },
                    Segment { q0: 3, qn: 2, k0: 3, kn: 2 },
                ],
            });
            let cross = Rc::new(AttnPlan {
                heads: 2,
                causal: false,
                segments: vec![Segment { q0: 0, qn: 5, k0: 0, kn: 3 }],
            });
            fd_check(
                |t| {
                    let x = t.param(0);
                    let m = t.param(1);
                    let x2 = t.scale(x, 0.9);
                    let a = t.attention(x, x2, x, plan.clone());
                    let c = t.attention(a, m, m, cross.clone());
                    t.cross_entropy(c, vec![Some(1), Some(2), None, Some(0), Some(3)])
                },
                &mut params,
            );
        }
    }

    #[test]
    fn masked_softmax_zeroes_forbidden_columns() {
        let params = ParamSet::<f64>::from_tensors(vec![]);
        let mut t = Tape::new(&params);
        let x = t.constant(array![[1.0, 2.0, 3.0], [0.0, 0.0, 0.0]]);
        let p = t.masked_softmax(x, &[false, false, true]);
        let v = t.value(p);
        assert_eq!(v[[0, 2]], 0.0);
        assert_eq!(v[[1, 2]], 0.0);
        for row in v.rows() {
            assert!((row.sum() - 1.0).abs() < 1e-12);
        }
    }
}
