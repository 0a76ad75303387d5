//! Minimal reverse-mode tape over row-major matrices.
//!
//! Every value on the tape is a `[rows, cols]` matrix. The op set is exactly
//! what the generator needs; each op stores whatever its backward pass reads.

use std::rc::Rc;

use crate::tensor::{matmul, Real};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

enum Op<F> {
    Leaf,
    Linear { x: Var, w: Var, b: Option<Var> },
    Add(Var, Var),
    MulConst(Var, Rc<Vec<F>>),
    Mul(Var, Var),
    Silu(Var),
    LayerNorm { x: Var, rstd: Vec<F> },
    Attention(Box<AttnSaved<F>>),
    Gather { x: Var, idx: Rc<Vec<usize>> },
    Concat(Var, Var),
    Mse { pred: Var, target: Rc<Vec<F>> },
}

struct AttnSaved<F> {
    q: Var,
    k: Var,
    v: Var,
    groups: usize,
    lq: usize,
    lk: usize,
    probs: Vec<F>,
}

struct Node<F> {
    rows: usize,
    cols: usize,
    value: Vec<F>,
    op: Op<F>,
}

pub struct Tape<F> {
    nodes: Vec<Node<F>>,
}

pub struct Grads<F> {
    grads: Vec<Option<Vec<F>>>,
}

impl<F: Real> Grads<F> {
    pub fn get(&self, v: Var) -> Option<&[F]> {
        self.grads[v.0].as_deref()
    }
}

impl<F: Real> Default for Tape<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Real> Tape<F> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    fn push(&mut self, rows: usize, cols: usize, value: Vec<F>, op: Op<F>) -> Var {
        debug_assert_eq!(rows * cols, value.len());
        self.nodes.push(Node { rows, cols, value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, rows: usize, cols: usize, value: Vec<F>) -> Var {
        assert_eq!(rows * cols, value.len(), "leaf shape");
        self.push(rows, cols, value, Op::Leaf)
    }

    pub fn value(&self, v: Var) -> &[F] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        let n = &self.nodes[v.0];
        (n.rows, n.cols)
    }

    /// `x @ w + b` for `x: [n, k]`, `w: [k, m]`, `b: [1, m]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Var {
        let (n, k) = self.shape(x);
        let (k2, m) = self.shape(w);
        assert_eq!(k, k2, "linear inner dims");
        let mut out = vec![F::zero(); n * m];
        if let Some(b) = b {
            assert_eq!(self.shape(b), (1, m));
            let bias = self.value(b);
            for row in out.chunks_mut(m) {
                row.copy_from_slice(bias);
            }
        }
        matmul(n, k, m, self.value(x), false, self.value(w), false, &mut out, b.is_some());
        self.push(n, m, out, Op::Linear { x, w, b })
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "add shapes");
        let (r, c) = self.shape(a);
        let out = self.value(a).iter().zip(self.value(b)).map(|(x, y)| *x + *y).collect();
        self.push(r, c, out, Op::Add(a, b))
    }

    pub fn mul_const(&mut self, x: Var, c: Rc<Vec<F>>) -> Var {
        let (r, cols) = self.shape(x);
        assert_eq!(c.len(), r * cols);
        let out = self.value(x).iter().zip(c.iter()).map(|(a, b)| *a * *b).collect();
        self.push(r, cols, out, Op::MulConst(x, c))
    }

    /// Elementwise product of two same-shaped nodes.
    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let (r, c) = self.shape(a);
        assert_eq!(self.shape(b), (r, c), "mul shapes");
        let out = self.value(a).iter().zip(self.value(b)).map(|(x, y)| *x * *y).collect();
        self.push(r, c, out, Op::Mul(a, b))
    }

    pub fn silu(&mut self, x: Var) -> Var {
        let (r, c) = self.shape(x);
        let out = self.value(x).iter().map(|&v| v * sigmoid(v)).collect();
        self.push(r, c, out, Op::Silu(x))
    }

    /// Row-wise normalization to zero mean and unit variance, no affine.
    pub fn layer_norm(&mut self, x: Var) -> Var {
        let (r, c) = self.shape(x);
        let eps = F::of(1e-6);
        let cf = F::of(c as f64);
        let mut out = Vec::with_capacity(r * c);
        let mut rstd = Vec::with_capacity(r);
        for row in self.value(x).chunks(c) {
            let mean = row.iter().copied().sum::<F>() / cf;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<F>() / cf;
            let s = F::one() / (var + eps).sqrt();
            rstd.push(s);
            out.extend(row.iter().map(|&v| (v - mean) * s));
        }
        self.push(r, c, out, Op::LayerNorm { x, rstd })
    }

    /// Grouped single-head attention `softmax(q k^T / sqrt(d)) v`.
    ///
    /// `q` is `[groups * lq, d]`, `k` and `v` are `[groups * lk, d]`. Keys
    /// with `key_mask[g * lk + j] == false` receive zero weight; a query row
    /// whose keys are all masked yields zeros.
    pub fn attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        groups: usize,
        key_mask: Option<&[bool]>,
    ) -> Var {
        let (qr, d) = self.shape(q);
        let (kr, dk) = self.shape(k);
        assert_eq!(self.shape(v), (kr, dk));
        assert_eq!(d, dk);
        assert!(groups > 0 && qr % groups == 0 && kr % groups == 0);
        let lq = qr / groups;
        let lk = kr / groups;
        if let Some(m) = key_mask {
            assert_eq!(m.len(), kr);
        }
        let scale = F::one() / F::of(d as f64).sqrt();
        let mut probs = vec![F::zero(); groups * lq * lk];
        let mut out = vec![F::zero(); qr * d];
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        for g in 0..groups {
            let qs = &qv[g * lq * d..(g + 1) * lq * d];
            let ks = &kv[g * lk * d..(g + 1) * lk * d];
            let vs = &vv[g * lk * d..(g + 1) * lk * d];
            let p = &mut probs[g * lq * lk..(g + 1) * lq * lk];
            matmul(lq, d, lk, qs, false, ks, true, p, false);
            for row in p.chunks_mut(lk) {
                let mut mx = F::neg_infinity();
                for (j, s) in row.iter_mut().enumerate() {
                    *s *= scale;
                    if key_mask.is_none_or(|m| m[g * lk + j]) && *s > mx {
                        mx = *s;
                    }
                }
                if mx == F::neg_infinity() {
                    row.iter_mut().for_each(|s| *s = F::zero());
                    continue;
                }
                let mut total = F::zero();
                for (j, s) in row.iter_mut().enumerate() {
                    if key_mask.is_none_or(|m| m[g * lk + j]) {
                        *s = (*s - mx).exp();
                        total += *s;
                    } else {
                        *s = F::zero();
                    }
                }
                row.iter_mut().for_each(|s| *s = *s / total);
            }
            matmul(lq, lk, d, p, false, vs, false, &mut out[g * lq * d..(g + 1) * lq * d], false);
        }
        let saved = AttnSaved { q, k, v, groups, lq, lk, probs };
        self.push(qr, d, out, Op::Attention(Box::new(saved)))
    }

    pub fn gather(&mut self, x: Var, idx: Rc<Vec<usize>>) -> Var {
        let (r, c) = self.shape(x);
        let src = self.value(x);
        let mut out = Vec::with_capacity(idx.len() * c);
        for &i in idx.iter() {
            assert!(i < r, "gather index {i} out of {r} rows");
            out.extend_from_slice(&src[i * c..(i + 1) * c]);
        }
        self.push(idx.len(), c, out, Op::Gather { x, idx })
    }

    pub fn concat(&mut self, a: Var, b: Var) -> Var {
        let (ra, c) = self.shape(a);
        let (rb, cb) = self.shape(b);
        assert_eq!(c, cb, "concat cols");
        let mut out = Vec::with_capacity((ra + rb) * c);
        out.extend_from_slice(self.value(a));
        out.extend_from_slice(self.value(b));
        self.push(ra + rb, c, out, Op::Concat(a, b))
    }

    pub fn mse(&mut self, pred: Var, target: Rc<Vec<F>>) -> Var {
        let p = self.value(pred);
        assert_eq!(p.len(), target.len());
        let n = F::of(p.len() as f64);
        let loss = p.iter().zip(target.iter()).map(|(a, b)| (*a - *b) * (*a - *b)).sum::<F>() / n;
        self.push(1, 1, vec![loss], Op::Mse { pred, target })
    }

    pub fn backward(&self, root: Var) -> Grads<F> {
        let mut grads: Vec<Option<Vec<F>>> = (0..self.nodes.len()).map(|_| None).collect();
        let root_len = self.nodes[root.0].value.len();
        grads[root.0] = Some(vec![F::one(); root_len]);
        for id in (0..=root.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &self.nodes[id];
            match &node.op {
                Op::Leaf => {}
                Op::Linear { x, w, b } => {
                    let (n, m) = (node.rows, node.cols);
                    let k = self.nodes[x.0].cols;
                    let dx = acc(&mut grads, *x, n * k);
                    matmul(n, m, k, &g, false, &self.nodes[w.0].value, true, dx, true);
                    let dw = acc(&mut grads, *w, k * m);
                    matmul(k, n, m, &self.nodes[x.0].value, true, &g, false, dw, true);
                    if let Some(b) = b {
                        let db = acc(&mut grads, *b, m);
                        for row in g.chunks(m) {
                            for (d, r) in db.iter_mut().zip(row) {
                                *d += *r;
                            }
                        }
                    }
                }
                Op::Add(a, b) => {
                    add_into(acc(&mut grads, *a, g.len()), &g);
                    add_into(acc(&mut grads, *b, g.len()), &g);
                }
                Op::MulConst(x, c) => {
                    let dx = acc(&mut grads, *x, g.len());
                    for ((d, gi), ci) in dx.iter_mut().zip(&g).zip(c.iter()) {
                        *d += *gi * *ci;
                    }
                }
                Op::Mul(a, b) => {
                    let bv = self.nodes[b.0].value.clone();
                    let da = acc(&mut grads, *a, g.len());
                    for ((d, gi), y) in da.iter_mut().zip(&g).zip(&bv) {
                        *d += *gi * *y;
                    }
                    let av = self.nodes[a.0].value.clone();
                    let db = acc(&mut grads, *b, g.len());
                    for ((d, gi), x) in db.iter_mut().zip(&g).zip(&av) {
                        *d += *gi * *x;
                    }
                }
                Op::Silu(x) => {
                    let xv = &self.nodes[x.0].value;
                    let dx = acc(&mut grads, *x, g.len());
                    for ((d, gi), &v) in dx.iter_mut().zip(&g).zip(xv) {
                        let s = sigmoid(v);
                        *d += *gi * s * (F::one() + v * (F::one() - s));
                    }
                }
                Op::LayerNorm { x, rstd } => {
                    let c = node.cols;
                    let cf = F::of(c as f64);
                    let dx = acc(&mut grads, *x, g.len());
                    for (r, s) in rstd.iter().enumerate() {
                        let y = &node.value[r * c..(r + 1) * c];
                        let gy = &g[r * c..(r + 1) * c];
                        let mean_g = gy.iter().copied().sum::<F>() / cf;
                        let mean_gy = gy.iter().zip(y).map(|(a, b)| *a * *b).sum::<F>() / cf;
                        for j in 0..c {
                            dx[r * c + j] += *s * (gy[j] - mean_g - y[j] * mean_gy);
                        }
                    }
                }
                Op::Attention(saved) => self.attention_backward(saved, &g, &mut grads),
                Op::Gather { x, idx } => {
                    let c = node.cols;
                    let rows = self.nodes[x.0].rows;
                    let dx = acc(&mut grads, *x, rows * c);
                    for (o, &i) in idx.iter().enumerate() {
                        add_into(&mut dx[i * c..(i + 1) * c], &g[o * c..(o + 1) * c]);
                    }
                }
                Op::Concat(a, b) => {
                    let la = self.nodes[a.0].value.len();
                    add_into(acc(&mut grads, *a, la), &g[..la]);
                    let lb = g.len() - la;
                    add_into(acc(&mut grads, *b, lb), &g[la..]);
                }
                Op::Mse { pred, target } => {
                    let p = &self.nodes[pred.0].value;
                    let scale = g[0] * F::of(2.0) / F::of(p.len() as f64);
                    let dp = acc(&mut grads, *pred, p.len());
                    for ((d, a), b) in dp.iter_mut().zip(p).zip(target.iter()) {
                        *d += scale * (*a - *b);
                    }
                }
            }
            if matches!(node.op, Op::Leaf) {
                grads[id] = Some(g);
            }
        }
        Grads { grads }
    }

    fn attention_backward(&self, s: &AttnSaved<F>, g: &[F], grads: &mut [Option<Vec<F>>]) {
        let d = self.nodes[s.q.0].cols;
        let (lq, lk) = (s.lq, s.lk);
        let scale = F::one() / F::of(d as f64).sqrt();
        let qv = &self.nodes[s.q.0].value;
        let kv = &self.nodes[s.k.0].value;
        let vv = &self.nodes[s.v.0].value;
        let mut dq = vec![F::zero(); qv.len()];
        let mut dk = vec![F::zero(); kv.len()];
        let mut dv = vec![F::zero(); vv.len()];
        let mut dp = vec![F::zero(); lq * lk];
        for grp in 0..s.groups {
            let qo = grp * lq * d;
            let ko = grp * lk * d;
            let p = &s.probs[grp * lq * lk..(grp + 1) * lq * lk];
            let go = &g[qo..qo + lq * d];
            // dv = P^T dO
            matmul(lk, lq, d, p, true, go, false, &mut dv[ko..ko + lk * d], true);
            // dP = dO V^T
            matmul(lq, d, lk, go, false, &vv[ko..ko + lk * d], true, &mut dp, false);
            for (prow, drow) in p.chunks(lk).zip(dp.chunks_mut(lk)) {
                let dot = prow.iter().zip(drow.iter()).map(|(a, b)| *a * *b).sum::<F>();
                for (pj, dj) in prow.iter().zip(drow.iter_mut()) {
                    *dj = *pj * (*dj - dot) * scale;
                }
            }
            matmul(lq, lk, d, &dp, false, &kv[ko..ko + lk * d], false, &mut dq[qo..qo + lq * d], true);
            matmul(lk, lq, d, &dp, true, &qv[qo..qo + lq * d], false, &mut dk[ko..ko + lk * d], true);
        }
        add_into(acc(grads, s.q, dq.len()), &dq);
        add_into(acc(grads, s.k, dk.len()), &dk);
        add_into(acc(grads, s.v, dv.len()), &dv);
    }
}

fn sigmoid<F: Real>(x: F) -> F {
    F::one() / (F::one() + (-x).exp())
}

fn acc<F: Real>(grads: &mut [Option<Vec<F>>], v: Var, len: usize) -> &mut [F] {
    grads[v.0].get_or_insert_with(|| vec![F::zero(); len])
}

fn add_into<F: Real>(dst: &mut [F], src: &[F]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += *s;
    }
}
