//! Reverse-mode differentiation over [`Mat`] values.
//!
//! The op set is exactly what the toy denoiser needs. Forward values are
//! computed eagerly; `backward` walks the tape in reverse and only visits
//! nodes that depend on a trainable leaf.

use crate::tensor::{Mat, Scalar};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

enum Op<F> {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    /// `(n×c) + (1×c)` broadcast over rows.
    AddRow(Var, Var),
    /// Row `r` of the result is row `r % period` of the input.
    TileRows(Var, usize),
    Scale(Var, F),
    Gelu(Var),
    /// Per-row inverse RMS kept for the backward pass.
    RmsNorm(Var, Vec<F>),
    ConcatRows(Vec<Var>),
    SliceRows(Var, usize),
    /// Weighted sum of rows of a table: `Σ w_i · table[i]`.
    RowMix(Var, Vec<(usize, F)>),
    Attention {
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        /// heads × nq × nk softmax probabilities.
        probs: Vec<F>,
    },
    /// Pairwise rotation of each head's channels; `(cos, sin)` per row and pair.
    Rotary(Var, usize, Vec<(F, F)>),
    /// `⟨a, m⟩` with `m` a constant.
    DotConst(Var, Mat<F>),
    /// `mean((a − m)²)` with `m` a constant.
    MseConst(Var, Mat<F>),
}

struct Node<F> {
    value: Mat<F>,
    op: Op<F>,
    needs_grad: bool,
}

pub struct Tape<F> {
    nodes: Vec<Node<F>>,
}

pub struct Grads<F> {
    grads: Vec<Option<Mat<F>>>,
}

impl<F: Scalar> Grads<F> {
    pub fn get(&self, v: Var) -> Option<&Mat<F>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Gradient for `v`, or zeros of `shape` when `v` did not influence the loss.
    pub fn get_or_zeros(&self, v: Var, shape: (usize, usize)) -> Mat<F> {
        self.get(v)
            .cloned()
            .unwrap_or_else(|| Mat::zeros(shape.0, shape.1))
    }
}

const RMS_EPS: f64 = 1e-6;

fn gelu<F: Scalar>(x: F) -> F {
    let c = F::of((2.0 / std::f64::consts::PI).sqrt());
    let half = F::of(0.5);
    let inner = c * (x + F::of(0.044715) * x * x * x);
    half * x * (F::one() + inner.tanh())
}

fn gelu_grad<F: Scalar>(x: F) -> F {
    let c = F::of((2.0 / std::f64::consts::PI).sqrt());
    let half = F::of(0.5);
    let inner = c * (x + F::of(0.044715) * x * x * x);
    let th = inner.tanh();
    let d_inner = c * (F::one() + F::of(3.0 * 0.044715) * x * x);
    half * (F::one() + th) + half * x * (F::one() - th * th) * d_inner
}

impl<F: Scalar> Default for Tape<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Scalar> Tape<F> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Mat<F>, op: Op<F>, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn value(&self, v: Var) -> &Mat<F> {
        &self.nodes[v.0].value
    }

    /// Trainable leaf.
    pub fn param(&mut self, m: Mat<F>) -> Var {
        self.push(m, Op::Leaf, true)
    }

    pub fn constant(&mut self, m: Mat<F>) -> Var {
        self.push(m, Op::Leaf, false)
    }

    pub fn leaf(&mut self, m: Mat<F>, trainable: bool) -> Var {
        self.push(m, Op::Leaf, trainable)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).matmul(self.value(b));
        let ng = self.ng(a) || self.ng(b);
        self.push(v, Op::MatMul(a, b), ng)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).add(self.value(b));
        let ng = self.ng(a) || self.ng(b);
        self.push(v, Op::Add(a, b), ng)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).sub(self.value(b));
        let ng = self.ng(a) || self.ng(b);
        self.push(v, Op::Sub(a, b), ng)
    }

    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let am = self.value(a);
        let rm = self.value(row);
        assert_eq!(rm.rows(), 1, "add_row expects a single row");
        assert_eq!(am.cols(), rm.cols(), "add_row column mismatch");
        let r = rm.row(0).to_vec();
        let v = Mat::from_fn(am.rows(), am.cols(), |i, j| am.get(i, j) + r[j]);
        let ng = self.ng(a) || self.ng(row);
        self.push(v, Op::AddRow(a, row), ng)
    }

    pub fn tile_rows(&mut self, a: Var, total_rows: usize) -> Var {
        let am = self.value(a);
        let period = am.rows();
        assert!(period > 0 && total_rows % period == 0, "tile_rows period mismatch");
        let v = Mat::from_fn(total_rows, am.cols(), |i, j| am.get(i % period, j));
        let ng = self.ng(a);
        self.push(v, Op::TileRows(a, period), ng)
    }

    pub fn scale(&mut self, a: Var, s: F) -> Var {
        let v = self.value(a).scale(s);
        let ng = self.ng(a);
        self.push(v, Op::Scale(a, s), ng)
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let v = self.value(a).map(gelu);
        let ng = self.ng(a);
        self.push(v, Op::Gelu(a), ng)
    }

    /// Row-wise `x / sqrt(mean(x²) + eps)` without a learned gain.
    pub fn rms_norm(&mut self, a: Var) -> Var {
        let am = self.value(a);
        let (n, c) = am.shape();
        let mut inv = Vec::with_capacity(n);
        let mut out = Mat::zeros(n, c);
        for i in 0..n {
            let row = am.row(i);
            let ms = row.iter().fold(F::zero(), |acc, &x| acc + x * x) / F::of(c as f64);
            let r = F::one() / (ms + F::of(RMS_EPS)).sqrt();
            inv.push(r);
            for (o, &x) in out.row_mut(i).iter_mut().zip(row) {
                *o = x * r;
            }
        }
        let ng = self.ng(a);
        self.push(out, Op::RmsNorm(a, inv), ng)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let mats: Vec<&Mat<F>> = parts.iter().map(|&p| self.value(p)).collect();
        let v = Mat::concat_rows(&mats);
        let ng = parts.iter().any(|&p| self.ng(p));
        self.push(v, Op::ConcatRows(parts.to_vec()), ng)
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Var {
        let v = self.value(a).slice_rows(start, len);
        let ng = self.ng(a);
        self.push(v, Op::SliceRows(a, start), ng)
    }

    pub fn row_mix(&mut self, table: Var, weights: Vec<(usize, F)>) -> Var {
        let tm = self.value(table);
        let mut row = vec![F::zero(); tm.cols()];
        for &(i, w) in &weights {
            for (o, &x) in row.iter_mut().zip(tm.row(i)) {
                *o = *o + w * x;
            }
        }
        let cols = tm.cols();
        let ng = self.ng(table);
        self.push(Mat::new(1, cols, row), Op::RowMix(table, weights), ng)
    }

    /// Multi-head scaled dot-product attention. `visible(i, j)` gates query
    /// row `i` against key row `j`; every query row must see at least one key.
    pub fn attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        visible: impl Fn(usize, usize) -> bool,
    ) -> Var {
        let (out, probs) = {
            let qm = self.value(q);
            let km = self.value(k);
            let vm = self.value(v);
            attention_forward(qm, km, vm, heads, &visible)
        };
        let ng = self.ng(q) || self.ng(k) || self.ng(v);
        self.push(
            out,
            Op::Attention {
                q,
                k,
                v,
                heads,
                probs,
            },
            ng,
        )
    }

    /// Rotates channel pairs `(2j, 2j+1)` of every `head_dim`-wide head by
    /// `positions[r] · base^(−2j/head_dim)`.
    pub fn rotary(&mut self, a: Var, positions: &[f64], head_dim: usize, base: f64) -> Var {
        let cs = rotary_table(positions, head_dim, base);
        let out = rotate(self.value(a), head_dim, &cs, false);
        let ng = self.ng(a);
        self.push(out, Op::Rotary(a, head_dim, cs), ng)
    }

    /// Softmax probabilities (heads × nq × nk) recorded by an attention node.
    pub fn attention_probs(&self, node: Var) -> Option<&[F]> {
        match &self.nodes[node.0].op {
            Op::Attention { probs, .. } => Some(probs),
            _ => None,
        }
    }

    pub fn dot_const(&mut self, a: Var, m: Mat<F>) -> Var {
        let s = self.value(a).dot(&m);
        let ng = self.ng(a);
        self.push(Mat::new(1, 1, vec![s]), Op::DotConst(a, m), ng)
    }

    pub fn mse_const(&mut self, a: Var, target: Mat<F>) -> Var {
        let s = self.value(a).sub(&target).mean_square();
        let ng = self.ng(a);
        self.push(Mat::new(1, 1, vec![s]), Op::MseConst(a, target), ng)
    }

    pub fn scalar(&self, v: Var) -> F {
        let m = self.value(v);
        assert_eq!(m.shape(), (1, 1), "scalar() on non-scalar node");
        m.get(0, 0)
    }

    /// Gradients of the scalar node `loss` with respect to every node.
    pub fn backward(&self, loss: Var) -> Grads<F> {
        let mut grads: Vec<Option<Mat<F>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Mat::new(1, 1, vec![F::one()]));

        fn acc<F: Scalar>(grads: &mut [Option<Mat<F>>], v: Var, g: Mat<F>) {
            match &mut grads[v.0] {
                Some(existing) => existing.add_assign(&g),
                slot @ None => *slot = Some(g),
            }
        }

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            match &node.op {
                Op::Leaf => {
                    grads[idx] = Some(g);
                    continue;
                }
                Op::MatMul(a, b) => {
                    if self.ng(*a) {
                        acc(&mut grads, *a, g.matmul_nt(self.value(*b)));
                    }
                    if self.ng(*b) {
                        acc(&mut grads, *b, self.value(*a).matmul_tn(&g));
                    }
                }
                Op::Add(a, b) => {
                    if self.ng(*a) {
                        acc(&mut grads, *a, g.clone());
                    }
                    if self.ng(*b) {
                        acc(&mut grads, *b, g.clone());
                    }
                }
                Op::Sub(a, b) => {
                    if self.ng(*a) {
                        acc(&mut grads, *a, g.clone());
                    }
                    if self.ng(*b) {
                        acc(&mut grads, *b, g.scale(-F::one()));
                    }
                }
                Op::AddRow(a, row) => {
                    if self.ng(*a) {
                        acc(&mut grads, *a, g.clone());
                    }
                    if self.ng(*row) {
                        let mut r = Mat::zeros(1, g.cols());
                        for i in 0..g.rows() {
                            for (o, &x) in r.row_mut(0).iter_mut().zip(g.row(i)) {
                                *o = *o + x;
                            }
                        }
                        acc(&mut grads, *row, r);
                    }
                }
                Op::TileRows(a, period) => {
                    let mut r = Mat::zeros(*period, g.cols());
                    for i in 0..g.rows() {
                        for (o, &x) in r.row_mut(i % period).iter_mut().zip(g.row(i)) {
                            *o = *o + x;
                        }
                    }
                    acc(&mut grads, *a, r);
                }
                Op::Scale(a, s) => acc(&mut grads, *a, g.scale(*s)),
                Op::Gelu(a) => {
                    let x = self.value(*a);
                    acc(&mut grads, *a, g.zip_map(x, |gi, xi| gi * gelu_grad(xi)));
                }
                Op::RmsNorm(a, inv) => {
                    let y = &node.value;
                    let (n, c) = y.shape();
                    let mut dx = Mat::zeros(n, c);
                    for i in 0..n {
                        let gy = g.row(i);
                        let yr = y.row(i);
                        let proj = gy.iter().zip(yr).fold(F::zero(), |s, (&a, &b)| s + a * b)
                            / F::of(c as f64);
                        for ((o, &gi), &yi) in dx.row_mut(i).iter_mut().zip(gy).zip(yr) {
                            *o = inv[i] * (gi - yi * proj);
                        }
                    }
                    acc(&mut grads, *a, dx);
                }
                Op::ConcatRows(parts) => {
                    let mut start = 0;
                    for p in parts {
                        let rows = self.value(*p).rows();
                        if self.ng(*p) {
                            acc(&mut grads, *p, g.slice_rows(start, rows));
                        }
                        start += rows;
                    }
                }
                Op::SliceRows(a, start) => {
                    let (ar, ac) = self.value(*a).shape();
                    let mut full = Mat::zeros(ar, ac);
                    for i in 0..g.rows() {
                        full.row_mut(start + i).copy_from_slice(g.row(i));
                    }
                    acc(&mut grads, *a, full);
                }
                Op::RowMix(table, weights) => {
                    let (tr, tc) = self.value(*table).shape();
                    let mut dt = Mat::zeros(tr, tc);
                    for &(i, w) in weights {
                        for (o, &x) in dt.row_mut(i).iter_mut().zip(g.row(0)) {
                            *o = *o + w * x;
                        }
                    }
                    acc(&mut grads, *table, dt);
                }
                Op::Attention {
                    q,
                    k,
                    v,
                    heads,
                    probs,
                } => {
                    let (dq, dk, dv) = attention_backward(
                        self.value(*q),
                        self.value(*k),
                        self.value(*v),
                        *heads,
                        probs,
                        &g,
                    );
                    if self.ng(*q) {
                        acc(&mut grads, *q, dq);
                    }
                    if self.ng(*k) {
                        acc(&mut grads, *k, dk);
                    }
                    if self.ng(*v) {
                        acc(&mut grads, *v, dv);
                    }
                }
                Op::Rotary(a, head_dim, cs) => {
                    acc(&mut grads, *a, rotate(&g, *head_dim, cs, true));
                }
                Op::DotConst(a, m) => {
                    acc(&mut grads, *a, m.scale(g.get(0, 0)));
                }
                Op::MseConst(a, target) => {
                    let x = self.value(*a);
                    let n = F::of((x.rows() * x.cols()) as f64);
                    let s = g.get(0, 0) * F::of(2.0) / n;
                    acc(&mut grads, *a, x.sub(target).scale(s));
                }
            }
        }
        Grads { grads }
    }
}

fn rotary_table<F: Scalar>(positions: &[f64], head_dim: usize, base: f64) -> Vec<(F, F)> {
    assert!(head_dim % 2 == 0, "rotary head width must be even");
    let half = head_dim / 2;
    positions
        .iter()
        .flat_map(|&p| {
            (0..half).map(move |j| {
                let angle = p * base.powf(-2.0 * j as f64 / head_dim as f64);
                (F::of(angle.cos()), F::of(angle.sin()))
            })
        })
        .collect()
}

fn rotate<F: Scalar>(m: &Mat<F>, head_dim: usize, cs: &[(F, F)], inverse: bool) -> Mat<F> {
    let half = head_dim / 2;
    let (rows, cols) = m.shape();
    assert_eq!(cols % head_dim, 0, "rotary head width must divide the row width");
    assert_eq!(cs.len(), rows * half, "one rotary position per row");
    let mut out = m.clone();
    for r in 0..rows {
        let row = out.row_mut(r);
        for h in 0..cols / head_dim {
            for j in 0..half {
                let (c, s) = cs[r * half + j];
                let s = if inverse { -s } else { s };
                let i = h * head_dim + 2 * j;
                let (x0, x1) = (row[i], row[i + 1]);
                row[i] = x0 * c - x1 * s;
                row[i + 1] = x0 * s + x1 * c;
            }
        }
    }
    out
}

fn attention_forward<F: Scalar>(
    q: &Mat<F>,
    k: &Mat<F>,
    v: &Mat<F>,
    heads: usize,
    visible: &dyn Fn(usize, usize) -> bool,
) -> (Mat<F>, Vec<F>) {
    let (nq, c) = q.shape();
    let nk = k.rows();
    assert_eq!(k.cols(), c, "attention key width mismatch");
    assert_eq!(v.shape(), (nk, c), "attention value shape mismatch");
    assert!(heads > 0 && c % heads == 0, "channels must divide into heads");
    let d = c / heads;
    let scale = F::one() / F::of(d as f64).sqrt();
    let mut out = Mat::zeros(nq, c);
    let mut probs = vec![F::zero(); heads * nq * nk];
    let mut scores = vec![F::zero(); nk];
    for h in 0..heads {
        let cols = h * d..(h + 1) * d;
        for i in 0..nq {
            let qi = &q.row(i)[cols.clone()];
            let mut max = F::neg_infinity();
            for j in 0..nk {
                if visible(i, j) {
                    let kj = &k.row(j)[cols.clone()];
                    let s = qi.iter().zip(kj).fold(F::zero(), |a, (&x, &y)| a + x * y) * scale;
                    scores[j] = s;
                    if s > max {
                        max = s;
                    }
                } else {
                    scores[j] = F::neg_infinity();
                }
            }
            assert!(max.is_finite(), "attention row {i} has no visible keys");
            let mut sum = F::zero();
            for s in scores.iter_mut() {
                *s = if s.is_finite() { (*s - max).exp() } else { F::zero() };
                sum = sum + *s;
            }
            let p_row = &mut probs[(h * nq + i) * nk..(h * nq + i + 1) * nk];
            for (p, &s) in p_row.iter_mut().zip(&scores) {
                *p = s / sum;
            }
            let o_row = &mut out.row_mut(i)[cols.clone()];
            for (j, &p) in p_row.iter().enumerate() {
                if p == F::zero() {
                    continue;
                }
                let vj = &v.row(j)[cols.clone()];
                for (o, &x) in o_row.iter_mut().zip(vj) {
                    *o = *o + p * x;
                }
            }
        }
    }
    (out, probs)
}

fn attention_backward<F: Scalar>(
    q: &Mat<F>,
    k: &Mat<F>,
    v: &Mat<F>,
    heads: usize,
    probs: &[F],
    g: &Mat<F>,
) -> (Mat<F>, Mat<F>, Mat<F>) {
    let (nq, c) = q.shape();
    let nk = k.rows();
    let d = c / heads;
    let scale = F::one() / F::of(d as f64).sqrt();
    let mut dq = Mat::zeros(nq, c);
    let mut dk = Mat::zeros(nk, c);
    let mut dv = Mat::zeros(nk, c);
    let mut dp = vec![F::zero(); nk];
    for h in 0..heads {
        let off = h * d;
        for i in 0..nq {
            let p_row = &probs[(h * nq + i) * nk..(h * nq + i + 1) * nk];
            let gi = &g.row(i)[off..off + d];
            let mut dot = F::zero();
            for j in 0..nk {
                let vj = &v.row(j)[off..off + d];
                dp[j] = gi.iter().zip(vj).fold(F::zero(), |a, (&x, &y)| a + x * y);
                dot = dot + dp[j] * p_row[j];
            }
            for j in 0..nk {
                let p = p_row[j];
                if p == F::zero() {
                    continue;
                }
                for (o, &x) in dv.row_mut(j)[off..off + d].iter_mut().zip(gi) {
                    *o = *o + p * x;
                }
                let ds = p * (dp[j] - dot) * scale;
                let kj = k.row(j)[off..off + d].to_vec();
                for (o, &x) in dq.row_mut(i)[off..off + d].iter_mut().zip(&kj) {
                    *o = *o + ds * x;
                }
                let qi = q.row(i)[off..off + d].to_vec();
                for (o, &x) in dk.row_mut(j)[off..off + d].iter_mut().zip(&qi) {
                    *o = *o + ds * x;
                }
            }
        }
    }
    (dq, dk, dv)
}
