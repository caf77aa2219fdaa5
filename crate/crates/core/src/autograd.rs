//! Reverse-mode automatic differentiation over dense row-major matrices.
//!
//! A [`Graph`] is built fresh for every forward pass. Nodes are appended in
//! evaluation order, so the backward sweep is a plain reverse iteration.
//! Every value is a 2-D matrix; vectors are `1 x n` or `n x 1`.

use std::collections::HashMap;

use ndarray::{concatenate, s, Array2, ArrayView2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::params::{Grads, ParamId, ParamStore};
use crate::scalar::Scalar;

/// Handle to a node of a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug, Clone)]
enum Op<T> {
    Leaf,
    Param(ParamId),
    MatMul(Var, Var),
    /// `a * b^T`
    MatMulBt(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    /// `a (r x c) + b (1 x c)` broadcast over rows.
    AddRow(Var, Var),
    /// `a (r x c) * b (1 x c)` broadcast over rows.
    MulRow(Var, Var),
    /// `a (r x c) + b (r x 1)` broadcast over columns.
    AddCol(Var, Var),
    /// `a (r x c) * b (r x 1)` broadcast over columns.
    MulCol(Var, Var),
    Scale(Var, T),
    AddScalar(Var),
    Sigmoid(Var),
    Tanh(Var),
    Relu(Var),
    Exp(Var),
    Log(Var),
    Sqrt(Var),
    Recip(Var),
    Square(Var),
    Clamp(Var, T, T),
    SoftmaxRows(Var),
    LogSoftmaxRows(Var),
    SumAll(Var),
    /// Row sums, `r x 1`.
    SumRows(Var),
    /// Column sums, `1 x c`.
    SumCols(Var),
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    SliceRows(Var, usize),
    SliceCols(Var, usize),
    GatherRows(Var, Vec<usize>),
    /// `out[i] = a[i, idx[i]]`, `r x 1`.
    Pick(Var, Vec<usize>),
}

struct Node<T> {
    value: Array2<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Computation tape.
pub struct Graph<'s, T: Scalar> {
    store: Option<&'s ParamStore<T>>,
    nodes: Vec<Node<T>>,
    param_nodes: HashMap<ParamId, Var>,
    train: bool,
    rng: ChaCha8Rng,
}

impl<T: Scalar> Graph<'static, T> {
    /// Graph without parameters, for free-standing loss computations.
    pub fn detached() -> Self {
        Graph {
            store: None,
            nodes: Vec::new(),
            param_nodes: HashMap::new(),
            train: false,
            rng: ChaCha8Rng::seed_from_u64(0),
        }
    }
}

impl<'s, T: Scalar> Graph<'s, T> {
    /// Evaluation-mode graph over `store` (dropout off).
    pub fn new(store: &'s ParamStore<T>) -> Self {
        Graph {
            store: Some(store),
            nodes: Vec::new(),
            param_nodes: HashMap::new(),
            train: false,
            rng: ChaCha8Rng::seed_from_u64(0),
        }
    }

    /// Training-mode graph; `seed` drives dropout masks and latent noise.
    pub fn training(store: &'s ParamStore<T>, seed: u64) -> Self {
        Graph {
            train: true,
            rng: ChaCha8Rng::seed_from_u64(seed),
            ..Graph::new(store)
        }
    }

    pub fn is_training(&self) -> bool {
        self.train
    }

    pub fn rng(&mut self) -> &mut ChaCha8Rng {
        &mut self.rng
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Array2<T> {
        &self.nodes[v.0].value
    }

    /// Value of a `1 x 1` node.
    pub fn scalar(&self, v: Var) -> T {
        let m = self.value(v);
        debug_assert_eq!(m.dim(), (1, 1));
        m[[0, 0]]
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.value(v).dim()
    }

    fn push(&mut self, value: Array2<T>, op: Op<T>, needs_grad: bool) -> Var {
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

    /// Differentiable leaf (gradients available through [`Gradients::wrt`]).
    pub fn input(&mut self, value: Array2<T>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Non-differentiable leaf.
    pub fn constant(&mut self, value: Array2<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(&v) = self.param_nodes.get(&id) {
            return v;
        }
        let store = self.store.expect("graph has no parameter store");
        let v = self.push(store.get(id).clone(), Op::Param(id), true);
        self.param_nodes.insert(id, v);
        v
    }

    /// `rows x cols` standard-normal draw from the graph's generator.
    pub fn normal(&mut self, rows: usize, cols: usize) -> Var {
        let rng = &mut self.rng;
        let value = Array2::from_shape_fn((rows, cols), |_| {
            T::of(rng.sample::<f64, _>(StandardNormal))
        });
        self.constant(value)
    }

    /// Inverted dropout; identity outside training mode.
    pub fn dropout(&mut self, x: Var, p: f64) -> Var {
        if !self.train || p <= 0.0 {
            return x;
        }
        let (r, c) = self.shape(x);
        let keep = 1.0 - p;
        let scale = T::of(1.0 / keep);
        let rng = &mut self.rng;
        let mask = Array2::from_shape_fn((r, c), |_| {
            if rng.random::<f64>() < keep {
                scale
            } else {
                T::zero()
            }
        });
        let m = self.constant(mask);
        self.mul(x, m)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).dot(self.value(b));
        let ng = self.ng(a) || self.ng(b);
        self.push(v, Op::MatMul(a, b), ng)
    }

    pub fn matmul_bt(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).dot(&self.value(b).t());
        let ng = self.ng(a) || self.ng(b);
        self.push(v, Op::MatMulBt(a, b), ng)
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let v = self.value(a).t().to_owned();
        let ng = self.ng(a);
        self.push(v, Op::Transpose(a), ng)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "add: shape mismatch");
        let v = self.value(a) + self.value(b);
        let ng = self.ng(a) || self.ng(b);
        self.push(v, Op::Add(a, b), ng)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "sub: shape mismatch");
        let v = self.value(a) - self.value(b);
        let ng = self.ng(a) || self.ng(b);
        self.push(v, Op::Sub(a, b), ng)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "mul: shape mismatch");
        let v = self.value(a) * self.value(b);
        let ng = self.ng(a) || self.ng(b);
        self.push(v, Op::Mul(a, b), ng)
    }

    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let (_, c) = self.shape(a);
        assert_eq!(self.shape(row), (1, c), "add_row: expected 1 x {c}");
        let v = self.value(a) + self.value(row);
        let ng = self.ng(a) || self.ng(row);
        self.push(v, Op::AddRow(a, row), ng)
    }

    pub fn mul_row(&mut self, a: Var, row: Var) -> Var {
        let (_, c) = self.shape(a);
        assert_eq!(self.shape(row), (1, c), "mul_row: expected 1 x {c}");
        let v = self.value(a) * self.value(row);
        let ng = self.ng(a) || self.ng(row);
        self.push(v, Op::MulRow(a, row), ng)
    }

    pub fn add_col(&mut self, a: Var, col: Var) -> Var {
        let (r, _) = self.shape(a);
        assert_eq!(self.shape(col), (r, 1), "add_col: expected {r} x 1");
        let v = self.value(a) + self.value(col);
        let ng = self.ng(a) || self.ng(col);
        self.push(v, Op::AddCol(a, col), ng)
    }

    pub fn mul_col(&mut self, a: Var, col: Var) -> Var {
        let (r, _) = self.shape(a);
        assert_eq!(self.shape(col), (r, 1), "mul_col: expected {r} x 1");
        let v = self.value(a) * self.value(col);
        let ng = self.ng(a) || self.ng(col);
        self.push(v, Op::MulCol(a, col), ng)
    }

    pub fn scale(&mut self, a: Var, s: T) -> Var {
        let v = self.value(a) * s;
        let ng = self.ng(a);
        self.push(v, Op::Scale(a, s), ng)
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.scale(a, -T::one())
    }

    pub fn add_scalar(&mut self, a: Var, s: T) -> Var {
        let v = self.value(a) + s;
        let ng = self.ng(a);
        self.push(v, Op::AddScalar(a), ng)
    }

    fn unary(&mut self, a: Var, f: impl Fn(T) -> T, op: Op<T>) -> Var {
        let v = self.value(a).mapv(f);
        let ng = self.ng(a);
        self.push(v, op, ng)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, sigmoid, Op::Sigmoid(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, |x| x.tanh(), Op::Tanh(a))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, |x| x.max(T::zero()), Op::Relu(a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, |x| x.exp(), Op::Exp(a))
    }

    pub fn log(&mut self, a: Var) -> Var {
        self.unary(a, |x| x.ln(), Op::Log(a))
    }

    pub fn sqrt(&mut self, a: Var) -> Var {
        self.unary(a, |x| x.sqrt(), Op::Sqrt(a))
    }

    pub fn recip(&mut self, a: Var) -> Var {
        self.unary(a, |x| x.recip(), Op::Recip(a))
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.unary(a, |x| x * x, Op::Square(a))
    }

    /// Clamp into `[lo, hi]`; the gradient is zero outside the interval.
    pub fn clamp(&mut self, a: Var, lo: T, hi: T) -> Var {
        self.unary(a, |x| x.max(lo).min(hi), Op::Clamp(a, lo, hi))
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let v = softmax_rows(self.value(a).view());
        let ng = self.ng(a);
        self.push(v, Op::SoftmaxRows(a), ng)
    }

    pub fn log_softmax_rows(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let mut v = x.clone();
        for mut row in v.rows_mut() {
            let m = row.fold(T::neg_infinity(), |m, &x| m.max(x));
            let lse = row.iter().map(|&x| (x - m).exp()).sum::<T>().ln() + m;
            row.mapv_inplace(|x| x - lse);
        }
        let ng = self.ng(a);
        self.push(v, Op::LogSoftmaxRows(a), ng)
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let s = self.value(a).sum();
        let ng = self.ng(a);
        self.push(Array2::from_elem((1, 1), s), Op::SumAll(a), ng)
    }

    pub fn mean_all(&mut self, a: Var) -> Var {
        let n = self.value(a).len();
        let s = self.sum_all(a);
        self.scale(s, T::one() / T::of(n as f64))
    }

    pub fn sum_rows(&mut self, a: Var) -> Var {
        let v = self.value(a).sum_axis(Axis(1)).insert_axis(Axis(1));
        let ng = self.ng(a);
        self.push(v, Op::SumRows(a), ng)
    }

    pub fn sum_cols(&mut self, a: Var) -> Var {
        let v = self.value(a).sum_axis(Axis(0)).insert_axis(Axis(0));
        let ng = self.ng(a);
        self.push(v, Op::SumCols(a), ng)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "concat_rows: no inputs");
        if parts.len() == 1 {
            return parts[0];
        }
        let views: Vec<ArrayView2<T>> = parts.iter().map(|&p| self.value(p).view()).collect();
        let v = concatenate(Axis(0), &views).expect("concat_rows: column mismatch");
        let ng = parts.iter().any(|&p| self.ng(p));
        self.push(v, Op::ConcatRows(parts.to_vec()), ng)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "concat_cols: no inputs");
        if parts.len() == 1 {
            return parts[0];
        }
        let views: Vec<ArrayView2<T>> = parts.iter().map(|&p| self.value(p).view()).collect();
        let v = concatenate(Axis(1), &views).expect("concat_cols: row mismatch");
        let ng = parts.iter().any(|&p| self.ng(p));
        self.push(v, Op::ConcatCols(parts.to_vec()), ng)
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Var {
        let v = self.value(a).slice(s![start..start + len, ..]).to_owned();
        let ng = self.ng(a);
        self.push(v, Op::SliceRows(a, start), ng)
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Var {
        let v = self.value(a).slice(s![.., start..start + len]).to_owned();
        let ng = self.ng(a);
        self.push(v, Op::SliceCols(a, start), ng)
    }

    /// Row gather; indices may repeat (embedding lookup, broadcasting).
    pub fn gather_rows(&mut self, a: Var, idx: &[usize]) -> Var {
        let v = self.value(a).select(Axis(0), idx);
        let ng = self.ng(a);
        self.push(v, Op::GatherRows(a, idx.to_vec()), ng)
    }

    pub fn pick(&mut self, a: Var, idx: &[usize]) -> Var {
        let x = self.value(a);
        assert_eq!(x.nrows(), idx.len(), "pick: one index per row");
        let v = Array2::from_shape_fn((idx.len(), 1), |(i, _)| x[[i, idx[i]]]);
        let ng = self.ng(a);
        self.push(v, Op::Pick(a, idx.to_vec()), ng)
    }

    /// Rows scaled to unit L2 norm (`eps` guards the zero row).
    pub fn l2_normalize_rows(&mut self, a: Var, eps: T) -> Var {
        let sq = self.square(a);
        let ss = self.sum_rows(sq);
        let ss = self.add_scalar(ss, eps);
        let n = self.sqrt(ss);
        let inv = self.recip(n);
        self.mul_col(a, inv)
    }

    /// Mean over rows, `1 x c`.
    pub fn mean_rows(&mut self, a: Var) -> Var {
        let r = self.shape(a).0;
        let s = self.sum_cols(a);
        self.scale(s, T::one() / T::of(r as f64))
    }

    /// Reverse sweep from a `1 x 1` node.
    pub fn backward(&self, root: Var) -> Gradients<T> {
        assert_eq!(self.shape(root), (1, 1), "backward needs a scalar root");
        let n = self.nodes.len();
        let mut grads: Vec<Option<Array2<T>>> = vec![None; n];
        grads[root.0] = Some(Array2::from_elem((1, 1), T::one()));
        let n_params = self.store.map_or(0, |s| s.len());
        let mut params = Grads::empty(n_params);

        for i in (0..=root.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let val = &node.value;
            match &node.op {
                Op::Leaf => grads[i] = Some(g),
                Op::Param(id) => params.accumulate(*id, &g),
                Op::MatMul(a, b) => {
                    if self.ng(*a) {
                        let ga = g.dot(&self.value(*b).t());
                        acc(&mut grads, *a, ga);
                    }
                    if self.ng(*b) {
                        let gb = self.value(*a).t().dot(&g);
                        acc(&mut grads, *b, gb);
                    }
                }
                Op::MatMulBt(a, b) => {
                    if self.ng(*a) {
                        let ga = g.dot(self.value(*b));
                        acc(&mut grads, *a, ga);
                    }
                    if self.ng(*b) {
                        let gb = g.t().dot(self.value(*a));
                        acc(&mut grads, *b, gb);
                    }
                }
                Op::Transpose(a) => acc(&mut grads, *a, g.t().to_owned()),
                Op::Add(a, b) => {
                    if self.ng(*b) {
                        acc(&mut grads, *b, g.clone());
                    }
                    acc(&mut grads, *a, g);
                }
                Op::Sub(a, b) => {
                    if self.ng(*b) {
                        acc(&mut grads, *b, g.mapv(|x| -x));
                    }
                    acc(&mut grads, *a, g);
                }
                Op::Mul(a, b) => {
                    if self.ng(*a) {
                        acc(&mut grads, *a, &g * self.value(*b));
                    }
                    if self.ng(*b) {
                        acc(&mut grads, *b, &g * self.value(*a));
                    }
                }
                Op::AddRow(a, r) => {
                    if self.ng(*r) {
                        acc(&mut grads, *r, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
                    }
                    acc(&mut grads, *a, g);
                }
                Op::MulRow(a, r) => {
                    if self.ng(*a) {
                        acc(&mut grads, *a, &g * self.value(*r));
                    }
                    if self.ng(*r) {
                        let gr = (&g * self.value(*a)).sum_axis(Axis(0)).insert_axis(Axis(0));
                        acc(&mut grads, *r, gr);
                    }
                }
                Op::AddCol(a, c) => {
                    if self.ng(*c) {
                        acc(&mut grads, *c, g.sum_axis(Axis(1)).insert_axis(Axis(1)));
                    }
                    acc(&mut grads, *a, g);
                }
                Op::MulCol(a, c) => {
                    if self.ng(*a) {
                        acc(&mut grads, *a, &g * self.value(*c));
                    }
                    if self.ng(*c) {
                        let gc = (&g * self.value(*a)).sum_axis(Axis(1)).insert_axis(Axis(1));
                        acc(&mut grads, *c, gc);
                    }
                }
                Op::Scale(a, s) => acc(&mut grads, *a, g * *s),
                Op::AddScalar(a) => acc(&mut grads, *a, g),
                Op::Sigmoid(a) => {
                    let d = val.mapv(|y| y * (T::one() - y));
                    acc(&mut grads, *a, g * d);
                }
                Op::Tanh(a) => {
                    let d = val.mapv(|y| T::one() - y * y);
                    acc(&mut grads, *a, g * d);
                }
                Op::Relu(a) => {
                    let d = self.value(*a).mapv(|x| if x > T::zero() { T::one() } else { T::zero() });
                    acc(&mut grads, *a, g * d);
                }
                Op::Exp(a) => acc(&mut grads, *a, g * val),
                Op::Log(a) => acc(&mut grads, *a, g / self.value(*a)),
                Op::Sqrt(a) => {
                    let half = T::of(0.5);
                    let d = val.mapv(|y| half / y);
                    acc(&mut grads, *a, g * d);
                }
                Op::Recip(a) => {
                    let d = val.mapv(|y| -(y * y));
                    acc(&mut grads, *a, g * d);
                }
                Op::Square(a) => {
                    let two = T::of(2.0);
                    let d = self.value(*a).mapv(|x| two * x);
                    acc(&mut grads, *a, g * d);
                }
                Op::Clamp(a, lo, hi) => {
                    let d = self
                        .value(*a)
                        .mapv(|x| if x >= *lo && x <= *hi { T::one() } else { T::zero() });
                    acc(&mut grads, *a, g * d);
                }
                Op::SoftmaxRows(a) => {
                    let gy = &g * val;
                    let dot = gy.sum_axis(Axis(1)).insert_axis(Axis(1));
                    let ga = gy - &(val * &dot);
                    acc(&mut grads, *a, ga);
                }
                Op::LogSoftmaxRows(a) => {
                    let sm = val.mapv(|y| y.exp());
                    let gsum = g.sum_axis(Axis(1)).insert_axis(Axis(1));
                    let ga = g - &(sm * &gsum);
                    acc(&mut grads, *a, ga);
                }
                Op::SumAll(a) => {
                    let gs = g[[0, 0]];
                    let ga = Array2::from_elem(self.shape(*a), gs);
                    acc(&mut grads, *a, ga);
                }
                Op::SumRows(a) => {
                    let (r, c) = self.shape(*a);
                    let ga = g.broadcast((r, c)).expect("r x 1 broadcast").to_owned();
                    acc(&mut grads, *a, ga);
                }
                Op::SumCols(a) => {
                    let (r, c) = self.shape(*a);
                    let ga = g.broadcast((r, c)).expect("1 x c broadcast").to_owned();
                    acc(&mut grads, *a, ga);
                }
                Op::ConcatRows(parts) => {
                    let mut off = 0;
                    for &p in parts {
                        let r = self.shape(p).0;
                        if self.ng(p) {
                            acc(&mut grads, p, g.slice(s![off..off + r, ..]).to_owned());
                        }
                        off += r;
                    }
                }
                Op::ConcatCols(parts) => {
                    let mut off = 0;
                    for &p in parts {
                        let c = self.shape(p).1;
                        if self.ng(p) {
                            acc(&mut grads, p, g.slice(s![.., off..off + c]).to_owned());
                        }
                        off += c;
                    }
                }
                Op::SliceRows(a, start) => {
                    let mut ga = Array2::zeros(self.shape(*a));
                    let r = g.nrows();
                    ga.slice_mut(s![*start..*start + r, ..]).assign(&g);
                    acc(&mut grads, *a, ga);
                }
                Op::SliceCols(a, start) => {
                    let mut ga = Array2::zeros(self.shape(*a));
                    let c = g.ncols();
                    ga.slice_mut(s![.., *start..*start + c]).assign(&g);
                    acc(&mut grads, *a, ga);
                }
                Op::GatherRows(a, idx) => {
                    let mut ga = Array2::<T>::zeros(self.shape(*a));
                    for (row, &src) in idx.iter().enumerate() {
                        let mut dst = ga.row_mut(src);
                        dst += &g.row(row);
                    }
                    acc(&mut grads, *a, ga);
                }
                Op::Pick(a, idx) => {
                    let mut ga = Array2::<T>::zeros(self.shape(*a));
                    for (row, &col) in idx.iter().enumerate() {
                        ga[[row, col]] += g[[row, 0]];
                    }
                    acc(&mut grads, *a, ga);
                }
            }
        }
        Gradients { nodes: grads, params }
    }
}

fn acc<T: Scalar>(grads: &mut [Option<Array2<T>>], v: Var, g: Array2<T>) {
    match &mut grads[v.0] {
        Some(existing) => *existing += &g,
        slot @ None => *slot = Some(g),
    }
}

#[inline]
pub(crate) fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

pub(crate) fn softmax_rows<T: Scalar>(x: ArrayView2<T>) -> Array2<T> {
    let mut v = x.to_owned();
    for mut row in v.rows_mut() {
        let m = row.fold(T::neg_infinity(), |m, &x| m.max(x));
        row.mapv_inplace(|x| (x - m).exp());
        let s = row.sum();
        row.mapv_inplace(|x| x / s);
    }
    v
}

/// Result of [`Graph::backward`].
pub struct Gradients<T> {
    nodes: Vec<Option<Array2<T>>>,
    params: Grads<T>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient with respect to a leaf created by [`Graph::input`].
    ///
    /// Only leaves keep their gradient after the sweep; interior nodes are
    /// consumed as the sweep passes them.
    pub fn wrt(&self, v: Var) -> Option<&Array2<T>> {
        self.nodes[v.0].as_ref()
    }

    pub fn params(&self) -> &Grads<T> {
        &self.params
    }

    pub fn into_params(self) -> Grads<T> {
        self.params
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    /// Central finite differences of `f` at every coordinate of `x`.
    fn numeric_grad(f: &dyn Fn(&Array2<f64>) -> f64, x: &Array2<f64>) -> Array2<f64> {
        let h = 1e-5;
        let mut g = Array2::zeros(x.dim());
        for idx in ndarray::indices(x.dim()) {
            let mut xp = x.clone();
            xp[idx] += h;
            let mut xm = x.clone();
            xm[idx] -= h;
            g[idx] = (f(&xp) - f(&xm)) / (2.0 * h);
        }
        g
    }

    fn check(build: &dyn Fn(&mut Graph<'static, f64>, Var) -> Var, x: Array2<f64>) {
        let mut g = Graph::detached();
        let xv = g.input(x.clone());
        let out = build(&mut g, xv);
        let grads = g.backward(out);
        let analytic = grads.wrt(xv).cloned().unwrap_or_else(|| Array2::zeros(x.dim()));
        let f = |p: &Array2<f64>| {
            let mut g = Graph::detached();
            let v = g.input(p.clone());
            let o = build(&mut g, v);
            g.scalar(o)
        };
        let numeric = numeric_grad(&f, &x);
        for (a, n) in analytic.iter().zip(numeric.iter()) {
            let denom = a.abs().max(n.abs()).max(1e-6);
            assert!((a - n).abs() / denom < 1e-5, "analytic {a} vs numeric {n}");
        }
    }

    fn sample() -> Array2<f64> {
        array![[0.3, -1.2, 0.7], [1.1, 0.4, -0.5]]
    }

    #[test]
    fn elementwise_ops() {
        check(&|g, x| { let y = g.sigmoid(x); g.sum_all(y) }, sample());
        check(&|g, x| { let y = g.tanh(x); let y = g.square(y); g.sum_all(y) }, sample());
        check(&|g, x| { let y = g.exp(x); let y = g.log(y); let y = g.mul(y, x); g.sum_all(y) }, sample());
        check(&|g, x| { let y = g.square(x); let y = g.add_scalar(y, 0.5); let y = g.sqrt(y); let y = g.recip(y); g.sum_all(y) }, sample());
        check(&|g, x| { let y = g.relu(x); let y = g.mul(y, x); g.sum_all(y) }, sample());
        check(&|g, x| { let y = g.clamp(x, -0.6, 0.8); let y = g.mul(y, x); g.sum_all(y) }, sample());
    }

    #[test]
    fn matrix_ops() {
        let w = array![[0.2, -0.4], [0.5, 0.1], [-0.3, 0.9]];
        check(&|g, x| { let w = g.constant(w.clone()); let y = g.matmul(x, w); let y = g.square(y); g.sum_all(y) }, sample());
        check(&|g, x| { let y = g.matmul_bt(x, x); let y = g.square(y); g.sum_all(y) }, sample());
        check(&|g, x| { let t = g.transpose(x); let y = g.matmul(x, t); let y = g.tanh(y); g.sum_all(y) }, sample());
    }

    #[test]
    fn broadcast_and_reductions() {
        check(&|g, x| { let r = g.slice_rows(x, 0, 1); let y = g.mul_row(x, r); let y = g.add_row(y, r); let y = g.square(y); g.sum_all(y) }, sample());
        check(&|g, x| { let c = g.slice_cols(x, 1, 1); let y = g.mul_col(x, c); let y = g.add_col(y, c); let y = g.square(y); g.sum_all(y) }, sample());
        check(&|g, x| { let s = g.sum_rows(x); let s = g.square(s); let t = g.sum_cols(x); let t = g.square(t); let a = g.sum_all(s); let b = g.sum_all(t); g.add(a, b) }, sample());
        check(&|g, x| { let m = g.mean_rows(x); let m = g.square(m); g.mean_all(m) }, sample());
    }

    #[test]
    fn softmax_family() {
        let w = array![[1.0, 2.0, 3.0], [-1.0, 0.5, 2.0]];
        check(&|g, x| { let y = g.softmax_rows(x); let w = g.constant(w.clone()); let y = g.mul(y, w); g.sum_all(y) }, sample());
        check(&|g, x| { let y = g.log_softmax_rows(x); let y = g.pick(y, &[2, 0]); g.sum_all(y) }, sample());
        check(&|g, x| { let y = g.l2_normalize_rows(x, 1e-12); let w = g.constant(w.clone()); let y = g.mul(y, w); g.sum_all(y) }, sample());
    }

    #[test]
    fn structural_ops() {
        check(&|g, x| {
            let a = g.slice_rows(x, 1, 1);
            let b = g.gather_rows(x, &[0, 1, 1, 0]);
            let c = g.concat_rows(&[a, b]);
            let d = g.slice_cols(c, 0, 2);
            let e = g.concat_cols(&[d, c]);
            let e = g.square(e);
            let e = g.sigmoid(e);
            g.sum_all(e)
        }, sample());
    }

    #[test]
    fn param_gradients_accumulate_over_reuse() {
        let mut store = ParamStore::<f64>::new();
        let id = store.add("w", array![[2.0]]);
        let mut g = Graph::new(&store);
        let a = g.param(id);
        let b = g.param(id);
        assert_eq!(a, b);
        let y = g.mul(a, b);
        let grads = g.backward(y);
        assert_eq!(grads.params().get(id).unwrap()[[0, 0]], 4.0);
    }

    #[test]
    fn dropout_is_identity_in_eval_mode() {
        let store = ParamStore::<f32>::new();
        let mut g = Graph::new(&store);
        let x = g.constant(Array2::ones((4, 4)));
        assert_eq!(g.dropout(x, 0.5), x);
        let mut t = Graph::training(&store, 3);
        let x = t.constant(Array2::ones((64, 64)));
        let y = t.dropout(x, 0.5);
        let kept = t.value(y).iter().filter(|&&v| v > 0.0).count();
        assert!(kept > 1500 && kept < 2600, "kept {kept}");
        assert!(t.value(y).iter().all(|&v| v == 0.0 || v == 2.0));
    }
}
