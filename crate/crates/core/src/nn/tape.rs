//! Reverse-mode automatic differentiation over row-major matrices.
//!
//! Every node is a `rows × cols` matrix. Parameters are borrowed from their
//! owning [`Tensor`] instead of copied, so building a graph over a large
//! model costs no more than the activations it produces. Shape errors are
//! programming errors here and panic; callers validate user input first.

use std::borrow::Cow;

use super::tensor::{gemm, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Param(usize),
    MatMul(Var, Var),
    /// Adds a `1 × cols` row to every row.
    AddRow(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Relu(Var),
    Tanh(Var),
    Sigmoid(Var),
    SliceCols(Var, usize),
    ConcatCols(Vec<Var>),
    /// Delays rows by `n`, filling the first `n` rows with zeros.
    ShiftRows(Var, usize),
    Row(Var, usize),
    StackRows(Vec<Var>),
    ReverseRows(Var),
    MeanRows(Var),
    L2NormalizeRows(Var),
    LogSoftmaxRows(Var),
}

#[derive(Debug)]
struct Node<'a> {
    rows: usize,
    cols: usize,
    value: Cow<'a, [f64]>,
    op: Op,
}

#[derive(Debug, Default)]
pub struct Tape<'a> {
    nodes: Vec<Node<'a>>,
    params: Vec<Option<Var>>,
}

/// Gradients of a seeded backward pass, one optional buffer per node.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn wrt(&self, v: Var) -> Option<&[f64]> {
        self.grads[v.0].as_deref()
    }

    /// Adds parameter gradients into `store[param_id]` in node order.
    pub fn accumulate_params(&self, tape: &Tape<'_>, store: &mut [Vec<f64>]) {
        for (i, node) in tape.nodes.iter().enumerate() {
            if let (Op::Param(id), Some(g)) = (&node.op, &self.grads[i]) {
                for (s, x) in store[*id].iter_mut().zip(g) {
                    *s += x;
                }
            }
        }
    }
}

impl<'a> Tape<'a> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, rows: usize, cols: usize, value: Cow<'a, [f64]>, op: Op) -> Var {
        debug_assert_eq!(value.len(), rows * cols);
        self.nodes.push(Node {
            rows,
            cols,
            value,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        let n = &self.nodes[v.0];
        (n.rows, n.cols)
    }

    pub fn rows(&self, v: Var) -> usize {
        self.nodes[v.0].rows
    }

    pub fn cols(&self, v: Var) -> usize {
        self.nodes[v.0].cols
    }

    pub fn to_tensor(&self, v: Var) -> Tensor {
        let (r, c) = self.shape(v);
        Tensor {
            shape: vec![r, c],
            values: self.value(v).to_vec(),
            grad: None,
        }
    }

    pub fn input(&mut self, rows: usize, cols: usize, values: Vec<f64>) -> Var {
        assert_eq!(values.len(), rows * cols, "input shape");
        self.push(rows, cols, Cow::Owned(values), Op::Leaf)
    }

    pub fn input_tensor(&mut self, t: &Tensor) -> Var {
        self.input(t.rows(), t.cols(), t.values.clone())
    }

    /// Registers parameter `id` (once per tape); later calls return the same node.
    pub fn param(&mut self, id: usize, t: &'a Tensor) -> Var {
        if self.params.len() <= id {
            self.params.resize(id + 1, None);
        }
        if let Some(v) = self.params[id] {
            return v;
        }
        let v = self.push(t.rows(), t.cols(), Cow::Borrowed(&t.values), Op::Param(id));
        self.params[id] = Some(v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let ((m, k), (k2, n)) = (self.shape(a), self.shape(b));
        assert_eq!(k, k2, "matmul inner dimension");
        let mut out = vec![0.0; m * n];
        gemm(
            m,
            k,
            n,
            self.value(a),
            false,
            self.value(b),
            false,
            &mut out,
            false,
        );
        self.push(m, n, Cow::Owned(out), Op::MatMul(a, b))
    }

    pub fn add_row(&mut self, x: Var, bias: Var) -> Var {
        let (r, c) = self.shape(x);
        assert_eq!(self.shape(bias), (1, c), "bias shape");
        let b = self.value(bias);
        let out: Vec<f64> = self
            .value(x)
            .chunks(c.max(1))
            .flat_map(|row| row.iter().zip(b).map(|(x, b)| x + b))
            .collect();
        self.push(r, c, Cow::Owned(out), Op::AddRow(x, bias))
    }

    fn zip_with(&mut self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, op: Op) -> Var {
        let (r, c) = self.shape(a);
        assert_eq!((r, c), self.shape(b), "elementwise shape");
        let out = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(x, y)| f(*x, *y))
            .collect();
        self.push(r, c, Cow::Owned(out), op)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.zip_with(a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.zip_with(a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.zip_with(a, b, |x, y| x * y, Op::Mul(a, b))
    }

    fn map(&mut self, x: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let (r, c) = self.shape(x);
        let out = self.value(x).iter().map(|v| f(*v)).collect();
        self.push(r, c, Cow::Owned(out), op)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.map(x, |v| v.max(0.0), Op::Relu(x))
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.map(x, f64::tanh, Op::Tanh(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.map(x, |v| 1.0 / (1.0 + (-v).exp()), Op::Sigmoid(x))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, width: usize) -> Var {
        let (r, c) = self.shape(x);
        assert!(start + width <= c, "column slice out of range");
        let v = self.value(x);
        let out = (0..r)
            .flat_map(|i| v[i * c + start..i * c + start + width].iter().copied())
            .collect();
        self.push(r, width, Cow::Owned(out), Op::SliceCols(x, start))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "concat of nothing");
        let r = self.rows(parts[0]);
        assert!(
            parts.iter().all(|&p| self.rows(p) == r),
            "concat row mismatch"
        );
        let width: usize = parts.iter().map(|&p| self.cols(p)).sum();
        let mut out = Vec::with_capacity(r * width);
        for i in 0..r {
            for &p in parts {
                let c = self.cols(p);
                out.extend_from_slice(&self.value(p)[i * c..(i + 1) * c]);
            }
        }
        self.push(r, width, Cow::Owned(out), Op::ConcatCols(parts.to_vec()))
    }

    pub fn shift_rows(&mut self, x: Var, n: usize) -> Var {
        let (r, c) = self.shape(x);
        let mut out = vec![0.0; r * c];
        if n < r {
            out[n * c..].copy_from_slice(&self.value(x)[..(r - n) * c]);
        }
        self.push(r, c, Cow::Owned(out), Op::ShiftRows(x, n))
    }

    pub fn row(&mut self, x: Var, i: usize) -> Var {
        let (r, c) = self.shape(x);
        assert!(i < r, "row out of range");
        let out = self.value(x)[i * c..(i + 1) * c].to_vec();
        self.push(1, c, Cow::Owned(out), Op::Row(x, i))
    }

    pub fn stack_rows(&mut self, rows: &[Var]) -> Var {
        assert!(!rows.is_empty(), "stack of nothing");
        let c = self.cols(rows[0]);
        let mut out = Vec::with_capacity(rows.len() * c);
        for &v in rows {
            assert_eq!(self.shape(v), (1, c), "stack expects 1×c rows");
            out.extend_from_slice(self.value(v));
        }
        self.push(rows.len(), c, Cow::Owned(out), Op::StackRows(rows.to_vec()))
    }

    pub fn reverse_rows(&mut self, x: Var) -> Var {
        let (r, c) = self.shape(x);
        let v = self.value(x);
        let out = (0..r)
            .rev()
            .flat_map(|i| v[i * c..(i + 1) * c].iter().copied())
            .collect();
        self.push(r, c, Cow::Owned(out), Op::ReverseRows(x))
    }

    pub fn mean_rows(&mut self, x: Var) -> Var {
        let (r, c) = self.shape(x);
        assert!(r > 0, "mean over zero rows");
        let mut out = vec![0.0; c];
        for row in self.value(x).chunks(c.max(1)) {
            for (o, v) in out.iter_mut().zip(row) {
                *o += v;
            }
        }
        out.iter_mut().for_each(|o| *o /= r as f64);
        self.push(1, c, Cow::Owned(out), Op::MeanRows(x))
    }

    pub fn l2_normalize_rows(&mut self, x: Var) -> Var {
        let (r, c) = self.shape(x);
        let mut out = self.value(x).to_vec();
        for row in out.chunks_mut(c.max(1)) {
            let n = row_norm(row);
            row.iter_mut().for_each(|v| *v /= n);
        }
        self.push(r, c, Cow::Owned(out), Op::L2NormalizeRows(x))
    }

    pub fn log_softmax_rows(&mut self, x: Var) -> Var {
        let (r, c) = self.shape(x);
        let mut out = self.value(x).to_vec();
        for row in out.chunks_mut(c.max(1)) {
            let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
            row.iter_mut().for_each(|v| *v -= lse);
        }
        self.push(r, c, Cow::Owned(out), Op::LogSoftmaxRows(x))
    }

    /// `x · w + b` for `w: in × out`, `b: 1 × out`.
    pub fn affine(&mut self, x: Var, w: Var, b: Var) -> Var {
        let y = self.matmul(x, w);
        self.add_row(y, b)
    }

    /// Back-propagates the given output gradients (summed when a node is
    /// seeded more than once).
    pub fn backward(&self, seeds: &[(Var, &[f64])]) -> Gradients {
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        let mut last = 0;
        for &(v, g) in seeds {
            assert_eq!(g.len(), self.value(v).len(), "seed shape");
            add_into(&mut grads[v.0], g);
            last = last.max(v.0 + 1);
        }
        for i in (0..last).rev() {
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        Gradients { grads }
    }

    fn backprop_node(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let (r, c) = (node.rows, node.cols);
        let y = &node.value;
        match &node.op {
            Op::Leaf | Op::Param(_) => {}
            Op::MatMul(a, b) => {
                let (m, k) = self.shape(*a);
                let n = c;
                let ga = slot(grads, *a, m * k);
                gemm(m, n, k, g, false, self.value(*b), true, ga, true);
                let gb = slot(grads, *b, k * n);
                gemm(k, m, n, self.value(*a), true, g, false, gb, true);
            }
            Op::AddRow(x, b) => {
                add_into(&mut grads[x.0], g);
                let gb = slot(grads, *b, c);
                for row in g.chunks(c.max(1)) {
                    for (s, v) in gb.iter_mut().zip(row) {
                        *s += v;
                    }
                }
            }
            Op::Add(a, b) => {
                add_into(&mut grads[a.0], g);
                add_into(&mut grads[b.0], g);
            }
            Op::Sub(a, b) => {
                add_into(&mut grads[a.0], g);
                let gb = slot(grads, *b, g.len());
                for (s, v) in gb.iter_mut().zip(g) {
                    *s -= v;
                }
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let ga = slot(grads, *a, g.len());
                for ((s, gv), bv) in ga.iter_mut().zip(g).zip(vb) {
                    *s += gv * bv;
                }
                let gb = slot(grads, *b, g.len());
                for ((s, gv), av) in gb.iter_mut().zip(g).zip(va) {
                    *s += gv * av;
                }
            }
            Op::Relu(x) => {
                let vx = self.value(*x);
                let gx = slot(grads, *x, g.len());
                for ((s, gv), xv) in gx.iter_mut().zip(g).zip(vx) {
                    if *xv > 0.0 {
                        *s += gv;
                    }
                }
            }
            Op::Tanh(x) => {
                let gx = slot(grads, *x, g.len());
                for ((s, gv), yv) in gx.iter_mut().zip(g).zip(y.iter()) {
                    *s += gv * (1.0 - yv * yv);
                }
            }
            Op::Sigmoid(x) => {
                let gx = slot(grads, *x, g.len());
                for ((s, gv), yv) in gx.iter_mut().zip(g).zip(y.iter()) {
                    *s += gv * yv * (1.0 - yv);
                }
            }
            Op::SliceCols(x, start) => {
                let cx = self.cols(*x);
                let gx = slot(grads, *x, r * cx);
                for row in 0..r {
                    for j in 0..c {
                        gx[row * cx + start + j] += g[row * c + j];
                    }
                }
            }
            Op::ConcatCols(parts) => {
                let mut off = 0;
                for p in parts {
                    let cp = self.cols(*p);
                    let gp = slot(grads, *p, r * cp);
                    for row in 0..r {
                        for j in 0..cp {
                            gp[row * cp + j] += g[row * c + off + j];
                        }
                    }
                    off += cp;
                }
            }
            Op::ShiftRows(x, n) => {
                let gx = slot(grads, *x, r * c);
                if *n < r {
                    for (s, v) in gx[..(r - n) * c].iter_mut().zip(&g[n * c..]) {
                        *s += v;
                    }
                }
            }
            Op::Row(x, idx) => {
                let cx = self.cols(*x);
                let rx = self.rows(*x);
                let gx = slot(grads, *x, rx * cx);
                for (s, v) in gx[idx * c..(idx + 1) * c].iter_mut().zip(g) {
                    *s += v;
                }
            }
            Op::StackRows(rows) => {
                for (idx, v) in rows.iter().enumerate() {
                    add_into(&mut grads[v.0], &g[idx * c..(idx + 1) * c]);
                }
            }
            Op::ReverseRows(x) => {
                let gx = slot(grads, *x, r * c);
                for row in 0..r {
                    let src = &g[(r - 1 - row) * c..(r - row) * c];
                    for (s, v) in gx[row * c..(row + 1) * c].iter_mut().zip(src) {
                        *s += v;
                    }
                }
            }
            Op::MeanRows(x) => {
                let rx = self.rows(*x);
                let gx = slot(grads, *x, rx * c);
                let scale = 1.0 / rx as f64;
                for row in gx.chunks_mut(c.max(1)) {
                    for (s, v) in row.iter_mut().zip(g) {
                        *s += v * scale;
                    }
                }
            }
            Op::L2NormalizeRows(x) => {
                let vx = self.value(*x);
                let gx = slot(grads, *x, r * c);
                for row in 0..r {
                    let span = row * c..(row + 1) * c;
                    let n = row_norm(&vx[span.clone()]);
                    let (yr, gr) = (&y[span.clone()], &g[span.clone()]);
                    let proj: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for ((s, gv), yv) in gx[span].iter_mut().zip(gr).zip(yr) {
                        *s += (gv - yv * proj) / n;
                    }
                }
            }
            Op::LogSoftmaxRows(x) => {
                let gx = slot(grads, *x, r * c);
                for row in 0..r {
                    let span = row * c..(row + 1) * c;
                    let total: f64 = g[span.clone()].iter().sum();
                    for (j, s) in gx[span.clone()].iter_mut().enumerate() {
                        let k = row * c + j;
                        *s += g[k] - y[k].exp() * total;
                    }
                }
            }
        }
    }
}

fn row_norm(row: &[f64]) -> f64 {
    row.iter()
        .map(|v| v * v)
        .sum::<f64>()
        .sqrt()
        .max(f64::MIN_POSITIVE)
}

fn slot(grads: &mut [Option<Vec<f64>>], v: Var, len: usize) -> &mut [f64] {
    grads[v.0].get_or_insert_with(|| vec![0.0; len])
}

fn add_into(dst: &mut Option<Vec<f64>>, g: &[f64]) {
    match dst {
        Some(d) => d.iter_mut().zip(g).for_each(|(a, b)| *a += b),
        None => *dst = Some(g.to_vec()),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
        (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
    }

    /// Checks d(Σ weights·out)/d(input) against central differences for a
    /// graph built by `build` from a single input leaf.
    fn check(rows: usize, cols: usize, build: impl Fn(&mut Tape<'_>, Var) -> Var) {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x0 = rand_vec(&mut rng, rows * cols);
        let eval = |x: &[f64]| {
            let mut t = Tape::new();
            let v = t.input(rows, cols, x.to_vec());
            let y = build(&mut t, v);
            (t.value(y).to_vec(), t, v, y)
        };
        let (y0, tape, xv, yv) = eval(&x0);
        let w = rand_vec(&mut rng, y0.len());
        let grads = tape.backward(&[(yv, &w)]);
        let analytic = grads
            .wrt(xv)
            .map(<[f64]>::to_vec)
            .unwrap_or(vec![0.0; x0.len()]);
        let h = 1e-6;
        for i in 0..x0.len() {
            let (mut xp, mut xm) = (x0.clone(), x0.clone());
            xp[i] += h;
            xm[i] -= h;
            let f = |x: &[f64]| eval(x).0.iter().zip(&w).map(|(a, b)| a * b).sum::<f64>();
            let fd = (f(&xp) - f(&xm)) / (2.0 * h);
            assert!(
                (fd - analytic[i]).abs() < 1e-6 * (1.0 + fd.abs()),
                "coordinate {i}: fd {fd} vs analytic {}",
                analytic[i]
            );
        }
    }

    #[test]
    fn elementwise_ops() {
        check(3, 4, |t, x| t.tanh(x));
        check(3, 4, |t, x| t.sigmoid(x));
        check(3, 4, |t, x| {
            let s = t.sigmoid(x);
            t.mul(s, x)
        });
        check(3, 4, |t, x| {
            let a = t.tanh(x);
            t.sub(x, a)
        });
    }

    #[test]
    fn structural_ops() {
        check(5, 4, |t, x| t.slice_cols(x, 1, 2));
        check(5, 4, |t, x| {
            let a = t.shift_rows(x, 2);
            t.concat_cols(&[x, a])
        });
        check(5, 4, |t, x| t.reverse_rows(x));
        check(5, 4, |t, x| t.mean_rows(x));
        check(5, 4, |t, x| {
            let a = t.row(x, 3);
            let b = t.row(x, 0);
            t.stack_rows(&[a, b, a])
        });
    }

    #[test]
    fn normalizations() {
        check(3, 5, |t, x| t.l2_normalize_rows(x));
        check(3, 5, |t, x| t.log_softmax_rows(x));
    }

    #[test]
    fn matmul_both_sides() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let w = Tensor::matrix(4, 3, rand_vec(&mut rng, 12)).unwrap();
        let b = Tensor::matrix(1, 3, rand_vec(&mut rng, 3)).unwrap();
        check(5, 4, |t, x| {
            let wv = t.input_tensor(&w);
            let bv = t.input_tensor(&b);
            t.affine(x, wv, bv)
        });
        // gradient with respect to the right operand
        check(4, 3, |t, x| {
            let a = t.input(2, 4, (0..8).map(|i| i as f64 * 0.3 - 1.0).collect());
            let y = t.matmul(a, x);
            t.relu(y)
        });
    }

    #[test]
    fn params_are_shared_and_accumulated() {
        let p = Tensor::matrix(1, 2, vec![2.0, -1.0]).unwrap();
        let mut t = Tape::new();
        let a = t.param(0, &p);
        let b = t.param(0, &p);
        assert_eq!(a, b);
        let s = t.add(a, b);
        let grads = t.backward(&[(s, &[1.0, 1.0])]);
        let mut store = vec![vec![0.0; 2]];
        grads.accumulate_params(&t, &mut store);
        assert_eq!(store[0], vec![2.0, 2.0]);
    }

    #[test]
    fn log_softmax_rows_normalize() {
        let mut t = Tape::new();
        let x = t.input(2, 3, vec![1.0, 2.0, 3.0, -50.0, 0.0, 50.0]);
        let y = t.log_softmax_rows(x);
        for row in t.value(y).chunks(3) {
            let s: f64 = row.iter().map(|v| v.exp()).sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
    }
}
