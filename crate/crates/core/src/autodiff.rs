//! Minimal reverse-mode automatic differentiation over `Array2<f64>`.
//!
//! One tape per forward pass; nodes own their values, backward walks the
//! tape in reverse. Scalars are 1x1 arrays. A tape built with
//! `Tape::new(false)` records values only (inference mode) and cannot be
//! differentiated.

use ndarray::{concatenate, s, Array2, Axis};

/// Handle to a node on a tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

enum Op {
    Leaf,
    Matmul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    /// `a: n x h` plus `b: 1 x h` broadcast over rows.
    AddRowBroadcast(Var, Var),
    /// `a: m x h`, `b: k x h` -> `(k*m) x h`, `out[k*m_ + m_i] = a[m_i] + b[k]`.
    OuterBroadcastAdd(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Sigmoid(Var),
    Tanh(Var),
    Gelu(Var),
    Softplus(Var),
    SoftmaxRows(Var),
    /// `ln(max(x, floor))`; zero gradient where the floor is active.
    LogClamped(Var, f64),
    LayerNormRows { x: Var, gamma: Var, beta: Var },
    SliceRows(Var, usize, usize),
    SliceCols(Var, usize, usize),
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    /// Row lookup (embedding); backward scatter-adds.
    GatherRows(Var, Vec<usize>),
    /// Element lookup -> n x 1.
    GatherElems(Var, Vec<(usize, usize)>),
    SumAll(Var),
    /// Same element count, new (rows, cols), row-major order preserved.
    Reshape(Var),
}

enum Aux {
    LayerNorm { xhat: Array2<f64>, rstd: Vec<f64> },
}

struct Node {
    value: Array2<f64>,
    op: Op,
    requires_grad: bool,
    aux: Option<Aux>,
}

pub struct Tape {
    nodes: Vec<Node>,
    track: bool,
}

const GELU_C: f64 = 0.7978845608028654; // sqrt(2/pi)
const GELU_A: f64 = 0.044715;

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + GELU_A * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

impl Tape {
    pub fn new(track: bool) -> Self {
        Self { nodes: Vec::with_capacity(256), track }
    }

    pub fn is_tracking(&self) -> bool {
        self.track
    }

    pub fn value(&self, v: Var) -> &Array2<f64> {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        debug_assert_eq!(self.nodes[v.0].value.dim(), (1, 1));
        self.nodes[v.0].value[[0, 0]]
    }

    fn push(&mut self, value: Array2<f64>, op: Op, requires_grad: bool, aux: Option<Aux>) -> Var {
        let requires_grad = self.track && requires_grad;
        let op = if requires_grad { op } else { Op::Leaf };
        self.nodes.push(Node { value, op, requires_grad, aux });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn leaf(&mut self, value: Array2<f64>, requires_grad: bool) -> Var {
        let rg = self.track && requires_grad;
        self.nodes.push(Node { value, op: Op::Leaf, requires_grad: rg, aux: None });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Array2<f64>) -> Var {
        self.leaf(value, false)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let v = self.nodes[a.0].value.dot(&self.nodes[b.0].value);
        let rg = self.needs(a) || self.needs(b);
        self.push(v, Op::Matmul(a, b), rg, None)
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let v = self.nodes[a.0].value.t().to_owned();
        let rg = self.needs(a);
        self.push(v, Op::Transpose(a), rg, None)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = &self.nodes[a.0].value + &self.nodes[b.0].value;
        let rg = self.needs(a) || self.needs(b);
        self.push(v, Op::Add(a, b), rg, None)
    }

    /// `a: n x h` + `b: 1 x h` (row bias).
    pub fn add_row_broadcast(&mut self, a: Var, b: Var) -> Var {
        debug_assert_eq!(self.nodes[b.0].value.nrows(), 1);
        let v = &self.nodes[a.0].value + &self.nodes[b.0].value;
        let rg = self.needs(a) || self.needs(b);
        self.push(v, Op::AddRowBroadcast(a, b), rg, None)
    }

    /// Fuse a sentence-side `m x h` block with a span-side `k x h` block into
    /// `(k*m) x h`, row `k_i * m + m_i` holding `a[m_i] + b[k_i]`.
    pub fn outer_broadcast_add(&mut self, a: Var, b: Var) -> Var {
        let (m, h) = self.nodes[a.0].value.dim();
        let (k, h2) = self.nodes[b.0].value.dim();
        debug_assert_eq!(h, h2);
        let mut v = Array2::zeros((k * m, h));
        for ki in 0..k {
            let bk = self.nodes[b.0].value.row(ki);
            for mi in 0..m {
                let mut row = v.row_mut(ki * m + mi);
                row.assign(&self.nodes[a.0].value.row(mi));
                row += &bk;
            }
        }
        let rg = self.needs(a) || self.needs(b);
        self.push(v, Op::OuterBroadcastAdd(a, b), rg, None)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let v = &self.nodes[a.0].value * &self.nodes[b.0].value;
        let rg = self.needs(a) || self.needs(b);
        self.push(v, Op::Mul(a, b), rg, None)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let v = &self.nodes[a.0].value * c;
        let rg = self.needs(a);
        self.push(v, Op::Scale(a, c), rg, None)
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let v = &self.nodes[a.0].value + c;
        let rg = self.needs(a);
        self.push(v, Op::AddScalar(a), rg, None)
    }

    /// `1 - x`, convenience for gate complements.
    pub fn one_minus(&mut self, a: Var) -> Var {
        let neg = self.scale(a, -1.0);
        self.add_scalar(neg, 1.0)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let v = self.nodes[a.0].value.mapv(|x| 1.0 / (1.0 + (-x).exp()));
        let rg = self.needs(a);
        self.push(v, Op::Sigmoid(a), rg, None)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let v = self.nodes[a.0].value.mapv(f64::tanh);
        let rg = self.needs(a);
        self.push(v, Op::Tanh(a), rg, None)
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let v = self.nodes[a.0].value.mapv(gelu);
        let rg = self.needs(a);
        self.push(v, Op::Gelu(a), rg, None)
    }

    /// `ln(1 + e^x)`, computed overflow-free.
    pub fn softplus(&mut self, a: Var) -> Var {
        let v = self.nodes[a.0].value.mapv(|x| x.max(0.0) + (-x.abs()).exp().ln_1p());
        let rg = self.needs(a);
        self.push(v, Op::Softplus(a), rg, None)
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let x = &self.nodes[a.0].value;
        let mut v = x.clone();
        for mut row in v.rows_mut() {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            row.mapv_inplace(|z| (z - max).exp());
            let sum: f64 = row.sum();
            row.mapv_inplace(|z| z / sum);
        }
        let rg = self.needs(a);
        self.push(v, Op::SoftmaxRows(a), rg, None)
    }

    pub fn log_clamped(&mut self, a: Var, floor: f64) -> Var {
        let v = self.nodes[a.0].value.mapv(|x| x.max(floor).ln());
        let rg = self.needs(a);
        self.push(v, Op::LogClamped(a, floor), rg, None)
    }

    pub fn layer_norm_rows(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Var {
        let xv = &self.nodes[x.0].value;
        let (n, h) = xv.dim();
        let mut xhat = Array2::zeros((n, h));
        let mut rstd = Vec::with_capacity(n);
        for (i, row) in xv.rows().into_iter().enumerate() {
            let mu = row.mean().unwrap();
            let var = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / h as f64;
            let r = 1.0 / (var + eps).sqrt();
            rstd.push(r);
            for (j, v) in row.iter().enumerate() {
                xhat[[i, j]] = (v - mu) * r;
            }
        }
        let v = &xhat * &self.nodes[gamma.0].value + &self.nodes[beta.0].value;
        let rg = self.needs(x) || self.needs(gamma) || self.needs(beta);
        self.push(
            v,
            Op::LayerNormRows { x, gamma, beta },
            rg,
            Some(Aux::LayerNorm { xhat, rstd }),
        )
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, end: usize) -> Var {
        let v = self.nodes[a.0].value.slice(s![start..end, ..]).to_owned();
        let rg = self.needs(a);
        self.push(v, Op::SliceRows(a, start, end), rg, None)
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Var {
        let v = self.nodes[a.0].value.slice(s![.., start..end]).to_owned();
        let rg = self.needs(a);
        self.push(v, Op::SliceCols(a, start, end), rg, None)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let views: Vec<_> = parts.iter().map(|v| self.nodes[v.0].value.view()).collect();
        let v = concatenate(Axis(0), &views).expect("concat_rows shape mismatch");
        let rg = parts.iter().any(|p| self.needs(*p));
        self.push(v, Op::ConcatRows(parts.to_vec()), rg, None)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let views: Vec<_> = parts.iter().map(|v| self.nodes[v.0].value.view()).collect();
        let v = concatenate(Axis(1), &views).expect("concat_cols shape mismatch");
        let rg = parts.iter().any(|p| self.needs(*p));
        self.push(v, Op::ConcatCols(parts.to_vec()), rg, None)
    }

    pub fn gather_rows(&mut self, a: Var, indices: &[usize]) -> Var {
        let src = &self.nodes[a.0].value;
        let mut v = Array2::zeros((indices.len(), src.ncols()));
        for (i, &idx) in indices.iter().enumerate() {
            v.row_mut(i).assign(&src.row(idx));
        }
        let rg = self.needs(a);
        self.push(v, Op::GatherRows(a, indices.to_vec()), rg, None)
    }

    pub fn gather_elems(&mut self, a: Var, coords: &[(usize, usize)]) -> Var {
        let src = &self.nodes[a.0].value;
        let mut v = Array2::zeros((coords.len(), 1));
        for (i, &(r, c)) in coords.iter().enumerate() {
            v[[i, 0]] = src[[r, c]];
        }
        let rg = self.needs(a);
        self.push(v, Op::GatherElems(a, coords.to_vec()), rg, None)
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let v = Array2::from_elem((1, 1), self.nodes[a.0].value.sum());
        let rg = self.needs(a);
        self.push(v, Op::SumAll(a), rg, None)
    }

    pub fn reshape(&mut self, a: Var, rows: usize, cols: usize) -> Var {
        let src = &self.nodes[a.0].value;
        debug_assert_eq!(src.len(), rows * cols);
        let v = Array2::from_shape_vec((rows, cols), src.iter().cloned().collect())
            .expect("reshape element count mismatch");
        let rg = self.needs(a);
        self.push(v, Op::Reshape(a), rg, None)
    }

    /// Reverse pass from a scalar root. Returns per-node gradients for every
    /// node that requires grad and contributed to the root.
    pub fn backward(&self, root: Var) -> Gradients {
        assert!(self.track, "backward on a non-tracking tape");
        assert_eq!(self.nodes[root.0].value.dim(), (1, 1), "backward root must be scalar");
        let mut grads: Vec<Option<Array2<f64>>> = vec![None; root.0 + 1];
        grads[root.0] = Some(Array2::ones((1, 1)));

        for id in (0..=root.0).rev() {
            let Some(grad) = grads[id].take() else { continue };
            let node = &self.nodes[id];
            if !node.requires_grad {
                continue;
            }
            match &node.op {
                Op::Leaf => {
                    grads[id] = Some(grad); // keep for extraction
                    continue;
                }
                Op::Matmul(a, b) => {
                    if self.needs(*a) {
                        let da = grad.dot(&self.nodes[b.0].value.t());
                        accumulate(&mut grads, a.0, da);
                    }
                    if self.needs(*b) {
                        let db = self.nodes[a.0].value.t().dot(&grad);
                        accumulate(&mut grads, b.0, db);
                    }
                }
                Op::Transpose(a) => {
                    if self.needs(*a) {
                        accumulate(&mut grads, a.0, grad.t().to_owned());
                    }
                }
                Op::Add(a, b) => {
                    if self.needs(*a) {
                        accumulate(&mut grads, a.0, grad.clone());
                    }
                    if self.needs(*b) {
                        accumulate(&mut grads, b.0, grad);
                    }
                }
                Op::AddRowBroadcast(a, b) => {
                    if self.needs(*a) {
                        accumulate(&mut grads, a.0, grad.clone());
                    }
                    if self.needs(*b) {
                        let db = grad.sum_axis(Axis(0)).insert_axis(Axis(0));
                        accumulate(&mut grads, b.0, db);
                    }
                }
                Op::OuterBroadcastAdd(a, b) => {
                    let m = self.nodes[a.0].value.nrows();
                    let k = self.nodes[b.0].value.nrows();
                    let h = self.nodes[a.0].value.ncols();
                    if self.needs(*a) {
                        let mut da = Array2::zeros((m, h));
                        for ki in 0..k {
                            for mi in 0..m {
                                let mut row = da.row_mut(mi);
                                row += &grad.row(ki * m + mi);
                            }
                        }
                        accumulate(&mut grads, a.0, da);
                    }
                    if self.needs(*b) {
                        let mut db = Array2::zeros((k, h));
                        for ki in 0..k {
                            for mi in 0..m {
                                let mut row = db.row_mut(ki);
                                row += &grad.row(ki * m + mi);
                            }
                        }
                        accumulate(&mut grads, b.0, db);
                    }
                }
                Op::Mul(a, b) => {
                    if self.needs(*a) {
                        accumulate(&mut grads, a.0, &grad * &self.nodes[b.0].value);
                    }
                    if self.needs(*b) {
                        accumulate(&mut grads, b.0, &grad * &self.nodes[a.0].value);
                    }
                }
                Op::Scale(a, c) => {
                    if self.needs(*a) {
                        accumulate(&mut grads, a.0, &grad * *c);
                    }
                }
                Op::AddScalar(a) => {
                    if self.needs(*a) {
                        accumulate(&mut grads, a.0, grad);
                    }
                }
                Op::Sigmoid(a) => {
                    if self.needs(*a) {
                        let y = &node.value;
                        let da = &grad * &(y * &(1.0 - y));
                        accumulate(&mut grads, a.0, da);
                    }
                }
                Op::Tanh(a) => {
                    if self.needs(*a) {
                        let y = &node.value;
                        let da = &grad * &(1.0 - y * y);
                        accumulate(&mut grads, a.0, da);
                    }
                }
                Op::Gelu(a) => {
                    if self.needs(*a) {
                        let da = &grad * &self.nodes[a.0].value.mapv(gelu_grad);
                        accumulate(&mut grads, a.0, da);
                    }
                }
                Op::Softplus(a) => {
                    if self.needs(*a) {
                        let sig = self.nodes[a.0].value.mapv(|x| 1.0 / (1.0 + (-x).exp()));
                        accumulate(&mut grads, a.0, &grad * &sig);
                    }
                }
                Op::SoftmaxRows(a) => {
                    if self.needs(*a) {
                        let y = &node.value;
                        let mut da = &grad * y;
                        for (mut grow, yrow) in da.rows_mut().into_iter().zip(y.rows()) {
                            let dot: f64 = grow.sum();
                            for (g, p) in grow.iter_mut().zip(yrow.iter()) {
                                *g -= dot * p;
                            }
                        }
                        accumulate(&mut grads, a.0, da);
                    }
                }
                Op::LogClamped(a, floor) => {
                    if self.needs(*a) {
                        let x = &self.nodes[a.0].value;
                        let da = ndarray::Zip::from(&grad)
                            .and(x)
                            .map_collect(|g, &xv| if xv > *floor { g / xv } else { 0.0 });
                        accumulate(&mut grads, a.0, da);
                    }
                }
                Op::LayerNormRows { x, gamma, beta } => {
                    let Some(Aux::LayerNorm { xhat, rstd }) = &node.aux else {
                        unreachable!()
                    };
                    let gv = &self.nodes[gamma.0].value;
                    if self.needs(*gamma) {
                        let dg = (&grad * xhat).sum_axis(Axis(0)).insert_axis(Axis(0));
                        accumulate(&mut grads, gamma.0, dg);
                    }
                    if self.needs(*beta) {
                        let db = grad.sum_axis(Axis(0)).insert_axis(Axis(0));
                        accumulate(&mut grads, beta.0, db);
                    }
                    if self.needs(*x) {
                        let h = xhat.ncols() as f64;
                        let mut dx = Array2::zeros(xhat.dim());
                        for i in 0..xhat.nrows() {
                            let dxhat: Vec<f64> = (0..xhat.ncols())
                                .map(|j| grad[[i, j]] * gv[[0, j]])
                                .collect();
                            let mean_dxhat: f64 = dxhat.iter().sum::<f64>() / h;
                            let mean_dxhat_xhat: f64 = dxhat
                                .iter()
                                .enumerate()
                                .map(|(j, d)| d * xhat[[i, j]])
                                .sum::<f64>()
                                / h;
                            for j in 0..xhat.ncols() {
                                dx[[i, j]] = rstd[i]
                                    * (dxhat[j] - mean_dxhat - xhat[[i, j]] * mean_dxhat_xhat);
                            }
                        }
                        accumulate(&mut grads, x.0, dx);
                    }
                }
                Op::SliceRows(a, start, _end) => {
                    if self.needs(*a) {
                        let mut da = Array2::zeros(self.nodes[a.0].value.dim());
                        da.slice_mut(s![*start..*start + grad.nrows(), ..]).assign(&grad);
                        accumulate(&mut grads, a.0, da);
                    }
                }
                Op::SliceCols(a, start, _end) => {
                    if self.needs(*a) {
                        let mut da = Array2::zeros(self.nodes[a.0].value.dim());
                        da.slice_mut(s![.., *start..*start + grad.ncols()]).assign(&grad);
                        accumulate(&mut grads, a.0, da);
                    }
                }
                Op::ConcatRows(parts) => {
                    let mut offset = 0;
                    for p in parts {
                        let rows = self.nodes[p.0].value.nrows();
                        if self.needs(*p) {
                            let dp = grad.slice(s![offset..offset + rows, ..]).to_owned();
                            accumulate(&mut grads, p.0, dp);
                        }
                        offset += rows;
                    }
                }
                Op::ConcatCols(parts) => {
                    let mut offset = 0;
                    for p in parts {
                        let cols = self.nodes[p.0].value.ncols();
                        if self.needs(*p) {
                            let dp = grad.slice(s![.., offset..offset + cols]).to_owned();
                            accumulate(&mut grads, p.0, dp);
                        }
                        offset += cols;
                    }
                }
                Op::GatherRows(a, indices) => {
                    if self.needs(*a) {
                        let mut da = Array2::zeros(self.nodes[a.0].value.dim());
                        for (i, &idx) in indices.iter().enumerate() {
                            let mut row = da.row_mut(idx);
                            row += &grad.row(i);
                        }
                        accumulate(&mut grads, a.0, da);
                    }
                }
                Op::GatherElems(a, coords) => {
                    if self.needs(*a) {
                        let mut da = Array2::zeros(self.nodes[a.0].value.dim());
                        for (i, &(r, c)) in coords.iter().enumerate() {
                            da[[r, c]] += grad[[i, 0]];
                        }
                        accumulate(&mut grads, a.0, da);
                    }
                }
                Op::SumAll(a) => {
                    if self.needs(*a) {
                        let da = Array2::from_elem(self.nodes[a.0].value.dim(), grad[[0, 0]]);
                        accumulate(&mut grads, a.0, da);
                    }
                }
                Op::Reshape(a) => {
                    if self.needs(*a) {
                        let dim = self.nodes[a.0].value.dim();
                        let da = Array2::from_shape_vec(dim, grad.iter().cloned().collect())
                            .expect("reshape grad shape");
                        accumulate(&mut grads, a.0, da);
                    }
                }
            }
        }
        Gradients { grads }
    }
}

fn accumulate(grads: &mut [Option<Array2<f64>>], id: usize, delta: Array2<f64>) {
    match &mut grads[id] {
        Some(g) => *g += &delta,
        slot => *slot = Some(delta),
    }
}

pub struct Gradients {
    grads: Vec<Option<Array2<f64>>>,
}

impl Gradients {
    pub fn of(&self, v: Var) -> Option<&Array2<f64>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Array2<f64>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}
