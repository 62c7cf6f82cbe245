//! Reverse-mode automatic differentiation over dense `f64` matrices.
//!
//! A [`Graph`] is an append-only tape. Every operation evaluates eagerly and
//! records what its backward pass needs; [`Graph::backward`] walks the tape
//! in reverse. Sequences of different lengths are packed row-wise into one
//! matrix and described by [`Segment`]s, so token-wise layers run as a single
//! matrix product over the whole batch while attention and pooling stay
//! per-sequence.

use ndarray::{s, Array2, Axis, Zip};

use crate::par::Exec;

pub type Mat = Array2<f64>;

/// Handle to a node on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// A contiguous run of rows in a packed matrix belonging to one sequence.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Segment {
    pub start: usize,
    pub len: usize,
}

impl Segment {
    pub fn range(&self) -> std::ops::Range<usize> {
        self.start..self.start + self.len
    }
}

const LN_EPS: f64 = 1e-5;
const NORM_EPS: f64 = 1e-12;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulT(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulCol(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Gelu(Var),
    Sigmoid(Var),
    Log(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Mat,
        inv_std: Vec<f64>,
    },
    GatherRows(Var, Vec<usize>),
    ScatterRows(Var, Vec<usize>),
    SoftmaxRows(Var),
    TopKRenorm {
        p: Var,
        selected: Vec<Vec<usize>>,
        sums: Vec<f64>,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        segments: Vec<Segment>,
        heads: usize,
        probs: Vec<Mat>,
    },
    SegmentMean(Var, Vec<Segment>),
    L2NormalizeRows(Var, Vec<f64>),
    RowDot(Var, Var),
    CrossEntropyRows(Var, Vec<usize>),
    EntropyRows(Var),
    ConcatCols(Vec<Var>),
    Sum(Var),
    MeanRows(Var),
    SelectCol(Var, usize),
    Element(Var, usize, usize),
    NormalizeToMean(Var, f64),
    FilterMultiplier(Var, f64),
}

struct Node {
    value: Mat,
    op: Op,
}

/// Gradients produced by [`Graph::backward`], indexed by [`Var`].
pub struct Grads(Vec<Option<Mat>>);

impl Grads {
    pub fn get(&self, v: Var) -> Option<&Mat> {
        self.0[v.0].as_ref()
    }

    /// Gradient for `v`, or zeros shaped like `like` when nothing flowed into it.
    pub fn get_or_zeros(&self, v: Var, like: (usize, usize)) -> Mat {
        self.get(v).cloned().unwrap_or_else(|| Mat::zeros(like))
    }
}

pub struct Graph {
    nodes: Vec<Node>,
    exec: Exec,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new(Exec::default())
    }
}

fn softmax_row_inplace(row: &mut [f64]) {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for x in row.iter_mut() {
        *x = (*x - max).exp();
        sum += *x;
    }
    for x in row.iter_mut() {
        *x /= sum;
    }
}

impl Graph {
    pub fn new(exec: Exec) -> Self {
        Self {
            nodes: Vec::with_capacity(512),
            exec,
        }
    }

    pub fn exec(&self) -> Exec {
        self.exec
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Mat, op: Op) -> Var {
        let value = if value.is_standard_layout() {
            value
        } else {
            value.as_standard_layout().into_owned()
        };
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Mat {
        &self.nodes[v.0].value
    }

    /// Value of a 1×1 node.
    pub fn scalar(&self, v: Var) -> f64 {
        let m = self.value(v);
        debug_assert_eq!(m.dim(), (1, 1));
        m[[0, 0]]
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.value(v).dim()
    }

    pub fn leaf(&mut self, value: Mat) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn constant_scalar(&mut self, x: f64) -> Var {
        self.leaf(Mat::from_elem((1, 1), x))
    }

    /// Copies the current value into a fresh leaf, cutting gradient flow.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.value(v).clone();
        self.leaf(value)
    }

    /// Attention probabilities saved by an attention node, one `len×len`
    /// matrix per (segment, head), segment-major.
    pub fn attention_probs(&self, v: Var) -> Option<(&[Mat], usize)> {
        match &self.nodes[v.0].op {
            Op::Attention { probs, heads, .. } => Some((probs.as_slice(), *heads)),
            _ => None,
        }
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).dot(self.value(b));
        self.push(value, Op::MatMul(a, b))
    }

    /// `a · bᵀ`
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).dot(&self.value(b).t());
        self.push(value, Op::MatMulT(a, b))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a) + self.value(b);
        self.push(value, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a) - self.value(b);
        self.push(value, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a) * self.value(b);
        self.push(value, Op::Mul(a, b))
    }

    /// Adds a `1×d` row to every row of `x`.
    pub fn add_row(&mut self, x: Var, row: Var) -> Var {
        let value = self.value(x) + self.value(row);
        self.push(value, Op::AddRow(x, row))
    }

    /// Scales every row of `x` by the matching entry of the `n×1` column `c`.
    pub fn mul_col(&mut self, x: Var, c: Var) -> Var {
        let value = self.value(x) * self.value(c);
        self.push(value, Op::MulCol(x, c))
    }

    pub fn scale(&mut self, x: Var, k: f64) -> Var {
        let value = self.value(x) * k;
        self.push(value, Op::Scale(x, k))
    }

    pub fn add_scalar(&mut self, x: Var, k: f64) -> Var {
        let value = self.value(x) + k;
        self.push(value, Op::AddScalar(x))
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let value = self
            .value(x)
            .mapv(|v| 0.5 * v * (1.0 + (GELU_C * (v + 0.044715 * v * v * v)).tanh()));
        self.push(value, Op::Gelu(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let value = self.value(x).mapv(|v| 1.0 / (1.0 + (-v).exp()));
        self.push(value, Op::Sigmoid(x))
    }

    pub fn log(&mut self, x: Var) -> Var {
        let value = self.value(x).mapv(f64::ln);
        self.push(value, Op::Log(x))
    }

    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Var {
        let xv = self.value(x);
        let (n, d) = xv.dim();
        let mut xhat = Mat::zeros((n, d));
        let mut inv_std = Vec::with_capacity(n);
        for (i, row) in xv.rows().into_iter().enumerate() {
            let mean = row.sum() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let is = 1.0 / (var + LN_EPS).sqrt();
            inv_std.push(is);
            for (j, v) in row.iter().enumerate() {
                xhat[[i, j]] = (v - mean) * is;
            }
        }
        let value = &xhat * self.value(gain) + self.value(bias);
        self.push(
            value,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
        )
    }

    pub fn gather_rows(&mut self, x: Var, idx: Vec<usize>) -> Var {
        let xv = self.value(x);
        let value = xv.select(Axis(0), &idx);
        self.push(value, Op::GatherRows(x, idx))
    }

    /// Sums row `i` of `x` into row `idx[i]` of an `n_rows`-row zero matrix.
    pub fn scatter_rows(&mut self, x: Var, idx: Vec<usize>, n_rows: usize) -> Var {
        let xv = self.value(x);
        let mut value = Mat::zeros((n_rows, xv.ncols()));
        for (i, &r) in idx.iter().enumerate() {
            let mut dst = value.row_mut(r);
            dst += &xv.row(i);
        }
        self.push(value, Op::ScatterRows(x, idx))
    }

    pub fn softmax_rows(&mut self, x: Var) -> Var {
        let mut value = self.value(x).clone();
        for mut row in value.rows_mut() {
            softmax_row_inplace(row.as_slice_mut().expect("standard layout"));
        }
        self.push(value, Op::SoftmaxRows(x))
    }

    /// Keeps the `k` largest entries of each row (ties to the lower column)
    /// and rescales them to sum to one. Other entries become zero.
    pub fn top_k_renorm(&mut self, p: Var, k: usize) -> Var {
        let pv = self.value(p);
        let (n, z) = pv.dim();
        let k = k.clamp(1, z);
        let mut value = Mat::zeros((n, z));
        let mut selected = Vec::with_capacity(n);
        let mut sums = Vec::with_capacity(n);
        for (i, row) in pv.rows().into_iter().enumerate() {
            let mut order: Vec<usize> = (0..z).collect();
            order.sort_by(|&a, &b| row[b].total_cmp(&row[a]).then(a.cmp(&b)));
            order.truncate(k);
            order.sort_unstable();
            let sum: f64 = order.iter().map(|&j| row[j]).sum();
            for &j in &order {
                value[[i, j]] = row[j] / sum;
            }
            selected.push(order);
            sums.push(sum);
        }
        self.push(value, Op::TopKRenorm { p, selected, sums })
    }

    /// Multi-head scaled dot-product attention, independently per segment.
    /// `q`, `k`, `v` are packed `N×D`; the output is packed `N×D`.
    pub fn attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        segments: &[Segment],
        heads: usize,
    ) -> Var {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let (n, d) = qv.dim();
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let per_segment: Vec<(Vec<Mat>, Vec<Mat>)> = self.exec.map(segments, |seg| {
            let r = seg.range();
            let mut probs = Vec::with_capacity(heads);
            let mut outs = Vec::with_capacity(heads);
            for h in 0..heads {
                let cols = h * dh..(h + 1) * dh;
                let qs = qv.slice(s![r.clone(), cols.clone()]);
                let ks = kv.slice(s![r.clone(), cols.clone()]);
                let vs = vv.slice(s![r.clone(), cols.clone()]);
                let mut scores = qs.dot(&ks.t()) * scale;
                for mut row in scores.rows_mut() {
                    softmax_row_inplace(row.as_slice_mut().expect("standard layout"));
                }
                outs.push(scores.dot(&vs));
                probs.push(scores);
            }
            (probs, outs)
        });
        let mut value = Mat::zeros((n, d));
        let mut probs = Vec::with_capacity(segments.len() * heads);
        for (seg, (p, o)) in segments.iter().zip(per_segment) {
            for (h, out) in o.into_iter().enumerate() {
                value
                    .slice_mut(s![seg.range(), h * dh..(h + 1) * dh])
                    .assign(&out);
            }
            probs.extend(p);
        }
        self.push(
            value,
            Op::Attention {
                q,
                k,
                v,
                segments: segments.to_vec(),
                heads,
                probs,
            },
        )
    }

    /// Mean of each segment's rows; output has one row per segment.
    pub fn segment_mean(&mut self, x: Var, segments: &[Segment]) -> Var {
        let xv = self.value(x);
        let mut value = Mat::zeros((segments.len(), xv.ncols()));
        for (i, seg) in segments.iter().enumerate() {
            let m = xv
                .slice(s![seg.range(), ..])
                .mean_axis(Axis(0))
                .expect("non-empty segment");
            value.row_mut(i).assign(&m);
        }
        self.push(value, Op::SegmentMean(x, segments.to_vec()))
    }

    pub fn l2_normalize_rows(&mut self, x: Var) -> Var {
        let mut value = self.value(x).clone();
        let mut norms = Vec::with_capacity(value.nrows());
        for mut row in value.rows_mut() {
            let nrm = row.dot(&row).sqrt().max(NORM_EPS);
            row /= nrm;
            norms.push(nrm);
        }
        self.push(value, Op::L2NormalizeRows(x, norms))
    }

    /// Row-wise dot products of two equally shaped matrices, as an `n×1` column.
    pub fn row_dot(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        let col: Vec<f64> = av
            .rows()
            .into_iter()
            .zip(bv.rows())
            .map(|(x, y)| x.dot(&y))
            .collect();
        let value = Mat::from_shape_vec((col.len(), 1), col).expect("column");
        self.push(value, Op::RowDot(a, b))
    }

    /// Per-row `logsumexp(row) − row[target]`, as an `n×1` column.
    pub fn cross_entropy_rows(&mut self, logits: Var, targets: Vec<usize>) -> Var {
        let lv = self.value(logits);
        let col: Vec<f64> = lv
            .rows()
            .into_iter()
            .zip(&targets)
            .map(|(row, &t)| {
                let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let lse = max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
                lse - row[t]
            })
            .collect();
        let value = Mat::from_shape_vec((col.len(), 1), col).expect("column");
        self.push(value, Op::CrossEntropyRows(logits, targets))
    }

    /// Shannon entropy (natural log) of each row, as an `n×1` column.
    pub fn entropy_rows(&mut self, p: Var) -> Var {
        let col: Vec<f64> = self
            .value(p)
            .rows()
            .into_iter()
            .map(|row| {
                -row.iter()
                    .filter(|&&x| x > 0.0)
                    .map(|&x| x * x.ln())
                    .sum::<f64>()
            })
            .collect();
        let value = Mat::from_shape_vec((col.len(), 1), col).expect("column");
        self.push(value, Op::EntropyRows(p))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let views: Vec<_> = parts.iter().map(|&p| self.value(p).view()).collect();
        let value = ndarray::concatenate(Axis(1), &views).expect("equal row counts");
        self.push(value, Op::ConcatCols(parts.to_vec()))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let value = Mat::from_elem((1, 1), self.value(x).sum());
        self.push(value, Op::Sum(x))
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).len() as f64;
        let s = self.sum(x);
        self.scale(s, 1.0 / n)
    }

    pub fn mean_rows(&mut self, x: Var) -> Var {
        let value = self
            .value(x)
            .mean_axis(Axis(0))
            .expect("non-empty")
            .insert_axis(Axis(0));
        self.push(value, Op::MeanRows(x))
    }

    pub fn select_col(&mut self, x: Var, c: usize) -> Var {
        let value = self.value(x).slice(s![.., c..c + 1]).to_owned();
        self.push(value, Op::SelectCol(x, c))
    }

    pub fn element(&mut self, x: Var, r: usize, c: usize) -> Var {
        let value = Mat::from_elem((1, 1), self.value(x)[[r, c]]);
        self.push(value, Op::Element(x, r, c))
    }

    /// Rescales `x` so its entries average to `target`.
    pub fn normalize_to_mean(&mut self, x: Var, target: f64) -> Var {
        let xv = self.value(x);
        let n = xv.len() as f64;
        let value = xv * (target * n / xv.sum());
        self.push(value, Op::NormalizeToMean(x, target))
    }

    /// Elementwise `φ` where `φ < delta`, else `1`.
    pub fn filter_multiplier(&mut self, phi: Var, delta: f64) -> Var {
        let value = self
            .value(phi)
            .mapv(|p| if p < delta { p } else { 1.0 });
        self.push(value, Op::FilterMultiplier(phi, delta))
    }

    /// Gradients of the scalar `root` with respect to every node.
    pub fn backward(&self, root: Var) -> Grads {
        let mut grads: Vec<Option<Mat>> = Vec::with_capacity(self.nodes.len());
        grads.resize_with(self.nodes.len(), || None);
        grads[root.0] = Some(Mat::ones(self.value(root).dim()));

        fn acc(grads: &mut [Option<Mat>], v: Var, g: Mat) {
            match &mut grads[v.0] {
                Some(existing) => *existing += &g,
                slot @ None => *slot = Some(g),
            }
        }

        for idx in (0..=root.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            match &node.op {
                Op::Leaf => {
                    grads[idx] = Some(g);
                    continue;
                }
                Op::MatMul(a, b) => {
                    let da = g.dot(&self.value(*b).t());
                    let db = self.value(*a).t().dot(&g);
                    acc(&mut grads, *a, da);
                    acc(&mut grads, *b, db);
                }
                Op::MatMulT(a, b) => {
                    let da = g.dot(self.value(*b));
                    let db = g.t().dot(self.value(*a));
                    acc(&mut grads, *a, da);
                    acc(&mut grads, *b, db);
                }
                Op::Add(a, b) => {
                    acc(&mut grads, *a, g.clone());
                    acc(&mut grads, *b, g.clone());
                }
                Op::Sub(a, b) => {
                    acc(&mut grads, *b, -&g);
                    acc(&mut grads, *a, g.clone());
                }
                Op::Mul(a, b) => {
                    acc(&mut grads, *a, &g * self.value(*b));
                    acc(&mut grads, *b, &g * self.value(*a));
                }
                Op::AddRow(x, row) => {
                    acc(&mut grads, *row, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
                    acc(&mut grads, *x, g.clone());
                }
                Op::MulCol(x, c) => {
                    let xv = self.value(*x);
                    let dc = (&g * xv).sum_axis(Axis(1)).insert_axis(Axis(1));
                    acc(&mut grads, *x, &g * self.value(*c));
                    acc(&mut grads, *c, dc);
                }
                Op::Scale(x, k) => acc(&mut grads, *x, &g * *k),
                Op::AddScalar(x) => acc(&mut grads, *x, g.clone()),
                Op::Gelu(x) => {
                    let mut dx = self.value(*x).mapv(|v| {
                        let t = (GELU_C * (v + 0.044715 * v * v * v)).tanh();
                        0.5 * (1.0 + t)
                            + 0.5 * v * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * v * v)
                    });
                    dx *= &g;
                    acc(&mut grads, *x, dx);
                }
                Op::Sigmoid(x) => {
                    let dx = node.value.mapv(|y| y * (1.0 - y)) * &g;
                    acc(&mut grads, *x, dx);
                }
                Op::Log(x) => {
                    let dx = &g / self.value(*x);
                    acc(&mut grads, *x, dx);
                }
                Op::LayerNorm {
                    x,
                    gain,
                    bias,
                    xhat,
                    inv_std,
                } => {
                    let gv = self.value(*gain);
                    acc(&mut grads, *bias, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
                    acc(
                        &mut grads,
                        *gain,
                        (&g * xhat).sum_axis(Axis(0)).insert_axis(Axis(0)),
                    );
                    let dxhat = &g * gv;
                    let d = xhat.ncols() as f64;
                    let mut dx = Mat::zeros(xhat.dim());
                    for i in 0..xhat.nrows() {
                        let dr = dxhat.row(i);
                        let xr = xhat.row(i);
                        let m1 = dr.sum() / d;
                        let m2 = dr.dot(&xr) / d;
                        let is = inv_std[i];
                        for j in 0..xhat.ncols() {
                            dx[[i, j]] = is * (dr[j] - m1 - xr[j] * m2);
                        }
                    }
                    acc(&mut grads, *x, dx);
                }
                Op::GatherRows(x, idx) => {
                    let mut dx = Mat::zeros(self.value(*x).dim());
                    for (i, &r) in idx.iter().enumerate() {
                        let mut dst = dx.row_mut(r);
                        dst += &g.row(i);
                    }
                    acc(&mut grads, *x, dx);
                }
                Op::ScatterRows(x, idx) => {
                    acc(&mut grads, *x, g.select(Axis(0), idx));
                }
                Op::SoftmaxRows(x) => {
                    let y = &node.value;
                    let mut dx = &g * y;
                    for (mut row, yr) in dx.rows_mut().into_iter().zip(y.rows()) {
                        let dot = row.sum();
                        Zip::from(&mut row).and(&yr).for_each(|d, &yv| *d -= yv * dot);
                    }
                    acc(&mut grads, *x, dx);
                }
                Op::TopKRenorm { p, selected, sums } => {
                    let y = &node.value;
                    let mut dx = Mat::zeros(y.dim());
                    for (i, sel) in selected.iter().enumerate() {
                        let gy: f64 = sel.iter().map(|&j| g[[i, j]] * y[[i, j]]).sum();
                        for &j in sel {
                            dx[[i, j]] = (g[[i, j]] - gy) / sums[i];
                        }
                    }
                    acc(&mut grads, *p, dx);
                }
                Op::Attention {
                    q,
                    k,
                    v,
                    segments,
                    heads,
                    probs,
                } => {
                    let (qv, kv, vv) = (self.value(*q), self.value(*k), self.value(*v));
                    let (n, d) = qv.dim();
                    let dh = d / heads;
                    let scale = 1.0 / (dh as f64).sqrt();
                    let g_ref = &g;
                    let parts: Vec<Vec<(Mat, Mat, Mat)>> =
                        self.exec.map_range(segments.len(), |si| {
                            let r = segments[si].range();
                            (0..*heads)
                                .map(|h| {
                                    let cols = h * dh..(h + 1) * dh;
                                    let p = &probs[si * heads + h];
                                    let go = g_ref.slice(s![r.clone(), cols.clone()]);
                                    let qs = qv.slice(s![r.clone(), cols.clone()]);
                                    let ks = kv.slice(s![r.clone(), cols.clone()]);
                                    let vs = vv.slice(s![r.clone(), cols.clone()]);
                                    let dv = p.t().dot(&go);
                                    let dp = go.dot(&vs.t());
                                    let mut ds = p * &dp;
                                    for (mut row, pr) in ds.rows_mut().into_iter().zip(p.rows()) {
                                        let dot = row.sum();
                                        Zip::from(&mut row)
                                            .and(&pr)
                                            .for_each(|x, &pv| *x -= pv * dot);
                                    }
                                    ds *= scale;
                                    let dq = ds.dot(&ks);
                                    let dk = ds.t().dot(&qs);
                                    (dq, dk, dv)
                                })
                                .collect()
                        });
                    let mut dq = Mat::zeros((n, d));
                    let mut dk = Mat::zeros((n, d));
                    let mut dv = Mat::zeros((n, d));
                    for (seg, heads_out) in segments.iter().zip(parts) {
                        for (h, (a, b, c)) in heads_out.into_iter().enumerate() {
                            let cols = h * dh..(h + 1) * dh;
                            dq.slice_mut(s![seg.range(), cols.clone()]).assign(&a);
                            dk.slice_mut(s![seg.range(), cols.clone()]).assign(&b);
                            dv.slice_mut(s![seg.range(), cols]).assign(&c);
                        }
                    }
                    acc(&mut grads, *q, dq);
                    acc(&mut grads, *k, dk);
                    acc(&mut grads, *v, dv);
                }
                Op::SegmentMean(x, segments) => {
                    let mut dx = Mat::zeros(self.value(*x).dim());
                    for (i, seg) in segments.iter().enumerate() {
                        let row = g.row(i).mapv(|v| v / seg.len as f64);
                        for r in seg.range() {
                            dx.row_mut(r).assign(&row);
                        }
                    }
                    acc(&mut grads, *x, dx);
                }
                Op::L2NormalizeRows(x, norms) => {
                    let y = &node.value;
                    let mut dx = g.clone();
                    for (i, mut row) in dx.rows_mut().into_iter().enumerate() {
                        let yr = y.row(i);
                        let dot = row.dot(&yr);
                        Zip::from(&mut row)
                            .and(&yr)
                            .for_each(|d, &yv| *d = (*d - yv * dot) / norms[i]);
                    }
                    acc(&mut grads, *x, dx);
                }
                Op::RowDot(a, b) => {
                    let (av, bv) = (self.value(*a), self.value(*b));
                    acc(&mut grads, *a, bv * &g);
                    acc(&mut grads, *b, av * &g);
                }
                Op::CrossEntropyRows(logits, targets) => {
                    let mut dx = self.value(*logits).clone();
                    for (i, mut row) in dx.rows_mut().into_iter().enumerate() {
                        softmax_row_inplace(row.as_slice_mut().expect("standard layout"));
                        row[targets[i]] -= 1.0;
                        row *= g[[i, 0]];
                    }
                    acc(&mut grads, *logits, dx);
                }
                Op::EntropyRows(p) => {
                    let pv = self.value(*p);
                    let mut dx = pv.mapv(|x| if x > 0.0 { -(x.ln() + 1.0) } else { 0.0 });
                    dx *= &g;
                    acc(&mut grads, *p, dx);
                }
                Op::ConcatCols(parts) => {
                    let mut off = 0;
                    for &p in parts {
                        let w = self.value(p).ncols();
                        acc(&mut grads, p, g.slice(s![.., off..off + w]).to_owned());
                        off += w;
                    }
                }
                Op::Sum(x) => {
                    let gv = g[[0, 0]];
                    acc(&mut grads, *x, Mat::from_elem(self.value(*x).dim(), gv));
                }
                Op::MeanRows(x) => {
                    let (n, d) = self.value(*x).dim();
                    let row = g.row(0).mapv(|v| v / n as f64);
                    let dx = row.broadcast((n, d)).expect("broadcast").to_owned();
                    acc(&mut grads, *x, dx);
                }
                Op::SelectCol(x, c) => {
                    let mut dx = Mat::zeros(self.value(*x).dim());
                    dx.slice_mut(s![.., *c..*c + 1]).assign(&g);
                    acc(&mut grads, *x, dx);
                }
                Op::Element(x, r, c) => {
                    let mut dx = Mat::zeros(self.value(*x).dim());
                    dx[[*r, *c]] = g[[0, 0]];
                    acc(&mut grads, *x, dx);
                }
                Op::NormalizeToMean(x, target) => {
                    let xv = self.value(*x);
                    let n = xv.len() as f64;
                    let sum = xv.sum();
                    let y = &node.value;
                    let gy = (&g * y).sum() / (target * n);
                    let dx = g.mapv(|gi| gi - gy) * (target * n / sum);
                    acc(&mut grads, *x, dx);
                }
                Op::FilterMultiplier(phi, delta) => {
                    let dx = Zip::from(&g)
                        .and(self.value(*phi))
                        .map_collect(|&gi, &p| if p < *delta { gi } else { 0.0 });
                    acc(&mut grads, *phi, dx);
                }
            }
        }
        Grads(grads)
    }
}
