//! Tape-based reverse-mode differentiation over dense row-major matrices.
//!
//! A [`Tape`] records every operation of a forward pass. Trainable inputs
//! enter through [`Tape::param`] or [`Tape::gather`] with a *slot* number;
//! [`Tape::backward`] returns one gradient per slot. Inputs entered without a
//! slot (frozen teacher weights, constants) receive no gradient.

use ndarray::{s, Array2, ArrayView2, Axis, Zip};

use crate::error::{Error, Result};

pub type Mat = Array2<f64>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

enum Op {
    Leaf,
    Param { slot: usize },
    Gather { slot: Option<usize>, rows: Vec<usize>, table_rows: usize },
    GatherRows { src: Var, rows: Vec<usize> },
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    SliceCols { src: Var, start: usize },
    MatMul { a: Var, b: Var, trans_b: bool },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow { a: Var, row: Var },
    MulRow { a: Var, row: Var },
    DivCol { a: Var, col: Var },
    Scale(Var, f64),
    Sigmoid(Var),
    Tanh(Var),
    Relu(Var),
    LogSigmoid(Var),
    Log { src: Var, floor: f64 },
    RowDot(Var, Var),
    RowSum(Var),
    Sum(Var),
    LayerNorm { src: Var, inv_std: Vec<f64> },
    Attention { q: Var, k: Var, v: Var, seq_len: usize, heads: usize, probs: Vec<f64> },
}

struct Node {
    value: Mat,
    op: Op,
}

/// Gradients indexed by slot; `None` means the slot was never touched.
#[derive(Clone, Debug, Default)]
pub struct Gradients {
    slots: Vec<Option<Mat>>,
}

impl Gradients {
    pub fn get(&self, slot: usize) -> Option<&Mat> {
        self.slots.get(slot).and_then(Option::as_ref)
    }

    pub fn take(&mut self, slot: usize) -> Option<Mat> {
        self.slots.get_mut(slot).and_then(Option::take)
    }

    pub fn len(&self) -> usize {
        self.slots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slots.iter().all(Option::is_none)
    }

    fn accumulate(&mut self, slot: usize, shape: (usize, usize), f: impl FnOnce(&mut Mat)) {
        if self.slots.len() <= slot {
            self.slots.resize(slot + 1, None);
        }
        let g = self.slots[slot].get_or_insert_with(|| Mat::zeros(shape));
        f(g);
    }
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `log(sigmoid(x))` without overflow.
fn log_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        -(-x).exp().ln_1p()
    } else {
        x - x.exp().ln_1p()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Mat {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value[[0, 0]]
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.dim()
    }

    fn push(&mut self, value: Mat, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Mat) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn param(&mut self, value: &Mat, slot: usize) -> Var {
        self.push(value.clone(), Op::Param { slot })
    }

    /// Rows of a table. With `slot`, gradients are scattered back into a
    /// table-shaped gradient; without, the table is treated as frozen.
    pub fn gather(&mut self, table: &Mat, slot: Option<usize>, rows: &[usize]) -> Var {
        let d = table.ncols();
        let mut out = Mat::zeros((rows.len(), d));
        for (i, &r) in rows.iter().enumerate() {
            out.row_mut(i).assign(&table.row(r));
        }
        self.push(
            out,
            Op::Gather {
                slot,
                rows: rows.to_vec(),
                table_rows: table.nrows(),
            },
        )
    }

    pub fn gather_rows(&mut self, src: Var, rows: &[usize]) -> Var {
        let v = self.value(src);
        let mut out = Mat::zeros((rows.len(), v.ncols()));
        for (i, &r) in rows.iter().enumerate() {
            out.row_mut(i).assign(&v.row(r));
        }
        self.push(out, Op::GatherRows { src, rows: rows.to_vec() })
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let views: Vec<ArrayView2<f64>> = parts.iter().map(|p| self.value(*p).view()).collect();
        let out = ndarray::concatenate(Axis(0), &views).expect("column counts agree");
        self.push(out, Op::ConcatRows(parts.to_vec()))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let views: Vec<ArrayView2<f64>> = parts.iter().map(|p| self.value(*p).view()).collect();
        let out = ndarray::concatenate(Axis(1), &views).expect("row counts agree");
        self.push(out, Op::ConcatCols(parts.to_vec()))
    }

    pub fn slice_cols(&mut self, src: Var, start: usize, len: usize) -> Var {
        let out = self.value(src).slice(s![.., start..start + len]).to_owned();
        self.push(out, Op::SliceCols { src, start })
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).dot(self.value(b));
        self.push(out, Op::MatMul { a, b, trans_b: false })
    }

    /// `a · bᵀ`
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).dot(&self.value(b).t());
        self.push(out, Op::MatMul { a, b, trans_b: true })
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a) + self.value(b);
        self.push(out, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a) - self.value(b);
        self.push(out, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a) * self.value(b);
        self.push(out, Op::Mul(a, b))
    }

    /// Adds a `1 × n` row to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let out = self.value(a) + self.value(row);
        self.push(out, Op::AddRow { a, row })
    }

    /// Multiplies every row of `a` elementwise by a `1 × n` row.
    pub fn mul_row(&mut self, a: Var, row: Var) -> Var {
        let out = self.value(a) * self.value(row);
        self.push(out, Op::MulRow { a, row })
    }

    /// Divides every row of `a` by the matching entry of an `n × 1` column.
    pub fn div_col(&mut self, a: Var, col: Var) -> Var {
        let out = self.value(a) / self.value(col);
        self.push(out, Op::DivCol { a, col })
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        let out = self.value(a) * k;
        self.push(out, Op::Scale(a, k))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let out = self.value(a).mapv(sigmoid);
        self.push(out, Op::Sigmoid(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let out = self.value(a).mapv(f64::tanh);
        self.push(out, Op::Tanh(a))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out = self.value(a).mapv(|x| x.max(0.0));
        self.push(out, Op::Relu(a))
    }

    pub fn log_sigmoid(&mut self, a: Var) -> Var {
        let out = self.value(a).mapv(log_sigmoid);
        self.push(out, Op::LogSigmoid(a))
    }

    /// `log(max(a, floor))`; entries at or below the floor get no gradient.
    pub fn log(&mut self, src: Var, floor: f64) -> Var {
        let out = self.value(src).mapv(|x| x.max(floor).ln());
        self.push(out, Op::Log { src, floor })
    }

    /// Row-wise dot products, `n × 1`.
    pub fn row_dot(&mut self, a: Var, b: Var) -> Var {
        let prod = self.value(a) * self.value(b);
        let out = prod.sum_axis(Axis(1)).insert_axis(Axis(1));
        self.push(out, Op::RowDot(a, b))
    }

    pub fn row_sum(&mut self, a: Var) -> Var {
        let out = self.value(a).sum_axis(Axis(1)).insert_axis(Axis(1));
        self.push(out, Op::RowSum(a))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let out = Mat::from_elem((1, 1), self.value(a).sum());
        self.push(out, Op::Sum(a))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).len().max(1) as f64;
        let s = self.sum(a);
        self.scale(s, 1.0 / n)
    }

    /// Mean of squared differences over all entries.
    pub fn mse(&mut self, a: Var, b: Var) -> Var {
        let d = self.sub(a, b);
        let sq = self.mul(d, d);
        self.mean(sq)
    }

    /// Sum of `1 × 1` scalars.
    pub fn add_all(&mut self, terms: &[Var]) -> Var {
        let mut acc = terms[0];
        for t in &terms[1..] {
            acc = self.add(acc, *t);
        }
        acc
    }

    /// Row-wise standardization `(x - mean) / sqrt(var + eps)` without the
    /// affine part.
    pub fn layer_norm(&mut self, src: Var, eps: f64) -> Var {
        let x = self.value(src);
        let d = x.ncols() as f64;
        let mut out = x.clone();
        let mut inv_std = Vec::with_capacity(x.nrows());
        for mut row in out.rows_mut() {
            let mu = row.sum() / d;
            row.mapv_inplace(|v| v - mu);
            let var = row.iter().map(|v| v * v).sum::<f64>() / d;
            let is = 1.0 / (var + eps).sqrt();
            row.mapv_inplace(|v| v * is);
            inv_std.push(is);
        }
        self.push(out, Op::LayerNorm { src, inv_std })
    }

    /// Multi-head scaled dot-product self-attention over `rows / seq_len`
    /// independent sequences stored consecutively. Heads split the columns.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, seq_len: usize, heads: usize) -> Var {
        let (qm, km, vm) = (self.value(q), self.value(k), self.value(v));
        let (rows, d) = qm.dim();
        let n_seq = rows / seq_len;
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut out = Mat::zeros((rows, d));
        let mut probs = vec![0.0; n_seq * heads * seq_len * seq_len];
        for n in 0..n_seq {
            let r0 = n * seq_len;
            for h in 0..heads {
                let c0 = h * dh;
                let qh = qm.slice(s![r0..r0 + seq_len, c0..c0 + dh]);
                let kh = km.slice(s![r0..r0 + seq_len, c0..c0 + dh]);
                let vh = vm.slice(s![r0..r0 + seq_len, c0..c0 + dh]);
                let mut scores = qh.dot(&kh.t()) * scale;
                for mut row in scores.rows_mut() {
                    let m = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
                    row.mapv_inplace(|x| (x - m).exp());
                    let z = row.sum();
                    row.mapv_inplace(|x| x / z);
                }
                out.slice_mut(s![r0..r0 + seq_len, c0..c0 + dh])
                    .assign(&scores.dot(&vh));
                let base = (n * heads + h) * seq_len * seq_len;
                for (i, p) in scores.iter().enumerate() {
                    probs[base + i] = *p;
                }
            }
        }
        self.push(
            out,
            Op::Attention {
                q,
                k,
                v,
                seq_len,
                heads,
                probs,
            },
        )
    }

    /// Attention probabilities recorded by an [`Tape::attention`] node, laid
    /// out as `[sequence][head][query][key]`.
    pub fn attention_probs(&self, v: Var) -> Option<&[f64]> {
        match &self.nodes[v.0].op {
            Op::Attention { probs, .. } => Some(probs),
            _ => None,
        }
    }

    /// Reverse pass from a `1 × 1` output.
    pub fn backward(&self, output: Var) -> Result<Gradients> {
        let out_val = self.scalar(output);
        if !out_val.is_finite() {
            return Err(Error::numeric(format!("loss is not finite ({out_val})")));
        }
        let mut grads: Vec<Option<Mat>> = (0..=output.0).map(|_| None).collect();
        grads[output.0] = Some(Mat::ones((1, 1)));
        let mut result = Gradients::default();

        fn acc(grads: &mut [Option<Mat>], v: Var, g: Mat) {
            match &mut grads[v.0] {
                Some(existing) => *existing += &g,
                slot @ None => *slot = Some(g),
            }
        }

        for i in (0..=output.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            match &node.op {
                Op::Leaf => {}
                Op::Param { slot } => {
                    result.accumulate(*slot, g.dim(), |acc| *acc += &g);
                }
                Op::Gather {
                    slot,
                    rows,
                    table_rows,
                } => {
                    if let Some(slot) = slot {
                        result.accumulate(*slot, (*table_rows, g.ncols()), |acc| {
                            for (i, &r) in rows.iter().enumerate() {
                                let mut dst = acc.row_mut(r);
                                dst += &g.row(i);
                            }
                        });
                    }
                }
                Op::GatherRows { src, rows } => {
                    let mut ga = Mat::zeros(self.shape(*src));
                    for (i, &r) in rows.iter().enumerate() {
                        let mut dst = ga.row_mut(r);
                        dst += &g.row(i);
                    }
                    acc(&mut grads, *src, ga);
                }
                Op::ConcatRows(parts) => {
                    let mut r0 = 0;
                    for p in parts {
                        let n = self.shape(*p).0;
                        acc(&mut grads, *p, g.slice(s![r0..r0 + n, ..]).to_owned());
                        r0 += n;
                    }
                }
                Op::ConcatCols(parts) => {
                    let mut c0 = 0;
                    for p in parts {
                        let n = self.shape(*p).1;
                        acc(&mut grads, *p, g.slice(s![.., c0..c0 + n]).to_owned());
                        c0 += n;
                    }
                }
                Op::SliceCols { src, start } => {
                    let mut ga = Mat::zeros(self.shape(*src));
                    ga.slice_mut(s![.., *start..*start + g.ncols()]).assign(&g);
                    acc(&mut grads, *src, ga);
                }
                Op::MatMul { a, b, trans_b } => {
                    let (av, bv) = (self.value(*a), self.value(*b));
                    if *trans_b {
                        acc(&mut grads, *a, g.dot(bv));
                        acc(&mut grads, *b, g.t().dot(av));
                    } else {
                        acc(&mut grads, *a, g.dot(&bv.t()));
                        acc(&mut grads, *b, av.t().dot(&g));
                    }
                }
                Op::Add(a, b) => {
                    acc(&mut grads, *a, g.clone());
                    acc(&mut grads, *b, g);
                }
                Op::Sub(a, b) => {
                    acc(&mut grads, *b, -&g);
                    acc(&mut grads, *a, g);
                }
                Op::Mul(a, b) => {
                    acc(&mut grads, *a, &g * self.value(*b));
                    acc(&mut grads, *b, &g * self.value(*a));
                }
                Op::AddRow { a, row } => {
                    acc(&mut grads, *row, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
                    acc(&mut grads, *a, g);
                }
                Op::MulRow { a, row } => {
                    let prod = &g * self.value(*a);
                    acc(&mut grads, *row, prod.sum_axis(Axis(0)).insert_axis(Axis(0)));
                    acc(&mut grads, *a, &g * self.value(*row));
                }
                Op::DivCol { a, col } => {
                    let c = self.value(*col);
                    // d(a/c)/dc = -a/c^2 = -out/c
                    let dc = (&g * &node.value / c).sum_axis(Axis(1)).insert_axis(Axis(1));
                    acc(&mut grads, *col, -dc);
                    acc(&mut grads, *a, &g / c);
                }
                Op::Scale(a, k) => acc(&mut grads, *a, g * *k),
                Op::Sigmoid(a) => {
                    let y = &node.value;
                    acc(&mut grads, *a, &g * &y.mapv(|s| s * (1.0 - s)));
                }
                Op::Tanh(a) => {
                    let y = &node.value;
                    acc(&mut grads, *a, &g * &y.mapv(|t| 1.0 - t * t));
                }
                Op::Relu(a) => {
                    let x = self.value(*a);
                    acc(&mut grads, *a, &g * &x.mapv(|v| if v > 0.0 { 1.0 } else { 0.0 }));
                }
                Op::LogSigmoid(a) => {
                    let x = self.value(*a);
                    acc(&mut grads, *a, &g * &x.mapv(|v| sigmoid(-v)));
                }
                Op::Log { src, floor } => {
                    let x = self.value(*src);
                    let f = *floor;
                    acc(&mut grads, *src, &g * &x.mapv(|v| if v > f { 1.0 / v } else { 0.0 }));
                }
                Op::RowDot(a, b) => {
                    acc(&mut grads, *a, self.value(*b) * &g);
                    acc(&mut grads, *b, self.value(*a) * &g);
                }
                Op::RowSum(a) => {
                    let shape = self.shape(*a);
                    acc(&mut grads, *a, g.broadcast(shape).expect("column broadcast").to_owned());
                }
                Op::Sum(a) => {
                    let shape = self.shape(*a);
                    acc(&mut grads, *a, Mat::from_elem(shape, g[[0, 0]]));
                }
                Op::LayerNorm { src, inv_std } => {
                    let y = &node.value;
                    let d = y.ncols() as f64;
                    let mut gx = Mat::zeros(y.dim());
                    Zip::from(gx.rows_mut())
                        .and(g.rows())
                        .and(y.rows())
                        .and(inv_std.as_slice())
                        .for_each(|mut gx, gy, y, &is| {
                            let mean_g = gy.sum() / d;
                            let mean_gy = gy.dot(&y) / d;
                            Zip::from(&mut gx).and(&gy).and(&y).for_each(|o, &a, &b| {
                                *o = is * (a - mean_g - b * mean_gy);
                            });
                        });
                    acc(&mut grads, *src, gx);
                }
                Op::Attention {
                    q,
                    k,
                    v,
                    seq_len,
                    heads,
                    probs,
                } => {
                    let (qm, km, vm) = (self.value(*q), self.value(*k), self.value(*v));
                    let (rows, d) = qm.dim();
                    let (t, hs) = (*seq_len, *heads);
                    let dh = d / hs;
                    let scale = 1.0 / (dh as f64).sqrt();
                    let (mut gq, mut gk, mut gv) =
                        (Mat::zeros((rows, d)), Mat::zeros((rows, d)), Mat::zeros((rows, d)));
                    for n in 0..rows / t {
                        let r0 = n * t;
                        for h in 0..hs {
                            let c0 = h * dh;
                            let base = (n * hs + h) * t * t;
                            let p = ArrayView2::from_shape((t, t), &probs[base..base + t * t])
                                .expect("attention block");
                            let go = g.slice(s![r0..r0 + t, c0..c0 + dh]);
                            let qh = qm.slice(s![r0..r0 + t, c0..c0 + dh]);
                            let kh = km.slice(s![r0..r0 + t, c0..c0 + dh]);
                            let vh = vm.slice(s![r0..r0 + t, c0..c0 + dh]);
                            gv.slice_mut(s![r0..r0 + t, c0..c0 + dh]).assign(&p.t().dot(&go));
                            let dp = go.dot(&vh.t());
                            let mut ds = &dp * &p;
                            let rs = ds.sum_axis(Axis(1));
                            for (i, mut row) in ds.rows_mut().into_iter().enumerate() {
                                let pi = p.row(i);
                                Zip::from(&mut row).and(&pi).for_each(|x, &pv| *x -= pv * rs[i]);
                            }
                            ds *= scale;
                            gq.slice_mut(s![r0..r0 + t, c0..c0 + dh]).assign(&ds.dot(&kh));
                            gk.slice_mut(s![r0..r0 + t, c0..c0 + dh]).assign(&ds.t().dot(&qh));
                        }
                    }
                    acc(&mut grads, *q, gq);
                    acc(&mut grads, *k, gk);
                    acc(&mut grads, *v, gv);
                }
            }
        }
        Ok(result)
    }
}
