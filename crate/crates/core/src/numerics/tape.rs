//! Reverse-mode differentiation over a linear tape.
//!
//! Every operation appends one node holding its output value and, when
//! gradient tracking is on, the inputs it needs for the backward rule.
//! Parameters are referenced from a borrowed [`ParamStore`] rather than
//! copied, so building a tape costs only the activations.

use std::collections::HashMap;
use std::rc::Rc;

use rand::Rng;

use crate::error::{Error, Result};
use crate::numerics::ops::{self, gemm_into};
use crate::numerics::{Float, ParamId, ParamStore, Tensor};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Backward rule for an operation defined outside this module.
pub trait Function<T: Float> {
    fn name(&self) -> &'static str;

    /// Gradients with respect to each input, given the upstream gradient of
    /// the output. `None` means no contribution.
    fn backward(
        &self,
        inputs: &[&Tensor<T>],
        output: &Tensor<T>,
        grad_output: &Tensor<T>,
    ) -> Vec<Option<Tensor<T>>>;
}

enum Stored<T: Float> {
    Owned(Tensor<T>),
    Param(ParamId),
}

enum Op<T: Float> {
    Leaf,
    Param(ParamId),
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    Sigmoid(Var),
    Softmax(Var),
    Matmul(Var, Var),
    MatmulNt(Var, Var),
    SegMatmul(Var, Var, usize),
    SegMatmulNt(Var, Var, usize),
    Linear(Var, Var, Var),
    Conv {
        x: Var,
        kernel: Var,
        bias: Var,
        dilation: usize,
        seg_len: usize,
    },
    Concat(Vec<Var>),
    SliceCols(Var, usize),
    Gather(Var, Rc<[usize]>),
    Dropout(Var, Vec<T>),
    MaskRows(Var, Rc<[bool]>),
    Sum(Var),
    Custom(Vec<Var>, Box<dyn Function<T>>),
}

struct Node<T: Float> {
    value: Stored<T>,
    op: Op<T>,
}

pub struct Tape<'p, T: Float = f32> {
    params: &'p ParamStore<T>,
    nodes: Vec<Node<T>>,
    param_vars: HashMap<ParamId, Var>,
    track: bool,
    finished: bool,
}

impl<'p, T: Float> Tape<'p, T> {
    /// Tape that records everything needed for [`Tape::backward`].
    pub fn new(params: &'p ParamStore<T>) -> Self {
        Self::with_tracking(params, true)
    }

    /// Forward-only tape; every node is detached.
    pub fn inference(params: &'p ParamStore<T>) -> Self {
        Self::with_tracking(params, false)
    }

    fn with_tracking(params: &'p ParamStore<T>, track: bool) -> Self {
        Self {
            params,
            nodes: Vec::new(),
            param_vars: HashMap::new(),
            track,
            finished: false,
        }
    }

    pub fn is_tracking(&self) -> bool {
        self.track
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        match &self.nodes[v.0].value {
            Stored::Owned(t) => t,
            Stored::Param(id) => &self.params.get(*id).value,
        }
    }

    /// True when `v` was created as a leaf (constant or parameter) or on a
    /// detached tape, i.e. it carries no operation trace.
    pub fn is_leaf(&self, v: Var) -> bool {
        matches!(self.nodes[v.0].op, Op::Leaf | Op::Param(_))
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>) -> Var {
        let op = if self.track { op } else { Op::Leaf };
        self.nodes.push(Node {
            value: Stored::Owned(value),
            op,
        });
        Var(self.nodes.len() - 1)
    }

    /// Records a constant leaf. Its gradient is still available after
    /// backward through [`Gradients::wrt`].
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.nodes.push(Node {
            value: Stored::Owned(value),
            op: Op::Leaf,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(&v) = self.param_vars.get(&id) {
            return v;
        }
        self.nodes.push(Node {
            value: Stored::Param(id),
            op: Op::Param(id),
        });
        let v = Var(self.nodes.len() - 1);
        self.param_vars.insert(id, v);
        v
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = ops::add(self.value(a), self.value(b))?;
        Ok(self.push(out, Op::Add(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = ops::elementwise_mul(self.value(a), self.value(b))?;
        Ok(self.push(out, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, a: Var, factor: T) -> Var {
        let out = self.value(a).map(|v| v * factor);
        self.push(out, Op::Scale(a, factor))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let out = ops::sigmoid(self.value(a));
        self.push(out, Op::Sigmoid(a))
    }

    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        let out = ops::softmax_rows(self.value(a))?;
        Ok(self.push(out, Op::Softmax(a)))
    }

    /// Row softmax over stacked `[seg_len, seg_len]` score blocks where rows
    /// of segment `s` only attend to its first `lens[s]` columns.
    pub fn masked_softmax_rows(&mut self, a: Var, seg_len: usize, lens: Rc<[usize]>) -> Result<Var> {
        let x = self.value(a);
        let (rows, cols) = x.expect_matrix("masked_softmax_rows")?;
        if seg_len == 0 || rows != lens.len() * seg_len {
            return Err(Error::shape(
                "masked_softmax_rows",
                format!("{rows} rows vs {} segments of {seg_len}", lens.len()),
            ));
        }
        let out = ops::softmax_rows_masked(x, seg_len, Some(&lens), cols);
        Ok(self.push(out, Op::Softmax(a)))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = ops::matmul(self.value(a), self.value(b))?;
        Ok(self.push(out, Op::Matmul(a, b)))
    }

    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = ops::matmul_nt(self.value(a), self.value(b))?;
        Ok(self.push(out, Op::MatmulNt(a, b)))
    }

    /// Per-segment `A_s · B_s` with `A: [S*n, n]`, `B: [S*n, c]`.
    pub fn seg_matmul(&mut self, a: Var, b: Var, seg_len: usize) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        let (ra, ca) = av.expect_matrix("seg_matmul")?;
        let (rb, cb) = bv.expect_matrix("seg_matmul")?;
        if ca != seg_len || ra != rb || seg_len == 0 || ra % seg_len != 0 {
            return Err(Error::shape("seg_matmul", format!("{:?} x {:?} / {seg_len}", av.shape(), bv.shape())));
        }
        let mut out = Tensor::zeros([ra, cb]);
        for s in 0..ra / seg_len {
            let a_blk = &av.data()[s * seg_len * seg_len..(s + 1) * seg_len * seg_len];
            let b_blk = &bv.data()[s * seg_len * cb..(s + 1) * seg_len * cb];
            let o_blk = &mut out.data_mut()[s * seg_len * cb..(s + 1) * seg_len * cb];
            gemm_into(a_blk, (seg_len, seg_len), false, b_blk, (seg_len, cb), false, o_blk, false);
        }
        Ok(self.push(out, Op::SegMatmul(a, b, seg_len)))
    }

    /// Per-segment `A_s · B_sᵀ` with `A, B: [S*n, c]`, giving `[S*n, n]`.
    pub fn seg_matmul_nt(&mut self, a: Var, b: Var, seg_len: usize) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        let (ra, ca) = av.expect_matrix("seg_matmul_nt")?;
        let (rb, cb) = bv.expect_matrix("seg_matmul_nt")?;
        if ca != cb || ra != rb || seg_len == 0 || ra % seg_len != 0 {
            return Err(Error::shape("seg_matmul_nt", format!("{:?} x {:?} / {seg_len}", av.shape(), bv.shape())));
        }
        let mut out = Tensor::zeros([ra, seg_len]);
        for s in 0..ra / seg_len {
            let a_blk = &av.data()[s * seg_len * ca..(s + 1) * seg_len * ca];
            let b_blk = &bv.data()[s * seg_len * ca..(s + 1) * seg_len * ca];
            let o_blk = &mut out.data_mut()[s * seg_len * seg_len..(s + 1) * seg_len * seg_len];
            gemm_into(a_blk, (seg_len, ca), false, b_blk, (seg_len, ca), true, o_blk, false);
        }
        Ok(self.push(out, Op::SegMatmulNt(a, b, seg_len)))
    }

    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let out = ops::linear(self.value(x), self.value(w), self.value(b))?;
        Ok(self.push(out, Op::Linear(x, w, b)))
    }

    pub fn conv1d_dilated(&mut self, x: Var, kernel: Var, bias: Var, dilation: usize, seg_len: usize) -> Result<Var> {
        let out = ops::conv1d_dilated_segments(self.value(x), seg_len, self.value(kernel), self.value(bias), dilation)?;
        Ok(self.push(
            out,
            Op::Conv {
                x,
                kernel,
                bias,
                dilation,
                seg_len,
            },
        ))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let values: Vec<&Tensor<T>> = parts.iter().map(|&p| self.value(p)).collect();
        let out = ops::concat_last_dim(&values)?;
        Ok(self.push(out, Op::Concat(parts.to_vec())))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let xv = self.value(x);
        let (rows, cols) = xv.expect_matrix("slice_cols")?;
        if start > end || end > cols {
            return Err(Error::shape("slice_cols", format!("{start}..{end} of {cols} columns")));
        }
        let mut out = Tensor::zeros([rows, end - start]);
        for i in 0..rows {
            out.row_mut(i).copy_from_slice(&xv.row(i)[start..end]);
        }
        Ok(self.push(out, Op::SliceCols(x, start)))
    }

    /// Row gather (embedding lookup); gradients scatter-add back.
    pub fn gather_rows(&mut self, table: Var, ids: impl Into<Rc<[usize]>>) -> Result<Var> {
        let ids = ids.into();
        let out = ops::embedding_lookup(self.value(table), &ids)?;
        Ok(self.push(out, Op::Gather(table, ids)))
    }

    pub fn dropout<R: Rng + ?Sized>(&mut self, x: Var, rate: f64, rng: &mut R) -> Result<Var> {
        ops::check_rate(rate)?;
        if rate == 0.0 {
            return Ok(x);
        }
        let mask = ops::dropout_mask::<T, R>(self.value(x).numel(), rate, rng)?;
        let xv = self.value(x);
        let data = xv.data().iter().zip(&mask).map(|(&v, &m)| v * m).collect();
        let out = Tensor::new(xv.shape().to_vec(), data)?;
        Ok(self.push(out, Op::Dropout(x, mask)))
    }

    /// Zeroes the rows whose `keep` flag is false.
    pub fn mask_rows(&mut self, x: Var, keep: Rc<[bool]>) -> Result<Var> {
        let xv = self.value(x);
        if xv.rows() != keep.len() {
            return Err(Error::shape("mask_rows", format!("{} rows vs {} flags", xv.rows(), keep.len())));
        }
        if keep.iter().all(|&k| k) {
            return Ok(x);
        }
        let mut out = xv.clone();
        for (i, &k) in keep.iter().enumerate() {
            if !k {
                out.row_mut(i).fill(T::zero());
            }
        }
        Ok(self.push(out, Op::MaskRows(x, keep)))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let out = Tensor::scalar(self.value(x).sum());
        self.push(out, Op::Sum(x))
    }

    /// Records an externally computed operation with its own backward rule.
    pub fn apply(&mut self, inputs: &[Var], output: Tensor<T>, f: Box<dyn Function<T>>) -> Var {
        self.push(output, Op::Custom(inputs.to_vec(), f))
    }

    /// Reverse sweep from a scalar. Gradients add up across every use of a
    /// value. A tape can be differentiated once.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients<T>> {
        if !self.track {
            return Err(Error::InvalidArgument("tape was built without gradient tracking".into()));
        }
        if self.finished {
            return Err(Error::BackwardTwice);
        }
        if self.value(loss).rank() != 0 {
            return Err(Error::shape(
                "backward",
                format!("loss must be a scalar, got {:?}", self.value(loss).shape()),
            ));
        }
        self.finished = true;
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::scalar(T::one()));
        for idx in (0..=loss.0).rev() {
            if matches!(self.nodes[idx].op, Op::Leaf | Op::Param(_)) {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.backward_node(idx, &g, &mut grads)?;
        }
        let params = self
            .nodes
            .iter()
            .enumerate()
            .filter_map(|(i, n)| match n.op {
                Op::Param(id) => Some((id, Var(i))),
                _ => None,
            })
            .collect();
        Ok(Gradients { grads, params })
    }

    fn backward_node(&self, idx: usize, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) -> Result<()> {
        let out = self.value(Var(idx));
        match &self.nodes[idx].op {
            Op::Leaf | Op::Param(_) => {}
            Op::Add(a, b) => {
                buf(grads, *a, self.value(*a)).add_assign(g);
                buf(grads, *b, self.value(*b)).add_assign(g);
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                for (d, (&gi, &bi)) in buf(grads, *a, av).data_mut().iter_mut().zip(g.data().iter().zip(bv.data())) {
                    *d += gi * bi;
                }
                for (d, (&gi, &ai)) in buf(grads, *b, bv).data_mut().iter_mut().zip(g.data().iter().zip(av.data())) {
                    *d += gi * ai;
                }
            }
            Op::Scale(a, f) => {
                for (d, &gi) in buf(grads, *a, self.value(*a)).data_mut().iter_mut().zip(g.data()) {
                    *d += gi * *f;
                }
            }
            Op::Sigmoid(a) => {
                for (d, (&gi, &y)) in buf(grads, *a, self.value(*a)).data_mut().iter_mut().zip(g.data().iter().zip(out.data())) {
                    *d += gi * y * (T::one() - y);
                }
            }
            Op::Softmax(a) => {
                let ga = buf(grads, *a, self.value(*a));
                for i in 0..out.rows() {
                    let (y, gr) = (out.row(i), g.row(i));
                    let dot: T = y.iter().zip(gr).map(|(&p, &q)| p * q).sum();
                    for (d, (&p, &q)) in ga.row_mut(i).iter_mut().zip(y.iter().zip(gr)) {
                        *d += p * (q - dot);
                    }
                }
            }
            Op::Matmul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (p, q, r) = (av.rows(), av.cols(), bv.cols());
                gemm_into(g.data(), (p, r), false, bv.data(), (q, r), true, buf(grads, *a, av).data_mut(), true);
                gemm_into(av.data(), (p, q), true, g.data(), (p, r), false, buf(grads, *b, bv).data_mut(), true);
            }
            Op::MatmulNt(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (p, q, r) = (av.rows(), av.cols(), bv.rows());
                gemm_into(g.data(), (p, r), false, bv.data(), (r, q), false, buf(grads, *a, av).data_mut(), true);
                gemm_into(g.data(), (p, r), true, av.data(), (p, q), false, buf(grads, *b, bv).data_mut(), true);
            }
            Op::SegMatmul(a, b, n) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (n, c) = (*n, bv.cols());
                let segs = av.rows() / n;
                let ga = buf(grads, *a, av);
                for s in 0..segs {
                    let gb_blk = &g.data()[s * n * c..(s + 1) * n * c];
                    let b_blk = &bv.data()[s * n * c..(s + 1) * n * c];
                    gemm_into(gb_blk, (n, c), false, b_blk, (n, c), true, &mut ga.data_mut()[s * n * n..(s + 1) * n * n], true);
                }
                let gb = buf(grads, *b, bv);
                for s in 0..segs {
                    let g_blk = &g.data()[s * n * c..(s + 1) * n * c];
                    let a_blk = &av.data()[s * n * n..(s + 1) * n * n];
                    gemm_into(a_blk, (n, n), true, g_blk, (n, c), false, &mut gb.data_mut()[s * n * c..(s + 1) * n * c], true);
                }
            }
            Op::SegMatmulNt(a, b, n) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (n, c) = (*n, av.cols());
                let segs = av.rows() / n;
                let ga = buf(grads, *a, av);
                for s in 0..segs {
                    let g_blk = &g.data()[s * n * n..(s + 1) * n * n];
                    let b_blk = &bv.data()[s * n * c..(s + 1) * n * c];
                    gemm_into(g_blk, (n, n), false, b_blk, (n, c), false, &mut ga.data_mut()[s * n * c..(s + 1) * n * c], true);
                }
                let gb = buf(grads, *b, bv);
                for s in 0..segs {
                    let g_blk = &g.data()[s * n * n..(s + 1) * n * n];
                    let a_blk = &av.data()[s * n * c..(s + 1) * n * c];
                    gemm_into(g_blk, (n, n), true, a_blk, (n, c), false, &mut gb.data_mut()[s * n * c..(s + 1) * n * c], true);
                }
            }
            Op::Linear(x, w, b) => {
                let (xv, wv) = (self.value(*x), self.value(*w));
                let (rows, d_in, d_out) = (xv.rows(), xv.cols(), wv.rows());
                gemm_into(g.data(), (rows, d_out), false, wv.data(), (d_out, d_in), false, buf(grads, *x, xv).data_mut(), true);
                gemm_into(g.data(), (rows, d_out), true, xv.data(), (rows, d_in), false, buf(grads, *w, wv).data_mut(), true);
                add_col_sums(buf(grads, *b, self.value(*b)), g);
            }
            Op::Conv {
                x,
                kernel,
                bias,
                dilation,
                seg_len,
            } => {
                let (xv, kv) = (self.value(*x), self.value(*kernel));
                let (d_out, d_in, k_s, pad) = ops::conv_geometry(xv, kv, self.value(*bias), *dilation)?;
                let rows = xv.rows();
                let width = d_in * k_s;
                let cols = ops::im2col(xv.data(), rows, d_in, *seg_len, k_s, *dilation, pad);
                gemm_into(g.data(), (rows, d_out), true, &cols, (rows, width), false, buf(grads, *kernel, kv).data_mut(), true);
                add_col_sums(buf(grads, *bias, self.value(*bias)), g);
                let mut gcols = vec![T::zero(); rows * width];
                gemm_into(g.data(), (rows, d_out), false, kv.data(), (d_out, width), false, &mut gcols, false);
                ops::col2im(&gcols, buf(grads, *x, xv).data_mut(), rows, d_in, *seg_len, k_s, *dilation, pad);
            }
            Op::Concat(parts) => {
                let mut off = 0;
                for &p in parts {
                    let pv = self.value(p);
                    let w = pv.cols();
                    let gp = buf(grads, p, pv);
                    for i in 0..g.rows() {
                        for (d, &s) in gp.row_mut(i).iter_mut().zip(&g.row(i)[off..off + w]) {
                            *d += s;
                        }
                    }
                    off += w;
                }
            }
            Op::SliceCols(x, start) => {
                let gx = buf(grads, *x, self.value(*x));
                let w = g.cols();
                for i in 0..g.rows() {
                    for (d, &s) in gx.row_mut(i)[*start..*start + w].iter_mut().zip(g.row(i)) {
                        *d += s;
                    }
                }
            }
            Op::Gather(table, ids) => {
                let gt = buf(grads, *table, self.value(*table));
                for (i, &id) in ids.iter().enumerate() {
                    for (d, &s) in gt.row_mut(id).iter_mut().zip(g.row(i)) {
                        *d += s;
                    }
                }
            }
            Op::Dropout(x, mask) => {
                for (d, (&gi, &m)) in buf(grads, *x, self.value(*x)).data_mut().iter_mut().zip(g.data().iter().zip(mask)) {
                    *d += gi * m;
                }
            }
            Op::MaskRows(x, keep) => {
                let gx = buf(grads, *x, self.value(*x));
                for (i, &k) in keep.iter().enumerate() {
                    if k {
                        for (d, &s) in gx.row_mut(i).iter_mut().zip(g.row(i)) {
                            *d += s;
                        }
                    }
                }
            }
            Op::Sum(x) => {
                let s = g.item();
                for d in buf(grads, *x, self.value(*x)).data_mut() {
                    *d += s;
                }
            }
            Op::Custom(inputs, f) => {
                let values: Vec<&Tensor<T>> = inputs.iter().map(|&v| self.value(v)).collect();
                let contributions = f.backward(&values, out, g);
                for (&v, c) in inputs.iter().zip(contributions) {
                    if let Some(c) = c {
                        if c.shape() != self.value(v).shape() {
                            return Err(Error::shape(f.name(), "backward returned a gradient of the wrong shape"));
                        }
                        buf(grads, v, self.value(v)).add_assign(&c);
                    }
                }
            }
        }
        Ok(())
    }
}

fn buf<'g, T: Float>(grads: &'g mut [Option<Tensor<T>>], v: Var, like: &Tensor<T>) -> &'g mut Tensor<T> {
    grads[v.0].get_or_insert_with(|| Tensor::zeros(like.shape().to_vec()))
}

fn add_col_sums<T: Float>(dst: &mut Tensor<T>, g: &Tensor<T>) {
    let d = dst.data_mut();
    for i in 0..g.rows() {
        for (acc, &v) in d.iter_mut().zip(g.row(i)) {
            *acc += v;
        }
    }
}

/// Result of one reverse sweep: gradients of leaves and parameters.
pub struct Gradients<T: Float = f32> {
    grads: Vec<Option<Tensor<T>>>,
    params: Vec<(ParamId, Var)>,
}

impl<T: Float> Gradients<T> {
    /// Gradient of the loss with respect to a leaf; `None` when the loss
    /// does not depend on it.
    pub fn wrt(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn param(&self, id: ParamId) -> Option<&Tensor<T>> {
        self.params.iter().find(|(p, _)| *p == id).and_then(|(_, v)| self.wrt(*v))
    }

    /// Adds parameter gradients into the store's `grad` buffers.
    pub fn accumulate_into(&self, store: &mut ParamStore<T>) {
        for &(id, v) in &self.params {
            if let Some(g) = self.wrt(v) {
                store.get_mut(id).grad.add_assign(g);
            }
        }
    }
}
