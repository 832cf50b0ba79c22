//! Reverse-mode automatic differentiation over [`DenseArray`] values.
//!
//! A [`Tape`] records every operation applied to its [`Var`]s. Calling
//! [`Tape::backward`] on a scalar node walks the record in reverse and returns
//! exact gradients for every node that depends on a parameter leaf.
//!
//! Arrays are treated as matrices whose columns are the last axis; the
//! token-grid model only needs 2-D kernels plus a handful of fused ops.

use std::cell::RefCell;
use std::rc::Rc;

use crate::error::{Error, Result};
use crate::numerics::array::DenseArray;

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const GELU_A: f64 = 0.044_715;

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(usize, usize),
    MatMulNt(usize, usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, f64),
    AddRow(usize, usize),
    Gelu(usize),
    LayerNorm {
        x: usize,
        gamma: usize,
        beta: usize,
        stats: Vec<(f64, f64)>,
    },
    SoftmaxRows(usize),
    SliceCols {
        x: usize,
        start: usize,
    },
    ConcatCols(Vec<usize>),
    GatherRows {
        x: usize,
        rows: Vec<usize>,
    },
    FillRows {
        src: usize,
        token: usize,
        sources: Vec<Option<usize>>,
    },
    AddPositional {
        x: usize,
        spatial: usize,
        temporal: usize,
    },
    Attention {
        qkv: usize,
        segments: Vec<usize>,
        heads: usize,
        scale: f64,
        probs: Vec<Rc<DenseArray>>,
    },
    MeanSegments {
        x: usize,
        segments: Vec<usize>,
    },
    Sum(usize),
    Reshape(usize),
    MaskedMse {
        pred: usize,
        target: Rc<DenseArray>,
        masked: Vec<usize>,
    },
    CrossEntropy {
        logits: usize,
        labels: Vec<usize>,
        probs: DenseArray,
    },
}

struct Node {
    value: Rc<DenseArray>,
    op: Op,
    requires_grad: bool,
}

/// Operation record for one forward computation.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var#{}{:?}", self.id, self.value().shape())
    }
}

/// Gradients produced by [`Tape::backward`], indexed by node.
pub struct Gradients {
    grads: Vec<Option<DenseArray>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient of the loss with respect to `v`; zeros when `v` does not
    /// influence the loss.
    pub fn wrt(&self, v: Var<'_>) -> DenseArray {
        match &self.grads[v.id] {
            Some(g) => g.clone(),
            None => DenseArray::zeros(self.shapes[v.id].clone()),
        }
    }

    /// Move the gradient out, leaving nothing behind for `v`.
    pub fn take(&mut self, v: Var<'_>) -> DenseArray {
        self.grads[v.id]
            .take()
            .unwrap_or_else(|| DenseArray::zeros(self.shapes[v.id].clone()))
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: DenseArray, op: Op, requires_grad: bool) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value: Rc::new(value),
            op,
            requires_grad,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    /// Differentiable leaf.
    pub fn param(&self, value: DenseArray) -> Var<'_> {
        self.push(value, Op::Leaf, true)
    }

    /// Non-differentiable input.
    pub fn constant(&self, value: DenseArray) -> Var<'_> {
        self.push(value, Op::Leaf, false)
    }

    fn value_of(&self, id: usize) -> Rc<DenseArray> {
        Rc::clone(&self.nodes.borrow()[id].value)
    }

    fn needs(&self, ids: &[usize]) -> bool {
        let nodes = self.nodes.borrow();
        ids.iter().any(|&i| nodes[i].requires_grad)
    }

    /// Reverse pass from a scalar `loss`.
    pub fn backward(&self, loss: Var<'_>) -> Result<Gradients> {
        let nodes = self.nodes.borrow();
        if !nodes[loss.id].value.is_scalar() {
            return Err(Error::Contract(format!(
                "backward requires a scalar loss, got shape {:?}",
                nodes[loss.id].value.shape()
            )));
        }
        let shapes = nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        let mut grads: Vec<Option<DenseArray>> = (0..nodes.len()).map(|_| None).collect();
        grads[loss.id] = Some(DenseArray::full(nodes[loss.id].value.shape().to_vec(), 1.0));

        for id in (0..=loss.id).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &nodes[id];
            if !node.requires_grad {
                continue;
            }
            backprop(&nodes, node, &g, &mut grads);
            grads[id] = Some(g);
        }
        Ok(Gradients { grads, shapes })
    }
}

fn accumulate(grads: &mut [Option<DenseArray>], nodes: &[Node], id: usize, g: DenseArray) {
    if !nodes[id].requires_grad {
        return;
    }
    match &mut grads[id] {
        Some(acc) => acc.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

fn backprop(nodes: &[Node], node: &Node, g: &DenseArray, grads: &mut [Option<DenseArray>]) {
    let val = |i: usize| -> &DenseArray { &nodes[i].value };
    let wants = |i: usize| nodes[i].requires_grad;
    match &node.op {
        Op::Leaf => {}
        Op::MatMul(a, b) => {
            let (n, k) = val(*a).dims2();
            let m = val(*b).dims2().1;
            if wants(*a) {
                let mut ga = vec![0.0; n * k];
                gemm(n, m, k, g.data(), false, val(*b).data(), true, &mut ga);
                accumulate(grads, nodes, *a, shaped(val(*a), ga));
            }
            if wants(*b) {
                let mut gb = vec![0.0; k * m];
                gemm(k, n, m, val(*a).data(), true, g.data(), false, &mut gb);
                accumulate(grads, nodes, *b, shaped(val(*b), gb));
            }
        }
        Op::MatMulNt(a, b) => {
            // out = a · bᵀ with a: n×k, b: m×k
            let (n, k) = val(*a).dims2();
            let m = val(*b).dims2().0;
            if wants(*a) {
                let mut ga = vec![0.0; n * k];
                gemm(n, m, k, g.data(), false, val(*b).data(), false, &mut ga);
                accumulate(grads, nodes, *a, shaped(val(*a), ga));
            }
            if wants(*b) {
                let mut gb = vec![0.0; m * k];
                gemm(m, n, k, g.data(), true, val(*a).data(), false, &mut gb);
                accumulate(grads, nodes, *b, shaped(val(*b), gb));
            }
        }
        Op::Add(a, b) => {
            accumulate(grads, nodes, *a, g.clone());
            accumulate(grads, nodes, *b, g.clone());
        }
        Op::Sub(a, b) => {
            accumulate(grads, nodes, *a, g.clone());
            if wants(*b) {
                accumulate(grads, nodes, *b, g.map(|x| -x));
            }
        }
        Op::Mul(a, b) => {
            if wants(*a) {
                let ga = g.zip_map(val(*b), |x, y| x * y).expect("shape");
                accumulate(grads, nodes, *a, ga);
            }
            if wants(*b) {
                let gb = g.zip_map(val(*a), |x, y| x * y).expect("shape");
                accumulate(grads, nodes, *b, gb);
            }
        }
        Op::Scale(a, s) => accumulate(grads, nodes, *a, g.map(|x| x * s)),
        Op::AddRow(x, b) => {
            accumulate(grads, nodes, *x, g.clone());
            if wants(*b) {
                let (rows, cols) = g.dims2();
                let mut gb = vec![0.0; cols];
                for r in 0..rows {
                    for (acc, v) in gb.iter_mut().zip(g.row(r)) {
                        *acc += v;
                    }
                }
                accumulate(grads, nodes, *b, shaped(val(*b), gb));
            }
        }
        Op::Gelu(x) => {
            let gx = g
                .zip_map(val(*x), |gy, x| {
                    let u = GELU_C * (x + GELU_A * x * x * x);
                    let t = u.tanh();
                    let du = GELU_C * (1.0 + 3.0 * GELU_A * x * x);
                    gy * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du)
                })
                .expect("shape");
            accumulate(grads, nodes, *x, gx);
        }
        Op::LayerNorm {
            x,
            gamma,
            beta,
            stats,
        } => {
            let xv = val(*x);
            let gv = val(*gamma).data();
            let (rows, d) = xv.dims2();
            let mut gx = vec![0.0; rows * d];
            let mut gg = vec![0.0; d];
            let mut gb = vec![0.0; d];
            let mut xhat = vec![0.0; d];
            let mut dxhat = vec![0.0; d];
            for r in 0..rows {
                let (mean, rstd) = stats[r];
                let xr = xv.row(r);
                let gr = g.row(r);
                let mut mean_dxhat = 0.0;
                let mut mean_dxhat_xhat = 0.0;
                for j in 0..d {
                    xhat[j] = (xr[j] - mean) * rstd;
                    dxhat[j] = gr[j] * gv[j];
                    gg[j] += gr[j] * xhat[j];
                    gb[j] += gr[j];
                    mean_dxhat += dxhat[j];
                    mean_dxhat_xhat += dxhat[j] * xhat[j];
                }
                mean_dxhat /= d as f64;
                mean_dxhat_xhat /= d as f64;
                let out = &mut gx[r * d..(r + 1) * d];
                for j in 0..d {
                    out[j] = rstd * (dxhat[j] - mean_dxhat - xhat[j] * mean_dxhat_xhat);
                }
            }
            accumulate(grads, nodes, *x, shaped(xv, gx));
            accumulate(grads, nodes, *gamma, shaped(val(*gamma), gg));
            accumulate(grads, nodes, *beta, shaped(val(*beta), gb));
        }
        Op::SoftmaxRows(x) => {
            let y = &node.value;
            let (rows, cols) = y.dims2();
            let mut gx = vec![0.0; rows * cols];
            for r in 0..rows {
                let yr = y.row(r);
                let gr = g.row(r);
                let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                for j in 0..cols {
                    gx[r * cols + j] = yr[j] * (gr[j] - dot);
                }
            }
            accumulate(grads, nodes, *x, shaped(y, gx));
        }
        Op::SliceCols { x, start } => {
            let xv = val(*x);
            let (rows, cols) = xv.dims2();
            let width = g.dims2().1;
            let mut gx = vec![0.0; rows * cols];
            for r in 0..rows {
                gx[r * cols + start..r * cols + start + width].copy_from_slice(g.row(r));
            }
            accumulate(grads, nodes, *x, shaped(xv, gx));
        }
        Op::ConcatCols(parts) => {
            let (rows, total) = g.dims2();
            let mut offset = 0;
            for &p in parts {
                let width = val(p).dims2().1;
                if wants(p) {
                    let mut gp = Vec::with_capacity(rows * width);
                    for r in 0..rows {
                        gp.extend_from_slice(&g.data()[r * total + offset..r * total + offset + width]);
                    }
                    accumulate(grads, nodes, p, shaped(val(p), gp));
                }
                offset += width;
            }
        }
        Op::GatherRows { x, rows } => {
            let xv = val(*x);
            let cols = xv.dims2().1;
            let mut gx = vec![0.0; xv.len()];
            for (i, &r) in rows.iter().enumerate() {
                for (acc, v) in gx[r * cols..(r + 1) * cols].iter_mut().zip(g.row(i)) {
                    *acc += v;
                }
            }
            accumulate(grads, nodes, *x, shaped(xv, gx));
        }
        Op::FillRows {
            src,
            token,
            sources,
        } => {
            let cols = g.dims2().1;
            if wants(*src) {
                let sv = val(*src);
                let mut gs = vec![0.0; sv.len()];
                for (r, s) in sources.iter().enumerate() {
                    if let Some(k) = s {
                        gs[k * cols..(k + 1) * cols].copy_from_slice(g.row(r));
                    }
                }
                accumulate(grads, nodes, *src, shaped(sv, gs));
            }
            if wants(*token) {
                let mut gt = vec![0.0; cols];
                for (r, s) in sources.iter().enumerate() {
                    if s.is_none() {
                        for (acc, v) in gt.iter_mut().zip(g.row(r)) {
                            *acc += v;
                        }
                    }
                }
                accumulate(grads, nodes, *token, shaped(val(*token), gt));
            }
        }
        Op::AddPositional {
            x,
            spatial,
            temporal,
        } => {
            accumulate(grads, nodes, *x, g.clone().reshape(val(*x).shape().to_vec()).expect("shape"));
            let (v_len, cols) = val(*spatial).dims2();
            let t_len = val(*temporal).dims2().0;
            let grid = t_len * v_len;
            let mut gs = vec![0.0; v_len * cols];
            let mut gt = vec![0.0; t_len * cols];
            for b in 0..g.dims2().0 / grid.max(1) {
                for t in 0..t_len {
                    for v in 0..v_len {
                        let gr = g.row(b * grid + t * v_len + v);
                        for j in 0..cols {
                            gs[v * cols + j] += gr[j];
                            gt[t * cols + j] += gr[j];
                        }
                    }
                }
            }
            accumulate(grads, nodes, *spatial, shaped(val(*spatial), gs));
            accumulate(grads, nodes, *temporal, shaped(val(*temporal), gt));
        }
        Op::Attention {
            qkv,
            segments,
            heads,
            scale,
            probs,
        } => {
            let xv = val(*qkv);
            let (rows, three_d) = xv.dims2();
            let d = three_d / 3;
            let dh = d / heads;
            let mut gx = vec![0.0; rows * three_d];
            let mut offset = 0;
            let mut k = 0;
            for &n in segments {
                for h in 0..*heads {
                    let p = &probs[k];
                    k += 1;
                    if n == 0 {
                        continue;
                    }
                    let q = gather_block(xv.data(), three_d, offset, n, h * dh, dh);
                    let kk = gather_block(xv.data(), three_d, offset, n, d + h * dh, dh);
                    let v = gather_block(xv.data(), three_d, offset, n, 2 * d + h * dh, dh);
                    let go = gather_block(g.data(), d, offset, n, h * dh, dh);
                    // dP = dO · Vᵀ, dV = Pᵀ · dO
                    let mut dp = vec![0.0; n * n];
                    gemm(n, dh, n, &go, false, &v, true, &mut dp);
                    let mut dv = vec![0.0; n * dh];
                    gemm(n, n, dh, p.data(), true, &go, false, &mut dv);
                    // dS = P ∘ (dP − rowsum(dP ∘ P)), pre-scaled
                    for r in 0..n {
                        let pr = &p.data()[r * n..(r + 1) * n];
                        let dr = &mut dp[r * n..(r + 1) * n];
                        let dot: f64 = pr.iter().zip(dr.iter()).map(|(a, b)| a * b).sum();
                        for j in 0..n {
                            dr[j] = pr[j] * (dr[j] - dot) * scale;
                        }
                    }
                    let mut dq = vec![0.0; n * dh];
                    gemm(n, n, dh, &dp, false, &kk, false, &mut dq);
                    let mut dk = vec![0.0; n * dh];
                    gemm(n, n, dh, &dp, true, &q, false, &mut dk);
                    scatter_block(&mut gx, three_d, offset, n, h * dh, dh, &dq);
                    scatter_block(&mut gx, three_d, offset, n, d + h * dh, dh, &dk);
                    scatter_block(&mut gx, three_d, offset, n, 2 * d + h * dh, dh, &dv);
                }
                offset += n;
            }
            accumulate(grads, nodes, *qkv, shaped(xv, gx));
        }
        Op::MeanSegments { x, segments } => {
            let xv = val(*x);
            let cols = xv.dims2().1;
            let mut gx = vec![0.0; xv.len()];
            let mut offset = 0;
            for (k, &n) in segments.iter().enumerate() {
                let inv = 1.0 / n as f64;
                for r in offset..offset + n {
                    for (dst, src) in gx[r * cols..(r + 1) * cols].iter_mut().zip(g.row(k)) {
                        *dst = src * inv;
                    }
                }
                offset += n;
            }
            accumulate(grads, nodes, *x, shaped(xv, gx));
        }
        Op::Sum(x) => {
            let xv = val(*x);
            accumulate(grads, nodes, *x, DenseArray::full(xv.shape().to_vec(), g.item()));
        }
        Op::Reshape(x) => {
            let gx = g.clone().reshape(val(*x).shape().to_vec()).expect("shape");
            accumulate(grads, nodes, *x, gx);
        }
        Op::MaskedMse {
            pred,
            target,
            masked,
        } => {
            let pv = val(*pred);
            let cols = pv.dims2().1;
            let scale = 2.0 * g.item() / masked.len() as f64;
            let mut gp = vec![0.0; pv.len()];
            for &r in masked {
                for j in 0..cols {
                    let i = r * cols + j;
                    gp[i] = scale * (pv.data()[i] - target.data()[i]);
                }
            }
            accumulate(grads, nodes, *pred, shaped(pv, gp));
        }
        Op::CrossEntropy {
            logits,
            labels,
            probs,
        } => {
            let (rows, cols) = probs.dims2();
            let scale = g.item() / rows as f64;
            let mut gl = probs.data().to_vec();
            for (r, &y) in labels.iter().enumerate() {
                gl[r * cols + y] -= 1.0;
            }
            for x in &mut gl {
                *x *= scale;
            }
            accumulate(grads, nodes, *logits, shaped(val(*logits), gl));
        }
    }
}

fn shaped(like: &DenseArray, data: Vec<f64>) -> DenseArray {
    DenseArray::new(like.shape().to_vec(), data).expect("gradient shape")
}

/// Copies the `n × width` block at (`row`, `col`) of a row-major matrix with
/// `stride` columns into a contiguous buffer.
fn gather_block(src: &[f64], stride: usize, row: usize, n: usize, col: usize, width: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(n * width);
    for r in row..row + n {
        out.extend_from_slice(&src[r * stride + col..r * stride + col + width]);
    }
    out
}

fn scatter_block(dst: &mut [f64], stride: usize, row: usize, n: usize, col: usize, width: usize, src: &[f64]) {
    for i in 0..n {
        let r = row + i;
        dst[r * stride + col..r * stride + col + width].copy_from_slice(&src[i * width..(i + 1) * width]);
    }
}

/// `c = op(a) · op(b)` where `op(a)` is m×k and `op(b)` is k×n; `c` is
/// overwritten. `a`/`b` are stored row-major in their untransposed layout.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_trans: bool,
    b: &[f64],
    b_trans: bool,
    c: &mut [f64],
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        c.fill(0.0);
        return;
    }
    let (rsa, csa) = if a_trans { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_trans { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: strides describe exactly the m×k, k×n and m×n regions of the
    // slices, whose lengths are asserted above.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            0.0,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

fn check_shape(what: &str, ok: bool, detail: impl FnOnce() -> String) -> Result<()> {
    if ok {
        Ok(())
    } else {
        Err(Error::Shape(format!("{what}: {}", detail())))
    }
}

impl<'t> Var<'t> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn value(&self) -> Rc<DenseArray> {
        self.tape.value_of(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.value().shape().to_vec()
    }

    fn unary(&self, value: DenseArray, op: Op) -> Var<'t> {
        let rg = self.tape.needs(&[self.id]);
        self.tape.push(value, op, rg)
    }

    fn binary(&self, other: Var<'t>, value: DenseArray, op: Op) -> Var<'t> {
        let rg = self.tape.needs(&[self.id, other.id]);
        self.tape.push(value, op, rg)
    }

    /// Matrix product `self · rhs` (n×k times k×m).
    pub fn matmul(&self, rhs: Var<'t>) -> Result<Var<'t>> {
        let (a, b) = (self.value(), rhs.value());
        let (n, k) = a.dims2();
        let (k2, m) = b.dims2();
        check_shape("matmul", k == k2 && b.ndim() <= 2, || {
            format!("{:?} x {:?}", a.shape(), b.shape())
        })?;
        let mut out = vec![0.0; n * m];
        gemm(n, k, m, a.data(), false, b.data(), false, &mut out);
        Ok(self.binary(rhs, DenseArray::new(vec![n, m], out)?, Op::MatMul(self.id, rhs.id)))
    }

    /// `self · rhsᵀ` (n×k times (m×k)ᵀ).
    pub fn matmul_nt(&self, rhs: Var<'t>) -> Result<Var<'t>> {
        let (a, b) = (self.value(), rhs.value());
        let (n, k) = a.dims2();
        let (m, k2) = b.dims2();
        check_shape("matmul_nt", k == k2, || format!("{:?} x {:?}ᵀ", a.shape(), b.shape()))?;
        let mut out = vec![0.0; n * m];
        gemm(n, k, m, a.data(), false, b.data(), true, &mut out);
        Ok(self.binary(rhs, DenseArray::new(vec![n, m], out)?, Op::MatMulNt(self.id, rhs.id)))
    }

    pub fn add(&self, rhs: Var<'t>) -> Result<Var<'t>> {
        let v = self.value().zip_map(&rhs.value(), |a, b| a + b)?;
        Ok(self.binary(rhs, v, Op::Add(self.id, rhs.id)))
    }

    pub fn sub(&self, rhs: Var<'t>) -> Result<Var<'t>> {
        let v = self.value().zip_map(&rhs.value(), |a, b| a - b)?;
        Ok(self.binary(rhs, v, Op::Sub(self.id, rhs.id)))
    }

    pub fn mul(&self, rhs: Var<'t>) -> Result<Var<'t>> {
        let v = self.value().zip_map(&rhs.value(), |a, b| a * b)?;
        Ok(self.binary(rhs, v, Op::Mul(self.id, rhs.id)))
    }

    pub fn scale(&self, s: f64) -> Var<'t> {
        let v = self.value().map(|a| a * s);
        self.unary(v, Op::Scale(self.id, s))
    }

    /// Adds a length-`cols` bias to every row.
    pub fn add_row(&self, bias: Var<'t>) -> Result<Var<'t>> {
        let (x, b) = (self.value(), bias.value());
        let cols = x.dims2().1;
        check_shape("add_row", b.len() == cols, || {
            format!("{:?} + {:?}", x.shape(), b.shape())
        })?;
        let bd = b.data();
        let v = DenseArray::from_fn(x.shape().to_vec(), |i| x.data()[i] + bd[i % cols]);
        Ok(self.binary(bias, v, Op::AddRow(self.id, bias.id)))
    }

    /// Affine map `self · weight + bias`.
    pub fn linear(&self, weight: Var<'t>, bias: Var<'t>) -> Result<Var<'t>> {
        self.matmul(weight)?.add_row(bias)
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&self) -> Var<'t> {
        let v = self.value().map(|x| {
            let u = GELU_C * (x + GELU_A * x * x * x);
            0.5 * x * (1.0 + u.tanh())
        });
        self.unary(v, Op::Gelu(self.id))
    }

    /// Per-row layer normalization with learned scale and shift.
    pub fn layer_norm(&self, gamma: Var<'t>, beta: Var<'t>, eps: f64) -> Result<Var<'t>> {
        let x = self.value();
        let (g, b) = (gamma.value(), beta.value());
        let (rows, d) = x.dims2();
        check_shape("layer_norm", g.len() == d && b.len() == d, || {
            format!("{:?} with scale {:?}", x.shape(), g.shape())
        })?;
        let mut out = vec![0.0; rows * d];
        let mut stats = Vec::with_capacity(rows);
        for r in 0..rows {
            let xr = x.row(r);
            let mean = xr.iter().sum::<f64>() / d as f64;
            let var = xr.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let rstd = 1.0 / (var + eps).sqrt();
            for j in 0..d {
                out[r * d + j] = (xr[j] - mean) * rstd * g.data()[j] + b.data()[j];
            }
            stats.push((mean, rstd));
        }
        let rg = self.tape.needs(&[self.id, gamma.id, beta.id]);
        let value = DenseArray::new(x.shape().to_vec(), out)?;
        Ok(self.tape.push(
            value,
            Op::LayerNorm {
                x: self.id,
                gamma: gamma.id,
                beta: beta.id,
                stats,
            },
            rg,
        ))
    }

    /// Numerically stable softmax along each row.
    pub fn softmax_rows(&self) -> Var<'t> {
        let v = softmax_rows(&self.value());
        self.unary(v, Op::SoftmaxRows(self.id))
    }

    pub fn slice_cols(&self, start: usize, width: usize) -> Result<Var<'t>> {
        let x = self.value();
        let (rows, cols) = x.dims2();
        check_shape("slice_cols", start + width <= cols, || {
            format!("columns {start}..{} of {cols}", start + width)
        })?;
        let mut out = Vec::with_capacity(rows * width);
        for r in 0..rows {
            out.extend_from_slice(&x.row(r)[start..start + width]);
        }
        let v = DenseArray::new(vec![rows, width], out)?;
        Ok(self.unary(v, Op::SliceCols { x: self.id, start }))
    }

    pub fn concat_cols(parts: &[Var<'t>]) -> Result<Var<'t>> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Shape("concat_cols of nothing".into()))?;
        let tape = first.tape;
        let values: Vec<_> = parts.iter().map(|p| p.value()).collect();
        let rows = values[0].dims2().0;
        check_shape("concat_cols", values.iter().all(|v| v.dims2().0 == rows), || {
            "row counts differ".into()
        })?;
        let total: usize = values.iter().map(|v| v.dims2().1).sum();
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for v in &values {
                out.extend_from_slice(v.row(r));
            }
        }
        let ids: Vec<usize> = parts.iter().map(|p| p.id).collect();
        let rg = tape.needs(&ids);
        Ok(tape.push(DenseArray::new(vec![rows, total], out)?, Op::ConcatCols(ids), rg))
    }

    /// Selects rows in the given order.
    pub fn gather_rows(&self, rows: &[usize]) -> Result<Var<'t>> {
        let x = self.value();
        let (n, cols) = x.dims2();
        check_shape("gather_rows", rows.iter().all(|&r| r < n), || {
            format!("row index beyond {n}")
        })?;
        let mut out = Vec::with_capacity(rows.len() * cols);
        for &r in rows {
            out.extend_from_slice(x.row(r));
        }
        let v = DenseArray::new(vec![rows.len(), cols], out)?;
        Ok(self.unary(
            v,
            Op::GatherRows {
                x: self.id,
                rows: rows.to_vec(),
            },
        ))
    }

    /// Builds a `sources.len()`-row matrix: row `r` copies `self[k]` when
    /// `sources[r] == Some(k)`, otherwise the shared `token` row.
    pub fn fill_rows(&self, token: Var<'t>, sources: &[Option<usize>]) -> Result<Var<'t>> {
        let (x, t) = (self.value(), token.value());
        let (n, cols) = x.dims2();
        check_shape("fill_rows", t.len() == cols || n == 0, || {
            format!("token {:?} for rows of width {cols}", t.shape())
        })?;
        let cols = t.len();
        let mut out = Vec::with_capacity(sources.len() * cols);
        for s in sources {
            match s {
                Some(k) if *k < n => out.extend_from_slice(x.row(*k)),
                Some(k) => return Err(Error::Shape(format!("source row {k} beyond {n}"))),
                None => out.extend_from_slice(t.data()),
            }
        }
        let v = DenseArray::new(vec![sources.len(), cols], out)?;
        Ok(self.binary(
            token,
            v,
            Op::FillRows {
                src: self.id,
                token: token.id,
                sources: sources.to_vec(),
            },
        ))
    }

    /// Adds broadcast spatial (V×D) and temporal (T×D) embeddings to a stack
    /// of t-major token grids, each `T·V` rows.
    pub fn add_positional(&self, spatial: Var<'t>, temporal: Var<'t>) -> Result<Var<'t>> {
        let (x, s, p) = (self.value(), spatial.value(), temporal.value());
        let (rows, cols) = x.dims2();
        let (v_len, sc) = s.dims2();
        let (t_len, tc) = p.dims2();
        let grid = t_len * v_len;
        check_shape(
            "add_positional",
            grid > 0 && rows % grid == 0 && sc == cols && tc == cols,
            || format!("{:?} + {:?} + {:?}", x.shape(), s.shape(), p.shape()),
        )?;
        let mut out = x.data().to_vec();
        for b in 0..rows / grid {
            for t in 0..t_len {
                for v in 0..v_len {
                    let base = (b * grid + t * v_len + v) * cols;
                    for j in 0..cols {
                        out[base + j] = (out[base + j] + s.data()[v * cols + j]) + p.data()[t * cols + j];
                    }
                }
            }
        }
        let rg = self.tape.needs(&[self.id, spatial.id, temporal.id]);
        Ok(self.tape.push(
            DenseArray::new(vec![rows, cols], out)?,
            Op::AddPositional {
                x: self.id,
                spatial: spatial.id,
                temporal: temporal.id,
            },
            rg,
        ))
    }

    /// Multi-head scaled dot-product self-attention over a packed `N × 3D`
    /// query/key/value matrix. Rows are split into consecutive `segments`
    /// that attend only within themselves; the result is `N × D` with heads
    /// concatenated. Also returns the attention maps, segment-major then head.
    pub fn attention(&self, segments: &[usize], heads: usize) -> Result<(Var<'t>, Vec<Rc<DenseArray>>)> {
        let x = self.value();
        let (rows, three_d) = x.dims2();
        check_shape(
            "attention",
            heads > 0 && three_d % (3 * heads) == 0 && segments.iter().sum::<usize>() == rows,
            || format!("{:?} with {heads} heads over segments {segments:?}", x.shape()),
        )?;
        let d = three_d / 3;
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut out = vec![0.0; rows * d];
        let mut probs = Vec::with_capacity(segments.len() * heads);
        let mut offset = 0;
        for &n in segments {
            for h in 0..heads {
                let q = gather_block(x.data(), three_d, offset, n, h * dh, dh);
                let k = gather_block(x.data(), three_d, offset, n, d + h * dh, dh);
                let v = gather_block(x.data(), three_d, offset, n, 2 * d + h * dh, dh);
                let mut scores = vec![0.0; n * n];
                gemm(n, dh, n, &q, false, &k, true, &mut scores);
                for s in &mut scores {
                    *s *= scale;
                }
                let p = softmax_rows(&DenseArray::new(vec![n, n], scores)?);
                let mut o = vec![0.0; n * dh];
                gemm(n, n, dh, p.data(), false, &v, false, &mut o);
                scatter_block(&mut out, d, offset, n, h * dh, dh, &o);
                probs.push(Rc::new(p));
            }
            offset += n;
        }
        let var = self.unary(
            DenseArray::new(vec![rows, d], out)?,
            Op::Attention {
                qkv: self.id,
                segments: segments.to_vec(),
                heads,
                scale,
                probs: probs.clone(),
            },
        );
        Ok((var, probs))
    }

    /// Column-wise mean over rows, returned as a 1×cols row.
    pub fn mean_rows(&self) -> Result<Var<'t>> {
        let rows = self.value().dims2().0;
        self.mean_segments(&[rows])
    }

    /// Column-wise mean of each run of consecutive rows; one output row per
    /// segment.
    pub fn mean_segments(&self, segments: &[usize]) -> Result<Var<'t>> {
        let x = self.value();
        let (rows, cols) = x.dims2();
        check_shape(
            "mean_segments",
            segments.iter().all(|&n| n > 0) && segments.iter().sum::<usize>() == rows,
            || format!("segments {segments:?} over {rows} rows"),
        )?;
        let mut out = vec![0.0; segments.len() * cols];
        let mut offset = 0;
        for (k, &n) in segments.iter().enumerate() {
            let acc = &mut out[k * cols..(k + 1) * cols];
            for r in offset..offset + n {
                for (a, v) in acc.iter_mut().zip(x.row(r)) {
                    *a += v;
                }
            }
            for a in acc.iter_mut() {
                *a /= n as f64;
            }
            offset += n;
        }
        Ok(self.unary(
            DenseArray::new(vec![segments.len(), cols], out)?,
            Op::MeanSegments {
                x: self.id,
                segments: segments.to_vec(),
            },
        ))
    }

    pub fn sum(&self) -> Var<'t> {
        let v = DenseArray::scalar(self.value().sum());
        self.unary(v, Op::Sum(self.id))
    }

    pub fn reshape(&self, shape: impl Into<Vec<usize>>) -> Result<Var<'t>> {
        let v = (*self.value()).clone().reshape(shape)?;
        Ok(self.unary(v, Op::Reshape(self.id)))
    }

    /// Mean over `masked` rows of the squared L2 distance between rows of
    /// `self` and `target`. Rows outside `masked` do not enter the loss.
    pub fn masked_mse(&self, target: &DenseArray, masked: &[usize]) -> Result<Var<'t>> {
        let p = self.value();
        let (rows, cols) = p.dims2();
        check_shape("masked_mse", target.dims2() == (rows, cols), || {
            format!("{:?} vs {:?}", p.shape(), target.shape())
        })?;
        if masked.is_empty() {
            return Err(Error::Contract("masked loss over an empty masked set".into()));
        }
        let mut total = 0.0;
        for &r in masked {
            if r >= rows {
                return Err(Error::Shape(format!("masked row {r} beyond {rows}")));
            }
            let mut sq = 0.0;
            for (a, b) in p.row(r).iter().zip(target.row(r)) {
                sq += (a - b) * (a - b);
            }
            total += sq;
        }
        let v = DenseArray::scalar(total / masked.len() as f64);
        Ok(self.unary(
            v,
            Op::MaskedMse {
                pred: self.id,
                target: Rc::new(target.clone()),
                masked: masked.to_vec(),
            },
        ))
    }

    /// Mean softmax cross-entropy of row logits against class labels.
    pub fn cross_entropy(&self, labels: &[usize]) -> Result<Var<'t>> {
        let x = self.value();
        let (rows, cols) = x.dims2();
        check_shape("cross_entropy", labels.len() == rows && rows > 0, || {
            format!("{} labels for {rows} rows", labels.len())
        })?;
        if let Some(&bad) = labels.iter().find(|&&y| y >= cols) {
            return Err(Error::Shape(format!("label {bad} beyond {cols} classes")));
        }
        let probs = softmax_rows(&x);
        let loss = labels
            .iter()
            .enumerate()
            .map(|(r, &y)| -probs.data()[r * cols + y].max(f64::MIN_POSITIVE).ln())
            .sum::<f64>()
            / rows as f64;
        Ok(self.unary(
            DenseArray::scalar(loss),
            Op::CrossEntropy {
                logits: self.id,
                labels: labels.to_vec(),
                probs,
            },
        ))
    }
}

/// Max-subtracted softmax along the last axis.
pub fn softmax_rows(x: &DenseArray) -> DenseArray {
    let (rows, cols) = x.dims2();
    let mut out = vec![0.0; rows * cols];
    for r in 0..rows {
        let xr = x.row(r);
        let max = xr.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut denom = 0.0;
        for j in 0..cols {
            let e = (xr[j] - max).exp();
            out[r * cols + j] = e;
            denom += e;
        }
        for v in &mut out[r * cols..(r + 1) * cols] {
            *v /= denom;
        }
    }
    DenseArray::new(x.shape().to_vec(), out).expect("same shape")
}
