//! Define-by-run tape with reverse-mode differentiation.
//!
//! A [`Tape`] owns an arena of nodes; every operation appends one node
//! holding its forward value and enough information to replay its local
//! gradient rule. [`Tensor`] is a cheap handle (tape pointer + node index).
//! Nodes only ever reference earlier nodes, so iterating the arena in
//! reverse is a valid topological order and each edge contributes its
//! gradient exactly once.
//!
//! Conventions:
//! - values are row-major, shapes are explicit `Vec<usize>`;
//! - no operation mutates its inputs; every op allocates a fresh node;
//! - broadcasting is limited to scalar-with-tensor and a trailing-dimension
//!   match (`[n, d]` op `[d]`); anything richer must be spelled out;
//! - `backward` is valid once per tape until [`Tape::reset_grads`].

use std::cell::RefCell;
use std::cmp::Ordering;
use std::rc::Rc;

use crate::error::{CoreError, Result};
use crate::rng::SeedRng;
use crate::{sc, Scalar};
use rand::Rng as _;

fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

/// Stable top-k selection: largest `k` entries, ties broken by lowest index.
///
/// Returns indices in selection order. `k` larger than the row keeps everything.
pub fn topk_indices<S: Scalar>(row: &[S], k: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..row.len()).collect();
    order.sort_by(|&a, &b| {
        row[b]
            .partial_cmp(&row[a])
            .unwrap_or(Ordering::Equal)
            .then(a.cmp(&b))
    });
    order.truncate(k.min(row.len()));
    order
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Broadcast {
    None,
    LhsScalar,
    RhsScalar,
    /// Rhs is 1-D and matches the trailing dimension of lhs.
    RhsTrailing,
    /// Lhs is 1-D and matches the trailing dimension of rhs.
    LhsTrailing,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum BinKind {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Clone, Debug)]
enum Op<S: Scalar> {
    Leaf,
    Binary {
        kind: BinKind,
        lhs: usize,
        rhs: usize,
        bc: Broadcast,
    },
    Matmul {
        lhs: usize,
        rhs: usize,
        m: usize,
        k: usize,
        n: usize,
    },
    Transpose {
        input: usize,
        rows: usize,
        cols: usize,
    },
    Reshape {
        input: usize,
    },
    /// out = input * mul + add, elementwise with scalar constants.
    Scale {
        input: usize,
        mul: S,
    },
    Exp {
        input: usize,
    },
    Log {
        input: usize,
    },
    Sqrt {
        input: usize,
    },
    Tanh {
        input: usize,
    },
    Neg {
        input: usize,
    },
    Gelu {
        input: usize,
    },
    Silu {
        input: usize,
    },
    Softplus {
        input: usize,
    },
    Sigmoid {
        input: usize,
    },
    ClampMin {
        input: usize,
        floor: S,
    },
    Softmax {
        input: usize,
        axis: usize,
    },
    LayerNorm {
        input: usize,
        gain: usize,
        bias: usize,
        eps: S,
    },
    Sum {
        input: usize,
    },
    Mean {
        input: usize,
    },
    SumAxis {
        input: usize,
        axis: usize,
        scale: S,
    },
    SliceCols {
        input: usize,
        start: usize,
        width: usize,
    },
    ConcatCols {
        /// (node id, column width) per piece.
        parts: Vec<(usize, usize)>,
    },
    GatherRows {
        input: usize,
        indices: Vec<usize>,
    },
    ScatterAddRows {
        input: usize,
        indices: Vec<usize>,
    },
    /// out[i, j] = input[i, j] * scales[i]
    ScaleRows {
        input: usize,
        scales: usize,
    },
    /// Zeroes all but the top-k entries of each row along the last axis.
    TopKMask {
        input: usize,
        kept: Vec<bool>,
    },
    Dropout {
        input: usize,
        kept: Vec<bool>,
        scale: S,
    },
    /// Forward emits stored hard values; backward passes gradients to `soft`.
    StraightThrough {
        soft: usize,
    },
    /// Scalar mean of the Huber/smooth-L1 distance between input and target.
    SmoothL1 {
        input: usize,
        target: usize,
        delta: S,
    },
}

struct Node<S: Scalar> {
    data: Vec<S>,
    shape: Vec<usize>,
    requires_grad: bool,
    grad: Option<Vec<S>>,
    op: Op<S>,
}

struct TapeInner<S: Scalar> {
    nodes: Vec<Node<S>>,
    backward_done: bool,
    epoch: u64,
}

/// Recording tape. Cloning shares the underlying arena.
pub struct Tape<S: Scalar> {
    inner: Rc<RefCell<TapeInner<S>>>,
}

impl<S: Scalar> Clone for Tape<S> {
    fn clone(&self) -> Self {
        Tape {
            inner: Rc::clone(&self.inner),
        }
    }
}

impl<S: Scalar> Default for Tape<S> {
    fn default() -> Self {
        Self::new()
    }
}

/// Handle to one tape node. Cheap to clone; tied to the tape that made it.
pub struct Tensor<S: Scalar> {
    tape: Tape<S>,
    id: usize,
    epoch: u64,
}

impl<S: Scalar> std::fmt::Debug for Tensor<S> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Tensor")
            .field("id", &self.id)
            .field("shape", &self.shape())
            .finish()
    }
}

impl<S: Scalar> Clone for Tensor<S> {
    fn clone(&self) -> Self {
        Tensor {
            tape: self.tape.clone(),
            id: self.id,
            epoch: self.epoch,
        }
    }
}

impl<S: Scalar> Tape<S> {
    pub fn new() -> Self {
        Tape {
            inner: Rc::new(RefCell::new(TapeInner {
                nodes: Vec::new(),
                backward_done: false,
                epoch: 0,
            })),
        }
    }

    /// Number of nodes recorded so far.
    pub fn len(&self) -> usize {
        self.inner.borrow().nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, data: Vec<S>, shape: Vec<usize>, requires_grad: bool, op: Op<S>) -> Tensor<S> {
        let mut inner = self.inner.borrow_mut();
        let id = inner.nodes.len();
        let epoch = inner.epoch;
        inner.nodes.push(Node {
            data,
            shape,
            requires_grad,
            grad: None,
            op,
        });
        Tensor {
            tape: self.clone(),
            id,
            epoch,
        }
    }

    /// Creates a leaf node. `requires_grad` marks it as a differentiation target.
    pub fn leaf(&self, data: Vec<S>, shape: &[usize], requires_grad: bool) -> Result<Tensor<S>> {
        if numel(shape) != data.len() {
            return Err(CoreError::InvalidShape {
                op: "leaf",
                shape: shape.to_vec(),
                msg: format!("shape wants {} elements, data has {}", numel(shape), data.len()),
            });
        }
        Ok(self.push(data, shape.to_vec(), requires_grad, Op::Leaf))
    }

    /// Leaf that never receives gradients.
    pub fn constant(&self, data: Vec<S>, shape: &[usize]) -> Result<Tensor<S>> {
        self.leaf(data, shape, false)
    }

    /// Single-element constant.
    pub fn scalar(&self, v: S) -> Tensor<S> {
        self.push(vec![v], vec![1], false, Op::Leaf)
    }

    pub fn zeros(&self, shape: &[usize]) -> Tensor<S> {
        self.push(vec![S::zero(); numel(shape)], shape.to_vec(), false, Op::Leaf)
    }

    /// Column-concatenates 2-D tensors with equal row counts.
    pub fn concat_cols(&self, parts: &[&Tensor<S>]) -> Result<Tensor<S>> {
        if parts.is_empty() {
            return Err(CoreError::contract("concat_cols: no inputs"));
        }
        for p in parts {
            p.assert_live("concat_cols");
        }
        let shapes: Vec<Vec<usize>> = parts.iter().map(|p| p.shape()).collect();
        let rows = *shapes[0].first().unwrap_or(&0);
        for sh in &shapes {
            if sh.len() != 2 || sh[0] != rows {
                return Err(CoreError::ShapeMismatch {
                    op: "concat_cols",
                    lhs: shapes[0].clone(),
                    rhs: sh.clone(),
                });
            }
        }
        let widths: Vec<usize> = shapes.iter().map(|sh| sh[1]).collect();
        let total: usize = widths.iter().sum();
        let mut data = vec![S::zero(); rows * total];
        {
            let inner = self.inner.borrow();
            let mut col0 = 0usize;
            for (p, &w) in parts.iter().zip(&widths) {
                let src = &inner.nodes[p.id].data;
                for r in 0..rows {
                    data[r * total + col0..r * total + col0 + w]
                        .copy_from_slice(&src[r * w..(r + 1) * w]);
                }
                col0 += w;
            }
        }
        let requires = parts.iter().any(|p| p.requires_grad());
        Ok(self.push(
            data,
            vec![rows, total],
            requires,
            Op::ConcatCols {
                parts: parts.iter().map(|p| p.id).zip(widths).collect(),
            },
        ))
    }

    /// Drops every recorded node and invalidates existing handles.
    pub fn clear(&self) {
        let mut inner = self.inner.borrow_mut();
        inner.nodes.clear();
        inner.backward_done = false;
        inner.epoch += 1;
    }

    /// Clears accumulated gradients so `backward` may run again.
    pub fn reset_grads(&self) {
        let mut inner = self.inner.borrow_mut();
        for n in &mut inner.nodes {
            n.grad = None;
        }
        inner.backward_done = false;
    }

    /// Reverse-mode sweep from a scalar loss.
    ///
    /// Errors if the loss is not a single element, if the tape was cleared
    /// after the loss was recorded, or if `backward` already ran without an
    /// intervening [`Tape::reset_grads`].
    pub fn backward(&self, loss: &Tensor<S>) -> Result<()> {
        if !Rc::ptr_eq(&self.inner, &loss.tape.inner) {
            return Err(CoreError::contract("backward: loss belongs to a different tape"));
        }
        let mut inner = self.inner.borrow_mut();
        if loss.epoch != inner.epoch {
            return Err(CoreError::contract(
                "backward: tape was cleared; the loss handle is stale",
            ));
        }
        if inner.backward_done {
            return Err(CoreError::contract(
                "backward: gradients already computed; call reset_grads first",
            ));
        }
        if inner.nodes[loss.id].data.len() != 1 {
            return Err(CoreError::contract(format!(
                "backward: loss must be a scalar, got shape {:?}",
                inner.nodes[loss.id].shape
            )));
        }
        inner.backward_done = true;
        if !inner.nodes[loss.id].requires_grad {
            return Ok(()); // nothing reachable wants gradients
        }
        inner.nodes[loss.id].grad = Some(vec![S::one()]);

        for id in (0..=loss.id).rev() {
            let (op, g) = {
                let n = &inner.nodes[id];
                if !n.requires_grad {
                    continue;
                }
                match &n.grad {
                    None => continue,
                    Some(g) => (n.op.clone(), g.clone()),
                }
            };
            backprop_one(&mut inner, id, &op, &g);
        }
        Ok(())
    }
}

/// Adds `contrib` into the gradient buffer of `target` (if it wants one).
fn accumulate<S: Scalar>(inner: &mut TapeInner<S>, target: usize, contrib: &[S]) {
    let node = &mut inner.nodes[target];
    if !node.requires_grad {
        return;
    }
    let len = node.data.len();
    let g = node.grad.get_or_insert_with(|| vec![S::zero(); len]);
    for (gi, ci) in g.iter_mut().zip(contrib) {
        *gi += *ci;
    }
}

fn node_data<S: Scalar>(inner: &TapeInner<S>, id: usize) -> Vec<S> {
    inner.nodes[id].data.clone()
}

/// Reduces a full-shape gradient onto a broadcast operand.
fn reduce_for<S: Scalar>(g: &[S], operand_len: usize, bc_scalar: bool) -> Vec<S> {
    if bc_scalar {
        vec![g.iter().copied().fold(S::zero(), |a, b| a + b)]
    } else {
        // trailing broadcast: sum over leading rows
        let mut out = vec![S::zero(); operand_len];
        for (i, &gi) in g.iter().enumerate() {
            out[i % operand_len] += gi;
        }
        out
    }
}

fn backprop_one<S: Scalar>(inner: &mut TapeInner<S>, id: usize, op: &Op<S>, g: &[S]) {
    match op {
        Op::Leaf => {}
        Op::Binary { kind, lhs, rhs, bc } => {
            let a = node_data(inner, *lhs);
            let b = node_data(inner, *rhs);
            let out = node_data(inner, id);
            let fetch = |v: &[S], i: usize, side_scalar: bool, side_trailing: bool| -> S {
                if side_scalar {
                    v[0]
                } else if side_trailing {
                    v[i % v.len()]
                } else {
                    v[i]
                }
            };
            let (ls, lt) = (
                matches!(bc, Broadcast::LhsScalar),
                matches!(bc, Broadcast::LhsTrailing),
            );
            let (rs, rt) = (
                matches!(bc, Broadcast::RhsScalar),
                matches!(bc, Broadcast::RhsTrailing),
            );
            let n = g.len();
            let mut gl = vec![S::zero(); n];
            let mut gr = vec![S::zero(); n];
            for i in 0..n {
                let av = fetch(&a, i, ls, lt);
                let bv = fetch(&b, i, rs, rt);
                match kind {
                    BinKind::Add => {
                        gl[i] = g[i];
                        gr[i] = g[i];
                    }
                    BinKind::Sub => {
                        gl[i] = g[i];
                        gr[i] = -g[i];
                    }
                    BinKind::Mul => {
                        gl[i] = g[i] * bv;
                        gr[i] = g[i] * av;
                    }
                    BinKind::Div => {
                        gl[i] = g[i] / bv;
                        gr[i] = -g[i] * out[i] / bv;
                    }
                }
            }
            let gl = if ls || lt {
                reduce_for(&gl, a.len(), ls)
            } else {
                gl
            };
            let gr = if rs || rt {
                reduce_for(&gr, b.len(), rs)
            } else {
                gr
            };
            accumulate(inner, *lhs, &gl);
            accumulate(inner, *rhs, &gr);
        }
        Op::Matmul { lhs, rhs, m, k, n } => {
            let a = node_data(inner, *lhs);
            let b = node_data(inner, *rhs);
            // dA = g · Bᵀ ; dB = Aᵀ · g
            let mut ga = vec![S::zero(); m * k];
            for i in 0..*m {
                for j in 0..*n {
                    let gij = g[i * n + j];
                    if gij == S::zero() {
                        continue;
                    }
                    for p in 0..*k {
                        ga[i * k + p] += gij * b[p * n + j];
                    }
                }
            }
            let mut gb = vec![S::zero(); k * n];
            for i in 0..*m {
                for p in 0..*k {
                    let aip = a[i * k + p];
                    if aip == S::zero() {
                        continue;
                    }
                    for j in 0..*n {
                        gb[p * n + j] += aip * g[i * n + j];
                    }
                }
            }
            accumulate(inner, *lhs, &ga);
            accumulate(inner, *rhs, &gb);
        }
        Op::Transpose { input, rows, cols } => {
            // output is cols×rows; route g back through the same permutation
            let mut gi = vec![S::zero(); rows * cols];
            for r in 0..*rows {
                for c in 0..*cols {
                    gi[r * cols + c] = g[c * rows + r];
                }
            }
            accumulate(inner, *input, &gi);
        }
        Op::Reshape { input } => {
            accumulate(inner, *input, g);
        }
        Op::Scale { input, mul } => {
            let gi: Vec<S> = g.iter().map(|&v| v * *mul).collect();
            accumulate(inner, *input, &gi);
        }
        Op::Exp { input } => {
            let out = node_data(inner, id);
            let gi: Vec<S> = g.iter().zip(&out).map(|(&gv, &ov)| gv * ov).collect();
            accumulate(inner, *input, &gi);
        }
        Op::Log { input } => {
            let x = node_data(inner, *input);
            let gi: Vec<S> = g.iter().zip(&x).map(|(&gv, &xv)| gv / xv).collect();
            accumulate(inner, *input, &gi);
        }
        Op::Sqrt { input } => {
            let out = node_data(inner, id);
            let half = sc::<S>(0.5);
            let gi: Vec<S> = g
                .iter()
                .zip(&out)
                .map(|(&gv, &ov)| {
                    if gv == S::zero() {
                        S::zero()
                    } else {
                        gv * half / ov
                    }
                })
                .collect();
            accumulate(inner, *input, &gi);
        }
        Op::Tanh { input } => {
            let out = node_data(inner, id);
            let gi: Vec<S> = g
                .iter()
                .zip(&out)
                .map(|(&gv, &ov)| gv * (S::one() - ov * ov))
                .collect();
            accumulate(inner, *input, &gi);
        }
        Op::Neg { input } => {
            let gi: Vec<S> = g.iter().map(|&v| -v).collect();
            accumulate(inner, *input, &gi);
        }
        Op::Gelu { input } => {
            let x = node_data(inner, *input);
            let gi: Vec<S> = g
                .iter()
                .zip(&x)
                .map(|(&gv, &xv)| gv * gelu_grad(xv))
                .collect();
            accumulate(inner, *input, &gi);
        }
        Op::Silu { input } => {
            let x = node_data(inner, *input);
            let gi: Vec<S> = g
                .iter()
                .zip(&x)
                .map(|(&gv, &xv)| {
                    let s = sigmoid(xv);
                    gv * (s * (S::one() + xv * (S::one() - s)))
                })
                .collect();
            accumulate(inner, *input, &gi);
        }
        Op::Softplus { input } => {
            let x = node_data(inner, *input);
            let gi: Vec<S> = g
                .iter()
                .zip(&x)
                .map(|(&gv, &xv)| gv * sigmoid(xv))
                .collect();
            accumulate(inner, *input, &gi);
        }
        Op::Sigmoid { input } => {
            let out = node_data(inner, id);
            let gi: Vec<S> = g
                .iter()
                .zip(&out)
                .map(|(&gv, &ov)| gv * ov * (S::one() - ov))
                .collect();
            accumulate(inner, *input, &gi);
        }
        Op::ClampMin { input, floor } => {
            let x = node_data(inner, *input);
            let gi: Vec<S> = g
                .iter()
                .zip(&x)
                .map(|(&gv, &xv)| if xv > *floor { gv } else { S::zero() })
                .collect();
            accumulate(inner, *input, &gi);
        }
        Op::Softmax { input, axis } => {
            let out = node_data(inner, id);
            let shape = inner.nodes[id].shape.clone();
            let mut gi = vec![S::zero(); out.len()];
            for_each_lane(&shape, *axis, |lane| {
                // dX = s ⊙ (g − Σ g⊙s) per lane
                let dot: S = lane
                    .iter()
                    .map(|&i| g[i] * out[i])
                    .fold(S::zero(), |a, b| a + b);
                for &i in lane {
                    gi[i] = out[i] * (g[i] - dot);
                }
            });
            accumulate(inner, *input, &gi);
        }
        Op::LayerNorm {
            input,
            gain,
            bias,
            eps,
        } => {
            let x = node_data(inner, *input);
            let gamma = node_data(inner, *gain);
            let d = gamma.len();
            let rows = x.len() / d;
            let dn = sc::<S>(d as f64);
            let mut gx = vec![S::zero(); x.len()];
            let mut ggain = vec![S::zero(); d];
            let mut gbias = vec![S::zero(); d];
            for r in 0..rows {
                let row = &x[r * d..(r + 1) * d];
                let mean = row.iter().copied().fold(S::zero(), |a, b| a + b) / dn;
                let var = row
                    .iter()
                    .map(|&v| (v - mean) * (v - mean))
                    .fold(S::zero(), |a, b| a + b)
                    / dn;
                let inv_std = S::one() / (var + *eps).sqrt();
                let gr = &g[r * d..(r + 1) * d];
                let mut sum_dxhat = S::zero();
                let mut sum_dxhat_xhat = S::zero();
                let mut xhat = vec![S::zero(); d];
                let mut dxhat = vec![S::zero(); d];
                for j in 0..d {
                    xhat[j] = (row[j] - mean) * inv_std;
                    dxhat[j] = gr[j] * gamma[j];
                    sum_dxhat += dxhat[j];
                    sum_dxhat_xhat += dxhat[j] * xhat[j];
                    ggain[j] += gr[j] * xhat[j];
                    gbias[j] += gr[j];
                }
                for j in 0..d {
                    gx[r * d + j] =
                        inv_std / dn * (dn * dxhat[j] - sum_dxhat - xhat[j] * sum_dxhat_xhat);
                }
            }
            accumulate(inner, *input, &gx);
            accumulate(inner, *gain, &ggain);
            accumulate(inner, *bias, &gbias);
        }
        Op::Sum { input } => {
            let n = inner.nodes[*input].data.len();
            let gi = vec![g[0]; n];
            accumulate(inner, *input, &gi);
        }
        Op::Mean { input } => {
            let n = inner.nodes[*input].data.len();
            let gv = g[0] / sc::<S>(n as f64);
            let gi = vec![gv; n];
            accumulate(inner, *input, &gi);
        }
        Op::SumAxis { input, axis, scale } => {
            let shape = inner.nodes[*input].shape.clone();
            let (rows, cols) = (shape[0], shape[1]);
            let mut gi = vec![S::zero(); rows * cols];
            if *axis == 0 {
                for r in 0..rows {
                    for c in 0..cols {
                        gi[r * cols + c] = g[c] * *scale;
                    }
                }
            } else {
                for r in 0..rows {
                    for c in 0..cols {
                        gi[r * cols + c] = g[r] * *scale;
                    }
                }
            }
            accumulate(inner, *input, &gi);
        }
        Op::SliceCols {
            input,
            start,
            width,
        } => {
            let shape = inner.nodes[*input].shape.clone();
            let (rows, cols) = (shape[0], shape[1]);
            let mut gi = vec![S::zero(); rows * cols];
            for r in 0..rows {
                for c in 0..*width {
                    gi[r * cols + start + c] = g[r * width + c];
                }
            }
            accumulate(inner, *input, &gi);
        }
        Op::ConcatCols { parts } => {
            let total: usize = parts.iter().map(|&(_, w)| w).sum();
            let rows = inner.nodes[id].data.len() / total;
            let mut col0 = 0usize;
            for &(pid, w) in parts {
                let mut gp = vec![S::zero(); rows * w];
                for r in 0..rows {
                    gp[r * w..(r + 1) * w]
                        .copy_from_slice(&g[r * total + col0..r * total + col0 + w]);
                }
                accumulate(inner, pid, &gp);
                col0 += w;
            }
        }
        Op::GatherRows { input, indices } => {
            let shape = inner.nodes[*input].shape.clone();
            let d = shape[1];
            let mut gi = vec![S::zero(); shape[0] * d];
            for (r, &src) in indices.iter().enumerate() {
                for c in 0..d {
                    gi[src * d + c] += g[r * d + c];
                }
            }
            accumulate(inner, *input, &gi);
        }
        Op::ScatterAddRows { input, indices } => {
            let shape = inner.nodes[*input].shape.clone();
            let d = shape[1];
            let mut gi = vec![S::zero(); shape[0] * d];
            for (r, &dst) in indices.iter().enumerate() {
                for c in 0..d {
                    gi[r * d + c] = g[dst * d + c];
                }
            }
            accumulate(inner, *input, &gi);
        }
        Op::ScaleRows { input, scales } => {
            let x = node_data(inner, *input);
            let s = node_data(inner, *scales);
            let rows = s.len();
            let cols = x.len() / rows;
            let mut gx = vec![S::zero(); x.len()];
            let mut gs = vec![S::zero(); rows];
            for r in 0..rows {
                for c in 0..cols {
                    let i = r * cols + c;
                    gx[i] = g[i] * s[r];
                    gs[r] += g[i] * x[i];
                }
            }
            accumulate(inner, *input, &gx);
            accumulate(inner, *scales, &gs);
        }
        Op::TopKMask { input, kept } => {
            let gi: Vec<S> = g
                .iter()
                .zip(kept)
                .map(|(&gv, &keep)| if keep { gv } else { S::zero() })
                .collect();
            accumulate(inner, *input, &gi);
        }
        Op::Dropout { input, kept, scale } => {
            let gi: Vec<S> = g
                .iter()
                .zip(kept)
                .map(|(&gv, &keep)| if keep { gv * *scale } else { S::zero() })
                .collect();
            accumulate(inner, *input, &gi);
        }
        Op::StraightThrough { soft } => {
            accumulate(inner, *soft, g);
        }
        Op::SmoothL1 {
            input,
            target,
            delta,
        } => {
            let a = node_data(inner, *input);
            let b = node_data(inner, *target);
            let n = sc::<S>(a.len() as f64);
            let mut gi = vec![S::zero(); a.len()];
            for i in 0..a.len() {
                let d = a[i] - b[i];
                let w = if d.abs() < *delta {
                    d / *delta
                } else if d > S::zero() {
                    S::one()
                } else {
                    -S::one()
                };
                gi[i] = g[0] * w / n;
            }
            accumulate(inner, *input, &gi);
            let gt: Vec<S> = gi.iter().map(|&v| -v).collect();
            accumulate(inner, *target, &gt);
        }
    }
}

/// Visits each 1-D lane of `shape` along `axis`, passing flat indices.
fn for_each_lane(shape: &[usize], axis: usize, mut f: impl FnMut(&[usize])) {
    match shape.len() {
        1 => {
            let lane: Vec<usize> = (0..shape[0]).collect();
            f(&lane);
        }
        2 => {
            let (rows, cols) = (shape[0], shape[1]);
            if axis == 1 {
                for r in 0..rows {
                    let lane: Vec<usize> = (0..cols).map(|c| r * cols + c).collect();
                    f(&lane);
                }
            } else {
                for c in 0..cols {
                    let lane: Vec<usize> = (0..rows).map(|r| r * cols + c).collect();
                    f(&lane);
                }
            }
        }
        _ => unreachable!("ops validate ndim <= 2 before lane iteration"),
    }
}

fn sigmoid<S: Scalar>(x: S) -> S {
    if x >= S::zero() {
        S::one() / (S::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (S::one() + e)
    }
}

// tanh-form GELU; forward and gradient use the same closed form so
// finite-difference checks agree to machine precision.
fn gelu_val<S: Scalar>(x: S) -> S {
    let c = sc::<S>(0.7978845608028654); // sqrt(2/pi)
    let a = sc::<S>(0.044715);
    let half = sc::<S>(0.5);
    half * x * (S::one() + (c * (x + a * x * x * x)).tanh())
}

fn gelu_grad<S: Scalar>(x: S) -> S {
    let c = sc::<S>(0.7978845608028654);
    let a = sc::<S>(0.044715);
    let half = sc::<S>(0.5);
    let three = sc::<S>(3.0);
    let u = c * (x + a * x * x * x);
    let t = u.tanh();
    let sech2 = S::one() - t * t;
    half * (S::one() + t) + half * x * sech2 * c * (S::one() + three * a * x * x)
}

fn softplus_val<S: Scalar>(x: S) -> S {
    // max(x, 0) + ln(1 + e^{-|x|}) avoids overflow on either tail
    x.max(S::zero()) + (S::one() + (-x.abs()).exp()).ln()
}

impl<S: Scalar> Tensor<S> {
    fn assert_live(&self, op: &str) {
        let inner = self.tape.inner.borrow();
        assert!(
            self.epoch == inner.epoch && self.id < inner.nodes.len(),
            "{op}: tensor handle is stale (tape was cleared)"
        );
    }

    fn same_tape(&self, other: &Tensor<S>, op: &str) {
        assert!(
            Rc::ptr_eq(&self.tape.inner, &other.tape.inner),
            "{op}: operands come from different tapes"
        );
    }

    pub fn shape(&self) -> Vec<usize> {
        self.assert_live("shape");
        self.tape.inner.borrow().nodes[self.id].shape.clone()
    }

    pub fn numel(&self) -> usize {
        self.assert_live("numel");
        self.tape.inner.borrow().nodes[self.id].data.len()
    }

    /// Copy of the forward value.
    pub fn value(&self) -> Vec<S> {
        self.assert_live("value");
        self.tape.inner.borrow().nodes[self.id].data.clone()
    }

    /// The single element of a scalar tensor.
    pub fn item(&self) -> S {
        self.assert_live("item");
        let inner = self.tape.inner.borrow();
        let n = &inner.nodes[self.id];
        assert!(n.data.len() == 1, "item: tensor has {} elements", n.data.len());
        n.data[0]
    }

    /// Accumulated gradient, if this node participates in differentiation.
    pub fn grad(&self) -> Option<Vec<S>> {
        self.assert_live("grad");
        self.tape.inner.borrow().nodes[self.id].grad.clone()
    }

    pub fn requires_grad(&self) -> bool {
        self.assert_live("requires_grad");
        self.tape.inner.borrow().nodes[self.id].requires_grad
    }

    pub fn tape(&self) -> &Tape<S> {
        &self.tape
    }

    fn unary(&self, data: Vec<S>, op: Op<S>) -> Tensor<S> {
        let shape = self.shape();
        let requires = self.requires_grad();
        self.tape.push(data, shape, requires, op)
    }

    // ---- elementwise, infallible ----

    pub fn exp(&self) -> Tensor<S> {
        self.assert_live("exp");
        let data = self.value().iter().map(|&v| v.exp()).collect();
        self.unary(data, Op::Exp { input: self.id })
    }

    pub fn tanh(&self) -> Tensor<S> {
        self.assert_live("tanh");
        let data = self.value().iter().map(|&v| v.tanh()).collect();
        self.unary(data, Op::Tanh { input: self.id })
    }

    pub fn negate(&self) -> Tensor<S> {
        self.assert_live("negate");
        let data = self.value().iter().map(|&v| -v).collect();
        self.unary(data, Op::Neg { input: self.id })
    }

    pub fn gelu(&self) -> Tensor<S> {
        self.assert_live("gelu");
        let data = self.value().iter().map(|&v| gelu_val(v)).collect();
        self.unary(data, Op::Gelu { input: self.id })
    }

    pub fn silu(&self) -> Tensor<S> {
        self.assert_live("silu");
        let data = self.value().iter().map(|&v| v * sigmoid(v)).collect();
        self.unary(data, Op::Silu { input: self.id })
    }

    pub fn softplus(&self) -> Tensor<S> {
        self.assert_live("softplus");
        let data = self.value().iter().map(|&v| softplus_val(v)).collect();
        self.unary(data, Op::Softplus { input: self.id })
    }

    pub fn sigmoid(&self) -> Tensor<S> {
        self.assert_live("sigmoid");
        let data = self.value().iter().map(|&v| sigmoid(v)).collect();
        self.unary(data, Op::Sigmoid { input: self.id })
    }

    /// `x * mul + add` with scalar constants.
    pub fn scale(&self, mul: S, add: S) -> Tensor<S> {
        self.assert_live("scale");
        let data = self.value().iter().map(|&v| v * mul + add).collect();
        self.unary(data, Op::Scale { input: self.id, mul })
    }

    /// Elementwise `max(x, floor)`. Gradient passes only where `x > floor`.
    pub fn clamp_min(&self, floor: S) -> Tensor<S> {
        self.assert_live("clamp_min");
        let data = self.value().iter().map(|&v| v.max(floor)).collect();
        self.unary(data, Op::ClampMin { input: self.id, floor })
    }

    pub fn sum(&self) -> Tensor<S> {
        self.assert_live("sum");
        let total = self.value().iter().copied().fold(S::zero(), |a, b| a + b);
        let requires = self.requires_grad();
        self.tape
            .push(vec![total], vec![1], requires, Op::Sum { input: self.id })
    }

    pub fn mean(&self) -> Tensor<S> {
        self.assert_live("mean");
        let v = self.value();
        let total = v.iter().copied().fold(S::zero(), |a, b| a + b);
        let m = total / sc::<S>(v.len() as f64);
        let requires = self.requires_grad();
        self.tape
            .push(vec![m], vec![1], requires, Op::Mean { input: self.id })
    }

    // ---- elementwise, fallible ----

    /// Natural log. Every element must be strictly positive.
    pub fn log(&self) -> Result<Tensor<S>> {
        self.assert_live("log");
        let v = self.value();
        if v.iter().any(|&x| x <= S::zero() || x.is_nan()) {
            return Err(CoreError::Numeric {
                op: "log",
                msg: "input must be strictly positive".into(),
            });
        }
        let data = v.iter().map(|&x| x.ln()).collect();
        Ok(self.unary(data, Op::Log { input: self.id }))
    }

    /// Elementwise square root. Every element must be non-negative.
    pub fn sqrt(&self) -> Result<Tensor<S>> {
        self.assert_live("sqrt");
        let v = self.value();
        if v.iter().any(|&x| x < S::zero() || x.is_nan()) {
            return Err(CoreError::Numeric {
                op: "sqrt",
                msg: "input must be non-negative".into(),
            });
        }
        let data = v.iter().map(|&x| x.sqrt()).collect();
        Ok(self.unary(data, Op::Sqrt { input: self.id }))
    }

    // ---- binary with limited broadcasting ----

    fn broadcast_kind(
        &self,
        other: &Tensor<S>,
        op: &'static str,
    ) -> Result<(Broadcast, Vec<usize>)> {
        let ls = self.shape();
        let rs = other.shape();
        if ls == rs {
            return Ok((Broadcast::None, ls));
        }
        if numel(&rs) == 1 {
            return Ok((Broadcast::RhsScalar, ls));
        }
        if numel(&ls) == 1 {
            return Ok((Broadcast::LhsScalar, rs));
        }
        if rs.len() == 1 && ls.last() == Some(&rs[0]) {
            return Ok((Broadcast::RhsTrailing, ls));
        }
        if ls.len() == 1 && rs.last() == Some(&ls[0]) {
            return Ok((Broadcast::LhsTrailing, rs));
        }
        Err(CoreError::ShapeMismatch {
            op,
            lhs: ls,
            rhs: rs,
        })
    }

    fn binary(&self, other: &Tensor<S>, kind: BinKind, op: &'static str) -> Result<Tensor<S>> {
        self.assert_live(op);
        other.assert_live(op);
        self.same_tape(other, op);
        let (bc, out_shape) = self.broadcast_kind(other, op)?;
        let a = self.value();
        let b = other.value();
        if kind == BinKind::Div && b.iter().any(|&v| v == S::zero()) {
            return Err(CoreError::Numeric {
                op: "div",
                msg: "division by zero".into(),
            });
        }
        let n = numel(&out_shape);
        let fetch = |v: &[S], i: usize, scalar: bool, trailing: bool| -> S {
            if scalar {
                v[0]
            } else if trailing {
                v[i % v.len()]
            } else {
                v[i]
            }
        };
        let (ls, lt) = (
            matches!(bc, Broadcast::LhsScalar),
            matches!(bc, Broadcast::LhsTrailing),
        );
        let (rs, rt) = (
            matches!(bc, Broadcast::RhsScalar),
            matches!(bc, Broadcast::RhsTrailing),
        );
        let mut data = vec![S::zero(); n];
        for (i, slot) in data.iter_mut().enumerate() {
            let av = fetch(&a, i, ls, lt);
            let bv = fetch(&b, i, rs, rt);
            *slot = match kind {
                BinKind::Add => av + bv,
                BinKind::Sub => av - bv,
                BinKind::Mul => av * bv,
                BinKind::Div => av / bv,
            };
        }
        let requires = self.requires_grad() || other.requires_grad();
        Ok(self.tape.push(
            data,
            out_shape,
            requires,
            Op::Binary {
                kind,
                lhs: self.id,
                rhs: other.id,
                bc,
            },
        ))
    }

    pub fn add(&self, other: &Tensor<S>) -> Result<Tensor<S>> {
        self.binary(other, BinKind::Add, "add")
    }

    pub fn sub(&self, other: &Tensor<S>) -> Result<Tensor<S>> {
        self.binary(other, BinKind::Sub, "sub")
    }

    pub fn mul(&self, other: &Tensor<S>) -> Result<Tensor<S>> {
        self.binary(other, BinKind::Mul, "mul")
    }

    pub fn div(&self, other: &Tensor<S>) -> Result<Tensor<S>> {
        self.binary(other, BinKind::Div, "div")
    }

    /// 2-D matrix product.
    pub fn matmul(&self, other: &Tensor<S>) -> Result<Tensor<S>> {
        self.assert_live("matmul");
        other.assert_live("matmul");
        self.same_tape(other, "matmul");
        let ls = self.shape();
        let rs = other.shape();
        if ls.len() != 2 || rs.len() != 2 || ls[1] != rs[0] {
            return Err(CoreError::ShapeMismatch {
                op: "matmul",
                lhs: ls,
                rhs: rs,
            });
        }
        let (m, k, n) = (ls[0], ls[1], rs[1]);
        let a = self.value();
        let b = other.value();
        let mut data = vec![S::zero(); m * n];
        for i in 0..m {
            for p in 0..k {
                let aip = a[i * k + p];
                if aip == S::zero() {
                    continue;
                }
                let brow = &b[p * n..(p + 1) * n];
                let crow = &mut data[i * n..(i + 1) * n];
                for j in 0..n {
                    crow[j] += aip * brow[j];
                }
            }
        }
        let requires = self.requires_grad() || other.requires_grad();
        Ok(self.tape.push(
            data,
            vec![m, n],
            requires,
            Op::Matmul {
                lhs: self.id,
                rhs: other.id,
                m,
                k,
                n,
            },
        ))
    }

    pub fn transpose(&self) -> Result<Tensor<S>> {
        self.assert_live("transpose");
        let sh = self.shape();
        if sh.len() != 2 {
            return Err(CoreError::InvalidShape {
                op: "transpose",
                shape: sh,
                msg: "expects a 2-D tensor".into(),
            });
        }
        let (rows, cols) = (sh[0], sh[1]);
        let v = self.value();
        let mut data = vec![S::zero(); rows * cols];
        for r in 0..rows {
            for c in 0..cols {
                data[c * rows + r] = v[r * cols + c];
            }
        }
        let requires = self.requires_grad();
        Ok(self.tape.push(
            data,
            vec![cols, rows],
            requires,
            Op::Transpose {
                input: self.id,
                rows,
                cols,
            },
        ))
    }

    /// Reinterprets the value under a new shape with the same element count.
    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor<S>> {
        self.assert_live("reshape");
        if numel(shape) != self.numel() {
            return Err(CoreError::InvalidShape {
                op: "reshape",
                shape: shape.to_vec(),
                msg: format!("element count must stay {}", self.numel()),
            });
        }
        let requires = self.requires_grad();
        Ok(self
            .tape
            .push(self.value(), shape.to_vec(), requires, Op::Reshape { input: self.id }))
    }

    /// Softmax along `axis` with max-subtraction for stability.
    pub fn softmax(&self, axis: usize) -> Result<Tensor<S>> {
        self.assert_live("softmax");
        let sh = self.shape();
        if sh.len() > 2 || axis >= sh.len() {
            return Err(CoreError::InvalidShape {
                op: "softmax",
                shape: sh,
                msg: format!("axis {axis} invalid for this rank"),
            });
        }
        let v = self.value();
        if v.iter().any(|x| x.is_nan()) {
            return Err(CoreError::Numeric {
                op: "softmax",
                msg: "NaN in input".into(),
            });
        }
        let mut data = vec![S::zero(); v.len()];
        let mut degenerate = false;
        for_each_lane(&sh, axis, |lane| {
            let mx = lane
                .iter()
                .map(|&i| v[i])
                .fold(S::neg_infinity(), |a, b| a.max(b));
            let mut denom = S::zero();
            for &i in lane {
                let e = (v[i] - mx).exp();
                data[i] = e;
                denom += e;
            }
            if denom <= S::zero() || !denom.is_finite() {
                degenerate = true;
                return;
            }
            for &i in lane {
                data[i] = data[i] / denom;
            }
        });
        if degenerate {
            return Err(CoreError::Numeric {
                op: "softmax",
                msg: "lane sums to zero or overflows".into(),
            });
        }
        let requires = self.requires_grad();
        Ok(self
            .tape
            .push(data, sh, requires, Op::Softmax { input: self.id, axis }))
    }

    /// Layer normalization over the last dimension with learned gain and bias.
    pub fn layer_norm(&self, gain: &Tensor<S>, bias: &Tensor<S>, eps: S) -> Result<Tensor<S>> {
        self.assert_live("layer_norm");
        gain.assert_live("layer_norm");
        bias.assert_live("layer_norm");
        self.same_tape(gain, "layer_norm");
        self.same_tape(bias, "layer_norm");
        let sh = self.shape();
        let d = *sh.last().unwrap_or(&0);
        if sh.is_empty() || sh.len() > 2 || d == 0 {
            return Err(CoreError::InvalidShape {
                op: "layer_norm",
                shape: sh,
                msg: "expects a 1-D or 2-D tensor".into(),
            });
        }
        if gain.numel() != d || bias.numel() != d {
            return Err(CoreError::ShapeMismatch {
                op: "layer_norm",
                lhs: sh,
                rhs: gain.shape(),
            });
        }
        if eps <= S::zero() {
            return Err(CoreError::Numeric {
                op: "layer_norm",
                msg: "eps must be positive".into(),
            });
        }
        let x = self.value();
        let gm = gain.value();
        let bs = bias.value();
        let rows = x.len() / d;
        let dn = sc::<S>(d as f64);
        let mut data = vec![S::zero(); x.len()];
        for r in 0..rows {
            let row = &x[r * d..(r + 1) * d];
            let mean = row.iter().copied().fold(S::zero(), |a, b| a + b) / dn;
            let var = row
                .iter()
                .map(|&v| (v - mean) * (v - mean))
                .fold(S::zero(), |a, b| a + b)
                / dn;
            let inv_std = S::one() / (var + eps).sqrt();
            for j in 0..d {
                data[r * d + j] = (row[j] - mean) * inv_std * gm[j] + bs[j];
            }
        }
        let requires = self.requires_grad() || gain.requires_grad() || bias.requires_grad();
        Ok(self.tape.push(
            data,
            sh,
            requires,
            Op::LayerNorm {
                input: self.id,
                gain: gain.id,
                bias: bias.id,
                eps,
            },
        ))
    }

    /// Sums a 2-D tensor along `axis` (0 → per column, 1 → per row).
    pub fn sum_axis(&self, axis: usize) -> Result<Tensor<S>> {
        self.reduce_axis(axis, false)
    }

    /// Means a 2-D tensor along `axis`.
    pub fn mean_axis(&self, axis: usize) -> Result<Tensor<S>> {
        self.reduce_axis(axis, true)
    }

    fn reduce_axis(&self, axis: usize, mean: bool) -> Result<Tensor<S>> {
        let opname: &'static str = if mean { "mean_axis" } else { "sum_axis" };
        self.assert_live(opname);
        let sh = self.shape();
        if sh.len() != 2 || axis > 1 {
            return Err(CoreError::InvalidShape {
                op: opname,
                shape: sh,
                msg: format!("expects a 2-D tensor and axis 0 or 1, got axis {axis}"),
            });
        }
        let (rows, cols) = (sh[0], sh[1]);
        let v = self.value();
        let (out_len, denom) = if axis == 0 {
            (cols, rows)
        } else {
            (rows, cols)
        };
        let scale = if mean {
            S::one() / sc::<S>(denom as f64)
        } else {
            S::one()
        };
        let mut data = vec![S::zero(); out_len];
        for r in 0..rows {
            for c in 0..cols {
                let slot = if axis == 0 { c } else { r };
                data[slot] += v[r * cols + c];
            }
        }
        for slot in data.iter_mut() {
            *slot = *slot * scale;
        }
        let requires = self.requires_grad();
        Ok(self.tape.push(
            data,
            vec![out_len],
            requires,
            Op::SumAxis {
                input: self.id,
                axis,
                scale,
            },
        ))
    }

    /// Columns `start .. start+width` of a 2-D tensor.
    pub fn slice_cols(&self, start: usize, width: usize) -> Result<Tensor<S>> {
        self.assert_live("slice_cols");
        let sh = self.shape();
        if sh.len() != 2 {
            return Err(CoreError::InvalidShape {
                op: "slice_cols",
                shape: sh,
                msg: "expects a 2-D tensor".into(),
            });
        }
        let (rows, cols) = (sh[0], sh[1]);
        if width == 0 || start + width > cols {
            return Err(CoreError::IndexOutOfRange {
                op: "slice_cols",
                index: start + width,
                bound: cols + 1,
            });
        }
        let v = self.value();
        let mut data = vec![S::zero(); rows * width];
        for r in 0..rows {
            data[r * width..(r + 1) * width]
                .copy_from_slice(&v[r * cols + start..r * cols + start + width]);
        }
        let requires = self.requires_grad();
        Ok(self.tape.push(
            data,
            vec![rows, width],
            requires,
            Op::SliceCols {
                input: self.id,
                start,
                width,
            },
        ))
    }

    /// Selects rows of a 2-D tensor; the same row may appear repeatedly.
    pub fn gather_rows(&self, indices: &[usize]) -> Result<Tensor<S>> {
        self.assert_live("gather_rows");
        let sh = self.shape();
        if sh.len() != 2 {
            return Err(CoreError::InvalidShape {
                op: "gather_rows",
                shape: sh,
                msg: "expects a 2-D tensor".into(),
            });
        }
        let (rows, d) = (sh[0], sh[1]);
        for &i in indices {
            if i >= rows {
                return Err(CoreError::IndexOutOfRange {
                    op: "gather_rows",
                    index: i,
                    bound: rows,
                });
            }
        }
        let v = self.value();
        let mut data = vec![S::zero(); indices.len() * d];
        for (r, &src) in indices.iter().enumerate() {
            data[r * d..(r + 1) * d].copy_from_slice(&v[src * d..(src + 1) * d]);
        }
        let requires = self.requires_grad();
        Ok(self.tape.push(
            data,
            vec![indices.len(), d],
            requires,
            Op::GatherRows {
                input: self.id,
                indices: indices.to_vec(),
            },
        ))
    }

    /// Scatters rows of a `[k, d]` tensor into a fresh `[rows, d]` zero tensor,
    /// accumulating where indices repeat.
    pub fn scatter_add_rows(&self, indices: &[usize], rows: usize) -> Result<Tensor<S>> {
        self.assert_live("scatter_add_rows");
        let sh = self.shape();
        if sh.len() != 2 || sh[0] != indices.len() {
            return Err(CoreError::InvalidShape {
                op: "scatter_add_rows",
                shape: sh,
                msg: format!("expects a 2-D tensor with {} rows", indices.len()),
            });
        }
        let d = sh[1];
        for &i in indices {
            if i >= rows {
                return Err(CoreError::IndexOutOfRange {
                    op: "scatter_add_rows",
                    index: i,
                    bound: rows,
                });
            }
        }
        let v = self.value();
        let mut data = vec![S::zero(); rows * d];
        for (r, &dst) in indices.iter().enumerate() {
            for c in 0..d {
                data[dst * d + c] += v[r * d + c];
            }
        }
        let requires = self.requires_grad();
        Ok(self.tape.push(
            data,
            vec![rows, d],
            requires,
            Op::ScatterAddRows {
                input: self.id,
                indices: indices.to_vec(),
            },
        ))
    }

    /// Multiplies row `i` of a 2-D tensor by `scales[i]`.
    pub fn scale_rows(&self, scales: &Tensor<S>) -> Result<Tensor<S>> {
        self.assert_live("scale_rows");
        scales.assert_live("scale_rows");
        self.same_tape(scales, "scale_rows");
        let sh = self.shape();
        if sh.len() != 2 || scales.numel() != sh[0] {
            return Err(CoreError::ShapeMismatch {
                op: "scale_rows",
                lhs: sh,
                rhs: scales.shape(),
            });
        }
        let (rows, cols) = (sh[0], sh[1]);
        let v = self.value();
        let s = scales.value();
        let mut data = vec![S::zero(); v.len()];
        for r in 0..rows {
            for c in 0..cols {
                data[r * cols + c] = v[r * cols + c] * s[r];
            }
        }
        let requires = self.requires_grad() || scales.requires_grad();
        Ok(self.tape.push(
            data,
            sh,
            requires,
            Op::ScaleRows {
                input: self.id,
                scales: scales.id,
            },
        ))
    }

    /// Keeps the top-k entries of each row along the last axis, zeroing the
    /// rest. Ties break toward the lowest index; selected values pass through
    /// unrenormalized and gradients flow only through kept entries.
    pub fn topk_mask(&self, k: usize) -> Result<Tensor<S>> {
        self.assert_live("topk_mask");
        if k == 0 {
            return Err(CoreError::contract("topk_mask: k must be at least 1"));
        }
        let sh = self.shape();
        if sh.is_empty() || sh.len() > 2 {
            return Err(CoreError::InvalidShape {
                op: "topk_mask",
                shape: sh,
                msg: "expects a 1-D or 2-D tensor".into(),
            });
        }
        let width = *sh.last().unwrap();
        let v = self.value();
        let rows = v.len() / width;
        let mut kept = vec![false; v.len()];
        let mut data = vec![S::zero(); v.len()];
        for r in 0..rows {
            let row = &v[r * width..(r + 1) * width];
            for &j in &topk_indices(row, k) {
                kept[r * width + j] = true;
                data[r * width + j] = row[j];
            }
        }
        let requires = self.requires_grad();
        Ok(self.tape.push(
            data,
            sh,
            requires,
            Op::TopKMask {
                input: self.id,
                kept,
            },
        ))
    }

    /// Inverted-scaling dropout with drop probability `p`.
    pub fn dropout(&self, p: f64, rng: &mut SeedRng) -> Result<Tensor<S>> {
        self.assert_live("dropout");
        if !(0.0..1.0).contains(&p) {
            return Err(CoreError::contract(format!(
                "dropout: p must be in [0, 1), got {p}"
            )));
        }
        let v = self.value();
        let kept: Vec<bool> = (0..v.len()).map(|_| rng.random::<f64>() >= p).collect();
        let scale = sc::<S>(1.0 / (1.0 - p));
        let data: Vec<S> = v
            .iter()
            .zip(&kept)
            .map(|(&x, &keep)| if keep { x * scale } else { S::zero() })
            .collect();
        let requires = self.requires_grad();
        Ok(self.tape.push(
            data,
            self.shape(),
            requires,
            Op::Dropout {
                input: self.id,
                kept,
                scale,
            },
        ))
    }

    /// Emits `hard` in the forward pass while routing gradients to `soft`
    /// unchanged (straight-through estimator).
    pub fn straight_through(soft: &Tensor<S>, hard: Vec<S>) -> Result<Tensor<S>> {
        soft.assert_live("straight_through");
        if hard.len() != soft.numel() {
            return Err(CoreError::InvalidShape {
                op: "straight_through",
                shape: vec![hard.len()],
                msg: format!("hard values must have {} elements", soft.numel()),
            });
        }
        let requires = soft.requires_grad();
        Ok(soft.tape.push(
            hard,
            soft.shape(),
            requires,
            Op::StraightThrough { soft: soft.id },
        ))
    }

    /// Mean smooth-L1 (Huber) distance to `target` as a scalar.
    pub fn smooth_l1(&self, target: &Tensor<S>, delta: S) -> Result<Tensor<S>> {
        self.assert_live("smooth_l1");
        target.assert_live("smooth_l1");
        self.same_tape(target, "smooth_l1");
        if self.shape() != target.shape() {
            return Err(CoreError::ShapeMismatch {
                op: "smooth_l1",
                lhs: self.shape(),
                rhs: target.shape(),
            });
        }
        if delta <= S::zero() {
            return Err(CoreError::Numeric {
                op: "smooth_l1",
                msg: "delta must be positive".into(),
            });
        }
        let a = self.value();
        let b = target.value();
        let half = sc::<S>(0.5);
        let mut total = S::zero();
        for i in 0..a.len() {
            let d = a[i] - b[i];
            total += if d.abs() < delta {
                half * d * d / delta
            } else {
                d.abs() - half * delta
            };
        }
        let m = total / sc::<S>(a.len() as f64);
        let requires = self.requires_grad() || target.requires_grad();
        Ok(self.tape.push(
            vec![m],
            vec![1],
            requires,
            Op::SmoothL1 {
                input: self.id,
                target: target.id,
                delta,
            },
        ))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tape() -> Tape<f64> {
        Tape::new()
    }

    #[test]
    fn matmul_known_product() {
        let t = tape();
        let a = t.leaf(vec![1.0, 2.0, 3.0, 4.0], &[2, 2], false).unwrap();
        let b = t.leaf(vec![5.0, 6.0, 7.0, 8.0], &[2, 2], false).unwrap();
        let c = a.matmul(&b).unwrap();
        assert_eq!(c.value(), vec![19.0, 22.0, 43.0, 50.0]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let t = tape();
        let a = t.zeros(&[2, 3]);
        let b = t.zeros(&[2, 3]);
        let err = a.matmul(&b).unwrap_err().to_string();
        assert!(err.contains("[2, 3]"), "{err}");
    }

    #[test]
    fn softmax_extreme_logits_no_overflow() {
        let t = tape();
        let x = t.leaf(vec![1000.0, 0.0], &[2], false).unwrap();
        let s = x.softmax(0).unwrap().value();
        assert!((s[0] - 1.0).abs() < 1e-300);
        assert_eq!(s[1], 0.0);
    }

    #[test]
    fn softmax_rejects_nan() {
        let t = tape();
        let x = t.leaf(vec![f64::NAN, 0.0], &[2], false).unwrap();
        assert!(x.softmax(0).is_err());
    }

    #[test]
    fn topk_breaks_ties_toward_lowest_index() {
        assert_eq!(topk_indices(&[0.25, 0.25, 0.25, 0.25], 2), vec![0, 1]);
        assert_eq!(topk_indices(&[0.1, 0.9, 0.9], 2), vec![1, 2]);
        assert_eq!(topk_indices(&[0.5], 3), vec![0]);
    }

    #[test]
    fn topk_mask_keeps_values_unrenormalized() {
        let t = tape();
        let x = t.leaf(vec![0.1, 0.4, 0.3, 0.2], &[4], false).unwrap();
        let m = x.topk_mask(2).unwrap().value();
        assert_eq!(m, vec![0.0, 0.4, 0.3, 0.0]);
    }

    #[test]
    fn backward_simple_chain() {
        let t = tape();
        let x = t.leaf(vec![2.0], &[1], true).unwrap();
        let y = x.mul(&x).unwrap().add(&x).unwrap().sum(); // x² + x
        t.backward(&y).unwrap();
        assert_eq!(x.grad().unwrap(), vec![5.0]); // 2x + 1
    }

    #[test]
    fn backward_requires_scalar_loss() {
        let t = tape();
        let x = t.leaf(vec![1.0, 2.0], &[2], true).unwrap();
        assert!(t.backward(&x).is_err());
    }

    #[test]
    fn backward_twice_without_reset_errors() {
        let t = tape();
        let x = t.leaf(vec![1.0], &[1], true).unwrap();
        let y = x.mul(&x).unwrap();
        t.backward(&y).unwrap();
        assert!(t.backward(&y).is_err());
        t.reset_grads();
        t.backward(&y).unwrap();
        assert_eq!(x.grad().unwrap(), vec![2.0]);
    }

    #[test]
    fn cleared_tape_rejects_backward() {
        let t = tape();
        let x = t.leaf(vec![1.0], &[1], true).unwrap();
        let y = x.mul(&x).unwrap();
        t.clear();
        assert!(t.backward(&y).is_err());
    }

    #[test]
    fn frozen_leaf_gets_no_grad() {
        let t = tape();
        let x = t.leaf(vec![3.0], &[1], true).unwrap();
        let w = t.leaf(vec![4.0], &[1], false).unwrap();
        let y = x.mul(&w).unwrap();
        t.backward(&y).unwrap();
        assert_eq!(x.grad().unwrap(), vec![4.0]);
        assert!(w.grad().is_none());
    }

    #[test]
    fn ops_do_not_mutate_inputs() {
        let t = tape();
        let x = t.leaf(vec![1.0, -2.0, 3.0], &[3], false).unwrap();
        let before = x.value();
        let _ = x.gelu();
        let _ = x.scale(2.0, 1.0);
        let _ = x.topk_mask(1).unwrap();
        assert_eq!(x.value(), before);
    }

    #[test]
    fn gather_rejects_out_of_range() {
        let t = tape();
        let x = t.zeros(&[3, 2]);
        let err = x.gather_rows(&[0, 3]).unwrap_err();
        assert!(matches!(err, CoreError::IndexOutOfRange { .. }));
    }

    #[test]
    fn scatter_add_accumulates_duplicates() {
        let t = tape();
        let x = t
            .leaf(vec![1.0, 1.0, 2.0, 2.0], &[2, 2], false)
            .unwrap();
        let y = x.scatter_add_rows(&[1, 1], 3).unwrap();
        assert_eq!(y.value(), vec![0.0, 0.0, 3.0, 3.0, 0.0, 0.0]);
    }

    #[test]
    fn smooth_l1_hand_value() {
        // d = [0, 2], delta = 1: (0 + (2 - 0.5)) / 2 = 0.75
        let t = tape();
        let a = t.leaf(vec![0.0, 2.0], &[2], false).unwrap();
        let b = t.zeros(&[2]);
        let l = a.smooth_l1(&b, 1.0).unwrap();
        assert_eq!(l.item(), 0.75);
    }

    #[test]
    fn layer_norm_row_mean_equals_bias_mean() {
        let t = tape();
        let x = t
            .leaf(vec![0.3, -1.2, 2.5, 0.0, 4.0, -0.5], &[2, 3], false)
            .unwrap();
        let gain = t.leaf(vec![1.0, 1.0, 1.0], &[3], false).unwrap();
        let bias = t.leaf(vec![0.5, -0.25, 0.5], &[3], false).unwrap();
        let y = x.layer_norm(&gain, &bias, 1e-5).unwrap().value();
        let bias_mean = 0.25;
        for r in 0..2 {
            let m: f64 = y[r * 3..(r + 1) * 3].iter().sum::<f64>() / 3.0;
            assert!((m - bias_mean).abs() < 1e-9);
        }
    }

    #[test]
    fn straight_through_passes_gradient_to_soft_path() {
        let t = tape();
        let x = t.leaf(vec![0.2, 0.8], &[2], true).unwrap();
        let hard = Tensor::straight_through(&x, vec![0.0, 1.0]).unwrap();
        assert_eq!(hard.value(), vec![0.0, 1.0]);
        let w = t.leaf(vec![3.0, 7.0], &[2], false).unwrap();
        let y = hard.mul(&w).unwrap().sum();
        t.backward(&y).unwrap();
        assert_eq!(x.grad().unwrap(), vec![3.0, 7.0]);
    }
}
