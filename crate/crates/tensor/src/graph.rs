//! Reverse-mode autodiff over a recorded operation tape.
//!
//! A [`Graph`] owns every tensor produced during one forward pass. Nodes are
//! appended in creation order, so the tape is topologically ordered by
//! construction and [`Graph::backward`] is a single reverse sweep that visits
//! each node exactly once.
//!
//! Conventions:
//! - storage is `F` (f32 in training, f64 in verification); reductions
//!   (sums, means, moments, softmax denominators) accumulate in f64,
//! - scalars have shape `[1]`,
//! - broadcasting is limited to equal shapes, single-element tensors, and
//!   suffix broadcast (the smaller shape is a suffix of the larger one).

use std::collections::BTreeMap;

use crate::error::{Result, TensorError};
use crate::params::ParamStore;
use crate::real::Real;
use crate::tensor::{numel, Tensor};

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct NodeId(pub usize);

/// Supported elementwise binary kinds.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BinKind {
    Add,
    Mul,
    Div,
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Bin {
        kind: BinKind,
        a: NodeId,
        b: NodeId,
    },
    Scale {
        a: NodeId,
        c: f64,
    },
    Relu(NodeId),
    Gelu(NodeId),
    Sigmoid(NodeId),
    Ln(NodeId),
    Matmul {
        a: NodeId,
        b: NodeId,
    },
    Transpose2(NodeId),
    Permute3 {
        a: NodeId,
        perm: [usize; 3],
    },
    Reshape(NodeId),
    Slice {
        a: NodeId,
        axis: usize,
        start: usize,
        len: usize,
    },
    Concat {
        inputs: Vec<NodeId>,
        axis: usize,
    },
    Repeat {
        a: NodeId,
        axis: usize,
        n: usize,
    },
    SumAll(NodeId),
    SumAxis {
        a: NodeId,
        axis: usize,
        mean: bool,
    },
    Softmax {
        a: NodeId,
        axis: usize,
    },
    LayerNorm {
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        eps: f64,
    },
    Conv2d {
        x: NodeId,
        w: NodeId,
        bias: Option<NodeId>,
        stride: usize,
        padding: usize,
    },
    PadReplicate2d {
        x: NodeId,
        pad: usize,
    },
    BilinearSample {
        value: NodeId,
        points: NodeId,
    },
    DeformCore {
        values: Vec<NodeId>,
        sides: Vec<usize>,
        offsets: NodeId,
        weights: NodeId,
        refs: NodeId,
        heads: usize,
        points: usize,
    },
    UpsampleBilinear {
        x: NodeId,
        out_h: usize,
        out_w: usize,
    },
    Embedding {
        table: NodeId,
        ids: Vec<usize>,
    },
    PatchExtract {
        x: NodeId,
        patch: usize,
    },
    NormalizeRows {
        x: NodeId,
        eps: f64,
    },
    BceWithLogitsMean {
        logits: NodeId,
        targets: Vec<f64>,
    },
}

struct Node<F: Real> {
    value: Tensor<F>,
    op: Op,
    needs_grad: bool,
}

/// Recorded forward tape plus parameter bindings for one forward/backward pass.
pub struct Graph<F: Real> {
    nodes: Vec<Node<F>>,
    param_ids: BTreeMap<String, NodeId>,
}

impl<F: Real> Default for Graph<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Real> Graph<F> {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            param_ids: BTreeMap::new(),
        }
    }

    fn push(&mut self, value: Tensor<F>, op: Op, needs_grad: bool) -> NodeId {
        let id = NodeId(self.nodes.len());
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        id
    }

    fn needs(&self, id: NodeId) -> bool {
        self.nodes[id.0].needs_grad
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor<F> {
        &self.nodes[id.0].value
    }

    pub fn data(&self, id: NodeId) -> &[F] {
        &self.nodes[id.0].value.data
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        &self.nodes[id.0].value.shape
    }

    pub fn grad(&self, id: NodeId) -> Option<&[F]> {
        self.nodes[id.0].value.grad.as_deref()
    }

    /// Insert a leaf tensor. Gradients are tracked iff `requires_grad`.
    pub fn leaf(&mut self, t: Tensor<F>) -> NodeId {
        let needs = t.requires_grad;
        self.push(t, Op::Leaf, needs)
    }

    /// Constant leaf (no gradient).
    pub fn constant(&mut self, shape: Vec<usize>, data: Vec<F>) -> Result<NodeId> {
        Ok(self.leaf(Tensor::from_vec(shape, data)?))
    }

    pub fn scalar_const(&mut self, v: F) -> NodeId {
        self.leaf(Tensor::scalar(v))
    }

    /// Bind a named parameter from `store` as a leaf, memoized per name so
    /// repeated uses share one node and gradients accumulate.
    pub fn param(&mut self, store: &ParamStore<F>, name: &str) -> Result<NodeId> {
        if let Some(&id) = self.param_ids.get(name) {
            return Ok(id);
        }
        let p = store
            .get(name)
            .ok_or_else(|| TensorError::UnknownParam(name.to_string()))?;
        let t = Tensor::from_vec(p.shape.clone(), p.data.clone())?.with_grad(p.trainable);
        let id = self.leaf(t);
        self.param_ids.insert(name.to_string(), id);
        Ok(id)
    }

    /// Node ids of every parameter bound via [`Graph::param`], by name.
    pub fn bound_params(&self) -> impl Iterator<Item = (&str, NodeId)> {
        self.param_ids.iter().map(|(k, &v)| (k.as_str(), v))
    }

    // ── elementwise ─────────────────────────────────────────────────────

    fn bin(&mut self, kind: BinKind, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let (na, nb) = (numel(&sa), numel(&sb));
        let ok = sa == sb
            || na == 1
            || nb == 1
            || (nb < na && sa.ends_with(&sb))
            || (na < nb && sb.ends_with(&sa));
        if !ok {
            return Err(TensorError::ShapeMismatch {
                op: "elementwise",
                lhs: sa,
                rhs: sb,
            });
        }
        let out_shape = if na >= nb { sa.clone() } else { sb.clone() };
        let n = numel(&out_shape);
        let da = &self.nodes[a.0].value.data;
        let db = &self.nodes[b.0].value.data;
        let mut out = Vec::with_capacity(n);
        for i in 0..n {
            let x = da[i % na];
            let y = db[i % nb];
            out.push(match kind {
                BinKind::Add => x + y,
                BinKind::Mul => x * y,
                BinKind::Div => x / y,
            });
        }
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(
            Tensor::from_vec(out_shape, out)?,
            Op::Bin { kind, a, b },
            needs,
        ))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.bin(BinKind::Add, a, b)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.bin(BinKind::Mul, a, b)
    }

    pub fn div(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.bin(BinKind::Div, a, b)
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> NodeId {
        let cf = F::from_f64(c);
        let t = Tensor {
            shape: self.shape(a).to_vec(),
            data: self.data(a).iter().map(|&x| x * cf).collect(),
            requires_grad: false,
            grad: None,
        };
        let needs = self.needs(a);
        self.push(t, Op::Scale { a, c }, needs)
    }

    fn unary(&mut self, a: NodeId, op: Op, f: impl Fn(F) -> F) -> NodeId {
        let t = Tensor {
            shape: self.shape(a).to_vec(),
            data: self.data(a).iter().map(|&x| f(x)).collect(),
            requires_grad: false,
            grad: None,
        };
        let needs = self.needs(a);
        self.push(t, op, needs)
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        self.unary(a, Op::Relu(a), |x| x.maximum(F::ZERO))
    }

    pub fn gelu(&mut self, a: NodeId) -> NodeId {
        let half = F::from_f64(0.5);
        let inv_sqrt2 = F::from_f64(std::f64::consts::FRAC_1_SQRT_2);
        self.unary(a, Op::Gelu(a), |x| {
            half * x * (F::ONE + (x * inv_sqrt2).erf())
        })
    }

    pub fn sigmoid(&mut self, a: NodeId) -> NodeId {
        self.unary(a, Op::Sigmoid(a), |x| F::ONE / (F::ONE + (-x).exp()))
    }

    /// Natural log; errors on non-positive entries rather than emitting
    /// non-finite values.
    pub fn ln(&mut self, a: NodeId) -> Result<NodeId> {
        if self.data(a).iter().any(|&x| x <= F::ZERO) {
            return Err(TensorError::Domain {
                op: "ln",
                msg: "non-positive input".into(),
            });
        }
        Ok(self.unary(a, Op::Ln(a), |x| x.ln()))
    }

    // ── linear algebra ──────────────────────────────────────────────────

    /// Matrix product. Supports `[m,k]x[k,n]`, batched `[B,m,k]x[B,k,n]`,
    /// and shared-rhs `[B,m,k]x[k,n]`.
    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        let err = || TensorError::ShapeMismatch {
            op: "matmul",
            lhs: sa.clone(),
            rhs: sb.clone(),
        };
        let (batch, m, k, n, out_shape) = match (sa.len(), sb.len()) {
            (2, 2) => {
                if sa[1] != sb[0] {
                    return Err(err());
                }
                (1, sa[0], sa[1], sb[1], vec![sa[0], sb[1]])
            }
            (3, 3) => {
                if sa[0] != sb[0] || sa[2] != sb[1] {
                    return Err(err());
                }
                (sa[0], sa[1], sa[2], sb[2], vec![sa[0], sa[1], sb[2]])
            }
            (3, 2) => {
                if sa[2] != sb[0] {
                    return Err(err());
                }
                (sa[0], sa[1], sa[2], sb[1], vec![sa[0], sa[1], sb[1]])
            }
            _ => return Err(err()),
        };
        let b_batched = sb.len() == 3;
        let da = &self.nodes[a.0].value.data;
        let db = &self.nodes[b.0].value.data;
        let mut out = vec![F::ZERO; batch * m * n];
        for bi in 0..batch {
            let a_off = bi * m * k;
            let b_off = if b_batched { bi * k * n } else { 0 };
            matmul_kernel(
                &da[a_off..a_off + m * k],
                &db[b_off..b_off + k * n],
                &mut out[bi * m * n..(bi + 1) * m * n],
                m,
                k,
                n,
            );
        }
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(
            Tensor::from_vec(out_shape, out)?,
            Op::Matmul { a, b },
            needs,
        ))
    }

    /// Swap the two axes of a rank-2 tensor.
    pub fn transpose(&mut self, a: NodeId) -> Result<NodeId> {
        let s = self.shape(a).to_vec();
        if s.len() != 2 {
            return Err(TensorError::Dimension {
                op: "transpose",
                msg: "rank-2 required".into(),
                shape: s,
            });
        }
        let (r, c) = (s[0], s[1]);
        let d = &self.nodes[a.0].value.data;
        let mut out = vec![F::ZERO; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = d[i * c + j];
            }
        }
        let needs = self.needs(a);
        Ok(self.push(
            Tensor::from_vec(vec![c, r], out)?,
            Op::Transpose2(a),
            needs,
        ))
    }

    /// Permute the axes of a rank-3 tensor.
    pub fn permute3(&mut self, a: NodeId, perm: [usize; 3]) -> Result<NodeId> {
        let s = self.shape(a).to_vec();
        if s.len() != 3 {
            return Err(TensorError::Dimension {
                op: "permute3",
                msg: "rank-3 required".into(),
                shape: s,
            });
        }
        let mut seen = [false; 3];
        for &p in &perm {
            if p > 2 || seen[p] {
                return Err(TensorError::Dimension {
                    op: "permute3",
                    msg: format!("invalid permutation {perm:?}"),
                    shape: s,
                });
            }
            seen[p] = true;
        }
        let out_shape = vec![s[perm[0]], s[perm[1]], s[perm[2]]];
        let data = permute3_apply(&self.nodes[a.0].value.data, &s, perm);
        let needs = self.needs(a);
        Ok(self.push(
            Tensor::from_vec(out_shape, data)?,
            Op::Permute3 { a, perm },
            needs,
        ))
    }

    pub fn reshape(&mut self, a: NodeId, new_shape: Vec<usize>) -> Result<NodeId> {
        let n = numel(&new_shape);
        if n != self.value(a).numel() {
            return Err(TensorError::ShapeMismatch {
                op: "reshape",
                lhs: self.shape(a).to_vec(),
                rhs: new_shape,
            });
        }
        let data = self.data(a).to_vec();
        let needs = self.needs(a);
        Ok(self.push(Tensor::from_vec(new_shape, data)?, Op::Reshape(a), needs))
    }

    /// Contiguous slice `[start, start+len)` along `axis`.
    pub fn slice(&mut self, a: NodeId, axis: usize, start: usize, len: usize) -> Result<NodeId> {
        let s = self.shape(a).to_vec();
        if axis >= s.len() || start + len > s[axis] || len == 0 {
            return Err(TensorError::Dimension {
                op: "slice",
                msg: format!("axis {axis} range {start}..{} invalid", start + len),
                shape: s,
            });
        }
        let (outer, mid, inner) = split_at_axis(&s, axis);
        let d = &self.nodes[a.0].value.data;
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * mid + start) * inner;
            out.extend_from_slice(&d[base..base + len * inner]);
        }
        let mut out_shape = s.clone();
        out_shape[axis] = len;
        let needs = self.needs(a);
        Ok(self.push(
            Tensor::from_vec(out_shape, out)?,
            Op::Slice {
                a,
                axis,
                start,
                len,
            },
            needs,
        ))
    }

    /// Concatenate along `axis`; all other dims must match.
    pub fn concat(&mut self, inputs: &[NodeId], axis: usize) -> Result<NodeId> {
        if inputs.is_empty() {
            return Err(TensorError::Domain {
                op: "concat",
                msg: "no inputs".into(),
            });
        }
        let s0 = self.shape(inputs[0]).to_vec();
        if axis >= s0.len() {
            return Err(TensorError::Dimension {
                op: "concat",
                msg: format!("axis {axis} out of range"),
                shape: s0,
            });
        }
        let mut total = 0usize;
        for &id in inputs {
            let s = self.shape(id);
            if s.len() != s0.len()
                || s.iter()
                    .zip(&s0)
                    .enumerate()
                    .any(|(i, (x, y))| i != axis && x != y)
            {
                return Err(TensorError::ShapeMismatch {
                    op: "concat",
                    lhs: s0,
                    rhs: s.to_vec(),
                });
            }
            total += s[axis];
        }
        let (outer, _, inner) = split_at_axis(&s0, axis);
        let mut out_shape = s0.clone();
        out_shape[axis] = total;
        let mut out = vec![F::ZERO; outer * total * inner];
        let mut offset = 0usize;
        for &id in inputs {
            let mid = self.shape(id)[axis];
            let d = &self.nodes[id.0].value.data;
            for o in 0..outer {
                let dst = (o * total + offset) * inner;
                let src = o * mid * inner;
                out[dst..dst + mid * inner].copy_from_slice(&d[src..src + mid * inner]);
            }
            offset += mid;
        }
        let needs = inputs.iter().any(|&id| self.needs(id));
        Ok(self.push(
            Tensor::from_vec(out_shape, out)?,
            Op::Concat {
                inputs: inputs.to_vec(),
                axis,
            },
            needs,
        ))
    }

    /// Tile a size-1 axis to `n` copies.
    pub fn repeat(&mut self, a: NodeId, axis: usize, n: usize) -> Result<NodeId> {
        let s = self.shape(a).to_vec();
        if axis >= s.len() || s[axis] != 1 || n == 0 {
            return Err(TensorError::Dimension {
                op: "repeat",
                msg: format!("axis {axis} must have size 1, n >= 1"),
                shape: s,
            });
        }
        let (outer, _, inner) = split_at_axis(&s, axis);
        let d = &self.nodes[a.0].value.data;
        let mut out = Vec::with_capacity(outer * n * inner);
        for o in 0..outer {
            for _ in 0..n {
                out.extend_from_slice(&d[o * inner..(o + 1) * inner]);
            }
        }
        let mut out_shape = s;
        out_shape[axis] = n;
        let needs = self.needs(a);
        Ok(self.push(
            Tensor::from_vec(out_shape, out)?,
            Op::Repeat { a, axis, n },
            needs,
        ))
    }

    // ── reductions ──────────────────────────────────────────────────────

    pub fn sum_all(&mut self, a: NodeId) -> NodeId {
        let s: f64 = self.data(a).iter().map(|v| v.to_f64()).sum();
        let needs = self.needs(a);
        self.push(Tensor::scalar(F::from_f64(s)), Op::SumAll(a), needs)
    }

    pub fn sum_axis(&mut self, a: NodeId, axis: usize) -> Result<NodeId> {
        self.reduce_axis(a, axis, false)
    }

    pub fn mean_axis(&mut self, a: NodeId, axis: usize) -> Result<NodeId> {
        self.reduce_axis(a, axis, true)
    }

    fn reduce_axis(&mut self, a: NodeId, axis: usize, mean: bool) -> Result<NodeId> {
        let s = self.shape(a).to_vec();
        if axis >= s.len() {
            return Err(TensorError::Dimension {
                op: "sum_axis",
                msg: format!("axis {axis} out of range"),
                shape: s,
            });
        }
        let (outer, mid, inner) = split_at_axis(&s, axis);
        let d = &self.nodes[a.0].value.data;
        let mut acc = vec![0f64; outer * inner];
        for o in 0..outer {
            for j in 0..mid {
                let base = (o * mid + j) * inner;
                for i in 0..inner {
                    acc[o * inner + i] += d[base + i].to_f64();
                }
            }
        }
        let denom = if mean { mid as f64 } else { 1.0 };
        let out: Vec<F> = acc.iter().map(|&v| F::from_f64(v / denom)).collect();
        let mut out_shape: Vec<usize> = s.clone();
        out_shape.remove(axis);
        if out_shape.is_empty() {
            out_shape.push(1);
        }
        let needs = self.needs(a);
        Ok(self.push(
            Tensor::from_vec(out_shape, out)?,
            Op::SumAxis { a, axis, mean },
            needs,
        ))
    }

    // ── nonlinear blocks ────────────────────────────────────────────────

    /// Softmax along `axis`, stabilized by max subtraction.
    pub fn softmax(&mut self, a: NodeId, axis: usize) -> Result<NodeId> {
        let s = self.shape(a).to_vec();
        if axis >= s.len() {
            return Err(TensorError::Dimension {
                op: "softmax",
                msg: format!("axis {axis} out of range"),
                shape: s,
            });
        }
        let (outer, mid, inner) = split_at_axis(&s, axis);
        let d = &self.nodes[a.0].value.data;
        let mut out = vec![F::ZERO; d.len()];
        for o in 0..outer {
            for i in 0..inner {
                let idx = |j: usize| (o * mid + j) * inner + i;
                let mut mx = d[idx(0)];
                for j in 1..mid {
                    mx = mx.maximum(d[idx(j)]);
                }
                let mut denom = 0f64;
                for j in 0..mid {
                    let e = (d[idx(j)] - mx).exp();
                    out[idx(j)] = e;
                    denom += e.to_f64();
                }
                let inv = F::from_f64(1.0 / denom);
                for j in 0..mid {
                    out[idx(j)] = out[idx(j)] * inv;
                }
            }
        }
        let needs = self.needs(a);
        Ok(self.push(
            Tensor::from_vec(s, out)?,
            Op::Softmax { a, axis },
            needs,
        ))
    }

    /// Layer normalization over the last axis, followed by affine
    /// `gamma * xhat + beta`.
    pub fn layer_norm(
        &mut self,
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        eps: f64,
    ) -> Result<NodeId> {
        let s = self.shape(x).to_vec();
        let d = *s.last().unwrap();
        for (name, id) in [("gamma", gamma), ("beta", beta)] {
            let gs = self.shape(id);
            if gs != [d] {
                return Err(TensorError::ShapeMismatch {
                    op: if name == "gamma" {
                        "layer_norm gamma"
                    } else {
                        "layer_norm beta"
                    },
                    lhs: s.clone(),
                    rhs: gs.to_vec(),
                });
            }
        }
        let xd = &self.nodes[x.0].value.data;
        let gd = &self.nodes[gamma.0].value.data;
        let bd = &self.nodes[beta.0].value.data;
        let rows = xd.len() / d;
        let mut out = vec![F::ZERO; xd.len()];
        for r in 0..rows {
            let row = &xd[r * d..(r + 1) * d];
            let mean: f64 = row.iter().map(|v| v.to_f64()).sum::<f64>() / d as f64;
            let var: f64 = row
                .iter()
                .map(|v| {
                    let c = v.to_f64() - mean;
                    c * c
                })
                .sum::<f64>()
                / d as f64;
            let inv_std = 1.0 / (var + eps).sqrt();
            for i in 0..d {
                let xhat = (row[i].to_f64() - mean) * inv_std;
                out[r * d + i] = F::from_f64(xhat) * gd[i] + bd[i];
            }
        }
        let needs = self.needs(x) || self.needs(gamma) || self.needs(beta);
        Ok(self.push(
            Tensor::from_vec(s, out)?,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                eps,
            },
            needs,
        ))
    }

    /// 2D convolution, zero padding. Input `[b,ci,h,w]`, kernel
    /// `[co,ci,kh,kw]` with odd `kh`,`kw`, optional bias `[co]`.
    pub fn conv2d(
        &mut self,
        x: NodeId,
        w: NodeId,
        bias: Option<NodeId>,
        stride: usize,
        padding: usize,
    ) -> Result<NodeId> {
        let sx = self.shape(x).to_vec();
        let sw = self.shape(w).to_vec();
        if sx.len() != 4 || sw.len() != 4 || sx[1] != sw[1] {
            return Err(TensorError::ShapeMismatch {
                op: "conv2d",
                lhs: sx,
                rhs: sw,
            });
        }
        let (b, ci, h, wd) = (sx[0], sx[1], sx[2], sx[3]);
        let (co, kh, kw) = (sw[0], sw[2], sw[3]);
        if kh % 2 == 0 || kw % 2 == 0 || stride == 0 {
            return Err(TensorError::Dimension {
                op: "conv2d",
                msg: format!("kernel dims must be odd, stride >= 1 (kh={kh}, kw={kw}, stride={stride})"),
                shape: sw,
            });
        }
        if h + 2 * padding < kh
            || wd + 2 * padding < kw
            || (h + 2 * padding - kh) % stride != 0
            || (wd + 2 * padding - kw) % stride != 0
        {
            return Err(TensorError::Dimension {
                op: "conv2d",
                msg: format!(
                    "non-integral output size for input {h}x{wd}, kernel {kh}x{kw}, stride {stride}, padding {padding}"
                ),
                shape: sx,
            });
        }
        if let Some(bn) = bias {
            let bs = self.shape(bn);
            if bs != [co] {
                return Err(TensorError::ShapeMismatch {
                    op: "conv2d bias",
                    lhs: vec![co],
                    rhs: bs.to_vec(),
                });
            }
        }
        let oh = (h + 2 * padding - kh) / stride + 1;
        let ow = (wd + 2 * padding - kw) / stride + 1;
        let geom = ConvGeom {
            ci,
            h,
            w: wd,
            kh,
            kw,
            stride,
            padding,
            oh,
            ow,
        };
        let xd = &self.nodes[x.0].value.data;
        let wdat = &self.nodes[w.0].value.data;
        let cik2 = ci * kh * kw;
        let mut out = vec![F::ZERO; b * co * oh * ow];
        for bi in 0..b {
            let out_b = &mut out[bi * co * oh * ow..(bi + 1) * co * oh * ow];
            if let Some(bn) = bias {
                let bd = &self.nodes[bn.0].value.data;
                for o in 0..co {
                    out_b[o * oh * ow..(o + 1) * oh * ow].fill(bd[o]);
                }
            }
            let col = im2col(&xd[bi * ci * h * wd..(bi + 1) * ci * h * wd], &geom);
            F::gemm_accumulate(co, cik2, oh * ow, wdat, &col, out_b);
        }
        let needs =
            self.needs(x) || self.needs(w) || bias.map(|bn| self.needs(bn)).unwrap_or(false);
        Ok(self.push(
            Tensor::from_vec(vec![b, co, oh, ow], out)?,
            Op::Conv2d {
                x,
                w,
                bias,
                stride,
                padding,
            },
            needs,
        ))
    }

    /// Replicate (edge) padding of the two trailing spatial dims of a
    /// `[b,c,h,w]` tensor.
    pub fn pad_replicate2d(&mut self, x: NodeId, pad: usize) -> Result<NodeId> {
        let s = self.shape(x).to_vec();
        if s.len() != 4 {
            return Err(TensorError::Dimension {
                op: "pad_replicate2d",
                msg: "rank-4 required".into(),
                shape: s,
            });
        }
        let (b, c, h, w) = (s[0], s[1], s[2], s[3]);
        let (oh, ow) = (h + 2 * pad, w + 2 * pad);
        let xd = &self.nodes[x.0].value.data;
        let mut out = vec![F::ZERO; b * c * oh * ow];
        for bc in 0..b * c {
            let src = bc * h * w;
            let dst = bc * oh * ow;
            for oy in 0..oh {
                let iy = oy.saturating_sub(pad).min(h - 1);
                for ox in 0..ow {
                    let ix = ox.saturating_sub(pad).min(w - 1);
                    out[dst + oy * ow + ox] = xd[src + iy * w + ix];
                }
            }
        }
        let needs = self.needs(x);
        Ok(self.push(
            Tensor::from_vec(vec![b, c, oh, ow], out)?,
            Op::PadReplicate2d { x, pad },
            needs,
        ))
    }

    /// Sample `value: [c,h,w]` at normalized `points: [p,2]` (x, y in [0,1],
    /// clamped; half-pixel convention so x=(j+0.5)/w hits grid node j).
    /// Differentiable in both `value` and `points`; the point gradient is
    /// zero wherever the coordinate was clamped.
    pub fn bilinear_sample(&mut self, value: NodeId, points: NodeId) -> Result<NodeId> {
        let sv = self.shape(value).to_vec();
        let sp = self.shape(points).to_vec();
        if sv.len() != 3 {
            return Err(TensorError::Dimension {
                op: "bilinear_sample",
                msg: "value must be [c,h,w]".into(),
                shape: sv,
            });
        }
        if sv[1] < 1 || sv[2] < 1 {
            return Err(TensorError::EmptyGrid {
                op: "bilinear_sample",
                shape: sv,
            });
        }
        if sp.len() != 2 || sp[1] != 2 {
            return Err(TensorError::Dimension {
                op: "bilinear_sample",
                msg: "points must be [p,2]".into(),
                shape: sp,
            });
        }
        let (c, h, w) = (sv[0], sv[1], sv[2]);
        let p = sp[0];
        let vd = &self.nodes[value.0].value.data;
        let pd = &self.nodes[points.0].value.data;
        let mut out = vec![F::ZERO; p * c];
        for pi in 0..p {
            let (x0, x1, tx, _) = sample_coords(pd[pi * 2].to_f64(), w);
            let (y0, y1, ty, _) = sample_coords(pd[pi * 2 + 1].to_f64(), h);
            let (txf, tyf) = (F::from_f64(tx), F::from_f64(ty));
            for ch in 0..c {
                let base = ch * h * w;
                let v00 = vd[base + y0 * w + x0];
                let v01 = vd[base + y0 * w + x1];
                let v10 = vd[base + y1 * w + x0];
                let v11 = vd[base + y1 * w + x1];
                let top = v00 + (v01 - v00) * txf;
                let bot = v10 + (v11 - v10) * txf;
                out[pi * c + ch] = top + (bot - top) * tyf;
            }
        }
        let needs = self.needs(value) || self.needs(points);
        Ok(self.push(
            Tensor::from_vec(vec![p, c], out)?,
            Op::BilinearSample { value, points },
            needs,
        ))
    }

    /// Fused multi-scale deformable sampling: for every query and head,
    /// sample K offset locations on each pyramid level and blend them with
    /// the given per-slot weights.
    ///
    /// - `values[l]`: level features `[heads, side_l^2, dh]`
    /// - `offsets`: `[n_q, heads*levels*points*2]`, normalized by each
    ///   level's grid before sampling
    /// - `weights`: `[n_q, heads*levels*points]` (softmax over slots upstream)
    /// - `refs`: `[n_q, 2]` normalized reference points
    ///
    /// Returns `[n_q, heads*dh]`. Sampling uses the same half-pixel,
    /// clamp-to-border convention as `bilinear_sample`.
    pub fn deform_core(
        &mut self,
        values: &[NodeId],
        sides: &[usize],
        offsets: NodeId,
        weights: NodeId,
        refs: NodeId,
        heads: usize,
        points: usize,
    ) -> Result<NodeId> {
        let levels = values.len();
        if levels == 0 || levels != sides.len() {
            return Err(TensorError::Domain {
                op: "deform_core",
                msg: "values and sides must be equal-length and non-empty".into(),
            });
        }
        let v0 = self.shape(values[0]).to_vec();
        if v0.len() != 3 || v0[0] != heads {
            return Err(TensorError::Dimension {
                op: "deform_core",
                msg: format!("level values must be [heads={heads}, n, dh]"),
                shape: v0,
            });
        }
        let dh = v0[2];
        for (l, &v) in values.iter().enumerate() {
            let s = self.shape(v);
            if s != [heads, sides[l] * sides[l], dh] {
                return Err(TensorError::Dimension {
                    op: "deform_core",
                    msg: format!("level {l} shape mismatch for side {}", sides[l]),
                    shape: s.to_vec(),
                });
            }
        }
        let n_q = self.shape(refs)[0];
        let slots = heads * levels * points;
        if self.shape(offsets) != [n_q, slots * 2] || self.shape(weights) != [n_q, slots] {
            return Err(TensorError::ShapeMismatch {
                op: "deform_core",
                lhs: self.shape(offsets).to_vec(),
                rhs: self.shape(weights).to_vec(),
            });
        }
        let mut out = vec![F::ZERO; n_q * heads * dh];
        {
            let od = &self.nodes[offsets.0].value.data;
            let wd = &self.nodes[weights.0].value.data;
            let rd = &self.nodes[refs.0].value.data;
            for q in 0..n_q {
                let rx = rd[q * 2].to_f64();
                let ry = rd[q * 2 + 1].to_f64();
                for m in 0..heads {
                    let out_base = q * heads * dh + m * dh;
                    for (l, &side) in sides.iter().enumerate() {
                        let grid = &self.nodes[values[l].0].value.data
                            [m * side * side * dh..(m + 1) * side * side * dh];
                        for k in 0..points {
                            let slot = (m * levels + l) * points + k;
                            let a = wd[q * slots + slot];
                            let ox = od[(q * slots + slot) * 2].to_f64() / side as f64;
                            let oy = od[(q * slots + slot) * 2 + 1].to_f64() / side as f64;
                            let (x0, x1, tx, _) = sample_coords(rx + ox, side);
                            let (y0, y1, ty, _) = sample_coords(ry + oy, side);
                            let w00 = F::from_f64((1.0 - tx) * (1.0 - ty)) * a;
                            let w01 = F::from_f64(tx * (1.0 - ty)) * a;
                            let w10 = F::from_f64((1.0 - tx) * ty) * a;
                            let w11 = F::from_f64(tx * ty) * a;
                            let v00 = &grid[(y0 * side + x0) * dh..(y0 * side + x0) * dh + dh];
                            let v01 = &grid[(y0 * side + x1) * dh..(y0 * side + x1) * dh + dh];
                            let v10 = &grid[(y1 * side + x0) * dh..(y1 * side + x0) * dh + dh];
                            let v11 = &grid[(y1 * side + x1) * dh..(y1 * side + x1) * dh + dh];
                            let dst = &mut out[out_base..out_base + dh];
                            for ch in 0..dh {
                                dst[ch] += w00 * v00[ch]
                                    + w01 * v01[ch]
                                    + w10 * v10[ch]
                                    + w11 * v11[ch];
                            }
                        }
                    }
                }
            }
        }
        let needs = values.iter().any(|&v| self.needs(v))
            || self.needs(offsets)
            || self.needs(weights);
        Ok(self.push(
            Tensor::from_vec(vec![n_q, heads * dh], out)?,
            Op::DeformCore {
                values: values.to_vec(),
                sides: sides.to_vec(),
                offsets,
                weights,
                refs,
                heads,
                points,
            },
            needs,
        ))
    }

    /// Bilinear resize of the trailing two dims (half-pixel convention,
    /// edges clamped). Input rank 3 `[c,h,w]` or rank 4 `[b,c,h,w]`.
    pub fn upsample_bilinear(&mut self, x: NodeId, out_h: usize, out_w: usize) -> Result<NodeId> {
        let s = self.shape(x).to_vec();
        if s.len() < 3 || out_h == 0 || out_w == 0 {
            return Err(TensorError::Dimension {
                op: "upsample_bilinear",
                msg: "rank >= 3 and positive output dims required".into(),
                shape: s,
            });
        }
        let w = s[s.len() - 1];
        let h = s[s.len() - 2];
        let planes: usize = s[..s.len() - 2].iter().product();
        let ys = resize_axis::<F>(h, out_h);
        let xs = resize_axis::<F>(w, out_w);
        let xd = &self.nodes[x.0].value.data;
        let mut out = vec![F::ZERO; planes * out_h * out_w];
        for pl in 0..planes {
            let src = pl * h * w;
            let dst = pl * out_h * out_w;
            for (oy, &(y0, y1, ty)) in ys.iter().enumerate() {
                let row0 = &xd[src + y0 * w..src + y0 * w + w];
                let row1 = &xd[src + y1 * w..src + y1 * w + w];
                let out_row = &mut out[dst + oy * out_w..dst + (oy + 1) * out_w];
                for (o, &(x0, x1, tx)) in out_row.iter_mut().zip(xs.iter()) {
                    let top = row0[x0] + (row0[x1] - row0[x0]) * tx;
                    let bot = row1[x0] + (row1[x1] - row1[x0]) * tx;
                    *o = top + (bot - top) * ty;
                }
            }
        }
        let mut out_shape = s;
        let r = out_shape.len();
        out_shape[r - 2] = out_h;
        out_shape[r - 1] = out_w;
        let needs = self.needs(x);
        Ok(self.push(
            Tensor::from_vec(out_shape, out)?,
            Op::UpsampleBilinear { x, out_h, out_w },
            needs,
        ))
    }

    /// Row gather from an embedding table `[vocab, d]`.
    pub fn embedding(&mut self, table: NodeId, ids: &[usize]) -> Result<NodeId> {
        let s = self.shape(table).to_vec();
        if s.len() != 2 {
            return Err(TensorError::Dimension {
                op: "embedding",
                msg: "table must be [vocab, d]".into(),
                shape: s,
            });
        }
        let (vocab, d) = (s[0], s[1]);
        for &id in ids {
            if id >= vocab {
                return Err(TensorError::Vocabulary { id, vocab });
            }
        }
        let td = &self.nodes[table.0].value.data;
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            out.extend_from_slice(&td[id * d..(id + 1) * d]);
        }
        let needs = self.needs(table);
        Ok(self.push(
            Tensor::from_vec(vec![ids.len(), d], out)?,
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
            needs,
        ))
    }

    /// Split `[c,h,w]` into non-overlapping `patch x patch` tiles, flattened
    /// row-major to `[(h/p)*(w/p), c*p*p]`.
    pub fn patch_extract(&mut self, x: NodeId, patch: usize) -> Result<NodeId> {
        let s = self.shape(x).to_vec();
        if s.len() != 3 || patch == 0 || s[1] % patch != 0 || s[2] % patch != 0 {
            return Err(TensorError::Dimension {
                op: "patch_extract",
                msg: format!("spatial dims must divide patch size {patch}"),
                shape: s,
            });
        }
        let (c, h, w) = (s[0], s[1], s[2]);
        let (gh, gw) = (h / patch, w / patch);
        let xd = &self.nodes[x.0].value.data;
        let mut out = vec![F::ZERO; gh * gw * c * patch * patch];
        let row_len = c * patch * patch;
        for gy in 0..gh {
            for gx in 0..gw {
                let t = gy * gw + gx;
                for ch in 0..c {
                    for py in 0..patch {
                        for px in 0..patch {
                            let src = ch * h * w + (gy * patch + py) * w + gx * patch + px;
                            out[t * row_len + (ch * patch + py) * patch + px] = xd[src];
                        }
                    }
                }
            }
        }
        let needs = self.needs(x);
        Ok(self.push(
            Tensor::from_vec(vec![gh * gw, row_len], out)?,
            Op::PatchExtract { x, patch },
            needs,
        ))
    }

    /// L2-normalize each row of a `[rows, d]` tensor, with the norm floored
    /// at `eps`.
    pub fn normalize_rows(&mut self, x: NodeId, eps: f64) -> Result<NodeId> {
        let s = self.shape(x).to_vec();
        if s.len() != 2 {
            return Err(TensorError::Dimension {
                op: "normalize_rows",
                msg: "rank-2 required".into(),
                shape: s,
            });
        }
        let d = s[1];
        let xd = &self.nodes[x.0].value.data;
        let mut out = vec![F::ZERO; xd.len()];
        for r in 0..s[0] {
            let row = &xd[r * d..(r + 1) * d];
            let norm = row
                .iter()
                .map(|v| {
                    let f = v.to_f64();
                    f * f
                })
                .sum::<f64>()
                .sqrt()
                .max(eps);
            let inv = F::from_f64(1.0 / norm);
            for i in 0..d {
                out[r * d + i] = row[i] * inv;
            }
        }
        let needs = self.needs(x);
        Ok(self.push(
            Tensor::from_vec(s, out)?,
            Op::NormalizeRows { x, eps },
            needs,
        ))
    }

    /// Mean binary cross-entropy with logits against constant targets in
    /// [0,1]; numerically stable form `max(z,0) - z*y + ln(1+exp(-|z|))`.
    pub fn bce_with_logits_mean(&mut self, logits: NodeId, targets: &[f64]) -> Result<NodeId> {
        let n = self.value(logits).numel();
        if targets.len() != n {
            return Err(TensorError::ShapeMismatch {
                op: "bce_with_logits",
                lhs: self.shape(logits).to_vec(),
                rhs: vec![targets.len()],
            });
        }
        let zd = &self.nodes[logits.0].value.data;
        let mut acc = 0f64;
        for (z, &y) in zd.iter().zip(targets) {
            let z = z.to_f64();
            acc += z.max(0.0) - z * y + (-z.abs()).exp().ln_1p();
        }
        let loss = acc / n as f64;
        let needs = self.needs(logits);
        Ok(self.push(
            Tensor::scalar(F::from_f64(loss)),
            Op::BceWithLogitsMean {
                logits,
                targets: targets.to_vec(),
            },
            needs,
        ))
    }

    // ── backward ────────────────────────────────────────────────────────

    /// Reverse sweep from a scalar loss; populates `grad` on every node with
    /// `needs_grad` reachable from `loss`. Accumulation is additive.
    pub fn backward(&mut self, loss: NodeId) -> Result<()> {
        if !self.value(loss).is_scalar() {
            return Err(TensorError::NotScalar {
                op: "backward",
                shape: self.shape(loss).to_vec(),
            });
        }
        if self.needs(loss) {
            let n = self.value(loss).numel();
            self.nodes[loss.0].value.grad = Some(vec![F::ONE; n]);
        }
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].needs_grad {
                continue;
            }
            let Some(g) = self.nodes[i].value.grad.take() else {
                continue;
            };
            let op = self.nodes[i].op.clone();
            self.backprop_node(i, &g, &op)?;
            self.nodes[i].value.grad = Some(g);
        }
        Ok(())
    }

    fn accum(&mut self, id: NodeId, delta: &[F]) {
        if !self.nodes[id.0].needs_grad {
            return;
        }
        let n = self.nodes[id.0].value.numel();
        let slot = self
            .nodes[id.0]
            .value
            .grad
            .get_or_insert_with(|| vec![F::ZERO; n]);
        for (a, &b) in slot.iter_mut().zip(delta) {
            *a += b;
        }
    }

    fn backprop_node(&mut self, i: usize, g: &[F], op: &Op) -> Result<()> {
        match op {
            Op::Leaf => {}
            Op::Bin { kind, a, b } => {
                let (na, nb) = (self.value(*a).numel(), self.value(*b).numel());
                let n = g.len();
                match kind {
                    BinKind::Add => {
                        if self.needs(*a) {
                            let da = reduce_mod(g, n, na);
                            self.accum(*a, &da);
                        }
                        if self.needs(*b) {
                            let db = reduce_mod(g, n, nb);
                            self.accum(*b, &db);
                        }
                    }
                    BinKind::Mul => {
                        if self.needs(*a) {
                            let bd = &self.nodes[b.0].value.data;
                            let full: Vec<F> =
                                (0..n).map(|k| g[k] * bd[k % nb]).collect();
                            let da = reduce_mod(&full, n, na);
                            self.accum(*a, &da);
                        }
                        if self.needs(*b) {
                            let ad = &self.nodes[a.0].value.data;
                            let full: Vec<F> =
                                (0..n).map(|k| g[k] * ad[k % na]).collect();
                            let db = reduce_mod(&full, n, nb);
                            self.accum(*b, &db);
                        }
                    }
                    BinKind::Div => {
                        if self.needs(*a) {
                            let bd = &self.nodes[b.0].value.data;
                            let full: Vec<F> =
                                (0..n).map(|k| g[k] / bd[k % nb]).collect();
                            let da = reduce_mod(&full, n, na);
                            self.accum(*a, &da);
                        }
                        if self.needs(*b) {
                            let ad = &self.nodes[a.0].value.data;
                            let bd = &self.nodes[b.0].value.data;
                            let full: Vec<F> = (0..n)
                                .map(|k| {
                                    let bv = bd[k % nb];
                                    -g[k] * ad[k % na] / (bv * bv)
                                })
                                .collect();
                            let db = reduce_mod(&full, n, nb);
                            self.accum(*b, &db);
                        }
                    }
                }
            }
            Op::Scale { a, c } => {
                let cf = F::from_f64(*c);
                let da: Vec<F> = g.iter().map(|&v| v * cf).collect();
                self.accum(*a, &da);
            }
            Op::Relu(a) => {
                let xd = &self.nodes[a.0].value.data;
                let da: Vec<F> = g
                    .iter()
                    .zip(xd)
                    .map(|(&gv, &x)| if x > F::ZERO { gv } else { F::ZERO })
                    .collect();
                self.accum(*a, &da);
            }
            Op::Gelu(a) => {
                // d/dx [x * Phi(x)] = Phi(x) + x * phi(x)
                let xd = &self.nodes[a.0].value.data;
                let da: Vec<F> = g
                    .iter()
                    .zip(xd)
                    .map(|(&gv, &x)| {
                        let xf = x.to_f64();
                        let phi_cdf = 0.5 * (1.0 + libm::erf(xf * std::f64::consts::FRAC_1_SQRT_2));
                        let pdf = (-0.5 * xf * xf).exp() / (2.0 * std::f64::consts::PI).sqrt();
                        gv * F::from_f64(phi_cdf + xf * pdf)
                    })
                    .collect();
                self.accum(*a, &da);
            }
            Op::Sigmoid(a) => {
                let od = &self.nodes[i].value.data;
                let da: Vec<F> = g
                    .iter()
                    .zip(od)
                    .map(|(&gv, &s)| gv * s * (F::ONE - s))
                    .collect();
                self.accum(*a, &da);
            }
            Op::Ln(a) => {
                let xd = &self.nodes[a.0].value.data;
                let da: Vec<F> = g.iter().zip(xd).map(|(&gv, &x)| gv / x).collect();
                self.accum(*a, &da);
            }
            Op::Matmul { a, b } => {
                let sa = self.shape(*a).to_vec();
                let sb = self.shape(*b).to_vec();
                let (batch, m, k, n) = match (sa.len(), sb.len()) {
                    (2, 2) => (1, sa[0], sa[1], sb[1]),
                    (3, 3) => (sa[0], sa[1], sa[2], sb[2]),
                    (3, 2) => (sa[0], sa[1], sa[2], sb[1]),
                    _ => unreachable!(),
                };
                let b_batched = sb.len() == 3;
                if self.needs(*a) {
                    // dA = dC . B^T
                    let bd = &self.nodes[b.0].value.data;
                    let mut da = vec![F::ZERO; batch * m * k];
                    for bi in 0..batch {
                        let b_off = if b_batched { bi * k * n } else { 0 };
                        F::gemm_strided(
                            m,
                            n,
                            k,
                            &g[bi * m * n..(bi + 1) * m * n],
                            n as isize,
                            1,
                            &bd[b_off..b_off + k * n],
                            1,
                            n as isize,
                            &mut da[bi * m * k..(bi + 1) * m * k],
                        );
                    }
                    self.accum(*a, &da);
                }
                if self.needs(*b) {
                    // dB = A^T . dC, accumulated over batch when B is shared
                    let ad = &self.nodes[a.0].value.data;
                    let db_len = if b_batched { batch * k * n } else { k * n };
                    let mut db = vec![F::ZERO; db_len];
                    for bi in 0..batch {
                        let off = if b_batched { bi * k * n } else { 0 };
                        F::gemm_strided(
                            k,
                            m,
                            n,
                            &ad[bi * m * k..(bi + 1) * m * k],
                            1,
                            k as isize,
                            &g[bi * m * n..(bi + 1) * m * n],
                            n as isize,
                            1,
                            &mut db[off..off + k * n],
                        );
                    }
                    self.accum(*b, &db);
                }
            }
            Op::Transpose2(a) => {
                let so = self.shape(NodeId(i)).to_vec();
                let da = transpose_mat(g, so[0], so[1]);
                self.accum(*a, &da);
            }
            Op::Permute3 { a, perm } => {
                let so = self.shape(NodeId(i)).to_vec();
                let mut inv = [0usize; 3];
                for (pos, &p) in perm.iter().enumerate() {
                    inv[p] = pos;
                }
                let da = permute3_apply(g, &so, inv);
                self.accum(*a, &da);
            }
            Op::Reshape(a) => {
                self.accum(*a, g);
            }
            Op::Slice {
                a,
                axis,
                start,
                len,
            } => {
                let s = self.shape(*a).to_vec();
                let (outer, mid, inner) = split_at_axis(&s, *axis);
                let mut da = vec![F::ZERO; numel(&s)];
                for o in 0..outer {
                    let dst = (o * mid + start) * inner;
                    let src = o * len * inner;
                    for j in 0..len * inner {
                        da[dst + j] = g[src + j];
                    }
                }
                self.accum(*a, &da);
            }
            Op::Concat { inputs, axis } => {
                let so = self.shape(NodeId(i)).to_vec();
                let (outer, total, inner) = split_at_axis(&so, *axis);
                let mut offset = 0usize;
                for &inp in inputs {
                    let mid = self.shape(inp)[*axis];
                    if self.needs(inp) {
                        let mut di = vec![F::ZERO; outer * mid * inner];
                        for o in 0..outer {
                            let src = (o * total + offset) * inner;
                            let dst = o * mid * inner;
                            di[dst..dst + mid * inner]
                                .copy_from_slice(&g[src..src + mid * inner]);
                        }
                        self.accum(inp, &di);
                    }
                    offset += mid;
                }
            }
            Op::Repeat { a, axis, n } => {
                let s = self.shape(*a).to_vec();
                let (outer, _, inner) = split_at_axis(&s, *axis);
                let mut da = vec![F::ZERO; outer * inner];
                for o in 0..outer {
                    for j in 0..*n {
                        let src = (o * n + j) * inner;
                        for k in 0..inner {
                            da[o * inner + k] += g[src + k];
                        }
                    }
                }
                self.accum(*a, &da);
            }
            Op::SumAll(a) => {
                let n = self.value(*a).numel();
                let da = vec![g[0]; n];
                self.accum(*a, &da);
            }
            Op::SumAxis { a, axis, mean } => {
                let s = self.shape(*a).to_vec();
                let (outer, mid, inner) = split_at_axis(&s, *axis);
                let scale = if *mean {
                    F::from_f64(1.0 / mid as f64)
                } else {
                    F::ONE
                };
                let mut da = vec![F::ZERO; numel(&s)];
                for o in 0..outer {
                    for j in 0..mid {
                        let base = (o * mid + j) * inner;
                        for k in 0..inner {
                            da[base + k] = g[o * inner + k] * scale;
                        }
                    }
                }
                self.accum(*a, &da);
            }
            Op::Softmax { a, axis } => {
                let s = self.shape(NodeId(i)).to_vec();
                let (outer, mid, inner) = split_at_axis(&s, *axis);
                let od = &self.nodes[i].value.data;
                let mut da = vec![F::ZERO; od.len()];
                for o in 0..outer {
                    for k in 0..inner {
                        let idx = |j: usize| (o * mid + j) * inner + k;
                        let mut dot = 0f64;
                        for j in 0..mid {
                            dot += g[idx(j)].to_f64() * od[idx(j)].to_f64();
                        }
                        for j in 0..mid {
                            da[idx(j)] =
                                od[idx(j)] * (g[idx(j)] - F::from_f64(dot));
                        }
                    }
                }
                self.accum(*a, &da);
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                eps,
            } => {
                let s = self.shape(*x).to_vec();
                let d = *s.last().unwrap();
                let rows = numel(&s) / d;
                let xd = &self.nodes[x.0].value.data;
                let gd = &self.nodes[gamma.0].value.data;
                let mut dx = vec![F::ZERO; xd.len()];
                let mut dgamma = vec![0f64; d];
                let mut dbeta = vec![0f64; d];
                for r in 0..rows {
                    let row = &xd[r * d..(r + 1) * d];
                    let grow = &g[r * d..(r + 1) * d];
                    let mean: f64 = row.iter().map(|v| v.to_f64()).sum::<f64>() / d as f64;
                    let var: f64 = row
                        .iter()
                        .map(|v| {
                            let c = v.to_f64() - mean;
                            c * c
                        })
                        .sum::<f64>()
                        / d as f64;
                    let inv_std = 1.0 / (var + eps).sqrt();
                    let mut sum_dxhat = 0f64;
                    let mut sum_dxhat_xhat = 0f64;
                    let mut xhat = vec![0f64; d];
                    let mut dxhat = vec![0f64; d];
                    for j in 0..d {
                        xhat[j] = (row[j].to_f64() - mean) * inv_std;
                        dxhat[j] = grow[j].to_f64() * gd[j].to_f64();
                        dgamma[j] += grow[j].to_f64() * xhat[j];
                        dbeta[j] += grow[j].to_f64();
                        sum_dxhat += dxhat[j];
                        sum_dxhat_xhat += dxhat[j] * xhat[j];
                    }
                    let df = d as f64;
                    for j in 0..d {
                        dx[r * d + j] = F::from_f64(
                            inv_std / df
                                * (df * dxhat[j] - sum_dxhat - xhat[j] * sum_dxhat_xhat),
                        );
                    }
                }
                self.accum(*x, &dx);
                let dgamma_f: Vec<F> = dgamma.iter().map(|&v| F::from_f64(v)).collect();
                let dbeta_f: Vec<F> = dbeta.iter().map(|&v| F::from_f64(v)).collect();
                self.accum(*gamma, &dgamma_f);
                self.accum(*beta, &dbeta_f);
            }
            Op::Conv2d {
                x,
                w,
                bias,
                stride,
                padding,
            } => {
                let sx = self.shape(*x).to_vec();
                let sw = self.shape(*w).to_vec();
                let so = self.shape(NodeId(i)).to_vec();
                let (b, ci, h, wd) = (sx[0], sx[1], sx[2], sx[3]);
                let (co, kh, kw) = (sw[0], sw[2], sw[3]);
                let (oh, ow) = (so[2], so[3]);
                let geom = ConvGeom {
                    ci,
                    h,
                    w: wd,
                    kh,
                    kw,
                    stride: *stride,
                    padding: *padding,
                    oh,
                    ow,
                };
                let cik2 = ci * kh * kw;
                let ohw = oh * ow;
                if self.needs(*x) {
                    let wdat = &self.nodes[w.0].value.data;
                    let mut dx = vec![F::ZERO; b * ci * h * wd];
                    let mut col_grad = vec![F::ZERO; cik2 * ohw];
                    for bi in 0..b {
                        col_grad.fill(F::ZERO);
                        // col_grad = W^T . dOut
                        F::gemm_strided(
                            cik2,
                            co,
                            ohw,
                            wdat,
                            1,
                            cik2 as isize,
                            &g[bi * co * ohw..(bi + 1) * co * ohw],
                            ohw as isize,
                            1,
                            &mut col_grad,
                        );
                        col2im_add(
                            &col_grad,
                            &geom,
                            &mut dx[bi * ci * h * wd..(bi + 1) * ci * h * wd],
                        );
                    }
                    self.accum(*x, &dx);
                }
                if self.needs(*w) {
                    let xd = &self.nodes[x.0].value.data;
                    let mut dw = vec![F::ZERO; co * cik2];
                    for bi in 0..b {
                        let col = im2col(&xd[bi * ci * h * wd..(bi + 1) * ci * h * wd], &geom);
                        // dW += dOut . col^T
                        F::gemm_strided(
                            co,
                            ohw,
                            cik2,
                            &g[bi * co * ohw..(bi + 1) * co * ohw],
                            ohw as isize,
                            1,
                            &col,
                            1,
                            ohw as isize,
                            &mut dw,
                        );
                    }
                    self.accum(*w, &dw);
                }
                if let Some(bn) = bias {
                    if self.needs(*bn) {
                        let mut dbias = vec![0f64; co];
                        for bi in 0..b {
                            for o in 0..co {
                                let base = (bi * co + o) * ohw;
                                for v in &g[base..base + ohw] {
                                    dbias[o] += v.to_f64();
                                }
                            }
                        }
                        let dbias_f: Vec<F> =
                            dbias.iter().map(|&v| F::from_f64(v)).collect();
                        self.accum(*bn, &dbias_f);
                    }
                }
            }
            Op::PadReplicate2d { x, pad } => {
                let s = self.shape(*x).to_vec();
                let (b, c, h, w) = (s[0], s[1], s[2], s[3]);
                let (oh, ow) = (h + 2 * pad, w + 2 * pad);
                let mut dx = vec![F::ZERO; b * c * h * w];
                for bc in 0..b * c {
                    let src = bc * oh * ow;
                    let dst = bc * h * w;
                    for oy in 0..oh {
                        let iy = oy.saturating_sub(*pad).min(h - 1);
                        for ox in 0..ow {
                            let ix = ox.saturating_sub(*pad).min(w - 1);
                            dx[dst + iy * w + ix] += g[src + oy * ow + ox];
                        }
                    }
                }
                self.accum(*x, &dx);
            }
            Op::BilinearSample { value, points } => {
                let sv = self.shape(*value).to_vec();
                let (c, h, w) = (sv[0], sv[1], sv[2]);
                let pd = &self.nodes[points.0].value.data;
                let p = pd.len() / 2;
                let vd = &self.nodes[value.0].value.data;
                let mut dv = vec![F::ZERO; c * h * w];
                let mut dp = vec![F::ZERO; p * 2];
                for pi in 0..p {
                    let (x0, x1, tx, x_clamped) = sample_coords(pd[pi * 2].to_f64(), w);
                    let (y0, y1, ty, y_clamped) = sample_coords(pd[pi * 2 + 1].to_f64(), h);
                    let (txf, tyf) = (F::from_f64(tx), F::from_f64(ty));
                    let mut dpx = 0f64;
                    let mut dpy = 0f64;
                    for ch in 0..c {
                        let base = ch * h * w;
                        let gv = g[pi * c + ch];
                        let gy0 = gv * (F::ONE - tyf);
                        let gy1 = gv * tyf;
                        dv[base + y0 * w + x0] += gy0 * (F::ONE - txf);
                        dv[base + y0 * w + x1] += gy0 * txf;
                        dv[base + y1 * w + x0] += gy1 * (F::ONE - txf);
                        dv[base + y1 * w + x1] += gy1 * txf;
                        let v00 = vd[base + y0 * w + x0].to_f64();
                        let v01 = vd[base + y0 * w + x1].to_f64();
                        let v10 = vd[base + y1 * w + x0].to_f64();
                        let v11 = vd[base + y1 * w + x1].to_f64();
                        let gvf = gv.to_f64();
                        dpx += gvf * ((v01 - v00) * (1.0 - ty) + (v11 - v10) * ty);
                        dpy += gvf * ((v10 - v00) * (1.0 - tx) + (v11 - v01) * tx);
                    }
                    // chain through px = x*w - 0.5; zero where clamped
                    if !x_clamped {
                        dp[pi * 2] = F::from_f64(dpx * w as f64);
                    }
                    if !y_clamped {
                        dp[pi * 2 + 1] = F::from_f64(dpy * h as f64);
                    }
                }
                self.accum(*value, &dv);
                self.accum(*points, &dp);
            }
            Op::DeformCore {
                values,
                sides,
                offsets,
                weights,
                refs,
                heads,
                points,
            } => {
                let levels = values.len();
                let dh = self.shape(values[0])[2];
                let n_q = self.shape(*refs)[0];
                let slots = heads * levels * points;
                let od = self.nodes[offsets.0].value.data.clone();
                let wd = self.nodes[weights.0].value.data.clone();
                let rd = self.nodes[refs.0].value.data.clone();
                let need_vals: Vec<bool> = values.iter().map(|&v| self.needs(v)).collect();
                let need_off = self.needs(*offsets);
                let need_w = self.needs(*weights);
                let mut dvals: Vec<Vec<F>> = values
                    .iter()
                    .map(|&v| vec![F::ZERO; self.value(v).numel()])
                    .collect();
                let mut doff = vec![F::ZERO; n_q * slots * 2];
                let mut dw = vec![F::ZERO; n_q * slots];
                for q in 0..n_q {
                    let rx = rd[q * 2].to_f64();
                    let ry = rd[q * 2 + 1].to_f64();
                    for m in 0..*heads {
                        let g_row = &g[q * heads * dh + m * dh..q * heads * dh + (m + 1) * dh];
                        for (l, &side) in sides.iter().enumerate() {
                            let grid_base = m * side * side * dh;
                            let grid = &self.nodes[values[l].0].value.data
                                [grid_base..grid_base + side * side * dh];
                            for k in 0..*points {
                                let slot = (m * levels + l) * points + k;
                                let a = wd[q * slots + slot];
                                let ox = od[(q * slots + slot) * 2].to_f64() / side as f64;
                                let oy = od[(q * slots + slot) * 2 + 1].to_f64() / side as f64;
                                let (x0, x1, tx, xc) = sample_coords(rx + ox, side);
                                let (y0, y1, ty, yc) = sample_coords(ry + oy, side);
                                let i00 = (y0 * side + x0) * dh;
                                let i01 = (y0 * side + x1) * dh;
                                let i10 = (y1 * side + x0) * dh;
                                let i11 = (y1 * side + x1) * dh;
                                let w00 = F::from_f64((1.0 - tx) * (1.0 - ty));
                                let w01 = F::from_f64(tx * (1.0 - ty));
                                let w10 = F::from_f64((1.0 - tx) * ty);
                                let w11 = F::from_f64(tx * ty);
                                if need_vals[l] {
                                    let dv = &mut dvals[l];
                                    for ch in 0..dh {
                                        let ag = a * g_row[ch];
                                        dv[grid_base + i00 + ch] += ag * w00;
                                        dv[grid_base + i01 + ch] += ag * w01;
                                        dv[grid_base + i10 + ch] += ag * w10;
                                        dv[grid_base + i11 + ch] += ag * w11;
                                    }
                                }
                                if need_w || need_off {
                                    let mut sample_dot = 0f64;
                                    let mut dpx = 0f64;
                                    let mut dpy = 0f64;
                                    for ch in 0..dh {
                                        let gv = g_row[ch].to_f64();
                                        let v00 = grid[i00 + ch].to_f64();
                                        let v01 = grid[i01 + ch].to_f64();
                                        let v10 = grid[i10 + ch].to_f64();
                                        let v11 = grid[i11 + ch].to_f64();
                                        let interp = (v00 * (1.0 - tx) + v01 * tx) * (1.0 - ty)
                                            + (v10 * (1.0 - tx) + v11 * tx) * ty;
                                        sample_dot += gv * interp;
                                        dpx += gv
                                            * ((v01 - v00) * (1.0 - ty) + (v11 - v10) * ty);
                                        dpy += gv
                                            * ((v10 - v00) * (1.0 - tx) + (v11 - v01) * tx);
                                    }
                                    if need_w {
                                        dw[q * slots + slot] += F::from_f64(sample_dot);
                                    }
                                    if need_off {
                                        // chain: px = coord*side - 0.5, coord offset
                                        // scaled by 1/side; zero where clamped
                                        let af = a.to_f64();
                                        if !xc {
                                            doff[(q * slots + slot) * 2] +=
                                                F::from_f64(af * dpx);
                                        }
                                        if !yc {
                                            doff[(q * slots + slot) * 2 + 1] +=
                                                F::from_f64(af * dpy);
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
                for (l, dv) in dvals.into_iter().enumerate() {
                    if need_vals[l] {
                        self.accum(values[l], &dv);
                    }
                }
                if need_off {
                    self.accum(*offsets, &doff);
                }
                if need_w {
                    self.accum(*weights, &dw);
                }
            }
            Op::UpsampleBilinear { x, out_h, out_w } => {
                let s = self.shape(*x).to_vec();
                let w = s[s.len() - 1];
                let h = s[s.len() - 2];
                let planes: usize = s[..s.len() - 2].iter().product();
                let ys = resize_axis::<F>(h, *out_h);
                let xs = resize_axis::<F>(w, *out_w);
                let mut dx = vec![F::ZERO; planes * h * w];
                for pl in 0..planes {
                    let src = pl * out_h * out_w;
                    let dst = pl * h * w;
                    for (oy, &(y0, y1, ty)) in ys.iter().enumerate() {
                        let g_row = &g[src + oy * out_w..src + (oy + 1) * out_w];
                        for (&gv, &(x0, x1, tx)) in g_row.iter().zip(xs.iter()) {
                            let gy0 = gv * (F::ONE - ty);
                            let gy1 = gv * ty;
                            dx[dst + y0 * w + x0] += gy0 * (F::ONE - tx);
                            dx[dst + y0 * w + x1] += gy0 * tx;
                            dx[dst + y1 * w + x0] += gy1 * (F::ONE - tx);
                            dx[dst + y1 * w + x1] += gy1 * tx;
                        }
                    }
                }
                self.accum(*x, &dx);
            }
            Op::Embedding { table, ids } => {
                let d = self.shape(*table)[1];
                let vocab = self.shape(*table)[0];
                let mut dt = vec![F::ZERO; vocab * d];
                for (row, &id) in ids.iter().enumerate() {
                    for j in 0..d {
                        dt[id * d + j] += g[row * d + j];
                    }
                }
                self.accum(*table, &dt);
            }
            Op::PatchExtract { x, patch } => {
                let s = self.shape(*x).to_vec();
                let (c, h, w) = (s[0], s[1], s[2]);
                let (gh, gw) = (h / patch, w / patch);
                let row_len = c * patch * patch;
                let mut dx = vec![F::ZERO; c * h * w];
                for gy in 0..gh {
                    for gx in 0..gw {
                        let t = gy * gw + gx;
                        for ch in 0..c {
                            for py in 0..*patch {
                                for px in 0..*patch {
                                    let dst = ch * h * w + (gy * patch + py) * w + gx * patch + px;
                                    dx[dst] = g[t * row_len + (ch * patch + py) * patch + px];
                                }
                            }
                        }
                    }
                }
                self.accum(*x, &dx);
            }
            Op::NormalizeRows { x, eps } => {
                let s = self.shape(*x).to_vec();
                let d = s[1];
                let xd = &self.nodes[x.0].value.data;
                let mut dx = vec![F::ZERO; xd.len()];
                for r in 0..s[0] {
                    let row = &xd[r * d..(r + 1) * d];
                    let grow = &g[r * d..(r + 1) * d];
                    let sq: f64 = row
                        .iter()
                        .map(|v| {
                            let f = v.to_f64();
                            f * f
                        })
                        .sum();
                    let norm = sq.sqrt();
                    if norm <= *eps {
                        // floored: y = x / eps, a plain linear map
                        for j in 0..d {
                            dx[r * d + j] = F::from_f64(grow[j].to_f64() / eps);
                        }
                    } else {
                        let dot: f64 = row
                            .iter()
                            .zip(grow)
                            .map(|(x, gv)| x.to_f64() * gv.to_f64())
                            .sum();
                        let n3 = norm * norm * norm;
                        for j in 0..d {
                            dx[r * d + j] = F::from_f64(
                                grow[j].to_f64() / norm - row[j].to_f64() * dot / n3,
                            );
                        }
                    }
                }
                self.accum(*x, &dx);
            }
            Op::BceWithLogitsMean { logits, targets } => {
                let zd = &self.nodes[logits.0].value.data;
                let n = zd.len() as f64;
                let g0 = g[0].to_f64();
                let dz: Vec<F> = zd
                    .iter()
                    .zip(targets)
                    .map(|(z, &y)| {
                        let s = 1.0 / (1.0 + (-z.to_f64()).exp());
                        F::from_f64(g0 * (s - y) / n)
                    })
                    .collect();
                self.accum(*logits, &dz);
            }
        }
        Ok(())
    }
}

// ── helpers ─────────────────────────────────────────────────────────────

/// (outer, axis, inner) factorization of a shape around `axis`.
fn split_at_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer: usize = shape[..axis].iter().product();
    let inner: usize = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

/// Inclusive output-column range whose input column `ox*stride + kx - pad`
/// stays inside `[0, in_w)`.
fn conv_span(kx: usize, pad: usize, stride: usize, in_w: usize, out_w: usize) -> (usize, usize) {
    let lo = if kx >= pad {
        0
    } else {
        (pad - kx).div_ceil(stride)
    };
    let hi_limit = in_w - 1 + pad;
    if hi_limit < kx {
        return (1, 0);
    }
    let hi = ((hi_limit - kx) / stride).min(out_w - 1);
    (lo, hi)
}

#[derive(Clone, Copy)]
struct ConvGeom {
    ci: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    padding: usize,
    oh: usize,
    ow: usize,
}

/// Unfold one image `[ci, h, w]` into `[ci*kh*kw, oh*ow]` patches
/// (zero padding outside).
fn im2col<F: Real>(x: &[F], geo: &ConvGeom) -> Vec<F> {
    let ohw = geo.oh * geo.ow;
    let mut col = vec![F::ZERO; geo.ci * geo.kh * geo.kw * ohw];
    for c in 0..geo.ci {
        let x_base = c * geo.h * geo.w;
        for ky in 0..geo.kh {
            for kx in 0..geo.kw {
                let row = ((c * geo.kh + ky) * geo.kw + kx) * ohw;
                let (ox_lo, ox_hi) = conv_span(kx, geo.padding, geo.stride, geo.w, geo.ow);
                if ox_lo > ox_hi {
                    continue;
                }
                let n = ox_hi - ox_lo + 1;
                for oy in 0..geo.oh {
                    let iy = (oy * geo.stride + ky) as isize - geo.padding as isize;
                    if iy < 0 || iy >= geo.h as isize {
                        continue;
                    }
                    let ix0 = ox_lo * geo.stride + kx - geo.padding;
                    let src = x_base + iy as usize * geo.w;
                    let dst = row + oy * geo.ow + ox_lo;
                    if geo.stride == 1 {
                        col[dst..dst + n].copy_from_slice(&x[src + ix0..src + ix0 + n]);
                    } else {
                        for i in 0..n {
                            col[dst + i] = x[src + ix0 + i * geo.stride];
                        }
                    }
                }
            }
        }
    }
    col
}

/// Fold a `[ci*kh*kw, oh*ow]` column-gradient back onto the image (add).
fn col2im_add<F: Real>(col: &[F], geo: &ConvGeom, dx: &mut [F]) {
    for c in 0..geo.ci {
        let x_base = c * geo.h * geo.w;
        for ky in 0..geo.kh {
            for kx in 0..geo.kw {
                let row = ((c * geo.kh + ky) * geo.kw + kx) * geo.oh * geo.ow;
                let (ox_lo, ox_hi) = conv_span(kx, geo.padding, geo.stride, geo.w, geo.ow);
                if ox_lo > ox_hi {
                    continue;
                }
                let n = ox_hi - ox_lo + 1;
                for oy in 0..geo.oh {
                    let iy = (oy * geo.stride + ky) as isize - geo.padding as isize;
                    if iy < 0 || iy >= geo.h as isize {
                        continue;
                    }
                    let ix0 = ox_lo * geo.stride + kx - geo.padding;
                    let dst = x_base + iy as usize * geo.w;
                    let src = row + oy * geo.ow + ox_lo;
                    if geo.stride == 1 {
                        let d = &mut dx[dst + ix0..dst + ix0 + n];
                        let s = &col[src..src + n];
                        for (dv, &sv) in d.iter_mut().zip(s) {
                            *dv += sv;
                        }
                    } else {
                        for i in 0..n {
                            dx[dst + ix0 + i * geo.stride] += col[src + i];
                        }
                    }
                }
            }
        }
    }
}

/// `C += A.B`; small shapes stay on a simple ikj loop, larger ones go
/// through the blocked gemm.
fn matmul_kernel<F: Real>(a: &[F], b: &[F], c: &mut [F], m: usize, k: usize, n: usize) {
    if m * k * n >= 8 * 8 * 8 {
        F::gemm_accumulate(m, k, n, a, b, c);
        return;
    }
    for i in 0..m {
        let c_row = &mut c[i * n..(i + 1) * n];
        for kk in 0..k {
            let av = a[i * k + kk];
            let b_row = &b[kk * n..(kk + 1) * n];
            for (cv, &bv) in c_row.iter_mut().zip(b_row) {
                *cv += av * bv;
            }
        }
    }
}

fn transpose_mat<F: Real>(a: &[F], rows: usize, cols: usize) -> Vec<F> {
    let mut out = vec![F::ZERO; rows * cols];
    for i in 0..rows {
        for j in 0..cols {
            out[j * rows + i] = a[i * cols + j];
        }
    }
    out
}

fn permute3_apply<F: Real>(data: &[F], shape: &[usize], perm: [usize; 3]) -> Vec<F> {
    let (d0, d1, d2) = (shape[0], shape[1], shape[2]);
    let out_shape = [shape[perm[0]], shape[perm[1]], shape[perm[2]]];
    let strides = [d1 * d2, d2, 1];
    let ps = [strides[perm[0]], strides[perm[1]], strides[perm[2]]];
    let mut out = vec![F::ZERO; d0 * d1 * d2];
    let mut idx = 0usize;
    for i in 0..out_shape[0] {
        for j in 0..out_shape[1] {
            let base = i * ps[0] + j * ps[1];
            for k in 0..out_shape[2] {
                out[idx] = data[base + k * ps[2]];
                idx += 1;
            }
        }
    }
    out
}

/// Reduce a full-size gradient to the broadcast input's size by summing
/// congruent positions (`i % target`).
fn reduce_mod<F: Real>(g: &[F], n: usize, target: usize) -> Vec<F> {
    if target == n {
        return g.to_vec();
    }
    let mut out = vec![0f64; target];
    for i in 0..n {
        out[i % target] += g[i].to_f64();
    }
    out.iter().map(|&v| F::from_f64(v)).collect()
}

/// Corner indices, interpolation weight and clamp flag for one normalized
/// coordinate over an axis of `len` cells (half-pixel convention).
fn sample_coords(coord: f64, len: usize) -> (usize, usize, f64, bool) {
    let clamped = !(0.0..=1.0).contains(&coord);
    let c = coord.clamp(0.0, 1.0);
    let px = c * len as f64 - 0.5;
    let x0f = px.floor();
    let t = px - x0f;
    let x0 = (x0f.max(0.0) as usize).min(len - 1);
    let x1 = ((x0f + 1.0).max(0.0) as usize).min(len - 1);
    (x0, x1, t, clamped)
}

fn resize_axis<F: Real>(in_len: usize, out_len: usize) -> Vec<(usize, usize, F)> {
    let scale = in_len as f64 / out_len as f64;
    (0..out_len)
        .map(|o| {
            let src = ((o as f64 + 0.5) * scale - 0.5).clamp(0.0, in_len as f64 - 1.0);
            let i0 = src.floor() as usize;
            let i1 = (i0 + 1).min(in_len - 1);
            (i0, i1, F::from_f64(src - i0 as f64))
        })
        .collect()
}
