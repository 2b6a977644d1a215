//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Graph`] is a Wengert list: every operation appends a node holding
//! its forward value and the metadata needed for the backward sweep.
//! [`Graph::backward`] walks the tape once in reverse from a scalar root
//! and returns per-node gradients; parameter gradients are collected
//! from leaf nodes bound to a [`ParamSet`].
//!
//! Determinism: forward kernels parallelize only over independent output
//! elements and every accumulation (including backward scatter) runs in
//! a fixed order, so values and gradients are bitwise reproducible.
//!
//! Equivariant convolutions: for group elements whose angle is a
//! quarter-turn multiple on square planes, `lifting_conv`/`group_conv`
//! compute channel `g` as `rotate_g(conv(rotate_{-g}(x), base_kernel))`.
//! Rotations by quarter turns are exact index permutations, so these
//! channels commute with `C_4` actions bit-exactly. Other elements
//! convolve with the analytically rotated kernel stack directly.

use std::collections::HashMap;
use std::sync::Arc;

use rand::Rng as _;

use crate::error::{Error, Result};
use crate::group::CyclicRotationGroup;
use crate::interp::{
    bilinear_adjoint, bilinear_one, resolve_rotation, rotate_plane_adjoint, rotate_plane_raw,
    PlaneRot,
};
use crate::kernels;
use crate::parallel::{for_each_chunk_mut, plane_rotate_batch};
use crate::params::{ParamId, ParamSet};
use crate::rng::rng_from_seed;
use crate::scalar::Scalar;
use crate::steerable::SteerableBasis;
use crate::tensor::Tensor;

/// Index of a node on the tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(pub(crate) usize);

#[derive(Debug)]
struct Node<T: Scalar> {
    value: Tensor<T>,
    needs_grad: bool,
    op: Op,
}

/// Operation metadata recorded per node. Variants cache whatever the
/// backward pass needs (argmax indices, dropout masks, batch stats).
#[derive(Debug)]
enum Op {
    Leaf {
        param: Option<ParamId>,
    },
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, f64),
    Abs(NodeId),
    Relu(NodeId),
    Matmul(NodeId, NodeId),
    MatmulTransB(NodeId, NodeId),
    AddRow(NodeId, NodeId),
    Softmax(NodeId),
    CrossEntropyMean {
        logits: NodeId,
        targets: Vec<usize>,
    },
    SumAll(NodeId),
    MeanTrailing {
        x: NodeId,
        axes: usize,
    },
    MeanRows(NodeId),
    MeanGroupedRows {
        x: NodeId,
        group: usize,
    },
    Reshape(NodeId),
    ConcatCols(Vec<NodeId>),
    StackRows(Vec<NodeId>),
    SliceBatch {
        x: NodeId,
        index: usize,
    },
    Dropout {
        x: NodeId,
        keep_scale: f64,
        mask: Vec<bool>,
    },
    Conv2d {
        x: NodeId,
        w: NodeId,
        stride: usize,
        pad: usize,
    },
    MaxPool2 {
        x: NodeId,
        argmax: Vec<u8>,
    },
    GroupMaxPool {
        x: NodeId,
        argmax: Vec<u16>,
    },
    GlobalMaxPool {
        x: NodeId,
        argmax: Vec<u32>,
    },
    ShiftPositive {
        x: NodeId,
        argmin: Vec<u32>,
    },
    BilinearSample {
        image: NodeId,
        coords: Vec<(f64, f64)>,
    },
    RotatePlanes {
        x: NodeId,
        rot: PlaneRot,
    },
    KernelRotations {
        psi: NodeId,
        group: CyclicRotationGroup,
    },
    SynthLift {
        coef: NodeId,
        basis: Arc<SteerableBasis>,
    },
    SynthGroup {
        coef: NodeId,
        basis: Arc<SteerableBasis>,
    },
    LiftingConv {
        x: NodeId,
        kernels: NodeId,
        group: CyclicRotationGroup,
    },
    GroupConv {
        x: NodeId,
        kernels: NodeId,
        group: CyclicRotationGroup,
    },
    GlobalWsPool {
        x: NodeId,
        kernels: NodeId,
    },
    LocalWsPool {
        x: NodeId,
        psi: NodeId,
        group: CyclicRotationGroup,
    },
    MonomialPool {
        x: NodeId,
        exponents: NodeId,
        distances: Vec<f64>,
        group: CyclicRotationGroup,
    },
    PatchStack {
        x: NodeId,
        group: CyclicRotationGroup,
        patch: usize,
    },
    ImageToTokens(NodeId),
    RelAttnBias {
        q: NodeId,
        pk: NodeId,
        offsets: Arc<Vec<u32>>,
    },
    RowGroupScale {
        w: NodeId,
        c: NodeId,
        chunk: usize,
    },
    BatchNormTrain {
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        eps: f64,
        mean: Vec<f64>,
        var: Vec<f64>,
    },
    BatchNormEval {
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        eps: f64,
        mean: Vec<f64>,
        var: Vec<f64>,
    },
}

/// Per-node gradients produced by [`Graph::backward`].
pub struct Gradients<T: Scalar> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient of the root w.r.t. node `id`, if it was reachable and
    /// required gradients.
    pub fn wrt(&self, id: NodeId) -> Option<&Tensor<T>> {
        self.grads.get(id.0).and_then(|g| g.as_ref())
    }
}

/// The differentiation tape.
#[derive(Debug, Default)]
pub struct Graph<T: Scalar> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor<T> {
        &self.nodes[id.0].value
    }

    fn push(&mut self, value: Tensor<T>, needs_grad: bool, op: Op) -> NodeId {
        value.debug_assert_finite("graph op");
        let id = NodeId(self.nodes.len());
        self.nodes.push(Node {
            value,
            needs_grad,
            op,
        });
        id
    }

    fn ng(&self, id: NodeId) -> bool {
        self.nodes[id.0].needs_grad
    }

    fn val(&self, id: NodeId) -> &Tensor<T> {
        &self.nodes[id.0].value
    }

    // ---- leaves ----------------------------------------------------

    /// Non-differentiable constant.
    pub fn constant(&mut self, value: Tensor<T>) -> NodeId {
        self.push(value, false, Op::Leaf { param: None })
    }

    /// Differentiable input leaf (not bound to a parameter).
    pub fn input(&mut self, value: Tensor<T>) -> NodeId {
        self.push(value, true, Op::Leaf { param: None })
    }

    /// Leaf bound to a parameter; its gradient lands in the parameter
    /// gradient map.
    pub fn param(&mut self, params: &ParamSet<T>, id: ParamId) -> NodeId {
        self.push(params.get(id).clone(), true, Op::Leaf { param: Some(id) })
    }

    // ---- elementwise -----------------------------------------------

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.val(a).zip_map(self.val(b), |x, y| x + y)?;
        Ok(self.push(v, self.ng(a) || self.ng(b), Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.val(a).zip_map(self.val(b), |x, y| x - y)?;
        Ok(self.push(v, self.ng(a) || self.ng(b), Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.val(a).zip_map(self.val(b), |x, y| x * y)?;
        Ok(self.push(v, self.ng(a) || self.ng(b), Op::Mul(a, b)))
    }

    pub fn scale(&mut self, x: NodeId, s: f64) -> NodeId {
        let sv = T::fromf(s);
        let v = self.val(x).map(|e| e * sv);
        self.push(v, self.ng(x), Op::Scale(x, s))
    }

    pub fn abs(&mut self, x: NodeId) -> NodeId {
        let v = self.val(x).map(|e| e.abs());
        self.push(v, self.ng(x), Op::Abs(x))
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        let v = self.val(x).map(|e| if e > T::zero() { e } else { T::zero() });
        self.push(v, self.ng(x), Op::Relu(x))
    }

    // ---- linear algebra --------------------------------------------

    /// `[m, k] @ [k, n]`.
    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (sa, sb) = (self.val(a).shape(), self.val(b).shape());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::shape(format!(
                "matmul requires [m,k] @ [k,n], got {sa:?} @ {sb:?}"
            )));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = Tensor::zeros(vec![m, n]);
        kernels::matmul(self.val(a).data(), self.val(b).data(), m, k, n, out.data_mut());
        Ok(self.push(out, self.ng(a) || self.ng(b), Op::Matmul(a, b)))
    }

    /// `[m, k] @ [n, k]^T`.
    pub fn matmul_transb(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (sa, sb) = (self.val(a).shape(), self.val(b).shape());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[1] {
            return Err(Error::shape(format!(
                "matmul_transb requires [m,k] @ [n,k]^T, got {sa:?}, {sb:?}"
            )));
        }
        let (m, k, n) = (sa[0], sa[1], sb[0]);
        let mut out = Tensor::zeros(vec![m, n]);
        kernels::matmul_transb(self.val(a).data(), self.val(b).data(), m, k, n, out.data_mut());
        Ok(self.push(out, self.ng(a) || self.ng(b), Op::MatmulTransB(a, b)))
    }

    /// Add a `[n]` row vector to every row of `[m, n]`.
    pub fn add_row(&mut self, x: NodeId, b: NodeId) -> Result<NodeId> {
        let (sx, sb) = (self.val(x).shape(), self.val(b).shape());
        if sx.len() != 2 || sb.len() != 1 || sx[1] != sb[0] {
            return Err(Error::shape(format!(
                "add_row requires [m,n] + [n], got {sx:?} + {sb:?}"
            )));
        }
        let (m, n) = (sx[0], sx[1]);
        let mut out = self.val(x).clone();
        for i in 0..m {
            for j in 0..n {
                out.data_mut()[i * n + j] += self.val(b).data()[j];
            }
        }
        Ok(self.push(out, self.ng(x) || self.ng(b), Op::AddRow(x, b)))
    }

    /// Fully connected layer: `x @ w + bias`.
    pub fn dense(&mut self, x: NodeId, w: NodeId, bias: NodeId) -> Result<NodeId> {
        let y = self.matmul(x, w)?;
        self.add_row(y, bias)
    }

    // ---- reductions and shape ---------------------------------------

    pub fn sum_all(&mut self, x: NodeId) -> NodeId {
        let mut acc = T::zero();
        for &v in self.val(x).data() {
            acc += v;
        }
        self.push(Tensor::scalar(acc), self.ng(x), Op::SumAll(x))
    }

    /// Mean over the last `axes` axes.
    pub fn mean_trailing(&mut self, x: NodeId, axes: usize) -> Result<NodeId> {
        let shape = self.val(x).shape().to_vec();
        if axes == 0 || axes >= shape.len() {
            return Err(Error::shape(format!(
                "mean_trailing over {axes} axes of rank-{} tensor",
                shape.len()
            )));
        }
        let lead: usize = shape[..shape.len() - axes].iter().product();
        let tail: usize = shape[shape.len() - axes..].iter().product();
        let inv = T::fromf(1.0 / tail as f64);
        let mut out = Tensor::zeros(shape[..shape.len() - axes].to_vec());
        for i in 0..lead {
            let mut acc = T::zero();
            for j in 0..tail {
                acc += self.val(x).data()[i * tail + j];
            }
            out.data_mut()[i] = acc * inv;
        }
        Ok(self.push(out, self.ng(x), Op::MeanTrailing { x, axes }))
    }

    /// Mean over the rows of `[r, f]`, producing `[f]`.
    pub fn mean_rows(&mut self, x: NodeId) -> Result<NodeId> {
        let shape = self.val(x).shape();
        if shape.len() != 2 {
            return Err(Error::shape(format!("mean_rows needs [r, f], got {shape:?}")));
        }
        let (r, f) = (shape[0], shape[1]);
        let inv = T::fromf(1.0 / r as f64);
        let mut out = Tensor::zeros(vec![f]);
        for i in 0..r {
            for j in 0..f {
                out.data_mut()[j] += self.val(x).data()[i * f + j];
            }
        }
        for v in out.data_mut() {
            *v = *v * inv;
        }
        Ok(self.push(out, self.ng(x), Op::MeanRows(x)))
    }

    /// Mean over consecutive row blocks: `[(n*group), f] -> [n, f]`.
    pub fn mean_grouped_rows(&mut self, x: NodeId, group: usize) -> Result<NodeId> {
        let shape = self.val(x).shape();
        if shape.len() != 2 || group == 0 || shape[0] % group != 0 {
            return Err(Error::shape(format!(
                "mean_grouped_rows needs [(n*{group}), f], got {shape:?}"
            )));
        }
        let (rows, f) = (shape[0], shape[1]);
        let n = rows / group;
        let inv = T::fromf(1.0 / group as f64);
        let mut out = Tensor::zeros(vec![n, f]);
        for i in 0..rows {
            let o = i / group;
            for j in 0..f {
                out.data_mut()[o * f + j] += self.val(x).data()[i * f + j];
            }
        }
        for v in out.data_mut() {
            *v = *v * inv;
        }
        Ok(self.push(out, self.ng(x), Op::MeanGroupedRows { x, group }))
    }

    pub fn reshape(&mut self, x: NodeId, shape: impl Into<Vec<usize>>) -> Result<NodeId> {
        let v = self.val(x).reshape(shape)?;
        Ok(self.push(v, self.ng(x), Op::Reshape(x)))
    }

    /// Concatenate 2-D tensors with equal row counts along columns.
    pub fn concat_cols(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        if parts.is_empty() {
            return Err(Error::contract("concat_cols needs at least one input"));
        }
        let rows = self.val(parts[0]).shape()[0];
        let mut cols = 0;
        for &p in parts {
            let s = self.val(p).shape();
            if s.len() != 2 || s[0] != rows {
                return Err(Error::shape(format!(
                    "concat_cols inputs must be [{rows}, *], got {s:?}"
                )));
            }
            cols += s[1];
        }
        let mut out = Tensor::zeros(vec![rows, cols]);
        let mut base = 0;
        for &p in parts {
            let pc = self.val(p).shape()[1];
            for i in 0..rows {
                for j in 0..pc {
                    out.data_mut()[i * cols + base + j] = self.val(p).data()[i * pc + j];
                }
            }
            base += pc;
        }
        let ng = parts.iter().any(|&p| self.ng(p));
        Ok(self.push(out, ng, Op::ConcatCols(parts.to_vec())))
    }

    /// Stack rank-1 tensors of equal length into `[n, f]`.
    pub fn stack_rows(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        if parts.is_empty() {
            return Err(Error::contract("stack_rows needs at least one input"));
        }
        let f = self.val(parts[0]).numel();
        for &p in parts {
            let s = self.val(p).shape();
            if s.len() != 1 || s[0] != f {
                return Err(Error::shape(format!(
                    "stack_rows inputs must be [{f}], got {s:?}"
                )));
            }
        }
        let mut out = Tensor::zeros(vec![parts.len(), f]);
        for (i, &p) in parts.iter().enumerate() {
            out.data_mut()[i * f..(i + 1) * f].copy_from_slice(self.val(p).data());
        }
        let ng = parts.iter().any(|&p| self.ng(p));
        Ok(self.push(out, ng, Op::StackRows(parts.to_vec())))
    }

    /// Select index `i` of the leading axis.
    pub fn slice_batch(&mut self, x: NodeId, index: usize) -> Result<NodeId> {
        let shape = self.val(x).shape().to_vec();
        if shape.len() < 2 || index >= shape[0] {
            return Err(Error::shape(format!(
                "slice_batch index {index} out of range for shape {shape:?}"
            )));
        }
        let rest: usize = shape[1..].iter().product();
        let data = self.val(x).data()[index * rest..(index + 1) * rest].to_vec();
        let v = Tensor::new(shape[1..].to_vec(), data)?;
        Ok(self.push(v, self.ng(x), Op::SliceBatch { x, index }))
    }

    // ---- classification head ----------------------------------------

    /// Softmax over the last axis.
    pub fn softmax_last(&mut self, x: NodeId) -> Result<NodeId> {
        let shape = self.val(x).shape();
        let cols = *shape.last().unwrap();
        let rows = self.val(x).numel() / cols;
        let mut out = Tensor::zeros(shape.to_vec());
        kernels::softmax_rows(self.val(x).data(), rows, cols, out.data_mut());
        Ok(self.push(out, self.ng(x), Op::Softmax(x)))
    }

    /// Mean softmax cross-entropy of `[n, k]` logits against class
    /// indices.
    pub fn cross_entropy_mean(&mut self, logits: NodeId, targets: &[usize]) -> Result<NodeId> {
        let shape = self.val(logits).shape();
        if shape.len() != 2 || shape[0] != targets.len() {
            return Err(Error::shape(format!(
                "cross_entropy_mean needs [n,k] logits with n={} targets, got {shape:?}",
                targets.len()
            )));
        }
        let (n, k) = (shape[0], shape[1]);
        if let Some(&bad) = targets.iter().find(|&&t| t >= k) {
            return Err(Error::contract(format!(
                "target class {bad} out of range for {k} classes"
            )));
        }
        let mut acc = 0.0f64;
        for (i, &t) in targets.iter().enumerate() {
            let row = &self.val(logits).data()[i * k..(i + 1) * k];
            let mx = row.iter().fold(f64::NEG_INFINITY, |m, v| m.max(v.tof()));
            let lse: f64 = row.iter().map(|v| (v.tof() - mx).exp()).sum::<f64>().ln() + mx;
            acc += lse - row[t].tof();
        }
        let v = Tensor::scalar(T::fromf(acc / n as f64));
        Ok(self.push(
            v,
            self.ng(logits),
            Op::CrossEntropyMean {
                logits,
                targets: targets.to_vec(),
            },
        ))
    }

    /// Inverted dropout with the mask drawn from `seed`; identity must
    /// be expressed by simply not recording the op (evaluation path).
    pub fn dropout(&mut self, x: NodeId, rate: f64, seed: u64) -> Result<NodeId> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::contract(format!(
                "dropout rate must be in [0, 1), got {rate}"
            )));
        }
        let mut rng = rng_from_seed(seed);
        let keep_scale = 1.0 / (1.0 - rate);
        let mask: Vec<bool> = (0..self.val(x).numel())
            .map(|_| rng.gen_range(0.0..1.0) >= rate)
            .collect();
        let ks = T::fromf(keep_scale);
        let mut out = self.val(x).clone();
        for (v, &m) in out.data_mut().iter_mut().zip(&mask) {
            *v = if m { *v * ks } else { T::zero() };
        }
        Ok(self.push(out, self.ng(x), Op::Dropout { x, keep_scale, mask }))
    }

    // ---- convolution and pooling ------------------------------------

    /// Cross-correlation of `[n, ci, h, w]` with `[co, ci, kh, kw]`.
    pub fn conv2d(&mut self, x: NodeId, w: NodeId, stride: usize, pad: usize) -> Result<NodeId> {
        let (sx, sw) = (self.val(x).shape().to_vec(), self.val(w).shape().to_vec());
        if sx.len() != 4 || sw.len() != 4 || sx[1] != sw[1] {
            return Err(Error::shape(format!(
                "conv2d requires [n,ci,h,w] with [co,ci,kh,kw], got {sx:?}, {sw:?}"
            )));
        }
        if stride == 0 {
            return Err(Error::contract("conv2d stride must be >= 1"));
        }
        let (n, ci, h, wd) = (sx[0], sx[1], sx[2], sx[3]);
        let (co, kh, kw) = (sw[0], sw[2], sw[3]);
        if h + 2 * pad < kh || wd + 2 * pad < kw {
            return Err(Error::shape(format!(
                "conv2d kernel {kh}x{kw} larger than padded input {h}x{wd} (pad {pad})"
            )));
        }
        let ho = kernels::conv_out_dim(h, kh, stride, pad);
        let wo = kernels::conv_out_dim(wd, kw, stride, pad);
        let mut out = Tensor::zeros(vec![n, co, ho, wo]);
        kernels::conv2d_forward(
            self.val(x).data(),
            self.val(w).data(),
            n,
            ci,
            h,
            wd,
            co,
            kh,
            kw,
            stride,
            pad,
            out.data_mut(),
        );
        Ok(self.push(out, self.ng(x) || self.ng(w), Op::Conv2d { x, w, stride, pad }))
    }

    /// 2x2 max pooling with stride 2 over the trailing two axes; both
    /// must be even.
    pub fn max_pool2(&mut self, x: NodeId) -> Result<NodeId> {
        let shape = self.val(x).shape().to_vec();
        if shape.len() < 3 {
            return Err(Error::shape(format!(
                "max_pool2 needs at least [c, h, w], got {shape:?}"
            )));
        }
        let (h, w) = (shape[shape.len() - 2], shape[shape.len() - 1]);
        if h % 2 != 0 || w % 2 != 0 {
            return Err(Error::shape(format!(
                "max_pool2 needs even spatial dims, got {h}x{w}"
            )));
        }
        let lead: usize = shape[..shape.len() - 2].iter().product();
        let (ho, wo) = (h / 2, w / 2);
        let mut out_shape = shape[..shape.len() - 2].to_vec();
        out_shape.push(ho);
        out_shape.push(wo);
        let mut out = Tensor::zeros(out_shape);
        let mut argmax = vec![0u8; lead * ho * wo];
        for l in 0..lead {
            let plane = &self.val(x).data()[l * h * w..(l + 1) * h * w];
            for u in 0..ho {
                for v in 0..wo {
                    let mut best = T::neg_infinity();
                    let mut best_i = 0u8;
                    for (i, (dr, dc)) in [(0, 0), (0, 1), (1, 0), (1, 1)].iter().enumerate() {
                        let val = plane[(2 * u + dr) * w + 2 * v + dc];
                        if val > best {
                            best = val;
                            best_i = i as u8;
                        }
                    }
                    out.data_mut()[(l * ho + u) * wo + v] = best;
                    argmax[(l * ho + u) * wo + v] = best_i;
                }
            }
        }
        Ok(self.push(out, self.ng(x), Op::MaxPool2 { x, argmax }))
    }

    /// Max over the group axis of `[n, c, g, h, w]`.
    pub fn group_max_pool(&mut self, x: NodeId) -> Result<NodeId> {
        let shape = self.val(x).shape().to_vec();
        if shape.len() != 5 {
            return Err(Error::shape(format!(
                "group_max_pool needs [n,c,g,h,w], got {shape:?}"
            )));
        }
        let (n, c, g, h, w) = (shape[0], shape[1], shape[2], shape[3], shape[4]);
        let mut out = Tensor::zeros(vec![n, c, h, w]);
        let mut argmax = vec![0u16; n * c * h * w];
        for nc in 0..n * c {
            for p in 0..h * w {
                let mut best = T::neg_infinity();
                let mut best_g = 0u16;
                for j in 0..g {
                    let v = self.val(x).data()[(nc * g + j) * h * w + p];
                    if v > best {
                        best = v;
                        best_g = j as u16;
                    }
                }
                out.data_mut()[nc * h * w + p] = best;
                argmax[nc * h * w + p] = best_g;
            }
        }
        Ok(self.push(out, self.ng(x), Op::GroupMaxPool { x, argmax }))
    }

    /// Max over all spatial positions of `[n, c, h, w]`.
    pub fn global_max_pool(&mut self, x: NodeId) -> Result<NodeId> {
        let shape = self.val(x).shape().to_vec();
        if shape.len() != 4 {
            return Err(Error::shape(format!(
                "global_max_pool needs [n,c,h,w], got {shape:?}"
            )));
        }
        let (n, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
        let mut out = Tensor::zeros(vec![n, c]);
        let mut argmax = vec![0u32; n * c];
        for nc in 0..n * c {
            let plane = &self.val(x).data()[nc * h * w..(nc + 1) * h * w];
            let mut best = T::neg_infinity();
            let mut best_p = 0u32;
            for (p, &v) in plane.iter().enumerate() {
                if v > best {
                    best = v;
                    best_p = p as u32;
                }
            }
            out.data_mut()[nc] = best;
            argmax[nc] = best_p;
        }
        Ok(self.push(out, self.ng(x), Op::GlobalMaxPool { x, argmax }))
    }

    // ---- geometry ---------------------------------------------------

    /// Shift every `[h, w]` plane of `[n, c, h, w]` to `x - min + 1`, so
    /// all values are at least one. The minimum location participates in
    /// the gradient (subgradient at the first minimum in scan order).
    pub fn shift_positive(&mut self, x: NodeId) -> Result<NodeId> {
        let shape = self.val(x).shape().to_vec();
        if shape.len() != 4 {
            return Err(Error::shape(format!(
                "shift_positive needs [n,c,h,w], got {shape:?}"
            )));
        }
        let plane = shape[2] * shape[3];
        let lead = shape[0] * shape[1];
        let mut out = self.val(x).clone();
        let mut argmin = vec![0u32; lead];
        for l in 0..lead {
            let pl = &mut out.data_mut()[l * plane..(l + 1) * plane];
            let mut mn = pl[0];
            let mut mi = 0u32;
            for (i, &v) in pl.iter().enumerate() {
                if v < mn {
                    mn = v;
                    mi = i as u32;
                }
            }
            for v in pl.iter_mut() {
                *v = *v - mn + T::one();
            }
            argmin[l] = mi;
        }
        Ok(self.push(out, self.ng(x), Op::ShiftPositive { x, argmin }))
    }

    /// Sample a `[c, h, w]` image at `coords` (row, col pairs) with
    /// bilinear interpolation and zero padding; output `[c, len]`.
    pub fn bilinear_sample(&mut self, image: NodeId, coords: &[(f64, f64)]) -> Result<NodeId> {
        let shape = self.val(image).shape().to_vec();
        if shape.len() != 3 {
            return Err(Error::shape(format!(
                "bilinear_sample needs [c,h,w], got {shape:?}"
            )));
        }
        if coords.is_empty() {
            return Err(Error::contract("bilinear_sample needs at least one coordinate"));
        }
        let (c, h, w) = (shape[0], shape[1], shape[2]);
        let mut out = Tensor::zeros(vec![c, coords.len()]);
        for ch in 0..c {
            let plane = &self.val(image).data()[ch * h * w..(ch + 1) * h * w];
            for (i, &(r, cc)) in coords.iter().enumerate() {
                out.data_mut()[ch * coords.len() + i] = bilinear_one(plane, h, w, r, cc);
            }
        }
        Ok(self.push(
            out,
            self.ng(image),
            Op::BilinearSample {
                image,
                coords: coords.to_vec(),
            },
        ))
    }

    /// Rotate the trailing `[h, w]` planes of a tensor by `angle`
    /// radians about the plane center. Quarter-turn multiples use exact
    /// index permutations.
    pub fn rotate_planes(&mut self, x: NodeId, angle: f64) -> Result<NodeId> {
        let shape = self.val(x).shape().to_vec();
        if shape.len() < 2 {
            return Err(Error::shape(format!(
                "rotate_planes needs trailing [h,w], got {shape:?}"
            )));
        }
        let (h, w) = (shape[shape.len() - 2], shape[shape.len() - 1]);
        let rot = resolve_rotation(angle, h, w);
        self.rotate_planes_resolved(x, rot)
    }

    /// Rotate by a pre-resolved rotation (e.g. a group element).
    pub fn rotate_planes_resolved(&mut self, x: NodeId, rot: PlaneRot) -> Result<NodeId> {
        let shape = self.val(x).shape().to_vec();
        let (h, w) = (shape[shape.len() - 2], shape[shape.len() - 1]);
        let lead: usize = shape[..shape.len() - 2].iter().product();
        let mut out = Tensor::zeros(shape.clone());
        plane_rotate_batch(self.val(x).data(), out.data_mut(), lead, h, w, rot);
        Ok(self.push(out, self.ng(x), Op::RotatePlanes { x, rot }))
    }

    /// Stack raster-rotated copies of a free kernel `[co, ci, k, k]`
    /// over all group elements: `[g, co, ci, k, k]`. Quarter-turn
    /// elements permute exactly; others resample bilinearly about the
    /// kernel center.
    pub fn kernel_rotations(
        &mut self,
        psi: NodeId,
        group: CyclicRotationGroup,
    ) -> Result<NodeId> {
        let shape = self.val(psi).shape().to_vec();
        if shape.len() != 4 || shape[2] != shape[3] {
            return Err(Error::shape(format!(
                "kernel_rotations needs square [co,ci,k,k], got {shape:?}"
            )));
        }
        let (co, ci, k) = (shape[0], shape[1], shape[2]);
        let g = group.order();
        let mut out = Tensor::zeros(vec![g, co, ci, k, k]);
        for j in 0..g {
            let rot = group.plane_rotation(j, k, k);
            let dst = &mut out.data_mut()[j * co * ci * k * k..(j + 1) * co * ci * k * k];
            plane_rotate_batch(self.val(psi).data(), dst, co * ci, k, k, rot);
        }
        Ok(self.push(out, self.ng(psi), Op::KernelRotations { psi, group }))
    }

    // ---- steerable convolutions -------------------------------------

    /// Synthesize lifting kernels `[g, co, ci, k, k]` from coefficients
    /// `[co, ci, 2*n_f]` and the analytically rotated basis.
    pub fn synth_lift(&mut self, coef: NodeId, basis: &Arc<SteerableBasis>) -> Result<NodeId> {
        let shape = self.val(coef).shape().to_vec();
        if shape.len() != 3 || shape[2] != 2 * basis.n_f() {
            return Err(Error::shape(format!(
                "lifting coefficients must be [co, ci, {}], got {shape:?}",
                2 * basis.n_f()
            )));
        }
        let (co, ci) = (shape[0], shape[1]);
        let (g, k) = (basis.group().order(), basis.kernel_size());
        let nf2 = 2 * basis.n_f();
        let mut out = Tensor::zeros(vec![g, co, ci, k, k]);
        for j in 0..g {
            let bg_t: Vec<T> = basis.channels(j).iter().map(|&v| T::fromf(v)).collect();
            let dst = &mut out.data_mut()[j * co * ci * k * k..(j + 1) * co * ci * k * k];
            // [co*ci, 2nf] @ [2nf, k*k]
            kernels::matmul(self.nodes[coef.0].value.data(), &bg_t, co * ci, nf2, k * k, dst);
        }
        Ok(self.push(
            out,
            self.ng(coef),
            Op::SynthLift {
                coef,
                basis: Arc::clone(basis),
            },
        ))
    }

    /// Synthesize group-convolution kernels `[g, co, ci, g, k, k]` from
    /// coefficients `[co, ci, g, 2*n_f]`. Output element `g` reads the
    /// coefficient slice at shifted filter-group index `(h - g) mod g`
    /// and multiplies the basis rotated by `g`.
    pub fn synth_group(&mut self, coef: NodeId, basis: &Arc<SteerableBasis>) -> Result<NodeId> {
        let g = basis.group().order();
        let shape = self.val(coef).shape().to_vec();
        if shape.len() != 4 || shape[2] != g || shape[3] != 2 * basis.n_f() {
            return Err(Error::shape(format!(
                "group coefficients must be [co, ci, {g}, {}], got {shape:?}",
                2 * basis.n_f()
            )));
        }
        let (co, ci) = (shape[0], shape[1]);
        let k = basis.kernel_size();
        let nf2 = 2 * basis.n_f();
        let kk = k * k;
        let mut out = Tensor::zeros(vec![g, co, ci, g, k, k]);
        for j in 0..g {
            let bg: Vec<T> = basis.channels(j).iter().map(|&v| T::fromf(v)).collect();
            for oc in 0..co {
                for ic in 0..ci {
                    for h in 0..g {
                        let hs = (h + g - j) % g; // (h - j) mod g
                        let cf = &self.val(coef).data()
                            [((oc * ci + ic) * g + hs) * nf2..((oc * ci + ic) * g + hs + 1) * nf2];
                        let dst = &mut out.data_mut()[((((j * co + oc) * ci + ic) * g + h) * kk)
                            ..(((j * co + oc) * ci + ic) * g + h + 1) * kk];
                        for (p, d) in dst.iter_mut().enumerate() {
                            let mut acc = T::zero();
                            for f in 0..nf2 {
                                acc += cf[f] * bg[f * kk + p];
                            }
                            *d = acc;
                        }
                    }
                }
            }
        }
        Ok(self.push(
            out,
            self.ng(coef),
            Op::SynthGroup {
                coef,
                basis: Arc::clone(basis),
            },
        ))
    }

    /// Lifting convolution: planar input `[n, ci, h, w]` with a rotated
    /// kernel stack `[g, co, ci, k, k]` (odd `k`, same padding), output
    /// `[n, co, g, h, w]`.
    ///
    /// For group elements that are exact quarter turns on square inputs,
    /// channel `g` is computed as `rot_g(conv(rot_{-g}(x), stack[0]))`,
    /// which commutes with `C_4` actions bit-exactly. Other elements
    /// convolve with `stack[g]` directly. Both agree (up to rounding)
    /// whenever `stack[g]` is the rotation of `stack[0]`, which all
    /// kernel producers in this crate guarantee.
    pub fn lifting_conv(
        &mut self,
        x: NodeId,
        kernels_node: NodeId,
        group: CyclicRotationGroup,
    ) -> Result<NodeId> {
        let sx = self.val(x).shape().to_vec();
        let sk = self.val(kernels_node).shape().to_vec();
        if sx.len() != 4 || sk.len() != 5 {
            return Err(Error::shape(format!(
                "lifting_conv needs [n,ci,h,w] with [g,co,ci,k,k], got {sx:?}, {sk:?}"
            )));
        }
        let (n, ci, h, w) = (sx[0], sx[1], sx[2], sx[3]);
        let (g, co, k) = (sk[0], sk[1], sk[3]);
        if sk[2] != ci || sk[3] != sk[4] || k % 2 == 0 || g != group.order() {
            return Err(Error::shape(format!(
                "lifting_conv kernel stack mismatch: input {sx:?}, kernels {sk:?}, group order {}",
                group.order()
            )));
        }
        let pad = (k - 1) / 2;
        let kt = co * ci * k * k;
        let mut out = Tensor::zeros(vec![n, co, g, h, w]);
        let mut chan = vec![T::zero(); n * co * h * w];
        let mut xr = vec![T::zero(); n * ci * h * w];
        for j in 0..g {
            let exact = matches!(group.plane_rotation(j, h, w), PlaneRot::Quarter(_));
            if exact {
                let inv = group.plane_rotation(group.inverse(j), h, w);
                plane_rotate_batch(self.val(x).data(), &mut xr, n * ci, h, w, inv);
                let base = &self.val(kernels_node).data()[0..kt];
                kernels::conv2d_forward(&xr, base, n, ci, h, w, co, k, k, 1, pad, &mut chan);
                let fwd = group.plane_rotation(j, h, w);
                // Rotate each output plane back and scatter into [:, :, j].
                scatter_group_channel(&chan, out.data_mut(), n, co, g, j, h, w, Some(fwd));
            } else {
                let kj = &self.val(kernels_node).data()[j * kt..(j + 1) * kt];
                kernels::conv2d_forward(
                    self.val(x).data(),
                    kj,
                    n,
                    ci,
                    h,
                    w,
                    co,
                    k,
                    k,
                    1,
                    pad,
                    &mut chan,
                );
                scatter_group_channel(&chan, out.data_mut(), n, co, g, j, h, w, None);
            }
        }
        Ok(self.push(
            out,
            self.ng(x) || self.ng(kernels_node),
            Op::LiftingConv {
                x,
                kernels: kernels_node,
                group,
            },
        ))
    }

    /// Group convolution: input `[n, ci, g, h, w]` with a kernel stack
    /// `[g, co, ci, g, k, k]` (element, out channel, in channel, filter
    /// group axis), output `[n, co, g, h, w]`. Exact quarter-turn
    /// elements use the rotate-convolve-rotate path with `stack[0]`.
    pub fn group_conv(
        &mut self,
        x: NodeId,
        kernels_node: NodeId,
        group: CyclicRotationGroup,
    ) -> Result<NodeId> {
        let sx = self.val(x).shape().to_vec();
        let sk = self.val(kernels_node).shape().to_vec();
        if sx.len() != 5 || sk.len() != 6 {
            return Err(Error::shape(format!(
                "group_conv needs [n,ci,g,h,w] with [g,co,ci,g,k,k], got {sx:?}, {sk:?}"
            )));
        }
        let (n, ci, g, h, w) = (sx[0], sx[1], sx[2], sx[3], sx[4]);
        let (co, k) = (sk[1], sk[4]);
        if g != group.order()
            || sk[0] != g
            || sk[2] != ci
            || sk[3] != g
            || sk[4] != sk[5]
            || k % 2 == 0
        {
            return Err(Error::shape(format!(
                "group_conv kernel stack mismatch: input {sx:?}, kernels {sk:?}, group order {}",
                group.order()
            )));
        }
        let pad = (k - 1) / 2;
        let kt = co * ci * g * k * k;
        let plane = h * w;
        let mut out = Tensor::zeros(vec![n, co, g, h, w]);
        let mut chan = vec![T::zero(); n * co * plane];
        let mut xg = vec![T::zero(); n * ci * g * plane];
        for j in 0..g {
            let exact = matches!(group.plane_rotation(j, h, w), PlaneRot::Quarter(_));
            if exact {
                // xg channel (ci, h') holds rot_{-j} x[:, ci, (j+h') mod g].
                let inv = group.plane_rotation(group.inverse(j), h, w);
                for b in 0..n {
                    for ic in 0..ci {
                        for hp in 0..g {
                            let src_g = group.compose(j, hp);
                            let src = &self.val(x).data()
                                [((b * ci + ic) * g + src_g) * plane..((b * ci + ic) * g + src_g + 1) * plane];
                            let dst = &mut xg
                                [((b * ci + ic) * g + hp) * plane..((b * ci + ic) * g + hp + 1) * plane];
                            rotate_plane_raw(src, dst, h, w, inv);
                        }
                    }
                }
                let base = &self.val(kernels_node).data()[0..kt];
                kernels::conv2d_forward(&xg, base, n, ci * g, h, w, co, k, k, 1, pad, &mut chan);
                let fwd = group.plane_rotation(j, h, w);
                scatter_group_channel(&chan, out.data_mut(), n, co, g, j, h, w, Some(fwd));
            } else {
                let kj = &self.val(kernels_node).data()[j * kt..(j + 1) * kt];
                kernels::conv2d_forward(
                    self.val(x).data(),
                    kj,
                    n,
                    ci * g,
                    h,
                    w,
                    co,
                    k,
                    k,
                    1,
                    pad,
                    &mut chan,
                );
                scatter_group_channel(&chan, out.data_mut(), n, co, g, j, h, w, None);
            }
        }
        Ok(self.push(
            out,
            self.ng(x) || self.ng(kernels_node),
            Op::GroupConv {
                x,
                kernels: kernels_node,
                group,
            },
        ))
    }

    // ---- invariant-integration fused ops ----------------------------

    /// Global weighted-sum pooling: `out[n, co]` is the group-mean inner
    /// product of the input with full-extent rotated kernels
    /// `[g, co, ci, h, w]`.
    pub fn global_ws_pool(&mut self, x: NodeId, kernels_node: NodeId) -> Result<NodeId> {
        let sx = self.val(x).shape().to_vec();
        let sk = self.val(kernels_node).shape().to_vec();
        if sx.len() != 4 || sk.len() != 5 || sk[2] != sx[1] || sk[3] != sx[2] || sk[4] != sx[3] {
            return Err(Error::shape(format!(
                "global_ws_pool needs [n,ci,h,w] with [g,co,ci,h,w], got {sx:?}, {sk:?}"
            )));
        }
        let (n, ci, h, w) = (sx[0], sx[1], sx[2], sx[3]);
        let (g, co) = (sk[0], sk[1]);
        let plane = h * w;
        let inv = T::fromf(1.0 / g as f64);
        let mut out = Tensor::zeros(vec![n, co]);
        let xd = self.val(x).data();
        let kd = self.val(kernels_node).data();
        for_each_chunk_mut(out.data_mut(), co, |b, row| {
            for (oc, o) in row.iter_mut().enumerate() {
                let mut acc = T::zero();
                for j in 0..g {
                    for ic in 0..ci {
                        let xp = &xd[(b * ci + ic) * plane..(b * ci + ic + 1) * plane];
                        let kp = &kd[((j * co + oc) * ci + ic) * plane
                            ..((j * co + oc) * ci + ic + 1) * plane];
                        for (xv, kv) in xp.iter().zip(kp) {
                            acc += *xv * *kv;
                        }
                    }
                }
                *o = acc * inv;
            }
        });
        Ok(self.push(
            out,
            self.ng(x) || self.ng(kernels_node),
            Op::GlobalWsPool {
                x,
                kernels: kernels_node,
            },
        ))
    }

    /// Local weighted-sum pooling, computed directly from its defining
    /// double sum: slide rotated copies of `psi` (`[co, ci, k, k]`) over
    /// the zero-padded input and average over group and space, giving
    /// `[n, co]`. Deliberately independent of the lifting-convolution
    /// route so the two can be cross-checked.
    pub fn local_ws_pool(
        &mut self,
        x: NodeId,
        psi: NodeId,
        group: CyclicRotationGroup,
    ) -> Result<NodeId> {
        let sx = self.val(x).shape().to_vec();
        let sp = self.val(psi).shape().to_vec();
        if sx.len() != 4 || sp.len() != 4 || sp[1] != sx[1] || sp[2] != sp[3] || sp[2] % 2 == 0 {
            return Err(Error::shape(format!(
                "local_ws_pool needs [n,ci,h,w] with odd square [co,ci,k,k], got {sx:?}, {sp:?}"
            )));
        }
        let (n, ci, h, w) = (sx[0], sx[1], sx[2], sx[3]);
        let (co, k) = (sp[0], sp[2]);
        let g = group.order();
        let psi_rots = rotate_kernel_stack(self.val(psi).data(), co, ci, k, group);
        let norm = T::fromf(1.0 / (g * h * w) as f64);
        let half = (k / 2) as i64;
        let mut out = Tensor::zeros(vec![n, co]);
        let xd = self.val(x).data();
        for_each_chunk_mut(out.data_mut(), co, |b, row| {
            for (oc, o) in row.iter_mut().enumerate() {
                let mut acc = T::zero();
                for j in 0..g {
                    let pg = &psi_rots[j * co * ci * k * k..(j + 1) * co * ci * k * k];
                    for u in 0..h as i64 {
                        for v in 0..w as i64 {
                            for ic in 0..ci {
                                let xp = &xd[(b * ci + ic) * h * w..(b * ci + ic + 1) * h * w];
                                let kp = &pg[(oc * ci + ic) * k * k..(oc * ci + ic + 1) * k * k];
                                for a in 0..k as i64 {
                                    let r = u + a - half;
                                    if r < 0 || r >= h as i64 {
                                        continue;
                                    }
                                    for bb in 0..k as i64 {
                                        let c = v + bb - half;
                                        if c < 0 || c >= w as i64 {
                                            continue;
                                        }
                                        acc += xp[r as usize * w + c as usize]
                                            * kp[(a * k as i64 + bb) as usize];
                                    }
                                }
                            }
                        }
                    }
                }
                *o = acc * norm;
            }
        });
        Ok(self.push(
            out,
            self.ng(x) || self.ng(psi),
            Op::LocalWsPool { x, psi, group },
        ))
    }

    /// Monomial pooling: for each channel of `[n, c, h, w]` (values must
    /// be strictly positive — see [`Graph::shift_positive`]), average
    /// over all valid centers `(u, v)` and group angles `phi` the
    /// product of bilinear samples along the ray at distances
    /// `distances`, raised to the monomial exponents. A center is valid
    /// when every sample of every angle stays inside the image, so no
    /// padding zeros enter a product.
    pub fn monomial_pool(
        &mut self,
        x: NodeId,
        exponents: NodeId,
        distances: &[f64],
        group: CyclicRotationGroup,
    ) -> Result<NodeId> {
        let sx = self.val(x).shape().to_vec();
        let se = self.val(exponents).shape().to_vec();
        if sx.len() != 4 {
            return Err(Error::shape(format!(
                "monomial_pool needs [n,c,h,w], got {sx:?}"
            )));
        }
        if se.len() != 1 || se[0] != distances.len() {
            return Err(Error::shape(format!(
                "monomial exponents must be [{}], got {se:?}",
                distances.len()
            )));
        }
        let (n, c, h, w) = (sx[0], sx[1], sx[2], sx[3]);
        let geom = MonomialGeometry::new(distances, group, h, w)?;
        let exps: Vec<T> = self.val(exponents).data().to_vec();
        let xd = self.val(x).data();
        let mut out = Tensor::zeros(vec![n, c]);
        for_each_chunk_mut(out.data_mut(), c, |b, row| {
            for (ch, o) in row.iter_mut().enumerate() {
                let plane = &xd[(b * c + ch) * h * w..(b * c + ch + 1) * h * w];
                let mut acc = T::zero();
                geom.for_each_position(|samples| {
                    let mut prod = T::one();
                    for (i, &(r, cc)) in samples.iter().enumerate() {
                        let s = bilinear_one(plane, h, w, r, cc);
                        prod = prod * s.powf(exps[i]);
                    }
                    acc += prod;
                });
                *o = acc * T::fromf(geom.norm());
            }
        });
        Ok(self.push(
            out,
            self.ng(x) || self.ng(exponents),
            Op::MonomialPool {
                x,
                exponents,
                distances: distances.to_vec(),
                group,
            },
        ))
    }

    /// Extract, for every pixel of `[n, c, h, w]` and every group angle
    /// `phi`, the `patch x patch` neighborhood sampled along axes
    /// rotated by `phi` (single bilinear interpolation, zero padding
    /// outside the image). Output rows are ordered sample-major, then
    /// pixel (row-major), then group element: `[(n*h*w*g), c*patch^2]`.
    pub fn patch_stack(
        &mut self,
        x: NodeId,
        group: CyclicRotationGroup,
        patch: usize,
    ) -> Result<NodeId> {
        let sx = self.val(x).shape().to_vec();
        if sx.len() != 4 {
            return Err(Error::shape(format!("patch_stack needs [n,c,h,w], got {sx:?}")));
        }
        if patch == 0 || patch % 2 == 0 {
            return Err(Error::contract(format!(
                "patch size must be odd and positive, got {patch}"
            )));
        }
        let (n, c, h, w) = (sx[0], sx[1], sx[2], sx[3]);
        let g = group.order();
        let offsets = rotated_patch_offsets(group, patch);
        let cols = c * patch * patch;
        let mut out = Tensor::zeros(vec![n * h * w * g, cols]);
        let xd = self.val(x).data();
        for_each_chunk_mut(out.data_mut(), h * w * g * cols, |b, block| {
            for u in 0..h {
                for v in 0..w {
                    for j in 0..g {
                        let row = &mut block
                            [((u * w + v) * g + j) * cols..((u * w + v) * g + j + 1) * cols];
                        let offs = &offsets[j];
                        for ch in 0..c {
                            let plane = &xd[(b * c + ch) * h * w..(b * c + ch + 1) * h * w];
                            for (p, &(dr, dc)) in offs.iter().enumerate() {
                                row[ch * patch * patch + p] =
                                    bilinear_one(plane, h, w, u as f64 + dr, v as f64 + dc);
                            }
                        }
                    }
                }
            }
        });
        Ok(self.push(
            out,
            self.ng(x),
            Op::PatchStack { x, group, patch },
        ))
    }

    /// View a `[c, h, w]` map as `[h*w, c]` tokens (pixel-major rows).
    pub fn image_to_tokens(&mut self, x: NodeId) -> Result<NodeId> {
        let sx = self.val(x).shape().to_vec();
        if sx.len() != 3 {
            return Err(Error::shape(format!("image_to_tokens needs [c,h,w], got {sx:?}")));
        }
        let (c, h, w) = (sx[0], sx[1], sx[2]);
        let hw = h * w;
        let mut out = Tensor::zeros(vec![hw, c]);
        for ch in 0..c {
            for p in 0..hw {
                out.data_mut()[p * c + ch] = self.val(x).data()[ch * hw + p];
            }
        }
        Ok(self.push(out, self.ng(x), Op::ImageToTokens(x)))
    }

    /// Relative-encoding attention bias: `out[i, j] = q[i] . pk[off(i,
    /// j)]` where `offsets` maps token pairs (query `i`, key `j`) to
    /// rows of the projected encoding table `pk`.
    pub fn rel_attn_bias(
        &mut self,
        q: NodeId,
        pk: NodeId,
        offsets: &Arc<Vec<u32>>,
    ) -> Result<NodeId> {
        let sq = self.val(q).shape().to_vec();
        let sp = self.val(pk).shape().to_vec();
        if sq.len() != 2 || sp.len() != 2 || sq[1] != sp[1] {
            return Err(Error::shape(format!(
                "rel_attn_bias needs [n,ch] with [m,ch], got {sq:?}, {sp:?}"
            )));
        }
        let (n, ch) = (sq[0], sq[1]);
        if offsets.len() != n * n {
            return Err(Error::shape(format!(
                "offset table must have {n}*{n} entries, got {}",
                offsets.len()
            )));
        }
        if let Some(&bad) = offsets.iter().find(|&&o| o as usize >= sp[0]) {
            return Err(Error::contract(format!(
                "offset index {bad} out of range for table of {} rows",
                sp[0]
            )));
        }
        let mut out = Tensor::zeros(vec![n, n]);
        let qd = self.val(q).data();
        let pd = self.val(pk).data();
        for_each_chunk_mut(out.data_mut(), n, |i, row| {
            let qr = &qd[i * ch..(i + 1) * ch];
            for (j, o) in row.iter_mut().enumerate() {
                let pr = &pd[offsets[i * n + j] as usize * ch..][..ch];
                let mut acc = T::zero();
                for (a, b) in qr.iter().zip(pr) {
                    acc += *a * *b;
                }
                *o = acc;
            }
        });
        Ok(self.push(
            out,
            self.ng(q) || self.ng(pk),
            Op::RelAttnBias {
                q,
                pk,
                offsets: Arc::clone(offsets),
            },
        ))
    }

    /// Scale each block of `chunk` consecutive rows of `w` (`[m*chunk,
    /// o]`) by the matching entry of the mask vector `c` (`[m]`). Used
    /// to attach a differentiable gate to each monomial's fan-out.
    pub fn row_group_scale(&mut self, w: NodeId, c: NodeId, chunk: usize) -> Result<NodeId> {
        let sw = self.val(w).shape().to_vec();
        let sc = self.val(c).shape().to_vec();
        if sw.len() != 2 || sc.len() != 1 || chunk == 0 || sw[0] != sc[0] * chunk {
            return Err(Error::shape(format!(
                "row_group_scale needs [m*{chunk}, o] with mask [m], got {sw:?}, {sc:?}"
            )));
        }
        let (rows, o) = (sw[0], sw[1]);
        let mut out = Tensor::zeros(vec![rows, o]);
        for r in 0..rows {
            let s = self.val(c).data()[r / chunk];
            for j in 0..o {
                out.data_mut()[r * o + j] = self.val(w).data()[r * o + j] * s;
            }
        }
        Ok(self.push(
            out,
            self.ng(w) || self.ng(c),
            Op::RowGroupScale { w, c, chunk },
        ))
    }

    // ---- batch normalization ----------------------------------------

    /// Batch normalization over axis 1 of `[n, c, ...]` using batch
    /// statistics (training path). Returns the node plus the per-channel
    /// batch mean and variance for running-average updates.
    pub fn batch_norm_train(
        &mut self,
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        eps: f64,
    ) -> Result<(NodeId, Vec<f64>, Vec<f64>)> {
        let c = self.batch_norm_check(x, gamma, beta)?;
        let xd = self.val(x).data();
        let shape = self.val(x).shape().to_vec();
        let mut mean = vec![0.0f64; c];
        let mut var = vec![0.0f64; c];
        bn_stats(xd, &shape, &mut mean, &mut var);
        let out = bn_apply(
            xd,
            &shape,
            self.val(gamma).data(),
            self.val(beta).data(),
            &mean,
            &var,
            eps,
        );
        let ng = self.ng(x) || self.ng(gamma) || self.ng(beta);
        let id = self.push(
            out,
            ng,
            Op::BatchNormTrain {
                x,
                gamma,
                beta,
                eps,
                mean: mean.clone(),
                var: var.clone(),
            },
        );
        Ok((id, mean, var))
    }

    /// Batch normalization with fixed (running) statistics.
    pub fn batch_norm_eval(
        &mut self,
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        eps: f64,
        mean: &[f64],
        var: &[f64],
    ) -> Result<NodeId> {
        let c = self.batch_norm_check(x, gamma, beta)?;
        if mean.len() != c || var.len() != c {
            return Err(Error::shape(format!(
                "running stats must have {c} channels, got {} / {}",
                mean.len(),
                var.len()
            )));
        }
        let shape = self.val(x).shape().to_vec();
        let out = bn_apply(
            self.val(x).data(),
            &shape,
            self.val(gamma).data(),
            self.val(beta).data(),
            mean,
            var,
            eps,
        );
        let ng = self.ng(x) || self.ng(gamma) || self.ng(beta);
        Ok(self.push(
            out,
            ng,
            Op::BatchNormEval {
                x,
                gamma,
                beta,
                eps,
                mean: mean.to_vec(),
                var: var.to_vec(),
            },
        ))
    }

    fn batch_norm_check(&self, x: NodeId, gamma: NodeId, beta: NodeId) -> Result<usize> {
        let sx = self.val(x).shape();
        if sx.len() < 2 {
            return Err(Error::shape(format!(
                "batch norm needs [n, c, ...], got {sx:?}"
            )));
        }
        let c = sx[1];
        for (name, id) in [("gamma", gamma), ("beta", beta)] {
            let s = self.val(id).shape();
            if s != [c] {
                return Err(Error::shape(format!(
                    "batch norm {name} must be [{c}], got {s:?}"
                )));
            }
        }
        Ok(c)
    }

    // ---- backward ----------------------------------------------------

    /// Reverse sweep from a scalar root. Returns gradients for every
    /// node that requires them and is reachable from the root.
    pub fn backward(&self, root: NodeId) -> Result<Gradients<T>> {
        if self.val(root).numel() != 1 {
            return Err(Error::contract(format!(
                "backward root must be scalar, shape is {:?}",
                self.val(root).shape()
            )));
        }
        if !self.ng(root) {
            return Err(Error::contract(
                "backward root does not depend on any differentiable leaf",
            ));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..=root.0).map(|_| None).collect();
        grads[root.0] = Some(Tensor::full(self.val(root).shape().to_vec(), T::one()));
        for i in (0..=root.0).rev() {
            if grads[i].is_none() || !self.nodes[i].needs_grad {
                continue;
            }
            let g = grads[i].take().expect("present");
            self.propagate(NodeId(i), &g, &mut grads);
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }

    /// Collect parameter gradients from leaf nodes bound to `ParamId`s.
    pub fn param_gradients(&self, grads: &Gradients<T>) -> HashMap<ParamId, Tensor<T>> {
        let mut map: HashMap<ParamId, Tensor<T>> = HashMap::new();
        for (i, node) in self.nodes.iter().enumerate() {
            if let Op::Leaf { param: Some(pid) } = node.op {
                if let Some(g) = grads.wrt(NodeId(i)) {
                    map.entry(pid)
                        .and_modify(|t| {
                            for (a, b) in t.data_mut().iter_mut().zip(g.data()) {
                                *a += *b;
                            }
                        })
                        .or_insert_with(|| g.clone());
                }
            }
        }
        map
    }

    fn accumulate(grads: &mut [Option<Tensor<T>>], id: NodeId, delta: Tensor<T>) {
        match &mut grads[id.0] {
            Some(t) => {
                for (a, b) in t.data_mut().iter_mut().zip(delta.data()) {
                    *a += *b;
                }
            }
            slot @ None => *slot = Some(delta),
        }
    }

    #[allow(clippy::too_many_lines)]
    fn propagate(&self, id: NodeId, g: &Tensor<T>, grads: &mut Vec<Option<Tensor<T>>>) {
        match &self.nodes[id.0].op {
            Op::Leaf { .. } => {}
            Op::Add(a, b) => {
                if self.ng(*a) {
                    Self::accumulate(grads, *a, g.clone());
                }
                if self.ng(*b) {
                    Self::accumulate(grads, *b, g.clone());
                }
            }
            Op::Sub(a, b) => {
                if self.ng(*a) {
                    Self::accumulate(grads, *a, g.clone());
                }
                if self.ng(*b) {
                    Self::accumulate(grads, *b, g.map(|v| -v));
                }
            }
            Op::Mul(a, b) => {
                if self.ng(*a) {
                    let d = g.zip_map(self.val(*b), |x, y| x * y).expect("shape");
                    Self::accumulate(grads, *a, d);
                }
                if self.ng(*b) {
                    let d = g.zip_map(self.val(*a), |x, y| x * y).expect("shape");
                    Self::accumulate(grads, *b, d);
                }
            }
            Op::Scale(x, s) => {
                if self.ng(*x) {
                    let sv = T::fromf(*s);
                    Self::accumulate(grads, *x, g.map(|v| v * sv));
                }
            }
            Op::Abs(x) => {
                if self.ng(*x) {
                    let d = g
                        .zip_map(self.val(*x), |gv, xv| {
                            if xv > T::zero() {
                                gv
                            } else if xv < T::zero() {
                                -gv
                            } else {
                                T::zero()
                            }
                        })
                        .expect("shape");
                    Self::accumulate(grads, *x, d);
                }
            }
            Op::Relu(x) => {
                if self.ng(*x) {
                    let d = g
                        .zip_map(self.val(*x), |gv, xv| {
                            if xv > T::zero() {
                                gv
                            } else {
                                T::zero()
                            }
                        })
                        .expect("shape");
                    Self::accumulate(grads, *x, d);
                }
            }
            Op::Matmul(a, b) => {
                let (m, k) = (self.val(*a).shape()[0], self.val(*a).shape()[1]);
                let n = self.val(*b).shape()[1];
                if self.ng(*a) {
                    let mut d = Tensor::zeros(vec![m, k]);
                    kernels::matmul_transb(g.data(), self.val(*b).data(), m, n, k, d.data_mut());
                    Self::accumulate(grads, *a, d);
                }
                if self.ng(*b) {
                    let mut d = Tensor::zeros(vec![k, n]);
                    kernels::matmul_transa(self.val(*a).data(), g.data(), m, k, n, d.data_mut());
                    Self::accumulate(grads, *b, d);
                }
            }
            Op::MatmulTransB(a, b) => {
                let (m, k) = (self.val(*a).shape()[0], self.val(*a).shape()[1]);
                let n = self.val(*b).shape()[0];
                if self.ng(*a) {
                    let mut d = Tensor::zeros(vec![m, k]);
                    kernels::matmul(g.data(), self.val(*b).data(), m, n, k, d.data_mut());
                    Self::accumulate(grads, *a, d);
                }
                if self.ng(*b) {
                    let mut d = Tensor::zeros(vec![n, k]);
                    kernels::matmul_transa(g.data(), self.val(*a).data(), m, n, k, d.data_mut());
                    Self::accumulate(grads, *b, d);
                }
            }
            Op::AddRow(x, b) => {
                let (m, n) = (self.val(*x).shape()[0], self.val(*x).shape()[1]);
                if self.ng(*x) {
                    Self::accumulate(grads, *x, g.clone());
                }
                if self.ng(*b) {
                    let mut d = Tensor::zeros(vec![n]);
                    for i in 0..m {
                        for j in 0..n {
                            d.data_mut()[j] += g.data()[i * n + j];
                        }
                    }
                    Self::accumulate(grads, *b, d);
                }
            }
            Op::Softmax(x) => {
                if self.ng(*x) {
                    let s = self.val(id);
                    let cols = *s.shape().last().unwrap();
                    let rows = s.numel() / cols;
                    let mut d = Tensor::zeros(s.shape().to_vec());
                    for i in 0..rows {
                        let sr = &s.data()[i * cols..(i + 1) * cols];
                        let gr = &g.data()[i * cols..(i + 1) * cols];
                        let mut dot = T::zero();
                        for (sv, gv) in sr.iter().zip(gr) {
                            dot += *sv * *gv;
                        }
                        for j in 0..cols {
                            d.data_mut()[i * cols + j] = sr[j] * (gr[j] - dot);
                        }
                    }
                    Self::accumulate(grads, *x, d);
                }
            }
            Op::CrossEntropyMean { logits, targets } => {
                if self.ng(*logits) {
                    let shape = self.val(*logits).shape().to_vec();
                    let (n, k) = (shape[0], shape[1]);
                    let gscale = g.data()[0].tof() / n as f64;
                    let mut d = Tensor::zeros(shape);
                    for (i, &t) in targets.iter().enumerate() {
                        let row = &self.val(*logits).data()[i * k..(i + 1) * k];
                        let mx = row.iter().fold(f64::NEG_INFINITY, |m, v| m.max(v.tof()));
                        let denom: f64 = row.iter().map(|v| (v.tof() - mx).exp()).sum();
                        for j in 0..k {
                            let p = (row[j].tof() - mx).exp() / denom;
                            let onehot = if j == t { 1.0 } else { 0.0 };
                            d.data_mut()[i * k + j] = T::fromf((p - onehot) * gscale);
                        }
                    }
                    Self::accumulate(grads, *logits, d);
                }
            }
            Op::SumAll(x) => {
                if self.ng(*x) {
                    let gv = g.data()[0];
                    Self::accumulate(
                        grads,
                        *x,
                        Tensor::full(self.val(*x).shape().to_vec(), gv),
                    );
                }
            }
            Op::MeanTrailing { x, axes } => {
                if self.ng(*x) {
                    let shape = self.val(*x).shape().to_vec();
                    let tail: usize = shape[shape.len() - axes..].iter().product();
                    let lead = self.val(*x).numel() / tail;
                    let inv = T::fromf(1.0 / tail as f64);
                    let mut d = Tensor::zeros(shape);
                    for i in 0..lead {
                        let gv = g.data()[i] * inv;
                        for j in 0..tail {
                            d.data_mut()[i * tail + j] = gv;
                        }
                    }
                    Self::accumulate(grads, *x, d);
                }
            }
            Op::MeanRows(x) => {
                if self.ng(*x) {
                    let shape = self.val(*x).shape().to_vec();
                    let (r, f) = (shape[0], shape[1]);
                    let inv = T::fromf(1.0 / r as f64);
                    let mut d = Tensor::zeros(shape);
                    for i in 0..r {
                        for j in 0..f {
                            d.data_mut()[i * f + j] = g.data()[j] * inv;
                        }
                    }
                    Self::accumulate(grads, *x, d);
                }
            }
            Op::MeanGroupedRows { x, group } => {
                if self.ng(*x) {
                    let shape = self.val(*x).shape().to_vec();
                    let (rows, f) = (shape[0], shape[1]);
                    let inv = T::fromf(1.0 / *group as f64);
                    let mut d = Tensor::zeros(shape);
                    for i in 0..rows {
                        let o = i / group;
                        for j in 0..f {
                            d.data_mut()[i * f + j] = g.data()[o * f + j] * inv;
                        }
                    }
                    Self::accumulate(grads, *x, d);
                }
            }
            Op::Reshape(x) => {
                if self.ng(*x) {
                    let d = g.reshape(self.val(*x).shape().to_vec()).expect("numel");
                    Self::accumulate(grads, *x, d);
                }
            }
            Op::ConcatCols(parts) => {
                let rows = self.val(id).shape()[0];
                let cols = self.val(id).shape()[1];
                let mut base = 0;
                for &p in parts {
                    let pc = self.val(p).shape()[1];
                    if self.ng(p) {
                        let mut d = Tensor::zeros(vec![rows, pc]);
                        for i in 0..rows {
                            for j in 0..pc {
                                d.data_mut()[i * pc + j] = g.data()[i * cols + base + j];
                            }
                        }
                        Self::accumulate(grads, p, d);
                    }
                    base += pc;
                }
            }
            Op::StackRows(parts) => {
                let f = self.val(id).shape()[1];
                for (i, &p) in parts.iter().enumerate() {
                    if self.ng(p) {
                        let d =
                            Tensor::new(vec![f], g.data()[i * f..(i + 1) * f].to_vec()).unwrap();
                        Self::accumulate(grads, p, d);
                    }
                }
            }
            Op::SliceBatch { x, index } => {
                if self.ng(*x) {
                    let shape = self.val(*x).shape().to_vec();
                    let rest: usize = shape[1..].iter().product();
                    let mut d = Tensor::zeros(shape);
                    d.data_mut()[index * rest..(index + 1) * rest].copy_from_slice(g.data());
                    Self::accumulate(grads, *x, d);
                }
            }
            Op::Dropout {
                x,
                keep_scale,
                mask,
            } => {
                if self.ng(*x) {
                    let ks = T::fromf(*keep_scale);
                    let mut d = g.clone();
                    for (v, &m) in d.data_mut().iter_mut().zip(mask) {
                        *v = if m { *v * ks } else { T::zero() };
                    }
                    Self::accumulate(grads, *x, d);
                }
            }
            Op::Conv2d { x, w, stride, pad } => {
                let sx = self.val(*x).shape().to_vec();
                let sw = self.val(*w).shape().to_vec();
                let (n, ci, h, wd) = (sx[0], sx[1], sx[2], sx[3]);
                let (co, kh, kw) = (sw[0], sw[2], sw[3]);
                if self.ng(*x) {
                    let mut d = Tensor::zeros(sx.clone());
                    kernels::conv2d_backward_x(
                        g.data(),
                        self.val(*w).data(),
                        n,
                        ci,
                        h,
                        wd,
                        co,
                        kh,
                        kw,
                        *stride,
                        *pad,
                        d.data_mut(),
                    );
                    Self::accumulate(grads, *x, d);
                }
                if self.ng(*w) {
                    let mut d = Tensor::zeros(sw);
                    kernels::conv2d_backward_w(
                        g.data(),
                        self.val(*x).data(),
                        n,
                        ci,
                        h,
                        wd,
                        co,
                        kh,
                        kw,
                        *stride,
                        *pad,
                        d.data_mut(),
                    );
                    Self::accumulate(grads, *w, d);
                }
            }
            Op::MaxPool2 { x, argmax } => {
                if self.ng(*x) {
                    let shape = self.val(*x).shape().to_vec();
                    let (h, w) = (shape[shape.len() - 2], shape[shape.len() - 1]);
                    let lead = self.val(*x).numel() / (h * w);
                    let (ho, wo) = (h / 2, w / 2);
                    let mut d = Tensor::zeros(shape);
                    for l in 0..lead {
                        for u in 0..ho {
                            for v in 0..wo {
                                let i = (l * ho + u) * wo + v;
                                let (dr, dc) = [(0, 0), (0, 1), (1, 0), (1, 1)][argmax[i] as usize];
                                d.data_mut()[l * h * w + (2 * u + dr) * w + 2 * v + dc] +=
                                    g.data()[i];
                            }
                        }
                    }
                    Self::accumulate(grads, *x, d);
                }
            }
            Op::GroupMaxPool { x, argmax } => {
                if self.ng(*x) {
                    let shape = self.val(*x).shape().to_vec();
                    let (n, c, gg, h, w) = (shape[0], shape[1], shape[2], shape[3], shape[4]);
                    let mut d = Tensor::zeros(shape);
                    for nc in 0..n * c {
                        for p in 0..h * w {
                            let j = argmax[nc * h * w + p] as usize;
                            d.data_mut()[(nc * gg + j) * h * w + p] += g.data()[nc * h * w + p];
                        }
                    }
                    Self::accumulate(grads, *x, d);
                }
            }
            Op::GlobalMaxPool { x, argmax } => {
                if self.ng(*x) {
                    let shape = self.val(*x).shape().to_vec();
                    let (n, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
                    let mut d = Tensor::zeros(shape);
                    for nc in 0..n * c {
                        d.data_mut()[nc * h * w + argmax[nc] as usize] += g.data()[nc];
                    }
                    Self::accumulate(grads, *x, d);
                }
            }
            Op::ShiftPositive { x, argmin } => {
                if self.ng(*x) {
                    let shape = self.val(*x).shape().to_vec();
                    let plane = shape[2] * shape[3];
                    let lead = shape[0] * shape[1];
                    let mut d = g.clone();
                    for l in 0..lead {
                        let gp = &mut d.data_mut()[l * plane..(l + 1) * plane];
                        let mut total = T::zero();
                        for &v in gp.iter() {
                            total += v;
                        }
                        gp[argmin[l] as usize] = gp[argmin[l] as usize] - total;
                    }
                    Self::accumulate(grads, *x, d);
                }
            }
            Op::BilinearSample { image, coords } => {
                if self.ng(*image) {
                    let shape = self.val(*image).shape().to_vec();
                    let (c, h, w) = (shape[0], shape[1], shape[2]);
                    let mut d = Tensor::zeros(shape);
                    for ch in 0..c {
                        let plane = &mut d.data_mut()[ch * h * w..(ch + 1) * h * w];
                        for (i, &(r, cc)) in coords.iter().enumerate() {
                            bilinear_adjoint(plane, h, w, r, cc, g.data()[ch * coords.len() + i]);
                        }
                    }
                    Self::accumulate(grads, *image, d);
                }
            }
            Op::RotatePlanes { x, rot } => {
                if self.ng(*x) {
                    let shape = self.val(*x).shape().to_vec();
                    let (h, w) = (shape[shape.len() - 2], shape[shape.len() - 1]);
                    let lead = self.val(*x).numel() / (h * w);
                    let mut d = Tensor::zeros(shape);
                    for l in 0..lead {
                        rotate_plane_adjoint(
                            &g.data()[l * h * w..(l + 1) * h * w],
                            &mut d.data_mut()[l * h * w..(l + 1) * h * w],
                            h,
                            w,
                            *rot,
                        );
                    }
                    Self::accumulate(grads, *x, d);
                }
            }
            Op::KernelRotations { psi, group } => {
                if self.ng(*psi) {
                    let shape = self.val(*psi).shape().to_vec();
                    let (co, ci, k) = (shape[0], shape[1], shape[2]);
                    let mut d = Tensor::zeros(shape);
                    for j in 0..group.order() {
                        let rot = group.plane_rotation(j, k, k);
                        let gj = &g.data()[j * co * ci * k * k..(j + 1) * co * ci * k * k];
                        for p in 0..co * ci {
                            rotate_plane_adjoint(
                                &gj[p * k * k..(p + 1) * k * k],
                                &mut d.data_mut()[p * k * k..(p + 1) * k * k],
                                k,
                                k,
                                rot,
                            );
                        }
                    }
                    Self::accumulate(grads, *psi, d);
                }
            }
            Op::SynthLift { coef, basis } => {
                if self.ng(*coef) {
                    let shape = self.val(*coef).shape().to_vec();
                    let (co, ci) = (shape[0], shape[1]);
                    let nf2 = 2 * basis.n_f();
                    let k = basis.kernel_size();
                    let mut d = Tensor::zeros(shape);
                    let mut tmp = vec![T::zero(); co * ci * nf2];
                    for j in 0..basis.group().order() {
                        let bg: Vec<T> =
                            basis.channels(j).iter().map(|&v| T::fromf(v)).collect();
                        let gj = &g.data()[j * co * ci * k * k..(j + 1) * co * ci * k * k];
                        kernels::matmul_transb(gj, &bg, co * ci, k * k, nf2, &mut tmp);
                        for (a, b) in d.data_mut().iter_mut().zip(&tmp) {
                            *a += *b;
                        }
                    }
                    Self::accumulate(grads, *coef, d);
                }
            }
            Op::SynthGroup { coef, basis } => {
                if self.ng(*coef) {
                    let shape = self.val(*coef).shape().to_vec();
                    let (co, ci, gg) = (shape[0], shape[1], shape[2]);
                    let nf2 = 2 * basis.n_f();
                    let k = basis.kernel_size();
                    let kk = k * k;
                    let mut d = Tensor::zeros(shape);
                    for j in 0..gg {
                        let bg: Vec<T> =
                            basis.channels(j).iter().map(|&v| T::fromf(v)).collect();
                        for oc in 0..co {
                            for ic in 0..ci {
                                for h in 0..gg {
                                    let hs = (h + gg - j) % gg;
                                    let gk = &g.data()[(((j * co + oc) * ci + ic) * gg + h) * kk
                                        ..(((j * co + oc) * ci + ic) * gg + h + 1) * kk];
                                    let df = &mut d.data_mut()[((oc * ci + ic) * gg + hs) * nf2
                                        ..((oc * ci + ic) * gg + hs + 1) * nf2];
                                    for f in 0..nf2 {
                                        let mut acc = T::zero();
                                        for p in 0..kk {
                                            acc += gk[p] * bg[f * kk + p];
                                        }
                                        df[f] += acc;
                                    }
                                }
                            }
                        }
                    }
                    Self::accumulate(grads, *coef, d);
                }
            }
            Op::LiftingConv { x, kernels: kn, group } => {
                self.lifting_conv_backward(*x, *kn, *group, g, grads);
            }
            Op::GroupConv { x, kernels: kn, group } => {
                self.group_conv_backward(*x, *kn, *group, g, grads);
            }
            Op::GlobalWsPool { x, kernels: kn } => {
                let sx = self.val(*x).shape().to_vec();
                let sk = self.val(*kn).shape().to_vec();
                let (n, ci, h, w) = (sx[0], sx[1], sx[2], sx[3]);
                let (gg, co) = (sk[0], sk[1]);
                let plane = h * w;
                let inv = T::fromf(1.0 / gg as f64);
                if self.ng(*x) {
                    let kd = self.val(*kn).data();
                    let mut d = Tensor::zeros(sx.clone());
                    for_each_chunk_mut(d.data_mut(), ci * plane, |b, db| {
                        for ic in 0..ci {
                            for p in 0..plane {
                                let mut acc = T::zero();
                                for j in 0..gg {
                                    for oc in 0..co {
                                        acc += g.data()[b * co + oc]
                                            * kd[((j * co + oc) * ci + ic) * plane + p];
                                    }
                                }
                                db[ic * plane + p] = acc * inv;
                            }
                        }
                    });
                    Self::accumulate(grads, *x, d);
                }
                if self.ng(*kn) {
                    let xd = self.val(*x).data();
                    let mut d = Tensor::zeros(sk);
                    for_each_chunk_mut(d.data_mut(), ci * plane, |jc, db| {
                        let oc = jc % co;
                        for ic in 0..ci {
                            for p in 0..plane {
                                let mut acc = T::zero();
                                for b in 0..n {
                                    acc += g.data()[b * co + oc] * xd[(b * ci + ic) * plane + p];
                                }
                                db[ic * plane + p] = acc * inv;
                            }
                        }
                    });
                    Self::accumulate(grads, *kn, d);
                }
            }
            Op::LocalWsPool { x, psi, group } => {
                self.local_ws_backward(*x, *psi, *group, g, grads);
            }
            Op::MonomialPool {
                x,
                exponents,
                distances,
                group,
            } => {
                self.monomial_backward(*x, *exponents, distances, *group, g, grads);
            }
            Op::PatchStack { x, group, patch } => {
                if self.ng(*x) {
                    let sx = self.val(*x).shape().to_vec();
                    let (c, h, w) = (sx[1], sx[2], sx[3]);
                    let gg = group.order();
                    let offsets = rotated_patch_offsets(*group, *patch);
                    let cols = c * patch * patch;
                    let mut d = Tensor::zeros(sx);
                    for_each_chunk_mut(d.data_mut(), c * h * w, |b, db| {
                        for u in 0..h {
                            for v in 0..w {
                                for j in 0..gg {
                                    let row_i = ((b * h * w + u * w + v) * gg + j) * cols;
                                    let offs = &offsets[j];
                                    for ch in 0..c {
                                        let plane = &mut db[ch * h * w..(ch + 1) * h * w];
                                        for (p, &(dr, dc)) in offs.iter().enumerate() {
                                            bilinear_adjoint(
                                                plane,
                                                h,
                                                w,
                                                u as f64 + dr,
                                                v as f64 + dc,
                                                g.data()[row_i + ch * patch * patch + p],
                                            );
                                        }
                                    }
                                }
                            }
                        }
                    });
                    Self::accumulate(grads, *x, d);
                }
            }
            Op::ImageToTokens(x) => {
                if self.ng(*x) {
                    let sx = self.val(*x).shape().to_vec();
                    let (c, h, w) = (sx[0], sx[1], sx[2]);
                    let hw = h * w;
                    let mut d = Tensor::zeros(sx);
                    for ch in 0..c {
                        for p in 0..hw {
                            d.data_mut()[ch * hw + p] = g.data()[p * c + ch];
                        }
                    }
                    Self::accumulate(grads, *x, d);
                }
            }
            Op::RelAttnBias { q, pk, offsets } => {
                let n = self.val(*q).shape()[0];
                let ch = self.val(*q).shape()[1];
                if self.ng(*q) {
                    let pd = self.val(*pk).data();
                    let mut d = Tensor::zeros(vec![n, ch]);
                    for i in 0..n {
                        for j in 0..n {
                            let gv = g.data()[i * n + j];
                            let pr = &pd[offsets[i * n + j] as usize * ch..][..ch];
                            for cc in 0..ch {
                                d.data_mut()[i * ch + cc] += gv * pr[cc];
                            }
                        }
                    }
                    Self::accumulate(grads, *q, d);
                }
                if self.ng(*pk) {
                    let qd = self.val(*q).data();
                    let rows = self.val(*pk).shape()[0];
                    let mut d = Tensor::zeros(vec![rows, ch]);
                    for i in 0..n {
                        for j in 0..n {
                            let gv = g.data()[i * n + j];
                            let o = offsets[i * n + j] as usize;
                            for cc in 0..ch {
                                d.data_mut()[o * ch + cc] += gv * qd[i * ch + cc];
                            }
                        }
                    }
                    Self::accumulate(grads, *pk, d);
                }
            }
            Op::RowGroupScale { w, c, chunk } => {
                let sw = self.val(*w).shape().to_vec();
                let (rows, o) = (sw[0], sw[1]);
                if self.ng(*w) {
                    let mut d = Tensor::zeros(sw.clone());
                    for r in 0..rows {
                        let s = self.val(*c).data()[r / chunk];
                        for j in 0..o {
                            d.data_mut()[r * o + j] = g.data()[r * o + j] * s;
                        }
                    }
                    Self::accumulate(grads, *w, d);
                }
                if self.ng(*c) {
                    let m = self.val(*c).numel();
                    let mut d = Tensor::zeros(vec![m]);
                    for r in 0..rows {
                        let mut acc = T::zero();
                        for j in 0..o {
                            acc += g.data()[r * o + j] * self.val(*w).data()[r * o + j];
                        }
                        d.data_mut()[r / chunk] += acc;
                    }
                    Self::accumulate(grads, *c, d);
                }
            }
            Op::BatchNormTrain {
                x,
                gamma,
                beta,
                eps,
                mean,
                var,
            } => {
                self.bn_train_backward(*x, *gamma, *beta, *eps, mean, var, g, grads);
            }
            Op::BatchNormEval {
                x,
                gamma,
                beta,
                eps,
                mean,
                var,
            } => {
                let shape = self.val(*x).shape().to_vec();
                let c = shape[1];
                let lead = shape[0];
                let tail: usize = shape[2..].iter().product();
                if self.ng(*x) {
                    let mut d = Tensor::zeros(shape.clone());
                    for b in 0..lead {
                        for ch in 0..c {
                            let scale = T::fromf(
                                self.val(*gamma).data()[ch].tof() / (var[ch] + eps).sqrt(),
                            );
                            for t in 0..tail {
                                let i = (b * c + ch) * tail + t;
                                d.data_mut()[i] = g.data()[i] * scale;
                            }
                        }
                    }
                    Self::accumulate(grads, *x, d);
                }
                if self.ng(*gamma) || self.ng(*beta) {
                    let mut dg = Tensor::zeros(vec![c]);
                    let mut db = Tensor::zeros(vec![c]);
                    for b in 0..lead {
                        for ch in 0..c {
                            let ivar = 1.0 / (var[ch] + eps).sqrt();
                            for t in 0..tail {
                                let i = (b * c + ch) * tail + t;
                                let xh =
                                    T::fromf((self.val(*x).data()[i].tof() - mean[ch]) * ivar);
                                dg.data_mut()[ch] += g.data()[i] * xh;
                                db.data_mut()[ch] += g.data()[i];
                            }
                        }
                    }
                    if self.ng(*gamma) {
                        Self::accumulate(grads, *gamma, dg);
                    }
                    if self.ng(*beta) {
                        Self::accumulate(grads, *beta, db);
                    }
                }
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn bn_train_backward(
        &self,
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        eps: f64,
        mean: &[f64],
        var: &[f64],
        g: &Tensor<T>,
        grads: &mut Vec<Option<Tensor<T>>>,
    ) {
        let shape = self.val(x).shape().to_vec();
        let c = shape[1];
        let lead = shape[0];
        let tail: usize = shape[2..].iter().product();
        let m = (lead * tail) as f64;
        let xd = self.val(x).data();
        // Per-channel sums of dy and dy*xhat.
        let mut sum_dy = vec![0.0f64; c];
        let mut sum_dyxh = vec![0.0f64; c];
        for b in 0..lead {
            for ch in 0..c {
                let ivar = 1.0 / (var[ch] + eps).sqrt();
                for t in 0..tail {
                    let i = (b * c + ch) * tail + t;
                    let xh = (xd[i].tof() - mean[ch]) * ivar;
                    sum_dy[ch] += g.data()[i].tof();
                    sum_dyxh[ch] += g.data()[i].tof() * xh;
                }
            }
        }
        if self.ng(x) {
            let mut d = Tensor::zeros(shape.clone());
            for b in 0..lead {
                for ch in 0..c {
                    let ivar = 1.0 / (var[ch] + eps).sqrt();
                    let gam = self.val(gamma).data()[ch].tof();
                    for t in 0..tail {
                        let i = (b * c + ch) * tail + t;
                        let xh = (xd[i].tof() - mean[ch]) * ivar;
                        let dy = g.data()[i].tof();
                        let dx = gam * ivar * (dy - sum_dy[ch] / m - xh * sum_dyxh[ch] / m);
                        d.data_mut()[i] = T::fromf(dx);
                    }
                }
            }
            Self::accumulate(grads, x, d);
        }
        if self.ng(gamma) {
            let d = Tensor::new(vec![c], sum_dyxh.iter().map(|&v| T::fromf(v)).collect())
                .unwrap();
            Self::accumulate(grads, gamma, d);
        }
        if self.ng(beta) {
            let d =
                Tensor::new(vec![c], sum_dy.iter().map(|&v| T::fromf(v)).collect()).unwrap();
            Self::accumulate(grads, beta, d);
        }
    }

    fn lifting_conv_backward(
        &self,
        x: NodeId,
        kn: NodeId,
        group: CyclicRotationGroup,
        g: &Tensor<T>,
        grads: &mut Vec<Option<Tensor<T>>>,
    ) {
        let sx = self.val(x).shape().to_vec();
        let sk = self.val(kn).shape().to_vec();
        let (n, ci, h, w) = (sx[0], sx[1], sx[2], sx[3]);
        let (gg, co, k) = (sk[0], sk[1], sk[3]);
        let pad = (k - 1) / 2;
        let kt = co * ci * k * k;
        let plane = h * w;
        let mut dx = if self.ng(x) {
            Some(Tensor::zeros(sx.clone()))
        } else {
            None
        };
        let mut dk = if self.ng(kn) {
            Some(Tensor::zeros(sk.clone()))
        } else {
            None
        };
        let mut gchan = vec![T::zero(); n * co * plane];
        let mut xr = vec![T::zero(); n * ci * plane];
        let mut tmp = vec![T::zero(); n * ci * plane];
        for j in 0..gg {
            let exact = matches!(group.plane_rotation(j, h, w), PlaneRot::Quarter(_));
            // Gather the incoming gradient of channel j.
            gather_group_channel(g.data(), &mut gchan, n, co, gg, j, h, w);
            if exact {
                let inv = group.plane_rotation(group.inverse(j), h, w);
                // d(conv out) = rot_{-j}(dy_j); inputs seen by the conv
                // were rot_{-j}(x).
                let mut grot = vec![T::zero(); n * co * plane];
                plane_rotate_batch(&gchan, &mut grot, n * co, h, w, inv);
                plane_rotate_batch(self.val(x).data(), &mut xr, n * ci, h, w, inv);
                if let Some(dk) = dk.as_mut() {
                    kernels::conv2d_backward_w(
                        &grot,
                        &xr,
                        n,
                        ci,
                        h,
                        w,
                        co,
                        k,
                        k,
                        1,
                        pad,
                        &mut dk.data_mut()[0..kt],
                    );
                }
                if let Some(dx) = dx.as_mut() {
                    tmp.fill(T::zero());
                    kernels::conv2d_backward_x(
                        &grot,
                        &self.val(kn).data()[0..kt],
                        n,
                        ci,
                        h,
                        w,
                        co,
                        k,
                        k,
                        1,
                        pad,
                        &mut tmp,
                    );
                    // Adjoint of rot_{-j} is rot_{+j} (exact permutation).
                    let fwd = group.plane_rotation(j, h, w);
                    let mut back = vec![T::zero(); n * ci * plane];
                    plane_rotate_batch(&tmp, &mut back, n * ci, h, w, fwd);
                    for (a, b) in dx.data_mut().iter_mut().zip(&back) {
                        *a += *b;
                    }
                }
            } else {
                if let Some(dk) = dk.as_mut() {
                    kernels::conv2d_backward_w(
                        &gchan,
                        self.val(x).data(),
                        n,
                        ci,
                        h,
                        w,
                        co,
                        k,
                        k,
                        1,
                        pad,
                        &mut dk.data_mut()[j * kt..(j + 1) * kt],
                    );
                }
                if let Some(dx) = dx.as_mut() {
                    tmp.fill(T::zero());
                    kernels::conv2d_backward_x(
                        &gchan,
                        &self.val(kn).data()[j * kt..(j + 1) * kt],
                        n,
                        ci,
                        h,
                        w,
                        co,
                        k,
                        k,
                        1,
                        pad,
                        &mut tmp,
                    );
                    for (a, b) in dx.data_mut().iter_mut().zip(&tmp) {
                        *a += *b;
                    }
                }
            }
        }
        if let Some(d) = dx {
            Self::accumulate(grads, x, d);
        }
        if let Some(d) = dk {
            Self::accumulate(grads, kn, d);
        }
    }

    fn group_conv_backward(
        &self,
        x: NodeId,
        kn: NodeId,
        group: CyclicRotationGroup,
        g: &Tensor<T>,
        grads: &mut Vec<Option<Tensor<T>>>,
    ) {
        let sx = self.val(x).shape().to_vec();
        let sk = self.val(kn).shape().to_vec();
        let (n, ci, gg, h, w) = (sx[0], sx[1], sx[2], sx[3], sx[4]);
        let (co, k) = (sk[1], sk[4]);
        let pad = (k - 1) / 2;
        let kt = co * ci * gg * k * k;
        let plane = h * w;
        let mut dx = if self.ng(x) {
            Some(Tensor::zeros(sx.clone()))
        } else {
            None
        };
        let mut dk = if self.ng(kn) {
            Some(Tensor::zeros(sk.clone()))
        } else {
            None
        };
        let mut gchan = vec![T::zero(); n * co * plane];
        let mut xg = vec![T::zero(); n * ci * gg * plane];
        let mut tmp = vec![T::zero(); n * ci * gg * plane];
        for j in 0..gg {
            let exact = matches!(group.plane_rotation(j, h, w), PlaneRot::Quarter(_));
            gather_group_channel(g.data(), &mut gchan, n, co, gg, j, h, w);
            if exact {
                let inv = group.plane_rotation(group.inverse(j), h, w);
                let mut grot = vec![T::zero(); n * co * plane];
                plane_rotate_batch(&gchan, &mut grot, n * co, h, w, inv);
                // Rebuild the shifted, rotated input the forward used.
                for b in 0..n {
                    for ic in 0..ci {
                        for hp in 0..gg {
                            let src_g = group.compose(j, hp);
                            let src = &self.val(x).data()[((b * ci + ic) * gg + src_g) * plane
                                ..((b * ci + ic) * gg + src_g + 1) * plane];
                            let dst = &mut xg[((b * ci + ic) * gg + hp) * plane
                                ..((b * ci + ic) * gg + hp + 1) * plane];
                            rotate_plane_raw(src, dst, h, w, inv);
                        }
                    }
                }
                if let Some(dk) = dk.as_mut() {
                    kernels::conv2d_backward_w(
                        &grot,
                        &xg,
                        n,
                        ci * gg,
                        h,
                        w,
                        co,
                        k,
                        k,
                        1,
                        pad,
                        &mut dk.data_mut()[0..kt],
                    );
                }
                if let Some(dx) = dx.as_mut() {
                    tmp.fill(T::zero());
                    kernels::conv2d_backward_x(
                        &grot,
                        &self.val(kn).data()[0..kt],
                        n,
                        ci * gg,
                        h,
                        w,
                        co,
                        k,
                        k,
                        1,
                        pad,
                        &mut tmp,
                    );
                    // Undo the shift + rotation: adjoint scatters back.
                    for b in 0..n {
                        for ic in 0..ci {
                            for hp in 0..gg {
                                let src_g = group.compose(j, hp);
                                let gsrc = &tmp[((b * ci + ic) * gg + hp) * plane
                                    ..((b * ci + ic) * gg + hp + 1) * plane];
                                let dst = &mut dx.data_mut()[((b * ci + ic) * gg + src_g) * plane
                                    ..((b * ci + ic) * gg + src_g + 1) * plane];
                                rotate_plane_adjoint(gsrc, dst, h, w, inv);
                            }
                        }
                    }
                }
            } else {
                if let Some(dk) = dk.as_mut() {
                    kernels::conv2d_backward_w(
                        &gchan,
                        self.val(x).data(),
                        n,
                        ci * gg,
                        h,
                        w,
                        co,
                        k,
                        k,
                        1,
                        pad,
                        &mut dk.data_mut()[j * kt..(j + 1) * kt],
                    );
                }
                if let Some(dx) = dx.as_mut() {
                    tmp.fill(T::zero());
                    kernels::conv2d_backward_x(
                        &gchan,
                        &self.val(kn).data()[j * kt..(j + 1) * kt],
                        n,
                        ci * gg,
                        h,
                        w,
                        co,
                        k,
                        k,
                        1,
                        pad,
                        &mut tmp,
                    );
                    for (a, b) in dx.data_mut().iter_mut().zip(&tmp) {
                        *a += *b;
                    }
                }
            }
        }
        if let Some(d) = dx {
            Self::accumulate(grads, x, d);
        }
        if let Some(d) = dk {
            Self::accumulate(grads, kn, d);
        }
    }

    fn local_ws_backward(
        &self,
        x: NodeId,
        psi: NodeId,
        group: CyclicRotationGroup,
        g: &Tensor<T>,
        grads: &mut Vec<Option<Tensor<T>>>,
    ) {
        let sx = self.val(x).shape().to_vec();
        let sp = self.val(psi).shape().to_vec();
        let (n, ci, h, w) = (sx[0], sx[1], sx[2], sx[3]);
        let (co, k) = (sp[0], sp[2]);
        let gg = group.order();
        let psi_rots = rotate_kernel_stack(self.val(psi).data(), co, ci, k, group);
        let norm = 1.0 / (gg * h * w) as f64;
        let half = (k / 2) as i64;
        let xd = self.val(x).data();
        if self.ng(x) {
            let mut d = Tensor::zeros(sx.clone());
            for_each_chunk_mut(d.data_mut(), ci * h * w, |b, db| {
                for j in 0..gg {
                    let pg = &psi_rots[j * co * ci * k * k..(j + 1) * co * ci * k * k];
                    for oc in 0..co {
                        let gv = g.data()[b * co + oc] * T::fromf(norm);
                        if gv == T::zero() {
                            continue;
                        }
                        for u in 0..h as i64 {
                            for v in 0..w as i64 {
                                for ic in 0..ci {
                                    let kp = &pg[(oc * ci + ic) * k * k..(oc * ci + ic + 1) * k * k];
                                    let dplane = &mut db[ic * h * w..(ic + 1) * h * w];
                                    for a in 0..k as i64 {
                                        let r = u + a - half;
                                        if r < 0 || r >= h as i64 {
                                            continue;
                                        }
                                        for bb in 0..k as i64 {
                                            let c = v + bb - half;
                                            if c < 0 || c >= w as i64 {
                                                continue;
                                            }
                                            dplane[r as usize * w + c as usize] +=
                                                gv * kp[(a * k as i64 + bb) as usize];
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
            });
            Self::accumulate(grads, x, d);
        }
        if self.ng(psi) {
            // Accumulate gradients for each rotated copy, then pull them
            // back through the rotation adjoint.
            let mut d = Tensor::zeros(sp.clone());
            let mut drot = vec![T::zero(); co * ci * k * k];
            for j in 0..gg {
                drot.fill(T::zero());
                for b in 0..n {
                    for oc in 0..co {
                        let gv = g.data()[b * co + oc] * T::fromf(norm);
                        if gv == T::zero() {
                            continue;
                        }
                        for u in 0..h as i64 {
                            for v in 0..w as i64 {
                                for ic in 0..ci {
                                    let xp = &xd[(b * ci + ic) * h * w..(b * ci + ic + 1) * h * w];
                                    let dp = &mut drot
                                        [(oc * ci + ic) * k * k..(oc * ci + ic + 1) * k * k];
                                    for a in 0..k as i64 {
                                        let r = u + a - half;
                                        if r < 0 || r >= h as i64 {
                                            continue;
                                        }
                                        for bb in 0..k as i64 {
                                            let c = v + bb - half;
                                            if c < 0 || c >= w as i64 {
                                                continue;
                                            }
                                            dp[(a * k as i64 + bb) as usize] +=
                                                gv * xp[r as usize * w + c as usize];
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
                let rot = group.plane_rotation(j, k, k);
                for p in 0..co * ci {
                    rotate_plane_adjoint(
                        &drot[p * k * k..(p + 1) * k * k],
                        &mut d.data_mut()[p * k * k..(p + 1) * k * k],
                        k,
                        k,
                        rot,
                    );
                }
            }
            Self::accumulate(grads, psi, d);
        }
    }

    fn monomial_backward(
        &self,
        x: NodeId,
        exponents: NodeId,
        distances: &[f64],
        group: CyclicRotationGroup,
        g: &Tensor<T>,
        grads: &mut Vec<Option<Tensor<T>>>,
    ) {
        let sx = self.val(x).shape().to_vec();
        let (n, c, h, w) = (sx[0], sx[1], sx[2], sx[3]);
        let geom = MonomialGeometry::new(distances, group, h, w).expect("validated at record");
        let exps: Vec<T> = self.val(exponents).data().to_vec();
        let xd = self.val(x).data();
        let norm = geom.norm();
        let nf = distances.len();
        if self.ng(x) {
            let mut d = Tensor::zeros(sx.clone());
            for_each_chunk_mut(d.data_mut(), c * h * w, |b, db| {
                for ch in 0..c {
                    let gv = g.data()[b * c + ch].tof() * norm;
                    if gv == 0.0 {
                        continue;
                    }
                    let plane = &xd[(b * c + ch) * h * w..(b * c + ch + 1) * h * w];
                    let dplane = &mut db[ch * h * w..(ch + 1) * h * w];
                    let mut svals = vec![T::zero(); nf];
                    geom.for_each_position(|samples| {
                        let mut prod = T::one();
                        for (i, &(r, cc)) in samples.iter().enumerate() {
                            let s = bilinear_one(plane, h, w, r, cc);
                            svals[i] = s;
                            prod = prod * s.powf(exps[i]);
                        }
                        for (i, &(r, cc)) in samples.iter().enumerate() {
                            // d prod / d s_i = prod * e_i / s_i.
                            let coef = prod * exps[i] / svals[i] * T::fromf(gv);
                            bilinear_adjoint(dplane, h, w, r, cc, coef);
                        }
                    });
                }
            });
            Self::accumulate(grads, x, d);
        }
        if self.ng(exponents) {
            let mut d = Tensor::zeros(vec![nf]);
            let mut svals = vec![T::zero(); nf];
            for b in 0..n {
                for ch in 0..c {
                    let gv = g.data()[b * c + ch].tof() * norm;
                    if gv == 0.0 {
                        continue;
                    }
                    let plane = &xd[(b * c + ch) * h * w..(b * c + ch + 1) * h * w];
                    geom.for_each_position(|samples| {
                        let mut prod = T::one();
                        for (i, &(r, cc)) in samples.iter().enumerate() {
                            let s = bilinear_one(plane, h, w, r, cc);
                            svals[i] = s;
                            prod = prod * s.powf(exps[i]);
                        }
                        for i in 0..nf {
                            // d prod / d e_i = prod * ln(s_i).
                            d.data_mut()[i] += prod * svals[i].ln() * T::fromf(gv);
                        }
                    });
                }
            }
            Self::accumulate(grads, exponents, d);
        }
    }
}

/// Copy a `[n, co, h, w]` channel block into slot `j` of the group axis
/// of `[n, co, g, h, w]`, optionally rotating each plane on the way.
#[allow(clippy::too_many_arguments)]
fn scatter_group_channel<T: Scalar>(
    chan: &[T],
    out: &mut [T],
    n: usize,
    co: usize,
    g: usize,
    j: usize,
    h: usize,
    w: usize,
    rot: Option<PlaneRot>,
) {
    let plane = h * w;
    for b in 0..n {
        for oc in 0..co {
            let src = &chan[(b * co + oc) * plane..(b * co + oc + 1) * plane];
            let dst = &mut out[((b * co + oc) * g + j) * plane..((b * co + oc) * g + j + 1) * plane];
            match rot {
                Some(r) => rotate_plane_raw(src, dst, h, w, r),
                None => dst.copy_from_slice(src),
            }
        }
    }
}

/// Inverse of [`scatter_group_channel`] without rotation: extract slot
/// `j` of the group axis into a contiguous `[n, co, h, w]` buffer.
fn gather_group_channel<T: Scalar>(
    src: &[T],
    chan: &mut [T],
    n: usize,
    co: usize,
    g: usize,
    j: usize,
    h: usize,
    w: usize,
) {
    let plane = h * w;
    for b in 0..n {
        for oc in 0..co {
            let s = &src[((b * co + oc) * g + j) * plane..((b * co + oc) * g + j + 1) * plane];
            chan[(b * co + oc) * plane..(b * co + oc + 1) * plane].copy_from_slice(s);
        }
    }
}

/// Raster-rotate a `[co, ci, k, k]` kernel over all group elements into
/// a flat `[g, co, ci, k, k]` buffer.
fn rotate_kernel_stack<T: Scalar>(
    psi: &[T],
    co: usize,
    ci: usize,
    k: usize,
    group: CyclicRotationGroup,
) -> Vec<T> {
    let g = group.order();
    let mut out = vec![T::zero(); g * co * ci * k * k];
    for j in 0..g {
        let rot = group.plane_rotation(j, k, k);
        let dst = &mut out[j * co * ci * k * k..(j + 1) * co * ci * k * k];
        plane_rotate_batch(psi, dst, co * ci, k, k, rot);
    }
    out
}

/// Patch sample offsets, rotated per group element. Offsets of exact
/// quarter-turn elements are integer, so those samples read lattice
/// points directly.
fn rotated_patch_offsets(group: CyclicRotationGroup, patch: usize) -> Vec<Vec<(f64, f64)>> {
    let half = (patch / 2) as i64;
    let mut out = Vec::with_capacity(group.order());
    for j in 0..group.order() {
        let mut offs = Vec::with_capacity(patch * patch);
        let rot = group.plane_rotation(j, patch, patch);
        for a in -half..=half {
            for b in -half..=half {
                let (dr, dc) = match rot {
                    PlaneRot::Quarter(0) => (a as f64, b as f64),
                    // R(pi/2) (a, b) = (-b, a), applied q times.
                    PlaneRot::Quarter(1) => (-b as f64, a as f64),
                    PlaneRot::Quarter(2) => (-a as f64, -b as f64),
                    PlaneRot::Quarter(3) => (b as f64, -a as f64),
                    PlaneRot::Quarter(_) => unreachable!(),
                    PlaneRot::Bilinear { .. } => {
                        let t = group.angle(j);
                        (
                            t.cos() * a as f64 - t.sin() * b as f64,
                            t.sin() * a as f64 + t.cos() * b as f64,
                        )
                    }
                };
                offs.push((dr, dc));
            }
        }
        out.push(offs);
    }
    out
}

/// Precomputed sampling geometry of one monomial: valid centers and the
/// ray sample coordinates per group angle.
struct MonomialGeometry {
    h: usize,
    w: usize,
    margin: usize,
    /// Per group element, per factor: (dr, dc) ray offsets.
    ray_offsets: Vec<Vec<(f64, f64)>>,
    norm: f64,
}

impl MonomialGeometry {
    fn new(
        distances: &[f64],
        group: CyclicRotationGroup,
        h: usize,
        w: usize,
    ) -> crate::error::Result<Self> {
        if distances.is_empty() {
            return Err(Error::contract("a monomial needs at least one factor"));
        }
        if distances[0] != 0.0 {
            return Err(Error::contract(
                "the first monomial factor must sit at distance zero",
            ));
        }
        if distances.iter().any(|&d| d < 0.0 || !d.is_finite()) {
            return Err(Error::contract(format!(
                "monomial distances must be finite and non-negative, got {distances:?}"
            )));
        }
        let dmax = distances.iter().cloned().fold(0.0f64, f64::max);
        if 2.0 * dmax > h.min(w) as f64 {
            return Err(Error::contract(format!(
                "monomial distance {dmax} too large for {h}x{w} input"
            )));
        }
        let margin = dmax.ceil() as usize;
        if 2 * margin >= h || 2 * margin >= w {
            return Err(Error::contract(format!(
                "no valid monomial centers: margin {margin} exhausts {h}x{w} input"
            )));
        }
        let g = group.order();
        let mut ray_offsets = Vec::with_capacity(g);
        for j in 0..g {
            let t = group.angle(j);
            ray_offsets.push(
                distances
                    .iter()
                    .map(|&d| (d * t.cos(), d * t.sin()))
                    .collect(),
            );
        }
        let centers = (h - 2 * margin) * (w - 2 * margin);
        Ok(MonomialGeometry {
            h,
            w,
            margin,
            ray_offsets,
            norm: 1.0 / (centers * g) as f64,
        })
    }

    fn norm(&self) -> f64 {
        self.norm
    }

    /// Visit every (center, angle) position in a fixed order (row-major
    /// centers, then group elements) and hand the per-factor sample
    /// coordinates to `f`.
    fn for_each_position(&self, mut f: impl FnMut(&[(f64, f64)])) {
        let nf = self.ray_offsets[0].len();
        let mut samples = vec![(0.0, 0.0); nf];
        for u in self.margin..self.h - self.margin {
            for v in self.margin..self.w - self.margin {
                for offs in &self.ray_offsets {
                    for (s, &(dr, dc)) in samples.iter_mut().zip(offs) {
                        *s = (u as f64 + dr, v as f64 + dc);
                    }
                    f(&samples);
                }
            }
        }
    }
}

/// Per-channel batch statistics over axis 1 of `[n, c, ...]`.
fn bn_stats<T: Scalar>(x: &[T], shape: &[usize], mean: &mut [f64], var: &mut [f64]) {
    let c = shape[1];
    let lead = shape[0];
    let tail: usize = shape[2..].iter().product();
    let m = (lead * tail) as f64;
    for ch in 0..c {
        let mut s = 0.0;
        for b in 0..lead {
            for t in 0..tail {
                s += x[(b * c + ch) * tail + t].tof();
            }
        }
        mean[ch] = s / m;
        let mut v = 0.0;
        for b in 0..lead {
            for t in 0..tail {
                let d = x[(b * c + ch) * tail + t].tof() - mean[ch];
                v += d * d;
            }
        }
        var[ch] = v / m;
    }
}

fn bn_apply<T: Scalar>(
    x: &[T],
    shape: &[usize],
    gamma: &[T],
    beta: &[T],
    mean: &[f64],
    var: &[f64],
    eps: f64,
) -> Tensor<T> {
    let c = shape[1];
    let lead = shape[0];
    let tail: usize = shape[2..].iter().product();
    let mut out = Tensor::zeros(shape.to_vec());
    for b in 0..lead {
        for ch in 0..c {
            let ivar = 1.0 / (var[ch] + eps).sqrt();
            for t in 0..tail {
                let i = (b * c + ch) * tail + t;
                let xh = (x[i].tof() - mean[ch]) * ivar;
                out.data_mut()[i] = T::fromf(xh) * gamma[ch] + beta[ch];
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn add_mul_scale_forward_and_backward() {
        let mut g = Graph::<f64>::new();
        let a = g.input(Tensor::new(vec![2], vec![1.0, 2.0]).unwrap());
        let b = g.input(Tensor::new(vec![2], vec![3.0, -4.0]).unwrap());
        let s = g.mul(a, b).unwrap();
        let s = g.scale(s, 2.0);
        let loss = g.sum_all(s);
        assert!((g.value(loss).item().unwrap() - 2.0 * (3.0 - 8.0)).abs() < 1e-12);
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.wrt(a).unwrap().data(), &[6.0, -8.0]);
        assert_eq!(grads.wrt(b).unwrap().data(), &[2.0, 4.0]);
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut g = Graph::<f64>::new();
        let x = g.input(Tensor::new(vec![2, 3], vec![0.0, 0.0, 0.0, 1.0, 2.0, 3.0]).unwrap());
        let s = g.softmax_last(x).unwrap();
        let v = g.value(s);
        for row in 0..2 {
            let sum: f64 = v.data()[row * 3..(row + 1) * 3].iter().sum();
            assert!((sum - 1.0).abs() < 1e-12);
        }
        // Equal logits produce the uniform distribution.
        assert!((v.data()[0] - 1.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_of_uniform_logits_is_log_k() {
        let mut g = Graph::<f64>::new();
        let x = g.input(Tensor::zeros(vec![2, 4]));
        let l = g.cross_entropy_mean(x, &[1, 3]).unwrap();
        assert!((g.value(l).item().unwrap() - (4.0f64).ln()).abs() < 1e-12);
    }

    #[test]
    fn backward_root_must_be_scalar() {
        let mut g = Graph::<f64>::new();
        let x = g.input(Tensor::zeros(vec![2, 2]));
        assert!(g.backward(x).is_err());
    }

    #[test]
    fn constants_do_not_collect_gradients() {
        let mut g = Graph::<f64>::new();
        let a = g.constant(Tensor::new(vec![2], vec![1.0, 2.0]).unwrap());
        let b = g.input(Tensor::new(vec![2], vec![5.0, 5.0]).unwrap());
        let p = g.mul(a, b).unwrap();
        let loss = g.sum_all(p);
        let grads = g.backward(loss).unwrap();
        assert!(grads.wrt(a).is_none());
        assert_eq!(grads.wrt(b).unwrap().data(), &[1.0, 2.0]);
    }

    #[test]
    fn dropout_scales_kept_elements() {
        let mut g = Graph::<f64>::new();
        let x = g.input(Tensor::full(vec![1000], 1.0));
        let d = g.dropout(x, 0.25, 7).unwrap();
        let v = g.value(d);
        let kept = v.data().iter().filter(|&&v| v != 0.0).count();
        for &val in v.data() {
            assert!(val == 0.0 || (val - 4.0 / 3.0).abs() < 1e-12);
        }
        // Keep ratio should be near 75%.
        assert!((kept as f64 / 1000.0 - 0.75).abs() < 0.05);
    }

    #[test]
    fn conv2d_identity_kernel_is_identity() {
        let mut g = Graph::<f64>::new();
        let x = g.input(Tensor::new(vec![1, 1, 3, 3], (0..9).map(|i| i as f64).collect()).unwrap());
        let w = g.constant(Tensor::new(vec![1, 1, 1, 1], vec![1.0]).unwrap());
        let y = g.conv2d(x, w, 1, 0).unwrap();
        assert_eq!(g.value(y).data(), g.value(x).data());
    }

    #[test]
    fn max_pool2_picks_block_maxima_and_routes_gradient() {
        let mut g = Graph::<f64>::new();
        let x = g.input(
            Tensor::new(
                vec![1, 1, 2, 4],
                vec![1.0, 5.0, 2.0, 0.0, 3.0, -1.0, 0.0, 7.0],
            )
            .unwrap(),
        );
        let y = g.max_pool2(x).unwrap();
        assert_eq!(g.value(y).shape(), &[1, 1, 1, 2]);
        assert_eq!(g.value(y).data(), &[5.0, 7.0]);
        let loss = g.sum_all(y);
        let grads = g.backward(loss).unwrap();
        assert_eq!(
            grads.wrt(x).unwrap().data(),
            &[0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 1.0]
        );
    }

    #[test]
    fn shift_positive_makes_min_exactly_one() {
        let mut g = Graph::<f64>::new();
        let x = g.input(Tensor::new(vec![1, 1, 2, 2], vec![-3.0, 0.0, 2.0, 1.0]).unwrap());
        let y = g.shift_positive(x).unwrap();
        assert_eq!(g.value(y).data(), &[1.0, 4.0, 6.0, 5.0]);
    }

    #[test]
    fn image_to_tokens_transposes() {
        let mut g = Graph::<f64>::new();
        let x = g.input(Tensor::new(vec![2, 1, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let t = g.image_to_tokens(x).unwrap();
        assert_eq!(g.value(t).shape(), &[2, 2]);
        assert_eq!(g.value(t).data(), &[1.0, 3.0, 2.0, 4.0]);
    }

    #[test]
    fn monomial_single_factor_unit_exponent_is_spatial_mean() {
        let mut g = Graph::<f64>::new();
        let data: Vec<f64> = (0..16).map(|i| 1.0 + i as f64 * 0.1).collect();
        let x = g.input(Tensor::new(vec![1, 1, 4, 4], data.clone()).unwrap());
        let e = g.input(Tensor::new(vec![1], vec![1.0]).unwrap());
        let group = CyclicRotationGroup::new(4).unwrap();
        let y = g.monomial_pool(x, e, &[0.0], group).unwrap();
        let mean: f64 = data.iter().sum::<f64>() / 16.0;
        assert!((g.value(y).data()[0] - mean).abs() < 1e-12);
    }

    #[test]
    fn monomial_rejects_oversized_distances() {
        let mut g = Graph::<f64>::new();
        let x = g.input(Tensor::full(vec![1, 1, 6, 6], 1.0));
        let e = g.input(Tensor::full(vec![2], 1.0));
        let group = CyclicRotationGroup::new(4).unwrap();
        assert!(g.monomial_pool(x, e, &[0.0, 5.0], group).is_err());
        assert!(g.monomial_pool(x, e, &[1.0, 1.0], group).is_err());
    }
}
