//! Invariant-integration heads: group-averaged feature extractors that
//! turn an image or feature map into a rotation-invariant vector.
//!
//! Each head evaluates a learnable function at every spatial position
//! and every rotation of the configured [`CyclicRotationGroup`], then
//! averages the results. Because the average runs over the whole orbit,
//! rotating the input only permutes the summands, so the output is
//! invariant — exactly so for quarter-turn groups, and up to a measured
//! interpolation error otherwise. Four function families are provided:
//!
//! * [`MonomialHead`] — products of bilinearly sampled ring neighbors
//!   raised to learnable exponents, applied per channel. Inputs are
//!   shifted per channel to `x - min(x) + 1` first, so fractional
//!   exponents always act on strictly positive values.
//! * [`WsHead`] — a weighted sum with a learnable kernel, either
//!   global (kernel extent = input extent, one inner product per
//!   rotation) or local (the kernel slides over all positions; this
//!   mode is identical to a lifting convolution followed by average
//!   pooling over group and space, see [`ws_groupconv_equivalence`]).
//! * [`MlpHead`] — a bias-free multi-layer perceptron with ReLU between
//!   layers, applied to the inversely rotated neighborhood patch of
//!   every pixel. A single-layer MLP degenerates to the local weighted
//!   sum.
//! * [`SaHead`] — (multi-head) self-attention over pixel tokens with
//!   relative positional encodings added to the key pixels; the result
//!   is computed on every rotated copy of the input and averaged.
//!
//! [`invariance_residual`] quantifies how invariant a head actually is
//! under a chosen probe rotation.

use std::sync::Arc;

use rand::Rng as _;

use crate::autodiff::{Graph, NodeId};
use crate::error::{Error, Result};
use crate::group::CyclicRotationGroup;
use crate::params::{kaiming_uniform, ParamId, ParamSet, Regularization};
use crate::rng::Rng;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

// ---------------------------------------------------------------------
// Monomial head
// ---------------------------------------------------------------------

/// One monomial: a product of ring samples at `distances` from the
/// center pixel, each raised to a learnable exponent.
#[derive(Debug, Clone)]
pub struct MonomialSpec {
    /// Sample distances; the first entry must be `0` so the center
    /// pixel always participates.
    pub distances: Vec<f64>,
    /// Learnable exponents, one per distance.
    pub exponents: ParamId,
}

/// Per-channel monomial pooling over all positions and rotations.
#[derive(Debug, Clone)]
pub struct MonomialHead {
    pub specs: Vec<MonomialSpec>,
    /// When true (the normal mode) every channel yields one feature per
    /// monomial; otherwise features are averaged over channels.
    pub per_channel: bool,
    pub group: CyclicRotationGroup,
}

impl MonomialHead {
    /// Register one exponent vector per distance set. Exponents start
    /// uniform in `[0, |G| / M_f)` so their sum is at most the group
    /// order; training may drift past that bound, which callers can
    /// monitor via [`MonomialHead::exponent_sums`].
    pub fn init<T: Scalar>(
        params: &mut ParamSet<T>,
        prefix: &str,
        distance_sets: &[Vec<f64>],
        group: CyclicRotationGroup,
        rng: &mut Rng,
    ) -> Result<Self> {
        if distance_sets.is_empty() {
            return Err(Error::contract("monomial head needs at least one monomial"));
        }
        let mut specs = Vec::with_capacity(distance_sets.len());
        for (i, distances) in distance_sets.iter().enumerate() {
            validate_distances(distances)?;
            let bound = group.order() as f64 / distances.len() as f64;
            let data = (0..distances.len())
                .map(|_| T::fromf(rng.gen_range(0.0..bound)))
                .collect();
            let exponents = params.add(
                format!("{prefix}.m{i}.exponents"),
                Tensor::new(vec![distances.len()], data)?,
                Regularization::None,
            )?;
            specs.push(MonomialSpec {
                distances: distances.clone(),
                exponents,
            });
        }
        Ok(MonomialHead {
            specs,
            per_channel: true,
            group,
        })
    }

    /// Record the head on a batch `[n, c, h, w]`, producing `[n, f]`
    /// where `f` counts monomial-major features (`m * c + channel`).
    pub fn record_batch<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        params: &ParamSet<T>,
        x: NodeId,
    ) -> Result<NodeId> {
        let shape = g.value(x).shape().to_vec();
        if shape.len() != 4 {
            return Err(Error::shape(format!(
                "monomial head input must be [n, c, h, w], got {shape:?}"
            )));
        }
        let (n, c) = (shape[0], shape[1]);
        let shifted = g.shift_positive(x)?;
        let mut parts = Vec::with_capacity(self.specs.len());
        for spec in &self.specs {
            let e = g.param(params, spec.exponents);
            parts.push(g.monomial_pool(shifted, e, &spec.distances, self.group)?);
        }
        let cat = g.concat_cols(&parts)?;
        if self.per_channel {
            Ok(cat)
        } else {
            let grouped = g.reshape(cat, vec![n * self.specs.len(), c])?;
            let avg = g.mean_trailing(grouped, 1)?;
            g.reshape(avg, vec![n, self.specs.len()])
        }
    }

    /// Current exponent sum per monomial, for drift logging.
    pub fn exponent_sums<T: Scalar>(&self, params: &ParamSet<T>) -> Vec<f64> {
        self.specs
            .iter()
            .map(|s| params.get(s.exponents).data().iter().map(|v| v.tof()).sum())
            .collect()
    }

    pub fn feature_count(&self, in_channels: usize) -> usize {
        if self.per_channel {
            self.specs.len() * in_channels
        } else {
            self.specs.len()
        }
    }
}

fn validate_distances(distances: &[f64]) -> Result<()> {
    if distances.is_empty() {
        return Err(Error::contract("monomial needs at least one distance"));
    }
    if distances[0] != 0.0 {
        return Err(Error::contract(format!(
            "first monomial distance must be 0 so the center pixel participates, got {}",
            distances[0]
        )));
    }
    if let Some(&bad) = distances.iter().find(|d| !d.is_finite() || **d < 0.0) {
        return Err(Error::contract(format!(
            "monomial distances must be finite and non-negative, got {bad}"
        )));
    }
    Ok(())
}

// ---------------------------------------------------------------------
// Weighted-sum head
// ---------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WsMode {
    /// One kernel as large as the input; a single inner product per
    /// rotation, averaged over the group.
    Global,
    /// A small kernel applied at every position and rotation, averaged
    /// over both.
    Local,
}

/// Weighted-sum head: the group-and-space average of a learnable kernel
/// applied to the input at every rotation.
#[derive(Debug, Clone)]
pub struct WsHead {
    pub mode: WsMode,
    pub psi: ParamId,
    pub out_channels: usize,
    pub group: CyclicRotationGroup,
}

impl WsHead {
    /// Local mode with an odd `k x k` kernel `[co, ci, k, k]`.
    pub fn init_local<T: Scalar>(
        params: &mut ParamSet<T>,
        prefix: &str,
        co: usize,
        ci: usize,
        k: usize,
        group: CyclicRotationGroup,
        rng: &mut Rng,
    ) -> Result<Self> {
        if k % 2 == 0 {
            return Err(Error::contract(format!(
                "local weighted-sum kernel size must be odd, got {k}"
            )));
        }
        let psi = params.add(
            format!("{prefix}.psi"),
            kaiming_uniform(rng, &[co, ci, k, k], ci * k * k),
            Regularization::L2,
        )?;
        Ok(WsHead {
            mode: WsMode::Local,
            psi,
            out_channels: co,
            group,
        })
    }

    /// Global mode with a kernel matching the input extent
    /// `[co, ci, h, w]`.
    pub fn init_global<T: Scalar>(
        params: &mut ParamSet<T>,
        prefix: &str,
        co: usize,
        ci: usize,
        h: usize,
        w: usize,
        group: CyclicRotationGroup,
        rng: &mut Rng,
    ) -> Result<Self> {
        let psi = params.add(
            format!("{prefix}.psi"),
            kaiming_uniform(rng, &[co, ci, h, w], ci * h * w),
            Regularization::L2,
        )?;
        Ok(WsHead {
            mode: WsMode::Global,
            psi,
            out_channels: co,
            group,
        })
    }

    /// Record the head on a batch `[n, ci, h, w]`, producing `[n, co]`.
    pub fn record_batch<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        params: &ParamSet<T>,
        x: NodeId,
    ) -> Result<NodeId> {
        let psi = g.param(params, self.psi);
        match self.mode {
            WsMode::Global => {
                let kernels = g.kernel_rotations(psi, self.group)?;
                g.global_ws_pool(x, kernels)
            }
            WsMode::Local => g.local_ws_pool(x, psi, self.group),
        }
    }

    pub fn feature_count(&self) -> usize {
        self.out_channels
    }
}

/// Maximum absolute gap between the two routes to the local weighted
/// sum: the direct double sum versus a lifting convolution followed by
/// the average over group and space. The two are algebraically equal,
/// so the gap only measures floating-point reassociation.
pub fn ws_groupconv_equivalence<T: Scalar>(
    x: &Tensor<T>,
    psi: &Tensor<T>,
    group: CyclicRotationGroup,
) -> Result<f64> {
    let mut g = Graph::<T>::new();
    let xn = g.constant(x.clone());
    let pn = g.constant(psi.clone());
    let direct = g.local_ws_pool(xn, pn, group)?;
    let kernels = g.kernel_rotations(pn, group)?;
    let lifted = g.lifting_conv(xn, kernels, group)?;
    let pooled = g.mean_trailing(lifted, 3)?;
    g.value(direct).max_abs_diff(g.value(pooled))
}

// ---------------------------------------------------------------------
// MLP head
// ---------------------------------------------------------------------

/// Neighborhood MLP head: every pixel's `patch x patch` surrounding,
/// rotated back by each group element, is flattened and passed through
/// bias-free linear layers with ReLU in between; outputs are averaged
/// over positions and rotations.
#[derive(Debug, Clone)]
pub struct MlpHead {
    pub patch: usize,
    pub weights: Vec<ParamId>,
    pub out_features: usize,
    pub group: CyclicRotationGroup,
}

impl MlpHead {
    /// `widths` lists every layer's output width; the input width is
    /// `in_channels * patch^2`.
    pub fn init<T: Scalar>(
        params: &mut ParamSet<T>,
        prefix: &str,
        in_channels: usize,
        patch: usize,
        widths: &[usize],
        group: CyclicRotationGroup,
        rng: &mut Rng,
    ) -> Result<Self> {
        if patch == 0 || patch % 2 == 0 {
            return Err(Error::contract(format!(
                "patch size must be odd and positive, got {patch}"
            )));
        }
        if widths.is_empty() || widths.contains(&0) {
            return Err(Error::contract(format!(
                "layer widths must be non-empty and positive, got {widths:?}"
            )));
        }
        let mut weights = Vec::with_capacity(widths.len());
        let mut fan_in = in_channels * patch * patch;
        for (i, &width) in widths.iter().enumerate() {
            let id = params.add(
                format!("{prefix}.w{i}"),
                kaiming_uniform(rng, &[fan_in, width], fan_in),
                Regularization::L2,
            )?;
            weights.push(id);
            fan_in = width;
        }
        Ok(MlpHead {
            patch,
            weights,
            out_features: *widths.last().expect("non-empty"),
            group,
        })
    }

    /// Record the head on a batch `[n, c, h, w]`, producing `[n, f]`.
    pub fn record_batch<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        params: &ParamSet<T>,
        x: NodeId,
    ) -> Result<NodeId> {
        let shape = g.value(x).shape().to_vec();
        if shape.len() != 4 {
            return Err(Error::shape(format!(
                "MLP head input must be [n, c, h, w], got {shape:?}"
            )));
        }
        let (h, w) = (shape[2], shape[3]);
        let mut rows = g.patch_stack(x, self.group, self.patch)?;
        for (i, &weight) in self.weights.iter().enumerate() {
            let wn = g.param(params, weight);
            rows = g.matmul(rows, wn)?;
            if i + 1 < self.weights.len() {
                rows = g.relu(rows);
            }
        }
        g.mean_grouped_rows(rows, h * w * self.group.order())
    }

    pub fn feature_count(&self) -> usize {
        self.out_features
    }
}

// ---------------------------------------------------------------------
// Self-attention head
// ---------------------------------------------------------------------

/// Self-attention over pixel tokens, evaluated on every rotated copy of
/// the input and averaged over the group.
///
/// Attention logits follow `q_i . k_j + q_i . (P[off(i, j)] W_K)`: the
/// relative encoding of the integer offset between key and query pixel
/// is added to the key pixel before projection. Multiple heads are
/// concatenated and mixed by a final linear layer.
#[derive(Debug, Clone)]
pub struct SaHead {
    pub heads: usize,
    pub head_channels: usize,
    pub in_channels: usize,
    pub out_channels: usize,
    pub height: usize,
    pub width: usize,
    pub wq: Vec<ParamId>,
    pub wk: Vec<ParamId>,
    pub wv: Vec<ParamId>,
    /// Relative positional encodings `[(2h-1)*(2w-1), ci]`, one row per
    /// integer coordinate offset.
    pub encodings: ParamId,
    /// Head mixer `[heads * head_channels, co]`.
    pub mix: ParamId,
    pub group: CyclicRotationGroup,
    offsets: Arc<Vec<u32>>,
}

struct SaNodes {
    wq: Vec<NodeId>,
    wk: Vec<NodeId>,
    wv: Vec<NodeId>,
    /// Projected encodings per head: `encodings . wk[h]`.
    pk: Vec<NodeId>,
    mix: NodeId,
}

impl SaHead {
    /// `channel_budget` is split evenly across `heads`; a budget that
    /// the head count does not divide is rejected.
    #[allow(clippy::too_many_arguments)]
    pub fn init<T: Scalar>(
        params: &mut ParamSet<T>,
        prefix: &str,
        in_channels: usize,
        channel_budget: usize,
        heads: usize,
        out_channels: usize,
        height: usize,
        width: usize,
        group: CyclicRotationGroup,
        rng: &mut Rng,
    ) -> Result<Self> {
        if heads == 0 || channel_budget % heads != 0 {
            return Err(Error::contract(format!(
                "attention head count {heads} must divide the channel budget {channel_budget}"
            )));
        }
        if height == 0 || width == 0 || in_channels == 0 || out_channels == 0 {
            return Err(Error::contract(
                "attention head extents and channel counts must be positive",
            ));
        }
        let head_channels = channel_budget / heads;
        let mut wq = Vec::with_capacity(heads);
        let mut wk = Vec::with_capacity(heads);
        let mut wv = Vec::with_capacity(heads);
        for h in 0..heads {
            wq.push(params.add(
                format!("{prefix}.q{h}"),
                kaiming_uniform(rng, &[in_channels, head_channels], in_channels),
                Regularization::L2,
            )?);
            wk.push(params.add(
                format!("{prefix}.k{h}"),
                kaiming_uniform(rng, &[in_channels, head_channels], in_channels),
                Regularization::L2,
            )?);
            wv.push(params.add(
                format!("{prefix}.v{h}"),
                kaiming_uniform(rng, &[in_channels, head_channels], in_channels),
                Regularization::L2,
            )?);
        }
        let table = (2 * height - 1) * (2 * width - 1);
        let encodings = params.add(
            format!("{prefix}.enc"),
            kaiming_uniform(rng, &[table, in_channels], in_channels),
            Regularization::L2,
        )?;
        let mix = params.add(
            format!("{prefix}.mix"),
            kaiming_uniform(rng, &[heads * head_channels, out_channels], heads * head_channels),
            Regularization::L2,
        )?;
        Ok(SaHead {
            heads,
            head_channels,
            in_channels,
            out_channels,
            height,
            width,
            wq,
            wk,
            wv,
            encodings,
            mix,
            group,
            offsets: relative_offset_table(height, width),
        })
    }

    fn make_nodes<T: Scalar>(&self, g: &mut Graph<T>, params: &ParamSet<T>) -> Result<SaNodes> {
        let enc = g.param(params, self.encodings);
        let mut nodes = SaNodes {
            wq: Vec::with_capacity(self.heads),
            wk: Vec::with_capacity(self.heads),
            wv: Vec::with_capacity(self.heads),
            pk: Vec::with_capacity(self.heads),
            mix: g.param(params, self.mix),
        };
        for h in 0..self.heads {
            nodes.wq.push(g.param(params, self.wq[h]));
            let wk = g.param(params, self.wk[h]);
            nodes.wk.push(wk);
            nodes.wv.push(g.param(params, self.wv[h]));
            nodes.pk.push(g.matmul(enc, wk)?);
        }
        Ok(nodes)
    }

    fn record_tokens_inner<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        nodes: &SaNodes,
        x: NodeId,
        attn_sink: &mut Vec<NodeId>,
    ) -> Result<NodeId> {
        let shape = g.value(x).shape().to_vec();
        if shape != [self.in_channels, self.height, self.width] {
            return Err(Error::shape(format!(
                "attention head input must be [{}, {}, {}], got {shape:?}",
                self.in_channels, self.height, self.width
            )));
        }
        let mut averaged: Option<NodeId> = None;
        for j in 0..self.group.order() {
            let rot = self.group.plane_rotation(j, self.height, self.width);
            let xj = g.rotate_planes_resolved(x, rot)?;
            let tokens = g.image_to_tokens(xj)?;
            let mut per_head = Vec::with_capacity(self.heads);
            for h in 0..self.heads {
                let q = g.matmul(tokens, nodes.wq[h])?;
                let k = g.matmul(tokens, nodes.wk[h])?;
                let v = g.matmul(tokens, nodes.wv[h])?;
                let content = g.matmul_transb(q, k)?;
                let bias = g.rel_attn_bias(q, nodes.pk[h], &self.offsets)?;
                let logits = g.add(content, bias)?;
                let attn = g.softmax_last(logits)?;
                attn_sink.push(attn);
                per_head.push(g.matmul(attn, v)?);
            }
            let cat = if self.heads == 1 {
                per_head[0]
            } else {
                g.concat_cols(&per_head)?
            };
            let mixed = g.matmul(cat, nodes.mix)?;
            averaged = Some(match averaged {
                None => mixed,
                Some(acc) => g.add(acc, mixed)?,
            });
        }
        Ok(g.scale(averaged.expect("group order >= 1"), 1.0 / self.group.order() as f64))
    }

    /// Record the head on one sample `[ci, h, w]`, producing the
    /// group-averaged per-token output `[h*w, co]`.
    pub fn record_tokens<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        params: &ParamSet<T>,
        x: NodeId,
    ) -> Result<NodeId> {
        let nodes = self.make_nodes(g, params)?;
        self.record_tokens_inner(g, &nodes, x, &mut Vec::new())
    }

    /// Record the head on a batch `[n, ci, h, w]`, producing `[n, co]`
    /// via a token mean per sample.
    pub fn record_batch<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        params: &ParamSet<T>,
        x: NodeId,
    ) -> Result<NodeId> {
        let shape = g.value(x).shape().to_vec();
        if shape.len() != 4 {
            return Err(Error::shape(format!(
                "attention head input must be [n, ci, h, w], got {shape:?}"
            )));
        }
        let nodes = self.make_nodes(g, params)?;
        let mut rows = Vec::with_capacity(shape[0]);
        for b in 0..shape[0] {
            let xb = g.slice_batch(x, b)?;
            let y = self.record_tokens_inner(g, &nodes, xb, &mut Vec::new())?;
            rows.push(g.mean_rows(y)?);
        }
        g.stack_rows(&rows)
    }

    /// Worst deviation of any attention row sum from 1, across all
    /// group elements and heads, for one sample `[ci, h, w]`.
    pub fn attention_rowsum_error<T: Scalar>(
        &self,
        params: &ParamSet<T>,
        x: &Tensor<T>,
    ) -> Result<f64> {
        let mut g = Graph::<T>::new();
        let xn = g.constant(x.clone());
        let nodes = self.make_nodes(&mut g, params)?;
        let mut attn = Vec::new();
        self.record_tokens_inner(&mut g, &nodes, xn, &mut attn)?;
        let mut worst = 0.0f64;
        for id in attn {
            let a = g.value(id);
            let n = a.shape()[0];
            for i in 0..n {
                let sum: f64 = a.data()[i * n..(i + 1) * n].iter().map(|v| v.tof()).sum();
                worst = worst.max((sum - 1.0).abs());
            }
        }
        Ok(worst)
    }

    pub fn feature_count(&self) -> usize {
        self.out_channels
    }
}

/// Token-pair offset table for an `h x w` grid: entry `(i, j)` indexes
/// the relative encoding of the integer offset from pixel `i` to pixel
/// `j`, laid out row-major over `(2h-1) x (2w-1)` offsets.
pub fn relative_offset_table(h: usize, w: usize) -> Arc<Vec<u32>> {
    let n = h * w;
    let cols = 2 * w - 1;
    let mut table = Vec::with_capacity(n * n);
    for i in 0..n {
        let (ui, vi) = ((i / w) as i64, (i % w) as i64);
        for j in 0..n {
            let (uj, vj) = ((j / w) as i64, (j % w) as i64);
            let du = uj - ui + h as i64 - 1;
            let dv = vj - vi + w as i64 - 1;
            table.push((du * cols as i64 + dv) as u32);
        }
    }
    Arc::new(table)
}

// ---------------------------------------------------------------------
// Unified head interface
// ---------------------------------------------------------------------

/// Any invariant-integration head, for call sites that treat them
/// uniformly (model assembly, invariance measurement).
#[derive(Debug, Clone)]
pub enum IiHead {
    Monomial(MonomialHead),
    Ws(WsHead),
    Mlp(MlpHead),
    Sa(SaHead),
}

impl IiHead {
    pub fn group(&self) -> CyclicRotationGroup {
        match self {
            IiHead::Monomial(h) => h.group,
            IiHead::Ws(h) => h.group,
            IiHead::Mlp(h) => h.group,
            IiHead::Sa(h) => h.group,
        }
    }

    /// Invariant features per sample given `in_channels` input channels.
    pub fn feature_count(&self, in_channels: usize) -> usize {
        match self {
            IiHead::Monomial(h) => h.feature_count(in_channels),
            IiHead::Ws(h) => h.feature_count(),
            IiHead::Mlp(h) => h.feature_count(),
            IiHead::Sa(h) => h.feature_count(),
        }
    }

    /// Record the head on a batch `[n, c, h, w]`, producing `[n, f]`.
    pub fn record_batch<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        params: &ParamSet<T>,
        x: NodeId,
    ) -> Result<NodeId> {
        match self {
            IiHead::Monomial(h) => h.record_batch(g, params, x),
            IiHead::Ws(h) => h.record_batch(g, params, x),
            IiHead::Mlp(h) => h.record_batch(g, params, x),
            IiHead::Sa(h) => h.record_batch(g, params, x),
        }
    }

    /// Evaluate the head on one sample `[c, h, w]`, returning the flat
    /// feature vector.
    pub fn eval<T: Scalar>(&self, params: &ParamSet<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
        let shape = x.shape();
        if shape.len() != 3 {
            return Err(Error::shape(format!(
                "head input must be [c, h, w], got {shape:?}"
            )));
        }
        let mut g = Graph::<T>::new();
        let xn = g.constant(x.reshape(vec![1, shape[0], shape[1], shape[2]])?);
        let out = self.record_batch(&mut g, params, xn)?;
        let features = g.value(out).numel();
        Tensor::new(vec![features], g.value(out).data().to_vec())
    }
}

/// Worst relative change of any head feature when the input is rotated
/// by `probe`: `max_i |f_i(L x) - f_i(x)| / (|f_i(x)| + 1e-8)`.
pub fn invariance_residual<T: Scalar>(
    head: &IiHead,
    params: &ParamSet<T>,
    x: &Tensor<T>,
    probe: usize,
) -> Result<f64> {
    let base = head.eval(params, x)?;
    let rotated_input = head.group().act_on_plane(probe, x)?;
    let moved = head.eval(params, &rotated_input)?;
    let mut worst = 0.0f64;
    for (a, b) in moved.data().iter().zip(base.data()) {
        worst = worst.max((a.tof() - b.tof()).abs() / (b.tof().abs() + 1e-8));
    }
    Ok(worst)
}
