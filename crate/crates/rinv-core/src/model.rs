//! Model configuration and builder: a steerable equivariant backbone
//! (lifting convolution, group convolutions, group pooling) feeding an
//! invariant head and a dense classifier, plus a planar baseline CNN of
//! matched parameter count.
//!
//! Layer order is fixed: convolutions (each optionally followed by a
//! 2x2 spatial max pool), then for the equivariant backbone a max pool
//! over the group axis, then exactly one head (an invariant-integration
//! head or global spatial max pooling), then dense layers ending in the
//! classifier. Channel rescaling divides every convolution width by
//! `sqrt(param_ratio)` so the equivariant build spends the same
//! parameter budget as the planar reference (16/3 at kernel size 3,
//! 8 rotations, 16 basis atoms).

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, NodeId};
use crate::error::{Error, Result};
use crate::group::CyclicRotationGroup;
use crate::ii::{IiHead, MlpHead, MonomialHead, SaHead, WsHead};
use crate::params::{kaiming_uniform, ParamId, ParamSet, Regularization};
use crate::rng::{rng_from_seed, split_seed, split_seed_indexed};
use crate::scalar::Scalar;
use crate::steerable::{param_ratio, planar_conv_params, SteerableBasis};
use crate::tensor::Tensor;

/// Convolution stack entry: output channels, optionally followed by a
/// 2x2 spatial max pool.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConvSpec {
    pub channels: usize,
    #[serde(default)]
    pub pool: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum Backbone {
    /// Lifting convolution then group convolutions; features carry a
    /// group axis until the group pool.
    #[default]
    Equivariant,
    /// Plain planar convolutions, no group axis anywhere.
    Planar,
}

/// The single invariance-enforcing head between backbone and dense
/// classifier.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum HeadSpec {
    /// Baseline: global max over spatial positions.
    SpatialMaxPool,
    /// Monomials of ring samples, group- and position-averaged.
    Monomial {
        distances: Vec<Vec<f64>>,
        #[serde(default = "default_true")]
        per_channel: bool,
        /// Explicit exponents mirroring `distances`; pruning sidecars
        /// set them so a selected head rebuilds exactly. `None` draws
        /// fresh random exponents.
        #[serde(default, skip_serializing_if = "Option::is_none")]
        exponents: Option<Vec<Vec<f64>>>,
    },
    /// Weighted sum with a full-extent template.
    GlobalWs { out_channels: usize },
    /// Weighted sum with a local template, averaged over positions.
    LocalWs {
        out_channels: usize,
        kernel_size: usize,
    },
    /// Multilayer perceptron over inversely rotated patches.
    Mlp { patch: usize, widths: Vec<usize> },
    /// Self-attention with relative positional encodings, orbit-averaged.
    SelfAttention {
        heads: usize,
        channel_budget: usize,
        out_channels: usize,
    },
}

fn default_true() -> bool {
    true
}

fn default_dense() -> Vec<usize> {
    vec![90]
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    /// Input images are `image_size x image_size`, single channel.
    pub image_size: usize,
    pub classes: usize,
    /// Rotation group order.
    pub n_alpha: usize,
    /// Steerable basis atoms per filter.
    pub n_f: usize,
    pub kernel_size: usize,
    pub conv: Vec<ConvSpec>,
    #[serde(default)]
    pub backbone: Backbone,
    /// Divide convolution widths by `sqrt(param_ratio)` so the
    /// equivariant build matches the planar reference budget.
    #[serde(default)]
    pub channel_rescale: bool,
    pub head: HeadSpec,
    /// Hidden dense widths; the classifier layer is appended.
    #[serde(default = "default_dense")]
    pub dense: Vec<usize>,
    #[serde(default)]
    pub dropout: f64,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.image_size == 0 {
            return Err(Error::config("image_size must be positive"));
        }
        if self.classes < 2 {
            return Err(Error::config(format!(
                "classes must be at least 2, got {}",
                self.classes
            )));
        }
        if self.n_alpha == 0 {
            return Err(Error::config("n_alpha must be positive"));
        }
        if self.kernel_size % 2 == 0 || self.kernel_size == 0 {
            return Err(Error::config(format!(
                "kernel_size must be odd, got {}",
                self.kernel_size
            )));
        }
        if self.conv.is_empty() {
            return Err(Error::config("at least one convolution layer is required"));
        }
        if let Some(bad) = self.conv.iter().position(|c| c.channels == 0) {
            return Err(Error::config(format!(
                "conv{} has zero channels",
                bad + 1
            )));
        }
        if self.backbone == Backbone::Equivariant && self.n_f == 0 {
            return Err(Error::config("n_f must be positive"));
        }
        if self.backbone == Backbone::Planar && self.channel_rescale {
            return Err(Error::config(
                "channel_rescale only applies to the equivariant backbone",
            ));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::config(format!(
                "dropout must lie in [0, 1), got {}",
                self.dropout
            )));
        }
        if self.dense.contains(&0) {
            return Err(Error::config("dense widths must be positive"));
        }
        Ok(())
    }

    /// Convolution widths actually built: the configured widths, divided
    /// by `sqrt(param_ratio)` when rescaling is active.
    pub fn built_channels(&self) -> Result<Vec<usize>> {
        if self.backbone == Backbone::Equivariant && self.channel_rescale {
            self.conv
                .iter()
                .map(|c| rescaled_channels(c.channels, self.kernel_size, self.n_alpha, self.n_f))
                .collect()
        } else {
            Ok(self.conv.iter().map(|c| c.channels).collect())
        }
    }

    /// Spatial extent of the feature map entering the head.
    pub fn head_extent(&self) -> Result<usize> {
        let mut s = self.image_size;
        for (i, c) in self.conv.iter().enumerate() {
            if c.pool {
                if s % 2 != 0 {
                    let next = if i + 1 < self.conv.len() {
                        format!("conv{}", i + 2)
                    } else {
                        "the head".to_string()
                    };
                    return Err(Error::build(format!(
                        "2x2 pool between conv{} and {next} needs even spatial dims, got {s}x{s}",
                        i + 1
                    )));
                }
                s /= 2;
            }
        }
        Ok(s)
    }
}

/// Channel width after dividing by `sqrt(param_ratio(k, n_alpha, n_f))`,
/// rounded to nearest and clamped to at least one.
pub fn rescaled_channels(c: usize, k: usize, n_alpha: usize, n_f: usize) -> Result<usize> {
    let divisor = param_ratio(k, n_alpha, n_f)?.sqrt_f64();
    Ok(((c as f64 / divisor).round() as usize).max(1))
}

/// Parameter count of the planar reference: unrescaled planar
/// convolutions, global spatial max head, the same dense widths.
pub fn planar_reference_params(config: &ModelConfig) -> usize {
    let mut total = 0usize;
    let mut ci = 1usize;
    for c in &config.conv {
        total += planar_conv_params(ci, c.channels, config.kernel_size);
        ci = c.channels;
    }
    let mut input = ci;
    for &width in config.dense.iter().chain(std::iter::once(&config.classes)) {
        total += input * width + width;
        input = width;
    }
    total
}

#[derive(Debug)]
enum ConvLayer {
    Lift {
        coef: ParamId,
        basis: Arc<SteerableBasis>,
        pool: bool,
    },
    Group {
        coef: ParamId,
        basis: Arc<SteerableBasis>,
        pool: bool,
    },
    Planar {
        w: ParamId,
        pool: bool,
    },
}

#[derive(Debug)]
enum HeadImpl {
    SpatialMax,
    Ii(IiHead),
}

#[derive(Debug)]
struct DenseLayer {
    w: ParamId,
    b: ParamId,
}

/// Whether a forward pass applies dropout (training) or not (eval).
#[derive(Debug, Clone, Copy)]
pub enum Phase {
    Train { dropout_seed: u64 },
    Eval,
}

#[derive(Debug)]
pub struct Model {
    pub config: ModelConfig,
    group: CyclicRotationGroup,
    layers: Vec<ConvLayer>,
    head: HeadImpl,
    dense: Vec<DenseLayer>,
    head_in_channels: usize,
    head_spatial: usize,
    param_ids: Vec<ParamId>,
}

/// Build the model described by `config`, registering all parameters
/// under deterministic names (`conv{i}.*`, `head.*`, `dense{i}.*`) with
/// initialization driven by `seed`.
pub fn build_model<T: Scalar>(
    config: &ModelConfig,
    params: &mut ParamSet<T>,
    seed: u64,
) -> Result<Model> {
    config.validate()?;
    let group = CyclicRotationGroup::new(config.n_alpha)?;
    let widths = config.built_channels()?;
    let head_spatial = config.head_extent()?;
    let mut rng = rng_from_seed(split_seed(seed, "model-init"));
    let mut param_ids = Vec::new();
    let k = config.kernel_size;

    let basis = if config.backbone == Backbone::Equivariant {
        Some(Arc::new(SteerableBasis::new(k, config.n_f, group)?))
    } else {
        None
    };

    let mut layers = Vec::with_capacity(widths.len());
    let mut ci = 1usize;
    for (i, &co) in widths.iter().enumerate() {
        let pool = config.conv[i].pool;
        let name = format!("conv{}.coef", i + 1);
        match (&basis, i) {
            (Some(basis), 0) => {
                let coef = params.add(
                    name,
                    kaiming_uniform(&mut rng, &[co, ci, 2 * config.n_f], ci * 2 * config.n_f),
                    Regularization::ElasticNet,
                )?;
                param_ids.push(coef);
                layers.push(ConvLayer::Lift {
                    coef,
                    basis: Arc::clone(basis),
                    pool,
                });
            }
            (Some(basis), _) => {
                let g = group.order();
                let coef = params.add(
                    name,
                    kaiming_uniform(
                        &mut rng,
                        &[co, ci, g, 2 * config.n_f],
                        ci * g * 2 * config.n_f,
                    ),
                    Regularization::ElasticNet,
                )?;
                param_ids.push(coef);
                layers.push(ConvLayer::Group {
                    coef,
                    basis: Arc::clone(basis),
                    pool,
                });
            }
            (None, _) => {
                let w = params.add(
                    format!("conv{}.w", i + 1),
                    kaiming_uniform(&mut rng, &[co, ci, k, k], ci * k * k),
                    Regularization::L2,
                )?;
                param_ids.push(w);
                layers.push(ConvLayer::Planar { w, pool });
            }
        }
        ci = co;
    }

    let head = build_head(config, params, ci, head_spatial, group, &mut rng)?;
    if let HeadImpl::Ii(ii) = &head {
        collect_head_params(ii, &mut param_ids);
    }

    let features = match &head {
        HeadImpl::SpatialMax => ci,
        HeadImpl::Ii(ii) => ii.feature_count(ci),
    };
    let mut dense = Vec::new();
    let mut input = features;
    for (i, &width) in config
        .dense
        .iter()
        .chain(std::iter::once(&config.classes))
        .enumerate()
    {
        let w = params.add(
            format!("dense{i}.w"),
            kaiming_uniform(&mut rng, &[input, width], input),
            Regularization::L2,
        )?;
        let b = params.add(
            format!("dense{i}.b"),
            Tensor::zeros(vec![width]),
            Regularization::None,
        )?;
        param_ids.push(w);
        param_ids.push(b);
        dense.push(DenseLayer { w, b });
        input = width;
    }

    let model = Model {
        config: config.clone(),
        group,
        layers,
        head,
        dense,
        head_in_channels: ci,
        head_spatial,
        param_ids,
    };

    if config.channel_rescale {
        let actual = model.parameter_count(params);
        let reference = planar_reference_params(config);
        let gap = (actual as f64 - reference as f64).abs() / reference as f64;
        if gap > 0.05 {
            return Err(Error::build(format!(
                "rescaled build has {actual} parameters vs {reference} reference ({:.1}% apart); \
                 widen the convolution stack so the dense head is a smaller share",
                gap * 100.0
            )));
        }
    }
    Ok(model)
}

fn build_head<T: Scalar>(
    config: &ModelConfig,
    params: &mut ParamSet<T>,
    in_channels: usize,
    spatial: usize,
    group: CyclicRotationGroup,
    rng: &mut crate::rng::Rng,
) -> Result<HeadImpl> {
    let head = match &config.head {
        HeadSpec::SpatialMaxPool => HeadImpl::SpatialMax,
        HeadSpec::Monomial {
            distances,
            per_channel,
            exponents,
        } => {
            let mut h = MonomialHead::init(params, "head", distances, group, rng)?;
            h.per_channel = *per_channel;
            if let Some(bad) = distances
                .iter()
                .flat_map(|d| d.iter())
                .find(|&&d| d > spatial as f64)
            {
                return Err(Error::build(format!(
                    "head ring distance {bad} exceeds the {spatial}x{spatial} output of conv{}",
                    config.conv.len()
                )));
            }
            if let Some(rows) = exponents {
                if rows.len() != distances.len()
                    || rows.iter().zip(distances).any(|(r, d)| r.len() != d.len())
                {
                    return Err(Error::config(
                        "head.exponents must mirror head.distances set for set",
                    ));
                }
                for (spec, row) in h.specs.iter().zip(rows) {
                    for (slot, &v) in params.get_mut(spec.exponents).data_mut().iter_mut().zip(row)
                    {
                        *slot = T::fromf(v);
                    }
                }
            }
            HeadImpl::Ii(IiHead::Monomial(h))
        }
        HeadSpec::GlobalWs { out_channels } => HeadImpl::Ii(IiHead::Ws(WsHead::init_global(
            params,
            "head",
            *out_channels,
            in_channels,
            spatial,
            spatial,
            group,
            rng,
        )?)),
        HeadSpec::LocalWs {
            out_channels,
            kernel_size,
        } => {
            if *kernel_size > spatial {
                return Err(Error::build(format!(
                    "head kernel {kernel_size} exceeds the {spatial}x{spatial} output of conv{}",
                    config.conv.len()
                )));
            }
            HeadImpl::Ii(IiHead::Ws(WsHead::init_local(
                params,
                "head",
                *out_channels,
                in_channels,
                *kernel_size,
                group,
                rng,
            )?))
        }
        HeadSpec::Mlp { patch, widths } => {
            if *patch > spatial {
                return Err(Error::build(format!(
                    "head patch {patch} exceeds the {spatial}x{spatial} output of conv{}",
                    config.conv.len()
                )));
            }
            HeadImpl::Ii(IiHead::Mlp(MlpHead::init(
                params,
                "head",
                in_channels,
                *patch,
                widths,
                group,
                rng,
            )?))
        }
        HeadSpec::SelfAttention {
            heads,
            channel_budget,
            out_channels,
        } => HeadImpl::Ii(IiHead::Sa(SaHead::init(
            params,
            "head",
            in_channels,
            *channel_budget,
            *heads,
            *out_channels,
            spatial,
            spatial,
            group,
            rng,
        )?)),
    };
    Ok(head)
}

fn collect_head_params(head: &IiHead, out: &mut Vec<ParamId>) {
    match head {
        IiHead::Monomial(h) => out.extend(h.specs.iter().map(|s| s.exponents)),
        IiHead::Ws(h) => out.push(h.psi),
        IiHead::Mlp(h) => out.extend(h.weights.iter().copied()),
        IiHead::Sa(h) => {
            out.extend(h.wq.iter().copied());
            out.extend(h.wk.iter().copied());
            out.extend(h.wv.iter().copied());
            out.push(h.encodings);
            out.push(h.mix);
        }
    }
}

impl Model {
    pub fn group(&self) -> CyclicRotationGroup {
        self.group
    }

    pub fn classes(&self) -> usize {
        self.config.classes
    }

    /// Channels entering the head (after any rescaling).
    pub fn head_in_channels(&self) -> usize {
        self.head_in_channels
    }

    /// Spatial extent of the feature map entering the head.
    pub fn head_spatial(&self) -> usize {
        self.head_spatial
    }

    /// Every parameter this model registered, in creation order.
    pub fn param_ids(&self) -> &[ParamId] {
        &self.param_ids
    }

    pub fn parameter_count<T: Scalar>(&self, params: &ParamSet<T>) -> usize {
        self.param_ids.iter().map(|&id| params.get(id).numel()).sum()
    }

    /// The monomial head, when this model has one.
    pub fn monomial_head(&self) -> Option<&MonomialHead> {
        match &self.head {
            HeadImpl::Ii(IiHead::Monomial(h)) => Some(h),
            _ => None,
        }
    }

    /// The invariant head, when this model has one (not the spatial-max
    /// baseline).
    pub fn ii_head(&self) -> Option<&IiHead> {
        match &self.head {
            HeadImpl::Ii(h) => Some(h),
            HeadImpl::SpatialMax => None,
        }
    }

    /// Record the forward pass on a batch `[n, 1, h, w]`, returning the
    /// logits node `[n, classes]`.
    pub fn record_logits<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        params: &ParamSet<T>,
        batch: Tensor<T>,
        phase: Phase,
    ) -> Result<NodeId> {
        let shape = batch.shape();
        if shape.len() != 4
            || shape[1] != 1
            || shape[2] != self.config.image_size
            || shape[3] != self.config.image_size
        {
            return Err(Error::shape(format!(
                "model expects [n, 1, {s}, {s}] input, got {shape:?}",
                s = self.config.image_size
            )));
        }
        let mut cur = g.constant(batch);
        let mut equivariant = false;
        for layer in &self.layers {
            let pool;
            match layer {
                ConvLayer::Lift { coef, basis, pool: p } => {
                    let c = g.param(params, *coef);
                    let kernels = g.synth_lift(c, basis)?;
                    cur = g.lifting_conv(cur, kernels, self.group)?;
                    equivariant = true;
                    pool = *p;
                }
                ConvLayer::Group { coef, basis, pool: p } => {
                    let c = g.param(params, *coef);
                    let kernels = g.synth_group(c, basis)?;
                    cur = g.group_conv(cur, kernels, self.group)?;
                    pool = *p;
                }
                ConvLayer::Planar { w, pool: p } => {
                    let wn = g.param(params, *w);
                    cur = g.conv2d(cur, wn, 1, (self.config.kernel_size - 1) / 2)?;
                    pool = *p;
                }
            }
            cur = g.relu(cur);
            if pool {
                cur = g.max_pool2(cur)?;
            }
        }
        if equivariant {
            cur = g.group_max_pool(cur)?;
        }
        cur = match &self.head {
            HeadImpl::SpatialMax => g.global_max_pool(cur)?,
            HeadImpl::Ii(head) => head.record_batch(g, params, cur)?,
        };
        for (i, layer) in self.dense.iter().enumerate() {
            let w = g.param(params, layer.w);
            let b = g.param(params, layer.b);
            cur = g.dense(cur, w, b)?;
            if i + 1 < self.dense.len() {
                cur = g.relu(cur);
                if let Phase::Train { dropout_seed } = phase {
                    if self.config.dropout > 0.0 {
                        let seed = split_seed_indexed(dropout_seed, "dropout", i as u64);
                        cur = g.dropout(cur, self.config.dropout, seed)?;
                    }
                }
            }
        }
        Ok(cur)
    }

    /// Evaluate logits for a batch without building gradients.
    pub fn logits<T: Scalar>(
        &self,
        params: &ParamSet<T>,
        batch: Tensor<T>,
    ) -> Result<Tensor<T>> {
        let mut g = Graph::new();
        let out = self.record_logits(&mut g, params, batch, Phase::Eval)?;
        Ok(g.value(out).clone())
    }
}
