//! Monomial selection: building a candidate pool and shrinking it to a
//! target count.
//!
//! A monomial head starts with a pool of `M` candidate monomials that is
//! reduced to `n_m` survivors by one of three algorithms:
//!
//! * random — a seeded uniform subset, the baseline;
//! * magnitude — iterative pruning ranked by the mean absolute weight of
//!   each monomial's fan-out in the first dense layer
//!   ([`magnitude_scores`]);
//! * connectivity — ranked by the absolute loss sensitivity of an
//!   all-ones gate multiplying each monomial's fan-out
//!   ([`sensitivity_scores`]), accumulated over a full data pass.
//!
//! Pools are initialized either fully at random or from a catalog that
//! enumerates every distance combination at least once. Survivor
//! weights are carried across pruning steps bitwise; [`weight_checksum`]
//! lets callers verify that continuity. [`run_selection`] drives the
//! whole loop: it builds a model around the full pool, interleaves
//! training segments with scoring passes, and shrinks the head step by
//! step until only the target monomials remain.

use serde::{Deserialize, Serialize};

use rand::Rng as _;

use crate::autodiff::Graph;
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::group::CyclicRotationGroup;
use crate::ii::MonomialHead;
use crate::model::{build_model, HeadSpec, Model, ModelConfig, Phase};
use crate::params::{ParamId, ParamSet};
use crate::rng::{fnv1a_bytes, rng_from_seed, split_seed, split_seed_indexed, Rng};
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::train::{train, MetricRow, TrainConfig};

// ---------------------------------------------------------------------
// Configuration
// ---------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum InitMode {
    Random,
    Catalog,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Algorithm {
    Random,
    Magnitude,
    Connectivity,
}

/// How a monomial pool is built and reduced.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SelectionConfig {
    /// Initial pool size `M`.
    pub pool_size: usize,
    /// Final monomial count `n_m`.
    pub target: usize,
    pub init: InitMode,
    pub algorithm: Algorithm,
    /// Factor count per monomial (the first factor always sits at
    /// distance 0).
    pub factors: usize,
    /// Candidate distances for the remaining factors.
    pub distances: Vec<f64>,
    /// Epochs trained before the first scoring pass.
    #[serde(default)]
    pub pretrain_epochs: usize,
    /// Iterative `(epochs, keep)` steps; empty means one derived from
    /// `keep_fraction`.
    #[serde(default)]
    pub schedule: Vec<(usize, usize)>,
    /// Fraction of the pool kept per derived step.
    #[serde(default = "default_keep_fraction")]
    pub keep_fraction: f64,
    pub seed: u64,
}

fn default_keep_fraction() -> f64 {
    0.5
}

impl SelectionConfig {
    /// The explicit schedule if given, otherwise one derived by keeping
    /// `keep_fraction` of the pool per step (always ending exactly at
    /// the target, `step_epochs` of training before each scoring pass).
    pub fn effective_schedule(&self, step_epochs: usize) -> Result<Vec<(usize, usize)>> {
        let schedule = if self.schedule.is_empty() {
            schedule_from_fraction(self.pool_size, self.target, self.keep_fraction, step_epochs)?
        } else {
            self.schedule.clone()
        };
        validate_schedule(&schedule, self.pool_size, self.target)?;
        Ok(schedule)
    }

    pub fn validate(&self) -> Result<()> {
        if self.target == 0 {
            return Err(Error::contract("selection must keep at least one monomial"));
        }
        if self.target > self.pool_size {
            return Err(Error::contract(format!(
                "selection target {} exceeds pool size {}",
                self.target, self.pool_size
            )));
        }
        if self.factors == 0 {
            return Err(Error::contract("monomials need at least one factor"));
        }
        if self.factors > 1 && self.distances.is_empty() {
            return Err(Error::contract(
                "multi-factor monomials need a non-empty distance set",
            ));
        }
        if !(0.0 < self.keep_fraction && self.keep_fraction < 1.0) {
            return Err(Error::contract(format!(
                "keep fraction must lie in (0, 1), got {}",
                self.keep_fraction
            )));
        }
        Ok(())
    }
}

/// Keep `fraction` of the pool per step until the target is reached.
pub fn schedule_from_fraction(
    pool: usize,
    target: usize,
    fraction: f64,
    step_epochs: usize,
) -> Result<Vec<(usize, usize)>> {
    if !(0.0 < fraction && fraction < 1.0) {
        return Err(Error::contract(format!(
            "keep fraction must lie in (0, 1), got {fraction}"
        )));
    }
    if target > pool {
        return Err(Error::contract(format!(
            "target {target} exceeds pool size {pool}"
        )));
    }
    let mut schedule = Vec::new();
    let mut current = pool;
    while current > target {
        let mut next = ((current as f64) * fraction).floor() as usize;
        next = next.clamp(target, current - 1);
        schedule.push((step_epochs, next));
        current = next;
    }
    if schedule.is_empty() {
        schedule.push((step_epochs, target));
    }
    Ok(schedule)
}

/// Keep-counts must decrease strictly, stay within the pool, and end at
/// the target.
pub fn validate_schedule(
    schedule: &[(usize, usize)],
    pool: usize,
    target: usize,
) -> Result<()> {
    if schedule.is_empty() {
        return Err(Error::contract("pruning schedule must not be empty"));
    }
    let mut prev = pool;
    for (i, &(_, keep)) in schedule.iter().enumerate() {
        let limit_ok = if i == 0 { keep <= prev } else { keep < prev };
        if !limit_ok {
            return Err(Error::contract(format!(
                "schedule keep-counts must decrease strictly within the pool: step {i} keeps \
                 {keep} after {prev}"
            )));
        }
        prev = keep;
    }
    if prev != target {
        return Err(Error::contract(format!(
            "schedule must end at the target {target}, ends at {prev}"
        )));
    }
    Ok(())
}

// ---------------------------------------------------------------------
// Pool initialization
// ---------------------------------------------------------------------

/// Build the initial monomial pool as a [`MonomialHead`] with
/// `pool_size` monomials. Random mode samples every distance tail from
/// the distance set; catalog mode first enumerates all non-decreasing
/// distance combinations (error if they outnumber the pool) and fills
/// the rest randomly. Exponents are always sampled uniformly in
/// `[0, |G| / factors)`.
pub fn init_pool<T: Scalar>(
    params: &mut ParamSet<T>,
    prefix: &str,
    config: &SelectionConfig,
    group: CyclicRotationGroup,
) -> Result<MonomialHead> {
    config.validate()?;
    let mut rng = rng_from_seed(split_seed(config.seed, "monomial-pool"));
    let sets = generate_distance_sets(config, &mut rng)?;
    MonomialHead::init(params, prefix, &sets, group, &mut rng)
}

/// The pool's distance sets, one per candidate monomial, exactly as
/// [`init_pool`] builds them from the same config and seed.
pub fn pool_distance_sets(config: &SelectionConfig) -> Result<Vec<Vec<f64>>> {
    config.validate()?;
    let mut rng = rng_from_seed(split_seed(config.seed, "monomial-pool"));
    generate_distance_sets(config, &mut rng)
}

fn generate_distance_sets(config: &SelectionConfig, rng: &mut Rng) -> Result<Vec<Vec<f64>>> {
    let tail = config.factors - 1;
    let mut sets: Vec<Vec<f64>> = Vec::with_capacity(config.pool_size);
    if config.init == InitMode::Catalog {
        let combos = distance_combinations(&config.distances, tail);
        if combos.len() > config.pool_size {
            return Err(Error::contract(format!(
                "catalog holds {} distance combinations but the pool only has {} slots",
                combos.len(),
                config.pool_size
            )));
        }
        for combo in combos {
            sets.push(build_distances(&combo));
        }
    }
    while sets.len() < config.pool_size {
        let mut combo: Vec<f64> = (0..tail)
            .map(|_| config.distances[rng.gen_range(0..config.distances.len())])
            .collect();
        combo.sort_by(|a, b| a.partial_cmp(b).expect("finite distances"));
        sets.push(build_distances(&combo));
    }
    Ok(sets)
}

fn build_distances(tail: &[f64]) -> Vec<f64> {
    let mut d = Vec::with_capacity(tail.len() + 1);
    d.push(0.0);
    d.extend_from_slice(tail);
    d
}

/// All non-decreasing `len`-tuples over `set`, in lexicographic order.
fn distance_combinations(set: &[f64], len: usize) -> Vec<Vec<f64>> {
    let mut sorted = set.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).expect("finite distances"));
    sorted.dedup();
    let mut out = Vec::new();
    let mut current = Vec::with_capacity(len);
    enumerate_combos(&sorted, len, 0, &mut current, &mut out);
    out
}

fn enumerate_combos(
    set: &[f64],
    len: usize,
    from: usize,
    current: &mut Vec<f64>,
    out: &mut Vec<Vec<f64>>,
) {
    if current.len() == len {
        out.push(current.clone());
        return;
    }
    for i in from..set.len() {
        current.push(set[i]);
        enumerate_combos(set, len, i, current, out);
        current.pop();
    }
}

// ---------------------------------------------------------------------
// Scores
// ---------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScoreKind {
    Magnitude,
    Sensitivity,
}

/// One finite score per monomial in the current pool.
#[derive(Debug, Clone)]
pub struct PruningScore {
    values: Vec<f64>,
    kind: ScoreKind,
}

impl PruningScore {
    pub fn new(values: Vec<f64>, kind: ScoreKind) -> Result<Self> {
        if let Some(bad) = values.iter().find(|v| !v.is_finite()) {
            return Err(Error::numerical(format!(
                "pruning scores must be finite, got {bad}"
            )));
        }
        Ok(PruningScore { values, kind })
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn kind(&self) -> ScoreKind {
        self.kind
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

/// Mean absolute fan-out weight per monomial: for a dense layer
/// `[m * chunk, o]` whose row blocks of `chunk` rows belong to one
/// monomial each, `s_j = mean |w[j*chunk + k, l]|`.
pub fn magnitude_scores<T: Scalar>(w: &Tensor<T>, chunk: usize) -> Result<PruningScore> {
    let shape = w.shape();
    if shape.len() != 2 || chunk == 0 || shape[0] % chunk != 0 {
        return Err(Error::contract(format!(
            "magnitude scores need weights [m*{chunk}, o], got {shape:?}"
        )));
    }
    let (rows, o) = (shape[0], shape[1]);
    let m = rows / chunk;
    let norm = 1.0 / (chunk * o) as f64;
    let mut values = vec![0.0f64; m];
    for r in 0..rows {
        let j = r / chunk;
        for c in 0..o {
            values[j] += w.data()[r * o + c].tof().abs();
        }
    }
    for v in &mut values {
        *v *= norm;
    }
    PruningScore::new(values, ScoreKind::Magnitude)
}

/// Absolute loss sensitivity of the per-monomial gates: callers
/// accumulate the raw gate gradient over their data pass (summing batch
/// contributions) and convert it to ranking scores here.
pub fn sensitivity_scores<T: Scalar>(gate_grad: &Tensor<T>) -> Result<PruningScore> {
    if gate_grad.shape().len() != 1 {
        return Err(Error::contract(format!(
            "gate gradient must be a vector, got {:?}",
            gate_grad.shape()
        )));
    }
    PruningScore::new(
        gate_grad.data().iter().map(|v| v.tof().abs()).collect(),
        ScoreKind::Sensitivity,
    )
}

// ---------------------------------------------------------------------
// Subset selection
// ---------------------------------------------------------------------

/// Seeded uniform subset of `k` out of `pool` indices, ascending.
pub fn select_random(pool: usize, k: usize, seed: u64) -> Result<Vec<usize>> {
    if k > pool {
        return Err(Error::contract(format!(
            "cannot select {k} monomials from a pool of {pool}"
        )));
    }
    let mut rng: Rng = rng_from_seed(split_seed(seed, "random-selection"));
    let mut indices: Vec<usize> = (0..pool).collect();
    // Partial Fisher-Yates: the first k slots become the sample.
    for i in 0..k {
        let j = rng.gen_range(i..pool);
        indices.swap(i, j);
    }
    let mut chosen = indices[..k].to_vec();
    chosen.sort_unstable();
    Ok(chosen)
}

/// Indices of the `k` highest scores, ties broken by lower index;
/// returned ascending.
pub fn top_k_indices(score: &PruningScore, k: usize) -> Result<Vec<usize>> {
    if k > score.len() {
        return Err(Error::contract(format!(
            "cannot keep {k} monomials out of {}",
            score.len()
        )));
    }
    let mut order: Vec<usize> = (0..score.len()).collect();
    order.sort_by(|&a, &b| {
        score.values[b]
            .partial_cmp(&score.values[a])
            .expect("finite scores")
            .then(a.cmp(&b))
    });
    let mut chosen = order[..k].to_vec();
    chosen.sort_unstable();
    Ok(chosen)
}

// ---------------------------------------------------------------------
// Survivor bookkeeping
// ---------------------------------------------------------------------

/// Copy the row blocks of the kept monomials (ascending `keep` order)
/// out of a dense layer `[m * chunk, o]`, bitwise.
pub fn keep_monomial_rows<T: Scalar>(
    w: &Tensor<T>,
    keep: &[usize],
    chunk: usize,
) -> Result<Tensor<T>> {
    let shape = w.shape();
    if shape.len() != 2 || chunk == 0 || shape[0] % chunk != 0 {
        return Err(Error::contract(format!(
            "weight shrink needs [m*{chunk}, o], got {shape:?}"
        )));
    }
    let (rows, o) = (shape[0], shape[1]);
    let m = rows / chunk;
    if let Some(&bad) = keep.iter().find(|&&j| j >= m) {
        return Err(Error::contract(format!(
            "kept monomial index {bad} out of range for pool of {m}"
        )));
    }
    let mut out = Tensor::zeros(vec![keep.len() * chunk, o]);
    for (slot, &j) in keep.iter().enumerate() {
        let src = &w.data()[j * chunk * o..(j + 1) * chunk * o];
        out.data_mut()[slot * chunk * o..(slot + 1) * chunk * o].copy_from_slice(src);
    }
    Ok(out)
}

/// Checksum of the row blocks of the given monomials inside a dense
/// layer `[m * chunk, o]`; equality across a pruning boundary proves the
/// survivors were carried over bitwise.
pub fn weight_checksum<T: Scalar>(w: &Tensor<T>, monomials: &[usize], chunk: usize) -> u64 {
    let o = if w.shape().len() == 2 { w.shape()[1] } else { 0 };
    let mut bytes = Vec::with_capacity(monomials.len() * chunk * o * 8);
    for &j in monomials {
        for &v in &w.data()[j * chunk * o..(j + 1) * chunk * o] {
            v.write_le(&mut bytes);
        }
    }
    fnv1a_bytes(&bytes)
}

// ---------------------------------------------------------------------
// Sidecar export
// ---------------------------------------------------------------------

/// One selected monomial as exported for audit and re-use.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectedMonomial {
    /// Index in the original pool.
    pub origin: usize,
    pub distances: Vec<f64>,
    pub exponents: Vec<f64>,
    pub score: f64,
}

/// The sidecar document listing the surviving monomials in pool order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct SelectionSidecar {
    pub monomial: Vec<SelectedMonomial>,
}

impl SelectionSidecar {
    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self)
            .map_err(|e| Error::contract(format!("sidecar serialization failed: {e}")))
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::format(0, format!("invalid sidecar: {e}")))
    }
}

// ---------------------------------------------------------------------
// Selection orchestration
// ---------------------------------------------------------------------

/// Everything a finished selection produces: the final model built
/// around the surviving monomials, its parameters, the audit sidecar,
/// the pool size after every step, the training metrics of all
/// segments (epochs numbered consecutively across segments), and one
/// checksum pair per pruning boundary — survivors' fan-out rows before
/// vs. after the shrink, equal when continuity held.
pub struct SelectionOutcome<T: Scalar> {
    pub model: Model,
    pub params: ParamSet<T>,
    pub sidecar: SelectionSidecar,
    pub pool_log: Vec<usize>,
    pub history: Vec<MetricRow>,
    pub continuity: Vec<(u64, u64)>,
}

/// Run a complete monomial selection for `base` with its head replaced
/// by the candidate pool.
///
/// Random selection draws the subset up front and builds the final
/// model directly, without any training. Magnitude and connectivity
/// follow the schedule: optionally pre-train, then per step train the
/// step's epochs, score the pool, keep the top monomials, and rebuild
/// the model around the survivors with their fan-out weights (and all
/// other parameters) carried over bitwise. Training segments derive
/// their seeds from the train config's seed and the segment index; no
/// training happens after the final shrink.
pub fn run_selection<T: Scalar>(
    base: &ModelConfig,
    selection: &SelectionConfig,
    train_config: &TrainConfig,
    data: &Dataset<T>,
    test: Option<&Dataset<T>>,
    model_seed: u64,
) -> Result<SelectionOutcome<T>> {
    let per_channel = match &base.head {
        HeadSpec::Monomial { per_channel, .. } => *per_channel,
        _ => true,
    };
    let pool_sets = pool_distance_sets(selection)?;

    if selection.algorithm == Algorithm::Random {
        let origins = select_random(selection.pool_size, selection.target, selection.seed)?;
        let kept: Vec<Vec<f64>> = origins.iter().map(|&j| pool_sets[j].clone()).collect();
        let config = monomial_config(base, kept, per_channel);
        let mut params = ParamSet::new();
        let model = build_model(&config, &mut params, model_seed)?;
        let scores = vec![0.0; origins.len()];
        let sidecar = export_sidecar(&model, &params, &origins, &scores)?;
        return Ok(SelectionOutcome {
            model,
            params,
            sidecar,
            pool_log: vec![selection.pool_size, selection.target],
            history: Vec::new(),
            continuity: Vec::new(),
        });
    }

    let schedule = selection.effective_schedule(train_config.epochs)?;
    let config = monomial_config(base, pool_sets.clone(), per_channel);
    let mut params = ParamSet::new();
    let mut model = build_model(&config, &mut params, model_seed)?;
    let mut origins: Vec<usize> = (0..selection.pool_size).collect();
    let mut pool_log = vec![selection.pool_size];
    let mut history = Vec::new();
    let mut continuity = Vec::new();
    let mut kept_scores = vec![0.0f64; selection.pool_size];
    let mut segment = Segments::default();

    if selection.pretrain_epochs > 0 {
        segment.run(
            &model,
            &mut params,
            data,
            test,
            train_config,
            selection.pretrain_epochs,
            &mut history,
        )?;
    }
    for (step, &(epochs, keep)) in schedule.iter().enumerate() {
        if epochs > 0 {
            segment.run(&model, &mut params, data, test, train_config, epochs, &mut history)?;
        }
        let score = match selection.algorithm {
            Algorithm::Magnitude => {
                let (w_id, chunk) = monomial_gate_layout(&model, &params)?;
                magnitude_scores(params.get(w_id), chunk)?
            }
            Algorithm::Connectivity => {
                connectivity_scores(&model, &params, data, train_config.batch_size)?
            }
            Algorithm::Random => unreachable!("random selection returns early"),
        };
        let keep_idx = top_k_indices(&score, keep)?;
        kept_scores = keep_idx.iter().map(|&j| score.values()[j]).collect();
        let (next_model, next_params, checksums) = shrink_step(
            base,
            &params,
            &pool_sets,
            &mut origins,
            &keep_idx,
            per_channel,
            model_seed,
            step,
        )?;
        continuity.push(checksums);
        model = next_model;
        params = next_params;
        pool_log.push(keep);
    }
    let sidecar = export_sidecar(&model, &params, &origins, &kept_scores)?;
    Ok(SelectionOutcome {
        model,
        params,
        sidecar,
        pool_log,
        history,
        continuity,
    })
}

/// Loss sensitivity of each monomial's fan-out, accumulated over one
/// deterministic full pass of `data`: with an all-ones gate on the row
/// blocks of the first dense layer, the gate's gradient equals the
/// inner product of the layer's loss gradient with its weights over
/// each block, so a plain backward pass suffices. Batch gradients of
/// the mean loss are combined with weights `batch_len / n`, making the
/// result the exact full-data mean regardless of batch size; absolute
/// values are taken only at the end.
pub fn connectivity_scores<T: Scalar>(
    model: &Model,
    params: &ParamSet<T>,
    data: &Dataset<T>,
    batch_size: usize,
) -> Result<PruningScore> {
    if data.is_empty() {
        return Err(Error::contract("connectivity scoring needs data"));
    }
    if batch_size == 0 {
        return Err(Error::contract("connectivity scoring needs a positive batch size"));
    }
    let (w_id, chunk) = monomial_gate_layout(model, params)?;
    let w = params.get(w_id);
    let (rows, cols) = (w.shape()[0], w.shape()[1]);
    let n = data.len();
    let mut acc = vec![0.0f64; rows * cols];
    let indices: Vec<usize> = (0..n).collect();
    for batch_indices in indices.chunks(batch_size) {
        let batch = data.batch(batch_indices)?;
        let targets: Vec<usize> = batch_indices.iter().map(|&i| data.labels[i]).collect();
        let mut g = Graph::new();
        let logits = model.record_logits(&mut g, params, batch, Phase::Eval)?;
        let loss = g.cross_entropy_mean(logits, &targets)?;
        let grads = g.backward(loss)?;
        let by_param = g.param_gradients(&grads);
        let gw = by_param.get(&w_id).ok_or_else(|| {
            Error::numerical("first dense layer received no gradient during scoring")
        })?;
        let weight = batch_indices.len() as f64 / n as f64;
        for (a, &v) in acc.iter_mut().zip(gw.data()) {
            *a += v.tof() * weight;
        }
    }
    let mut values = vec![0.0f64; rows / chunk];
    for r in 0..rows {
        for c in 0..cols {
            values[r / chunk] += acc[r * cols + c] * w.data()[r * cols + c].tof();
        }
    }
    for v in &mut values {
        *v = v.abs();
    }
    PruningScore::new(values, ScoreKind::Sensitivity)
}

fn monomial_config(base: &ModelConfig, sets: Vec<Vec<f64>>, per_channel: bool) -> ModelConfig {
    let mut config = base.clone();
    config.head = HeadSpec::Monomial {
        distances: sets,
        per_channel,
        exponents: None,
    };
    config
}

/// The first dense layer and its per-monomial row-block size.
fn monomial_gate_layout<T: Scalar>(
    model: &Model,
    params: &ParamSet<T>,
) -> Result<(ParamId, usize)> {
    let head = model
        .monomial_head()
        .ok_or_else(|| Error::contract("selection needs a model with a monomial head"))?;
    let w_id = params
        .id_of("dense0.w")
        .ok_or_else(|| Error::contract("selection needs a dense layer after the head"))?;
    let rows = params.get(w_id).shape()[0];
    let m = head.specs.len();
    if m == 0 || rows % m != 0 {
        return Err(Error::contract(format!(
            "dense layer rows {rows} do not split over {m} monomials"
        )));
    }
    Ok((w_id, rows / m))
}

/// Rebuild the model around the kept monomials (ascending pool-local
/// indices), carrying every parameter over bitwise: the first dense
/// layer keeps only the survivors' row blocks, each kept exponent
/// vector moves to its new slot, and everything else copies by name.
/// Returns the survivor-rows checksum before and after the move.
#[allow(clippy::too_many_arguments)]
fn shrink_step<T: Scalar>(
    base: &ModelConfig,
    old_params: &ParamSet<T>,
    pool_sets: &[Vec<f64>],
    origins: &mut Vec<usize>,
    keep: &[usize],
    per_channel: bool,
    model_seed: u64,
    step: usize,
) -> Result<(Model, ParamSet<T>, (u64, u64))> {
    let old_w_id = old_params
        .id_of("dense0.w")
        .ok_or_else(|| Error::contract("selection needs a dense layer after the head"))?;
    let old_w = old_params.get(old_w_id);
    let chunk = old_w.shape()[0] / origins.len();
    let shrunk = keep_monomial_rows(old_w, keep, chunk)?;
    let before = weight_checksum(old_w, keep, chunk);

    *origins = keep.iter().map(|&j| origins[j]).collect();
    let sets: Vec<Vec<f64>> = origins.iter().map(|&j| pool_sets[j].clone()).collect();
    let config = monomial_config(base, sets, per_channel);
    let mut params = ParamSet::new();
    let model = build_model(
        &config,
        &mut params,
        split_seed_indexed(model_seed, "shrink", step as u64),
    )?;

    let names: Vec<(ParamId, String)> = params
        .iter()
        .map(|(id, entry)| (id, entry.name.clone()))
        .collect();
    for (id, name) in names {
        let source = if name == "dense0.w" {
            shrunk.clone()
        } else if let Some(rest) = name.strip_prefix("head.m") {
            let dot = rest
                .find('.')
                .ok_or_else(|| Error::contract(format!("unexpected head parameter `{name}`")))?;
            let slot: usize = rest[..dot]
                .parse()
                .map_err(|_| Error::contract(format!("unexpected head parameter `{name}`")))?;
            let old_name = format!("head.m{}{}", keep[slot], &rest[dot..]);
            let old_id = old_params
                .id_of(&old_name)
                .ok_or_else(|| Error::contract(format!("missing source parameter `{old_name}`")))?;
            old_params.get(old_id).clone()
        } else {
            let old_id = old_params
                .id_of(&name)
                .ok_or_else(|| Error::contract(format!("missing source parameter `{name}`")))?;
            old_params.get(old_id).clone()
        };
        if source.shape() != params.get(id).shape() {
            return Err(Error::contract(format!(
                "parameter `{name}` changed shape across a pruning step: {:?} vs {:?}",
                params.get(id).shape(),
                source.shape()
            )));
        }
        *params.get_mut(id) = source;
    }

    let new_w_id = params.id_of("dense0.w").expect("dense layer present");
    let all: Vec<usize> = (0..keep.len()).collect();
    let after = weight_checksum(params.get(new_w_id), &all, chunk);
    Ok((model, params, (before, after)))
}

fn export_sidecar<T: Scalar>(
    model: &Model,
    params: &ParamSet<T>,
    origins: &[usize],
    scores: &[f64],
) -> Result<SelectionSidecar> {
    let head = model
        .monomial_head()
        .ok_or_else(|| Error::contract("selection needs a model with a monomial head"))?;
    if head.specs.len() != origins.len() || origins.len() != scores.len() {
        return Err(Error::contract(
            "selection bookkeeping lost monomial alignment",
        ));
    }
    let monomial = head
        .specs
        .iter()
        .zip(origins.iter().zip(scores))
        .map(|(spec, (&origin, &score))| SelectedMonomial {
            origin,
            distances: spec.distances.clone(),
            exponents: params
                .get(spec.exponents)
                .data()
                .iter()
                .map(|v| v.tof())
                .collect(),
            score,
        })
        .collect();
    Ok(SelectionSidecar { monomial })
}

/// Numbers training segments so each gets an independent seed and the
/// metric rows continue the epoch count across segments.
#[derive(Default)]
struct Segments {
    index: u64,
    epoch_offset: usize,
}

impl Segments {
    #[allow(clippy::too_many_arguments)]
    fn run<T: Scalar>(
        &mut self,
        model: &Model,
        params: &mut ParamSet<T>,
        data: &Dataset<T>,
        test: Option<&Dataset<T>>,
        base: &TrainConfig,
        epochs: usize,
        history: &mut Vec<MetricRow>,
    ) -> Result<()> {
        let mut config = base.clone();
        config.epochs = epochs;
        config.seed = split_seed_indexed(base.seed, "selection-segment", self.index);
        self.index += 1;
        let outcome = train(model, params, data, test, &config, None)?;
        if let Some(reason) = outcome.diverged {
            return Err(Error::numerical(format!(
                "selection training diverged: {reason}"
            )));
        }
        for mut row in outcome.history {
            row.epoch += self.epoch_offset;
            history.push(row);
        }
        self.epoch_offset += outcome.completed_epochs;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn config(pool: usize, target: usize, init: InitMode) -> SelectionConfig {
        SelectionConfig {
            pool_size: pool,
            target,
            init,
            algorithm: Algorithm::Magnitude,
            factors: 2,
            distances: vec![0.0, 1.0, 2.0],
            pretrain_epochs: 0,
            schedule: Vec::new(),
            keep_fraction: 0.5,
            seed: 7,
        }
    }

    fn random_weights(m: usize, chunk: usize, o: usize, seed: u64) -> Tensor<f64> {
        let mut rng = rng_from_seed(seed);
        Tensor::new(
            vec![m * chunk, o],
            (0..m * chunk * o).map(|_| rng.gen_range(-1.0..1.0)).collect(),
        )
        .unwrap()
    }

    #[test]
    fn catalog_pool_covers_every_distance_combination() {
        let mut params = ParamSet::<f64>::new();
        let group = CyclicRotationGroup::new(4).unwrap();
        let head = init_pool(&mut params, "pool", &config(5, 2, InitMode::Catalog), group)
            .unwrap();
        assert_eq!(head.specs.len(), 5);
        for want in [vec![0.0, 0.0], vec![0.0, 1.0], vec![0.0, 2.0]] {
            assert!(
                head.specs.iter().any(|s| s.distances == want),
                "missing combination {want:?}"
            );
        }
        for spec in &head.specs {
            assert_eq!(spec.distances[0], 0.0);
            assert_eq!(spec.distances.len(), 2);
        }
    }

    #[test]
    fn catalog_overflowing_the_pool_is_rejected() {
        let mut params = ParamSet::<f64>::new();
        let group = CyclicRotationGroup::new(4).unwrap();
        let err = init_pool(&mut params, "pool", &config(2, 1, InitMode::Catalog), group);
        assert!(err.is_err());
    }

    #[test]
    fn single_distance_single_factor_pool_is_the_center_monomial() {
        let mut params = ParamSet::<f64>::new();
        let group = CyclicRotationGroup::new(4).unwrap();
        let mut cfg = config(1, 1, InitMode::Random);
        cfg.factors = 1;
        cfg.distances = vec![0.0];
        let head = init_pool(&mut params, "pool", &cfg, group).unwrap();
        assert_eq!(head.specs.len(), 1);
        assert_eq!(head.specs[0].distances, vec![0.0]);
    }

    #[test]
    fn fixed_seed_reproduces_the_identical_pool() {
        let group = CyclicRotationGroup::new(8).unwrap();
        let cfg = config(6, 2, InitMode::Random);
        let mut pa = ParamSet::<f64>::new();
        let ha = init_pool(&mut pa, "pool", &cfg, group).unwrap();
        let mut pb = ParamSet::<f64>::new();
        let hb = init_pool(&mut pb, "pool", &cfg, group).unwrap();
        for (a, b) in ha.specs.iter().zip(&hb.specs) {
            assert_eq!(a.distances, b.distances);
            assert_eq!(
                pa.get(a.exponents).data(),
                pb.get(b.exponents).data(),
                "exponents must be reproducible"
            );
        }
        let mut pc = ParamSet::<f64>::new();
        let mut other = cfg.clone();
        other.seed = 8;
        let hc = init_pool(&mut pc, "pool", &other, group).unwrap();
        let differs = ha
            .specs
            .iter()
            .zip(&hc.specs)
            .any(|(a, c)| pa.get(a.exponents).data() != pc.get(c.exponents).data());
        assert!(differs, "a different seed must change the pool");
    }

    #[test]
    fn random_subset_is_deterministic_and_bounded() {
        assert_eq!(select_random(5, 5, 3).unwrap(), vec![0, 1, 2, 3, 4]);
        assert_eq!(select_random(5, 0, 3).unwrap(), Vec::<usize>::new());
        assert!(select_random(3, 4, 3).is_err());
        let a = select_random(20, 7, 11).unwrap();
        let b = select_random(20, 7, 11).unwrap();
        assert_eq!(a, b);
        assert!(a.windows(2).all(|w| w[0] < w[1]), "sorted unique: {a:?}");
        assert!(a.iter().all(|&i| i < 20));
        let c = select_random(20, 7, 12).unwrap();
        assert_ne!(a, c, "different seeds should give different subsets");
    }

    #[test]
    fn magnitude_scores_match_double_loop_oracle() {
        let (m, chunk, o) = (6, 3, 4);
        let w = random_weights(m, chunk, o, 21);
        let scores = magnitude_scores(&w, chunk).unwrap();
        assert_eq!(scores.len(), m);
        for j in 0..m {
            let mut acc = 0.0;
            for k in 0..chunk {
                for l in 0..o {
                    acc += w.at(&[j * chunk + k, l]).abs();
                }
            }
            let oracle = acc / (chunk * o) as f64;
            assert!((scores.values()[j] - oracle).abs() < 1e-12);
        }
    }

    #[test]
    fn uniform_weights_score_their_absolute_value() {
        let w = Tensor::<f64>::full(vec![8, 3], -0.75);
        let scores = magnitude_scores(&w, 2).unwrap();
        for &s in scores.values() {
            assert!((s - 0.75).abs() < 1e-15);
        }
    }

    #[test]
    fn zeroed_monomial_scores_zero_and_ranks_last() {
        let mut w = random_weights(4, 2, 3, 23);
        for r in 2..4 {
            for c in 0..3 {
                *w.at_mut(&[r, c]) = 0.0;
            }
        }
        let scores = magnitude_scores(&w, 2).unwrap();
        assert_eq!(scores.values()[1], 0.0);
        let kept = top_k_indices(&scores, 3).unwrap();
        assert!(!kept.contains(&1), "zeroed monomial must be pruned: {kept:?}");
    }

    #[test]
    fn scores_are_permutation_equivariant() {
        let (m, chunk, o) = (5, 2, 3);
        let w = random_weights(m, chunk, o, 25);
        let base = magnitude_scores(&w, chunk).unwrap();
        let perm = [3usize, 0, 4, 1, 2];
        let mut shuffled = Tensor::<f64>::zeros(vec![m * chunk, o]);
        for (slot, &src) in perm.iter().enumerate() {
            for k in 0..chunk {
                for c in 0..o {
                    *shuffled.at_mut(&[slot * chunk + k, c]) = w.at(&[src * chunk + k, c]);
                }
            }
        }
        let permuted = magnitude_scores(&shuffled, chunk).unwrap();
        for (slot, &src) in perm.iter().enumerate() {
            assert!((permuted.values()[slot] - base.values()[src]).abs() < 1e-15);
        }
    }

    #[test]
    fn scaling_weights_scales_scores_but_not_the_selection() {
        let w = random_weights(6, 2, 3, 27);
        let scaled = w.map(|v| v * 3.5);
        let a = magnitude_scores(&w, 2).unwrap();
        let b = magnitude_scores(&scaled, 2).unwrap();
        for (x, y) in a.values().iter().zip(b.values()) {
            assert!((y - x * 3.5).abs() < 1e-12);
        }
        assert_eq!(
            top_k_indices(&a, 3).unwrap(),
            top_k_indices(&b, 3).unwrap()
        );
    }

    #[test]
    fn top_k_breaks_ties_by_lower_index() {
        let s = PruningScore::new(vec![3.0, 1.0, 4.0, 2.0], ScoreKind::Magnitude).unwrap();
        assert_eq!(top_k_indices(&s, 2).unwrap(), vec![0, 2]);
        let tied = PruningScore::new(vec![1.0, 1.0, 1.0, 1.0], ScoreKind::Magnitude).unwrap();
        assert_eq!(top_k_indices(&tied, 2).unwrap(), vec![0, 1]);
        assert!(top_k_indices(&s, 5).is_err());
    }

    #[test]
    fn non_finite_scores_are_rejected() {
        assert!(PruningScore::new(vec![1.0, f64::NAN], ScoreKind::Magnitude).is_err());
        assert!(PruningScore::new(vec![f64::INFINITY], ScoreKind::Sensitivity).is_err());
    }

    #[test]
    fn kept_rows_survive_bitwise_with_matching_checksums() {
        let w = random_weights(5, 3, 4, 29);
        let keep = vec![0usize, 2, 4];
        let before = weight_checksum(&w, &keep, 3);
        let shrunk = keep_monomial_rows(&w, &keep, 3).unwrap();
        assert_eq!(shrunk.shape(), &[9, 4]);
        let after = weight_checksum(&shrunk, &[0, 1, 2], 3);
        assert_eq!(before, after);
        for (slot, &j) in keep.iter().enumerate() {
            for k in 0..3 {
                for c in 0..4 {
                    assert_eq!(shrunk.at(&[slot * 3 + k, c]), w.at(&[j * 3 + k, c]));
                }
            }
        }
        assert!(keep_monomial_rows(&w, &[5], 3).is_err());
    }

    #[test]
    fn schedule_validation_enforces_strict_decrease_to_target() {
        validate_schedule(&[(0, 50)], 50, 50).unwrap();
        validate_schedule(&[(10, 25), (5, 5)], 50, 5).unwrap();
        assert!(validate_schedule(&[], 50, 5).is_err());
        assert!(validate_schedule(&[(10, 25), (5, 25)], 50, 5).is_err());
        assert!(validate_schedule(&[(10, 60)], 50, 5).is_err());
        assert!(validate_schedule(&[(10, 25)], 50, 5).is_err());
    }

    #[test]
    fn derived_schedule_halves_the_pool_down_to_the_target() {
        let schedule = schedule_from_fraction(50, 5, 0.5, 10).unwrap();
        let keeps: Vec<usize> = schedule.iter().map(|&(_, k)| k).collect();
        assert_eq!(keeps, vec![25, 12, 6, 5]);
        assert!(schedule.iter().all(|&(e, _)| e == 10));
        validate_schedule(&schedule, 50, 5).unwrap();
        let noop = schedule_from_fraction(8, 8, 0.5, 3).unwrap();
        assert_eq!(noop, vec![(3, 8)]);
    }

    #[test]
    fn sensitivity_scores_take_absolute_values() {
        let g = Tensor::<f64>::new(vec![3], vec![-2.0, 0.5, -0.25]).unwrap();
        let s = sensitivity_scores(&g).unwrap();
        assert_eq!(s.values(), &[2.0, 0.5, 0.25]);
        assert_eq!(s.kind(), ScoreKind::Sensitivity);
    }

    #[test]
    fn sidecar_round_trips_through_toml() {
        let sidecar = SelectionSidecar {
            monomial: vec![
                SelectedMonomial {
                    origin: 4,
                    distances: vec![0.0, 1.0],
                    exponents: vec![1.25, 0.5],
                    score: 0.75,
                },
                SelectedMonomial {
                    origin: 7,
                    distances: vec![0.0, 2.0, 2.0],
                    exponents: vec![0.1, 0.2, 0.3],
                    score: 0.5,
                },
            ],
        };
        let text = sidecar.to_toml().unwrap();
        let parsed = SelectionSidecar::from_toml(&text).unwrap();
        assert_eq!(parsed, sidecar);
        assert!(SelectionSidecar::from_toml("monomial = 3").is_err());
    }

    use crate::data::synth_shapes;
    use crate::model::{Backbone, ConvSpec};
    use crate::params::{uniform_init, Regularization};
    use crate::train::{Augment, DecaySpec, OptimizerKind};

    fn tiny_base() -> ModelConfig {
        ModelConfig {
            image_size: 8,
            classes: 2,
            n_alpha: 4,
            n_f: 4,
            kernel_size: 3,
            conv: vec![ConvSpec {
                channels: 2,
                pool: false,
            }],
            backbone: Backbone::Equivariant,
            channel_rescale: false,
            head: HeadSpec::Monomial {
                distances: Vec::new(),
                per_channel: true,
                exponents: None,
            },
            // Head straight into the classifier: no hidden relu whose
            // dead zone could cut the gradient in a tiny random model.
            dense: Vec::new(),
            dropout: 0.0,
        }
    }

    fn tiny_train(epochs: usize) -> TrainConfig {
        TrainConfig {
            optimizer: OptimizerKind::Adam,
            learning_rate: 1e-3,
            decay: DecaySpec::None,
            batch_size: 6,
            epochs,
            elastic_net_factor: 1e-7,
            weight_decay: 0.0,
            regularization_constant: 1.0,
            augment: Augment::None,
            momentum: 0.9,
            seed: 5,
        }
    }

    fn selection(
        pool: usize,
        target: usize,
        algorithm: Algorithm,
        schedule: Vec<(usize, usize)>,
    ) -> SelectionConfig {
        SelectionConfig {
            pool_size: pool,
            target,
            init: InitMode::Random,
            algorithm,
            factors: 2,
            distances: vec![1.0, 2.0],
            pretrain_epochs: 0,
            schedule,
            keep_fraction: 0.5,
            seed: 11,
        }
    }

    #[test]
    fn gate_gradient_matches_blockwise_inner_product_of_plain_gradient() {
        // At an all-ones gate, the gate's gradient through a gated dense
        // layer must equal the blockwise inner product of the plain
        // (ungated) weight gradient with the weights — the identity the
        // connectivity shortcut relies on.
        let mut params = ParamSet::<f64>::new();
        let mut rng = rng_from_seed(3);
        let w_id = params
            .add("w", uniform_init(&mut rng, &[6, 3], 0.5), Regularization::None)
            .unwrap();
        let c_id = params
            .add(
                "c",
                Tensor::new(vec![2], vec![1.0, 1.0]).unwrap(),
                Regularization::None,
            )
            .unwrap();
        let x: Tensor<f64> = uniform_init(&mut rng, &[4, 6], 1.0);
        let targets = [0usize, 2, 1, 1];

        let mut g = Graph::new();
        let wn = g.param(&params, w_id);
        let cn = g.param(&params, c_id);
        let gated = g.row_group_scale(wn, cn, 3).unwrap();
        let xn = g.constant(x.clone());
        let logits = g.matmul(xn, gated).unwrap();
        let loss = g.cross_entropy_mean(logits, &targets).unwrap();
        let grads = g.backward(loss).unwrap();
        let gate_grad = g.param_gradients(&grads).remove(&c_id).unwrap();

        let mut g = Graph::new();
        let wn = g.param(&params, w_id);
        let xn = g.constant(x);
        let logits = g.matmul(xn, wn).unwrap();
        let loss = g.cross_entropy_mean(logits, &targets).unwrap();
        let grads = g.backward(loss).unwrap();
        let w_grad = g.param_gradients(&grads).remove(&w_id).unwrap();

        let w = params.get(w_id);
        for j in 0..2 {
            let mut dot = 0.0;
            for r in j * 3..(j + 1) * 3 {
                for c in 0..3 {
                    dot += w_grad.data()[r * 3 + c] * w.data()[r * 3 + c];
                }
            }
            assert!(
                (dot - gate_grad.data()[j]).abs() <= 1e-12,
                "block {j}: {dot} vs {}",
                gate_grad.data()[j]
            );
        }
    }

    #[test]
    fn noop_shrink_rebuilds_the_identical_model() {
        // A schedule that keeps the whole pool must reproduce the
        // original parameters bitwise through the rebuild.
        let base = tiny_base();
        let config = selection(3, 3, Algorithm::Magnitude, vec![(0, 3)]);
        let data = synth_shapes::<f64>(8, 8, 2, 99).unwrap();
        let outcome =
            run_selection(&base, &config, &tiny_train(1), &data, None, 21).unwrap();

        assert_eq!(outcome.pool_log, vec![3, 3]);
        assert_eq!(outcome.continuity.len(), 1);
        assert_eq!(outcome.continuity[0].0, outcome.continuity[0].1);
        let origins: Vec<usize> = outcome.sidecar.monomial.iter().map(|m| m.origin).collect();
        assert_eq!(origins, vec![0, 1, 2]);

        let sets = pool_distance_sets(&config).unwrap();
        let mut expected_params = ParamSet::<f64>::new();
        build_model(
            &monomial_config(&base, sets, true),
            &mut expected_params,
            21,
        )
        .unwrap();
        for (_, entry) in expected_params.iter() {
            let id = outcome
                .params
                .id_of(&entry.name)
                .unwrap_or_else(|| panic!("missing parameter {}", entry.name));
            assert_eq!(
                outcome.params.get(id).data(),
                entry.value.data(),
                "parameter {} changed across a no-op shrink",
                entry.name
            );
        }
    }

    #[test]
    fn magnitude_schedule_shrinks_stepwise_with_checksum_continuity() {
        let base = tiny_base();
        let config = selection(6, 2, Algorithm::Magnitude, vec![(1, 4), (1, 2)]);
        let data = synth_shapes::<f32>(12, 8, 2, 7).unwrap();
        let outcome =
            run_selection(&base, &config, &tiny_train(1), &data, None, 21).unwrap();

        assert_eq!(outcome.pool_log, vec![6, 4, 2]);
        assert_eq!(outcome.continuity.len(), 2);
        for (i, &(before, after)) in outcome.continuity.iter().enumerate() {
            assert_eq!(before, after, "survivor weights moved at step {i}");
        }
        let pool = pool_distance_sets(&config).unwrap();
        assert_eq!(outcome.sidecar.monomial.len(), 2);
        let origins: Vec<usize> = outcome.sidecar.monomial.iter().map(|m| m.origin).collect();
        assert!(origins.windows(2).all(|w| w[0] < w[1]));
        for m in &outcome.sidecar.monomial {
            assert!(m.origin < 6);
            assert_eq!(m.distances, pool[m.origin]);
            assert!(m.score.is_finite());
        }
        // Two one-epoch segments, numbered consecutively.
        let epochs: Vec<usize> = outcome.history.iter().map(|r| r.epoch).collect();
        assert_eq!(epochs, vec![1, 2]);
    }

    #[test]
    fn connectivity_selection_is_deterministic() {
        let base = tiny_base();
        let mut config = selection(4, 2, Algorithm::Connectivity, vec![(1, 2)]);
        config.pretrain_epochs = 1;
        let data = synth_shapes::<f32>(10, 8, 2, 3).unwrap();
        let a = run_selection(&base, &config, &tiny_train(1), &data, None, 13).unwrap();
        let b = run_selection(&base, &config, &tiny_train(1), &data, None, 13).unwrap();
        assert_eq!(a.sidecar, b.sidecar);
        let wa = a.params.id_of("dense0.w").unwrap();
        let wb = b.params.id_of("dense0.w").unwrap();
        assert_eq!(a.params.get(wa).data(), b.params.get(wb).data());
        assert_eq!(a.pool_log, vec![4, 2]);
    }

    #[test]
    fn random_selection_builds_directly_without_training() {
        let base = tiny_base();
        let config = selection(5, 2, Algorithm::Random, Vec::new());
        let data = synth_shapes::<f32>(6, 8, 2, 1).unwrap();
        let outcome =
            run_selection(&base, &config, &tiny_train(1), &data, None, 17).unwrap();

        assert!(outcome.history.is_empty());
        assert!(outcome.continuity.is_empty());
        assert_eq!(outcome.pool_log, vec![5, 2]);
        let origins: Vec<usize> = outcome.sidecar.monomial.iter().map(|m| m.origin).collect();
        assert_eq!(origins, select_random(5, 2, config.seed).unwrap());
        assert!(outcome.sidecar.monomial.iter().all(|m| m.score == 0.0));
        assert_eq!(outcome.model.monomial_head().unwrap().specs.len(), 2);
    }

    #[test]
    fn zeroed_fanout_block_has_zero_connectivity_score() {
        let base = tiny_base();
        let config = selection(3, 2, Algorithm::Connectivity, Vec::new());
        let sets = pool_distance_sets(&config).unwrap();
        let mut params = ParamSet::<f64>::new();
        let model = build_model(&monomial_config(&base, sets, true), &mut params, 9).unwrap();
        let data = synth_shapes::<f64>(10, 8, 2, 5).unwrap();

        let (w_id, chunk) = monomial_gate_layout(&model, &params).unwrap();
        let cols = params.get(w_id).shape()[1];
        for v in &mut params.get_mut(w_id).data_mut()[chunk * cols..2 * chunk * cols] {
            *v = 0.0;
        }
        let score = connectivity_scores(&model, &params, &data, 5).unwrap();
        assert_eq!(score.len(), 3);
        assert_eq!(score.values()[1], 0.0);
        assert!(score.values()[0] > 0.0 && score.values()[2] > 0.0);
    }

    #[test]
    fn connectivity_scores_do_not_depend_on_batch_size() {
        // Per-batch mean-loss gradients are reweighted by batch-size /
        // n, so any batching must accumulate to the same full-data
        // score.
        let base = tiny_base();
        let config = selection(3, 2, Algorithm::Connectivity, Vec::new());
        let sets = pool_distance_sets(&config).unwrap();
        let mut params = ParamSet::<f64>::new();
        let model = build_model(&monomial_config(&base, sets, true), &mut params, 9).unwrap();
        let data = synth_shapes::<f64>(10, 8, 2, 5).unwrap();

        let small = connectivity_scores(&model, &params, &data, 3).unwrap();
        let whole = connectivity_scores(&model, &params, &data, 10).unwrap();
        for (a, b) in small.values().iter().zip(whole.values()) {
            assert!((a - b).abs() <= 1e-10, "batching changed the score: {a} vs {b}");
        }
    }
}
