//! One function per subcommand. Every function is deterministic under
//! its flags, the config document, and the input files; all artifacts
//! (checkpoints, metrics CSVs, sidecars, summaries) are byte-stable.

use std::path::{Path, PathBuf};

use rinv_core::autodiff::Graph;
use rinv_core::checkpoint;
use rinv_core::data::{fraction_count, save_idx, stratified_subset, synth_shapes, Dataset};
use rinv_core::model::{build_model, HeadSpec, Model, ModelConfig, Phase};
use rinv_core::params::ParamSet;
use rinv_core::rng::split_seed;
use rinv_core::selection::{run_selection, Algorithm, SelectionOutcome};
use rinv_core::train::{evaluate, iteration_budget, metrics_csv, mte, train, Split};
use rinv_core::verify::{parse_suites, run_suite};
use rinv_core::{Error, Result, Scalar, Tensor};

use crate::config::RunConfig;

/// Exit status carried back to `main`; errors map separately.
pub const EXIT_OK: i32 = 0;
pub const EXIT_VERIFY_FAILED: i32 = 4;

// ---------------------------------------------------------------------
// gen-data
// ---------------------------------------------------------------------

pub fn gen_data(out: &Path, n: usize, size: usize, classes: usize, seed: u64) -> Result<i32> {
    if n == 0 {
        return Err(Error::config("--n must be positive"));
    }
    let data = synth_shapes::<f32>(n, size, classes, seed)?;
    std::fs::create_dir_all(out)
        .map_err(|e| Error::config(format!("cannot create {}: {e}", out.display())))?;
    save_idx(&data, &out.join("images.idx"), &out.join("labels.idx"))?;
    println!(
        "wrote {} images of {size}x{size} to {}",
        data.len(),
        out.display()
    );
    for (class, count) in data.class_counts().iter().enumerate() {
        println!("class {class}: {count}");
    }
    Ok(EXIT_OK)
}

// ---------------------------------------------------------------------
// train
// ---------------------------------------------------------------------

fn parse_seed_list(s: &str) -> Result<Vec<u64>> {
    let seeds: Vec<u64> = s
        .split(',')
        .map(|part| {
            part.trim()
                .parse()
                .map_err(|_| Error::config(format!("--seed expects integers, got {part:?}")))
        })
        .collect::<Result<_>>()?;
    if seeds.is_empty() {
        return Err(Error::config("--seed needs at least one value"));
    }
    Ok(seeds)
}

/// Max relative logit deviation when the input rotates by each group
/// element, probed on a handful of test images.
fn logit_invariance_residual(
    model: &Model,
    params: &ParamSet<f32>,
    test: &Dataset<f32>,
) -> Result<f64> {
    let group = model.group();
    let (h, w) = test.image_size();
    let probes = test.len().min(8);
    let mut worst = 0.0f64;
    for i in 0..probes {
        let plane = Tensor::new(vec![1, h, w], test.plane(i).to_vec())?;
        let base = eval_logits(model, params, &plane)?;
        for k in 1..group.order() {
            let rotated = group.act_on_plane(k, &plane)?;
            let moved = eval_logits(model, params, &rotated)?;
            for (a, b) in moved.iter().zip(&base) {
                worst = worst.max((a - b).abs() / (b.abs() + 1e-8));
            }
        }
    }
    Ok(worst)
}

fn eval_logits(model: &Model, params: &ParamSet<f32>, plane: &Tensor<f32>) -> Result<Vec<f64>> {
    let shape = plane.shape().to_vec();
    let batch = Tensor::new(
        vec![1, shape[0], shape[1], shape[2]],
        plane.data().to_vec(),
    )?;
    let mut g = Graph::new();
    let logits = model.record_logits(&mut g, params, batch, Phase::Eval)?;
    Ok(g.value(logits).data().iter().map(|v| v.tof()).collect())
}

fn render_summary(
    errors: &[f64],
    seeds: &[u64],
    params: usize,
    invariance_residual: f64,
) -> String {
    let (mean, std) = mte(errors);
    let seed_list = seeds
        .iter()
        .map(|s| s.to_string())
        .collect::<Vec<_>>()
        .join(", ");
    format!(
        "mte = {mean:.6}\nstd = {std:.6}\nseeds = [{seed_list}]\nparams = {params}\ninvariance_residual = {invariance_residual:.3e}\n"
    )
}

pub fn cmd_train(
    config_path: &Path,
    seeds: &str,
    out_dir: &Path,
    subset: Option<f64>,
) -> Result<i32> {
    let config = RunConfig::load(config_path)?;
    let seeds = parse_seed_list(seeds)?;
    let canonical = config.canonical()?;
    std::fs::create_dir_all(out_dir)
        .map_err(|e| Error::config(format!("cannot create {}: {e}", out_dir.display())))?;
    std::fs::write(out_dir.join("config.toml"), &canonical)?;

    let (full_train, test) = config.data.load()?;
    let (train_data, full_size) = match subset {
        Some(fraction) => {
            let count = fraction_count(full_train.len(), fraction)?;
            let sub = stratified_subset(
                &full_train,
                count,
                split_seed(config.train.seed, "subset"),
            )?;
            let (epochs, _) = iteration_budget(
                sub.len(),
                config.train.batch_size,
                config.train.epochs,
                full_train.len(),
            )?;
            println!(
                "subset {}/{} images; {} nominal epochs stretch to {epochs}",
                sub.len(),
                full_train.len(),
                config.train.epochs
            );
            (sub, Some(full_train.len()))
        }
        None => (full_train, None),
    };

    let mut errors = Vec::new();
    let mut first: Option<(Model, ParamSet<f32>)> = None;
    for &seed in &seeds {
        let mut params = ParamSet::<f32>::new();
        let model = build_model(&config.model, &mut params, seed)?;
        let outcome = train(
            &model,
            &mut params,
            &train_data,
            Some(&test),
            &config.train,
            full_size,
        )?;
        if let Some(reason) = outcome.diverged {
            return Err(Error::numerical(format!("seed {seed}: {reason}")));
        }
        let final_error = outcome
            .history
            .iter()
            .rev()
            .find(|r| matches!(r.split, Split::Test))
            .map(|r| r.error)
            .unwrap_or(f64::NAN);
        println!(
            "seed {seed}: {} epochs, final test error {final_error:.4}",
            outcome.completed_epochs
        );
        std::fs::write(
            out_dir.join(format!("metrics-{seed}.csv")),
            metrics_csv(&outcome.history),
        )?;
        checkpoint::save(
            &params,
            &canonical,
            &out_dir.join(format!("checkpoint-{seed}.ckpt")),
        )?;
        errors.push(final_error);
        if first.is_none() {
            first = Some((model, params));
        }
    }

    let (model, params) = first.expect("at least one seed trains");
    let residual = logit_invariance_residual(&model, &params, &test)?;
    let summary = render_summary(
        &errors,
        &seeds,
        model.parameter_count(&params),
        residual,
    );
    std::fs::write(out_dir.join("summary.txt"), &summary)?;
    print!("{summary}");
    Ok(EXIT_OK)
}

// ---------------------------------------------------------------------
// prune
// ---------------------------------------------------------------------

pub fn cmd_prune(
    config_path: &Path,
    algorithm: Option<Algorithm>,
    pool: Option<usize>,
    target: Option<usize>,
    out_dir: &Path,
) -> Result<i32> {
    let mut config = RunConfig::load(config_path)?;
    let selection = config
        .selection
        .as_mut()
        .ok_or_else(|| Error::config("selection: section required by prune"))?;
    if let Some(algorithm) = algorithm {
        selection.algorithm = algorithm;
    }
    if let Some(pool) = pool {
        selection.pool_size = pool;
    }
    if let Some(target) = target {
        selection.target = target;
    }
    selection.validate().map_err(|e| match e {
        Error::Config(msg) => Error::config(format!("selection: {msg}")),
        other => other,
    })?;
    let selection = selection.clone();

    let (train_data, test) = config.data.load()?;
    let model_seed = split_seed(selection.seed, "prune-model");
    let outcome: SelectionOutcome<f32> = run_selection(
        &config.model,
        &selection,
        &config.train,
        &train_data,
        Some(&test),
        model_seed,
    )?;

    let pool_log = outcome
        .pool_log
        .iter()
        .map(|n| n.to_string())
        .collect::<Vec<_>>()
        .join(" -> ");
    println!("pool {pool_log}");
    for (step, (before, after)) in outcome.continuity.iter().enumerate() {
        println!(
            "weight continuity step {}: {}",
            step + 1,
            if before == after { "ok" } else { "BROKEN" }
        );
    }
    for m in &outcome.sidecar.monomial {
        println!(
            "monomial {} distances {:?} score {:.3e}",
            m.origin, m.distances, m.score
        );
    }
    if outcome.continuity.iter().any(|(b, a)| b != a) {
        return Err(Error::numerical(
            "surviving weights changed across a pruning step",
        ));
    }

    std::fs::create_dir_all(out_dir)
        .map_err(|e| Error::config(format!("cannot create {}: {e}", out_dir.display())))?;
    let sidecar_text = toml::to_string_pretty(&outcome.sidecar)
        .map_err(|e| Error::config(format!("cannot render sidecar: {e}")))?;
    std::fs::write(out_dir.join("sidecar.toml"), &sidecar_text)?;

    // The pruned config rebuilds the selected head exactly: explicit
    // distances and exponents, ready for cmd_train.
    config.model.head = HeadSpec::Monomial {
        distances: outcome
            .sidecar
            .monomial
            .iter()
            .map(|m| m.distances.clone())
            .collect(),
        per_channel: per_channel_of(&config.model),
        exponents: Some(
            outcome
                .sidecar
                .monomial
                .iter()
                .map(|m| m.exponents.clone())
                .collect(),
        ),
    };
    let pruned = config.canonical()?;
    std::fs::write(out_dir.join("pruned.toml"), &pruned)?;
    checkpoint::save(&outcome.params, &pruned, &out_dir.join("pruned.ckpt"))?;
    println!(
        "kept {} of {} monomials; artifacts in {}",
        outcome.sidecar.monomial.len(),
        selection.pool_size,
        out_dir.display()
    );
    Ok(EXIT_OK)
}

fn per_channel_of(model: &ModelConfig) -> bool {
    match &model.head {
        HeadSpec::Monomial { per_channel, .. } => *per_channel,
        _ => true,
    }
}

// ---------------------------------------------------------------------
// eval
// ---------------------------------------------------------------------

pub fn cmd_eval(checkpoints: &[PathBuf], data_dir: &Path) -> Result<i32> {
    if checkpoints.is_empty() {
        return Err(Error::config("--checkpoint needs at least one path"));
    }
    let mut errors = Vec::new();
    for path in checkpoints {
        if !path.exists() {
            return Err(Error::config(format!(
                "checkpoint {} does not exist",
                path.display()
            )));
        }
        let stored = checkpoint::load::<f32>(path)?;
        let config = RunConfig::parse(&stored.config_text)
            .map_err(|e| Error::config(format!("{}: embedded config: {e}", path.display())))?;
        let data = rinv_core::data::load_idx::<f32>(
            &data_dir.join("images.idx"),
            &data_dir.join("labels.idx"),
            config.data.classes(),
        )?;
        let mut params = ParamSet::new();
        let model = build_model(&config.model, &mut params, 0)?;
        stored.restore_into(&mut params)?;
        let (loss, error) = evaluate(&model, &params, &data, config.train.batch_size)?;
        println!("{}: loss {loss:.6} error {error:.6}", path.display());
        errors.push(error);
    }
    if errors.len() > 1 {
        let (mean, std) = mte(&errors);
        println!("mte = {mean:.6}\nstd = {std:.6}\nseeds = {}", errors.len());
    }
    Ok(EXIT_OK)
}

// ---------------------------------------------------------------------
// verify
// ---------------------------------------------------------------------

pub fn cmd_verify(suite: &str, n_alpha: Option<usize>, precision: &str) -> Result<i32> {
    if precision != "f64" {
        return Err(Error::config(format!(
            "the verification suites run in 64-bit arithmetic; --precision {precision} is not supported"
        )));
    }
    let mut all_passed = true;
    for suite in parse_suites(suite)? {
        let report = run_suite(suite, n_alpha)?;
        print!("{}", report.render());
        all_passed &= report.passed();
    }
    Ok(if all_passed { EXIT_OK } else { EXIT_VERIFY_FAILED })
}
