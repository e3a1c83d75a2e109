//! File-based pipeline commands behind the CLI: synth, train, eval, ablate,
//! reconstruct, gradcheck. Every command writes all of its artifacts under
//! the run directory and records them in a manifest; identical configs and
//! seeds produce byte-identical metric files.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::{RunConfig, SplitName};
use crate::data::{load_jsonl, save_jsonl, AnswerDay, Dataset, PredictionRecord, QueryRecord, Split};
use crate::embed::AblationSet;
use crate::error::{Error, Result};
use crate::eval::{key_for_split, score, EvalOptions, EvalReport};
use crate::model::{load_checkpoint, save_checkpoint, Checkpoint};
use crate::synth::{context_signal_tv, generate_world, sparsify};
use crate::train::{train, trainable_indices, EpochRow};

pub const DATASET_FILE: &str = "dataset.jsonl";
pub const TRUTH_FILE: &str = "truth.jsonl";
pub const ANSWER_KEY_FILE: &str = "answer_key.jsonl";
pub const BEST_CKPT_FILE: &str = "model_best.ckpt";
pub const LAST_CKPT_FILE: &str = "model_last.ckpt";
pub const LOSS_CURVE_FILE: &str = "loss_curve.csv";
pub const PREDICTIONS_FILE: &str = "predictions.jsonl";
pub const REPORT_FILE: &str = "report.json";
pub const ABLATION_FILE: &str = "ablation.json";
pub const COMPLETED_FILE: &str = "completed.jsonl";
pub const ALTERNATIVES_FILE: &str = "alternatives.jsonl";
pub const MANIFEST_FILE: &str = "manifest.json";

/// Record of one command run: configuration hash, seeds, inputs, and every
/// artifact written.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool_version: String,
    pub command: String,
    pub config_hash: String,
    pub seeds: ManifestSeeds,
    pub inputs: Vec<String>,
    pub outputs: Vec<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ManifestSeeds {
    pub run: u64,
    pub world: u64,
    pub sparsify: u64,
    pub training: u64,
}

fn manifest_seeds(cfg: &RunConfig) -> ManifestSeeds {
    ManifestSeeds {
        run: cfg.seed,
        world: cfg.world_seed(),
        sparsify: cfg.sparsify_seed(),
        training: cfg.training_seed(),
    }
}

fn write_manifest(
    out_dir: &Path,
    cfg: &RunConfig,
    command: &str,
    inputs: &[&Path],
    outputs: &[&str],
) -> Result<()> {
    let manifest = RunManifest {
        tool_version: env!("CARGO_PKG_VERSION").to_string(),
        command: command.to_string(),
        config_hash: cfg.hash(),
        seeds: manifest_seeds(cfg),
        inputs: inputs.iter().map(|p| p.display().to_string()).collect(),
        outputs: outputs.iter().map(|s| s.to_string()).collect(),
    };
    let text = serde_json::to_string_pretty(&manifest)?;
    fs::write(out_dir.join(MANIFEST_FILE), text + "\n")?;
    Ok(())
}

fn ensure_out_dir(out: &Path) -> Result<()> {
    fs::create_dir_all(out)
        .map_err(|e| Error::data(format!("cannot create out dir `{}`: {e}", out.display())))
}

// ---------------------------------------------------------------------------
// synth
// ---------------------------------------------------------------------------

/// Generate a world, sparsify it, and write the observed dataset, the ground
/// truth, and the hidden-visit answer key.
pub fn cmd_synth(cfg: &RunConfig, out_dir: &Path) -> Result<()> {
    cfg.validate()?;
    ensure_out_dir(out_dir)?;
    let world = generate_world(cfg)?;
    let sparse = sparsify(&world, &cfg.sparsify, cfg.sparsify_seed())?;
    sparse.observed.save(&out_dir.join(DATASET_FILE))?;
    world.truth.save(&out_dir.join(TRUTH_FILE))?;
    save_jsonl(&out_dir.join(ANSWER_KEY_FILE), &sparse.answer_key)?;
    write_manifest(
        out_dir,
        cfg,
        "synth",
        &[],
        &[DATASET_FILE, TRUTH_FILE, ANSWER_KEY_FILE],
    )?;

    let n_hidden: usize = sparse.answer_key.iter().map(|d| d.hidden.len()).sum();
    println!(
        "synth: {} users, {} days, {} places; {} observed days, {} hidden visits ({} days dropped)",
        world.truth.profiles.len(),
        cfg.world.days,
        world.truth.vocab.n_places(),
        sparse.observed.trajectories.len(),
        n_hidden,
        sparse.dropped_days,
    );
    println!("synth: mean observed hourly slots/day = {:.3}", sparse.mean_hourly_slots);
    for (arch, tv) in context_signal_tv(&world) {
        println!("synth: weekday/weekend signal for {arch}: tv = {tv:.3}");
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// train
// ---------------------------------------------------------------------------

fn write_loss_curve(path: &Path, rows: &[EpochRow], append: bool) -> Result<()> {
    let mut file = if append && path.exists() {
        fs::OpenOptions::new().append(true).open(path)?
    } else {
        let mut f = fs::File::create(path)?;
        writeln!(f, "epoch,train_loss,val_loss,val_acc,val_top3,val_top5")?;
        f
    };
    for r in rows {
        writeln!(
            file,
            "{},{},{},{},{},{}",
            r.epoch, r.train_loss, r.val_loss, r.val_acc, r.val_top3, r.val_top5
        )?;
    }
    Ok(())
}

/// Train on a synthesized data directory; writes best/last checkpoints and
/// the loss curve.
pub fn cmd_train(cfg: &RunConfig, data_dir: &Path, out_dir: &Path, resume: bool) -> Result<()> {
    cfg.validate()?;
    ensure_out_dir(out_dir)?;
    let data_path = data_dir.join(DATASET_FILE);
    let dataset = Dataset::load(&data_path)?;
    let init = if resume {
        let ckpt = load_checkpoint(&out_dir.join(LAST_CKPT_FILE))?;
        println!("train: resuming from epoch {} (step {})", ckpt.epoch, ckpt
            .optimizer
            .as_ref()
            .map(|o| o.step)
            .unwrap_or(0));
        Some(ckpt)
    } else {
        None
    };
    let start_fresh = init.is_none();

    let mut rows = Vec::new();
    let output = train(&dataset, cfg, AblationSet::default(), init, |row| {
        println!(
            "epoch {:>3}: train_loss {:.4}  val_loss {:.4}  val_acc {:.4}  val_top3 {:.4}  val_top5 {:.4}",
            row.epoch, row.train_loss, row.val_loss, row.val_acc, row.val_top3, row.val_top5
        );
        rows.push(row.clone());
    })?;

    write_loss_curve(&out_dir.join(LOSS_CURVE_FILE), &rows, !start_fresh)?;
    let config_echo = output.final_ckpt.config_echo.clone();
    save_checkpoint(&out_dir.join(LAST_CKPT_FILE), &output.final_ckpt)?;
    save_checkpoint(
        &out_dir.join(BEST_CKPT_FILE),
        &Checkpoint {
            params: output.best_params,
            optimizer: None,
            epoch: output.best_epoch,
            config_echo,
        },
    )?;
    write_manifest(
        out_dir,
        cfg,
        "train",
        &[&data_path],
        &[BEST_CKPT_FILE, LAST_CKPT_FILE, LOSS_CURVE_FILE],
    )?;
    println!(
        "train: {} epochs, best epoch {} (val_loss {:.4}); skipped {} short sequences",
        output.final_ckpt.epoch, output.best_epoch, output.best_val_loss, output.skipped_short
    );
    if output.diverged {
        return Err(Error::numerical(
            "training diverged; last good state saved".to_string(),
        ));
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// eval
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Predictor {
    Transformer,
    Markov,
    Knn,
    /// Score an externally produced prediction file.
    File,
}

/// Produce predictions for the chosen predictor and score them against the
/// answer key, restricted to the configured split.
#[allow(clippy::too_many_arguments)]
pub fn cmd_eval(
    cfg: &RunConfig,
    data_dir: &Path,
    answer_key: &Path,
    out_dir: &Path,
    predictor: Predictor,
    checkpoint: Option<&Path>,
    predictions_file: Option<&Path>,
    split_override: Option<SplitName>,
) -> Result<()> {
    cfg.validate()?;
    ensure_out_dir(out_dir)?;
    let data_path = data_dir.join(DATASET_FILE);
    let dataset = Dataset::load(&data_path)?;
    let key_all: Vec<AnswerDay> = load_jsonl(answer_key)?;
    let split = split_override.unwrap_or(cfg.eval.split);
    let key = key_for_split(&key_all, split, cfg.data.split_train, cfg.data.split_val);
    if key.is_empty() {
        return Err(Error::data(format!(
            "answer key has no entries in the `{split:?}` split"
        )));
    }

    let predictions = predictions_for(cfg, &dataset, &key, predictor, checkpoint, predictions_file)?;
    save_jsonl(&out_dir.join(PREDICTIONS_FILE), &predictions)?;

    let opts = EvalOptions { grid_neighbor_credit: cfg.eval.grid_neighbor_credit };
    let mut report = score(&predictions, &key, &dataset, opts)?;
    report.config_echo = serde_json::json!({
        "predictor": format!("{predictor:?}").to_lowercase(),
        "split": format!("{split:?}").to_lowercase(),
        "config_hash": cfg.hash(),
        "grid_neighbor_credit": cfg.eval.grid_neighbor_credit,
    });
    fs::write(
        out_dir.join(REPORT_FILE),
        serde_json::to_string_pretty(&report)? + "\n",
    )?;
    let mut inputs: Vec<&Path> = vec![&data_path, answer_key];
    if let Some(c) = checkpoint {
        inputs.push(c);
    }
    if let Some(p) = predictions_file {
        inputs.push(p);
    }
    write_manifest(out_dir, cfg, "eval", &inputs, &[PREDICTIONS_FILE, REPORT_FILE])?;
    print!("{}", report.render());
    Ok(())
}

pub fn predictions_for(
    cfg: &RunConfig,
    dataset: &Dataset,
    key: &[AnswerDay],
    predictor: Predictor,
    checkpoint: Option<&Path>,
    predictions_file: Option<&Path>,
) -> Result<Vec<PredictionRecord>> {
    let modality = dataset.vocab.modality();
    // Baselines fit on the train split's observed visits only.
    let train_trajs: Vec<crate::data::Trajectory> = dataset
        .trajectories
        .iter()
        .filter(|t| {
            crate::data::user_split(&t.user_id, cfg.data.split_train, cfg.data.split_val)
                == Split::Train
        })
        .cloned()
        .collect();
    match predictor {
        Predictor::Transformer => {
            let path = checkpoint
                .ok_or_else(|| Error::config("transformer eval needs --checkpoint".to_string()))?;
            let ckpt = load_checkpoint(path)?;
            if ckpt.params.meta.n_places != dataset.vocab.n_places() {
                return Err(Error::data(format!(
                    "checkpoint was trained over {} places; dataset has {}",
                    ckpt.params.meta.n_places,
                    dataset.vocab.n_places()
                )));
            }
            crate::eval::transformer_predictions(
                &ckpt.params,
                dataset,
                key,
                cfg.masking.mode,
                AblationSet::default(),
                cfg.eval.ranked_len,
            )
        }
        Predictor::Markov => {
            let model = crate::baselines::markov_fit(
                &train_trajs,
                modality,
                dataset.vocab.n_places(),
                cfg.eval.markov_alpha,
                cfg.eval.markov_sides,
            )?;
            crate::eval::markov_predictions(&model, dataset, key, cfg.eval.ranked_len)
        }
        Predictor::Knn => {
            let model = crate::baselines::knn_fit(
                &train_trajs,
                modality,
                &dataset.holidays,
                dataset.vocab.n_places(),
                cfg.eval.knn_k,
            )?;
            crate::eval::knn_predictions(&model, dataset, key, cfg.eval.ranked_len)
        }
        Predictor::File => {
            let path = predictions_file
                .ok_or_else(|| Error::config("file eval needs --predictions".to_string()))?;
            load_jsonl(path)
        }
    }
}

// ---------------------------------------------------------------------------
// ablate
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AblationCell {
    pub removed: Vec<String>,
    pub label: String,
    pub report: EvalReport,
    /// Accuracy minus the full model's accuracy.
    pub delta_accuracy: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AblationTable {
    pub cells: Vec<AblationCell>,
    pub config_hash: String,
}

/// Train one model per ablation cell (identical seeds, identical shapes; the
/// ablated context tokens are replaced by the learned null token both in
/// training and at prediction time) and score each on the configured split.
pub fn run_ablation(
    cfg: &RunConfig,
    dataset: &Dataset,
    key_all: &[AnswerDay],
) -> Result<AblationTable> {
    let split = cfg.eval.split;
    let key = key_for_split(key_all, split, cfg.data.split_train, cfg.data.split_val);
    if key.is_empty() {
        return Err(Error::data("ablation: answer key empty in the eval split"));
    }
    let opts = EvalOptions { grid_neighbor_credit: cfg.eval.grid_neighbor_credit };
    let mut cells = Vec::new();
    for features in &cfg.ablation.cells {
        let ablate = AblationSet::from_features(features);
        let output = train(dataset, cfg, ablate, None, |_| {})?;
        let predictions = crate::eval::transformer_predictions(
            &output.best_params,
            dataset,
            &key,
            cfg.masking.mode,
            ablate,
            cfg.eval.ranked_len,
        )?;
        let mut report = score(&predictions, &key, dataset, opts)?;
        report.config_echo = serde_json::json!({
            "ablation": ablate.label(),
            "config_hash": cfg.hash(),
        });
        cells.push(AblationCell {
            removed: features.iter().map(|f| f.label().to_string()).collect(),
            label: ablate.label(),
            report,
            delta_accuracy: 0.0,
        });
    }
    let full_acc = cells
        .iter()
        .find(|c| c.removed.is_empty())
        .map(|c| c.report.accuracy)
        .unwrap_or(f64::NAN);
    for cell in &mut cells {
        cell.delta_accuracy = cell.report.accuracy - full_acc;
    }
    Ok(AblationTable { cells, config_hash: cfg.hash() })
}

pub fn cmd_ablate(cfg: &RunConfig, data_dir: &Path, answer_key: &Path, out_dir: &Path) -> Result<()> {
    cfg.validate()?;
    ensure_out_dir(out_dir)?;
    let data_path = data_dir.join(DATASET_FILE);
    let dataset = Dataset::load(&data_path)?;
    let key: Vec<AnswerDay> = load_jsonl(answer_key)?;
    let table = run_ablation(cfg, &dataset, &key)?;
    fs::write(
        out_dir.join(ABLATION_FILE),
        serde_json::to_string_pretty(&table)? + "\n",
    )?;
    write_manifest(out_dir, cfg, "ablate", &[&data_path, answer_key], &[ABLATION_FILE])?;
    println!(
        "{:<28} {:>8} {:>9} {:>9} {:>9} {:>10}",
        "cell", "targets", "accuracy", "top3", "top5", "delta_acc"
    );
    for cell in &table.cells {
        println!(
            "{:<28} {:>8} {:>9.4} {:>9.4} {:>9.4} {:>+10.4}",
            cell.label,
            cell.report.n_targets,
            cell.report.accuracy,
            cell.report.top3,
            cell.report.top5,
            cell.delta_accuracy
        );
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// reconstruct
// ---------------------------------------------------------------------------

/// Fill the queried times of each listed user-day and write the completed
/// trajectories (dataset format) plus a top-5 alternatives file.
pub fn cmd_reconstruct(
    cfg: &RunConfig,
    checkpoint: &Path,
    data_file: &Path,
    queries_file: &Path,
    out_dir: &Path,
) -> Result<()> {
    cfg.validate()?;
    ensure_out_dir(out_dir)?;
    let dataset = Dataset::load(data_file)?;
    let ckpt = load_checkpoint(checkpoint)?;
    let queries: Vec<QueryRecord> = load_jsonl(queries_file)?;

    let mut by_day: std::collections::BTreeMap<(String, String), Vec<u32>> =
        std::collections::BTreeMap::new();
    for q in &queries {
        by_day
            .entry((q.user.clone(), q.date.to_string()))
            .or_default()
            .push(q.time_or_slot);
    }

    let mut completed = dataset.clone();
    let mut alternatives: Vec<PredictionRecord> = Vec::new();
    let mut total_errors = 0usize;
    for traj in completed.trajectories.iter_mut() {
        let Some(times) = by_day.remove(&(traj.user_id.clone(), traj.date.to_string())) else {
            continue;
        };
        let day = crate::eval::reconstruct(
            &ckpt.params,
            &dataset,
            traj,
            &times,
            cfg.masking.mode,
            cfg.eval.ranked_len,
        )?;
        for e in &day.errors {
            eprintln!(
                "reconstruct: ({}, {}, {}): {}",
                traj.user_id, traj.date, e.time_or_slot, e.reason
            );
        }
        total_errors += day.errors.len();
        alternatives.extend(day.alternatives);
        *traj = day.trajectory;
    }
    if let Some(((user, date), _)) = by_day.into_iter().next() {
        return Err(Error::data(format!(
            "queries reference ({user}, {date}) which is not in the dataset"
        )));
    }

    completed.save(&out_dir.join(COMPLETED_FILE))?;
    save_jsonl(&out_dir.join(ALTERNATIVES_FILE), &alternatives)?;
    write_manifest(
        out_dir,
        cfg,
        "reconstruct",
        &[checkpoint, data_file, queries_file],
        &[COMPLETED_FILE, ALTERNATIVES_FILE],
    )?;
    println!(
        "reconstruct: filled {} gaps across {} day(s); {} invalid queries",
        alternatives.len(),
        queries.iter().map(|q| (&q.user, q.date)).collect::<std::collections::BTreeSet<_>>().len(),
        total_errors
    );
    Ok(())
}

// ---------------------------------------------------------------------------
// gradcheck
// ---------------------------------------------------------------------------

pub fn cmd_gradcheck(out_dir: Option<&Path>) -> Result<()> {
    let report = crate::train::gradcheck()?;
    println!("{:<24} {:>14}", "tensor", "max_rel_err");
    for (name, err) in &report.per_tensor {
        println!("{name:<24} {err:>14.3e}");
    }
    println!(
        "gradcheck: {} parameters, max relative error {:.3e} (threshold {:.0e})",
        report.n_params, report.max_rel_err, report.threshold
    );
    if let Some(dir) = out_dir {
        ensure_out_dir(dir)?;
        let json = serde_json::json!({
            "n_params": report.n_params,
            "max_rel_err": report.max_rel_err,
            "threshold": report.threshold,
            "passed": report.passed,
            "per_tensor": report.per_tensor.iter().map(|(n, e)| serde_json::json!({"tensor": n, "max_rel_err": e})).collect::<Vec<_>>(),
        });
        fs::write(dir.join("gradcheck.json"), serde_json::to_string_pretty(&json)? + "\n")?;
    }
    if !report.passed {
        return Err(Error::numerical(format!(
            "gradient check failed: max relative error {:.3e}",
            report.max_rel_err
        )));
    }
    println!("gradcheck: PASS");
    Ok(())
}

/// Counts used by a few smoke checks and the CLI summary.
pub fn split_summary(dataset: &Dataset, cfg: &RunConfig) -> (usize, usize, usize) {
    let (train_idx, _) = trainable_indices(dataset, cfg, Split::Train);
    let (val_idx, _) = trainable_indices(dataset, cfg, Split::Val);
    let (test_idx, _) = trainable_indices(dataset, cfg, Split::Test);
    (train_idx.len(), val_idx.len(), test_idx.len())
}

/// Build a rayon pool with the requested thread count and run `f` inside it.
/// Per-sequence work is reduced in a fixed order, so results do not depend
/// on the thread count.
pub fn with_threads<T: Send>(threads: usize, f: impl FnOnce() -> T + Send) -> Result<T> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads.max(1))
        .build()
        .map_err(|e| Error::config(format!("cannot build thread pool: {e}")))?;
    Ok(pool.install(f))
}

