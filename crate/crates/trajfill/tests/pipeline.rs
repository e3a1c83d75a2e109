//! File-level pipeline tests: CLI exit codes, run-directory artifacts,
//! resume semantics, dataset round-trips at scale, and the prediction and
//! query wire formats.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;

use trajfill::config::{RunConfig, SplitName};
use trajfill::data::{load_jsonl, Dataset, PredictionRecord, QueryRecord};
use trajfill::runner;

fn tmp(tag: &str) -> PathBuf {
    let dir = std::env::temp_dir().join(format!("trajfill_pipe_{tag}"));
    let _ = fs::remove_dir_all(&dir);
    fs::create_dir_all(&dir).unwrap();
    dir
}

fn tiny_cfg() -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.seed = 31;
    cfg.world.population = 14;
    cfg.world.days = 8;
    cfg.data.max_seq_len = 40;
    cfg.embedding.dim = 16;
    cfg.embedding.space2vec_scales = 4;
    cfg.encoder.layers = 1;
    cfg.encoder.heads = 2;
    cfg.encoder.ff_dim = Some(64);
    cfg.training.epochs = 2;
    cfg.training.learning_rate = 0.005;
    cfg.training.gradient_clip_norm = 2.0;
    cfg
}

fn write_cfg(dir: &Path, cfg: &RunConfig) -> PathBuf {
    let path = dir.join("run.toml");
    fs::write(&path, toml::to_string(cfg).unwrap()).unwrap();
    path
}

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_trajfill"))
}

#[test]
fn cli_exit_codes_cover_config_data_and_success() {
    let dir = tmp("exit_codes");

    // Config error (negative population) names the key and exits 2.
    let bad = dir.join("bad.toml");
    fs::write(&bad, "[world]\npopulation = -5\n").unwrap();
    let out = bin()
        .args(["synth", "--config"])
        .arg(&bad)
        .arg("--out")
        .arg(dir.join("x"))
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("population"), "{stderr}");

    // Data error (missing dataset) exits 3.
    let cfg_path = write_cfg(&dir, &tiny_cfg());
    let out = bin()
        .args(["train", "--config"])
        .arg(&cfg_path)
        .arg("--data")
        .arg(dir.join("nonexistent"))
        .arg("--out")
        .arg(dir.join("y"))
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(3));

    // Success exits 0.
    let out = bin()
        .args(["synth", "--config"])
        .arg(&cfg_path)
        .arg("--out")
        .arg(dir.join("run"))
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    for file in [runner::DATASET_FILE, runner::TRUTH_FILE, runner::ANSWER_KEY_FILE, runner::MANIFEST_FILE] {
        assert!(dir.join("run").join(file).exists(), "missing {file}");
    }
}

#[test]
fn gradcheck_command_passes_and_writes_its_report() {
    let dir = tmp("gradcheck");
    let out = bin().arg("gradcheck").arg("--out").arg(&dir).output().unwrap();
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("PASS"), "{stdout}");
    let report: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.join("gradcheck.json")).unwrap()).unwrap();
    assert_eq!(report["passed"], serde_json::json!(true));
}

#[test]
fn synth_is_byte_identical_for_one_seed() {
    let dir = tmp("synth_repro");
    let cfg = tiny_cfg();
    runner::cmd_synth(&cfg, &dir.join("a")).unwrap();
    runner::cmd_synth(&cfg, &dir.join("b")).unwrap();
    for file in [runner::DATASET_FILE, runner::TRUTH_FILE, runner::ANSWER_KEY_FILE] {
        let a = fs::read(dir.join("a").join(file)).unwrap();
        let b = fs::read(dir.join("b").join(file)).unwrap();
        assert_eq!(a, b, "{file} differs between identical synth runs");
    }
}

#[test]
fn train_writes_a_row_per_epoch_and_resume_continues_the_step_counter() {
    let dir = tmp("train_resume");
    let mut cfg = tiny_cfg();
    runner::cmd_synth(&cfg, &dir).unwrap();
    runner::cmd_train(&cfg, &dir, &dir, false).unwrap();

    let csv = fs::read_to_string(dir.join(runner::LOSS_CURVE_FILE)).unwrap();
    let rows: Vec<&str> = csv.lines().collect();
    assert_eq!(rows[0], "epoch,train_loss,val_loss,val_acc,val_top3,val_top5");
    assert_eq!(rows.len(), 1 + 2, "one row per epoch");
    // Validation metrics respect top-k monotonicity on every row.
    for row in &rows[1..] {
        let cols: Vec<f64> = row.split(',').skip(3).map(|c| c.parse().unwrap()).collect();
        assert!(cols[0] <= cols[1] + 1e-12 && cols[1] <= cols[2] + 1e-12, "row {row}");
    }

    let after_first = trajfill::model::load_checkpoint(&dir.join(runner::LAST_CKPT_FILE)).unwrap();
    let steps_first = after_first.optimizer.as_ref().unwrap().step;
    assert!(steps_first > 0);
    assert_eq!(after_first.epoch, 2);

    // Resume for two more epochs: the epoch and step counters continue.
    cfg.training.epochs = 4;
    runner::cmd_train(&cfg, &dir, &dir, true).unwrap();
    let after_resume = trajfill::model::load_checkpoint(&dir.join(runner::LAST_CKPT_FILE)).unwrap();
    assert_eq!(after_resume.epoch, 4);
    assert_eq!(after_resume.optimizer.as_ref().unwrap().step, steps_first * 2);
    let csv = fs::read_to_string(dir.join(runner::LOSS_CURVE_FILE)).unwrap();
    assert_eq!(csv.lines().count(), 1 + 4, "resume appends the new epochs");
}

#[test]
fn eval_scores_external_prediction_files() {
    let dir = tmp("eval_file");
    let cfg = tiny_cfg();
    runner::cmd_synth(&cfg, &dir).unwrap();

    // A perfect "external" predictor: copy the answer key.
    let key: Vec<trajfill::data::AnswerDay> =
        load_jsonl(&dir.join(runner::ANSWER_KEY_FILE)).unwrap();
    let mut preds = Vec::new();
    for day in &key {
        for h in &day.hidden {
            preds.push(PredictionRecord {
                user: day.user.clone(),
                date: day.date,
                time_or_slot: h.time_or_slot,
                ranked: vec![
                    h.place_id.clone(),
                    "tw_000".into(),
                    "tw_001".into(),
                    "tw_002".into(),
                    "tw_003".into(),
                ]
                .into_iter()
                .scan(Vec::new(), |seen: &mut Vec<String>, p| {
                    if seen.contains(&p) {
                        Some(None)
                    } else {
                        seen.push(p.clone());
                        Some(Some(p))
                    }
                })
                .flatten()
                .collect(),
            });
        }
    }
    let pred_path = dir.join("external.jsonl");
    trajfill::data::save_jsonl(&pred_path, &preds).unwrap();

    runner::cmd_eval(
        &cfg,
        &dir,
        &dir.join(runner::ANSWER_KEY_FILE),
        &dir.join("eval"),
        runner::Predictor::File,
        None,
        Some(&pred_path),
        Some(SplitName::All),
    )
    .unwrap();
    let report: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.join("eval").join(runner::REPORT_FILE)).unwrap())
            .unwrap();
    assert_eq!(report["accuracy"], serde_json::json!(1.0));
    assert_eq!(report["top5"], serde_json::json!(1.0));
}

#[test]
fn reconstruct_with_no_queries_reproduces_the_input_bytes() {
    let dir = tmp("reconstruct_identity");
    let cfg = tiny_cfg();
    runner::cmd_synth(&cfg, &dir).unwrap();
    runner::cmd_train(&cfg, &dir, &dir, false).unwrap();

    let queries = dir.join("queries.jsonl");
    fs::write(&queries, "").unwrap();
    runner::cmd_reconstruct(
        &cfg,
        &dir.join(runner::BEST_CKPT_FILE),
        &dir.join(runner::DATASET_FILE),
        &queries,
        &dir.join("rec"),
    )
    .unwrap();
    let input = fs::read(dir.join(runner::DATASET_FILE)).unwrap();
    let output = fs::read(dir.join("rec").join(runner::COMPLETED_FILE)).unwrap();
    assert_eq!(input, output, "empty query spec must reproduce the input file");
    let alts = fs::read_to_string(dir.join("rec").join(runner::ALTERNATIVES_FILE)).unwrap();
    assert!(alts.is_empty());
}

#[test]
fn reconstruct_fills_queried_slots() {
    let dir = tmp("reconstruct_fill");
    let cfg = tiny_cfg();
    runner::cmd_synth(&cfg, &dir).unwrap();
    runner::cmd_train(&cfg, &dir, &dir, false).unwrap();

    let dataset = Dataset::load(&dir.join(runner::DATASET_FILE)).unwrap();
    let day = &dataset.trajectories[0];
    let queries: Vec<QueryRecord> = (1..=34)
        .map(|s| QueryRecord { user: day.user_id.clone(), date: day.date, time_or_slot: s })
        .collect();
    let qpath = dir.join("queries.jsonl");
    trajfill::data::save_jsonl(&qpath, &queries).unwrap();
    runner::cmd_reconstruct(
        &cfg,
        &dir.join(runner::BEST_CKPT_FILE),
        &dir.join(runner::DATASET_FILE),
        &qpath,
        &dir.join("rec"),
    )
    .unwrap();

    let completed = Dataset::load(&dir.join("rec").join(runner::COMPLETED_FILE)).unwrap();
    let filled_day = completed
        .trajectories
        .iter()
        .find(|t| t.user_id == day.user_id && t.date == day.date)
        .unwrap();
    assert_eq!(filled_day.visits.len(), 34, "all 34 slots present after filling");
    let observed = filled_day.visits.iter().filter(|v| v.observed).count();
    assert_eq!(observed, day.visits.len(), "observed visits pass through");
    let alts: Vec<PredictionRecord> =
        load_jsonl(&dir.join("rec").join(runner::ALTERNATIVES_FILE)).unwrap();
    assert_eq!(alts.len(), 34 - day.visits.len());
    assert!(alts.iter().all(|a| a.ranked.len() == 5));
}

#[test]
fn ablation_grid_has_four_default_cells_and_an_identity_full_cell() {
    let dir = tmp("ablation_identity");
    let mut cfg = tiny_cfg();
    cfg.world.population = 20;
    cfg.training.epochs = 2;
    runner::cmd_synth(&cfg, &dir).unwrap();
    let dataset = Dataset::load(&dir.join(runner::DATASET_FILE)).unwrap();
    let key: Vec<trajfill::data::AnswerDay> =
        load_jsonl(&dir.join(runner::ANSWER_KEY_FILE)).unwrap();

    let table = runner::run_ablation(&cfg, &dataset, &key).unwrap();
    let labels: Vec<&str> = table.cells.iter().map(|c| c.label.as_str()).collect();
    assert_eq!(labels, vec!["full", "-demographics", "-anchors", "-date"]);

    // The full cell is exactly a plain training run with the same seed.
    let trained = trajfill::train::train(
        &dataset,
        &cfg,
        trajfill::embed::AblationSet::default(),
        None,
        |_| {},
    )
    .unwrap();
    let preds = trajfill::eval::transformer_predictions(
        &trained.best_params,
        &dataset,
        &trajfill::eval::key_for_split(&key, cfg.eval.split, 0.8, 0.1),
        cfg.masking.mode,
        trajfill::embed::AblationSet::default(),
        10,
    )
    .unwrap();
    let plain = trajfill::eval::score(
        &preds,
        &trajfill::eval::key_for_split(&key, cfg.eval.split, 0.8, 0.1),
        &dataset,
        trajfill::eval::EvalOptions::default(),
    )
    .unwrap();
    let full = &table.cells[0].report;
    assert_eq!(full.accuracy.to_bits(), plain.accuracy.to_bits());
    assert_eq!(full.top5.to_bits(), plain.top5.to_bits());
    assert_eq!(table.cells[0].delta_accuracy, 0.0);
}

#[test]
fn ten_thousand_trajectory_round_trip_is_identity() {
    let dir = tmp("big_round_trip");
    let mut cfg = tiny_cfg();
    cfg.world.population = 250;
    cfg.world.days = 40; // 10,000 trajectories
    let world = trajfill::synth::generate_world(&cfg).unwrap();
    let sparse = trajfill::synth::sparsify(&world, &cfg.sparsify, cfg.sparsify_seed()).unwrap();
    assert!(sparse.observed.trajectories.len() >= 9_990);
    let path = dir.join("big.jsonl");
    sparse.observed.save(&path).unwrap();
    let back = Dataset::load(&path).unwrap();
    assert_eq!(back.trajectories, sparse.observed.trajectories);
    assert_eq!(back.profiles, sparse.observed.profiles);
    assert_eq!(back.vocab.entries(), sparse.observed.vocab.entries());
    assert_eq!(back.age_buckets, sparse.observed.age_buckets);
    assert_eq!(
        back.holidays.days().collect::<Vec<_>>(),
        sparse.observed.holidays.days().collect::<Vec<_>>()
    );
}

#[test]
fn gps_worlds_train_and_evaluate_end_to_end() {
    let dir = tmp("gps_smoke");
    let mut cfg = tiny_cfg();
    cfg.world.modality = trajfill::vocab::Modality::Gps;
    cfg.sparsify.mode = trajfill::config::SparsifyMode::GpsDropout;
    cfg.world.population = 10;
    cfg.world.days = 6;
    cfg.world.bbox.lat_max = cfg.world.bbox.lat_min + 0.018;
    cfg.world.bbox.lon_max = cfg.world.bbox.lon_min + 0.018;
    cfg.world.cell_size_m = 250.0; // 8x8 grid keeps the head small
    cfg.data.max_seq_len = 152; // 6 context + up to 144 lattice visits
    cfg.training.epochs = 2;

    runner::cmd_synth(&cfg, &dir).unwrap();
    runner::cmd_train(&cfg, &dir, &dir, false).unwrap();
    runner::cmd_eval(
        &cfg,
        &dir,
        &dir.join(runner::ANSWER_KEY_FILE),
        &dir.join("eval"),
        runner::Predictor::Transformer,
        Some(&dir.join(runner::BEST_CKPT_FILE)),
        None,
        Some(SplitName::All),
    )
    .unwrap();
    let report: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.join("eval").join(runner::REPORT_FILE)).unwrap())
            .unwrap();
    let n = report["n_targets"].as_u64().unwrap();
    assert!(n > 100, "gps eval should cover real targets, got {n}");
    // The predictions carry grid place ids.
    let preds: Vec<PredictionRecord> =
        load_jsonl(&dir.join("eval").join(runner::PREDICTIONS_FILE)).unwrap();
    assert!(preds[0].ranked[0].starts_with('r'));

    // Baselines run on GPS data too.
    runner::cmd_eval(
        &cfg,
        &dir,
        &dir.join(runner::ANSWER_KEY_FILE),
        &dir.join("eval_mk"),
        runner::Predictor::Markov,
        None,
        None,
        Some(SplitName::All),
    )
    .unwrap();
}

#[test]
fn overlength_gps_days_are_rejected_at_assembly_not_load() {
    // GPS ground truth days carry 144 visits; a max_seq_len of 64 must fail
    // at sequence assembly with a clear message.
    let mut cfg = tiny_cfg();
    cfg.world.modality = trajfill::vocab::Modality::Gps;
    cfg.sparsify.mode = trajfill::config::SparsifyMode::GpsDropout;
    cfg.world.bbox.lat_max = cfg.world.bbox.lat_min + 0.018;
    cfg.world.bbox.lon_max = cfg.world.bbox.lon_min + 0.018;
    cfg.world.cell_size_m = 250.0;
    cfg.world.population = 3;
    cfg.world.days = 2;
    let world = trajfill::synth::generate_world(&cfg).unwrap();
    let params = trajfill::model::ModelParams::init(
        trajfill::model::ModelMeta::from_config(
            &cfg,
            world.truth.vocab.n_places(),
            trajfill::vocab::Modality::Gps,
        ),
        1,
    );
    let tables = trajfill::embed::RunTables::build(&world.truth.vocab, &params);
    let traj = &world.truth.trajectories[0];
    let profile = &world.truth.profiles[&traj.user_id];
    let err = trajfill::embed::assemble_sequence(
        traj,
        profile,
        &params,
        &tables,
        &world.truth.vocab,
        &world.truth.holidays,
        &world.truth.age_buckets,
        trajfill::embed::AblationSet::default(),
    )
    .unwrap_err();
    assert!(err.to_string().contains("max length"), "{err}");
}
