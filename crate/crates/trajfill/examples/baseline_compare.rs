//! Fit the Markov and KNN baselines and a small transformer on the same
//! synthetic world, score all three on held-out users' hidden visits, and
//! print the comparison table.
//!
//! Run with: cargo run --example baseline_compare
//! (A couple of minutes single-threaded; most of it is training.)

use trajfill::baselines::{knn_fit, markov_fit};
use trajfill::config::{RunConfig, SplitName};
use trajfill::data::Split;
use trajfill::embed::AblationSet;
use trajfill::eval::{key_for_split, knn_predictions, markov_predictions, score, transformer_predictions, EvalOptions};
use trajfill::synth::{generate_world, sparsify};
use trajfill::train::train;

fn main() -> trajfill::Result<()> {
    let mut cfg = RunConfig::default();
    cfg.seed = 9;
    cfg.world.population = 80;
    cfg.world.days = 30;
    cfg.data.max_seq_len = 40;
    cfg.embedding.dim = 32;
    cfg.embedding.space2vec_scales = 8;
    cfg.encoder.layers = 2;
    cfg.encoder.heads = 4;
    cfg.encoder.ff_dim = Some(128);
    cfg.training.epochs = 20;
    cfg.training.learning_rate = 0.005;
    cfg.training.gradient_clip_norm = 2.0;

    let world = generate_world(&cfg)?;
    let sparse = sparsify(&world, &cfg.sparsify, cfg.sparsify_seed())?;
    let dataset = &sparse.observed;
    let key = key_for_split(&sparse.answer_key, SplitName::Test, cfg.data.split_train, cfg.data.split_val);
    let n_targets: usize = key.iter().map(|d| d.hidden.len()).sum();
    println!("scoring {} hidden visits of held-out users\n", n_targets);

    let train_trajs: Vec<_> = dataset
        .trajectories
        .iter()
        .filter(|t| trajfill::data::user_split(&t.user_id, 0.8, 0.1) == Split::Train)
        .cloned()
        .collect();
    let modality = dataset.vocab.modality();
    let opts = EvalOptions::default();

    let markov = markov_fit(&train_trajs, modality, dataset.vocab.n_places(), 1.0, cfg.eval.markov_sides)?;
    let m_report = score(&markov_predictions(&markov, dataset, &key, 10)?, &key, dataset, opts)?;

    let knn = knn_fit(&train_trajs, modality, &dataset.holidays, dataset.vocab.n_places(), 5)?;
    let k_report = score(&knn_predictions(&knn, dataset, &key, 10)?, &key, dataset, opts)?;

    println!("training the transformer...");
    let trained = train(dataset, &cfg, AblationSet::default(), None, |row| {
        if row.epoch % 5 == 4 {
            println!("  epoch {:>2}  val_acc {:.3}", row.epoch, row.val_acc);
        }
    })?;
    let preds = transformer_predictions(
        &trained.best_params,
        dataset,
        &key,
        cfg.masking.mode,
        AblationSet::default(),
        10,
    )?;
    let t_report = score(&preds, &key, dataset, opts)?;

    println!("\n{:<14} {:>9} {:>9} {:>9}", "predictor", "accuracy", "top3", "top5");
    for (name, r) in [("markov", &m_report), ("knn", &k_report), ("transformer", &t_report)] {
        println!("{:<14} {:>9.4} {:>9.4} {:>9.4}", name, r.accuracy, r.top3, r.top5);
    }
    Ok(())
}
