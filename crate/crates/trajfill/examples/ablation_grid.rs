//! Run the context-feature ablation grid on a small world: retrain with
//! demographics, anchors, or the date token replaced by a learned null token
//! and tabulate the accuracy deltas against the full model.
//!
//! Run with: cargo run --example ablation_grid
//! (Each cell trains from scratch; expect a few minutes.)

use trajfill::config::RunConfig;
use trajfill::runner::run_ablation;
use trajfill::synth::{generate_world, sparsify};

fn main() -> trajfill::Result<()> {
    let mut cfg = RunConfig::default();
    cfg.seed = 5;
    cfg.world.population = 60;
    cfg.world.days = 24;
    cfg.data.max_seq_len = 40;
    cfg.embedding.dim = 32;
    cfg.embedding.space2vec_scales = 8;
    cfg.encoder.layers = 2;
    cfg.encoder.heads = 4;
    cfg.encoder.ff_dim = Some(128);
    cfg.training.epochs = 12;
    cfg.training.learning_rate = 0.005;
    cfg.training.gradient_clip_norm = 2.0;

    let world = generate_world(&cfg)?;
    let sparse = sparsify(&world, &cfg.sparsify, cfg.sparsify_seed())?;
    println!("ablation grid over {} cells (each cell trains from scratch)...", cfg.ablation.cells.len());
    let table = run_ablation(&cfg, &sparse.observed, &sparse.answer_key)?;

    println!("\n{:<24} {:>9} {:>9} {:>10}", "cell", "accuracy", "top3", "delta_acc");
    for cell in &table.cells {
        println!(
            "{:<24} {:>9.4} {:>9.4} {:>+10.4}",
            cell.label, cell.report.accuracy, cell.report.top3, cell.delta_accuracy
        );
    }
    Ok(())
}
