//! End-to-end training on a tiny synthetic world: generate, sparsify, train a
//! small model for a few epochs, and watch held-out masked prediction
//! improve.
//!
//! Run with: cargo run --example train_tiny

use trajfill::config::RunConfig;
use trajfill::embed::AblationSet;
use trajfill::synth::{generate_world, sparsify};
use trajfill::train::train;

fn main() -> trajfill::Result<()> {
    let mut cfg = RunConfig::default();
    cfg.seed = 3;
    cfg.world.population = 30;
    cfg.world.days = 16;
    cfg.data.max_seq_len = 40;
    cfg.embedding.dim = 32;
    cfg.embedding.space2vec_scales = 8;
    cfg.encoder.layers = 2;
    cfg.encoder.heads = 4;
    cfg.encoder.ff_dim = Some(128);
    cfg.training.epochs = 12;
    cfg.training.learning_rate = 0.005;
    cfg.training.gradient_clip_norm = 2.0;
    cfg.training.warmup_steps = 20;

    let world = generate_world(&cfg)?;
    let sparse = sparsify(&world, &cfg.sparsify, cfg.sparsify_seed())?;
    println!(
        "training on {} observed user-days ({} places)",
        sparse.observed.trajectories.len(),
        sparse.observed.vocab.n_places()
    );

    let output = train(&sparse.observed, &cfg, AblationSet::default(), None, |row| {
        println!(
            "epoch {:>2}  train_loss {:.3}  val_loss {:.3}  val_acc {:.3}  val_top3 {:.3}",
            row.epoch, row.train_loss, row.val_loss, row.val_acc, row.val_top3
        );
    })?;
    println!(
        "best epoch {} with held-out loss {:.3}; model has {} parameters",
        output.best_epoch,
        output.best_val_loss,
        output.best_params.n_params()
    );
    Ok(())
}
