//! Train briefly, then fill every unobserved half-hour slot of one sparse
//! user-day and print the completed timeline next to the ground truth.
//!
//! Run with: cargo run --example reconstruct_day

use trajfill::config::RunConfig;
use trajfill::embed::AblationSet;
use trajfill::eval::reconstruct;
use trajfill::synth::{generate_world, sparsify};
use trajfill::train::train;

fn main() -> trajfill::Result<()> {
    let mut cfg = RunConfig::default();
    cfg.seed = 13;
    cfg.world.population = 40;
    cfg.world.days = 20;
    cfg.data.max_seq_len = 40;
    cfg.embedding.dim = 32;
    cfg.embedding.space2vec_scales = 8;
    cfg.encoder.layers = 2;
    cfg.encoder.heads = 4;
    cfg.encoder.ff_dim = Some(128);
    cfg.training.epochs = 15;
    cfg.training.learning_rate = 0.005;
    cfg.training.gradient_clip_norm = 2.0;

    let world = generate_world(&cfg)?;
    let sparse = sparsify(&world, &cfg.sparsify, cfg.sparsify_seed())?;
    println!("training a small model first...");
    let trained = train(&sparse.observed, &cfg, AblationSet::default(), None, |_| {})?;

    // Pick a train-split day with a handful of observations.
    let dataset = &sparse.observed;
    let idx = dataset
        .trajectories
        .iter()
        .position(|t| t.visits.len() >= 4 && t.visits.len() <= 8)
        .expect("some sparse day");
    let sparse_day = &dataset.trajectories[idx];
    let truth_day = world
        .truth
        .trajectories
        .iter()
        .find(|t| t.user_id == sparse_day.user_id && t.date == sparse_day.date)
        .expect("truth day");

    let queries: Vec<u32> = (1..=34).collect();
    let out = reconstruct(&trained.best_params, dataset, sparse_day, &queries, cfg.masking.mode, 10)?;

    println!(
        "\nuser {} on {} — {} observed slots, {} filled:",
        sparse_day.user_id,
        sparse_day.date,
        sparse_day.visits.len(),
        out.alternatives.len()
    );
    println!("{:>5}  {:<10} {:<10} {}", "slot", "truth", "filled", "source");
    let mut correct = 0;
    for (v, t) in out.trajectory.visits.iter().zip(&truth_day.visits) {
        let truth_place = world.truth.vocab.place_of(t.token).unwrap();
        let got_place = dataset.vocab.place_of(v.token).unwrap();
        let mark = if v.token == t.token { ' ' } else { '!' };
        if !v.observed && v.token == t.token {
            correct += 1;
        }
        println!(
            "{:>5}  {:<10} {:<10} {}{mark}",
            v.slot.unwrap(),
            truth_place,
            got_place,
            if v.observed { "observed" } else { "filled" },
        );
    }
    println!(
        "\nfilled-slot accuracy on this day: {correct}/{}",
        out.alternatives.len()
    );
    Ok(())
}
