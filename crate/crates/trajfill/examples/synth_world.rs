//! Generate a small synthetic mobility world, sparsify it CDR-style, and
//! print what the generator guarantees: routine structure, observation
//! calibration, and the weekday/weekend context signal.
//!
//! Run with: cargo run --example synth_world

use trajfill::config::RunConfig;
use trajfill::synth::{context_signal_tv, generate_world, sparsify};

fn main() -> trajfill::Result<()> {
    let mut cfg = RunConfig::default();
    cfg.seed = 7;
    cfg.world.population = 30;
    cfg.world.days = 21;

    let world = generate_world(&cfg)?;
    println!(
        "world: {} users x {} days over {} towers",
        world.truth.profiles.len(),
        cfg.world.days,
        world.truth.vocab.n_places()
    );

    // Every ground-truth day is a full 34-slot trajectory.
    let traj = &world.truth.trajectories[0];
    let profile = &world.truth.profiles[&traj.user_id];
    println!(
        "\nuser {} ({}, {:?}, archetype {}) on {} ({:?}):",
        traj.user_id,
        profile.age_bucket,
        profile.gender,
        world.archetype_of[&traj.user_id],
        traj.date,
        world.truth.holidays.day_type(traj.date),
    );
    let mut current = None;
    for v in &traj.visits {
        if current != Some(v.token) {
            let place = world.truth.vocab.place_of(v.token).unwrap();
            let role = if v.token == profile.primary_anchor {
                " (home)"
            } else if v.token == profile.secondary_anchor {
                " (work)"
            } else {
                ""
            };
            println!("  {:02}:{:02}  {place}{role}", v.timestamp / 3600, v.timestamp % 3600 / 60);
            current = Some(v.token);
        }
    }

    let sparse = sparsify(&world, &cfg.sparsify, cfg.sparsify_seed())?;
    let n_hidden: usize = sparse.answer_key.iter().map(|d| d.hidden.len()).sum();
    println!(
        "\nsparsified: {} observed days, {} hidden visits, {:.2} distinct hourly slots/day (target {})",
        sparse.observed.trajectories.len(),
        n_hidden,
        sparse.mean_hourly_slots,
        cfg.sparsify.cdr_mean_hourly_slots,
    );

    println!("\nweekday vs weekend token-distribution distance (total variation):");
    for (arch, tv) in context_signal_tv(&world) {
        println!("  {arch:<16} {tv:.3}");
    }
    Ok(())
}
