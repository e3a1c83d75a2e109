//! Inspect the two input geometries: the fixed sinusoidal encoding of the 34
//! half-hour slots (nearby slots get similar vectors) and the multi-scale
//! geographic features (distance in meters shows up as falling similarity).
//!
//! Run with: cargo run --example embedding_geometry

use trajfill::embed::{encode_time_slot, space2vec_features, time_base_pair};

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    dot / (na * nb)
}

fn main() -> trajfill::Result<()> {
    let d = 64;
    println!("slot-encoding similarity to slot 10 (06:00 + half-hours):");
    let base = encode_time_slot(10, d)?;
    for s in [1u8, 5, 8, 9, 10, 11, 12, 15, 20, 30, 34] {
        let sim = cosine(&base, &encode_time_slot(s, d)?);
        let bar = "#".repeat(((sim.max(0.0)) * 40.0) as usize);
        println!("  slot {s:>2}  {sim:+.3}  {bar}");
    }

    println!("\ngeographic feature similarity vs separation (16 scales, 100 m .. 50 km):");
    let feats = |x: f64| space2vec_features(x, 40_000.0 - x / 3.0, 16, 100.0, 50_000.0);
    let origin = feats(12_000.0);
    for meters in [0.0, 50.0, 100.0, 250.0, 1_000.0, 5_000.0, 20_000.0] {
        let sim = cosine(&origin, &feats(12_000.0 + meters));
        println!("  {meters:>8.0} m  {sim:+.3}");
    }

    println!("\nnormalized-day base pairs (sin, cos of the day fraction):");
    for (label, ts) in [("00:00", 0u32), ("06:00", 6 * 3600), ("12:00", 12 * 3600), ("18:00", 18 * 3600)] {
        let (s, c) = time_base_pair(ts);
        println!("  {label}  ({s:+.3}, {c:+.3})");
    }
    Ok(())
}
