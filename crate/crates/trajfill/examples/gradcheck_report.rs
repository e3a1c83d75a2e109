//! Verify every analytic gradient of the model against central finite
//! differences on a tiny instance, and print the per-tensor error table.
//!
//! Run with: cargo run --example gradcheck_report

fn main() -> trajfill::Result<()> {
    let start = std::time::Instant::now();
    let report = trajfill::train::gradcheck()?;
    println!("{:<24} {:>14}", "tensor", "max_rel_err");
    for (name, err) in &report.per_tensor {
        println!("{name:<24} {err:>14.3e}");
    }
    println!(
        "\n{} parameters checked in {:.2?}; max relative error {:.3e} (threshold {:.0e}) -> {}",
        report.n_params,
        start.elapsed(),
        report.max_rel_err,
        report.threshold,
        if report.passed { "PASS" } else { "FAIL" }
    );
    Ok(())
}
