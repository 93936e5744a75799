//! Runs the double-precision finite-difference suite over every engine
//! operation and both attention blocks.
//!
//! cargo run --release -p mpgnet --example gradcheck -- [seed]

use mpgnet::checks::{format_results, gradient_suite};

fn main() -> mpgnet::Result<()> {
    let seed = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(0);
    let results = gradient_suite(seed)?;
    print!("{}", format_results(&results));
    let failed = results.iter().filter(|r| !r.passed()).count();
    println!("{} of {} checks passed", results.len() - failed, results.len());
    if failed > 0 {
        std::process::exit(1);
    }
    Ok(())
}
