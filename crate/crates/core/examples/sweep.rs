//! RA over PGD steps and budgets. On the binary linear fixture RA falls
//! monotonically in the budget and the zero-budget column equals SA.
//!
//! `cargo run --release --example sweep -- [out.csv]`

use std::path::PathBuf;

use deacl::attack::AttackConfig;
use deacl::eval::{measure, sweep, LinearClassifier};
use deacl::report::write_sweep_csv;
use deacl::seed::SeedStreams;

fn main() -> deacl::Result<()> {
    let out = std::env::args().nth(1).map(PathBuf::from).unwrap_or_else(|| std::env::temp_dir().join("sweep.csv"));
    let (model, test) = LinearClassifier::binary_fixture(16, 400, 3)?;
    let streams = SeedStreams::new(0);
    let sa = measure(&model, &test, &AttackConfig::evaluation(), &streams)?.sa;
    let steps = [1, 5, 10, 20];
    let eps: Vec<f32> = [0.0, 2.0, 4.0, 8.0, 16.0].iter().map(|e| e / 255.0).collect();
    let rows = sweep(&model, &test, &steps, &eps, &streams.child("sweep"))?;

    println!("SA {sa:.1}");
    print!("steps");
    for e in &eps {
        print!("  eps={:>4.1}/255", e * 255.0);
    }
    println!();
    for chunk in rows.chunks(eps.len()) {
        print!("{:>5}", chunk[0].steps);
        for r in chunk {
            print!("  {:>11.1}", r.ra);
        }
        println!();
    }
    write_sweep_csv(&out, &rows, "fixture")?;
    println!("written to {}", out.display());
    Ok(())
}
