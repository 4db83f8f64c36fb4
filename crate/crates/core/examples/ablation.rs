//! One stage-2 ablation axis over a few seeds, reporting median SA and RA.
//!
//! `cargo run --release --example ablation -- augmentation weak,strong-ae 0,1,2`

use deacl::ablation::{run_ablation, Axis};
use deacl::config::RunConfig;

fn main() -> deacl::Result<()> {
    let mut args = std::env::args().skip(1);
    let axis: Axis = args.next().unwrap_or_else(|| "augmentation".into()).parse()?;
    let values: Vec<String> = match args.next() {
        Some(v) => v.split(',').map(String::from).collect(),
        None => axis.default_values(),
    };
    let seeds: Vec<u64> = args
        .next()
        .unwrap_or_else(|| "0,1".into())
        .split(',')
        .map(|s| s.parse().expect("seed"))
        .collect();

    let mut base = RunConfig::smoke(0);
    base.stage1.epochs = 60;
    let res = run_ablation(&base, axis, &values, &seeds, true, None)?;
    for p in &res.points {
        println!("{}={:<10} seed {}  SA {:5.1}  RA {:5.1}", axis.name(), p.value, p.seed, p.sa, p.ra);
    }
    for (v, (sa, ra)) in res.table() {
        println!("median {}={v}: SA {sa:.1} RA {ra:.1}", axis.name());
    }
    Ok(())
}
