//! Aggregate metrics from several seeds of one experiment into medians, and
//! show that files from a different config are refused without `force`.

use deacl::report::{aggregate, write_metrics_csv, MetricsRecord, Protocol};

fn row(seed: u64, sa: f64, ra: f64, hash: &str) -> MetricsRecord {
    MetricsRecord {
        run_id: "deacl".into(),
        protocol: Protocol::Slf,
        sa,
        ra,
        aa_proxy: None,
        eps: 8.0 / 255.0,
        steps: 20,
        restarts: 1,
        seed,
        stage1_seconds: None,
        stage2_seconds: None,
        finetune_seconds: None,
        config_hash: hash.into(),
    }
}

fn main() -> deacl::Result<()> {
    let dir = std::env::temp_dir().join("deacl-report");
    std::fs::create_dir_all(&dir).expect("temp dir");
    let mut paths = Vec::new();
    for (seed, sa, ra) in [(0, 84.0, 39.0), (1, 80.0, 41.0), (2, 86.0, 36.0)] {
        let p = dir.join(format!("seed{seed}.csv"));
        write_metrics_csv(&p, &[row(seed, sa, ra, "aaaa")])?;
        paths.push(p);
    }
    for s in aggregate(&paths, false)?.summary {
        println!("{} {}: {} runs, median SA {:.1}, median RA {:.1}", s.run_id, s.protocol, s.runs, s.sa_median, s.ra_median);
    }

    let odd = dir.join("other.csv");
    write_metrics_csv(&odd, &[row(3, 50.0, 50.0, "bbbb")])?;
    paths.push(odd);
    match aggregate(&paths, false) {
        Err(e) => println!("refused: {e}"),
        Ok(_) => println!("unexpectedly accepted"),
    }
    println!("forced: {} runs", aggregate(&paths, true)?.summary[0].runs);
    Ok(())
}
