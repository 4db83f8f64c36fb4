//! Full run: stage 1, stage 2 and linear evaluation of both encoders, with
//! config, checkpoints, logs, metrics and timing written to the run folder.
//! `DEACL_OUT` overrides the folder.

use deacl::config::RunConfig;
use deacl::pipeline::run_pipeline;

fn main() -> deacl::Result<()> {
    let mut cfg = RunConfig::smoke(0);
    cfg.output_dir = std::env::temp_dir().join("deacl-smoke");
    let out = run_pipeline(cfg)?;
    for m in &out.metrics {
        println!("{:<7} {}  SA {:5.1}  RA {:5.1}", m.run_id, m.protocol, m.sa, m.ra);
    }
    println!("stage 1 {:.1}s, stage 2 {:.1}s", out.stage1.seconds, out.stage2.seconds);
    if let Some(share) = out.timing.attack_share() {
        println!("attack share of stage-2 step time: {share:.2}");
    }
    println!("config hash {}, artifacts in {}", out.config_hash, out.dir.display());
    Ok(())
}
