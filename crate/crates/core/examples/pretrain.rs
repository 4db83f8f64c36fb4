//! Stage 1: contrastive pretraining of a teacher on unlabeled synthetic data.
//!
//! `cargo run --release --example pretrain -- [epochs] [out.ckpt]`

use std::path::PathBuf;

use deacl::config::RunConfig;
use deacl::models::{save_checkpoint, CheckpointMeta};
use deacl::pretrain::train_stage1;
use deacl::seed::SeedStreams;

fn main() -> deacl::Result<()> {
    let mut args = std::env::args().skip(1);
    let epochs = args.next().and_then(|s| s.parse().ok()).unwrap_or(30);
    let out = args.next().map(PathBuf::from).unwrap_or_else(|| std::env::temp_dir().join("teacher.ckpt"));

    let mut cfg = RunConfig::desk(0);
    cfg.stage1.epochs = epochs;
    let (train, _) = cfg.data.load(cfg.seed)?;
    let streams = SeedStreams::new(cfg.seed);
    // Only the unlabeled view reaches the trainer.
    let res = train_stage1(&train.unlabeled(), &cfg.model, &cfg.stage1, &streams.child("stage1"))?;
    for l in res.log.iter().step_by((epochs / 10).max(1)) {
        println!("epoch {:>3}  loss {:.4}  lr {:.4}", l.epoch, l.mean_loss, l.lr);
    }
    println!("labels read during stage 1: {}", train.label_reads());

    let meta = CheckpointMeta {
        spec: res.model.spec().clone(),
        seed: cfg.seed,
        epoch: epochs,
        config_hash: cfg.hash(),
        role: "teacher".into(),
    };
    save_checkpoint(&res.model, &meta, &out)?;
    println!("teacher written to {} ({:.1}s)", out.display(), res.seconds);
    Ok(())
}
