//! Linear finetuning (frozen encoder) of a stage-1 teacher and its distilled
//! student, with clean and PGD-20 accuracy for both.

use deacl::config::RunConfig;
use deacl::distill::train_stage2;
use deacl::eval::slf;
use deacl::pretrain::train_stage1;
use deacl::seed::SeedStreams;

fn main() -> deacl::Result<()> {
    let mut cfg = RunConfig::desk(0);
    cfg.stage1.epochs = 60;
    cfg.stage2.epochs = 20;
    let (train, test) = cfg.data.load(cfg.seed)?;
    let streams = SeedStreams::new(cfg.seed);
    let teacher = train_stage1(&train.unlabeled(), &cfg.model, &cfg.stage1, &streams.child("stage1"))?.model;
    let student = train_stage2(&train.unlabeled(), &teacher, &cfg.stage2, &streams.child("stage2"), None)?.student;

    for (name, enc) in [("stage1", &teacher), ("deacl", &student)] {
        let e = slf(enc, &train, &test, &cfg.slf, &streams.child(&format!("slf/{name}")))?;
        println!(
            "{name:<7} SA {:5.1}  RA {:5.1}  encoder frozen: {}",
            e.measurement.sa,
            e.measurement.ra,
            e.encoder_hash_before == e.encoder_hash_after
        );
    }
    Ok(())
}
