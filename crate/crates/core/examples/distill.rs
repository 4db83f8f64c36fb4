//! Stage 2: adversarial distillation of a frozen teacher into a student.
//! Prints the two loss terms per epoch and the frozen-teacher check.

use deacl::config::RunConfig;
use deacl::distill::train_stage2;
use deacl::pretrain::train_stage1;
use deacl::seed::SeedStreams;

fn main() -> deacl::Result<()> {
    let mut cfg = RunConfig::desk(0);
    cfg.stage1.epochs = 40;
    cfg.stage2.epochs = 10;
    cfg.stage2.probe_size = 64;
    let (train, test) = cfg.data.load(cfg.seed)?;
    let streams = SeedStreams::new(cfg.seed);
    let teacher = train_stage1(&train.unlabeled(), &cfg.model, &cfg.stage1, &streams.child("stage1"))?.model;

    let out = train_stage2(&train.unlabeled(), &teacher, &cfg.stage2, &streams.child("stage2"), Some(&test.unlabeled()))?;
    println!("epoch  clean-term  adv-term  probe-RA");
    for l in &out.log {
        println!("{:>5}  {:>10.4}  {:>8.4}  {:>8.1}", l.epoch, l.loss_clean_term, l.loss_adv_term, l.probe_ra.unwrap_or(f64::NAN));
    }
    println!("teacher unchanged: {}", out.teacher_unchanged());
    println!("attack share of stage-2 time: {:.2}", out.timing.share("attack"));
    Ok(())
}
