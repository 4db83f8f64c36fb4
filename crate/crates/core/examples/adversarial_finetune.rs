//! Adversarial full finetuning from a distilled encoder versus from a
//! random one, tracking probe RA after every epoch.

use deacl::config::RunConfig;
use deacl::distill::{init_student, train_stage2, StudentInit};
use deacl::eval::{aff, epochs_to_threshold};
use deacl::pretrain::train_stage1;
use deacl::seed::SeedStreams;

fn main() -> deacl::Result<()> {
    let mut cfg = RunConfig::desk(0);
    cfg.stage1.epochs = 60;
    cfg.stage2.epochs = 20;
    cfg.aff.epochs = 8;
    cfg.aff.probe_size = 64;
    let (train, test) = cfg.data.load(cfg.seed)?;
    let streams = SeedStreams::new(cfg.seed);
    let teacher = train_stage1(&train.unlabeled(), &cfg.model, &cfg.stage1, &streams.child("stage1"))?.model;
    let deacl = train_stage2(&train.unlabeled(), &teacher, &cfg.stage2, &streams.child("stage2"), None)?.student;
    let random_cfg = deacl::distill::Stage2Config {
        student_init: StudentInit::Random,
        ..cfg.stage2.clone()
    };
    let random = init_student(&teacher, &random_cfg, &streams.child("random"))?;

    for (name, enc) in [("deacl", &deacl), ("random", &random)] {
        let e = aff(enc, &train, &test, &cfg.aff, &streams.child(&format!("aff/{name}")))?;
        let curve: Vec<String> = e.probe_ra.iter().map(|r| format!("{r:.0}")).collect();
        println!(
            "{name:<6} SA {:5.1}  RA {:5.1}  probe RA per epoch [{}]  epochs to 30%: {:?}",
            e.measurement.sa,
            e.measurement.ra,
            curve.join(" "),
            epochs_to_threshold(&e.probe_ra, 30.0)
        );
    }
    Ok(())
}
