//! Stage 2: adversarial training of a student against frozen teacher targets.

use std::collections::BTreeMap;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::attack::{pgd, AttackConfig, Head, ModelSurface, ObjectiveContext, ObjectiveKind};
use crate::data::{augment_batch, epoch_batches, sequential_batches, AugmentKind, AugmentationPolicy, Unlabeled};
use crate::models::{Model, ModelSpec, NormMode, ProjectorConfig, Trainable};
use crate::optim::{collect_grads, CosineSchedule, Sgd};
use crate::pretrain::MASKED;
use crate::seed::SeedStreams;
use crate::tensor::{Real, Tape, Tensor, Var};
use crate::timing::PhaseTimer;
use crate::{Error, Result};

/// The three pieces of the stage-2 objective.
#[derive(Clone, Copy, Debug)]
pub struct DeaclTerms {
    pub loss: Var,
    /// `mean(-cos(f(x), z1))`
    pub clean: Var,
    /// `mean(-cos(f(x_adv), f(x)))`
    pub adv: Var,
}

/// `mean(-cos(f(x), z1) - lambda * cos(f(x_adv), f(x)))`.
pub fn deacl_terms(tape: &mut Tape, clean: Var, adv: Var, targets: Var, lambda: Real) -> Result<DeaclTerms> {
    let c = tape.cosine_rows(clean, targets)?;
    let c = tape.mean(c)?;
    let clean_term = tape.scale(c, -1.0)?;
    let a = tape.cosine_rows(adv, clean)?;
    let a = tape.mean(a)?;
    let adv_term = tape.scale(a, -1.0)?;
    let weighted = tape.scale(adv_term, lambda)?;
    let loss = tape.add(clean_term, weighted)?;
    Ok(DeaclTerms {
        loss,
        clean: clean_term,
        adv: adv_term,
    })
}

pub fn deacl_loss(tape: &mut Tape, clean: Var, adv: Var, targets: Var, lambda: Real) -> Result<Var> {
    Ok(deacl_terms(tape, clean, adv, targets, lambda)?.loss)
}

/// `mean(-cos(f(x_adv), z1))`.
pub fn deacl_loss_direct(tape: &mut Tape, adv: Var, targets: Var) -> Result<Var> {
    let c = tape.cosine_rows(adv, targets)?;
    let m = tape.mean(c)?;
    tape.scale(m, -1.0)
}

/// Batch mean of `KL(softmax(reference) || softmax(student))` over the last axis.
pub fn kl_distance_loss(tape: &mut Tape, student: Var, reference: Var) -> Result<Var> {
    if tape.shape(student) != tape.shape(reference) {
        return Err(Error::shape(
            "kl_distance",
            format!("{:?} vs {:?}", tape.shape(student), tape.shape(reference)),
        ));
    }
    let lr = tape.log_softmax(reference)?;
    let ls = tape.log_softmax(student)?;
    let p = tape.exp(lr)?;
    let d = tape.sub(lr, ls)?;
    let prod = tape.mul(p, d)?;
    let per = tape.sum_last(prod)?;
    tape.mean(per)
}

/// `(1/B) sum_i log sum_{j != i} exp(cos(c_i, c_j) / tau)`, zero for `B = 1`.
pub fn collapse_prevention_term(tape: &mut Tape, feats: Var, tau: Real) -> Result<Var> {
    let b = tape.shape(feats)[0];
    if b < 2 {
        return Ok(tape.constant(Tensor::scalar(0.0)));
    }
    let n = tape.normalize(feats)?;
    let nt = tape.transpose(n)?;
    let s = tape.matmul(n, nt)?;
    let s = tape.scale(s, 1.0 / tau)?;
    let mut mask = Tensor::zeros(vec![b, b]);
    for i in 0..b {
        mask.data_mut()[i * b + i] = MASKED;
    }
    let mask = tape.constant(mask);
    let s = tape.add(s, mask)?;
    let lse = tape.logsumexp(s)?;
    tape.mean(lse)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StudentInit {
    Teacher,
    Random,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Distance {
    Cosine,
    Kl,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LossForm {
    /// Clean features to targets plus adversarial features to clean features.
    Trades,
    /// Adversarial features straight to targets.
    Direct,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TargetMode {
    /// Teacher forward on the student's clean view at every step.
    OnTheFly,
    /// One teacher pass over the unaugmented images before training.
    Precomputed,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum NormStats {
    /// Batch statistics while training, running averages re-estimated.
    Reestimate,
    /// Student normalizes with the running statistics it started from.
    Inherit,
}

impl NormStats {
    pub fn mode(self) -> NormMode {
        match self {
            NormStats::Reestimate => NormMode::Batch,
            NormStats::Inherit => NormMode::Running,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Stage2Config {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: Real,
    pub momentum: Real,
    pub weight_decay: Real,
    pub warmup_epochs: usize,
    pub lambda: Real,
    pub attack: AttackConfig,
    /// Augmentation of the clean view.
    pub aug_clean: AugmentKind,
    /// Augmentation of the view the attack starts from.
    pub aug_adv: AugmentKind,
    pub projector: bool,
    pub collapse_prevention: bool,
    pub collapse_weight: Real,
    pub collapse_tau: Real,
    pub student_init: StudentInit,
    pub distance: Distance,
    pub loss_form: LossForm,
    pub targets: TargetMode,
    pub norm_stats: NormStats,
    /// Held-out samples used for the per-epoch robustness probe; 0 disables it.
    pub probe_size: usize,
}

impl Default for Stage2Config {
    fn default() -> Self {
        Self {
            epochs: 100,
            batch_size: 64,
            lr: 0.05,
            momentum: 0.9,
            weight_decay: 5e-4,
            warmup_epochs: 0,
            lambda: 2.0,
            attack: AttackConfig::training(),
            aug_clean: AugmentKind::Weak,
            aug_adv: AugmentKind::Weak,
            projector: false,
            collapse_prevention: false,
            collapse_weight: 1.0,
            collapse_tau: 0.5,
            student_init: StudentInit::Teacher,
            distance: Distance::Cosine,
            loss_form: LossForm::Trades,
            targets: TargetMode::OnTheFly,
            norm_stats: NormStats::Reestimate,
            probe_size: 0,
        }
    }
}

impl Stage2Config {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0) {
            return Err(Error::Config(format!("lambda must be >= 0, got {}", self.lambda)));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("stage 2 batch size must be >= 1".into()));
        }
        if !(self.lr >= 0.0) || !(self.weight_decay >= 0.0) || !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config("stage 2 lr, weight decay and momentum must be non-negative, momentum < 1".into()));
        }
        if self.collapse_prevention && !(self.collapse_tau > 0.0) {
            return Err(Error::Config("collapse temperature must be > 0".into()));
        }
        if self.attack.objective != ObjectiveKind::CosineToTarget {
            return Err(Error::Config("stage 2 attack objective must be cosine-to-target".into()));
        }
        self.attack.validate()
    }
}

/// Teacher representations keyed by sample id.
#[derive(Clone, Debug, PartialEq)]
pub struct PseudoTargetBank {
    index: BTreeMap<usize, usize>,
    targets: Tensor,
    pub teacher_hash: String,
    pub augmentation: AugmentKind,
}

impl PseudoTargetBank {
    pub fn len(&self) -> usize {
        self.index.len()
    }

    pub fn is_empty(&self) -> bool {
        self.index.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.targets.row_len()
    }

    pub fn target(&self, id: usize) -> Result<&[Real]> {
        let r = *self.index.get(&id).ok_or(Error::MissingTarget(id))?;
        Ok(self.targets.row(r))
    }

    /// Stack the targets of `ids` into `[len(ids), d]`.
    pub fn get(&self, ids: &[usize]) -> Result<Tensor> {
        let rows = ids
            .iter()
            .map(|&id| self.index.get(&id).copied().ok_or(Error::MissingTarget(id)))
            .collect::<Result<Vec<_>>>()?;
        Ok(self.targets.select_rows(&rows))
    }

    pub fn hash(&self) -> String {
        let mut h = Sha256::new();
        h.update(self.teacher_hash.as_bytes());
        for (&id, &r) in &self.index {
            h.update((id as u64).to_le_bytes());
            for v in self.targets.row(r) {
                h.update((*v as f32).to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }
}

/// Teacher forward in eval mode over every sample, optionally on a weakly
/// augmented view.
pub fn make_pseudo_targets(
    teacher: &Model,
    data: &Unlabeled<'_>,
    augmentation: AugmentKind,
    streams: &SeedStreams,
    batch_size: usize,
) -> Result<PseudoTargetBank> {
    let teacher_hash = teacher.hash();
    let policy = AugmentationPolicy::of(augmentation);
    let d = teacher.rep_dim();
    let mut data_out = Vec::with_capacity(data.len() * d);
    for positions in sequential_batches(data.len(), batch_size.max(1)) {
        let batch = data.batch(&positions);
        let x = augment_batch(&policy, &batch, &streams.child("bank"), 0, 0);
        let z = teacher.represent(&x)?;
        for r in 0..z.rows() {
            if z.row(r).iter().all(|&v| v == 0.0) {
                return Err(Error::ZeroNorm("pseudo target"));
            }
        }
        data_out.extend_from_slice(z.data());
    }
    if teacher.hash() != teacher_hash {
        return Err(Error::HashMismatch("teacher changed while building targets".into()));
    }
    let index = data.ids().iter().enumerate().map(|(r, &id)| (id, r)).collect::<BTreeMap<_, _>>();
    if index.len() != data.len() {
        return Err(Error::Data("duplicate sample ids".into()));
    }
    Ok(PseudoTargetBank {
        index,
        targets: Tensor::new(vec![data.len(), d], data_out)?,
        teacher_hash,
        augmentation,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Stage2EpochLog {
    pub epoch: usize,
    pub loss_clean_term: f64,
    pub loss_adv_term: f64,
    pub probe_ra: Option<f64>,
    pub wall_seconds: f64,
}

#[derive(Clone, Debug)]
pub struct Stage2Outcome {
    /// Trained student; carries a projector only when one was enabled.
    pub student: Model,
    pub log: Vec<Stage2EpochLog>,
    /// Teacher hash before training and after every epoch.
    pub teacher_hashes: Vec<String>,
    /// Bank hash before training and after every epoch, when a bank was used.
    pub bank_hashes: Vec<String>,
    /// Clean term of the very first batch, before any update.
    pub initial_clean_term: Option<f64>,
    pub timing: PhaseTimer,
    pub seconds: f64,
}

impl Stage2Outcome {
    pub fn teacher_unchanged(&self) -> bool {
        self.teacher_hashes.windows(2).all(|w| w[0] == w[1])
    }

    pub fn bank_unchanged(&self) -> bool {
        self.bank_hashes.windows(2).all(|w| w[0] == w[1])
    }
}

/// Initial student for the given config.
pub fn init_student(teacher: &Model, cfg: &Stage2Config, streams: &SeedStreams) -> Result<Model> {
    let mut student = match cfg.student_init {
        StudentInit::Teacher => teacher.encoder_only(),
        StudentInit::Random => {
            let spec = ModelSpec {
                encoder: teacher.encoder_config().clone(),
                projector: ProjectorConfig::disabled(),
                classes: None,
            };
            Model::new(spec, &mut streams.stream("init/student"))?
        }
    };
    if cfg.projector {
        student = student.with_projector(ProjectorConfig::standard(teacher.rep_dim()), &mut streams.stream("init/student-projector"))?;
    }
    Ok(student)
}

fn student_out(student: &Model, tape: &mut Tape, bound: &crate::models::Bound, x: Var, mode: NormMode, projector: bool) -> Result<(Var, crate::models::EncoderPass)> {
    let pass = student.encode(tape, bound, x, mode)?;
    let out = if projector {
        student.project(tape, bound, pass.reps)?
    } else {
        pass.reps
    };
    Ok((out, pass))
}

/// Label-free robustness probe: percentage of samples whose adversarial
/// student feature is still closest (by cosine) to its own target among all
/// probe targets.
pub fn probe_instance_ra(student: &Model, x: &Tensor, targets: &Tensor, attack: &AttackConfig, streams: &SeedStreams, projector: bool) -> Result<f64> {
    let ctx = ObjectiveContext::Targets(targets.clone());
    let head = if projector { Head::Projector } else { Head::Encoder };
    let mut surface = ModelSurface::new(student, head, NormMode::Running, ObjectiveKind::CosineToTarget, &ctx);
    let adv = pgd(&mut surface, x, attack, &mut streams.stream("probe"))?;
    let feats = if projector {
        student.represent_projected(&adv)?
    } else {
        student.represent(&adv)?
    };
    let unit = |t: &Tensor| -> Vec<Vec<Real>> {
        (0..t.rows())
            .map(|i| {
                let r = t.row(i);
                let n = r.iter().map(|v| v * v).sum::<Real>().sqrt().max(1e-12);
                r.iter().map(|v| v / n).collect()
            })
            .collect()
    };
    let (f, t) = (unit(&feats), unit(targets));
    let mut hits = 0;
    for (i, fi) in f.iter().enumerate() {
        let best = t
            .iter()
            .enumerate()
            .map(|(j, tj)| (j, fi.iter().zip(tj).map(|(a, b)| a * b).sum::<Real>()))
            .fold((0, Real::NEG_INFINITY), |acc, (j, s)| if s > acc.1 { (j, s) } else { acc });
        if best.0 == i {
            hits += 1;
        }
    }
    Ok(100.0 * hits as f64 / f.len().max(1) as f64)
}

/// Train a student so clean features match the teacher's and adversarial
/// features match clean ones. Labels are never visible here.
pub fn train_stage2(
    data: &Unlabeled<'_>,
    teacher: &Model,
    cfg: &Stage2Config,
    streams: &SeedStreams,
    probe: Option<&Unlabeled<'_>>,
) -> Result<Stage2Outcome> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::Data("stage 2 needs a nonempty dataset".into()));
    }
    let start = Instant::now();
    let teacher_hash = teacher.hash();
    let mut teacher_hashes = vec![teacher_hash.clone()];
    let mut student = init_student(teacher, cfg, streams)?;
    let bank = match cfg.targets {
        TargetMode::Precomputed => Some(make_pseudo_targets(teacher, data, AugmentKind::None, streams, cfg.batch_size)?),
        TargetMode::OnTheFly => None,
    };
    let mut bank_hashes: Vec<String> = bank.iter().map(PseudoTargetBank::hash).collect();

    let probe_set = match probe {
        Some(p) if cfg.probe_size > 0 => {
            let n = cfg.probe_size.min(p.len());
            let b = p.batch(&(0..n).collect::<Vec<_>>());
            let t = teacher.represent(&b.images)?;
            Some((b.images, t))
        }
        _ => None,
    };

    let mode = cfg.norm_stats.mode();
    let clean_policy = AugmentationPolicy::of(cfg.aug_clean);
    let adv_policy = AugmentationPolicy::of(cfg.aug_adv);
    let per_epoch = epoch_batches(data.len(), cfg.batch_size, streams, 0, true).len();
    let schedule = CosineSchedule {
        base_lr: cfg.lr,
        warmup: cfg.warmup_epochs * per_epoch,
        total: cfg.epochs * per_epoch,
    };
    let mut opt = Sgd::new(cfg.momentum, cfg.weight_decay);
    let mut timing = PhaseTimer::new();
    let mut log = Vec::with_capacity(cfg.epochs);
    let mut step = 0usize;
    let mut initial_clean_term = None;

    for epoch in 0..cfg.epochs {
        let (mut clean_sum, mut adv_sum, mut count) = (0.0, 0.0, 0usize);
        for positions in epoch_batches(data.len(), cfg.batch_size, streams, epoch, true) {
            let batch = data.batch(&positions);
            let (x_ce, x_ae) = timing.time("data", || {
                let ce = augment_batch(&clean_policy, &batch, streams, epoch, 0);
                let ae = if cfg.aug_adv == cfg.aug_clean {
                    ce.clone()
                } else {
                    augment_batch(&adv_policy, &batch, streams, epoch, 1)
                };
                (ce, ae)
            });
            let targets = timing.time("targets", || match &bank {
                Some(b) => b.get(&batch.ids),
                None => teacher.represent(&x_ce),
            })?;

            let x_adv = timing.time("attack", || {
                let ctx = ObjectiveContext::Targets(targets.clone());
                let head = if cfg.projector { Head::Projector } else { Head::Encoder };
                let mut surface = ModelSurface::new(&student, head, mode, ObjectiveKind::CosineToTarget, &ctx);
                let mut rng = streams.keyed("attack", &[epoch as u64, step as u64]);
                pgd(&mut surface, &x_ae, &cfg.attack, &mut rng)
            })?;

            let lr = schedule.lr(step);
            let terms = timing.time("update", || -> Result<(f64, f64)> {
                let mut tape = Tape::new();
                let bound = student.bind(&mut tape, &Trainable::All);
                let xc = tape.constant(x_ce);
                let xa = tape.constant(x_adv);
                let t = tape.constant(targets);
                let (fc, pass_c) = student_out(&student, &mut tape, &bound, xc, mode, cfg.projector)?;
                let (fa, _) = student_out(&student, &mut tape, &bound, xa, mode, cfg.projector)?;
                let (mut loss, clean_term, adv_term) = match (cfg.loss_form, cfg.distance) {
                    (LossForm::Trades, Distance::Cosine) => {
                        let d = deacl_terms(&mut tape, fc, fa, t, cfg.lambda)?;
                        (d.loss, d.clean, d.adv)
                    }
                    (LossForm::Trades, Distance::Kl) => {
                        let c = kl_distance_loss(&mut tape, fc, t)?;
                        let a = kl_distance_loss(&mut tape, fa, fc)?;
                        let w = tape.scale(a, cfg.lambda)?;
                        (tape.add(c, w)?, c, a)
                    }
                    (LossForm::Direct, Distance::Cosine) => {
                        let l = deacl_loss_direct(&mut tape, fa, t)?;
                        let c = tape.cosine_rows(fc, t)?;
                        let c = tape.mean(c)?;
                        let c = tape.scale(c, -1.0)?;
                        (l, c, l)
                    }
                    (LossForm::Direct, Distance::Kl) => {
                        let l = kl_distance_loss(&mut tape, fa, t)?;
                        let c = kl_distance_loss(&mut tape, fc, t)?;
                        (l, c, l)
                    }
                };
                if cfg.collapse_prevention {
                    let cp = collapse_prevention_term(&mut tape, fc, cfg.collapse_tau)?;
                    let cp = tape.scale(cp, cfg.collapse_weight)?;
                    loss = tape.add(loss, cp)?;
                }
                let values = (
                    tape.value(clean_term).item()? as f64,
                    tape.value(adv_term).item()? as f64,
                );
                let total = tape.value(loss).item()? as f64;
                if !total.is_finite() {
                    return Err(Error::Diverged { epoch, loss: total });
                }
                let mut grads = tape.backward(loss)?;
                let grads = collect_grads(&bound, &mut grads);
                opt.step(&mut student.params, &grads, lr)?;
                if mode == NormMode::Batch {
                    student.update_running_stats(&tape, &pass_c)?;
                }
                Ok(values)
            });
            let (c, a) = match terms {
                Err(Error::NonFinite(_)) => return Err(Error::Diverged { epoch, loss: f64::NAN }),
                other => other?,
            };
            initial_clean_term.get_or_insert(c);
            clean_sum += c;
            adv_sum += a;
            count += 1;
            step += 1;
        }
        let probe_ra = match &probe_set {
            Some((x, t)) => {
                let probe_attack = AttackConfig {
                    steps: 5,
                    restarts: 1,
                    ..cfg.attack.clone()
                };
                Some(probe_instance_ra(&student, x, t, &probe_attack, &streams.child("probe").child(&epoch.to_string()), cfg.projector)?)
            }
            None => None,
        };
        teacher_hashes.push(teacher.hash());
        if let Some(b) = &bank {
            bank_hashes.push(b.hash());
        }
        let n = count.max(1) as f64;
        log.push(Stage2EpochLog {
            epoch,
            loss_clean_term: clean_sum / n,
            loss_adv_term: adv_sum / n,
            probe_ra,
            wall_seconds: start.elapsed().as_secs_f64(),
        });
    }
    if teacher_hashes.iter().any(|h| *h != teacher_hash) {
        return Err(Error::HashMismatch("teacher parameters changed during stage 2".into()));
    }
    Ok(Stage2Outcome {
        student,
        log,
        teacher_hashes,
        bank_hashes,
        initial_clean_term,
        timing,
        seconds: start.elapsed().as_secs_f64(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::gen_synthetic;
    use crate::models::EncoderConfig;
    use rand::Rng;

    fn rand_rows(rng: &mut impl Rng, b: usize, d: usize) -> Vec<Vec<f64>> {
        (0..b).map(|_| (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect()
    }

    fn t(r: &[Vec<f64>]) -> Tensor {
        Tensor::from_rows(&r.iter().map(|v| v.iter().map(|&x| x as Real).collect()).collect::<Vec<_>>()).unwrap()
    }

    fn cos(a: &[f64], b: &[f64]) -> f64 {
        let d: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
        let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
        let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
        d / (na * nb)
    }

    #[test]
    fn deacl_matches_oracle_and_minimum() {
        let mut rng = SeedStreams::new(21).stream("t");
        let (c, a, z) = (rand_rows(&mut rng, 4, 8), rand_rows(&mut rng, 4, 8), rand_rows(&mut rng, 4, 8));
        let want: f64 = (0..4).map(|i| -cos(&c[i], &z[i]) - 2.0 * cos(&a[i], &c[i])).sum::<f64>() / 4.0;
        let mut tape = Tape::new();
        let (cv, av, zv) = (tape.constant(t(&c)), tape.constant(t(&a)), tape.constant(t(&z)));
        let l = deacl_loss(&mut tape, cv, av, zv, 2.0).unwrap();
        assert!((tape.value(l).item().unwrap() as f64 - want).abs() < 1e-6);
        let l = deacl_loss(&mut tape, zv, zv, zv, 2.0).unwrap();
        assert!((tape.value(l).item().unwrap() + 3.0).abs() < 1e-6);
        let l0 = deacl_loss(&mut tape, cv, av, zv, 0.0).unwrap();
        let want0: f64 = (0..4).map(|i| -cos(&c[i], &z[i])).sum::<f64>() / 4.0;
        assert!((tape.value(l0).item().unwrap() as f64 - want0).abs() < 1e-6);
        let d = deacl_loss_direct(&mut tape, av, zv).unwrap();
        let wantd: f64 = (0..4).map(|i| -cos(&a[i], &z[i])).sum::<f64>() / 4.0;
        assert!((tape.value(d).item().unwrap() as f64 - wantd).abs() < 1e-6);
    }

    #[test]
    fn kl_is_zero_on_equal_and_nonnegative() {
        let mut rng = SeedStreams::new(22).stream("t");
        for _ in 0..20 {
            let (a, b) = (rand_rows(&mut rng, 3, 5), rand_rows(&mut rng, 3, 5));
            let mut tape = Tape::new();
            let (av, bv) = (tape.constant(t(&a)), tape.constant(t(&b)));
            let same = kl_distance_loss(&mut tape, av, av).unwrap();
            assert!(tape.value(same).item().unwrap().abs() < 1e-7);
            let kl = kl_distance_loss(&mut tape, av, bv).unwrap();
            assert!(tape.value(kl).item().unwrap() >= -1e-7);
        }
    }

    #[test]
    fn collapse_term_oracle() {
        let mut tape = Tape::new();
        let one = tape.constant(Tensor::from_rows(&[vec![1.0, 2.0]]).unwrap());
        let z = collapse_prevention_term(&mut tape, one, 0.5).unwrap();
        assert_eq!(tape.value(z).item().unwrap(), 0.0);
        let mut rng = SeedStreams::new(23).stream("t");
        let r = rand_rows(&mut rng, 4, 6);
        let want: f64 = (0..4)
            .map(|i| {
                (0..4)
                    .filter(|&j| j != i)
                    .map(|j| (cos(&r[i], &r[j]) / 0.5).exp())
                    .sum::<f64>()
                    .ln()
            })
            .sum::<f64>()
            / 4.0;
        let v = tape.constant(t(&r));
        let got = collapse_prevention_term(&mut tape, v, 0.5).unwrap();
        assert!((tape.value(got).item().unwrap() as f64 - want).abs() < 1e-5);
    }

    fn teacher() -> Model {
        let spec = ModelSpec {
            encoder: EncoderConfig::tiny(1, 16, 16),
            projector: ProjectorConfig::standard(32),
            classes: None,
        };
        Model::new(spec, &mut SeedStreams::new(30).stream("teacher")).unwrap()
    }

    fn cfg(epochs: usize) -> Stage2Config {
        Stage2Config {
            epochs,
            batch_size: 8,
            ..Stage2Config::default()
        }
    }

    #[test]
    fn bank_matches_single_sample_forward() {
        let ds = gen_synthetic(3, 3, 2).unwrap();
        let te = teacher();
        let streams = SeedStreams::new(1);
        let bank = make_pseudo_targets(&te, &ds.unlabeled(), AugmentKind::None, &streams, 4).unwrap();
        assert_eq!(bank.len(), ds.len());
        for p in 0..ds.len() {
            let one = te.represent(&ds.batch(&[p]).images).unwrap();
            let got = bank.target(ds.id(p)).unwrap();
            for (a, b) in one.data().iter().zip(got) {
                assert!((a - b).abs() < 1e-6);
            }
        }
        let again = make_pseudo_targets(&te, &ds.unlabeled(), AugmentKind::None, &streams, 5).unwrap();
        assert_eq!(bank.hash(), again.hash());
        assert!(matches!(bank.get(&[9999]), Err(Error::MissingTarget(9999))));
    }

    #[test]
    fn zero_epochs_copies_teacher() {
        let ds = gen_synthetic(4, 2, 2).unwrap();
        let te = teacher();
        let out = train_stage2(&ds.unlabeled(), &te, &cfg(0), &SeedStreams::new(1), None).unwrap();
        assert!(out.student.params.bit_eq(&te.encoder_only().params));
    }

    #[test]
    fn no_attack_saturates_adv_term() {
        let ds = gen_synthetic(4, 2, 2).unwrap();
        let te = teacher();
        let mut c = cfg(1);
        c.attack.steps = 0;
        c.lr = 0.0;
        c.aug_clean = AugmentKind::None;
        c.aug_adv = AugmentKind::None;
        c.targets = TargetMode::Precomputed;
        c.norm_stats = NormStats::Inherit;
        let out = train_stage2(&ds.unlabeled(), &te, &c, &SeedStreams::new(1), None).unwrap();
        assert!((out.log[0].loss_adv_term + 1.0).abs() < 1e-6);
        assert!((out.log[0].loss_clean_term + 1.0).abs() < 1e-6);
        assert!(out.teacher_unchanged() && out.bank_unchanged());
        assert_eq!(ds.label_reads(), 0);
    }

    #[test]
    fn deterministic_students_and_frozen_teacher() {
        let ds = gen_synthetic(4, 2, 2).unwrap();
        let te = teacher();
        let before = te.hash();
        let mut c = cfg(2);
        c.probe_size = 4;
        let run = || train_stage2(&ds.unlabeled(), &te, &c, &SeedStreams::new(5), Some(&ds.unlabeled())).unwrap();
        let (a, b) = (run(), run());
        assert!(a.student.params.bit_eq(&b.student.params));
        assert_eq!(te.hash(), before);
        assert_eq!(a.teacher_hashes.len(), 3);
        assert!(a.teacher_unchanged());
        assert!(a.log[1].probe_ra.is_some());
    }

    #[test]
    fn ablation_variants_run() {
        let ds = gen_synthetic(4, 2, 2).unwrap();
        let te = teacher();
        for (form, dist) in [
            (LossForm::Trades, Distance::Kl),
            (LossForm::Direct, Distance::Cosine),
            (LossForm::Direct, Distance::Kl),
        ] {
            let mut c = cfg(1);
            c.loss_form = form;
            c.distance = dist;
            c.projector = true;
            c.collapse_prevention = true;
            c.student_init = StudentInit::Random;
            let out = train_stage2(&ds.unlabeled(), &te, &c, &SeedStreams::new(5), None).unwrap();
            assert!(out.log[0].loss_clean_term.is_finite());
        }
    }

    #[test]
    fn negative_lambda_rejected() {
        let mut c = cfg(1);
        c.lambda = -1.0;
        assert!(c.validate().is_err());
    }
}
