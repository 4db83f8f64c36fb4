//! Stage 1: contrastive pretraining of the teacher encoder.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::data::{epoch_batches, make_views, AugmentKind, AugmentationPolicy, Unlabeled};
use crate::models::{EncoderConfig, Model, ModelSpec, NormMode, ProjectorConfig, Trainable};
use crate::optim::{collect_grads, CosineSchedule, Sgd};
use crate::seed::SeedStreams;
use crate::tensor::{Real, Tape, Tensor, Var};
use crate::timing::PhaseTimer;
use crate::{Error, Result};

/// Large negative logit that removes an entry from a softmax without
/// producing infinities.
pub(crate) const MASKED: Real = -1e9;

fn diagonal_mask(n: usize) -> Tensor {
    let mut m = Tensor::zeros(vec![n, n]);
    for i in 0..n {
        m.data_mut()[i * n + i] = MASKED;
    }
    m
}

/// Symmetric InfoNCE over stacked views: row `i` and row `i + B` of `z`
/// (`[2B,p]`) are positives, every other row is a negative.
pub fn info_nce_stacked(tape: &mut Tape, z: Var, tau: Real) -> Result<Var> {
    if !(tau > 0.0) {
        return Err(Error::Config(format!("temperature must be > 0, got {tau}")));
    }
    let shape = tape.shape(z).to_vec();
    if shape.len() != 2 || shape[0] % 2 != 0 || shape[0] == 0 {
        return Err(Error::shape("info_nce", format!("expected [2B,p], got {shape:?}")));
    }
    let n = shape[0];
    let b = n / 2;
    let zn = tape.normalize(z)?;
    let zt = tape.transpose(zn)?;
    let sim = tape.matmul(zn, zt)?;
    let logits = tape.scale(sim, 1.0 / tau)?;
    let mask = tape.constant(diagonal_mask(n));
    let logits = tape.add(logits, mask)?;
    let lp = tape.log_softmax(logits)?;
    let pos: Vec<usize> = (0..n).map(|i| (i + b) % n).collect();
    let picked = tape.gather_last(lp, &pos)?;
    let m = tape.mean(picked)?;
    tape.scale(m, -1.0)
}

/// Symmetric InfoNCE for two views `z_a`, `z_b` of shape `[B,p]`.
pub fn info_nce(tape: &mut Tape, z_a: Var, z_b: Var, tau: Real) -> Result<Var> {
    if tape.shape(z_a) != tape.shape(z_b) {
        return Err(Error::shape(
            "info_nce",
            format!("{:?} vs {:?}", tape.shape(z_a), tape.shape(z_b)),
        ));
    }
    let z = tape.concat_rows(z_a, z_b)?;
    info_nce_stacked(tape, z, tau)
}

/// Single-anchor InfoNCE: `-log(e^{s+} / (e^{s+} + sum e^{s-}))` with cosine
/// similarities over `tau`. `anchor`, `positive` are `[1,p]`, `negatives` `[N,p]`.
pub fn info_nce_anchor(tape: &mut Tape, anchor: Var, positive: Var, negatives: Option<Var>, tau: Real) -> Result<Var> {
    if !(tau > 0.0) {
        return Err(Error::Config(format!("temperature must be > 0, got {tau}")));
    }
    let cands = match negatives {
        Some(n) => tape.concat_rows(positive, n)?,
        None => positive,
    };
    let a = tape.normalize(anchor)?;
    let c = tape.normalize(cands)?;
    let ct = tape.transpose(c)?;
    let s = tape.matmul(a, ct)?;
    let s = tape.scale(s, 1.0 / tau)?;
    let lp = tape.log_softmax(s)?;
    let picked = tape.gather_last(lp, &[0])?;
    let m = tape.mean(picked)?;
    tape.scale(m, -1.0)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Stage1Config {
    pub epochs: usize,
    pub batch_size: usize,
    pub temperature: Real,
    pub lr: Real,
    pub weight_decay: Real,
    pub momentum: Real,
    pub warmup_epochs: usize,
    pub projector: bool,
    pub augmentation: AugmentKind,
}

impl Default for Stage1Config {
    fn default() -> Self {
        Self {
            epochs: 100,
            batch_size: 64,
            temperature: 0.5,
            lr: 0.1,
            weight_decay: 1e-5,
            momentum: 0.9,
            warmup_epochs: 10,
            projector: true,
            augmentation: AugmentKind::Strong,
        }
    }
}

impl Stage1Config {
    pub fn validate(&self) -> Result<()> {
        if !(self.temperature > 0.0) {
            return Err(Error::Config(format!("temperature must be > 0, got {}", self.temperature)));
        }
        if self.batch_size < 2 {
            return Err(Error::Config(format!("stage 1 batch size must be >= 2, got {}", self.batch_size)));
        }
        if !(self.lr >= 0.0) || !(self.weight_decay >= 0.0) || !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config("stage 1 lr, weight decay and momentum must be non-negative, momentum < 1".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Stage1EpochLog {
    pub epoch: usize,
    pub mean_loss: f64,
    pub lr: f64,
    pub wall_seconds: f64,
}

#[derive(Clone, Debug)]
pub struct Stage1Outcome {
    /// Encoder plus projector when one was trained.
    pub model: Model,
    pub log: Vec<Stage1EpochLog>,
    pub timing: PhaseTimer,
    pub seconds: f64,
}

/// Randomly initialized stage-1 model (encoder and optional projector).
pub fn init_stage1_model(encoder: &EncoderConfig, cfg: &Stage1Config, streams: &SeedStreams) -> Result<Model> {
    let projector = if cfg.projector {
        ProjectorConfig::standard(encoder.rep_dim)
    } else {
        ProjectorConfig::disabled()
    };
    let spec = ModelSpec {
        encoder: encoder.clone(),
        projector,
        classes: None,
    };
    Model::new(spec, &mut streams.stream("init/teacher"))
}

fn diverged(epoch: usize, loss: f64) -> Error {
    Error::Diverged { epoch, loss }
}

/// Train the teacher with InfoNCE on two augmented views per image.
pub fn train_stage1(
    data: &Unlabeled<'_>,
    encoder: &EncoderConfig,
    cfg: &Stage1Config,
    streams: &SeedStreams,
) -> Result<Stage1Outcome> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::Data("stage 1 needs a nonempty dataset".into()));
    }
    let start = Instant::now();
    let mut model = init_stage1_model(encoder, cfg, streams)?;
    let policy = AugmentationPolicy::of(cfg.augmentation);
    let per_epoch = epoch_batches(data.len(), cfg.batch_size, streams, 0, true).len();
    let schedule = CosineSchedule {
        base_lr: cfg.lr,
        warmup: cfg.warmup_epochs * per_epoch,
        total: cfg.epochs * per_epoch,
    };
    let mut opt = Sgd::new(cfg.momentum, cfg.weight_decay);
    let mut timing = PhaseTimer::new();
    let mut log = Vec::with_capacity(cfg.epochs);
    let mut step = 0;
    for epoch in 0..cfg.epochs {
        let mut total = 0.0;
        let mut count = 0;
        let mut lr = 0.0;
        for positions in epoch_batches(data.len(), cfg.batch_size, streams, epoch, true) {
            if positions.len() < 2 {
                continue;
            }
            let batch = data.batch(&positions);
            let x = timing.time("data", || {
                let (a, b) = make_views(&policy, &batch, streams, epoch);
                Tensor::concat_rows(&[&a, &b])
            })?;
            lr = schedule.lr(step);
            let loss = timing.time("update", || -> Result<f64> {
                let mut tape = Tape::new();
                let bound = model.bind(&mut tape, &Trainable::All);
                let xv = tape.constant(x);
                let pass = model.encode(&mut tape, &bound, xv, NormMode::Batch)?;
                let z = if cfg.projector {
                    model.project(&mut tape, &bound, pass.reps)?
                } else {
                    pass.reps
                };
                let loss = info_nce_stacked(&mut tape, z, cfg.temperature)?;
                let value = tape.value(loss).item()? as f64;
                let mut grads = tape.backward(loss)?;
                let grads = collect_grads(&bound, &mut grads);
                opt.step(&mut model.params, &grads, lr)?;
                model.update_running_stats(&tape, &pass)?;
                Ok(value)
            });
            let loss = match loss {
                Ok(v) if v.is_finite() => v,
                Ok(v) => return Err(diverged(epoch, v)),
                Err(Error::NonFinite(_)) => return Err(diverged(epoch, f64::NAN)),
                Err(e) => return Err(e),
            };
            total += loss;
            count += 1;
            step += 1;
        }
        log.push(Stage1EpochLog {
            epoch,
            mean_loss: if count > 0 { total / count as f64 } else { f64::NAN },
            lr: lr as f64,
            wall_seconds: start.elapsed().as_secs_f64(),
        });
    }
    Ok(Stage1Outcome {
        model,
        log,
        timing,
        seconds: start.elapsed().as_secs_f64(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::gen_synthetic;
    use rand::Rng;

    fn brute_force(za: &[Vec<f64>], zb: &[Vec<f64>], tau: f64) -> f64 {
        let norm = |v: &Vec<f64>| {
            let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            v.iter().map(|x| x / n).collect::<Vec<_>>()
        };
        let a: Vec<_> = za.iter().map(norm).collect();
        let b: Vec<_> = zb.iter().map(norm).collect();
        let dot = |x: &[f64], y: &[f64]| x.iter().zip(y).map(|(p, q)| p * q).sum::<f64>();
        let one_side = |a: &[Vec<f64>], b: &[Vec<f64>]| {
            let mut total = 0.0;
            for i in 0..a.len() {
                let pos = (dot(&a[i], &b[i]) / tau).exp();
                let mut denom = pos;
                for j in 0..a.len() {
                    if j != i {
                        denom += (dot(&a[i], &a[j]) / tau).exp() + (dot(&a[i], &b[j]) / tau).exp();
                    }
                }
                total += -(pos / denom).ln();
            }
            total / a.len() as f64
        };
        0.5 * (one_side(&a, &b) + one_side(&b, &a))
    }

    fn rows(rng: &mut impl Rng, b: usize, p: usize) -> Vec<Vec<f64>> {
        (0..b).map(|_| (0..p).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect()
    }

    fn eval(za: &[Vec<f64>], zb: &[Vec<f64>], tau: Real) -> f64 {
        let to_t = |r: &[Vec<f64>]| {
            Tensor::from_rows(&r.iter().map(|v| v.iter().map(|&x| x as Real).collect()).collect::<Vec<_>>()).unwrap()
        };
        let mut tape = Tape::new();
        let a = tape.constant(to_t(za));
        let b = tape.constant(to_t(zb));
        let l = info_nce(&mut tape, a, b, tau).unwrap();
        tape.value(l).item().unwrap() as f64
    }

    #[test]
    fn matches_brute_force() {
        let mut rng = SeedStreams::new(11).stream("t");
        for b in 1..=8 {
            let za = rows(&mut rng, b, 6);
            let zb = rows(&mut rng, b, 6);
            let got = eval(&za, &zb, 0.5);
            let want = brute_force(&za, &zb, 0.5);
            assert!((got - want).abs() < 1e-5, "B={b}: {got} vs {want}");
        }
    }

    #[test]
    fn single_pair_is_zero() {
        let za = vec![vec![1.0, 2.0, 0.5]];
        let zb = vec![vec![-0.3, 0.1, 0.9]];
        assert!(eval(&za, &zb, 0.2).abs() < 1e-6);
    }

    #[test]
    fn anchor_with_tied_negative_is_ln2() {
        for tau in [0.1, 0.5, 2.0] {
            let mut tape = Tape::new();
            let a = tape.constant(Tensor::from_rows(&[vec![1.0, 0.0]]).unwrap());
            let p = tape.constant(Tensor::from_rows(&[vec![0.6, 0.8]]).unwrap());
            let n = tape.constant(Tensor::from_rows(&[vec![0.6, -0.8]]).unwrap());
            let l = info_nce_anchor(&mut tape, a, p, Some(n), tau).unwrap();
            assert!((tape.value(l).item().unwrap() - std::f64::consts::LN_2 as Real).abs() < 1e-6);
        }
    }

    #[test]
    fn permutation_equivariant() {
        let mut rng = SeedStreams::new(12).stream("t");
        let za = rows(&mut rng, 5, 4);
        let zb = rows(&mut rng, 5, 4);
        let perm = [3, 0, 4, 1, 2];
        let pa: Vec<_> = perm.iter().map(|&i| za[i].clone()).collect();
        let pb: Vec<_> = perm.iter().map(|&i| zb[i].clone()).collect();
        assert!((eval(&za, &zb, 0.5) - eval(&pa, &pb, 0.5)).abs() < 1e-6);
    }

    #[test]
    fn removing_negatives_never_increases_loss() {
        let mut rng = SeedStreams::new(13).stream("t");
        for _ in 0..20 {
            let r = rows(&mut rng, 5, 4);
            let t = |v: &[Vec<f64>]| {
                Tensor::from_rows(&v.iter().map(|r| r.iter().map(|&x| x as Real).collect()).collect::<Vec<_>>())
                    .unwrap()
            };
            let mut tape = Tape::new();
            let a = tape.constant(t(&r[0..1]));
            let p = tape.constant(t(&r[1..2]));
            let n = tape.constant(t(&r[2..]));
            let with = info_nce_anchor(&mut tape, a, p, Some(n), 0.5).unwrap();
            let without = info_nce_anchor(&mut tape, a, p, None, 0.5).unwrap();
            assert!(tape.value(without).item().unwrap() <= tape.value(with).item().unwrap());
        }
    }

    #[test]
    fn zero_row_and_bad_tau_error() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::from_rows(&[vec![0.0, 0.0], vec![1.0, 0.0]]).unwrap());
        let b = tape.constant(Tensor::from_rows(&[vec![1.0, 1.0], vec![1.0, 0.0]]).unwrap());
        assert!(matches!(info_nce(&mut tape, a, b, 0.5), Err(Error::ZeroNorm(_))));
        assert!(info_nce(&mut tape, b, b, 0.0).is_err());
    }

    fn small_cfg(epochs: usize, lr: Real) -> Stage1Config {
        Stage1Config {
            epochs,
            batch_size: 8,
            lr,
            warmup_epochs: 0,
            ..Stage1Config::default()
        }
    }

    #[test]
    fn zero_lr_keeps_trainable_params() {
        let ds = gen_synthetic(4, 2, 1).unwrap();
        let enc = EncoderConfig::tiny(1, 16, 16);
        let streams = SeedStreams::new(4);
        let init = init_stage1_model(&enc, &small_cfg(1, 0.0), &streams).unwrap();
        let out = train_stage1(&ds.unlabeled(), &enc, &small_cfg(1, 0.0), &streams).unwrap();
        assert!(out.model.params.trainable_bit_eq(&init.params));
        assert_eq!(out.log.len(), 1);
        assert_eq!(ds.label_reads(), 0);
    }

    #[test]
    fn deterministic_per_seed() {
        let ds = gen_synthetic(4, 2, 1).unwrap();
        let enc = EncoderConfig::tiny(1, 16, 16);
        let run = || train_stage1(&ds.unlabeled(), &enc, &small_cfg(2, 0.05), &SeedStreams::new(8)).unwrap();
        let (a, b) = (run(), run());
        assert!(a.model.params.bit_eq(&b.model.params));
        assert_eq!(a.log[1].mean_loss, b.log[1].mean_loss);
    }

    #[test]
    fn config_validation() {
        let mut c = Stage1Config::default();
        c.temperature = 0.0;
        assert!(c.validate().is_err());
        let mut c = Stage1Config::default();
        c.batch_size = 1;
        assert!(c.validate().is_err());
    }
}
