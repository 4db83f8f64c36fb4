//! Linear probing, adversarial full finetuning and robustness measurement.

use std::path::Path;
use std::time::Instant;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::attack::{cross_entropy_rows, pgd, AttackConfig, AttackSurface, Head, ModelSurface, ObjectiveContext, ObjectiveKind};
use crate::data::{augment_batch, epoch_batches, sequential_batches, AugmentKind, AugmentationPolicy, Dataset, Split};
use crate::models::{Model, NormMode, Trainable};
use crate::optim::{collect_grads, CosineSchedule, Sgd};
use crate::seed::SeedStreams;
use crate::tensor::{Real, Tape, Tensor};
use crate::{Error, Result};

/// A classifier that can be measured and attacked with cross-entropy.
pub trait Evaluable {
    fn logits(&self, x: &Tensor) -> Result<Tensor>;
    /// Per-sample CE and its input gradient.
    fn ce_value_and_grad(&self, x: &Tensor, labels: &[usize]) -> Result<(Vec<Real>, Tensor)>;
}

impl Evaluable for Model {
    fn logits(&self, x: &Tensor) -> Result<Tensor> {
        Model::logits(self, x)
    }

    fn ce_value_and_grad(&self, x: &Tensor, labels: &[usize]) -> Result<(Vec<Real>, Tensor)> {
        let ctx = ObjectiveContext::Labels(labels.to_vec());
        ModelSurface::new(self, Head::Classifier, NormMode::Running, ObjectiveKind::CrossEntropy, &ctx).value_and_grad(x)
    }
}

/// `logits = x W^T + b` on flattened inputs; the fixture on which PGD is
/// exact and robust accuracy must fall monotonically with the budget.
#[derive(Clone, Debug)]
pub struct LinearClassifier {
    /// `[K, n]`
    pub weight: Tensor,
    pub bias: Vec<Real>,
}

impl LinearClassifier {
    /// Two-class model with random weights over `n` pixels and `samples`
    /// uniform images labelled by the model itself (clean accuracy 100%). Sign steps reach the exact worst
    /// case here, so RA must fall monotonically with the budget.
    pub fn binary_fixture(n: usize, samples: usize, seed: u64) -> Result<(Self, Dataset)> {
        let mut rng = SeedStreams::new(seed).stream("linear-fixture");
        let w: Vec<Real> = (0..2 * n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let mut images = Vec::with_capacity(samples * n);
        let mut labels = Vec::with_capacity(samples);
        for _ in 0..samples {
            let x: Vec<Real> = (0..n).map(|_| rng.gen_range(0.0..1.0) as Real).collect();
            let score = |k: usize| x.iter().zip(&w[k * n..(k + 1) * n]).map(|(a, b)| a * b).sum::<Real>();
            labels.push(u8::from(score(1) > score(0)));
            images.extend(x);
        }
        let ds = Dataset::new([1, 1, n], 2, images, labels, Split::Test)?;
        let lin = LinearClassifier {
            weight: Tensor::new(vec![2, n], w)?,
            bias: vec![0.0, 0.0],
        };
        Ok((lin, ds))
    }

    fn graph(&self, tape: &mut Tape, x: &Tensor, grad: bool) -> Result<(crate::tensor::Var, crate::tensor::Var)> {
        let flat = x.clone().reshape(vec![x.rows(), x.row_len()])?;
        let xv = tape.leaf(flat, grad);
        let w = tape.constant(self.weight.clone());
        let b = tape.constant(Tensor::vector(&self.bias));
        Ok((xv, tape.linear(xv, w, Some(b))?))
    }
}

impl Evaluable for LinearClassifier {
    fn logits(&self, x: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let (_, l) = self.graph(&mut tape, x, false)?;
        Ok(tape.value(l).clone())
    }

    fn ce_value_and_grad(&self, x: &Tensor, labels: &[usize]) -> Result<(Vec<Real>, Tensor)> {
        let mut tape = Tape::new();
        let (xv, l) = self.graph(&mut tape, x, true)?;
        let per = cross_entropy_rows(&mut tape, l, labels)?;
        let values = tape.value(per).data().to_vec();
        let total = tape.sum(per)?;
        let mut g = tape.backward(total)?;
        let gx = g.take(xv).ok_or(Error::NonFinite("input gradient"))?;
        Ok((values, gx.reshape(x.shape().to_vec())?))
    }
}

struct CeSurface<'a, E: Evaluable + ?Sized> {
    model: &'a E,
    labels: &'a [usize],
}

impl<E: Evaluable + ?Sized> AttackSurface for CeSurface<'_, E> {
    fn value_and_grad(&mut self, x: &Tensor) -> Result<(Vec<Real>, Tensor)> {
        self.model.ce_value_and_grad(x, self.labels)
    }
}

fn argmax_rows(logits: &Tensor) -> Vec<usize> {
    (0..logits.rows())
        .map(|i| {
            logits
                .row(i)
                .iter()
                .enumerate()
                .fold((0, Real::NEG_INFINITY), |acc, (j, &v)| if v > acc.1 { (j, v) } else { acc })
                .0
        })
        .collect()
}

fn percent(bits: &[bool]) -> f64 {
    if bits.is_empty() {
        return 0.0;
    }
    100.0 * bits.iter().filter(|&&b| b).count() as f64 / bits.len() as f64
}

/// Clean and adversarial accuracy with per-sample correctness.
#[derive(Clone, Debug, PartialEq)]
pub struct Measurement {
    pub sa: f64,
    pub ra: f64,
    pub clean_correct: Vec<bool>,
    pub adv_correct: Vec<bool>,
}

impl Measurement {
    /// RA recomputed from the stored bitmap.
    pub fn ra_from_bitmap(&self) -> f64 {
        percent(&self.adv_correct)
    }
}

pub const EVAL_BATCH: usize = 128;

/// SA on clean inputs and RA under `attack` (cross-entropy), in stable
/// index order.
pub fn measure<E: Evaluable + ?Sized>(model: &E, test: &Dataset, attack: &AttackConfig, streams: &SeedStreams) -> Result<Measurement> {
    attack.validate()?;
    let mut clean_correct = Vec::with_capacity(test.len());
    let mut adv_correct = Vec::with_capacity(test.len());
    for (bi, positions) in sequential_batches(test.len(), EVAL_BATCH).into_iter().enumerate() {
        let batch = test.batch(&positions);
        let labels = test.labels(&positions);
        let pred = argmax_rows(&model.logits(&batch.images)?);
        clean_correct.extend(pred.iter().zip(&labels).map(|(p, y)| p == y));
        let mut surface = CeSurface { model, labels: &labels };
        let adv = pgd(&mut surface, &batch.images, attack, &mut streams.keyed("measure", &[bi as u64]))?;
        let moved = adv.max_abs_diff(&batch.images);
        if moved as f64 > attack.epsilon as f64 + 1e-6 || adv.data().iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::Config(format!("attack left the budget: moved {moved}, epsilon {}", attack.epsilon)));
        }
        let pred = argmax_rows(&model.logits(&adv)?);
        adv_correct.extend(pred.iter().zip(&labels).map(|(p, y)| p == y));
    }
    Ok(Measurement {
        sa: percent(&clean_correct),
        ra: percent(&adv_correct),
        clean_correct,
        adv_correct,
    })
}

/// Step size used by the sweep for a budget and step count.
pub fn sweep_alpha(epsilon: Real, steps: usize) -> Real {
    if steps == 0 {
        0.0
    } else {
        2.5 * epsilon / steps as Real
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub steps: usize,
    pub eps: f64,
    pub ra: f64,
}

/// RA for every `(steps, eps)` pair. Each pair gets its own attack stream so
/// duplicates agree.
pub fn sweep<E: Evaluable + ?Sized>(
    model: &E,
    test: &Dataset,
    steps: &[usize],
    epsilons: &[Real],
    streams: &SeedStreams,
) -> Result<Vec<SweepRow>> {
    let mut rows = Vec::with_capacity(steps.len() * epsilons.len());
    for &s in steps {
        for &eps in epsilons {
            let cfg = AttackConfig {
                epsilon: eps,
                alpha: sweep_alpha(eps, s),
                steps: s,
                ..AttackConfig::evaluation()
            };
            let m = measure(model, test, &cfg, &streams.child(&format!("sweep/{s}/{:08x}", (eps as f32).to_bits())))?;
            rows.push(SweepRow {
                steps: s,
                eps: eps as f64,
                ra: m.ra,
            });
        }
    }
    Ok(rows)
}

fn check_classes(train: &Dataset, test: &Dataset) -> Result<()> {
    if train.classes() != test.classes() {
        return Err(Error::Data(format!(
            "label count mismatch: train has {} classes, test {}",
            train.classes(),
            test.classes()
        )));
    }
    if train.image_shape() != test.image_shape() {
        return Err(Error::Data("train and test image shapes differ".into()));
    }
    Ok(())
}

/// Encoder representations of every image, in dataset order.
pub fn features(encoder: &Model, data: &Dataset) -> Result<Tensor> {
    let mut out = Vec::with_capacity(data.len() * encoder.rep_dim());
    for positions in sequential_batches(data.len(), EVAL_BATCH) {
        out.extend_from_slice(encoder.represent(&data.batch(&positions).images)?.data());
    }
    Tensor::new(vec![data.len(), encoder.rep_dim()], out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SlfConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: Real,
    pub momentum: Real,
    pub weight_decay: Real,
    pub attack: AttackConfig,
    pub aa_proxy: bool,
}

impl Default for SlfConfig {
    fn default() -> Self {
        Self {
            epochs: 25,
            batch_size: 64,
            lr: 0.1,
            momentum: 0.9,
            weight_decay: 0.0,
            attack: AttackConfig::evaluation(),
            aa_proxy: false,
        }
    }
}

#[derive(Clone, Debug)]
pub struct FinetuneOutcome {
    /// Encoder plus classifier.
    pub model: Model,
    pub measurement: Measurement,
    pub aa_proxy: Option<f64>,
    pub train_accuracy: f64,
    /// Probe RA after each epoch (AFF only).
    pub probe_ra: Vec<f64>,
    pub encoder_hash_before: String,
    pub encoder_hash_after: String,
    pub seconds: f64,
}

/// Train a linear classifier on frozen features (cross-entropy on clean
/// inputs, features computed once).
pub fn train_linear_head(
    model: &mut Model,
    feats: &Tensor,
    labels: &[usize],
    cfg: &SlfConfig,
    streams: &SeedStreams,
) -> Result<()> {
    let n = feats.rows();
    let per_epoch = epoch_batches(n, cfg.batch_size, streams, 0, false).len();
    let schedule = CosineSchedule {
        base_lr: cfg.lr,
        warmup: 0,
        total: cfg.epochs * per_epoch,
    };
    let mut opt = Sgd::new(cfg.momentum, cfg.weight_decay);
    let trainable = Trainable::Prefixes(vec!["classifier.".into()]);
    let mut step = 0;
    for epoch in 0..cfg.epochs {
        for positions in epoch_batches(n, cfg.batch_size, streams, epoch, false) {
            let mut tape = Tape::new();
            let bound = model.bind(&mut tape, &trainable);
            let f = tape.constant(feats.select_rows(&positions));
            let logits = model.classify(&mut tape, &bound, f)?;
            let y: Vec<usize> = positions.iter().map(|&p| labels[p]).collect();
            let ce = cross_entropy_rows(&mut tape, logits, &y)?;
            let loss = tape.mean(ce)?;
            let mut g = tape.backward(loss)?;
            let grads = collect_grads(&bound, &mut g);
            opt.step(&mut model.params, &grads, schedule.lr(step))?;
            step += 1;
        }
    }
    Ok(())
}

fn aa_proxy(model: &Model, test: &Dataset, enabled: bool, epsilon: Real, streams: &SeedStreams) -> Result<Option<f64>> {
    if !enabled {
        return Ok(None);
    }
    let cfg = AttackConfig {
        epsilon,
        ..AttackConfig::aa_proxy()
    };
    Ok(Some(measure(model, test, &cfg, &streams.child("aa-proxy"))?.ra))
}

/// Standard linear finetuning: only the classifier learns.
pub fn slf(encoder: &Model, train: &Dataset, test: &Dataset, cfg: &SlfConfig, streams: &SeedStreams) -> Result<FinetuneOutcome> {
    check_classes(train, test)?;
    let start = Instant::now();
    let enc = encoder.encoder_only();
    let encoder_hash_before = enc.encoder_hash();
    let feats = features(&enc, train)?;
    let labels = train.all_labels();
    let mut model = enc.with_classifier(train.classes(), &mut streams.stream("init/classifier"))?;
    train_linear_head(&mut model, &feats, &labels, cfg, &streams.child("slf"))?;
    let encoder_hash_after = model.encoder_hash();
    if encoder_hash_after != encoder_hash_before {
        return Err(Error::HashMismatch("encoder changed during linear finetuning".into()));
    }
    let pred = argmax_rows(&model.classify_features(&feats)?);
    let train_accuracy = percent(&pred.iter().zip(&labels).map(|(p, y)| p == y).collect::<Vec<_>>());
    let measurement = measure(&model, test, &cfg.attack, &streams.child("measure"))?;
    let aa = aa_proxy(&model, test, cfg.aa_proxy, cfg.attack.epsilon, streams)?;
    Ok(FinetuneOutcome {
        model,
        measurement,
        aa_proxy: aa,
        train_accuracy,
        probe_ra: Vec::new(),
        encoder_hash_before,
        encoder_hash_after,
        seconds: start.elapsed().as_secs_f64(),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AffConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: Real,
    pub momentum: Real,
    pub weight_decay: Real,
    pub augmentation: AugmentKind,
    /// Attack crafted against the model at each training step.
    pub train_attack: AttackConfig,
    /// Attack for the final measurement.
    pub attack: AttackConfig,
    /// Test samples used for the per-epoch probe; 0 disables it.
    pub probe_size: usize,
    pub probe_attack: AttackConfig,
    pub aa_proxy: bool,
}

impl Default for AffConfig {
    fn default() -> Self {
        let train_attack = AttackConfig {
            steps: 5,
            ..AttackConfig::evaluation()
        };
        Self {
            epochs: 25,
            batch_size: 64,
            lr: 0.05,
            momentum: 0.9,
            weight_decay: 5e-4,
            augmentation: AugmentKind::Weak,
            probe_attack: train_attack.clone(),
            train_attack,
            attack: AttackConfig::evaluation(),
            probe_size: 0,
            aa_proxy: false,
        }
    }
}

/// Adversarial full finetuning: encoder and classifier trained on PGD
/// examples crafted with cross-entropy.
pub fn aff(encoder: &Model, train: &Dataset, test: &Dataset, cfg: &AffConfig, streams: &SeedStreams) -> Result<FinetuneOutcome> {
    check_classes(train, test)?;
    cfg.train_attack.validate()?;
    let start = Instant::now();
    let enc = encoder.encoder_only();
    let encoder_hash_before = enc.encoder_hash();
    let mut model = enc.with_classifier(train.classes(), &mut streams.stream("init/classifier"))?;
    let policy = AugmentationPolicy::of(cfg.augmentation);
    let per_epoch = epoch_batches(train.len(), cfg.batch_size, streams, 0, false).len();
    let schedule = CosineSchedule {
        base_lr: cfg.lr,
        warmup: 0,
        total: cfg.epochs * per_epoch,
    };
    let mut opt = Sgd::new(cfg.momentum, cfg.weight_decay);
    let probe = (cfg.probe_size > 0).then(|| test.subset(&(0..cfg.probe_size.min(test.len())).collect::<Vec<_>>()));
    let order = streams.child("aff");
    let mut probe_ra = Vec::new();
    let (mut correct, mut seen) = (0usize, 0usize);
    let mut step = 0;
    for epoch in 0..cfg.epochs {
        correct = 0;
        seen = 0;
        for positions in epoch_batches(train.len(), cfg.batch_size, &order, epoch, false) {
            let batch = train.batch(&positions);
            let labels = train.labels(&positions);
            let x = augment_batch(&policy, &batch, &order, epoch, 0);
            let ctx = ObjectiveContext::Labels(labels.clone());
            let x_adv = {
                let mut surface = ModelSurface::new(&model, Head::Classifier, NormMode::Batch, ObjectiveKind::CrossEntropy, &ctx);
                pgd(&mut surface, &x, &cfg.train_attack, &mut order.keyed("attack", &[epoch as u64, step as u64]))?
            };
            let mut tape = Tape::new();
            let bound = model.bind(&mut tape, &Trainable::All);
            let xv = tape.constant(x_adv);
            let pass = model.encode(&mut tape, &bound, xv, NormMode::Batch)?;
            let logits = model.classify(&mut tape, &bound, pass.reps)?;
            let pred = argmax_rows(tape.value(logits));
            correct += pred.iter().zip(&labels).filter(|(p, y)| p == y).count();
            seen += labels.len();
            let ce = cross_entropy_rows(&mut tape, logits, &labels)?;
            let loss = tape.mean(ce)?;
            let mut g = tape.backward(loss)?;
            let grads = collect_grads(&bound, &mut g);
            opt.step(&mut model.params, &grads, schedule.lr(step))?;
            model.update_running_stats(&tape, &pass)?;
            step += 1;
        }
        if let Some(p) = &probe {
            let m = measure(&model, p, &cfg.probe_attack, &streams.child("probe"))?;
            probe_ra.push(m.ra);
        }
    }
    let measurement = measure(&model, test, &cfg.attack, &streams.child("measure"))?;
    let aa = aa_proxy(&model, test, cfg.aa_proxy, cfg.attack.epsilon, streams)?;
    let encoder_hash_after = model.encoder_hash();
    Ok(FinetuneOutcome {
        model,
        measurement,
        aa_proxy: aa,
        train_accuracy: if seen > 0 { 100.0 * correct as f64 / seen as f64 } else { 0.0 },
        probe_ra,
        encoder_hash_before,
        encoder_hash_after,
        seconds: start.elapsed().as_secs_f64(),
    })
}

/// First epoch (1-based) at which the probe reaches `threshold`.
pub fn epochs_to_threshold(probe_ra: &[f64], threshold: f64) -> Option<usize> {
    probe_ra.iter().position(|&r| r >= threshold).map(|i| i + 1)
}

/// Write `index,label,e0..e{d-1}` for every sample.
pub fn export_embeddings(encoder: &Model, data: &Dataset, path: &Path) -> Result<usize> {
    let feats = features(encoder, data)?;
    let labels = data.all_labels();
    let mut w = csv::Writer::from_path(path)?;
    let mut header = vec!["index".to_string(), "label".to_string()];
    header.extend((0..encoder.rep_dim()).map(|i| format!("e{i}")));
    w.write_record(&header)?;
    for (r, (&id, y)) in data.ids().iter().zip(&labels).enumerate() {
        let mut rec = vec![id.to_string(), y.to_string()];
        rec.extend(feats.row(r).iter().map(|v| format!("{v:.7e}")));
        w.write_record(&rec)?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(data.len())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::gen_synthetic;
    use crate::models::{EncoderConfig, ModelSpec, ProjectorConfig};

    fn encoder() -> Model {
        let spec = ModelSpec {
            encoder: EncoderConfig::tiny(1, 16, 16),
            projector: ProjectorConfig::disabled(),
            classes: None,
        };
        Model::new(spec, &mut SeedStreams::new(40).stream("e")).unwrap()
    }

    #[test]
    fn slf_keeps_encoder_and_zero_lr_keeps_classifier() {
        let train = gen_synthetic(4, 3, 1).unwrap();
        let test = gen_synthetic(2, 3, 2).unwrap();
        let cfg = SlfConfig {
            epochs: 2,
            lr: 0.0,
            attack: AttackConfig {
                steps: 2,
                ..AttackConfig::evaluation()
            },
            ..SlfConfig::default()
        };
        let streams = SeedStreams::new(3);
        let out = slf(&encoder(), &train, &test, &cfg, &streams).unwrap();
        assert_eq!(out.encoder_hash_before, out.encoder_hash_after);
        let init = encoder().with_classifier(3, &mut streams.stream("init/classifier")).unwrap();
        assert!(out.model.params.bit_eq(&init.params));
        let again = measure(&init, &test, &cfg.attack, &streams.child("measure")).unwrap();
        assert_eq!(again, out.measurement);
        assert_eq!(out.measurement.ra, out.measurement.ra_from_bitmap());
    }

    #[test]
    fn linear_head_separates_one_hot_features() {
        let k = 4;
        let mut rng = SeedStreams::new(2).stream("f");
        let labels: Vec<usize> = (0..64).map(|i| i % k).collect();
        let d = 32;
        let data = labels
            .iter()
            .flat_map(|&y| (0..d).map(move |j| if j == y { 1.0 } else { 0.0 }).collect::<Vec<Real>>())
            .map(|v| v + rng.gen_range(-0.01..0.01))
            .collect();
        let feats = Tensor::new(vec![64, d], data).unwrap();
        let mut model = encoder().with_classifier(k, &mut rng).unwrap();
        let cfg = SlfConfig {
            epochs: 30,
            ..SlfConfig::default()
        };
        train_linear_head(&mut model, &feats, &labels, &cfg, &SeedStreams::new(1)).unwrap();
        let pred = argmax_rows(&model.classify_features(&feats).unwrap());
        assert!(pred.iter().zip(&labels).all(|(p, y)| p == y));
    }

    #[test]
    fn class_mismatch_rejected() {
        let train = gen_synthetic(2, 3, 1).unwrap();
        let test = gen_synthetic(2, 2, 2).unwrap();
        assert!(slf(&encoder(), &train, &test, &SlfConfig::default(), &SeedStreams::new(1)).is_err());
    }

    #[test]
    fn zero_budget_ra_equals_sa() {
        let test = gen_synthetic(4, 3, 2).unwrap();
        let m = encoder().with_classifier(3, &mut SeedStreams::new(1).stream("c")).unwrap();
        let cfg = AttackConfig {
            epsilon: 0.0,
            ..AttackConfig::evaluation()
        };
        let r = measure(&m, &test, &cfg, &SeedStreams::new(1)).unwrap();
        assert_eq!(r.sa, r.ra);
    }

    #[test]
    fn constant_model_on_constant_labels() {
        let n = 6;
        let test = Dataset::new([1, 2, 2], 2, vec![0.5; n * 4], vec![1; n], Split::Test).unwrap();
        let lin = LinearClassifier {
            weight: Tensor::zeros(vec![2, 4]),
            bias: vec![0.0, 1.0],
        };
        let r = measure(&lin, &test, &AttackConfig::evaluation(), &SeedStreams::new(1)).unwrap();
        assert_eq!((r.sa, r.ra), (100.0, 100.0));
    }

    fn linear_fixture() -> (LinearClassifier, Dataset) {
        LinearClassifier::binary_fixture(8, 200, 7).unwrap()
    }

    #[test]
    fn sweep_is_monotone_on_linear_fixture() {
        let (lin, ds) = linear_fixture();
        let eps = [0.0, 0.01, 0.02, 0.05, 0.1, 0.2];
        let rows = sweep(&lin, &ds, &[1, 5, 20], &eps, &SeedStreams::new(1)).unwrap();
        let sa = measure(&lin, &ds, &AttackConfig::evaluation(), &SeedStreams::new(1)).unwrap().sa;
        for chunk in rows.chunks(eps.len()) {
            assert_eq!(chunk[0].ra, sa);
            for w in chunk.windows(2) {
                assert!(w[1].ra <= w[0].ra);
            }
        }
        let dup = sweep(&lin, &ds, &[5, 5], &[0.05], &SeedStreams::new(1)).unwrap();
        assert_eq!(dup[0].ra, dup[1].ra);
    }

    #[test]
    fn aff_zero_epochs_keeps_encoder() {
        let train = gen_synthetic(2, 2, 1).unwrap();
        let test = gen_synthetic(2, 2, 2).unwrap();
        let cfg = AffConfig {
            epochs: 0,
            attack: AttackConfig {
                steps: 1,
                ..AttackConfig::evaluation()
            },
            ..AffConfig::default()
        };
        let e = encoder();
        let out = aff(&e, &train, &test, &cfg, &SeedStreams::new(1)).unwrap();
        assert_eq!(out.encoder_hash_after, e.encoder_hash());
        assert!(out.probe_ra.is_empty());
    }

    #[test]
    fn threshold_epochs() {
        assert_eq!(epochs_to_threshold(&[10.0, 30.0, 50.0], 30.0), Some(2));
        assert_eq!(epochs_to_threshold(&[10.0], 30.0), None);
    }

    #[test]
    fn export_rows() {
        let ds = gen_synthetic(3, 2, 1).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("emb.csv");
        let e = encoder();
        assert_eq!(export_embeddings(&e, &ds, &p).unwrap(), 6);
        let text = std::fs::read_to_string(&p).unwrap();
        assert_eq!(text.lines().count(), 7);
        let first: Vec<Real> = text.lines().nth(1).unwrap().split(',').skip(2).map(|v| v.parse().unwrap()).collect();
        let want = e.represent(&ds.batch(&[0]).images).unwrap();
        for (a, b) in first.iter().zip(want.data()) {
            assert!((a - b).abs() < 1e-6);
        }
    }
}
