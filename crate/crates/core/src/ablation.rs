//! Stage-2 ablation grids over one configuration axis and several seeds.

use std::collections::BTreeMap;
use std::path::Path;
use std::str::FromStr;

use crate::config::RunConfig;
use crate::data::AugmentKind;
use crate::distill::{train_stage2, Distance, LossForm, Stage2Config, Stage2EpochLog, StudentInit};
use crate::eval::slf;
use crate::models::Model;
use crate::pretrain::train_stage1;
use crate::report::{median, write_metrics_csv, MetricsRecord, Protocol};
use crate::seed::SeedStreams;
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub enum Axis {
    WeightDecay,
    Augmentation,
    Projector,
    Collapse,
    StudentInit,
    Lambda,
    Distance,
    LossForm,
}

impl Axis {
    pub const ALL: [Axis; 8] = [
        Axis::WeightDecay,
        Axis::Augmentation,
        Axis::Projector,
        Axis::Collapse,
        Axis::StudentInit,
        Axis::Lambda,
        Axis::Distance,
        Axis::LossForm,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Axis::WeightDecay => "weight_decay",
            Axis::Augmentation => "augmentation",
            Axis::Projector => "projector",
            Axis::Collapse => "collapse",
            Axis::StudentInit => "student_init",
            Axis::Lambda => "lambda",
            Axis::Distance => "distance",
            Axis::LossForm => "loss_form",
        }
    }

    /// Values swept when none are given.
    pub fn default_values(self) -> Vec<String> {
        let v: &[&str] = match self {
            Axis::WeightDecay => &["1e-6", "1e-5", "1e-4", "5e-4", "1e-3", "5e-3"],
            Axis::Augmentation => &["weak", "strong-ae", "strong"],
            Axis::Projector | Axis::Collapse => &["off", "on"],
            Axis::StudentInit => &["teacher", "random"],
            Axis::Lambda => &["0", "0.5", "1", "2", "4"],
            Axis::Distance => &["cos", "kl"],
            Axis::LossForm => &["trades", "direct"],
        };
        v.iter().map(|s| s.to_string()).collect()
    }

    /// Set this axis to `value` in `cfg`.
    pub fn apply(self, value: &str, cfg: &mut Stage2Config) -> Result<()> {
        let bad = || Error::Config(format!("{value:?} is not a value of axis {}", self.name()));
        let on_off = || match value {
            "on" | "true" => Ok(true),
            "off" | "false" => Ok(false),
            _ => Err(bad()),
        };
        match self {
            Axis::WeightDecay => cfg.weight_decay = value.parse().map_err(|_| bad())?,
            Axis::Lambda => cfg.lambda = value.parse().map_err(|_| bad())?,
            Axis::Augmentation => {
                let (ce, ae) = match value {
                    "weak" => (AugmentKind::Weak, AugmentKind::Weak),
                    "strong-ae" => (AugmentKind::Weak, AugmentKind::Strong),
                    "strong" => (AugmentKind::Strong, AugmentKind::Strong),
                    "none" => (AugmentKind::None, AugmentKind::None),
                    _ => return Err(bad()),
                };
                cfg.aug_clean = ce;
                cfg.aug_adv = ae;
            }
            Axis::Projector => cfg.projector = on_off()?,
            Axis::Collapse => cfg.collapse_prevention = on_off()?,
            Axis::StudentInit => {
                cfg.student_init = match value {
                    "teacher" => StudentInit::Teacher,
                    "random" => StudentInit::Random,
                    _ => return Err(bad()),
                }
            }
            Axis::Distance => {
                cfg.distance = match value {
                    "cos" | "cosine" => Distance::Cosine,
                    "kl" => Distance::Kl,
                    _ => return Err(bad()),
                }
            }
            Axis::LossForm => {
                cfg.loss_form = match value {
                    "trades" => LossForm::Trades,
                    "direct" => LossForm::Direct,
                    _ => return Err(bad()),
                }
            }
        }
        cfg.validate()
    }
}

impl FromStr for Axis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let norm = s.replace('-', "_");
        Axis::ALL
            .into_iter()
            .find(|a| a.name() == norm)
            .ok_or_else(|| Error::Config(format!("unknown ablation axis {s:?}")))
    }
}

/// The stage-2 configs an ablation will train, one per value.
pub fn grid(base: &Stage2Config, axis: Axis, values: &[String]) -> Result<Vec<(String, Stage2Config)>> {
    values
        .iter()
        .map(|v| {
            let mut c = base.clone();
            axis.apply(v, &mut c)?;
            Ok((v.clone(), c))
        })
        .collect()
}

/// One trained and evaluated grid cell.
#[derive(Clone, Debug)]
pub struct AblationPoint {
    pub value: String,
    pub seed: u64,
    pub sa: f64,
    pub ra: f64,
    pub log: Vec<Stage2EpochLog>,
    pub initial_clean_term: Option<f64>,
}

#[derive(Clone, Debug)]
pub struct AblationResult {
    pub axis: Axis,
    pub points: Vec<AblationPoint>,
    pub metrics: Vec<MetricsRecord>,
}

impl AblationResult {
    pub fn of(&self, value: &str) -> impl Iterator<Item = &AblationPoint> + '_ {
        let value = value.to_string();
        self.points.iter().filter(move |p| p.value == value)
    }

    pub fn median_ra(&self, value: &str) -> Option<f64> {
        median(&self.of(value).map(|p| p.ra).collect::<Vec<_>>())
    }

    pub fn median_sa(&self, value: &str) -> Option<f64> {
        median(&self.of(value).map(|p| p.sa).collect::<Vec<_>>())
    }

    /// Median RA per value, in grid order.
    pub fn table(&self) -> BTreeMap<String, (f64, f64)> {
        let mut out = BTreeMap::new();
        for p in &self.points {
            out.entry(p.value.clone()).or_insert_with(|| {
                (self.median_sa(&p.value).unwrap_or(0.0), self.median_ra(&p.value).unwrap_or(0.0))
            });
        }
        out
    }
}

/// Epochs until the clean term is within 10% of the distance between its
/// starting value and its final value, counted from the start: 0 when the
/// starting value already qualifies (e.g. a student that begins at its final
/// level), otherwise the 1-based epoch of the first qualifying epoch mean.
pub fn epochs_to_90pct(initial: f64, log: &[Stage2EpochLog]) -> Option<usize> {
    let last = log.last()?.loss_clean_term;
    let threshold = last + 0.1 * (initial - last).abs();
    if initial <= threshold {
        return Some(0);
    }
    log.iter()
        .position(|l| l.loss_clean_term <= threshold)
        .map(|i| i + 1)
}

/// Train one teacher per seed, then a student and SLF probe per grid value.
/// When `evaluate` is false only stage 2 runs (for log-based comparisons).
pub fn run_ablation(
    base: &RunConfig,
    axis: Axis,
    values: &[String],
    seeds: &[u64],
    evaluate: bool,
    out_dir: Option<&Path>,
) -> Result<AblationResult> {
    let cells = grid(&base.stage2, axis, values)?;
    let hash = base.hash();
    let mut points = Vec::new();
    let mut metrics = Vec::new();
    for &seed in seeds {
        let mut cfg = base.clone();
        cfg.seed = seed;
        let streams = SeedStreams::new(seed);
        let (train, test) = cfg.data.load(seed)?;
        let teacher: Model = train_stage1(&train.unlabeled(), &cfg.model, &cfg.stage1, &streams.child("stage1"))?.model;
        for (value, s2) in &cells {
            let out = train_stage2(&train.unlabeled(), &teacher, s2, &streams.child("stage2"), None)?;
            let (sa, ra) = if evaluate {
                let student = out.student.encoder_only();
                let e = slf(&student, &train, &test, &cfg.slf, &streams.child("slf/deacl"))?;
                metrics.push(MetricsRecord {
                    run_id: format!("{}={value}", axis.name()),
                    protocol: Protocol::Slf,
                    sa: e.measurement.sa,
                    ra: e.measurement.ra,
                    aa_proxy: e.aa_proxy,
                    eps: cfg.slf.attack.epsilon as f64,
                    steps: cfg.slf.attack.steps,
                    restarts: cfg.slf.attack.restarts,
                    seed,
                    stage1_seconds: None,
                    stage2_seconds: None,
                    finetune_seconds: None,
                    config_hash: hash.clone(),
                });
                (e.measurement.sa, e.measurement.ra)
            } else {
                (f64::NAN, f64::NAN)
            };
            points.push(AblationPoint {
                value: value.clone(),
                seed,
                sa,
                ra,
                log: out.log,
                initial_clean_term: out.initial_clean_term,
            });
        }
    }
    if let Some(dir) = out_dir {
        write_metrics_csv(&dir.join(format!("ablate_{}.csv", axis.name())), &metrics)?;
    }
    Ok(AblationResult { axis, points, metrics })
}
