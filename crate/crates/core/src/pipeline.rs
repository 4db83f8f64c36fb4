//! End-to-end runs: stage 1, stage 2, evaluation, artifacts on disk.

use std::path::{Path, PathBuf};

use crate::config::{RunConfig, ASSUMPTIONS};
use crate::data::Dataset;
use crate::distill::{train_stage2, Stage2Outcome};
use crate::eval::{aff, slf, FinetuneOutcome};
use crate::models::{load_checkpoint, save_checkpoint, CheckpointMeta, Model};
use crate::pretrain::{train_stage1, Stage1Outcome};
use crate::report::{write_metrics_csv, write_stage1_log, write_stage2_log, MetricsRecord, Protocol, TimingReport};
use crate::seed::SeedStreams;
use crate::attack::AttackConfig;
use crate::{Error, Result};

pub const TEACHER_CKPT: &str = "teacher.ckpt";
pub const STUDENT_CKPT: &str = "student.ckpt";
pub const METRICS_CSV: &str = "metrics.csv";

/// A run's working context: config, its hash, streams and output dir.
pub struct Run {
    pub config: RunConfig,
    pub hash: String,
    pub streams: SeedStreams,
    pub dir: PathBuf,
    pub timing: TimingReport,
}

impl Run {
    /// Validate the config and create the output directory with a verbatim
    /// copy of the config and its hash.
    pub fn start(config: RunConfig) -> Result<Run> {
        let dir = config.resolved_output_dir();
        Self::start_in(config, dir)
    }

    /// As [`Run::start`], writing to `dir` regardless of `DEACL_OUT`.
    pub fn start_in(config: RunConfig, dir: PathBuf) -> Result<Run> {
        config.validate()?;
        std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        let hash = config.hash();
        let cfg_path = dir.join("config.json");
        std::fs::write(&cfg_path, config.to_json()).map_err(|e| Error::io(&cfg_path, e))?;
        let assumed: serde_json::Map<String, serde_json::Value> =
            ASSUMPTIONS.iter().map(|(k, v)| (k.to_string(), (*v).into())).collect();
        let a_path = dir.join("assumptions.json");
        std::fs::write(&a_path, serde_json::to_string_pretty(&assumed)?).map_err(|e| Error::io(&a_path, e))?;
        let hash_path = dir.join("config.hash");
        std::fs::write(&hash_path, format!("{hash}\n")).map_err(|e| Error::io(&hash_path, e))?;
        Ok(Run {
            streams: SeedStreams::new(config.seed),
            timing: TimingReport::new(&hash),
            hash,
            dir,
            config,
        })
    }

    pub fn load_data(&self) -> Result<(Dataset, Dataset)> {
        self.config.data.load(self.config.seed)
    }

    fn meta(&self, model: &Model, epoch: usize, role: &str) -> CheckpointMeta {
        CheckpointMeta {
            spec: model.spec().clone(),
            seed: self.config.seed,
            epoch,
            config_hash: self.hash.clone(),
            role: role.into(),
        }
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    pub fn pretrain(&mut self, train: &Dataset) -> Result<Stage1Outcome> {
        let out = train_stage1(&train.unlabeled(), &self.config.model, &self.config.stage1, &self.streams.child("stage1"))?;
        save_checkpoint(&out.model, &self.meta(&out.model, self.config.stage1.epochs, "teacher"), &self.path(TEACHER_CKPT))?;
        write_stage1_log(&self.path("stage1_loss.csv"), &out.log, &self.hash)?;
        self.timing.record("stage1", out.seconds, Some(&out.timing));
        Ok(out)
    }

    pub fn distill(&mut self, train: &Dataset, teacher: &Model, probe: Option<&Dataset>) -> Result<Stage2Outcome> {
        let probe = probe.map(Dataset::unlabeled);
        let out = train_stage2(
            &train.unlabeled(),
            teacher,
            &self.config.stage2,
            &self.streams.child("stage2"),
            probe.as_ref(),
        )?;
        save_checkpoint(&out.student, &self.meta(&out.student, self.config.stage2.epochs, "student"), &self.path(STUDENT_CKPT))?;
        write_stage2_log(&self.path("stage2_log.csv"), &out.log, &self.hash)?;
        self.timing.record("stage2", out.seconds, Some(&out.timing));
        Ok(out)
    }

    fn record(&self, run_id: &str, protocol: Protocol, out: &FinetuneOutcome, attack: &AttackConfig) -> MetricsRecord {
        let t = |stage: &str| {
            if self.config.timing_in_metrics {
                self.timing.stage(stage)
            } else {
                None
            }
        };
        MetricsRecord {
            run_id: run_id.into(),
            protocol,
            sa: out.measurement.sa,
            ra: out.measurement.ra,
            aa_proxy: out.aa_proxy,
            eps: attack.epsilon as f64,
            steps: attack.steps,
            restarts: attack.restarts,
            seed: self.config.seed,
            stage1_seconds: t("stage1"),
            stage2_seconds: t("stage2"),
            finetune_seconds: self.config.timing_in_metrics.then_some(out.seconds),
            config_hash: self.hash.clone(),
        }
    }

    pub fn slf(&mut self, run_id: &str, encoder: &Model, train: &Dataset, test: &Dataset) -> Result<(MetricsRecord, FinetuneOutcome)> {
        let out = slf(encoder, train, test, &self.config.slf, &self.streams.child(&format!("slf/{run_id}")))?;
        self.timing.record(&format!("slf/{run_id}"), out.seconds, None);
        Ok((self.record(run_id, Protocol::Slf, &out, &self.config.slf.attack), out))
    }

    pub fn aff(&mut self, run_id: &str, encoder: &Model, train: &Dataset, test: &Dataset) -> Result<(MetricsRecord, FinetuneOutcome)> {
        let out = aff(encoder, train, test, &self.config.aff, &self.streams.child(&format!("aff/{run_id}")))?;
        self.timing.record(&format!("aff/{run_id}"), out.seconds, None);
        Ok((self.record(run_id, Protocol::Aff, &out, &self.config.aff.attack), out))
    }

    pub fn finish(&self, metrics: &[MetricsRecord]) -> Result<()> {
        write_metrics_csv(&self.path(METRICS_CSV), metrics)?;
        self.timing.write(&self.dir)
    }
}

/// Everything a full run produced.
pub struct PipelineOutcome {
    pub dir: PathBuf,
    pub config_hash: String,
    pub teacher: Model,
    pub student: Model,
    pub stage1: Stage1Outcome,
    pub stage2: Stage2Outcome,
    pub metrics: Vec<MetricsRecord>,
    pub timing: TimingReport,
}

/// Stage 1, stage 2, then SLF on both encoders (and AFF on the student when
/// enabled). Rows: `stage1` and `deacl`.
pub fn run_pipeline(config: RunConfig) -> Result<PipelineOutcome> {
    let dir = config.resolved_output_dir();
    run_pipeline_in(config, dir)
}

/// As [`run_pipeline`], writing to `dir` regardless of `DEACL_OUT`.
pub fn run_pipeline_in(config: RunConfig, dir: PathBuf) -> Result<PipelineOutcome> {
    let mut run = Run::start_in(config, dir)?;
    let (train, test) = run.load_data()?;
    let stage1 = run.pretrain(&train)?;
    let teacher = stage1.model.clone();
    let stage2 = run.distill(&train, &teacher, Some(&test))?;
    let student = stage2.student.encoder_only();
    let mut metrics = vec![run.slf("stage1", &teacher, &train, &test)?.0, run.slf("deacl", &student, &train, &test)?.0];
    if run.config.run_aff {
        metrics.push(run.aff("deacl", &student, &train, &test)?.0);
    }
    run.finish(&metrics)?;
    Ok(PipelineOutcome {
        dir: run.dir.clone(),
        config_hash: run.hash.clone(),
        teacher,
        student,
        stage1,
        stage2,
        metrics,
        timing: run.timing,
    })
}

/// Load a checkpoint written by a run, checking the role tag.
pub fn load_role(path: &Path, role: &str) -> Result<(Model, CheckpointMeta)> {
    let (m, meta) = load_checkpoint(path)?;
    if meta.role != role {
        return Err(Error::Checkpoint(format!("{} holds a {} checkpoint, expected {role}", path.display(), meta.role)));
    }
    Ok((m, meta))
}
