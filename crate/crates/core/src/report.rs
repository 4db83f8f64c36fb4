//! CSV and JSON artifacts: metrics rows, training logs, sweeps, timing.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::distill::Stage2EpochLog;
use crate::eval::SweepRow;
use crate::pretrain::Stage1EpochLog;
use crate::timing::PhaseTimer;
use crate::{Error, Result};

pub const NA: &str = "NA";

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Protocol {
    #[serde(rename = "SLF")]
    Slf,
    #[serde(rename = "AFF")]
    Aff,
}

impl std::fmt::Display for Protocol {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Protocol::Slf => "SLF",
            Protocol::Aff => "AFF",
        })
    }
}

impl std::str::FromStr for Protocol {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "SLF" => Ok(Protocol::Slf),
            "AFF" => Ok(Protocol::Aff),
            _ => Err(Error::Data(format!("unknown protocol {s:?}"))),
        }
    }
}

/// One evaluated encoder under one protocol.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricsRecord {
    pub run_id: String,
    pub protocol: Protocol,
    pub sa: f64,
    pub ra: f64,
    pub aa_proxy: Option<f64>,
    pub eps: f64,
    pub steps: usize,
    pub restarts: usize,
    pub seed: u64,
    pub stage1_seconds: Option<f64>,
    pub stage2_seconds: Option<f64>,
    pub finetune_seconds: Option<f64>,
    pub config_hash: String,
}

pub const METRICS_HEADER: [&str; 13] = [
    "run_id",
    "protocol",
    "SA",
    "RA",
    "AA_proxy",
    "eps",
    "steps",
    "restarts",
    "seed",
    "stage1_seconds",
    "stage2_seconds",
    "finetune_seconds",
    "config_hash",
];

fn opt(v: Option<f64>, digits: usize) -> String {
    v.map_or_else(|| NA.to_string(), |x| format!("{x:.digits$}"))
}

fn parse_opt(s: &str) -> Result<Option<f64>> {
    if s == NA {
        return Ok(None);
    }
    s.parse().map(Some).map_err(|_| Error::Data(format!("bad number {s:?}")))
}

fn parse<T: std::str::FromStr>(s: &str) -> Result<T> {
    s.parse().map_err(|_| Error::Data(format!("bad field {s:?}")))
}

impl MetricsRecord {
    fn fields(&self) -> Vec<String> {
        vec![
            self.run_id.clone(),
            self.protocol.to_string(),
            format!("{:.4}", self.sa),
            format!("{:.4}", self.ra),
            opt(self.aa_proxy, 4),
            format!("{:.6}", self.eps),
            self.steps.to_string(),
            self.restarts.to_string(),
            self.seed.to_string(),
            opt(self.stage1_seconds, 3),
            opt(self.stage2_seconds, 3),
            opt(self.finetune_seconds, 3),
            self.config_hash.clone(),
        ]
    }

    fn from_fields(f: &csv::StringRecord) -> Result<Self> {
        if f.len() != METRICS_HEADER.len() {
            return Err(Error::Data(format!("metrics row has {} fields, expected {}", f.len(), METRICS_HEADER.len())));
        }
        Ok(Self {
            run_id: f[0].to_string(),
            protocol: f[1].parse()?,
            sa: parse(&f[2])?,
            ra: parse(&f[3])?,
            aa_proxy: parse_opt(&f[4])?,
            eps: parse(&f[5])?,
            steps: parse(&f[6])?,
            restarts: parse(&f[7])?,
            seed: parse(&f[8])?,
            stage1_seconds: parse_opt(&f[9])?,
            stage2_seconds: parse_opt(&f[10])?,
            finetune_seconds: parse_opt(&f[11])?,
            config_hash: f[12].to_string(),
        })
    }
}

fn ensure_parent(path: &Path) -> Result<()> {
    if let Some(dir) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    Ok(())
}

fn write_rows(path: &Path, header: &[&str], rows: impl IntoIterator<Item = Vec<String>>) -> Result<()> {
    ensure_parent(path)?;
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(header)?;
    for r in rows {
        w.write_record(&r)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn write_metrics_csv(path: &Path, rows: &[MetricsRecord]) -> Result<()> {
    write_rows(path, &METRICS_HEADER, rows.iter().map(MetricsRecord::fields))
}

pub fn read_metrics_csv(path: &Path) -> Result<Vec<MetricsRecord>> {
    let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = csv::Reader::from_reader(f);
    let header = r.headers()?.clone();
    if header.iter().ne(METRICS_HEADER.iter().copied()) {
        return Err(Error::Data(format!("{} is not a metrics file", path.display())));
    }
    r.records().map(|rec| MetricsRecord::from_fields(&rec?)).collect()
}

pub fn write_stage1_log(path: &Path, log: &[Stage1EpochLog], config_hash: &str) -> Result<()> {
    write_rows(
        path,
        &["epoch", "mean_loss", "lr", "wall_seconds", "config_hash"],
        log.iter().map(|l| {
            vec![
                l.epoch.to_string(),
                format!("{:.6}", l.mean_loss),
                format!("{:.6e}", l.lr),
                format!("{:.3}", l.wall_seconds),
                config_hash.to_string(),
            ]
        }),
    )
}

pub fn write_stage2_log(path: &Path, log: &[Stage2EpochLog], config_hash: &str) -> Result<()> {
    write_rows(
        path,
        &["epoch", "loss_clean_term", "loss_adv_term", "probe_RA", "wall_seconds", "config_hash"],
        log.iter().map(|l| {
            vec![
                l.epoch.to_string(),
                format!("{:.6}", l.loss_clean_term),
                format!("{:.6}", l.loss_adv_term),
                opt(l.probe_ra, 4),
                format!("{:.3}", l.wall_seconds),
                config_hash.to_string(),
            ]
        }),
    )
}

pub fn write_sweep_csv(path: &Path, rows: &[SweepRow], config_hash: &str) -> Result<()> {
    write_rows(
        path,
        &["steps", "eps", "RA", "config_hash"],
        rows.iter().map(|r| {
            vec![
                r.steps.to_string(),
                format!("{:.6}", r.eps),
                format!("{:.4}", r.ra),
                config_hash.to_string(),
            ]
        }),
    )
}

/// Wall-clock per stage and per phase.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TimingReport {
    pub config_hash: String,
    pub stages: BTreeMap<String, f64>,
    pub phases: BTreeMap<String, PhaseTimer>,
}

impl TimingReport {
    pub fn new(config_hash: &str) -> Self {
        Self {
            config_hash: config_hash.to_string(),
            ..Self::default()
        }
    }

    pub fn stage(&self, name: &str) -> Option<f64> {
        self.stages.get(name).copied()
    }

    pub fn record(&mut self, stage: &str, seconds: f64, phases: Option<&PhaseTimer>) {
        self.stages.insert(stage.to_string(), seconds);
        if let Some(p) = phases {
            self.phases.insert(stage.to_string(), p.clone());
        }
    }

    pub fn total(&self) -> f64 {
        self.stages.values().sum()
    }

    /// Share of stage-2 step time spent crafting adversarial examples.
    pub fn attack_share(&self) -> Option<f64> {
        let p = self.phases.get("stage2")?;
        let step = p.get("attack") + p.get("update") + p.get("targets");
        (step > 0.0).then(|| p.get("attack") / step)
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let json = dir.join("timing.json");
        std::fs::write(&json, serde_json::to_string_pretty(self)?).map_err(|e| Error::io(&json, e))?;
        let mut rows = Vec::new();
        for (stage, secs) in &self.stages {
            rows.push(vec![stage.clone(), "total".into(), format!("{secs:.3}"), self.config_hash.clone()]);
            if let Some(p) = self.phases.get(stage) {
                for (phase, s) in &p.phases {
                    rows.push(vec![stage.clone(), phase.clone(), format!("{s:.3}"), self.config_hash.clone()]);
                }
            }
        }
        write_rows(&dir.join("timing.csv"), &["stage", "phase", "seconds", "config_hash"], rows)
    }
}

/// Median over seeds for one `(run_id, protocol)` group.
#[derive(Clone, Debug, PartialEq)]
pub struct SummaryRow {
    pub run_id: String,
    pub protocol: Protocol,
    pub runs: usize,
    pub sa_median: f64,
    pub ra_median: f64,
    pub aa_proxy_median: Option<f64>,
}

pub fn median(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(|a, b| a.total_cmp(b));
    let n = v.len();
    Some(if n % 2 == 1 { v[n / 2] } else { 0.5 * (v[n / 2 - 1] + v[n / 2]) })
}

#[derive(Clone, Debug, PartialEq)]
pub struct Aggregate {
    pub rows: Vec<MetricsRecord>,
    pub summary: Vec<SummaryRow>,
}

/// Gather metrics files. Rows with differing config hashes are refused
/// unless `force` is set.
pub fn aggregate(paths: &[PathBuf], force: bool) -> Result<Aggregate> {
    let mut rows = Vec::new();
    for p in paths {
        rows.extend(read_metrics_csv(p)?);
    }
    if let Some(first) = rows.first() {
        if let Some(bad) = rows.iter().find(|r| r.config_hash != first.config_hash) {
            if !force {
                return Err(Error::HashMismatch(format!(
                    "config hash {} differs from {}; pass --force to aggregate anyway",
                    bad.config_hash, first.config_hash
                )));
            }
        }
    }
    let mut groups: BTreeMap<(String, Protocol), Vec<&MetricsRecord>> = BTreeMap::new();
    for r in &rows {
        groups.entry((r.run_id.clone(), r.protocol)).or_default().push(r);
    }
    let summary = groups
        .into_iter()
        .map(|((run_id, protocol), g)| {
            let col = |f: fn(&MetricsRecord) -> f64| g.iter().map(|r| f(r)).collect::<Vec<_>>();
            let aa: Vec<f64> = g.iter().filter_map(|r| r.aa_proxy).collect();
            SummaryRow {
                run_id,
                protocol,
                runs: g.len(),
                sa_median: median(&col(|r| r.sa)).unwrap_or(0.0),
                ra_median: median(&col(|r| r.ra)).unwrap_or(0.0),
                aa_proxy_median: if aa.len() == g.len() { median(&aa) } else { None },
            }
        })
        .collect();
    Ok(Aggregate { rows, summary })
}

pub fn write_summary_csv(path: &Path, summary: &[SummaryRow]) -> Result<()> {
    write_rows(
        path,
        &["run_id", "protocol", "runs", "SA_median", "RA_median", "AA_proxy_median"],
        summary.iter().map(|s| {
            vec![
                s.run_id.clone(),
                s.protocol.to_string(),
                s.runs.to_string(),
                format!("{:.4}", s.sa_median),
                format!("{:.4}", s.ra_median),
                opt(s.aa_proxy_median, 4),
            ]
        }),
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(seed: u64, hash: &str, ra: f64) -> MetricsRecord {
        MetricsRecord {
            run_id: "deacl".into(),
            protocol: Protocol::Slf,
            sa: 90.0,
            ra,
            aa_proxy: None,
            eps: 8.0 / 255.0,
            steps: 20,
            restarts: 1,
            seed,
            stage1_seconds: None,
            stage2_seconds: Some(1.5),
            finetune_seconds: None,
            config_hash: hash.into(),
        }
    }

    #[test]
    fn metrics_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.csv");
        let rows = vec![rec(1, "abc", 40.0), rec(2, "abc", 42.5)];
        write_metrics_csv(&p, &rows).unwrap();
        let back = read_metrics_csv(&p).unwrap();
        assert_eq!(back.len(), 2);
        assert_eq!(back[1].ra, 42.5);
        assert_eq!(back[0].aa_proxy, None);
        let text = std::fs::read_to_string(&p).unwrap();
        assert!(text.starts_with("run_id,protocol,SA,RA,AA_proxy,eps,steps,restarts,seed,"));
        assert!(text.contains(",NA,"));
    }

    #[test]
    fn aggregate_refuses_mixed_hashes() {
        let dir = tempfile::tempdir().unwrap();
        let a = dir.path().join("a.csv");
        let b = dir.path().join("b.csv");
        write_metrics_csv(&a, &[rec(1, "abc", 40.0)]).unwrap();
        write_metrics_csv(&b, &[rec(2, "def", 50.0)]).unwrap();
        assert!(matches!(aggregate(&[a.clone(), b.clone()], false), Err(Error::HashMismatch(_))));
        let agg = aggregate(&[a, b], true).unwrap();
        assert_eq!(agg.summary.len(), 1);
        assert_eq!(agg.summary[0].ra_median, 45.0);
    }

    #[test]
    fn median_values() {
        assert_eq!(median(&[3.0, 1.0, 2.0]), Some(2.0));
        assert_eq!(median(&[4.0, 1.0]), Some(2.5));
        assert_eq!(median(&[]), None);
    }

    #[test]
    fn timing_share_and_files() {
        let mut t = TimingReport::new("h");
        let mut p = PhaseTimer::new();
        p.add("attack", 5.0);
        p.add("update", 1.0);
        t.record("stage2", 6.5, Some(&p));
        t.record("stage1", 2.0, None);
        assert!((t.attack_share().unwrap() - 5.0 / 6.0).abs() < 1e-12);
        let sum: f64 = t.phases["stage2"].total();
        assert!(sum <= t.stage("stage2").unwrap() * 1.01);
        let dir = tempfile::tempdir().unwrap();
        t.write(dir.path()).unwrap();
        assert!(dir.path().join("timing.csv").exists());
        assert_eq!(TimingReport::new("h").total(), 0.0);
    }
}
