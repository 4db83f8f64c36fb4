use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::json;

use deacl::ablation::{grid, run_ablation, Axis};
use deacl::attack::parse_fraction;
use deacl::config::RunConfig;
use deacl::eval::{export_embeddings, sweep};
use deacl::models::Model;
use deacl::pipeline::{load_role, run_pipeline_in, Run, STUDENT_CKPT, TEACHER_CKPT};
use deacl::report::{aggregate, write_summary_csv, write_sweep_csv};
use deacl::{Error, Result};

#[derive(Parser)]
#[command(name = "deacl", version, about = "Two-stage adversarial contrastive learning at desk scale")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Run configuration (JSON). Defaults to the chosen preset.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true, value_enum, default_value_t = Preset::Desk)]
    preset: Preset,
    /// Override the master seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory; takes precedence over DEACL_OUT and the config.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Validate and print the resolved config without training.
    #[arg(long, global = true)]
    dry_run: bool,
}

#[derive(Clone, Copy, ValueEnum)]
enum Preset {
    Desk,
    Smoke,
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitArg {
    Train,
    Test,
}

#[derive(Subcommand)]
enum Command {
    /// Stage 1, stage 2 and linear evaluation of both encoders.
    Run,
    /// Stage 1: contrastive pretraining of the teacher.
    Pretrain,
    /// Stage 2: adversarial distillation into a student.
    Distill {
        #[arg(long)]
        teacher: Option<PathBuf>,
    },
    /// Linear finetuning on a frozen encoder, then SA/RA.
    Slf {
        #[arg(long)]
        encoder: Option<PathBuf>,
        #[arg(long, default_value = "deacl")]
        run_id: String,
    },
    /// Adversarial full finetuning, then SA/RA.
    Aff {
        #[arg(long)]
        encoder: Option<PathBuf>,
        #[arg(long, default_value = "deacl")]
        run_id: String,
    },
    /// RA over a grid of PGD steps and budgets (after linear finetuning).
    Sweep {
        #[arg(long)]
        encoder: Option<PathBuf>,
        #[arg(long, value_delimiter = ',', default_value = "1,5,10,20,50")]
        steps: Vec<usize>,
        #[arg(long, value_delimiter = ',', default_value = "0,2/255,4/255,8/255,16/255")]
        eps: Vec<String>,
    },
    /// Stage-2 ablation over one axis and several seeds.
    Ablate {
        #[arg(long)]
        axis: String,
        #[arg(long, value_delimiter = ',')]
        values: Option<Vec<String>>,
        #[arg(long, value_delimiter = ',', default_value = "0,1,2,3,4")]
        seeds: Vec<u64>,
    },
    /// Write encoder representations of a split as CSV.
    ExportEmb {
        #[arg(long)]
        encoder: Option<PathBuf>,
        #[arg(long, value_enum, default_value_t = SplitArg::Test)]
        split: SplitArg,
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Aggregate metrics CSVs from several runs.
    Report {
        /// Run directories or metrics files.
        #[arg(required = true)]
        runs: Vec<PathBuf>,
        /// Aggregate even when config hashes differ.
        #[arg(long)]
        force: bool,
        #[arg(long)]
        output: Option<PathBuf>,
    },
}

fn resolve(common: &Common) -> Result<RunConfig> {
    let mut cfg = match &common.config {
        Some(p) => RunConfig::load(p)?,
        None => match common.preset {
            Preset::Desk => RunConfig::desk(0),
            Preset::Smoke => RunConfig::smoke(0),
        },
    };
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    cfg.output_dir = match &common.out {
        Some(o) => o.clone(),
        None => cfg.resolved_output_dir(),
    };
    cfg.validate()?;
    Ok(cfg)
}

fn dry_run(cfg: &RunConfig, command: &str, plan: serde_json::Value) {
    let stages: serde_json::Map<String, serde_json::Value> =
        ["stage1", "stage2", "finetune"].iter().map(|s| (s.to_string(), json!(0.0))).collect();
    let out = json!({
        "command": command,
        "config_hash": cfg.hash(),
        "output_dir": cfg.output_dir,
        "config": cfg,
        "plan": plan,
        "assumptions": deacl::config::ASSUMPTIONS.iter().map(|(k, v)| (k.to_string(), json!(v))).collect::<serde_json::Map<_, _>>(),
        "timing_seconds": stages,
    });
    // a closed pipe (e.g. `| head`) is not an error for a dry run
    let _ = writeln!(std::io::stdout().lock(), "{}", serde_json::to_string_pretty(&out).expect("json"));
}

fn start(cfg: RunConfig) -> Result<Run> {
    let dir = cfg.output_dir.clone();
    Run::start_in(cfg, dir)
}

fn encoder_at(path: Option<&PathBuf>, dir: &Path, default: &str) -> Result<Model> {
    let p = path.cloned().unwrap_or_else(|| dir.join(default));
    let (m, _) = deacl::models::load_checkpoint(&p)?;
    Ok(m.encoder_only())
}

fn metrics_path(p: &Path) -> PathBuf {
    if p.is_dir() {
        p.join("metrics.csv")
    } else {
        p.to_path_buf()
    }
}

fn execute(cli: Cli) -> Result<()> {
    if let Command::Report { runs, force, output } = &cli.command {
        let paths: Vec<PathBuf> = runs.iter().map(|p| metrics_path(p)).collect();
        if cli.common.dry_run {
            println!("{}", serde_json::to_string_pretty(&json!({"command": "report", "inputs": paths})).expect("json"));
            return Ok(());
        }
        let agg = aggregate(&paths, *force)?;
        println!("run_id,protocol,runs,SA_median,RA_median,AA_proxy_median");
        for s in &agg.summary {
            let aa = s.aa_proxy_median.map_or("NA".to_string(), |v| format!("{v:.4}"));
            println!("{},{},{},{:.4},{:.4},{aa}", s.run_id, s.protocol, s.runs, s.sa_median, s.ra_median);
        }
        if let Some(o) = output {
            write_summary_csv(o, &agg.summary)?;
        }
        return Ok(());
    }

    let cfg = resolve(&cli.common)?;
    let dry = cli.common.dry_run;
    let is_slf = matches!(cli.command, Command::Slf { .. });
    match cli.command {
        Command::Run => {
            if dry {
                dry_run(&cfg, "run", json!(["pretrain", "distill", "slf stage1", "slf deacl"]));
                return Ok(());
            }
            let dir = cfg.output_dir.clone();
            let out = run_pipeline_in(cfg, dir)?;
            for m in &out.metrics {
                println!("{} {}: SA {:.2} RA {:.2}", m.run_id, m.protocol, m.sa, m.ra);
            }
            println!("artifacts in {}", out.dir.display());
        }
        Command::Pretrain => {
            if dry {
                dry_run(&cfg, "pretrain", json!({"epochs": cfg.stage1.epochs}));
                return Ok(());
            }
            let mut run = start(cfg)?;
            let (train, _) = run.load_data()?;
            let out = run.pretrain(&train)?;
            run.timing.write(&run.dir)?;
            let last = out.log.last().map_or(f64::NAN, |l| l.mean_loss);
            println!("teacher saved to {} (final loss {last:.4})", run.path(TEACHER_CKPT).display());
        }
        Command::Distill { teacher } => {
            if dry {
                dry_run(&cfg, "distill", json!({"teacher": teacher, "epochs": cfg.stage2.epochs}));
                return Ok(());
            }
            let mut run = start(cfg)?;
            let tp = teacher.unwrap_or_else(|| run.path(TEACHER_CKPT));
            let (t, _) = load_role(&tp, "teacher")?;
            let (train, test) = run.load_data()?;
            let out = run.distill(&train, &t, Some(&test))?;
            run.timing.write(&run.dir)?;
            println!(
                "student saved to {} (teacher hash constant: {})",
                run.path(STUDENT_CKPT).display(),
                out.teacher_unchanged()
            );
        }
        Command::Slf { encoder, run_id } | Command::Aff { encoder, run_id } if dry => {
            let name = if is_slf { "slf" } else { "aff" };
            dry_run(&cfg, name, json!({"encoder": encoder, "run_id": run_id}));
        }
        Command::Slf { encoder, run_id } => {
            let mut run = start(cfg)?;
            let e = encoder_at(encoder.as_ref(), &run.dir, STUDENT_CKPT)?;
            let (train, test) = run.load_data()?;
            let (rec, _) = run.slf(&run_id, &e, &train, &test)?;
            run.finish(&[rec.clone()])?;
            println!("{run_id} SLF: SA {:.2} RA {:.2}", rec.sa, rec.ra);
        }
        Command::Aff { encoder, run_id } => {
            let mut run = start(cfg)?;
            let e = encoder_at(encoder.as_ref(), &run.dir, STUDENT_CKPT)?;
            let (train, test) = run.load_data()?;
            let (rec, out) = run.aff(&run_id, &e, &train, &test)?;
            run.finish(&[rec.clone()])?;
            println!("{run_id} AFF: SA {:.2} RA {:.2} probe {:?}", rec.sa, rec.ra, out.probe_ra);
        }
        Command::Sweep { encoder, steps, eps } => {
            let eps = eps.iter().map(|e| parse_fraction(e)).collect::<Result<Vec<_>>>()?;
            if dry {
                dry_run(&cfg, "sweep", json!({"steps": steps, "eps": eps}));
                return Ok(());
            }
            let mut run = start(cfg)?;
            let e = encoder_at(encoder.as_ref(), &run.dir, STUDENT_CKPT)?;
            let (train, test) = run.load_data()?;
            let (_, fitted) = run.slf("sweep", &e, &train, &test)?;
            let rows = sweep(&fitted.model, &test, &steps, &eps, &run.streams.child("sweep"))?;
            write_sweep_csv(&run.path("sweep.csv"), &rows, &run.hash)?;
            println!("steps,eps,RA");
            for r in rows {
                println!("{},{:.6},{:.4}", r.steps, r.eps, r.ra);
            }
        }
        Command::Ablate { axis, values, seeds } => {
            let axis: Axis = axis.parse()?;
            let values = values.unwrap_or_else(|| axis.default_values());
            let cells = grid(&cfg.stage2, axis, &values)?;
            if dry {
                let plan: Vec<_> = cells
                    .iter()
                    .map(|(v, c)| json!({"value": v, "stage2": c}))
                    .collect();
                dry_run(&cfg, "ablate", json!({"axis": axis.name(), "seeds": seeds, "grid": plan}));
                return Ok(());
            }
            std::fs::create_dir_all(&cfg.output_dir).map_err(|source| Error::Io { path: cfg.output_dir.clone(), source })?;
            let res = run_ablation(&cfg, axis, &values, &seeds, true, Some(&cfg.output_dir))?;
            println!("value,SA_median,RA_median");
            for v in &values {
                println!("{v},{:.4},{:.4}", res.median_sa(v).unwrap_or(0.0), res.median_ra(v).unwrap_or(0.0));
            }
        }
        Command::ExportEmb { encoder, split, output } => {
            if dry {
                dry_run(&cfg, "export-emb", json!({"encoder": encoder, "output": output}));
                return Ok(());
            }
            let run = start(cfg)?;
            let e = encoder_at(encoder.as_ref(), &run.dir, STUDENT_CKPT)?;
            let (train, test) = run.load_data()?;
            let data = match split {
                SplitArg::Train => &train,
                SplitArg::Test => &test,
            };
            let path = output.unwrap_or_else(|| run.path("embeddings.csv"));
            let n = export_embeddings(&e, data, &path)?;
            println!("wrote {n} rows to {}", path.display());
        }
        Command::Report { .. } => unreachable!("handled above"),
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match execute(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
