//! `cvqd`: data generation, teacher/student training, distillation,
//! evaluation, gradient checking and report comparison.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use cvqd_core::distillation::LossWeights;
use cvqd_core::harness::{
    self, Checkpoint, ExperimentConfig, GradCheckConfig, Mode, RunKind, RunOutcome, RunRequest,
    CHECKPOINT_FILE, CONFIG_FILE,
};
use cvqd_core::metrics::CorrelationReport;
use cvqd_core::{Error, Result};

const EXIT_USAGE: u8 = 1;
const EXIT_NUMERICAL: u8 = 2;

#[derive(Parser)]
#[command(
    name = "cvqd",
    version,
    about = "Teacher-student distillation for compressed-video quality assessment"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// Experiment config (TOML); defaults apply to missing keys.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Training seed (data seed for generate-data).
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output root; overrides $CVQD_OUTPUT_ROOT and the config's output_dir.
    #[arg(long)]
    output: Option<PathBuf>,
}

#[derive(Args, Clone)]
struct Training {
    #[command(flatten)]
    common: Common,
    /// Number of optimizer steps.
    #[arg(long)]
    steps: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Write the dataset manifest to <output>/data/manifest.jsonl.
    GenerateData(Common),
    /// Train the teacher on the score loss.
    TrainTeacher(Training),
    /// Train a student on the score loss only (no distillation).
    TrainBaseline {
        #[command(flatten)]
        training: Training,
        #[arg(long)]
        mode: Mode,
    },
    /// Distill a trained teacher into the student of --mode.
    Distill {
        #[command(flatten)]
        training: Training,
        #[arg(long)]
        mode: Mode,
        /// Loss weights w1,w2,w3 (teacher L2, student L2, feature smooth-L1).
        #[arg(long, value_parser = parse_weights)]
        weights: Option<LossWeights>,
        /// Teacher checkpoint; defaults to <output>/teacher-seed<SEED>/checkpoint.bin.
        #[arg(long)]
        teacher: Option<PathBuf>,
        /// Seed of the default teacher checkpoint.
        #[arg(long, default_value_t = 0)]
        teacher_seed: u64,
        /// Baseline report.json; adds deltas to the final report.
        #[arg(long)]
        baseline: Option<PathBuf>,
    },
    /// Evaluate a checkpoint on the test split.
    Eval {
        #[command(flatten)]
        common: Common,
        /// Checkpoint file (or a run directory holding checkpoint.bin).
        checkpoint: PathBuf,
        /// Model to evaluate: teacher or student. Defaults to the student.
        #[arg(long)]
        role: Option<String>,
    },
    /// Finite-difference check of the loss gradients on a tiny config.
    GradCheck {
        #[command(flatten)]
        common: Common,
        /// Number of consecutive seeds starting at --seed.
        #[arg(long, default_value_t = 3)]
        seeds: u64,
    },
    /// Comparison table over saved reports.
    Compare {
        /// report.json files (run reports or bare correlation reports).
        reports: Vec<PathBuf>,
        /// MODEL=BASELINE_MODEL; adds deltas to MODEL's rows.
        #[arg(long = "baseline-map")]
        baseline_map: Vec<String>,
        /// Also write table.txt and table.json here.
        #[arg(long)]
        output: Option<PathBuf>,
    },
}

fn parse_weights(s: &str) -> std::result::Result<LossWeights, String> {
    let parts: Vec<&str> = s.split(',').map(str::trim).collect();
    let [a, b, c] = parts[..] else {
        return Err(format!("expected three comma-separated weights, got {s:?}"));
    };
    let num = |x: &str| x.parse::<f64>().map_err(|e| format!("{x:?}: {e}"));
    let w = LossWeights::new(num(a)?, num(b)?, num(c)?);
    w.validate().map_err(|e| e.to_string())?;
    Ok(w)
}

fn load_config(path: Option<&Path>) -> Result<ExperimentConfig> {
    match path {
        Some(p) => ExperimentConfig::load(p),
        None => Ok(ExperimentConfig::default()),
    }
}

fn request(training: &Training) -> Result<RunRequest> {
    let mut config = load_config(training.common.config.as_deref())?;
    if let Some(steps) = training.steps {
        config.set_steps(steps);
    }
    let root = harness::resolve_output_root(training.common.output.as_deref(), &config);
    RunRequest::new(config, root, training.common.seed)
}

fn finish(outcome: RunOutcome) -> Result<()> {
    print!("{}", outcome.manifest.text());
    println!("outputs in {}", outcome.dir.display());
    Ok(())
}

fn write_pair(dir: &Path, stem: &str, text: &str, json: &str) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| io(dir, e))?;
    let t = dir.join(format!("{stem}.txt"));
    std::fs::write(&t, text).map_err(|e| io(&t, e))?;
    let j = dir.join(format!("{stem}.json"));
    std::fs::write(&j, json).map_err(|e| io(&j, e))
}

fn io(path: &Path, e: std::io::Error) -> Error {
    Error::Io {
        path: path.to_path_buf(),
        source: e,
    }
}

fn report_text(r: &CorrelationReport) -> String {
    let f = |v: Option<f64>| v.map_or("undefined".to_string(), |v| format!("{v:.4}"));
    let mut out = format!(
        "model   {}\nparams  {}\ndataset {}\nseed    {}\nPLCC    {}\nSRCC    {}\n",
        r.model,
        r.params,
        r.dataset,
        r.seed,
        f(r.plcc),
        f(r.srcc)
    );
    for e in &r.errors {
        out.push_str(&format!("note    {e}\n"));
    }
    out
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenerateData(common) => {
            let mut config = load_config(common.config.as_deref())?;
            config.data.seed = common.seed;
            let root = harness::resolve_output_root(common.output.as_deref(), &config);
            let summary = harness::generate_data(&config.data, &root)?;
            println!(
                "{} records ({} train, {} test) written to {}",
                summary.records,
                summary.train_records,
                summary.test_records,
                summary.manifest_path.display()
            );
            Ok(())
        }
        Command::TrainTeacher(training) => {
            let req = request(&training)?;
            let data = harness::load_dataset(&req.config.data, &req.root)?;
            finish(harness::train_teacher(&req, &data)?)
        }
        Command::TrainBaseline { training, mode } => {
            let req = request(&training)?;
            let data = harness::load_dataset(&req.config.data, &req.root)?;
            finish(harness::train_baseline(&req, mode, &data)?)
        }
        Command::Distill {
            training,
            mode,
            weights,
            teacher,
            teacher_seed,
            baseline,
        } => {
            let mut req = request(&training)?;
            if let Some(w) = weights {
                req.config.distill.loss_weights = w;
            }
            req.config.check_mode(mode)?;
            let teacher_path = teacher.unwrap_or_else(|| {
                req.root
                    .join(RunKind::Teacher.dir_name(teacher_seed))
                    .join(CHECKPOINT_FILE)
            });
            let teacher = Checkpoint::load(&teacher_path)?;
            let baseline = baseline.as_deref().map(harness::read_report).transpose()?;
            let data = harness::load_dataset(&req.config.data, &req.root)?;
            finish(harness::distill(
                &req,
                mode,
                &teacher,
                baseline.as_ref(),
                &data,
            )?)
        }
        Command::Eval {
            common,
            checkpoint,
            role,
        } => {
            let path = if checkpoint.is_dir() {
                checkpoint.join(CHECKPOINT_FILE)
            } else {
                checkpoint
            };
            // the run's own resolved config, unless one is given
            let beside = path
                .parent()
                .map(|d| d.join(CONFIG_FILE))
                .filter(|p| p.exists());
            let config = load_config(common.config.as_deref().or(beside.as_deref()))?;
            let root = harness::resolve_output_root(common.output.as_deref(), &config);
            if !path.exists() {
                return Err(Error::Checkpoint(format!(
                    "no checkpoint at {}",
                    path.display()
                )));
            }
            let data = harness::load_dataset(&config.data, &root)?;
            let report = harness::eval_checkpoint(&path, role.as_deref(), &data)?;
            let text = report_text(&report);
            print!("{text}");
            let dir = root
                .join("eval")
                .join(format!("{}-seed{}", report.model, report.seed));
            write_pair(
                &dir,
                "report",
                &text,
                &serde_json::to_string_pretty(&report)?,
            )?;
            config.save(&dir.join(CONFIG_FILE))
        }
        Command::GradCheck { common, seeds } => {
            if seeds < 3 {
                return Err(Error::Argument("grad-check needs at least 3 seeds".into()));
            }
            let config = load_config(common.config.as_deref())?;
            let root = harness::resolve_output_root(common.output.as_deref(), &config);
            let check = GradCheckConfig::default();
            let seed_list: Vec<u64> = (common.seed..common.seed + seeds).collect();
            let summary = harness::grad_check(&check, &seed_list)?;
            let text = summary.text();
            print!("{text}");
            let dir = root.join("grad-check");
            write_pair(
                &dir,
                "report",
                &text,
                &serde_json::to_string_pretty(&summary)?,
            )?;
            let resolved =
                toml::to_string_pretty(&check).map_err(|e| Error::Serde(e.to_string()))?;
            let cfg = dir.join(CONFIG_FILE);
            std::fs::write(&cfg, resolved).map_err(|e| io(&cfg, e))?;
            summary.into_result().map(|_| ())
        }
        Command::Compare {
            reports,
            baseline_map,
            output,
        } => {
            if reports.is_empty() {
                return Err(Error::Argument(
                    "compare needs at least one report file".into(),
                ));
            }
            let mut map = BTreeMap::new();
            for entry in &baseline_map {
                let (model, base) = entry.split_once('=').ok_or_else(|| {
                    Error::Argument(format!(
                        "--baseline-map wants MODEL=BASELINE, got {entry:?}"
                    ))
                })?;
                map.insert(model.to_string(), base.to_string());
            }
            let loaded = reports
                .iter()
                .map(|p| harness::read_report(p))
                .collect::<Result<Vec<_>>>()?;
            let table = harness::compare(&loaded, &map)?;
            print!("{}", table.text);
            if let Some(dir) = output {
                write_pair(&dir, "table", &table.text, &table.records_json()?)?;
            }
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_numerical() {
                EXIT_NUMERICAL
            } else {
                EXIT_USAGE
            })
        }
    }
}
