//! `dsadlc`: command-line driver for the lane-change decision pipeline.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use serde_json::json;

use dsadlc::eval::{comparison_csv, comparison_table, confusion, impact_report, PredictedCase};
use dsadlc::experiment::{
    loss_csv, predict_all, predictions_csv, run_experiment, ConfigError, ExperimentError, RunConfig,
};
use dsadlc::features::DEFAULT_SAFE_HEADWAY_S;
use dsadlc::ingest::DatasetManifest;
use dsadlc::labeling::{
    dlc_events, extract_cases, read_cases, split_and_balance, write_cases, CaseKind, Label,
    LabelingConfig, CASE_FORMAT_VERSION, DEFAULT_DUP_FACTOR, DEFAULT_STRIDE_S,
    DEFAULT_TRAIN_FRACTION, DEFAULT_T_REACT_S, MIN_STAY_S,
};
use dsadlc::model::{build, Ablation, Model, ModelConfig, WEIGHT_FORMAT_VERSION};
use dsadlc::synthgen::{generate, write_generated, ScenarioConfig};

#[derive(Parser)]
#[command(name = "dsadlc", version, about = "Driving-style-aware lane-change decision model")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Switch {
    On,
    Off,
}

impl Switch {
    fn on(self) -> bool {
        matches!(self, Switch::On)
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum AblationArg {
    Full,
    NoEgo,
    NoSurround,
    NoDs,
}

impl From<AblationArg> for Ablation {
    fn from(a: AblationArg) -> Self {
        match a {
            AblationArg::Full => Ablation::Full,
            AblationArg::NoEgo => Ablation::NoEgoDs,
            AblationArg::NoSurround => Ablation::NoSurroundDs,
            AblationArg::NoDs => Ablation::NoDs,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic recording from a scenario file.
    Synth {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Load recordings and print a summary.
    Ingest {
        #[arg(long)]
        root: PathBuf,
        /// Print JSON instead of text.
        #[arg(long)]
        json: bool,
    },
    /// Extract labeled cases from recordings.
    Extract {
        #[arg(long)]
        root: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = DEFAULT_T_REACT_S)]
        t_react: f64,
        #[arg(long, default_value_t = DEFAULT_SAFE_HEADWAY_S)]
        t_h: f64,
        #[arg(long, default_value_t = DEFAULT_STRIDE_S)]
        stride: f64,
        #[arg(long, default_value_t = MIN_STAY_S)]
        min_stay: f64,
        /// Also write train.cases and test.cases into this directory.
        #[arg(long)]
        split: Option<PathBuf>,
        #[arg(long, default_value_t = DEFAULT_TRAIN_FRACTION)]
        train_fraction: f64,
        #[arg(long, default_value_t = DEFAULT_DUP_FACTOR)]
        dup: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Train one model variant.
    Train {
        #[arg(long)]
        cases: PathBuf,
        #[arg(long, value_enum, default_value = "full")]
        ablation: AblationArg,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 50)]
        epochs: usize,
        #[arg(long, default_value_t = 16)]
        batch_size: usize,
        #[arg(long, default_value_t = 0.001)]
        lr: f64,
        #[arg(long, default_value_t = DEFAULT_SAFE_HEADWAY_S)]
        t_h: f64,
        /// Per-epoch loss CSV.
        #[arg(long)]
        loss: Option<PathBuf>,
    },
    /// Classify cases with a trained model.
    Predict {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        cases: PathBuf,
        #[arg(long, value_enum, default_value = "on")]
        mask: Switch,
        #[arg(long)]
        out: PathBuf,
    },
    /// Accuracy and lane-change impact of a trained model.
    Eval {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        cases: PathBuf,
        /// Recordings the cases were extracted from, for impact tables.
        #[arg(long)]
        recordings: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "off")]
        mask: Switch,
        #[arg(long)]
        report: PathBuf,
    },
    /// Train and compare model variants from a run configuration.
    Experiment {
        #[arg(long)]
        config: PathBuf,
        /// Run only this variant.
        #[arg(long, value_enum)]
        ablation: Option<AblationArg>,
    },
    /// Check a run configuration.
    Validate {
        #[arg(long)]
        config: PathBuf,
    },
    /// Print tool and file-format versions.
    Version,
}

/// Errors that map to exit code 2.
#[derive(Debug)]
struct UsageError(String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

fn exit_code(err: &anyhow::Error) -> u8 {
    let is_usage = err.chain().any(|e| {
        e.is::<UsageError>()
            || e.is::<ConfigError>()
            || matches!(e.downcast_ref::<ExperimentError>(), Some(ExperimentError::Config(_)))
    });
    if is_usage {
        2
    } else {
        1
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn write_file(path: &Path, content: impl AsRef<[u8]>) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    fs::write(path, content).with_context(|| format!("writing {}", path.display()))
}

fn require_file(path: &Path, what: &str) -> Result<()> {
    if !path.is_file() {
        return Err(usage(format!("{what} {} not found", path.display())));
    }
    Ok(())
}

fn load_recordings(root: &Path) -> Result<BTreeMap<u32, dsadlc::trajectory::Recording>> {
    if !root.is_dir() {
        return Err(usage(format!("recording root {} is not a directory", root.display())));
    }
    let manifest = DatasetManifest::discover(root).context("ingest")?;
    if manifest.entries.is_empty() {
        bail!("ingest: no recordings under {}", root.display());
    }
    let recs = manifest.load_all().context("ingest")?;
    Ok(recs.into_iter().map(|r| (r.id, r)).collect())
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::Synth { config, out } => {
            require_file(&config, "scenario file")?;
            let text = fs::read_to_string(&config)?;
            let scenario = ScenarioConfig::from_toml(&text).map_err(|e| usage(e.to_string()))?;
            scenario.validate().map_err(|e| usage(e.to_string()))?;
            let generated = generate(&scenario).context("synth")?;
            let paths = write_generated(&generated, &out).context("synth")?;
            println!(
                "recording {}: {} vehicles, {} lane changes -> {}",
                generated.recording.id,
                generated.recording.tracks.len(),
                generated.ground_truth.len(),
                paths.tracks.display()
            );
        }
        Command::Ingest { root, json } => {
            let recs = load_recordings(&root)?;
            let rows: Vec<_> = recs
                .values()
                .map(|r| {
                    let frames: usize = r.tracks.iter().map(|t| t.frames.len()).sum();
                    json!({
                        "recording_id": r.id,
                        "frame_rate": r.frame_rate,
                        "vehicles": r.tracks.len(),
                        "track_frames": frames,
                        "lanes": r.lanes.len(),
                        "merge_lanes": r.merge_lane_ids(),
                        "dlc_events": dlc_events(r, DEFAULT_T_REACT_S).len(),
                    })
                })
                .collect();
            if json {
                println!("{}", serde_json::to_string_pretty(&rows)?);
            } else {
                for row in rows {
                    println!(
                        "recording {}: {} vehicles, {} track frames, {} lanes, {} lane changes",
                        row["recording_id"], row["vehicles"], row["track_frames"], row["lanes"], row["dlc_events"]
                    );
                }
            }
        }
        Command::Extract {
            root,
            out,
            t_react,
            t_h,
            stride,
            min_stay,
            split,
            train_fraction,
            dup,
            seed,
        } => {
            let cfg = LabelingConfig {
                t_react_s: t_react,
                t_h,
                min_stay_s: min_stay,
                stride_s: stride,
            };
            let recs = load_recordings(&root)?;
            let mut cases = Vec::new();
            for rec in recs.values() {
                cfg.validate(rec.frame_rate).map_err(|e| usage(e.to_string()))?;
                cases.extend(extract_cases(rec, &cfg).context("extract")?);
            }
            write_cases(&out, CaseKind::All, &cases).context("extract")?;
            let count = |l: Label| cases.iter().filter(|c| c.label == l).count();
            println!(
                "{} cases ({} keep, {} left, {} right) -> {}",
                cases.len(),
                count(Label::Keep),
                count(Label::Left),
                count(Label::Right),
                out.display()
            );
            if let Some(dir) = split {
                let s = split_and_balance(&cases, train_fraction, dup, seed).map_err(|e| usage(e.to_string()))?;
                write_cases(&dir.join("train.cases"), CaseKind::Train, &s.train).context("extract")?;
                write_cases(&dir.join("test.cases"), CaseKind::Test, &s.test).context("extract")?;
                println!("split: {} training samples, {} test cases", s.train.len(), s.test.len());
            }
        }
        Command::Train {
            cases,
            ablation,
            seed,
            out,
            epochs,
            batch_size,
            lr,
            t_h,
            loss,
        } => {
            require_file(&cases, "case file")?;
            let cfg = ModelConfig {
                ablation: ablation.into(),
                t_h,
                epochs,
                batch_size,
                lr,
                seed,
                safety_mask_default: true,
            };
            cfg.validate().map_err(|e| usage(e.to_string()))?;
            let (_, train_set) = read_cases(&cases).context("reading cases")?;
            let mut model = build(&cfg)?;
            model.fit_normalizer(&train_set).context("train")?;
            let report = model
                .train(&train_set, &cfg, |e, l| eprintln!("epoch {e}/{epochs} loss {l:.6}"))
                .context("train")?;
            model.save(&out).context("train")?;
            if let Some(path) = loss {
                write_file(&path, loss_csv(&report.loss_history))?;
            }
            println!("{} -> {}", model.checksum(), out.display());
        }
        Command::Predict {
            model,
            cases,
            mask,
            out,
        } => {
            require_file(&model, "weight file")?;
            require_file(&cases, "case file")?;
            let m = Model::load(&model).context("loading model")?;
            let (_, set) = read_cases(&cases).context("reading cases")?;
            let decisions = predict_all(&m, &set, mask.on());
            write_file(&out, predictions_csv(&set, &decisions))?;
            println!("{} predictions -> {}", decisions.len(), out.display());
        }
        Command::Eval {
            model,
            cases,
            recordings,
            mask,
            report,
        } => {
            require_file(&model, "weight file")?;
            require_file(&cases, "case file")?;
            let m = Model::load(&model).context("loading model")?;
            let (_, set) = read_cases(&cases).context("reading cases")?;
            let decisions = predict_all(&m, &set, mask.on());
            let predicted: Vec<Label> = decisions.iter().map(|d| d.class).collect();
            let actual: Vec<Label> = set.iter().map(|c| c.label).collect();
            let cm = confusion(&predicted, &actual).context("eval")?;
            let rows = [(m.ablation().title(), &cm)];
            let mut text = comparison_table(&rows);
            write_file(&report.join("confusion.csv"), comparison_csv(&rows))?;
            if let Some(root) = recordings {
                let recs = load_recordings(&root)?;
                let preds: Vec<PredictedCase> = set
                    .iter()
                    .zip(&predicted)
                    .map(|(c, &p)| PredictedCase {
                        provenance: &c.provenance,
                        actual: c.label,
                        predicted: p,
                    })
                    .collect();
                let impact = impact_report(&preds, &recs).context("eval")?;
                text.push('\n');
                text.push_str(&impact.speed_table());
                text.push('\n');
                text.push_str(&impact.safety_table());
                write_file(&report.join("impact_speed.csv"), impact.speed_csv())?;
                write_file(&report.join("impact_safety.csv"), impact.safety_csv())?;
                write_file(&report.join("impact_cases.csv"), impact.records_csv())?;
            }
            write_file(&report.join("report.txt"), &text)?;
            print!("{text}");
        }
        Command::Experiment { config, ablation } => {
            let mut cfg = RunConfig::from_file(&config)?;
            if let Some(a) = ablation {
                cfg.ablations = vec![a.into()];
            }
            let report = run_experiment(&cfg, |line| eprintln!("{line}"))?;
            let rows: Vec<_> = report
                .results
                .iter()
                .map(|r| (r.ablation.title(), &r.confusion))
                .collect();
            print!("{}", comparison_table(&rows));
            println!("reports in {}", cfg.output_dir.display());
        }
        Command::Validate { config } => {
            RunConfig::from_file(&config)?;
            println!("OK");
        }
        Command::Version => {
            println!("dsadlc {}", env!("CARGO_PKG_VERSION"));
            println!("case file format {CASE_FORMAT_VERSION}");
            println!("weight file format {WEIGHT_FORMAT_VERSION}");
        }
    }
    Ok(())
}
