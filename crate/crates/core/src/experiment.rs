//! Declarative runs: data source, case extraction, split and the ablation
//! sweep with its reports.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::eval::{comparison_csv, comparison_table, confusion, impact_report, EvalError, PredictedCase};
use crate::features::DEFAULT_SAFE_HEADWAY_S;
use crate::ingest::{DatasetManifest, IngestError};
use crate::labeling::{
    extract_cases, read_cases, split_and_balance, write_cases, CaseKind, LabeledCase, LabelingConfig,
    LabelingError, DEFAULT_DUP_FACTOR, DEFAULT_STRIDE_S, DEFAULT_TRAIN_FRACTION, DEFAULT_T_REACT_S,
    MIN_STAY_S,
};
use crate::model::{build, Ablation, Decision, Model, ModelConfig, ModelError};
use crate::synthgen::{generate, GenerationError, ScenarioConfig};
use crate::trajectory::Recording;

/// A configuration problem, with the line it was found on when known.
#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("{}{message}", line.map(|l| format!("line {l}: ")).unwrap_or_default())]
pub struct ConfigError {
    pub line: Option<usize>,
    pub message: String,
}

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error("config: {0}")]
    Config(#[from] ConfigError),
    #[error("ingest: {0}")]
    Ingest(#[from] IngestError),
    #[error("synth: {0}")]
    Synth(#[from] GenerationError),
    #[error("extract: {0}")]
    Extract(#[from] LabelingError),
    #[error("train ({ablation}): {source}")]
    Train {
        ablation: Ablation,
        #[source]
        source: ModelError,
    },
    #[error("eval: {0}")]
    Eval(#[from] EvalError),
    #[error("write {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

fn default_t_react() -> f64 {
    DEFAULT_T_REACT_S
}
fn default_t_h() -> f64 {
    DEFAULT_SAFE_HEADWAY_S
}
fn default_stride() -> f64 {
    DEFAULT_STRIDE_S
}
fn default_min_stay() -> f64 {
    MIN_STAY_S
}
fn default_dup() -> usize {
    DEFAULT_DUP_FACTOR
}
fn default_fraction() -> f64 {
    DEFAULT_TRAIN_FRACTION
}
fn default_ablations() -> Vec<Ablation> {
    Ablation::ALL.to_vec()
}
fn default_epochs() -> usize {
    50
}
fn default_batch() -> usize {
    16
}
fn default_lr() -> f64 {
    0.001
}

/// Experiment settings, read from TOML.
///
/// Exactly one data source is set: `dataset_root` (a directory of
/// recordings), `cases` (a case file) or a `[synth]` scenario table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dataset_root: Option<PathBuf>,
    /// Recording ids to load from `dataset_root`; all when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub recordings: Option<Vec<u32>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cases: Option<PathBuf>,
    pub output_dir: PathBuf,
    #[serde(default = "default_t_react")]
    pub t_react: f64,
    #[serde(default = "default_t_h")]
    pub t_h: f64,
    /// Spacing of lane-keep decision frames, seconds.
    #[serde(default = "default_stride")]
    pub stride: f64,
    #[serde(default = "default_min_stay")]
    pub min_stay: f64,
    #[serde(default = "default_dup")]
    pub dup_factor: usize,
    #[serde(default = "default_fraction")]
    pub train_fraction: f64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_ablations")]
    pub ablations: Vec<Ablation>,
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default = "default_lr")]
    pub lr: f64,
    #[serde(default)]
    pub safety_mask: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub synth: Option<ScenarioConfig>,
}

fn line_of_offset(text: &str, offset: usize) -> usize {
    text[..offset.min(text.len())].matches('\n').count() + 1
}

/// Line on which `key` is assigned, searching bare `key = ...` lines.
fn line_of_key(text: &str, key: &str) -> Option<usize> {
    text.lines().position(|l| {
        l.trim_start()
            .strip_prefix(key)
            .is_some_and(|rest| rest.trim_start().starts_with('='))
    })
    .map(|i| i + 1)
}

impl RunConfig {
    /// Parse and range-check without touching the file system.
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| ConfigError {
            line: e.span().map(|s| line_of_offset(text, s.start)),
            message: e.message().to_string(),
        })?;
        cfg.check(text)?;
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> Result<Self, ConfigError> {
        let text = fs::read_to_string(path).map_err(|e| ConfigError {
            line: None,
            message: format!("cannot read {}: {e}", path.display()),
        })?;
        let mut cfg = Self::parse(&text)?;
        cfg.resolve(path.parent().unwrap_or(Path::new(".")))?;
        Ok(cfg)
    }

    fn check(&self, text: &str) -> Result<(), ConfigError> {
        let err = |key: &str, message: String| ConfigError {
            line: line_of_key(text, key),
            message,
        };
        let positive = [
            ("t_react", self.t_react),
            ("t_h", self.t_h),
            ("stride", self.stride),
            ("min_stay", self.min_stay),
            ("lr", self.lr),
        ];
        for (key, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(err(key, format!("`{key}` must be positive, got {v}")));
            }
        }
        if !(self.train_fraction > 0.0 && self.train_fraction < 1.0) {
            return Err(err(
                "train_fraction",
                format!("`train_fraction` must lie in (0, 1), got {}", self.train_fraction),
            ));
        }
        if self.epochs == 0 {
            return Err(err("epochs", "`epochs` must be positive".into()));
        }
        if self.batch_size == 0 {
            return Err(err("batch_size", "`batch_size` must be positive".into()));
        }
        if self.ablations.is_empty() {
            return Err(err("ablations", "`ablations` is empty".into()));
        }
        for (i, a) in self.ablations.iter().enumerate() {
            if self.ablations[..i].contains(a) {
                return Err(err("ablations", format!("ablation `{a}` listed twice")));
            }
        }
        let sources = [self.dataset_root.is_some(), self.cases.is_some(), self.synth.is_some()];
        match sources.iter().filter(|&&s| s).count() {
            0 => {
                return Err(ConfigError {
                    line: None,
                    message: "no data source: set `dataset_root`, `cases` or a [synth] table".into(),
                })
            }
            1 => {}
            _ => {
                return Err(ConfigError {
                    line: None,
                    message: "`dataset_root`, `cases` and [synth] are mutually exclusive".into(),
                })
            }
        }
        if self.recordings.is_some() && self.dataset_root.is_none() {
            return Err(err("recordings", "`recordings` requires `dataset_root`".into()));
        }
        if let Some(s) = &self.synth {
            s.validate().map_err(|e| ConfigError {
                line: text.lines().position(|l| l.trim() == "[synth]").map(|i| i + 1),
                message: format!("[synth]: {e}"),
            })?;
        }
        Ok(())
    }

    /// Make paths absolute against `base` and check that inputs exist.
    pub fn resolve(&mut self, base: &Path) -> Result<(), ConfigError> {
        let base = fs::canonicalize(base).unwrap_or_else(|_| base.to_path_buf());
        let abs = |p: &Path| if p.is_absolute() { p.to_path_buf() } else { base.join(p) };
        self.output_dir = abs(&self.output_dir);
        if let Some(root) = &self.dataset_root {
            let root = abs(root);
            if !root.is_dir() {
                return Err(ConfigError {
                    line: None,
                    message: format!("dataset_root {} is not a directory", root.display()),
                });
            }
            self.dataset_root = Some(root);
        }
        if let Some(cases) = &self.cases {
            let cases = abs(cases);
            if !cases.is_file() {
                return Err(ConfigError {
                    line: None,
                    message: format!("case file {} not found", cases.display()),
                });
            }
            self.cases = Some(cases);
        }
        Ok(())
    }

    pub fn labeling(&self) -> LabelingConfig {
        LabelingConfig {
            t_react_s: self.t_react,
            t_h: self.t_h,
            min_stay_s: self.min_stay,
            stride_s: self.stride,
        }
    }

    pub fn model_config(&self, ablation: Ablation) -> ModelConfig {
        ModelConfig {
            ablation,
            t_h: self.t_h,
            epochs: self.epochs,
            batch_size: self.batch_size,
            lr: self.lr,
            seed: self.seed,
            safety_mask_default: self.safety_mask,
        }
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }
}

/// Cases plus the recordings they came from, when available.
pub struct Dataset {
    pub cases: Vec<LabeledCase>,
    pub recordings: BTreeMap<u32, Recording>,
}

pub fn load_dataset(cfg: &RunConfig) -> Result<Dataset, ExperimentError> {
    let labeling = cfg.labeling();
    let mut recordings = BTreeMap::new();
    if let Some(path) = &cfg.cases {
        let (_, cases) = read_cases(path)?;
        return Ok(Dataset { cases, recordings });
    }
    if let Some(root) = &cfg.dataset_root {
        let manifest = DatasetManifest::discover(root)?;
        for rec in manifest.load_all()? {
            if cfg.recordings.as_ref().is_some_and(|ids| !ids.contains(&rec.id)) {
                continue;
            }
            recordings.insert(rec.id, rec);
        }
    } else if let Some(scenario) = &cfg.synth {
        let g = generate(scenario)?;
        recordings.insert(g.recording.id, g.recording);
    }
    let mut cases = Vec::new();
    for rec in recordings.values() {
        cases.extend(extract_cases(rec, &labeling)?);
    }
    Ok(Dataset { cases, recordings })
}

pub fn predict_all(model: &Model, cases: &[LabeledCase], mask: bool) -> Vec<Decision> {
    cases.iter().map(|c| model.predict(&c.bundle, mask)).collect()
}

pub fn predictions_csv(cases: &[LabeledCase], decisions: &[Decision]) -> String {
    let mut out = String::from(
        "recording_id,vehicle_id,decision_frame,actual,predicted,p_keep,p_left,p_right,masked\n",
    );
    for (c, d) in cases.iter().zip(decisions) {
        let p = &c.provenance;
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{},{}",
            p.recording_id,
            p.vehicle_id,
            p.decision_frame,
            c.label.name(),
            d.class.name(),
            d.probabilities[0],
            d.probabilities[1],
            d.probabilities[2],
            d.masked
        );
    }
    out
}

pub fn loss_csv(history: &[f64]) -> String {
    let mut out = String::from("epoch,loss\n");
    for (i, l) in history.iter().enumerate() {
        let _ = writeln!(out, "{},{l}", i + 1);
    }
    out
}

/// Accuracy of one trained variant on the test split.
#[derive(Debug, Clone)]
pub struct AblationResult {
    pub ablation: Ablation,
    pub confusion: crate::eval::ConfusionMatrix,
    pub loss_history: Vec<f64>,
    pub weight_checksum: String,
}

impl AblationResult {
    pub fn accuracy(&self) -> f64 {
        self.confusion.overall_accuracy().unwrap_or(0.0)
    }
}

#[derive(Debug, Clone)]
pub struct ExperimentReport {
    pub config: RunConfig,
    pub case_counts: [usize; 3],
    pub train_size: usize,
    pub test_size: usize,
    pub results: Vec<AblationResult>,
    /// Written report files, relative to the output directory.
    pub files: Vec<String>,
}

impl ExperimentReport {
    pub fn result(&self, ablation: Ablation) -> Option<&AblationResult> {
        self.results.iter().find(|r| r.ablation == ablation)
    }
}

fn write(dir: &Path, name: &str, content: &[u8], files: &mut Vec<String>) -> Result<(), ExperimentError> {
    let path = dir.join(name);
    fs::write(&path, content).map_err(|source| ExperimentError::Io { path, source })?;
    files.push(name.to_string());
    Ok(())
}

/// Train and evaluate every configured ablation on one shared split.
///
/// `progress` receives human-readable status lines; nothing timing-dependent
/// is written to the output directory.
pub fn run_experiment(
    cfg: &RunConfig,
    mut progress: impl FnMut(&str),
) -> Result<ExperimentReport, ExperimentError> {
    let out = &cfg.output_dir;
    fs::create_dir_all(out).map_err(|source| ExperimentError::Io {
        path: out.clone(),
        source,
    })?;
    let data = load_dataset(cfg)?;
    let mut counts = [0usize; 3];
    for c in &data.cases {
        counts[c.label.index()] += 1;
    }
    progress(&format!(
        "cases: {} keep, {} left, {} right",
        counts[0], counts[1], counts[2]
    ));
    let split = split_and_balance(&data.cases, cfg.train_fraction, cfg.dup_factor, cfg.seed)?;
    let mut files = Vec::new();
    write(out, "config.toml", cfg.to_toml().as_bytes(), &mut files)?;
    for (name, kind, set) in [
        ("train.cases", CaseKind::Train, &split.train),
        ("test.cases", CaseKind::Test, &split.test),
    ] {
        write_cases(&out.join(name), kind, set)?;
        files.push(name.to_string());
    }
    let actuals: Vec<_> = split.test.iter().map(|c| c.label).collect();
    let mut results = Vec::new();
    let mut full_predictions = None;
    for &ablation in &cfg.ablations {
        let mc = cfg.model_config(ablation);
        let train_err = |source| ExperimentError::Train { ablation, source };
        let mut model = build(&mc).map_err(train_err)?;
        model.fit_normalizer(&split.train).map_err(train_err)?;
        let report = model
            .train(&split.train, &mc, |epoch, loss| {
                progress(&format!("{ablation}: epoch {epoch}/{} loss {loss:.6}", mc.epochs))
            })
            .map_err(train_err)?;
        let decisions = predict_all(&model, &split.test, cfg.safety_mask);
        let predicted: Vec<_> = decisions.iter().map(|d| d.class).collect();
        let m = confusion(&predicted, &actuals)?;
        let bytes = model.to_bytes();
        write(out, &format!("model_{ablation}.w"), &bytes, &mut files)?;
        write(out, &format!("loss_{ablation}.csv"), loss_csv(&report.loss_history).as_bytes(), &mut files)?;
        write(
            out,
            &format!("predictions_{ablation}.csv"),
            predictions_csv(&split.test, &decisions).as_bytes(),
            &mut files,
        )?;
        progress(&format!(
            "{ablation}: test accuracy {:.2}%",
            100.0 * m.overall_accuracy().unwrap_or(0.0)
        ));
        if full_predictions.is_none() || ablation == Ablation::Full {
            full_predictions = Some((ablation, predicted));
        }
        results.push(AblationResult {
            ablation,
            confusion: m,
            loss_history: report.loss_history,
            weight_checksum: model.checksum(),
        });
    }
    let rows: Vec<(&str, &crate::eval::ConfusionMatrix)> =
        results.iter().map(|r| (r.ablation.title(), &r.confusion)).collect();
    let table = comparison_table(&rows);
    write(out, "comparison.csv", comparison_csv(&rows).as_bytes(), &mut files)?;

    let mut impact_text = String::new();
    if let (false, Some((ablation, predicted))) = (data.recordings.is_empty(), full_predictions) {
        let preds: Vec<PredictedCase> = split
            .test
            .iter()
            .zip(&predicted)
            .map(|(c, &p)| PredictedCase {
                provenance: &c.provenance,
                actual: c.label,
                predicted: p,
            })
            .collect();
        let impact = impact_report(&preds, &data.recordings)?;
        write(out, "impact_speed.csv", impact.speed_csv().as_bytes(), &mut files)?;
        write(out, "impact_safety.csv", impact.safety_csv().as_bytes(), &mut files)?;
        write(out, "impact_cases.csv", impact.records_csv().as_bytes(), &mut files)?;
        let _ = write!(
            impact_text,
            "\nLane-change impact ({ablation})\n\n{}\n{}",
            impact.speed_table(),
            impact.safety_table()
        );
    }

    let mut text = String::new();
    let _ = writeln!(text, "Cases: {} keep, {} left, {} right", counts[0], counts[1], counts[2]);
    let _ = writeln!(
        text,
        "Split: {} training samples (after duplication), {} test cases\n",
        split.train.len(),
        split.test.len()
    );
    text.push_str(&table);
    text.push_str(&impact_text);
    let _ = writeln!(text, "\nWeights (SHA-256)");
    for r in &results {
        let _ = writeln!(text, "  {:<12} {}", r.ablation.name(), r.weight_checksum);
    }
    let _ = write!(text, "\nResolved configuration (seed {})\n\n{}", cfg.seed, cfg.to_toml());
    write(out, "report.txt", text.as_bytes(), &mut files)?;

    Ok(ExperimentReport {
        config: cfg.clone(),
        case_counts: counts,
        train_size: split.train.len(),
        test_size: split.test.len(),
        results,
        files,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = "output_dir = \"out\"\ncases = \"c.bin\"\n";

    #[test]
    fn defaults_fill_in() {
        let c = RunConfig::parse(MINIMAL).unwrap();
        assert_eq!(c.t_react, 1.0);
        assert_eq!(c.t_h, 1.5);
        assert_eq!(c.dup_factor, 16);
        assert_eq!(c.train_fraction, 0.9);
        assert_eq!(c.ablations, Ablation::ALL.to_vec());
        assert_eq!((c.epochs, c.batch_size, c.lr), (50, 16, 0.001));
        assert!(!c.safety_mask);
    }

    #[test]
    fn unknown_key_is_named_with_line() {
        let e = RunConfig::parse(&format!("{MINIMAL}t_hh = 1.5\n")).unwrap_err();
        assert!(e.message.contains("t_hh"), "{e}");
        assert_eq!(e.line, Some(3));
    }

    #[test]
    fn range_errors_point_at_key() {
        let e = RunConfig::parse(&format!("{MINIMAL}\ntrain_fraction = 1.2\n")).unwrap_err();
        assert!(e.message.contains("train_fraction"), "{e}");
        assert_eq!(e.line, Some(4));
        assert!(e.to_string().starts_with("line 4: "));
        let e = RunConfig::parse(&format!("{MINIMAL}epochs = 0\n")).unwrap_err();
        assert_eq!(e.line, Some(3));
    }

    #[test]
    fn bad_ablation_name() {
        let e = RunConfig::parse(&format!("{MINIMAL}ablations = [\"full\", \"nope\"]\n")).unwrap_err();
        assert_eq!(e.line, Some(3));
        assert!(e.message.contains("nope"), "{e}");
        let e = RunConfig::parse(&format!("{MINIMAL}ablations = [\"full\", \"full\"]\n")).unwrap_err();
        assert!(e.message.contains("twice"));
    }

    #[test]
    fn exactly_one_source() {
        assert!(RunConfig::parse("output_dir = \"o\"\n").unwrap_err().message.contains("no data source"));
        let both = "output_dir = \"o\"\ncases = \"a\"\ndataset_root = \"b\"\n";
        assert!(RunConfig::parse(both).unwrap_err().message.contains("exclusive"));
    }

    #[test]
    fn round_trips_through_toml() {
        let text = r#"
output_dir = "out"
seed = 4
ablations = ["full", "no-ds"]

[synth]
lane_count = 3
road_length = 800.0
duration = 60.0
spawn_rate = 0.5
rng_seed = 2

[[synth.style_mixture]]
probability = 1.0
style = { aggressiveness = 0.5, desired_speed = 30.0, desired_time_headway = 1.4, max_accel = 1.5, comfortable_decel = 2.0, politeness = 0.3, lane_change_threshold = 0.2, reaction_time = 1.0 }
"#;
        let c = RunConfig::parse(text).unwrap();
        assert_eq!(RunConfig::parse(&c.to_toml()).unwrap(), c);
        let bad = text.replace("spawn_rate = 0.5", "spawn_rate = -1.0");
        let e = RunConfig::parse(&bad).unwrap_err();
        assert_eq!(e.line, Some(6));
    }

    #[test]
    fn resolve_checks_paths() {
        let dir = tempfile::tempdir().unwrap();
        let mut c = RunConfig::parse(MINIMAL).unwrap();
        assert!(c.resolve(dir.path()).unwrap_err().message.contains("not found"));
        fs::write(dir.path().join("c.bin"), b"x").unwrap();
        let mut c = RunConfig::parse(MINIMAL).unwrap();
        c.resolve(dir.path()).unwrap();
        assert!(c.cases.unwrap().is_absolute());
        assert!(c.output_dir.ends_with("out"));
    }
}
